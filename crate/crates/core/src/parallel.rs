//! Ordered data-parallel helpers.
//!
//! With the `parallel` feature the map runs on the rayon pool; without it
//! the same closure runs in a plain loop. Results are always returned in
//! input order, so any reduction done by the caller sees the same operand
//! order in both builds.

/// How a data-parallel map is executed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// `Parallel` when the feature is compiled in, otherwise `Sequential`.
    pub fn effective(self) -> Execution {
        if cfg!(feature = "parallel") {
            self
        } else {
            Execution::Sequential
        }
    }
}

#[cfg(feature = "parallel")]
pub fn map_ordered<T, R, F>(items: &[T], exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    match exec {
        Execution::Parallel => items.par_iter().enumerate().map(|(i, t)| f(i, t)).collect(),
        Execution::Sequential => items.iter().enumerate().map(|(i, t)| f(i, t)).collect(),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn map_ordered<T, R, F>(items: &[T], _exec: Execution, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync + Send,
{
    items.iter().enumerate().map(|(i, t)| f(i, t)).collect()
}

/// Runs `f(chunk_index, chunk)` over `chunk`-sized pieces of `data`. Chunks
/// are disjoint, so the result does not depend on the execution mode.
#[cfg(feature = "parallel")]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, exec: Execution, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    use rayon::prelude::*;
    match exec {
        Execution::Parallel => data
            .par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
        Execution::Sequential => data
            .chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c)),
    }
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, _exec: Execution, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    data.chunks_mut(chunk)
        .enumerate()
        .for_each(|(i, c)| f(i, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let items: Vec<u32> = (0..100).collect();
        let a = map_ordered(&items, Execution::Parallel, |i, &x| (i as u32) * 2 + x);
        let b = map_ordered(&items, Execution::Sequential, |i, &x| (i as u32) * 2 + x);
        assert_eq!(a, b);
        assert_eq!(a[10], 30);
    }

    #[test]
    fn chunks_cover_everything_once() {
        for exec in [Execution::Sequential, Execution::Parallel] {
            let mut data = vec![0usize; 10];
            for_each_chunk_mut(&mut data, 3, exec, |i, c| {
                c.iter_mut().for_each(|x| *x += i + 1)
            });
            assert_eq!(data, vec![1, 1, 1, 2, 2, 2, 3, 3, 3, 4]);
        }
    }
}
