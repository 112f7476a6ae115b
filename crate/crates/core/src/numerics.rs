//! Deterministic random streams, dense storage, and the finite-difference
//! gradient oracle.
//!
//! The generator is xoshiro256** seeded through SplitMix64. Both algorithms
//! and all their constants live in this file so that a seed reproduces the
//! same draws on every platform. Gaussian draws use the Box–Muller pair
//! transform; the second value of each pair is cached for the next call.

use serde::{Deserialize, Serialize};

use crate::error::{KdisError, Result};

/// Row-major dense array of `f64` values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(KdisError::invalid(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != values.len() {
            return Err(KdisError::invalid(format!(
                "shape {shape:?} needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(KdisError::Numeric {
                index,
                detail: "tensor values must be finite".into(),
            });
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    /// Builds a `rows × cols` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(KdisError::invalid("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of rows when viewed as a matrix over the leading axis.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of each leading-axis slice.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.values[i * w..(i + 1) * w]
    }

    pub fn iter_rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.row_len())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

const SPLITMIX_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;
const SPLITMIX_MUL1: u64 = 0xBF58_476D_1CE4_E5B9;
const SPLITMIX_MUL2: u64 = 0x94D0_49BB_1331_11EB;
/// Offsets the stream id so that stream 0 is not a fixed point of the mixer.
const STREAM_SALT: u64 = 0xD1B5_4A32_D192_ED03;

fn splitmix_mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(SPLITMIX_MUL1);
    z = (z ^ (z >> 27)).wrapping_mul(SPLITMIX_MUL2);
    z ^ (z >> 31)
}

fn splitmix_next(state: &mut u64) -> u64 {
    *state = state.wrapping_add(SPLITMIX_GAMMA);
    splitmix_mix(*state)
}

/// A single-owner xoshiro256** stream.
#[derive(Debug, Clone, PartialEq)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    state: [u64; 4],
    spare_gaussian: Option<f64>,
}

/// Creates the stream for `(seed, stream_id)`. The result is a pure function
/// of the pair.
pub fn derive_stream(seed: u64, stream_id: u64) -> RngStream {
    let mut sm = splitmix_mix(seed) ^ splitmix_mix(stream_id ^ STREAM_SALT).rotate_left(23);
    let mut state = [0u64; 4];
    for word in &mut state {
        *word = splitmix_next(&mut sm);
    }
    // xoshiro must not start from the all-zero state.
    if state.iter().all(|&w| w == 0) {
        state[0] = SPLITMIX_GAMMA;
    }
    RngStream {
        seed,
        stream_id,
        state,
        spare_gaussian: None,
    }
}

impl RngStream {
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream keyed by this stream's identity and `child`; does not
    /// advance `self`.
    pub fn fork(&self, child: u64) -> RngStream {
        derive_stream(
            splitmix_mix(self.seed ^ self.stream_id.rotate_left(32)),
            child,
        )
    }

    pub fn next_u64(&mut self) -> u64 {
        let s = &mut self.state;
        let result = s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = s[1] << 17;
        s[2] ^= s[0];
        s[3] ^= s[1];
        s[1] ^= s[2];
        s[0] ^= s[3];
        s[2] ^= t;
        s[3] = s[3].rotate_left(45);
        result
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.next_f64()
    }

    /// Uniform integer in `[0, n)` by rejection sampling.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX - n + 1) % n;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return x % n;
            }
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare_gaussian.take() {
            return z;
        }
        // u1 in (0, 1] keeps the log finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare_gaussian = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        self.shuffle(&mut order);
        order
    }
}

/// Draws `count` values from N(mean, std²).
pub fn sample_gaussian(rng: &mut RngStream, mean: f64, std: f64, count: usize) -> Result<Tensor> {
    if !(std >= 0.0) || !std.is_finite() {
        return Err(KdisError::invalid(format!(
            "standard deviation must be finite and nonnegative, got {std}"
        )));
    }
    if count == 0 {
        return Err(KdisError::invalid("count must be positive"));
    }
    let values = (0..count)
        .map(|_| mean + std * rng.standard_normal())
        .collect();
    Tensor::new(vec![count], values)
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(KdisError::invalid(format!(
            "step must be positive, got {h}"
        )));
    }
    let mut probe = x.values().to_vec();
    let mut grad = Vec::with_capacity(probe.len());
    for i in 0..probe.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(KdisError::Numeric {
                index: i,
                detail: format!("f(x±h) = ({plus}, {minus})"),
            });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, &b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// FNV-1a over the little-endian bytes of a float slice.
pub fn fnv1a64_f64(values: &[f64]) -> u64 {
    values.iter().fold(FNV_OFFSET, |mut h, v| {
        for b in v.to_le_bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(FNV_PRIME);
        }
        h
    })
}
