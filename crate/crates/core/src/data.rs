//! Sensor streams, overlapping windows, standardization and fold plans.
//!
//! Sample and window indices in this module's public API are 1-based,
//! matching the window formula `start_j = (j − 1)(n − v) + 1`.
//!
//! A trial id may carry a status suffix after a `/` (for example `3/anomaly`);
//! the part before the slash is the trial *group* used by fold plans, so a
//! nominal print and an anomalous print of the same trial move together.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{KdisError, Result};
use crate::numerics::Tensor;

/// Header of the sensor CSV schema.
pub const CSV_HEADER: [&str; 7] = ["unit_id", "trial_id", "t", "ax", "ay", "az", "label"];

#[derive(Debug, Clone, PartialEq)]
pub struct SensorStream {
    pub unit_id: String,
    pub trial_id: String,
    /// `k` channels of common length `L`.
    pub channels: Vec<Vec<f64>>,
    /// Per-sample class in `1..=M`.
    pub labels: Vec<usize>,
}

impl SensorStream {
    pub fn new(
        unit_id: impl Into<String>,
        trial_id: impl Into<String>,
        channels: Vec<Vec<f64>>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self> {
        let stream = Self {
            unit_id: unit_id.into(),
            trial_id: trial_id.into(),
            channels,
            labels,
        };
        stream.validate(num_classes)?;
        Ok(stream)
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.channels.is_empty() {
            return Err(KdisError::invalid("stream has no channels"));
        }
        let len = self.labels.len();
        if let Some(c) = self.channels.iter().position(|ch| ch.len() != len) {
            return Err(KdisError::invalid(format!(
                "channel {c} has length {} but there are {len} labels",
                self.channels[c].len()
            )));
        }
        if let Some(i) = self.labels.iter().position(|&y| y == 0 || y > num_classes) {
            return Err(KdisError::invalid(format!(
                "label {} at sample {} outside 1..={num_classes}",
                self.labels[i],
                i + 1
            )));
        }
        if self.channels.iter().flatten().any(|v| !v.is_finite()) {
            return Err(KdisError::invalid("stream contains non-finite samples"));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn trial_group(&self) -> &str {
        trial_group(&self.trial_id)
    }
}

/// The part of a trial id before the first `/`.
pub fn trial_group(trial_id: &str) -> &str {
    trial_id.split('/').next().unwrap_or(trial_id)
}

// ---------------------------------------------------------------------------
// CSV
// ---------------------------------------------------------------------------

pub fn ingest_csv(path: impl AsRef<Path>, num_classes: usize) -> Result<Vec<SensorStream>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| KdisError::io(path, e))?;
    parse_csv(std::io::BufReader::new(file), num_classes)
}

struct PendingStream {
    unit_id: String,
    trial_id: String,
    /// `(t, line, [ax, ay, az], label)`
    rows: Vec<(u64, usize, [f64; 3], usize)>,
}

/// Parses the sensor schema; one stream per `(unit_id, trial_id)` in order of
/// first appearance, samples sorted by `t`.
pub fn parse_csv<R: Read>(reader: R, num_classes: usize) -> Result<Vec<SensorStream>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let header = rdr
        .headers()
        .map_err(|e| KdisError::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut column = [0usize; 7];
    for (slot, name) in column.iter_mut().zip(CSV_HEADER) {
        *slot = header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| KdisError::Parse {
                line: 1,
                message: format!("missing column `{name}`"),
            })?;
    }

    let mut groups: Vec<PendingStream> = Vec::new();
    let mut index: HashMap<(String, String), usize> = HashMap::new();
    for record in rdr.records() {
        let record = record.map_err(|e| KdisError::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| record.get(column[i]).unwrap_or("");
        let err = |message: String| KdisError::Parse { line, message };

        let t: u64 = field(2)
            .parse()
            .map_err(|_| err(format!("`t` is not a nonnegative integer: `{}`", field(2))))?;
        let mut axes = [0.0; 3];
        for (a, col) in axes.iter_mut().zip(3..6) {
            *a = field(col)
                .parse()
                .ok()
                .filter(|v: &f64| v.is_finite())
                .ok_or_else(|| {
                    err(format!(
                        "`{}` is not a finite number: `{}`",
                        CSV_HEADER[col],
                        field(col)
                    ))
                })?;
        }
        let label: usize = field(6)
            .parse()
            .map_err(|_| err(format!("`label` is not an integer: `{}`", field(6))))?;
        if label == 0 || label > num_classes {
            return Err(err(format!("label {label} outside 1..={num_classes}")));
        }
        let key = (field(0).to_string(), field(1).to_string());
        let slot = *index.entry(key.clone()).or_insert_with(|| {
            groups.push(PendingStream {
                unit_id: key.0.clone(),
                trial_id: key.1.clone(),
                rows: Vec::new(),
            });
            groups.len() - 1
        });
        groups[slot].rows.push((t, line, axes, label));
    }

    groups
        .into_iter()
        .map(|mut g| {
            g.rows.sort_by_key(|r| r.0);
            for pair in g.rows.windows(2) {
                let (prev, cur) = (&pair[0], &pair[1]);
                if cur.0 == prev.0 {
                    return Err(KdisError::Parse {
                        line: cur.1.max(prev.1),
                        message: format!(
                            "duplicate sample t={} for unit `{}` trial `{}`",
                            cur.0, g.unit_id, g.trial_id
                        ),
                    });
                }
                if cur.0 != prev.0 + 1 {
                    return Err(KdisError::Parse {
                        line: cur.1,
                        message: format!(
                            "t jumps from {} to {} for unit `{}` trial `{}`",
                            prev.0, cur.0, g.unit_id, g.trial_id
                        ),
                    });
                }
            }
            let mut channels: Vec<Vec<f64>> =
                (0..3).map(|_| Vec::with_capacity(g.rows.len())).collect();
            let mut labels = Vec::with_capacity(g.rows.len());
            for (_, _, axes, label) in &g.rows {
                for (ch, v) in channels.iter_mut().zip(axes) {
                    ch.push(*v);
                }
                labels.push(*label);
            }
            Ok(SensorStream {
                unit_id: g.unit_id,
                trial_id: g.trial_id,
                channels,
                labels,
            })
        })
        .collect()
}

/// Writes streams in the sensor schema. Streams must have exactly three
/// channels; `t` restarts at 0 for each stream.
pub fn write_csv<W: Write>(streams: &[SensorStream], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io_err = |e: csv::Error| KdisError::invalid(format!("csv write failed: {e}"));
    w.write_record(CSV_HEADER).map_err(io_err)?;
    for s in streams {
        if s.num_channels() != 3 {
            return Err(KdisError::invalid(format!(
                "stream {}/{} has {} channels; the CSV schema needs 3",
                s.unit_id,
                s.trial_id,
                s.num_channels()
            )));
        }
        for t in 0..s.len() {
            w.write_record([
                s.unit_id.clone(),
                s.trial_id.clone(),
                t.to_string(),
                s.channels[0][t].to_string(),
                s.channels[1][t].to_string(),
                s.channels[2][t].to_string(),
                s.labels[t].to_string(),
            ])
            .map_err(io_err)?;
        }
    }
    w.flush()
        .map_err(|e| KdisError::invalid(format!("csv flush failed: {e}")))?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Channel reduction and windowing
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ChannelReduction {
    /// Euclidean norm across channels.
    #[default]
    Magnitude,
    /// Keep one channel (0-based index).
    Single(usize),
    KeepAll,
}

pub fn reduce_channels(stream: &SensorStream, mode: ChannelReduction) -> Result<SensorStream> {
    let channels = match mode {
        ChannelReduction::KeepAll => stream.channels.clone(),
        ChannelReduction::Single(i) => {
            let ch = stream.channels.get(i).ok_or_else(|| {
                KdisError::invalid(format!(
                    "channel {i} requested from a {}-channel stream",
                    stream.num_channels()
                ))
            })?;
            vec![ch.clone()]
        }
        ChannelReduction::Magnitude => {
            let mag = (0..stream.len())
                .map(|t| {
                    stream
                        .channels
                        .iter()
                        .map(|c| c[t] * c[t])
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            vec![mag]
        }
    };
    Ok(SensorStream {
        unit_id: stream.unit_id.clone(),
        trial_id: stream.trial_id.clone(),
        channels,
        labels: stream.labels.clone(),
    })
}

/// Window size `n` and overlap `v` between consecutive windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub n: usize,
    pub v: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { n: 30, v: 28 }
    }
}

impl WindowConfig {
    pub fn new(n: usize, v: usize) -> Result<Self> {
        let cfg = Self { n, v };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(KdisError::invalid("window size must be positive"));
        }
        if self.v >= self.n {
            return Err(KdisError::invalid(format!(
                "overlap v = {} must be smaller than window size n = {}",
                self.v, self.n
            )));
        }
        Ok(())
    }

    pub fn step(&self) -> usize {
        self.n - self.v
    }

    /// `floor((L − n)/(n − v)) + 1`, or 0 when `L < n`.
    pub fn window_count(&self, len: usize) -> usize {
        if len < self.n {
            0
        } else {
            (len - self.n) / self.step() + 1
        }
    }

    /// 1-based first sample of window `j` (1-based).
    pub fn start_of(&self, j: usize) -> usize {
        (j - 1) * self.step() + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LabelRule {
    /// Most frequent sample label; ties go to the lower class.
    #[default]
    Majority,
    /// Drop windows that span a label change.
    Strict,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowOrigin {
    pub unit_id: String,
    pub trial_id: String,
    /// 1-based index of the first sample.
    pub start: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TimeWindow {
    /// `c × n`.
    pub values: Tensor,
    pub label: usize,
    pub origin: WindowOrigin,
}

pub fn make_windows(
    stream: &SensorStream,
    cfg: WindowConfig,
    rule: LabelRule,
) -> Result<Vec<TimeWindow>> {
    cfg.validate()?;
    let len = stream.len();
    if len < cfg.n {
        return Err(KdisError::invalid(format!(
            "stream {}/{} has {len} samples, fewer than the window size {}",
            stream.unit_id, stream.trial_id, cfg.n
        )));
    }
    let classes = stream.labels.iter().copied().max().unwrap_or(1);
    let c = stream.num_channels();
    let mut out = Vec::with_capacity(cfg.window_count(len));
    for j in 1..=cfg.window_count(len) {
        let start = cfg.start_of(j);
        let span = start - 1..start - 1 + cfg.n;
        let labels = &stream.labels[span.clone()];
        let label = match rule {
            LabelRule::Strict => {
                if labels.iter().any(|&y| y != labels[0]) {
                    continue;
                }
                labels[0]
            }
            LabelRule::Majority => {
                let mut counts = vec![0usize; classes + 1];
                for &y in labels {
                    counts[y] += 1;
                }
                // max_by_key keeps the last maximum, so scan in reverse.
                (1..=classes).rev().max_by_key(|&y| counts[y]).unwrap()
            }
        };
        let mut values = Vec::with_capacity(c * cfg.n);
        for ch in &stream.channels {
            values.extend_from_slice(&ch[span.clone()]);
        }
        out.push(TimeWindow {
            values: Tensor::new(vec![c, cfg.n], values)?,
            label,
            origin: WindowOrigin {
                unit_id: stream.unit_id.clone(),
                trial_id: stream.trial_id.clone(),
                start,
            },
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Standardization
// ---------------------------------------------------------------------------

/// Per-channel z-scoring with statistics taken from a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(windows: &[TimeWindow]) -> Result<Self> {
        fit_standardizer(windows)
    }

    pub fn num_channels(&self) -> usize {
        self.mean.len()
    }

    /// Standardizes one `c × n` sample in place.
    pub fn apply_in_place(&self, sample: &mut [f64]) {
        let n = sample.len() / self.num_channels();
        for (c, chunk) in sample.chunks_exact_mut(n).enumerate() {
            let (mu, sd) = (self.mean[c], self.std[c]);
            for v in chunk {
                *v = (*v - mu) / sd;
            }
        }
    }

    /// Undoes [`apply_in_place`](Self::apply_in_place).
    pub fn invert_in_place(&self, sample: &mut [f64]) {
        let n = sample.len() / self.num_channels();
        for (c, chunk) in sample.chunks_exact_mut(n).enumerate() {
            let (mu, sd) = (self.mean[c], self.std[c]);
            for v in chunk {
                *v = *v * sd + mu;
            }
        }
    }
}

/// Per-channel mean and population standard deviation over every value of
/// every training window.
pub fn fit_standardizer(windows: &[TimeWindow]) -> Result<Standardizer> {
    let first = windows
        .first()
        .ok_or_else(|| KdisError::invalid("cannot fit a standardizer on zero windows"))?;
    let c = first.values.shape()[0];
    if windows.iter().any(|w| w.values.shape()[0] != c) {
        return Err(KdisError::invalid("windows disagree on channel count"));
    }
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for ch in 0..c {
        let values = || {
            windows
                .iter()
                .flat_map(|w| w.values.row(ch).iter().copied())
        };
        let count = windows.iter().map(|w| w.values.row_len()).sum::<usize>() as f64;
        let mu = values().sum::<f64>() / count;
        let var = values().map(|v| (v - mu) * (v - mu)).sum::<f64>() / count;
        let sd = var.sqrt();
        if !(sd > 1e-12 * (1.0 + mu.abs())) {
            return Err(KdisError::DegenerateData(format!(
                "channel {ch} has zero variance (mean {mu})"
            )));
        }
        mean[ch] = mu;
        std[ch] = sd;
    }
    Ok(Standardizer { mean, std })
}

pub fn apply_standardizer(s: &Standardizer, windows: &[TimeWindow]) -> Result<Vec<TimeWindow>> {
    windows
        .iter()
        .map(|w| {
            if w.values.shape()[0] != s.num_channels() {
                return Err(KdisError::invalid(format!(
                    "window has {} channels, standardizer has {}",
                    w.values.shape()[0],
                    s.num_channels()
                )));
            }
            let mut out = w.clone();
            s.apply_in_place(out.values.values_mut());
            Ok(out)
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Windows packed contiguously for training: `N × c × n` inputs and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Vec<f64>,
    labels: Vec<usize>,
    channels: usize,
    length: usize,
}

impl Dataset {
    pub fn from_windows(windows: &[TimeWindow]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| KdisError::invalid("dataset needs at least one window"))?;
        let (channels, length) = (first.values.shape()[0], first.values.shape()[1]);
        let mut inputs = Vec::with_capacity(windows.len() * channels * length);
        for w in windows {
            if w.values.shape() != [channels, length] {
                return Err(KdisError::invalid("windows disagree on shape"));
            }
            inputs.extend_from_slice(w.values.values());
        }
        Ok(Self {
            inputs,
            labels: windows.iter().map(|w| w.label).collect(),
            channels,
            length,
        })
    }

    /// Standardizes raw windows with `s` and packs them.
    pub fn standardized(windows: &[TimeWindow], s: &Standardizer) -> Result<Self> {
        Self::from_windows(&apply_standardizer(s, windows)?)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let w = self.channels * self.length;
        &self.inputs[i * w..(i + 1) * w]
    }

    /// Gathers the listed samples into a `B × c × n` tensor and labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let mut values = Vec::with_capacity(indices.len() * self.channels * self.length);
        for &i in indices {
            values.extend_from_slice(self.sample(i));
        }
        Ok((
            Tensor::new(vec![indices.len(), self.channels, self.length], values)?,
            indices.iter().map(|&i| self.labels[i]).collect(),
        ))
    }

    /// Concatenates datasets of equal sample shape.
    pub fn concat(parts: &[&Dataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| KdisError::invalid("nothing to concatenate"))?;
        if parts
            .iter()
            .any(|p| p.channels != first.channels || p.length != first.length)
        {
            return Err(KdisError::invalid("datasets disagree on sample shape"));
        }
        Ok(Self {
            inputs: parts
                .iter()
                .flat_map(|p| p.inputs.iter().copied())
                .collect(),
            labels: parts
                .iter()
                .flat_map(|p| p.labels.iter().copied())
                .collect(),
            channels: first.channels,
            length: first.length,
        })
    }
}

// ---------------------------------------------------------------------------
// Fold plans
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train_trials: Vec<String>,
    pub test_trials: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
    pub teacher_trials: Vec<String>,
}

/// One fold per student trial: that trial trains the student, the rest test.
/// Teacher trials are the same for every fold.
pub fn build_folds(student_trials: &[String], teacher_trials: &[String]) -> Result<FoldPlan> {
    if student_trials.len() < 2 {
        return Err(KdisError::invalid(format!(
            "need at least 2 student trials for a fold plan, got {}",
            student_trials.len()
        )));
    }
    let mut seen = std::collections::HashSet::new();
    if let Some(dup) = student_trials.iter().find(|t| !seen.insert(t.as_str())) {
        return Err(KdisError::invalid(format!(
            "duplicate student trial `{dup}`"
        )));
    }
    let folds = student_trials
        .iter()
        .enumerate()
        .map(|(index, train)| Fold {
            index,
            train_trials: vec![train.clone()],
            test_trials: student_trials
                .iter()
                .filter(|t| *t != train)
                .cloned()
                .collect(),
        })
        .collect();
    Ok(FoldPlan {
        folds,
        teacher_trials: teacher_trials.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(len: usize) -> SensorStream {
        SensorStream::new(
            "u1",
            "t1",
            vec![(1..=len).map(|i| i as f64).collect()],
            vec![1; len],
            2,
        )
        .unwrap()
    }

    #[test]
    fn csv_single_trial() {
        let text =
            "unit_id,trial_id,t,ax,ay,az,label\nu,1,0,1,2,3,1\nu,1,1,1,2,3,1\nu,1,2,1,2,3.5,2\n";
        let streams = parse_csv(text.as_bytes(), 2).unwrap();
        assert_eq!(streams.len(), 1);
        assert_eq!(streams[0].len(), 3);
        assert_eq!(streams[0].channels[2], vec![3.0, 3.0, 3.5]);
        assert_eq!(streams[0].labels, vec![1, 1, 2]);
    }

    #[test]
    fn csv_label_out_of_range_names_line() {
        let text = "unit_id,trial_id,t,ax,ay,az,label\nu,1,0,1,2,3,1\nu,1,1,1,2,3,3\n";
        match parse_csv(text.as_bytes(), 2) {
            Err(KdisError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_groups_interleaved_trials_in_time_order() {
        let text = "unit_id,trial_id,t,ax,ay,az,label\n\
                    u,a,1,10,0,0,1\n\
                    u,b,0,20,0,0,2\n\
                    u,a,0,11,0,0,1\n\
                    u,b,2,22,0,0,2\n\
                    u,a,2,12,0,0,1\n\
                    u,b,1,21,0,0,2\n";
        let s = parse_csv(text.as_bytes(), 2).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s[0].trial_id.as_str(), s[1].trial_id.as_str()), ("a", "b"));
        assert_eq!(s[0].channels[0], vec![11.0, 10.0, 12.0]);
        assert_eq!(s[1].channels[0], vec![20.0, 21.0, 22.0]);
        assert_eq!(s[1].labels, vec![2, 2, 2]);
    }

    #[test]
    fn csv_errors() {
        let missing = "unit_id,trial_id,t,ax,ay,label\nu,1,0,1,2,1\n";
        assert!(matches!(
            parse_csv(missing.as_bytes(), 2),
            Err(KdisError::Parse { line: 1, .. })
        ));
        let nonnum = "unit_id,trial_id,t,ax,ay,az,label\nu,1,0,x,2,3,1\n";
        assert!(matches!(
            parse_csv(nonnum.as_bytes(), 2),
            Err(KdisError::Parse { line: 2, .. })
        ));
        let dup = "unit_id,trial_id,t,ax,ay,az,label\nu,1,0,1,2,3,1\nu,1,0,1,2,3,1\n";
        assert!(matches!(
            parse_csv(dup.as_bytes(), 2),
            Err(KdisError::Parse { line: 3, .. })
        ));
        let gap = "unit_id,trial_id,t,ax,ay,az,label\nu,1,0,1,2,3,1\nu,1,2,1,2,3,1\n";
        assert!(matches!(
            parse_csv(gap.as_bytes(), 2),
            Err(KdisError::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn csv_write_then_parse() {
        let s = SensorStream::new(
            "u9",
            "2/anomaly",
            vec![
                vec![0.1, -2.5],
                vec![1e-3, 7.0],
                vec![3.0, 0.3333333333333333],
            ],
            vec![2, 2],
            2,
        )
        .unwrap();
        let mut buf = Vec::new();
        write_csv(std::slice::from_ref(&s), &mut buf).unwrap();
        let back = parse_csv(buf.as_slice(), 2).unwrap();
        assert_eq!(back, vec![s]);
    }

    #[test]
    fn magnitude_and_single_channel() {
        let s = SensorStream::new(
            "u",
            "t",
            vec![vec![3.0, 0.0], vec![4.0, 0.0], vec![0.0, 0.0]],
            vec![1, 1],
            2,
        )
        .unwrap();
        let m = reduce_channels(&s, ChannelReduction::Magnitude).unwrap();
        assert_eq!(m.channels, vec![vec![5.0, 0.0]]);
        let one = reduce_channels(&s, ChannelReduction::Single(1)).unwrap();
        assert_eq!(one.channels, vec![s.channels[1].clone()]);
        assert_eq!(reduce_channels(&s, ChannelReduction::KeepAll).unwrap(), s);
        assert!(reduce_channels(&s, ChannelReduction::Single(3)).is_err());
    }

    #[test]
    fn window_counts_and_starts() {
        let cfg = WindowConfig::default();
        let w = make_windows(&stream(30), cfg, LabelRule::Majority).unwrap();
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].origin.start, 1);
        assert_eq!(w[0].values.values().last(), Some(&30.0));
        let w = make_windows(&stream(40), cfg, LabelRule::Majority).unwrap();
        assert_eq!(w[1].origin.start, 3);
        assert_eq!(w[1].values.values()[0], 3.0);
        assert_eq!(
            make_windows(&stream(900), cfg, LabelRule::Majority)
                .unwrap()
                .len(),
            436
        );
        assert!(make_windows(&stream(29), cfg, LabelRule::Majority).is_err());
    }

    #[test]
    fn window_labels() {
        let mut s = stream(10);
        s.labels = vec![1, 1, 1, 2, 2, 2, 2, 2, 2, 2];
        let cfg = WindowConfig::new(4, 2).unwrap();
        let maj = make_windows(&s, cfg, LabelRule::Majority).unwrap();
        // starts 1,3,5,7: labels [1,1,1,2] [1,2,2,2] [2,2,2,2] [2,2,2,2]
        assert_eq!(
            maj.iter().map(|w| w.label).collect::<Vec<_>>(),
            vec![1, 2, 2, 2]
        );
        let strict = make_windows(&s, cfg, LabelRule::Strict).unwrap();
        assert_eq!(
            strict.iter().map(|w| w.origin.start).collect::<Vec<_>>(),
            vec![5, 7]
        );
        // 2–2 tie resolves to the lower class.
        s.labels = vec![1, 1, 2, 2, 2, 2, 2, 2, 2, 2];
        let tie = make_windows(&s, cfg, LabelRule::Majority).unwrap();
        assert_eq!(tie[0].label, 1);
    }

    #[test]
    fn window_config_rejects_overlap_ge_size() {
        assert!(WindowConfig::new(30, 30).is_err());
        assert!(WindowConfig::new(30, 29).is_ok());
    }

    fn noisy_windows(offset: f64) -> Vec<TimeWindow> {
        let mut rng = crate::numerics::derive_stream(11, 0);
        let s = SensorStream::new(
            "u",
            "t",
            vec![(0..200)
                .map(|_| offset + 0.1 * rng.standard_normal())
                .collect()],
            vec![1; 200],
            2,
        )
        .unwrap();
        make_windows(&s, WindowConfig::default(), LabelRule::Majority).unwrap()
    }

    #[test]
    fn standardizer_zero_mean_unit_std_on_fit_set() {
        let w = noisy_windows(5.0);
        let s = fit_standardizer(&w).unwrap();
        let z = apply_standardizer(&s, &w).unwrap();
        let vals: Vec<f64> = z
            .iter()
            .flat_map(|w| w.values.values().iter().copied())
            .collect();
        let n = vals.len() as f64;
        let mu = vals.iter().sum::<f64>() / n;
        let sd = (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n).sqrt();
        assert!(mu.abs() < 1e-9);
        assert!((sd - 1.0).abs() < 1e-9);
        // Not idempotent on data that was not already standardized.
        let twice = apply_standardizer(&s, &z).unwrap();
        assert_ne!(twice[0].values, z[0].values);
    }

    #[test]
    fn standardizer_far_test_values_stay_finite() {
        let s = fit_standardizer(&noisy_windows(0.0)).unwrap();
        let far = apply_standardizer(&s, &noisy_windows(1e6)).unwrap();
        assert!(far.iter().all(|w| w.values.is_finite()));
        assert!(far[0].values.values()[0] > 1e5);
    }

    #[test]
    fn standardizer_rejects_constant_channel() {
        let w = make_windows(
            &stream(30).clone(),
            WindowConfig::default(),
            LabelRule::Majority,
        )
        .unwrap();
        let mut flat = w.clone();
        flat[0].values = Tensor::new(vec![1, 30], vec![2.0; 30]).unwrap();
        assert!(matches!(
            fit_standardizer(&flat),
            Err(KdisError::DegenerateData(_))
        ));
    }

    #[test]
    fn standardizer_ignores_test_data() {
        let train = noisy_windows(1.0);
        let a = fit_standardizer(&train).unwrap();
        let _ = apply_standardizer(&a, &noisy_windows(50.0)).unwrap();
        let b = fit_standardizer(&train).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn folds() {
        let trials: Vec<String> = (1..=5).map(|i| i.to_string()).collect();
        let plan = build_folds(&trials, &["t".into()]).unwrap();
        assert_eq!(plan.folds.len(), 5);
        for f in &plan.folds {
            assert_eq!(f.train_trials.len(), 1);
            assert_eq!(f.test_trials.len(), 4);
            assert!(!f.test_trials.contains(&f.train_trials[0]));
        }
        let mut trained: Vec<_> = plan
            .folds
            .iter()
            .map(|f| f.train_trials[0].clone())
            .collect();
        trained.sort();
        assert_eq!(trained, trials);

        let two = build_folds(&trials[..2], &[]).unwrap();
        assert_eq!(two.folds.len(), 2);
        assert_eq!(two.folds[0].test_trials, vec!["2".to_string()]);
        assert!(build_folds(&trials[..1], &[]).is_err());
    }

    #[test]
    fn trial_groups() {
        assert_eq!(trial_group("3/anomaly"), "3");
        assert_eq!(trial_group("3"), "3");
    }

    proptest::proptest! {
        #[test]
        fn windows_form_arithmetic_sequence(len in 1usize..300, n in 1usize..40, v_frac in 0.0f64..1.0) {
            let v = ((n as f64) * v_frac) as usize % n;
            let cfg = WindowConfig::new(n, v).unwrap();
            let s = stream(len);
            match make_windows(&s, cfg, LabelRule::Majority) {
                Err(_) => proptest::prop_assert!(len < n),
                Ok(w) => {
                    proptest::prop_assert_eq!(w.len(), (len - n) / (n - v) + 1);
                    for (j, win) in w.iter().enumerate() {
                        proptest::prop_assert_eq!(win.origin.start, j * (n - v) + 1);
                        proptest::prop_assert_eq!(win.values.values()[0], win.origin.start as f64);
                    }
                }
            }
        }
    }
}
