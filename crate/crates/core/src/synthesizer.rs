//! Synthetic multi-unit vibration data.
//!
//! Each channel is `A·sin(2π·f·t + φ_c) + N(0, σ²)` with a random phase per
//! channel. The anomalous regime scales `A` by `anomaly_amp_gain` and shifts
//! `f` by `anomaly_freq_shift`. Units differ through their own base
//! frequency, amplitude and noise. Optional per-trial jitter draws a trial
//! gain and frequency factor once per trial, so a single trial covers only
//! part of a unit's operating range.

use serde::{Deserialize, Serialize};

use crate::data::SensorStream;
use crate::error::{KdisError, Result};
use crate::numerics::{derive_stream, fnv1a64, RngStream};

pub const NOMINAL: usize = 1;
pub const ANOMALY: usize = 2;
pub const NUM_CLASSES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnitProfile {
    pub unit_id: String,
    /// Cycles per sample.
    pub base_frequency: f64,
    pub base_amplitude: f64,
    pub noise_std: f64,
    pub anomaly_amp_gain: f64,
    /// Cycles per sample, added to the base frequency.
    pub anomaly_freq_shift: f64,
    pub trial_count: usize,
    #[serde(default = "default_trial_length")]
    pub trial_length: usize,
    /// Half-width of the uniform per-trial gain factor `1 ± jitter`.
    #[serde(default)]
    pub trial_amp_jitter: f64,
    /// Half-width of the uniform per-trial frequency factor `1 ± jitter`.
    #[serde(default)]
    pub trial_freq_jitter: f64,
}

fn default_trial_length() -> usize {
    900
}

impl UnitProfile {
    pub fn validate(&self, window_size: usize) -> Result<()> {
        let finite = [
            self.base_frequency,
            self.base_amplitude,
            self.noise_std,
            self.anomaly_amp_gain,
            self.anomaly_freq_shift,
            self.trial_amp_jitter,
            self.trial_freq_jitter,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(KdisError::invalid(format!(
                "unit {}: non-finite profile value",
                self.unit_id
            )));
        }
        if self.noise_std < 0.0 {
            return Err(KdisError::invalid(format!(
                "unit {}: noise_std must be ≥ 0",
                self.unit_id
            )));
        }
        if self.trial_count == 0 {
            return Err(KdisError::invalid(format!(
                "unit {}: trial_count must be positive",
                self.unit_id
            )));
        }
        if self.trial_length < window_size {
            return Err(KdisError::invalid(format!(
                "unit {}: trial_length {} shorter than window {window_size}",
                self.unit_id, self.trial_length
            )));
        }
        if !(0.0..1.0).contains(&self.trial_amp_jitter)
            || !(0.0..1.0).contains(&self.trial_freq_jitter)
        {
            return Err(KdisError::invalid(format!(
                "unit {}: jitter must lie in [0, 1)",
                self.unit_id
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TrialLayout {
    /// Every trial is a pair of single-status prints, `k/nominal` and `k/anomaly`.
    #[default]
    PerClassTrials,
    /// Every trial switches from nominal to anomalous at the onset fraction.
    MixedTrial,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub units: Vec<UnitProfile>,
    pub rich_unit_id: String,
    #[serde(default)]
    pub layout: TrialLayout,
    #[serde(default = "default_onset")]
    pub anomaly_onset_fraction: f64,
    pub seed: u64,
}

fn default_onset() -> f64 {
    0.425
}

impl ScenarioConfig {
    pub fn validate(&self, window_size: usize) -> Result<()> {
        if self.units.len() < 2 {
            return Err(KdisError::invalid("a scenario needs at least two units"));
        }
        let mut ids = std::collections::HashSet::new();
        for u in &self.units {
            u.validate(window_size)?;
            if !ids.insert(u.unit_id.as_str()) {
                return Err(KdisError::invalid(format!(
                    "duplicate unit id `{}`",
                    u.unit_id
                )));
            }
        }
        let rich = self.rich_unit().ok_or_else(|| {
            KdisError::invalid(format!(
                "rich unit `{}` is not among the profiles",
                self.rich_unit_id
            ))
        })?;
        if let Some(u) = self.units.iter().find(|u| u.trial_count > rich.trial_count) {
            return Err(KdisError::invalid(format!(
                "unit `{}` has more trials ({}) than the rich unit ({})",
                u.unit_id, u.trial_count, rich.trial_count
            )));
        }
        if !(self.anomaly_onset_fraction > 0.0 && self.anomaly_onset_fraction < 1.0) {
            return Err(KdisError::invalid(
                "anomaly_onset_fraction must lie in (0, 1)",
            ));
        }
        Ok(())
    }

    pub fn rich_unit(&self) -> Option<&UnitProfile> {
        self.units.iter().find(|u| u.unit_id == self.rich_unit_id)
    }

    pub fn poor_units(&self) -> impl Iterator<Item = &UnitProfile> {
        self.units
            .iter()
            .filter(move |u| u.unit_id != self.rich_unit_id)
    }

    pub fn unit(&self, id: &str) -> Option<&UnitProfile> {
        self.units.iter().find(|u| u.unit_id == id)
    }
}

/// 0-based index of the first anomalous sample in a mixed trial:
/// `ceil(fraction · L)`.
pub fn onset_index(fraction: f64, length: usize) -> usize {
    ((fraction * length as f64).ceil() as usize).min(length)
}

struct TrialShape {
    gain: f64,
    freq_factor: f64,
    phases: [f64; 3],
}

fn draw_shape(profile: &UnitProfile, rng: &mut RngStream) -> TrialShape {
    let gain = 1.0 + profile.trial_amp_jitter * rng.uniform(-1.0, 1.0);
    let freq_factor = 1.0 + profile.trial_freq_jitter * rng.uniform(-1.0, 1.0);
    let tau = 2.0 * std::f64::consts::PI;
    let phases = [
        rng.uniform(0.0, tau),
        rng.uniform(0.0, tau),
        rng.uniform(0.0, tau),
    ];
    TrialShape {
        gain,
        freq_factor,
        phases,
    }
}

fn regime(profile: &UnitProfile, shape: &TrialShape, status: usize) -> (f64, f64) {
    let (amp, freq) = if status == ANOMALY {
        (
            profile.base_amplitude * profile.anomaly_amp_gain,
            profile.base_frequency + profile.anomaly_freq_shift,
        )
    } else {
        (profile.base_amplitude, profile.base_frequency)
    };
    (amp * shape.gain, freq * shape.freq_factor)
}

fn synthesize(
    profile: &UnitProfile,
    trial_id: &str,
    status_at: impl Fn(usize) -> usize,
    rng: &mut RngStream,
) -> SensorStream {
    let shape = draw_shape(profile, rng);
    let len = profile.trial_length;
    let tau = 2.0 * std::f64::consts::PI;
    let labels: Vec<usize> = (0..len).map(&status_at).collect();
    let mut channels: Vec<Vec<f64>> = (0..3).map(|_| Vec::with_capacity(len)).collect();
    for (t, &label) in labels.iter().enumerate() {
        let (amp, freq) = regime(profile, &shape, label);
        for (c, ch) in channels.iter_mut().enumerate() {
            let clean = amp * (tau * freq * t as f64 + shape.phases[c]).sin();
            let noise = if profile.noise_std > 0.0 {
                profile.noise_std * rng.standard_normal()
            } else {
                0.0
            };
            ch.push(clean + noise);
        }
    }
    SensorStream {
        unit_id: profile.unit_id.clone(),
        trial_id: trial_id.to_string(),
        channels,
        labels,
    }
}

/// A three-channel single-status trial.
pub fn generate_trial(
    profile: &UnitProfile,
    status: usize,
    trial_id: &str,
    rng: &mut RngStream,
) -> Result<SensorStream> {
    if status != NOMINAL && status != ANOMALY {
        return Err(KdisError::invalid(format!(
            "status must be 1 or 2, got {status}"
        )));
    }
    profile.validate(1)?;
    Ok(synthesize(profile, trial_id, |_| status, rng))
}

fn stream_key(unit_id: &str, trial: usize, part: &str) -> u64 {
    fnv1a64(format!("{unit_id}\u{1f}{trial}\u{1f}{part}").as_bytes())
}

/// Every trial of every unit. Each stream draws from its own derived RNG
/// stream keyed by `(unit, trial, status)`, so the output is a pure function
/// of the config.
pub fn generate_scenario(cfg: &ScenarioConfig) -> Result<Vec<SensorStream>> {
    cfg.validate(1)?;
    let mut out = Vec::new();
    for unit in &cfg.units {
        for k in 1..=unit.trial_count {
            match cfg.layout {
                TrialLayout::PerClassTrials => {
                    for (status, name) in [(NOMINAL, "nominal"), (ANOMALY, "anomaly")] {
                        let mut rng = derive_stream(cfg.seed, stream_key(&unit.unit_id, k, name));
                        out.push(synthesize(
                            unit,
                            &format!("{k}/{name}"),
                            |_| status,
                            &mut rng,
                        ));
                    }
                }
                TrialLayout::MixedTrial => {
                    let onset = onset_index(cfg.anomaly_onset_fraction, unit.trial_length);
                    let mut rng = derive_stream(cfg.seed, stream_key(&unit.unit_id, k, "mixed"));
                    out.push(synthesize(
                        unit,
                        &k.to_string(),
                        |t| if t < onset { NOMINAL } else { ANOMALY },
                        &mut rng,
                    ));
                }
            }
        }
    }
    Ok(out)
}

/// Periodogram peak of a mean-removed signal, in cycles per sample. Bins
/// `1..=n/2` are searched; ties keep the lowest frequency.
pub fn dominant_frequency(signal: &[f64]) -> f64 {
    let n = signal.len();
    if n < 2 {
        return 0.0;
    }
    let mean = signal.iter().sum::<f64>() / n as f64;
    let tau = 2.0 * std::f64::consts::PI;
    let mut best = (1usize, f64::NEG_INFINITY);
    for k in 1..=n / 2 {
        let (mut re, mut im) = (0.0, 0.0);
        for (t, &x) in signal.iter().enumerate() {
            let angle = tau * (k * t) as f64 / n as f64;
            re += (x - mean) * angle.cos();
            im -= (x - mean) * angle.sin();
        }
        let power = re * re + im * im;
        if power > best.1 {
            best = (k, power);
        }
    }
    best.0 as f64 / n as f64
}
