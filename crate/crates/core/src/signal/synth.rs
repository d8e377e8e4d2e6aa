//! Synthetic SSVEP recordings for desk-scale runs and tests.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{seconds_to_samples, RawRecording, Stimulus, TrialInfo, OCCIPITAL_CHANNELS};
use crate::error::{Error, Result};
use crate::rng;

/// Layout of a synthetic session. Frequencies are `freq_start + k * freq_step`
/// and phases `(k mod 4) * phase_step`, for stimulus `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub n_blocks: usize,
    pub fs: f64,
    pub freq_start: f64,
    pub freq_step: f64,
    pub phase_step: f64,
    pub cue_s: f64,
    pub stim_s: f64,
    pub rest_s: f64,
    /// Delay between stimulus onset and the start of the evoked response.
    pub latency_s: f64,
    pub n_harmonics: usize,
    /// `None` means noise-free.
    pub snr_db: Option<f64>,
    /// Noise-only channels recorded alongside the occipital set.
    pub extra_channels: Vec<String>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_classes: 40,
            n_blocks: 6,
            fs: 250.0,
            freq_start: 8.0,
            freq_step: 0.2,
            phase_step: 0.5 * PI,
            cue_s: 0.5,
            stim_s: 2.0,
            rest_s: 0.5,
            latency_s: 0.14,
            n_harmonics: 5,
            snr_db: Some(0.0),
            extra_channels: vec!["Fz".into(), "Cz".into()],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_blocks == 0 || self.n_harmonics == 0 {
            return Err(Error::Config("synthetic classes, blocks and harmonics must be positive".into()));
        }
        if !(self.fs > 0.0 && self.stim_s > 0.0 && self.cue_s >= 0.0 && self.rest_s >= 0.0) {
            return Err(Error::Config("synthetic timing must be non-negative with positive fs and stimulus".into()));
        }
        if !(self.latency_s >= 0.0 && self.latency_s < self.stim_s) {
            return Err(Error::Config(format!(
                "latency {} s must lie inside the {} s stimulus",
                self.latency_s, self.stim_s
            )));
        }
        if self.snr_db.is_some_and(|db| !db.is_finite() && db != f64::INFINITY) {
            return Err(Error::Config("snr_db must be finite, +inf, or absent".into()));
        }
        let top = self.freq_start + (self.n_classes - 1) as f64 * self.freq_step;
        if !(self.freq_start > 0.0 && top < self.fs / 2.0) {
            return Err(Error::Config(format!("stimulus frequencies up to {top} Hz exceed Nyquist")));
        }
        Ok(())
    }

    pub fn stimuli(&self) -> Vec<Stimulus> {
        (0..self.n_classes)
            .map(|k| Stimulus {
                index: k,
                freq_hz: self.freq_start + k as f64 * self.freq_step,
                phase_rad: (k % 4) as f64 * self.phase_step,
            })
            .collect()
    }
}

fn noise_sigma(signal_power: f64, snr_db: Option<f64>) -> f64 {
    match snr_db {
        Some(db) if db.is_finite() => (signal_power / 10f64.powf(db / 10.0)).sqrt(),
        _ => 0.0,
    }
}

/// Gained harmonics plus noise, `[gains.len(), n]`.
fn render<R: Rng + ?Sized>(
    freq: f64,
    phase: f64,
    fs: f64,
    n: usize,
    n_harmonics: usize,
    snr_db: Option<f64>,
    gains: &[f64],
    rng: &mut R,
) -> Vec<f64> {
    let clean: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / fs;
            (1..=n_harmonics)
                .map(|h| {
                    let h = h as f64;
                    (2.0 * PI * h * freq * t + h * phase).sin() / h
                })
                .sum()
        })
        .collect();
    let mut out = Vec::with_capacity(gains.len() * n);
    for &g in gains {
        let power = clean.iter().map(|v| (g * v) * (g * v)).sum::<f64>() / n as f64;
        let sigma = noise_sigma(power, snr_db);
        for &v in &clean {
            let e: f64 = if sigma > 0.0 { StandardNormal.sample(rng) } else { 0.0 };
            out.push(g * v + sigma * e);
        }
    }
    out
}

/// One synthetic trial `[9, samples]` with `t = 0` at the first sample.
/// Each channel carries `sum_h sin(2 pi h f t + h phase) / h`, scaled by its
/// own gain in `[0.5, 1.5]`, plus white noise at `snr_db` relative to that
/// channel's signal power. Gains are drawn before any noise.
pub fn synth_ssvep_trial<R: Rng + ?Sized>(
    freq_hz: f64,
    phase_rad: f64,
    fs: f64,
    duration_s: f64,
    n_harmonics: usize,
    snr_db: Option<f64>,
    rng: &mut R,
) -> Vec<f64> {
    let n = seconds_to_samples(duration_s, fs);
    let gains: Vec<f64> = (0..OCCIPITAL_CHANNELS.len()).map(|_| rng.random_range(0.5..=1.5)).collect();
    render(freq_hz, phase_rad, fs, n, n_harmonics, snr_db, &gains, rng)
}

/// A continuous session of `n_blocks` blocks, each presenting every stimulus
/// once in random order. Blocks are numbered from 1. Channel gains are fixed
/// for the session. Background noise runs through cue and rest periods at
/// the level used for the evoked response.
pub fn synth_recording(cfg: &SynthConfig, seed: u64) -> Result<RawRecording> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "synth");
    let fs = cfg.fs;
    let stimuli = cfg.stimuli();
    let n_occ = OCCIPITAL_CHANNELS.len();
    let n_channels = n_occ + cfg.extra_channels.len();
    let cue = seconds_to_samples(cfg.cue_s, fs);
    let stim = seconds_to_samples(cfg.stim_s, fs);
    let rest = seconds_to_samples(cfg.rest_s, fs);
    let latency = seconds_to_samples(cfg.latency_s, fs);
    let seg = cue + stim + rest;
    let n_trials = cfg.n_blocks * cfg.n_classes;
    let n_samples = n_trials * seg;

    let gains: Vec<f64> = (0..n_occ).map(|_| rng.random_range(0.5..=1.5)).collect();
    let mut data = vec![0.0; n_channels * n_samples];
    let mut trials = Vec::with_capacity(n_trials);
    let mut order: Vec<usize> = (0..cfg.n_classes).collect();
    for block in 1..=cfg.n_blocks {
        order.shuffle(&mut rng);
        for &k in &order {
            let start = trials.len() * seg;
            let onset = start + cue;
            let s = &stimuli[k];
            let evoked = render(s.freq_hz, s.phase_rad, fs, stim - latency, cfg.n_harmonics, None, &gains, &mut rng);
            for c in 0..n_occ {
                let row = &evoked[c * (stim - latency)..(c + 1) * (stim - latency)];
                let power = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
                let sigma = noise_sigma(power, cfg.snr_db);
                let dst = &mut data[c * n_samples + start..c * n_samples + start + seg];
                for v in dst.iter_mut() {
                    let e: f64 = if sigma > 0.0 { StandardNormal.sample(&mut rng) } else { 0.0 };
                    *v = sigma * e;
                }
                for (i, v) in row.iter().enumerate() {
                    dst[cue + latency + i] += v;
                }
            }
            for c in n_occ..n_channels {
                let dst = &mut data[c * n_samples + start..c * n_samples + start + seg];
                for v in dst.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v = e;
                }
            }
            trials.push(TrialInfo {
                block,
                trial: trials.len(),
                stimulus: k,
                onset_sample: onset,
            });
        }
    }
    let names = OCCIPITAL_CHANNELS
        .iter()
        .map(|s| s.to_string())
        .chain(cfg.extra_channels.iter().cloned())
        .collect();
    RawRecording::new(data, names, fs, trials, stimuli)
}
