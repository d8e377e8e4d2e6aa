//! From raw multi-channel recordings to filter-bank epoch tensors.

pub mod archive;
pub mod filter;
pub mod synth;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use filter::{design_bandpass, filtfilt, BandPass, FilterSpec};

/// The nine occipital/parietal electrodes used for decoding, in model order.
pub const OCCIPITAL_CHANNELS: [&str; 9] = ["Pz", "PO5", "PO3", "POz", "PO4", "PO6", "O1", "Oz", "O2"];

/// Default filter bank: three sub-bands sharing a 50 Hz upper edge.
pub const DEFAULT_BANDS: [FilterSpec; 3] = [
    FilterSpec::new(6.0, 50.0, 8),
    FilterSpec::new(14.0, 50.0, 8),
    FilterSpec::new(22.0, 50.0, 8),
];

/// Visual latency defaults for the two reference dataset layouts.
pub const TD_BENCHMARK: f64 = 0.14;
pub const TD_BETA: f64 = 0.13;

pub const ZERO_MASK_LEN: usize = 50;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stimulus {
    pub index: usize,
    pub freq_hz: f64,
    pub phase_rad: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialInfo {
    pub block: usize,
    pub trial: usize,
    pub stimulus: usize,
    pub onset_sample: usize,
}

/// Continuous recording `[channels, samples]` in microvolts with trial markers.
#[derive(Clone, Debug, PartialEq)]
pub struct RawRecording {
    pub data: Vec<f64>,
    pub n_channels: usize,
    pub n_samples: usize,
    pub fs: f64,
    pub channel_names: Vec<String>,
    pub trials: Vec<TrialInfo>,
    pub stimuli: Vec<Stimulus>,
}

impl RawRecording {
    pub fn new(
        data: Vec<f64>,
        channel_names: Vec<String>,
        fs: f64,
        trials: Vec<TrialInfo>,
        stimuli: Vec<Stimulus>,
    ) -> Result<Self> {
        let n_channels = channel_names.len();
        if n_channels == 0 || data.len() % n_channels != 0 {
            return Err(Error::dim(format!(
                "{} samples cannot be split over {n_channels} channels",
                data.len()
            )));
        }
        let rec = RawRecording {
            n_samples: data.len() / n_channels,
            data,
            n_channels,
            fs,
            channel_names,
            trials,
            stimuli,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.n_channels * self.n_samples || self.channel_names.len() != self.n_channels {
            return Err(Error::dim("recording payload does not match its channel list"));
        }
        if !(self.fs > 0.0) {
            return Err(Error::Parameter(format!("sampling rate {} must be positive", self.fs)));
        }
        for t in &self.trials {
            if !self.stimuli.iter().any(|s| s.index == t.stimulus) {
                return Err(Error::Data(format!(
                    "trial {} refers to unknown stimulus {}",
                    t.trial, t.stimulus
                )));
            }
            if t.onset_sample >= self.n_samples {
                return Err(Error::Epoch {
                    trial: t.trial,
                    reason: format!("onset {} beyond {} samples", t.onset_sample, self.n_samples),
                });
            }
        }
        Ok(())
    }

    pub fn channel(&self, idx: usize) -> &[f64] {
        &self.data[idx * self.n_samples..(idx + 1) * self.n_samples]
    }

    /// Index of `name`, compared case-insensitively.
    pub fn channel_index(&self, name: &str) -> Result<usize> {
        self.channel_names
            .iter()
            .position(|c| c.trim().eq_ignore_ascii_case(name.trim()))
            .ok_or_else(|| Error::MissingChannel(name.to_string()))
    }
}

/// Band-filtered copies of a channel subset: `[bands, channels, samples]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredSet {
    pub data: Vec<f64>,
    pub bands: Vec<FilterSpec>,
    pub channel_names: Vec<String>,
    pub n_samples: usize,
    pub fs: f64,
}

impl FilteredSet {
    pub fn shape(&self) -> [usize; 3] {
        [self.bands.len(), self.channel_names.len(), self.n_samples]
    }

    pub fn row(&self, band: usize, channel: usize) -> &[f64] {
        let off = (band * self.channel_names.len() + channel) * self.n_samples;
        &self.data[off..off + self.n_samples]
    }
}

/// Selects `channels` (in the given order) and filters each through every band.
pub fn apply_filter_bank(rec: &RawRecording, specs: &[FilterSpec], channels: &[&str]) -> Result<FilteredSet> {
    let idx = channels
        .iter()
        .map(|c| rec.channel_index(c))
        .collect::<Result<Vec<_>>>()?;
    let filters = specs
        .iter()
        .map(|s| design_bandpass(s, rec.fs))
        .collect::<Result<Vec<BandPass>>>()?;
    let mut data = Vec::with_capacity(specs.len() * idx.len() * rec.n_samples);
    for f in &filters {
        for &c in &idx {
            data.extend(filtfilt(f, rec.channel(c)));
        }
    }
    Ok(FilteredSet {
        data,
        bands: specs.to_vec(),
        channel_names: channels.iter().map(|c| c.to_string()).collect(),
        n_samples: rec.n_samples,
        fs: rec.fs,
    })
}

/// Seconds to samples, rounding halves up.
pub fn seconds_to_samples(seconds: f64, fs: f64) -> usize {
    let x = (seconds * fs * 1e9).round() / 1e9;
    (x + 0.5).floor().max(0.0) as usize
}

/// Epoch window relative to stimulus onset: `[td, td + tw]` seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub td: f64,
    pub tw: f64,
}

/// Filter-bank epochs `[trials, bands, channels, samples]` with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct SubBandEpochs {
    pub data: Vec<f64>,
    pub n_trials: usize,
    pub n_bands: usize,
    pub n_channels: usize,
    pub n_samples: usize,
    pub labels: Vec<usize>,
    pub blocks: Vec<usize>,
    /// Blocks the recording session declared, including any with no trials left.
    pub block_ids: Vec<usize>,
    pub trials: Vec<TrialInfo>,
    pub fs: f64,
    pub window: Window,
    pub channel_names: Vec<String>,
    pub bands: Vec<FilterSpec>,
    pub stimuli: Vec<Stimulus>,
}

impl SubBandEpochs {
    pub fn trial_len(&self) -> usize {
        self.n_bands * self.n_channels * self.n_samples
    }

    pub fn trial(&self, i: usize) -> &[f64] {
        let n = self.trial_len();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn n_classes(&self) -> usize {
        self.stimuli.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.len() != self.n_trials * self.trial_len() {
            return Err(Error::dim("epoch payload does not match its declared shape"));
        }
        if self.labels.len() != self.n_trials || self.blocks.len() != self.n_trials || self.trials.len() != self.n_trials {
            return Err(Error::dim("per-trial metadata length differs from trial count"));
        }
        if self.channel_names.len() != self.n_channels || self.bands.len() != self.n_bands {
            return Err(Error::dim("channel or band list does not match payload"));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.stimuli.len()) {
            return Err(Error::Data(format!("label {l} outside {} stimuli", self.stimuli.len())));
        }
        if let Some(b) = self.blocks.iter().find(|b| !self.block_ids.contains(b)) {
            return Err(Error::Data(format!("trial block {b} is not among the declared blocks")));
        }
        Ok(())
    }

    /// Copy holding only the trials at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> SubBandEpochs {
        let mut data = Vec::with_capacity(indices.len() * self.trial_len());
        for &i in indices {
            data.extend_from_slice(self.trial(i));
        }
        SubBandEpochs {
            data,
            n_trials: indices.len(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            blocks: indices.iter().map(|&i| self.blocks[i]).collect(),
            trials: indices.iter().map(|&i| self.trials[i]).collect(),
            block_ids: self.block_ids.clone(),
            channel_names: self.channel_names.clone(),
            bands: self.bands.clone(),
            stimuli: self.stimuli.clone(),
            ..*self
        }
    }

    /// Indices of trials recorded in `block`.
    pub fn indices_in_block(&self, block: usize) -> Vec<usize> {
        (0..self.n_trials).filter(|&i| self.blocks[i] == block).collect()
    }

    /// Keeps only band `band`, giving a single-band set.
    pub fn select_band(&self, band: usize) -> SubBandEpochs {
        let per_band = self.n_channels * self.n_samples;
        let mut data = Vec::with_capacity(self.n_trials * per_band);
        for i in 0..self.n_trials {
            data.extend_from_slice(&self.trial(i)[band * per_band..(band + 1) * per_band]);
        }
        SubBandEpochs {
            data,
            n_bands: 1,
            bands: vec![self.bands[band]],
            labels: self.labels.clone(),
            blocks: self.blocks.clone(),
            block_ids: self.block_ids.clone(),
            trials: self.trials.clone(),
            channel_names: self.channel_names.clone(),
            stimuli: self.stimuli.clone(),
            ..*self
        }
    }
}

/// Cuts `[onset + round(td fs), onset + round(td fs) + round(tw fs))` for
/// every trial. Labels are positions in `stimuli`.
pub fn extract_epochs(
    set: &FilteredSet,
    trials: &[TrialInfo],
    stimuli: &[Stimulus],
    block_ids: &[usize],
    window: Window,
) -> Result<SubBandEpochs> {
    if !(window.td >= 0.0 && window.tw > 0.0) {
        return Err(Error::Parameter(format!(
            "window td={} tw={} must have td >= 0 and tw > 0",
            window.td, window.tw
        )));
    }
    let start = seconds_to_samples(window.td, set.fs);
    let len = seconds_to_samples(window.tw, set.fs);
    if len == 0 {
        return Err(Error::Parameter(format!("window of {} s is shorter than one sample", window.tw)));
    }
    let [n_bands, n_channels, n_samples] = set.shape();
    let mut data = Vec::with_capacity(trials.len() * n_bands * n_channels * len);
    let mut labels = Vec::with_capacity(trials.len());
    for t in trials {
        let from = t.onset_sample + start;
        if from + len > n_samples {
            return Err(Error::Epoch {
                trial: t.trial,
                reason: format!(
                    "window [{from}, {}) runs past the {n_samples}-sample recording",
                    from + len
                ),
            });
        }
        let label = stimuli
            .iter()
            .position(|s| s.index == t.stimulus)
            .ok_or_else(|| Error::Data(format!("trial {} has unknown stimulus {}", t.trial, t.stimulus)))?;
        for b in 0..n_bands {
            for c in 0..n_channels {
                data.extend_from_slice(&set.row(b, c)[from..from + len]);
            }
        }
        labels.push(label);
    }
    let epochs = SubBandEpochs {
        data,
        n_trials: trials.len(),
        n_bands,
        n_channels,
        n_samples: len,
        labels,
        blocks: trials.iter().map(|t| t.block).collect(),
        block_ids: block_ids.to_vec(),
        trials: trials.to_vec(),
        fs: set.fs,
        window,
        channel_names: set.channel_names.clone(),
        bands: set.bands.clone(),
        stimuli: stimuli.to_vec(),
    };
    epochs.validate()?;
    Ok(epochs)
}

/// Full preprocessing: channel selection, filter bank, epoching.
pub fn preprocess(rec: &RawRecording, specs: &[FilterSpec], channels: &[&str], window: Window) -> Result<SubBandEpochs> {
    rec.validate()?;
    let set = apply_filter_bank(rec, specs, channels)?;
    let mut block_ids: Vec<usize> = rec.trials.iter().map(|t| t.block).collect();
    block_ids.sort_unstable();
    block_ids.dedup();
    extract_epochs(&set, &rec.trials, &rec.stimuli, &block_ids, window)
}

/// Zeroes one contiguous run of `mask_len` time samples across every band
/// and channel of an epoch `[bands, channels, samples]`. The run start is
/// uniform over all valid positions. Returns the copy and the start index;
/// epochs shorter than `mask_len` come back unchanged.
pub fn zero_mask_augment<R: Rng + ?Sized>(
    epoch: &[f64],
    n_samples: usize,
    mask_len: usize,
    rng: &mut R,
) -> (Vec<f64>, Option<usize>) {
    let mut out = epoch.to_vec();
    if n_samples < mask_len || mask_len == 0 {
        log::warn!("epoch of {n_samples} samples is shorter than the {mask_len}-sample mask; skipping augmentation");
        return (out, None);
    }
    let start = rng.random_range(0..=n_samples - mask_len);
    for row in out.chunks_exact_mut(n_samples) {
        row[start..start + mask_len].iter_mut().for_each(|v| *v = 0.0);
    }
    (out, Some(start))
}
