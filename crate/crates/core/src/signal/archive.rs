//! On-disk archive: a directory holding `manifest.json` and `data.bin`.
//!
//! `data.bin` starts with the 8-byte magic `SSVEPA1\0`, followed by the
//! row-major payload as little-endian floats in the dimension order listed
//! in the manifest.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::filter::FilterSpec;
use super::{RawRecording, Stimulus, SubBandEpochs, TrialInfo, Window};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SSVEPA1\0";
pub const SCHEMA_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.json";
pub const PAYLOAD: &str = "data.bin";

const RAW_DIMS: [&str; 2] = ["channel", "sample"];
const EPOCH_DIMS: [&str; 4] = ["trial", "band", "channel", "sample"];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Dtype {
    #[default]
    #[serde(rename = "f32le")]
    F32Le,
    #[serde(rename = "f64le")]
    F64Le,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32Le => 4,
            Dtype::F64Le => 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchiveKind {
    Raw,
    Epochs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub schema_version: u32,
    pub kind: ArchiveKind,
    pub fs: f64,
    pub channel_names: Vec<String>,
    #[serde(default)]
    pub bands: Vec<FilterSpec>,
    pub stimuli: Vec<Stimulus>,
    pub trials: Vec<TrialInfo>,
    pub block_ids: Vec<usize>,
    #[serde(default)]
    pub window: Option<Window>,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub dims: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Archive {
    Raw(RawRecording),
    Epochs(SubBandEpochs),
}

impl From<RawRecording> for Archive {
    fn from(r: RawRecording) -> Self {
        Archive::Raw(r)
    }
}

impl From<SubBandEpochs> for Archive {
    fn from(e: SubBandEpochs) -> Self {
        Archive::Epochs(e)
    }
}

fn manifest_for(archive: &Archive, dtype: Dtype) -> Manifest {
    match archive {
        Archive::Raw(r) => {
            let mut block_ids: Vec<usize> = r.trials.iter().map(|t| t.block).collect();
            block_ids.sort_unstable();
            block_ids.dedup();
            Manifest {
                schema_version: SCHEMA_VERSION,
                kind: ArchiveKind::Raw,
                fs: r.fs,
                channel_names: r.channel_names.clone(),
                bands: Vec::new(),
                stimuli: r.stimuli.clone(),
                trials: r.trials.clone(),
                block_ids,
                window: None,
                dtype,
                shape: vec![r.n_channels, r.n_samples],
                dims: RAW_DIMS.iter().map(|s| s.to_string()).collect(),
            }
        }
        Archive::Epochs(e) => Manifest {
            schema_version: SCHEMA_VERSION,
            kind: ArchiveKind::Epochs,
            fs: e.fs,
            channel_names: e.channel_names.clone(),
            bands: e.bands.clone(),
            stimuli: e.stimuli.clone(),
            trials: e.trials.clone(),
            block_ids: e.block_ids.clone(),
            window: Some(e.window),
            dtype,
            shape: vec![e.n_trials, e.n_bands, e.n_channels, e.n_samples],
            dims: EPOCH_DIMS.iter().map(|s| s.to_string()).collect(),
        },
    }
}

fn payload(archive: &Archive) -> &[f64] {
    match archive {
        Archive::Raw(r) => &r.data,
        Archive::Epochs(e) => &e.data,
    }
}

/// Writes `archive` into directory `dir` (created if needed). With
/// [`Dtype::F32Le`] values are rounded to single precision.
pub fn save_archive(archive: &Archive, dir: &Path, dtype: Dtype) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = manifest_for(archive, dtype);
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;

    let data = payload(archive);
    let mut bytes = Vec::with_capacity(MAGIC.len() + data.len() * dtype.width());
    bytes.extend_from_slice(MAGIC);
    match dtype {
        Dtype::F32Le => data.iter().for_each(|&v| bytes.extend_from_slice(&(v as f32).to_le_bytes())),
        Dtype::F64Le => data.iter().for_each(|&v| bytes.extend_from_slice(&v.to_le_bytes())),
    }
    let dpath = dir.join(PAYLOAD);
    fs::write(&dpath, bytes).map_err(|e| Error::io(&dpath, e))
}

/// Saves epochs or a recording in the default single-precision layout.
pub fn save_epoch_archive(archive: impl Into<Archive>, dir: &Path) -> Result<()> {
    save_archive(&archive.into(), dir, Dtype::F32Le)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if m.schema_version != SCHEMA_VERSION {
        return Err(Error::format(&mpath, format!("unsupported schema version {}", m.schema_version)));
    }
    let (dims, n_channel_axis): (&[&str], usize) = match m.kind {
        ArchiveKind::Raw => (&RAW_DIMS, 0),
        ArchiveKind::Epochs => (&EPOCH_DIMS, 2),
    };
    if m.dims.len() != dims.len() || m.dims.iter().zip(dims).any(|(a, b)| a != b) {
        return Err(Error::format(&mpath, format!("dims {:?}, expected {dims:?}", m.dims)));
    }
    if m.shape.len() != dims.len() || m.shape.iter().any(|&d| d == 0) {
        return Err(Error::format(&mpath, format!("bad shape {:?}", m.shape)));
    }
    if m.shape[n_channel_axis] != m.channel_names.len() {
        return Err(Error::format(
            &mpath,
            format!("{} channel names for a channel axis of {}", m.channel_names.len(), m.shape[n_channel_axis]),
        ));
    }
    if m.kind == ArchiveKind::Epochs {
        if m.shape[1] != m.bands.len() {
            return Err(Error::format(&mpath, format!("{} bands for a band axis of {}", m.bands.len(), m.shape[1])));
        }
        if m.shape[0] != m.trials.len() {
            return Err(Error::format(&mpath, format!("{} trials for a trial axis of {}", m.trials.len(), m.shape[0])));
        }
        if m.window.is_none() {
            return Err(Error::format(&mpath, "epoch archive without a window"));
        }
    }
    Ok(m)
}

/// Loads and validates an archive written by [`save_archive`].
pub fn load_epoch_archive(dir: &Path) -> Result<Archive> {
    let m = read_manifest(dir)?;
    let dpath = dir.join(PAYLOAD);
    let bytes = fs::read(&dpath).map_err(|e| Error::io(&dpath, e))?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(&dpath, "missing SSVEPA1 magic"));
    }
    let body = &bytes[MAGIC.len()..];
    let count: usize = m.shape.iter().product();
    let w = m.dtype.width();
    if body.len() != count * w {
        return Err(Error::format(
            &dpath,
            format!("payload holds {} bytes, shape {:?} needs {}", body.len(), m.shape, count * w),
        ));
    }
    let data: Vec<f64> = match m.dtype {
        Dtype::F32Le => body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64Le => body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    let bad = |e: Error| Error::format(&dpath, e.to_string());
    Ok(match m.kind {
        ArchiveKind::Raw => Archive::Raw(RawRecording::new(data, m.channel_names, m.fs, m.trials, m.stimuli).map_err(bad)?),
        ArchiveKind::Epochs => {
            let e = SubBandEpochs {
                data,
                n_trials: m.shape[0],
                n_bands: m.shape[1],
                n_channels: m.shape[2],
                n_samples: m.shape[3],
                labels: m
                    .trials
                    .iter()
                    .map(|t| m.stimuli.iter().position(|s| s.index == t.stimulus).unwrap_or(usize::MAX))
                    .collect(),
                blocks: m.trials.iter().map(|t| t.block).collect(),
                block_ids: m.block_ids,
                trials: m.trials,
                fs: m.fs,
                window: m.window.expect("checked above"),
                channel_names: m.channel_names,
                bands: m.bands,
                stimuli: m.stimuli,
            };
            e.validate().map_err(bad)?;
            Archive::Epochs(e)
        }
    })
}

/// Loads an archive that must hold epochs.
pub fn load_epochs(dir: &Path) -> Result<SubBandEpochs> {
    match load_epoch_archive(dir)? {
        Archive::Epochs(e) => Ok(e),
        Archive::Raw(_) => Err(Error::format(dir, "archive holds a raw recording, expected epochs")),
    }
}

/// Loads an archive that must hold a raw recording.
pub fn load_recording(dir: &Path) -> Result<RawRecording> {
    match load_epoch_archive(dir)? {
        Archive::Raw(r) => Ok(r),
        Archive::Epochs(_) => Err(Error::format(dir, "archive holds epochs, expected a raw recording")),
    }
}
