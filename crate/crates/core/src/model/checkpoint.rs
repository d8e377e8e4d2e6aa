//! Model checkpoints: `checkpoint.json` (config, parameter table, training
//! metadata) plus `params.bin` (magic `SSVEPW1\0`, then little-endian f32
//! values concatenated in table order).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{IncepFormer, ModelConfig, ModelParams, Param, ParamKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"SSVEPW1\0";
pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_JSON: &str = "checkpoint.json";
pub const PARAMS_BIN: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in values.
    pub offset: usize,
    pub kind: ParamKind,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingMeta {
    pub seed: u64,
    pub fold: Option<usize>,
    pub test_block: Option<usize>,
    pub batches_run: usize,
    pub best_batch: usize,
    pub best_val_loss: Option<f64>,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub params: Vec<ParamEntry>,
    pub training: TrainingMeta,
}

pub fn save_checkpoint<T: Scalar>(model: &IncepFormer<T>, training: &TrainingMeta, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut offset = 0;
    let mut entries = Vec::with_capacity(model.params.len());
    let mut bytes = MAGIC.to_vec();
    for (name, p) in model.params.iter() {
        entries.push(ParamEntry {
            name: name.to_string(),
            shape: p.value.shape().to_vec(),
            offset,
            kind: p.kind,
        });
        offset += p.value.len();
        for &v in p.value.data() {
            bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    let ck = Checkpoint {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
        params: entries,
        training: training.clone(),
    };
    let jpath = dir.join(CHECKPOINT_JSON);
    let json = serde_json::to_string_pretty(&ck).expect("checkpoint serializes");
    fs::write(&jpath, json).map_err(|e| Error::io(&jpath, e))?;
    let bpath = dir.join(PARAMS_BIN);
    fs::write(&bpath, bytes).map_err(|e| Error::io(&bpath, e))
}

pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(IncepFormer<T>, TrainingMeta)> {
    let jpath = dir.join(CHECKPOINT_JSON);
    let text = fs::read_to_string(&jpath).map_err(|e| Error::io(&jpath, e))?;
    let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::format(&jpath, e.to_string()))?;
    if ck.format_version != FORMAT_VERSION {
        return Err(Error::format(&jpath, format!("unsupported format version {}", ck.format_version)));
    }
    let bpath = dir.join(PARAMS_BIN);
    let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::format(&bpath, "missing SSVEPW1 magic"));
    }
    let values: Vec<f32> = bytes[MAGIC.len()..]
        .chunks(4)
        .map(|c| c.try_into().map(f32::from_le_bytes))
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::format(&bpath, "payload length is not a multiple of 4"))?;
    let mut expected = 0;
    let mut entries = Vec::with_capacity(ck.params.len());
    for e in &ck.params {
        let n: usize = e.shape.iter().product();
        if e.offset != expected || e.offset + n > values.len() {
            return Err(Error::format(
                &bpath,
                format!("parameter `{}` at offset {} does not fit the payload", e.name, e.offset),
            ));
        }
        expected += n;
        let data = values[e.offset..e.offset + n].iter().map(|&v| T::lit(v as f64)).collect();
        let value = Tensor::new(e.shape.clone(), data).map_err(|err| Error::format(&jpath, err.to_string()))?;
        entries.push((e.name.clone(), Param { value, kind: e.kind }));
    }
    if expected != values.len() {
        return Err(Error::format(
            &bpath,
            format!("payload holds {} values, table covers {expected}", values.len()),
        ));
    }
    let params = ModelParams::from_entries(entries).map_err(|err| Error::format(&jpath, err.to_string()))?;
    let model = IncepFormer::new(ck.config, params).map_err(|err| Error::format(&jpath, err.to_string()))?;
    Ok((model, ck.training))
}
