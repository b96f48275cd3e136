//! Checkpoint directories: one PAVF file per parameter tensor, an
//! `index.json` mapping names to files and shapes, and `model.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor, PavfTensor};
use crate::model::{DarmParams, ModelConfig, PARAM_NAMES};

pub const INDEX_FILE: &str = "index.json";
pub const MODEL_FILE: &str = "model.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub shape: Vec<usize>,
}

pub fn save_checkpoint(dir: impl AsRef<Path>, cfg: &ModelConfig, params: &DarmParams) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut index = BTreeMap::new();
    for (name, t) in params.named() {
        let file = format!("{name}.pavf");
        // PAVF holds rank ≤ 2; higher-rank tensors are flattened to rows.
        let pavf = PavfTensor::from_f64(vec![t.rows(), t.cols()], t.data())?;
        write_tensor(&pavf, dir.join(&file))?;
        index.insert(
            name.to_string(),
            IndexEntry {
                file,
                shape: t.shape().to_vec(),
            },
        );
    }
    write_json(dir.join(INDEX_FILE), &index)?;
    write_json(dir.join(MODEL_FILE), cfg)
}

pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(ModelConfig, DarmParams)> {
    let dir = dir.as_ref();
    let cfg: ModelConfig = read_json(dir.join(MODEL_FILE))?;
    let index: BTreeMap<String, IndexEntry> = read_json(dir.join(INDEX_FILE))?;
    let tensors = PARAM_NAMES
        .iter()
        .map(|name| {
            let e = index
                .get(*name)
                .ok_or_else(|| Error::Config(format!("checkpoint is missing {name}")))?;
            let t = read_tensor(dir.join(&e.file))?;
            Tensor::new(e.shape.clone(), t.to_f64())
        })
        .collect::<Result<Vec<_>>>()?;
    let params = DarmParams::from_tensors(&cfg, tensors)?;
    Ok((cfg, params))
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}
