//! Checkpoint directory:
//!
//! ```text
//! checkpoint.json   config, task, modalities, parameter and buffer index
//! params.f64        every parameter, little-endian f64, in index order
//! state.f64         every modality baseline buffer x_b, same encoding
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use umq_core::dataio::{ModalityInfo, Task};
use umq_core::pipeline::{UmqConfig, UmqModel};
use umq_core::tensor::Tensor;

use crate::error::{io, Error, Result};

const INDEX: &str = "checkpoint.json";
const PARAMS: &str = "params.f64";
const STATE: &str = "state.f64";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateEntry {
    pub modality: String,
    pub dim: usize,
    pub initialized: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Index {
    pub config: UmqConfig,
    pub task: Task,
    pub modalities: Vec<ModalityInfo>,
    pub best_epoch: Option<usize>,
    pub params: Vec<Entry>,
    pub state: Vec<StateEntry>,
}

fn to_bytes(values: impl Iterator<Item = f64>) -> Vec<u8> {
    values.flat_map(f64::to_le_bytes).collect()
}

fn read_f64(path: &Path) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(io(path))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!("{}: length {} is not a multiple of 8", path.display(), bytes.len())));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn save(model: &UmqModel, best_epoch: Option<usize>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io(dir))?;
    let params: Vec<Entry> = model
        .store
        .iter()
        .map(|(_, p)| Entry {
            name: p.name.clone(),
            rows: p.value.rows(),
            cols: p.value.cols(),
        })
        .collect();
    let values = model.store.iter().flat_map(|(_, p)| p.value.data().iter().copied()).collect::<Vec<_>>();
    let mut state = Vec::new();
    let mut buffers = Vec::new();
    for b in &model.branches {
        if let Some(st) = &b.state {
            state.push(StateEntry {
                modality: b.info.name.clone(),
                dim: st.x_b.cols(),
                initialized: st.initialized,
            });
            buffers.extend_from_slice(st.x_b.data());
        }
    }
    let index = Index {
        config: model.config.clone(),
        task: model.task,
        modalities: model.branches.iter().map(|b| b.info.clone()).collect(),
        best_epoch,
        params,
        state,
    };
    let text = serde_json::to_string_pretty(&index).map_err(|e| Error::Format(e.to_string()))?;
    let p = dir.join(INDEX);
    fs::write(&p, text + "\n").map_err(io(&p))?;
    let p = dir.join(PARAMS);
    fs::write(&p, to_bytes(values.into_iter())).map_err(io(&p))?;
    let p = dir.join(STATE);
    fs::write(&p, to_bytes(buffers.into_iter())).map_err(io(&p))?;
    Ok(())
}

pub fn read_index(dir: &Path) -> Result<Index> {
    let p = dir.join(INDEX);
    let text = fs::read_to_string(&p).map_err(io(&p))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
}

pub fn load(dir: &Path) -> Result<UmqModel> {
    let index = read_index(dir)?;
    let mut model = UmqModel::new(&index.config, &index.modalities, index.task)?;
    if index.params.len() != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model expects {}",
            index.params.len(),
            model.store.len()
        )));
    }
    let values = read_f64(&dir.join(PARAMS))?;
    let expected: usize = index.params.iter().map(|e| e.rows * e.cols).sum();
    if values.len() != expected {
        return Err(Error::Size {
            path: dir.join(PARAMS),
            expected: expected as u64 * 8,
            actual: values.len() as u64 * 8,
        });
    }
    let mut offset = 0;
    for e in &index.params {
        let id = model
            .store
            .by_name(&e.name)
            .ok_or_else(|| Error::Format(format!("unknown parameter `{}`", e.name)))?;
        let len = e.rows * e.cols;
        let t = Tensor::new(e.rows, e.cols, values[offset..offset + len].to_vec())?;
        model.store.set_value(id, t)?;
        offset += len;
    }
    let buffers = read_f64(&dir.join(STATE))?;
    let mut offset = 0;
    for s in &index.state {
        let branch = model
            .branches
            .iter_mut()
            .find(|b| b.info.name == s.modality)
            .ok_or_else(|| Error::Format(format!("unknown modality `{}`", s.modality)))?;
        let st = branch
            .state
            .as_mut()
            .ok_or_else(|| Error::Format(format!("modality `{}` has no baseline", s.modality)))?;
        let chunk = buffers
            .get(offset..offset + s.dim)
            .ok_or_else(|| Error::Format("state buffer file too short".into()))?;
        st.x_b = Tensor::row_vector(chunk);
        st.initialized = s.initialized;
        offset += s.dim;
    }
    if offset != buffers.len() {
        return Err(Error::Format("state buffer file has trailing values".into()));
    }
    Ok(model)
}
