//! JSON checkpoints: configs plus a list of named, shaped tensors.
//!
//! ```json
//! {
//!   "format": "peftlab-checkpoint",
//!   "version": 1,
//!   "model_config": { ... },
//!   "peft_config": { ... } | null,
//!   "tensors": [ { "name": "layers.0.wq", "shape": [64, 64], "data": [ ... ] }, ... ]
//! }
//! ```
//!
//! Values are written in shortest round-trip form, so a load reproduces
//! every bit. PEFT weights use the `peft.` name prefix.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, TransformerModel};
use crate::error::{LabError, Result};
use crate::numcore::Matrix;
use crate::peft::{attach, AttachedPeft, PeftConfig};

pub const CHECKPOINT_FORMAT: &str = "peftlab-checkpoint";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Tensor {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    model_config: ModelConfig,
    peft_config: Option<PeftConfig>,
    tensors: Vec<Tensor>,
}

/// A loaded model with its PEFT state, if any was saved.
#[derive(Debug)]
pub struct Checkpoint {
    pub model: TransformerModel,
    pub peft: Option<AttachedPeft>,
}

pub fn save_checkpoint(path: &Path, model: &TransformerModel, peft: Option<&AttachedPeft>) -> Result<()> {
    let mut tensors: Vec<Tensor> = model
        .named_params()
        .into_iter()
        .map(|(name, m)| tensor(name, m))
        .collect();
    if let Some(p) = peft {
        tensors.extend(p.named_params().into_iter().map(|(name, m)| tensor(name, m)));
    }
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        model_config: model.cfg.clone(),
        peft_config: peft.map(|p| p.cfg.clone()),
        tensors,
    };
    let text = serde_json::to_string(&file).map_err(|e| LabError::Format(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| LabError::io(path, e))
}

fn tensor(name: String, m: &Matrix) -> Tensor {
    Tensor {
        name,
        shape: [m.rows(), m.cols()],
        data: m.data().to_vec(),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| LabError::Format(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
        return Err(LabError::Format(format!(
            "unsupported checkpoint {} v{}",
            file.format, file.version
        )));
    }
    let mut tensors: BTreeMap<String, Tensor> = file.tensors.into_iter().map(|t| (t.name.clone(), t)).collect();

    // Build skeletons with the right shapes, then overwrite every value.
    let mut model = TransformerModel::build(&file.model_config)?;
    let mut peft = match &file.peft_config {
        Some(cfg) => Some(attach(&mut model, cfg)?),
        None => None,
    };

    let names: Vec<String> = model.named_params().into_iter().map(|(n, _)| n).collect();
    for (name, target) in names.iter().zip(model_params_mut(&mut model)) {
        fill(&mut tensors, name, target)?;
    }
    if let Some(p) = peft.as_mut() {
        let names: Vec<String> = p.named_params().into_iter().map(|(n, _)| n).collect();
        for (name, target) in names.iter().zip(p.trainable_mut()) {
            fill(&mut tensors, name, target)?;
        }
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(LabError::Format(format!("unexpected tensor {extra}")));
    }
    Ok(Checkpoint { model, peft })
}

fn fill(tensors: &mut BTreeMap<String, Tensor>, name: &str, target: &mut Matrix) -> Result<()> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| LabError::Format(format!("missing tensor {name}")))?;
    if t.shape != [target.rows(), target.cols()] || t.data.len() != target.len() {
        return Err(LabError::Format(format!(
            "tensor {name} has shape {:?}, expected {:?}",
            t.shape,
            target.shape()
        )));
    }
    target.data_mut().copy_from_slice(&t.data);
    Ok(())
}

/// Mutable view in the same order as [`TransformerModel::named_params`].
fn model_params_mut(model: &mut TransformerModel) -> Vec<&mut Matrix> {
    let mut out: Vec<&mut Matrix> = vec![&mut model.tok_emb, &mut model.pos_emb];
    if let Some(n) = model.emb_norm.as_mut() {
        out.push(&mut n.gain);
        out.push(&mut n.bias);
    }
    for l in &mut model.layers {
        out.extend([
            &mut l.wq,
            &mut l.wk,
            &mut l.wv,
            &mut l.wo,
            &mut l.w1,
            &mut l.w2,
            &mut l.ln1.gain,
            &mut l.ln1.bias,
            &mut l.ln2.gain,
            &mut l.ln2.bias,
        ]);
    }
    out.push(&mut model.final_norm.gain);
    out.push(&mut model.final_norm.bias);
    out.push(&mut model.head);
    out
}
