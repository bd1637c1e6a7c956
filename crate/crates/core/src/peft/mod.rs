//! Adapter and LoRA modules with optional initial-residual injection.

mod config;
mod modules;

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{PeftConfig, PeftKind, SiboSite, Site, DEFAULT_ADAPTER_LAMBDA, DEFAULT_INIT_STD, DEFAULT_LORA_LAMBDA};
pub use modules::{ops, sibo_mix, AdapterModule, AdapterVars, LoraModule, LoraVars};

use crate::error::{LabError, Result};
use crate::model::{lora_target_shapes, TransformerModel};
use crate::numcore::{Matrix, Tape, Var};

/// Offset mixed into the model seed to derive the PEFT init stream.
const PEFT_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, Default)]
pub struct LayerPeft {
    pub adapters: BTreeMap<Site, AdapterModule>,
    pub lora: BTreeMap<Site, LoraModule>,
}

/// PEFT state attached to one model.
#[derive(Debug, Clone)]
pub struct AttachedPeft {
    pub cfg: PeftConfig,
    pub layers: Vec<LayerPeft>,
}

#[derive(Debug, Clone, Default)]
pub struct BoundLayer {
    pub adapters: BTreeMap<Site, AdapterVars>,
    pub lora: BTreeMap<Site, LoraVars>,
}

/// Tape leaves for every PEFT weight.
#[derive(Debug, Clone)]
pub struct BoundPeft {
    pub layers: Vec<BoundLayer>,
    /// Same order as [`AttachedPeft::trainable_mut`].
    pub ordered: Vec<Var>,
}

/// One module per (layer, placement site), seeded from the model seed.
pub fn attach(model: &mut TransformerModel, cfg: &PeftConfig) -> Result<AttachedPeft> {
    attach_seeded(model, cfg, model.cfg.seed ^ PEFT_SEED_SALT)
}

pub fn attach_seeded(model: &mut TransformerModel, cfg: &PeftConfig, seed: u64) -> Result<AttachedPeft> {
    cfg.validate(model.cfg.d_model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = model.cfg.d_model;
    let mut layers = Vec::with_capacity(model.cfg.n_layers);
    for _ in 0..model.cfg.n_layers {
        let mut layer = LayerPeft::default();
        for site in &cfg.placement {
            match cfg.kind {
                PeftKind::Adapter => {
                    layer
                        .adapters
                        .insert(*site, AdapterModule::init(d, cfg.r, cfg.init_std, &mut rng));
                }
                PeftKind::Lora => {
                    let (d_in, d_out) = lora_target_shapes(model, *site)
                        .ok_or_else(|| LabError::config(format!("no frozen weight for lora target {site}")))?;
                    layer
                        .lora
                        .insert(*site, LoraModule::init(d_in, d_out, cfg.r, cfg.init_std, &mut rng));
                }
            }
        }
        layers.push(layer);
    }
    freeze_base(model);
    Ok(AttachedPeft {
        cfg: cfg.clone(),
        layers,
    })
}

fn freeze_base(model: &mut TransformerModel) {
    let mut all: Vec<&mut Matrix> = vec![&mut model.tok_emb, &mut model.pos_emb];
    if let Some(n) = model.emb_norm.as_mut() {
        all.push(&mut n.gain);
        all.push(&mut n.bias);
    }
    for l in &mut model.layers {
        all.extend([
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
    all.push(&mut model.final_norm.gain);
    all.push(&mut model.final_norm.bias);
    for m in all {
        m.set_requires_grad(false);
    }
}

impl AttachedPeft {
    pub fn module_count(&self) -> usize {
        self.layers.iter().map(|l| l.adapters.len() + l.lora.len()).sum()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.adapters.values().map(AdapterModule::param_count).sum::<usize>()
                    + l.lora.values().map(LoraModule::param_count).sum::<usize>()
            })
            .sum()
    }

    /// Named weights under the `peft.` namespace, in trainable order.
    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for (site, a) in &l.adapters {
                out.push((format!("peft.layers.{i}.adapter.{site}.down"), &a.down));
                out.push((format!("peft.layers.{i}.adapter.{site}.up"), &a.up));
            }
            for (site, m) in &l.lora {
                out.push((format!("peft.layers.{i}.lora.{site}.down"), &m.down));
                out.push((format!("peft.layers.{i}.lora.{site}.up"), &m.up));
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in &mut self.layers {
            for a in l.adapters.values_mut() {
                out.push(&mut a.down);
                out.push(&mut a.up);
            }
            for m in l.lora.values_mut() {
                out.push(&mut m.down);
                out.push(&mut m.up);
            }
        }
        out
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundPeft {
        let mut ordered = Vec::new();
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let adapters = l
                    .adapters
                    .iter()
                    .map(|(site, a)| {
                        let v = a.bind(tape);
                        ordered.extend([v.down, v.up]);
                        (*site, v)
                    })
                    .collect();
                let lora = l
                    .lora
                    .iter()
                    .map(|(site, m)| {
                        let v = m.bind(tape);
                        ordered.extend([v.down, v.up]);
                        (*site, v)
                    })
                    .collect();
                BoundLayer { adapters, lora }
            })
            .collect();
        BoundPeft { layers, ordered }
    }

    /// Errors unless every module fits the model it is used with.
    pub fn check_compatible(&self, model: &TransformerModel) -> Result<()> {
        let mut problems = Vec::new();
        if self.layers.len() != model.cfg.n_layers {
            problems.push(format!(
                "peft has {} layers, model has {}",
                self.layers.len(),
                model.cfg.n_layers
            ));
        }
        let d = model.cfg.d_model;
        for (i, (l, w)) in self.layers.iter().zip(&model.layers).enumerate() {
            for (site, a) in &l.adapters {
                if a.down.rows() != d || a.up.cols() != d || a.down.cols() != a.up.rows() {
                    problems.push(format!("layer {i} adapter {site} does not fit d_model {d}"));
                }
            }
            for (site, m) in &l.lora {
                let Some(target) = w.target(*site) else {
                    problems.push(format!("layer {i} lora target {site} has no frozen weight"));
                    continue;
                };
                if m.down.rows() != target.rows() || m.up.cols() != target.cols() || m.down.cols() != m.up.rows() {
                    problems.push(format!("layer {i} lora {site} does not fit {:?}", target.shape()));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(problems))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn model(d: usize, layers: usize) -> TransformerModel {
        let mut cfg = ModelConfig::new(d, layers, 2, 1);
        cfg.vocab_size = 8;
        cfg.max_seq_len = 4;
        TransformerModel::build(&cfg).unwrap()
    }

    #[test]
    fn attach_counts_modules_and_params() {
        let mut m = model(8, 3);
        let a = attach(&mut m, &PeftConfig::adapter(2)).unwrap();
        assert_eq!(a.module_count(), 6);
        assert_eq!(a.param_count(), 6 * 2 * 8 * 2);

        let cfg = PeftConfig::lora(2).with_placement(&[Site::Q, Site::V]);
        let l = attach(&mut m, &cfg).unwrap();
        assert_eq!(l.param_count(), 6 * 2 * 8 * 2);
        let with_ffn = attach(&mut m, &PeftConfig::lora(2)).unwrap();
        // q, k, v: 2*8*2 each; ffn: (8 + 32)*2
        assert_eq!(with_ffn.param_count(), 3 * (3 * 32 + 80));
    }

    #[test]
    fn sibo_adds_no_parameters() {
        let mut m = model(8, 2);
        for base in [PeftConfig::adapter(3), PeftConfig::lora(3)] {
            let plain = attach(&mut m, &base).unwrap().param_count();
            for lambda in [0.0, 0.2, 0.7] {
                let sibo = attach(&mut m, &base.clone().with_sibo(lambda)).unwrap();
                assert_eq!(sibo.param_count(), plain);
            }
        }
    }

    #[test]
    fn attached_lora_reproduces_base_at_init() {
        let mut m = model(8, 2);
        let base = m.forward(&[1, 2, 3], None).unwrap();
        let peft = attach(&mut m, &PeftConfig::lora(2)).unwrap();
        let with = m.forward(&[1, 2, 3], Some(&peft)).unwrap();
        assert_eq!(base.logits.data(), with.logits.data());
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let mut small = model(8, 2);
        let mut big = model(16, 2);
        let peft = attach(&mut small, &PeftConfig::adapter(2)).unwrap();
        let _ = attach(&mut big, &PeftConfig::adapter(2)).unwrap();
        assert!(matches!(big.forward(&[1], Some(&peft)), Err(LabError::Config(_))));
        assert!(attach(&mut small, &PeftConfig::adapter(9)).is_err());
    }
}
