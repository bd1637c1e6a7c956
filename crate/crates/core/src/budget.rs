//! Parameter and per-token FLOP accounting for the PEFT branch.
//!
//! Everything here is a pure function of the configs; no model is built.
//!
//! Counting convention ([`FlopConvention::PerTokenMacs`]), per token:
//!
//! - adapter module: `2·d·r` (down and up projections, one FLOP per MAC)
//! - LoRA module on a `d_in × d_out` weight: `(d_in + d_out)·r` MACs plus
//!   `d_out` scale-by-`s` ops
//! - SIBO mixing: `c·d_in` per injection site, with `c` taken from
//!   [`FlopConstants`] separately for adapters and LoRA
//!
//! The frozen path is not counted, and neither is the classifier head. With
//! the shipped constants a 24-layer, width-1024 model gives 6,291,456 FLOPs
//! for adapters (r=64, att+ffn), 6,389,760 with injection at att, and
//! 835,584 / 884,736 for LoRA (r=8, q+v) without / with injection.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ModelConfig;
use crate::peft::{PeftConfig, PeftKind, SiboSite, Site};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlopConvention {
    PerTokenMacs,
}

/// Multipliers of the counting convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopConstants {
    /// FLOPs per `d·r` in one adapter module.
    pub adapter_per_dr: u64,
    /// FLOPs per output feature for the scale-by-`s` step of a LoRA module.
    pub lora_scale_per_out: u64,
    /// Mixing FLOPs per input feature at one adapter injection site.
    pub adapter_mix_per_dim: u64,
    /// Mixing FLOPs per input feature at one LoRA injection site.
    pub lora_mix_per_dim: u64,
}

pub const DEFAULT_FLOP_CONSTANTS: FlopConstants = FlopConstants {
    adapter_per_dr: 2,
    lora_scale_per_out: 1,
    adapter_mix_per_dim: 4,
    lora_mix_per_dim: 1,
};

impl Default for FlopConstants {
    fn default() -> Self {
        DEFAULT_FLOP_CONSTANTS
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub trainable_params: u64,
    /// Classifier head, reported apart from the PEFT count.
    pub head_params: u64,
    pub peft_flops: u64,
    pub sibo_overhead_flops: u64,
    pub total_flops: u64,
    pub convention: FlopConvention,
    pub constants: FlopConstants,
}

/// `(d_in, d_out)` of the frozen weight behind a LoRA target.
fn lora_shape(model: &ModelConfig, site: Site) -> (u64, u64) {
    let d = model.d_model as u64;
    match site {
        Site::Ffn => (d, model.d_ff as u64),
        _ => (d, d),
    }
}

/// PEFT parameters, head excluded.
pub fn param_count(model: &ModelConfig, peft: &PeftConfig) -> Result<u64> {
    peft.validate(model.d_model)?;
    let r = peft.r as u64;
    let layers = model.n_layers as u64;
    let per_layer: u64 = match peft.kind {
        PeftKind::Adapter => peft.placement.len() as u64 * 2 * model.d_model as u64 * r,
        PeftKind::Lora => peft
            .placement
            .iter()
            .map(|s| {
                let (i, o) = lora_shape(model, *s);
                (i + o) * r
            })
            .sum(),
    };
    Ok(layers * per_layer)
}

pub fn flops_count(model: &ModelConfig, peft: &PeftConfig) -> Result<Budget> {
    flops_count_with(model, peft, DEFAULT_FLOP_CONSTANTS)
}

pub fn flops_count_with(model: &ModelConfig, peft: &PeftConfig, c: FlopConstants) -> Result<Budget> {
    let trainable_params = param_count(model, peft)?;
    let d = model.d_model as u64;
    let r = peft.r as u64;
    let layers = model.n_layers as u64;
    let (per_layer, mix_per_layer) = match peft.kind {
        PeftKind::Adapter => {
            let modules = peft.placement.len() as u64 * c.adapter_per_dr * d * r;
            let sites = [(Site::Att, SiboSite::Att), (Site::Ffn, SiboSite::Ffn)]
                .iter()
                .filter(|(p, s)| peft.placement.contains(p) && peft.injects_at(*s))
                .count() as u64;
            (modules, sites * c.adapter_mix_per_dim * d)
        }
        PeftKind::Lora => {
            let mut modules = 0;
            let mut mix = 0;
            for site in &peft.placement {
                let (i, o) = lora_shape(model, *site);
                modules += (i + o) * r + c.lora_scale_per_out * o;
                if peft.lora_injects(*site) {
                    mix += c.lora_mix_per_dim * i;
                }
            }
            (modules, mix)
        }
    };
    let peft_flops = layers * per_layer;
    let sibo_overhead_flops = layers * mix_per_layer;
    Ok(Budget {
        trainable_params,
        head_params: (model.d_model * model.n_classes) as u64,
        peft_flops,
        sibo_overhead_flops,
        total_flops: peft_flops + sibo_overhead_flops,
        convention: FlopConvention::PerTokenMacs,
        constants: c,
    })
}
