#![allow(dead_code)]

use peftlab::model::{trainable_params, ModelConfig, TransformerModel};
use peftlab::numcore::{Matrix, Objective, Tape, Var};
use peftlab::peft::{attach, AttachedPeft, PeftConfig};
use peftlab::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_model(d: usize, layers: usize, seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig::new(d, layers, 2, seed);
    cfg.d_ff = 2 * d;
    cfg.vocab_size = 10;
    cfg.max_seq_len = 6;
    cfg.n_classes = 3;
    cfg
}

/// Vanilla adapter, Adapter-SIBO, vanilla LoRA, LoRA-SIBO.
pub fn four_variants(r: usize, lambda_adapter: f64, lambda_lora: f64) -> [PeftConfig; 4] {
    [
        PeftConfig::adapter(r),
        PeftConfig::adapter(r).with_sibo(lambda_adapter),
        PeftConfig::lora(r),
        PeftConfig::lora(r).with_sibo(lambda_lora),
    ]
}

/// Overwrites every PEFT weight with N(0, std²) draws so that no branch is
/// trivially zero.
pub fn randomize(peft: &mut AttachedPeft, std: f64, rng: &mut ChaCha8Rng) {
    for m in peft.trainable_mut() {
        let noise = Matrix::randn(m.rows(), m.cols(), std, rng);
        m.data_mut().copy_from_slice(noise.data());
    }
}

pub fn random_tokens(rng: &mut ChaCha8Rng, m: usize, vocab: usize) -> Vec<usize> {
    (0..m).map(|_| rng.random_range(0..vocab)).collect()
}

/// Cross-entropy of one tagged sentence over all trainable matrices.
pub struct SentenceLoss {
    pub model: TransformerModel,
    pub peft: AttachedPeft,
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

impl SentenceLoss {
    pub fn new(cfg: &ModelConfig, peft_cfg: &PeftConfig, seed: u64, m: usize) -> Self {
        let mut model = TransformerModel::build(cfg).unwrap();
        let mut peft = attach(&mut model, peft_cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        randomize(&mut peft, 0.3, &mut rng);
        let tokens = random_tokens(&mut rng, m, cfg.vocab_size);
        let labels = (0..m).map(|_| rng.random_range(0..cfg.n_classes)).collect();
        Self {
            model,
            peft,
            tokens,
            labels,
        }
    }
}

impl Objective for SentenceLoss {
    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        trainable_params(&mut self.model, Some(&mut self.peft))
    }

    fn record(&self, tape: &mut Tape) -> Result<(Var, Vec<Var>)> {
        let rec = self.model.record(tape, &self.tokens, Some(&self.peft))?;
        let loss = tape.cross_entropy(rec.logits, &self.labels)?;
        Ok((loss, rec.trainable))
    }
}
