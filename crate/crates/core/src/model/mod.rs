//! Toy pre-norm Transformer encoder with a frozen random base.
//!
//! Layer `ℓ` maps the residual stream `x` as
//!
//! ```text
//! x = x + MHA(LN1(x))      then the `att` adapter, if any
//! x = x + FFN(LN2(x))      then the `ffn` adapter, if any
//! ```
//!
//! LoRA targets wrap the `q`/`k`/`v` projections and the first FFN weight.
//! `h0` is the token + position embedding sum fed to layer 0.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_FORMAT};

use crate::error::{LabError, Result};
use crate::numcore::{hex_digest, Activation, Matrix, Tape, Var};
use crate::peft::{ops, AttachedPeft, BoundLayer, SiboSite, Site};

/// Std of every Gaussian-initialized base weight.
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// One logit row per token.
    #[default]
    None,
    /// Mean of the final token states, one logit row per sequence.
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_classes: usize,
    #[serde(default)]
    pub nonlinearity: Activation,
    pub seed: u64,
    #[serde(default)]
    pub pooling: Pooling,
    /// Apply a (frozen) layernorm to the embedding sum; `h0` is then its output.
    #[serde(default)]
    pub embedding_norm: bool,
    #[serde(default = "default_true")]
    pub train_head: bool,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_true() -> bool {
    true
}

fn default_ln_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    pub fn new(d_model: usize, n_layers: usize, n_heads: usize, seed: u64) -> Self {
        Self {
            d_model,
            n_layers,
            n_heads,
            d_ff: 4 * d_model,
            vocab_size: 32,
            max_seq_len: 16,
            n_classes: 4,
            nonlinearity: Activation::Relu,
            seed,
            pooling: Pooling::None,
            embedding_norm: false,
            train_head: true,
            ln_eps: default_ln_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("n_classes", self.n_classes),
        ] {
            if v < 1 {
                problems.push(format!("{name} must be >= 1"));
            }
        }
        if self.n_heads >= 1 && !self.d_model.is_multiple_of(self.n_heads) {
            problems.push(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if !(self.ln_eps > 0.0 && self.ln_eps.is_finite()) {
            problems.push("ln_eps must be > 0".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(problems))
        }
    }

    /// Closed-form count of every model parameter, head included.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 4 * d * d + 2 * d * self.d_ff + 4 * d;
        let emb_norm = if self.embedding_norm { 2 * d } else { 0 };
        self.vocab_size * d + self.max_seq_len * d + emb_norm + self.n_layers * per_layer + 2 * d + d * self.n_classes
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gain: Matrix,
    pub bias: Matrix,
}

impl LayerNormParams {
    fn new(d: usize) -> Self {
        Self {
            gain: Matrix::filled(1, d, 1.0),
            bias: Matrix::zeros(1, d),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub w1: Matrix,
    pub w2: Matrix,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
}

impl LayerWeights {
    /// Frozen projection that a LoRA target wraps.
    pub fn target(&self, site: Site) -> Option<&Matrix> {
        match site {
            Site::Q => Some(&self.wq),
            Site::K => Some(&self.wk),
            Site::V => Some(&self.wv),
            Site::Ffn => Some(&self.w1),
            Site::Att => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub cfg: ModelConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub emb_norm: Option<LayerNormParams>,
    pub layers: Vec<LayerWeights>,
    pub final_norm: LayerNormParams,
    /// `d x n_classes` classifier; trainable iff `cfg.train_head`.
    pub head: Matrix,
}

/// Values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub h0: Matrix,
    /// `H_0 ..= H_L`; `hidden[0] == h0`.
    pub hidden: Vec<Matrix>,
    pub logits: Matrix,
}

/// Tape nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub h0: Var,
    pub hidden: Vec<Var>,
    pub logits: Var,
    /// Leaves of [`trainable_params`], in the same order.
    pub trainable: Vec<Var>,
}

/// Every trainable matrix: PEFT weights in attachment order, then the head.
pub fn trainable_params<'a>(
    model: &'a mut TransformerModel,
    peft: Option<&'a mut AttachedPeft>,
) -> Vec<&'a mut Matrix> {
    let mut out = peft.map(|p| p.trainable_mut()).unwrap_or_default();
    if model.head.requires_grad() {
        out.push(&mut model.head);
    }
    out
}

impl TransformerModel {
    /// Seeded Gaussian init (std 0.02), layernorms at identity, base frozen.
    pub fn build(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.d_model;
        let tok_emb = Matrix::randn(cfg.vocab_size, d, INIT_STD, &mut rng);
        let pos_emb = Matrix::randn(cfg.max_seq_len, d, INIT_STD, &mut rng);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerWeights {
                wq: Matrix::randn(d, d, INIT_STD, &mut rng),
                wk: Matrix::randn(d, d, INIT_STD, &mut rng),
                wv: Matrix::randn(d, d, INIT_STD, &mut rng),
                wo: Matrix::randn(d, d, INIT_STD, &mut rng),
                w1: Matrix::randn(d, cfg.d_ff, INIT_STD, &mut rng),
                w2: Matrix::randn(cfg.d_ff, d, INIT_STD, &mut rng),
                ln1: LayerNormParams::new(d),
                ln2: LayerNormParams::new(d),
            })
            .collect();
        let mut head = Matrix::randn(d, cfg.n_classes, INIT_STD, &mut rng);
        head.set_requires_grad(cfg.train_head);
        Ok(Self {
            cfg: cfg.clone(),
            tok_emb,
            pos_emb,
            emb_norm: cfg.embedding_norm.then(|| LayerNormParams::new(d)),
            layers,
            final_norm: LayerNormParams::new(d),
            head,
        })
    }

    /// Base parameters by name, in a fixed order (head excluded).
    pub fn named_base(&self) -> Vec<(String, &Matrix)> {
        let mut out = vec![
            ("tok_emb".to_string(), &self.tok_emb),
            ("pos_emb".to_string(), &self.pos_emb),
        ];
        if let Some(n) = &self.emb_norm {
            out.push(("emb_norm.gain".into(), &n.gain));
            out.push(("emb_norm.bias".into(), &n.bias));
        }
        for (i, l) in self.layers.iter().enumerate() {
            for (name, m) in [
                ("wq", &l.wq),
                ("wk", &l.wk),
                ("wv", &l.wv),
                ("wo", &l.wo),
                ("w1", &l.w1),
                ("w2", &l.w2),
                ("ln1.gain", &l.ln1.gain),
                ("ln1.bias", &l.ln1.bias),
                ("ln2.gain", &l.ln2.gain),
                ("ln2.bias", &l.ln2.bias),
            ] {
                out.push((format!("layers.{i}.{name}"), m));
            }
        }
        out.push(("final_norm.gain".into(), &self.final_norm.gain));
        out.push(("final_norm.bias".into(), &self.final_norm.bias));
        out
    }

    pub fn named_params(&self) -> Vec<(String, &Matrix)> {
        let mut out = self.named_base();
        out.push(("head".into(), &self.head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, m)| m.len()).sum()
    }

    /// SHA-256 over every base parameter.
    pub fn base_checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, m) in self.named_base() {
            hasher.update(name.as_bytes());
            m.feed_hasher(&mut hasher);
        }
        hex_digest(hasher)
    }

    /// SHA-256 over every parameter, head included.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for (name, m) in self.named_params() {
            hasher.update(name.as_bytes());
            m.feed_hasher(&mut hasher);
        }
        hex_digest(hasher)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(LabError::Input("empty token sequence".into()));
        }
        if tokens.len() > self.cfg.max_seq_len {
            return Err(LabError::Input(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.cfg.max_seq_len
            )));
        }
        if let Some((pos, id)) = tokens.iter().enumerate().find(|(_, id)| **id >= self.cfg.vocab_size) {
            return Err(LabError::Input(format!(
                "token id {id} at position {pos} out of range for vocab {}",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// `emb[token_i] + pos[i]` for every position (no embedding norm).
    pub fn embed(&self, tokens: &[usize]) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        let d = self.cfg.d_model;
        let mut data = Vec::with_capacity(tokens.len() * d);
        for (i, t) in tokens.iter().enumerate() {
            data.extend(self.tok_emb.row(*t).iter().zip(self.pos_emb.row(i)).map(|(a, b)| a + b));
        }
        Matrix::new(tokens.len(), d, data)
    }

    /// Runs the model on a fresh tape and collects the values.
    pub fn forward(&self, tokens: &[usize], peft: Option<&AttachedPeft>) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let rec = self.record(&mut tape, tokens, peft)?;
        Ok(ForwardTrace {
            h0: tape.value(rec.h0).clone(),
            hidden: rec.hidden.iter().map(|v| tape.value(*v).clone()).collect(),
            logits: tape.value(rec.logits).clone(),
        })
    }

    /// Records the forward pass on `tape`.
    pub fn record(&self, tape: &mut Tape, tokens: &[usize], peft: Option<&AttachedPeft>) -> Result<Recorded> {
        if let Some(p) = peft {
            p.check_compatible(self)?;
        }
        let bound = peft.map(|p| p.bind(tape));
        let mut trainable = bound.as_ref().map(|b| b.ordered.clone()).unwrap_or_default();
        let head = tape.leaf(&self.head);
        if self.head.requires_grad() {
            trainable.push(head);
        }

        let eps = self.cfg.ln_eps;
        let mut x = tape.constant(self.embed(tokens)?);
        if let Some(n) = &self.emb_norm {
            x = layernorm(tape, x, n, eps)?;
        }
        let h0 = x;
        let mut hidden = vec![h0];

        for (li, layer) in self.layers.iter().enumerate() {
            let site_peft = peft.zip(bound.as_ref()).map(|(p, b)| (p, &b.layers[li]));

            let a = layernorm(tape, x, &layer.ln1, eps)?;
            let attn = self.attention(tape, layer, a, h0, site_peft)?;
            x = tape.add(x, attn)?;
            x = apply_adapter(tape, x, h0, Site::Att, SiboSite::Att, site_peft)?;

            let b = layernorm(tape, x, &layer.ln2, eps)?;
            let z = project(tape, layer, Site::Ffn, b, h0, site_peft)?;
            let z = tape.nonlinearity(z, self.cfg.nonlinearity)?;
            let w2 = tape.leaf(&layer.w2);
            let z = tape.matmul(z, w2)?;
            x = tape.add(x, z)?;
            x = apply_adapter(tape, x, h0, Site::Ffn, SiboSite::Ffn, site_peft)?;

            hidden.push(x);
        }

        let mut feats = layernorm(tape, x, &self.final_norm, eps)?;
        if self.cfg.pooling == Pooling::Mean {
            feats = tape.mean_rows(feats)?;
        }
        let logits = tape.matmul(feats, head)?;
        Ok(Recorded {
            h0,
            hidden,
            logits,
            trainable,
        })
    }

    fn attention(
        &self,
        tape: &mut Tape,
        layer: &LayerWeights,
        a: Var,
        h0: Var,
        site_peft: Option<(&AttachedPeft, &BoundLayer)>,
    ) -> Result<Var> {
        let q = project(tape, layer, Site::Q, a, h0, site_peft)?;
        let k = project(tape, layer, Site::K, a, h0, site_peft)?;
        let v = project(tape, layer, Site::V, a, h0, site_peft)?;
        let dk = self.cfg.head_dim();
        let inv_sqrt = 1.0 / (dk as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.n_heads);
        for h in 0..self.cfg.n_heads {
            let qh = tape.slice_cols(q, h * dk, dk)?;
            let kh = tape.slice_cols(k, h * dk, dk)?;
            let vh = tape.slice_cols(v, h * dk, dk)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, inv_sqrt)?;
            let probs = tape.softmax_rows(scores)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let joined = tape.concat_cols(&heads)?;
        let wo = tape.leaf(&layer.wo);
        tape.matmul(joined, wo)
    }
}

fn layernorm(tape: &mut Tape, x: Var, p: &LayerNormParams, eps: f64) -> Result<Var> {
    let g = tape.leaf(&p.gain);
    let b = tape.leaf(&p.bias);
    tape.layernorm_rows(x, g, b, eps)
}

/// `input · W` for a projection, routed through LoRA when one targets it.
fn project(
    tape: &mut Tape,
    layer: &LayerWeights,
    site: Site,
    input: Var,
    h0: Var,
    site_peft: Option<(&AttachedPeft, &BoundLayer)>,
) -> Result<Var> {
    let w = tape.leaf(layer.target(site).expect("projection site"));
    let lora = site_peft.and_then(|(p, b)| b.lora.get(&site).map(|vars| (p, *vars)));
    match lora {
        None => tape.matmul(input, w),
        Some((p, vars)) => {
            let cfg = &p.cfg;
            if cfg.lora_injects(site) {
                let frozen = cfg.injects_at(SiboSite::FrozenPath);
                ops::lora_sibo_forward(tape, vars, w, input, h0, cfg.lambda, cfg.s, frozen)
            } else {
                ops::lora_forward(tape, vars, w, input, cfg.s)
            }
        }
    }
}

fn apply_adapter(
    tape: &mut Tape,
    x: Var,
    h0: Var,
    site: Site,
    sibo_site: SiboSite,
    site_peft: Option<(&AttachedPeft, &BoundLayer)>,
) -> Result<Var> {
    let Some((p, b)) = site_peft else {
        return Ok(x);
    };
    let Some(vars) = b.adapters.get(&site) else {
        return Ok(x);
    };
    let cfg = &p.cfg;
    if cfg.injects_at(sibo_site) {
        ops::adapter_sibo_forward(tape, *vars, x, h0, cfg.lambda, cfg.nonlinearity)
    } else {
        ops::adapter_forward(tape, *vars, x, cfg.nonlinearity)
    }
}

/// Shape of the frozen weight a LoRA target at `site` wraps.
pub(crate) fn lora_target_shapes(model: &TransformerModel, site: Site) -> Option<(usize, usize)> {
    model.layers.first().and_then(|l| l.target(site)).map(Matrix::shape)
}
