//! The model's forward pass against a plain-loop reimplementation.

mod common;

use common::{four_variants, random_tokens, randomize, small_model};
use peftlab::model::{ModelConfig, Pooling, TransformerModel};
use peftlab::numcore::{Activation, Matrix};
use peftlab::peft::{attach, AttachedPeft, PeftConfig, SiboSite, Site};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Rows = Vec<Vec<f64>>;

const TOL: f64 = 1e-12;

fn matmul(a: &Rows, b: &Matrix) -> Rows {
    a.iter()
        .map(|row| {
            (0..b.cols())
                .map(|j| row.iter().enumerate().map(|(k, v)| v * b.get(k, j)).sum())
                .collect()
        })
        .collect()
}

fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn lin(a: &Rows, b: &Rows, alpha: f64, beta: f64) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| alpha * p + beta * q).collect())
        .collect()
}

fn act(x: &Rows, kind: Activation) -> Rows {
    x.iter()
        .map(|row| {
            row.iter()
                .map(|&v| match kind {
                    Activation::Relu => {
                        if v > 0.0 {
                            v
                        } else {
                            0.0
                        }
                    }
                    Activation::Gelu => {
                        let c = (2.0 / std::f64::consts::PI).sqrt();
                        0.5 * v * (1.0 + (c * (v + 0.044715 * v.powi(3))).tanh())
                    }
                })
                .collect()
        })
        .collect()
}

fn layernorm(x: &Rows, gain: &Matrix, bias: &Matrix, eps: f64) -> Rows {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / (var + eps).sqrt() * gain.get(0, c) + bias.get(0, c))
                .collect()
        })
        .collect()
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn project(x: &Rows, h0: &Rows, w: &Matrix, site: Site, layer: usize, peft: Option<&AttachedPeft>) -> Rows {
    let Some(p) = peft else {
        return matmul(x, w);
    };
    let Some(m) = p.layers[layer].lora.get(&site) else {
        return matmul(x, w);
    };
    let cfg = &p.cfg;
    let inject = cfg.sibo
        && (cfg.sibo_sites.contains(&SiboSite::AllLowRank)
            || (site == Site::Ffn && cfg.sibo_sites.contains(&SiboSite::Ffn)));
    let mixed = if inject {
        lin(x, h0, 1.0 - cfg.lambda, cfg.lambda)
    } else {
        x.clone()
    };
    let frozen_in = if inject && cfg.sibo_sites.contains(&SiboSite::FrozenPath) {
        &mixed
    } else {
        x
    };
    let low = matmul(&matmul(&mixed, &m.down), &m.up);
    lin(&matmul(frozen_in, w), &low, 1.0, cfg.s)
}

fn adapter(x: &Rows, h0: &Rows, site: Site, layer: usize, peft: Option<&AttachedPeft>) -> Rows {
    let Some(p) = peft else {
        return x.clone();
    };
    let Some(m) = p.layers[layer].adapters.get(&site) else {
        return x.clone();
    };
    let cfg = &p.cfg;
    let sibo_site = if site == Site::Att {
        SiboSite::Att
    } else {
        SiboSite::Ffn
    };
    let x = if cfg.sibo && cfg.sibo_sites.contains(&sibo_site) {
        lin(x, h0, 1.0 - cfg.lambda, cfg.lambda)
    } else {
        x.clone()
    };
    let z = matmul(&act(&matmul(&x, &m.down), cfg.nonlinearity), &m.up);
    add(&x, &z)
}

/// Hidden states `H_0..=H_L` and logits.
fn oracle(model: &TransformerModel, tokens: &[usize], peft: Option<&AttachedPeft>) -> (Vec<Rows>, Rows) {
    let cfg = &model.cfg;
    let mut x: Rows = tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            (0..cfg.d_model)
                .map(|c| model.tok_emb.get(t, c) + model.pos_emb.get(i, c))
                .collect()
        })
        .collect();
    if let Some(n) = &model.emb_norm {
        x = layernorm(&x, &n.gain, &n.bias, cfg.ln_eps);
    }
    let h0 = x.clone();
    let mut hidden = vec![x.clone()];
    let dk = cfg.d_model / cfg.n_heads;
    for (l, w) in model.layers.iter().enumerate() {
        let a = layernorm(&x, &w.ln1.gain, &w.ln1.bias, cfg.ln_eps);
        let q = project(&a, &h0, &w.wq, Site::Q, l, peft);
        let k = project(&a, &h0, &w.wk, Site::K, l, peft);
        let v = project(&a, &h0, &w.wv, Site::V, l, peft);
        let m = tokens.len();
        let mut joined = vec![vec![0.0; cfg.d_model]; m];
        for h in 0..cfg.n_heads {
            for i in 0..m {
                let scores: Vec<f64> = (0..m)
                    .map(|j| (0..dk).map(|c| q[i][h * dk + c] * k[j][h * dk + c]).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let probs = softmax(&scores);
                for c in 0..dk {
                    joined[i][h * dk + c] = (0..m).map(|j| probs[j] * v[j][h * dk + c]).sum();
                }
            }
        }
        x = add(&x, &matmul(&joined, &w.wo));
        x = adapter(&x, &h0, Site::Att, l, peft);
        let b = layernorm(&x, &w.ln2.gain, &w.ln2.bias, cfg.ln_eps);
        let z = act(&project(&b, &h0, &w.w1, Site::Ffn, l, peft), cfg.nonlinearity);
        x = add(&x, &matmul(&z, &w.w2));
        x = adapter(&x, &h0, Site::Ffn, l, peft);
        hidden.push(x.clone());
    }
    let mut feats = layernorm(&x, &model.final_norm.gain, &model.final_norm.bias, cfg.ln_eps);
    if cfg.pooling == Pooling::Mean {
        let n = feats.len() as f64;
        feats = vec![(0..cfg.d_model)
            .map(|c| feats.iter().map(|r| r[c]).sum::<f64>() / n)
            .collect()];
    }
    (hidden, matmul(&feats, &model.head))
}

fn max_diff(a: &Rows, b: &Matrix) -> f64 {
    assert_eq!((a.len(), a[0].len()), b.shape());
    a.iter()
        .enumerate()
        .flat_map(|(r, row)| row.iter().enumerate().map(move |(c, v)| (v - b.get(r, c)).abs()))
        .fold(0.0, f64::max)
}

/// Random layernorm gains and biases, so those parameters matter.
fn perturb_norms(model: &mut TransformerModel, rng: &mut ChaCha8Rng) {
    let d = model.cfg.d_model;
    let mut norms: Vec<_> = model.layers.iter_mut().flat_map(|l| [&mut l.ln1, &mut l.ln2]).collect();
    norms.push(&mut model.final_norm);
    if let Some(n) = model.emb_norm.as_mut() {
        norms.push(n);
    }
    for n in norms {
        n.gain = Matrix::randn(1, d, 0.3, rng)
            .affine_mix(&Matrix::filled(1, d, 1.0), 1.0, 1.0)
            .unwrap();
        n.bias = Matrix::randn(1, d, 0.1, rng);
    }
}

fn assert_matches(cfg: &ModelConfig, peft_cfg: Option<&PeftConfig>, seed: u64, what: &str) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = TransformerModel::build(cfg).unwrap();
    let peft = peft_cfg.map(|p| {
        let mut peft = attach(&mut model, p).unwrap();
        randomize(&mut peft, 0.3, &mut rng);
        peft
    });
    perturb_norms(&mut model, &mut rng);
    let tokens = random_tokens(&mut rng, 3, cfg.vocab_size);

    let trace = model.forward(&tokens, peft.as_ref()).unwrap();
    let (hidden, logits) = oracle(&model, &tokens, peft.as_ref());
    assert_eq!(trace.hidden.len(), cfg.n_layers + 1);
    assert!(max_diff(&hidden[0], &trace.h0) <= TOL, "{what}: h0");
    for (l, (want, got)) in hidden.iter().zip(&trace.hidden).enumerate() {
        let diff = max_diff(want, got);
        assert!(diff <= TOL, "{what}: layer {l} differs by {diff:e}");
    }
    let diff = max_diff(&logits, &trace.logits);
    assert!(diff <= TOL, "{what}: logits differ by {diff:e}");
}

#[test]
fn embedding_is_a_row_gather_plus_position() {
    let model = TransformerModel::build(&small_model(8, 1, 5)).unwrap();
    let tokens = [4, 0, 4, 9];
    let e = model.embed(&tokens).unwrap();
    for (i, &t) in tokens.iter().enumerate() {
        for c in 0..8 {
            assert_eq!(e.get(i, c), model.tok_emb.get(t, c) + model.pos_emb.get(i, c));
        }
    }
    assert!(model.embed(&[10]).is_err());
    assert!(model.embed(&[0; 7]).is_err());
    assert!(model.embed(&[]).is_err());
}

#[test]
fn frozen_base_matches_oracle() {
    assert_matches(&small_model(8, 2, 1), None, 1, "base");
}

#[test]
fn every_variant_matches_oracle() {
    for (i, p) in four_variants(3, 0.2, 0.6).iter().enumerate() {
        assert_matches(&small_model(8, 2, 2), Some(p), 10 + i as u64, &p.label());
    }
}

#[test]
fn placement_and_injection_options_match_oracle() {
    let mut gelu = small_model(8, 2, 3);
    gelu.nonlinearity = Activation::Gelu;
    let mut pooled = small_model(8, 2, 4);
    pooled.pooling = Pooling::Mean;
    pooled.embedding_norm = true;

    let mut adapter_gelu = PeftConfig::adapter(2)
        .with_sibo(0.3)
        .with_sibo_sites(&[SiboSite::Att, SiboSite::Ffn]);
    adapter_gelu.nonlinearity = Activation::Gelu;
    let mut lora_scaled = PeftConfig::lora(2).with_sibo(0.4);
    lora_scaled.s = 2.5;
    let cases = [
        (gelu.clone(), adapter_gelu, "adapter, both sites, gelu"),
        (
            gelu.clone(),
            PeftConfig::adapter(2)
                .with_placement(&[Site::Ffn])
                .with_sibo(0.5)
                .with_sibo_sites(&[SiboSite::Ffn]),
            "adapter ffn only",
        ),
        (gelu.clone(), lora_scaled, "lora s=2.5"),
        (
            gelu.clone(),
            PeftConfig::lora(2)
                .with_sibo(0.5)
                .with_sibo_sites(&[SiboSite::AllLowRank, SiboSite::FrozenPath]),
            "lora frozen path",
        ),
        (
            gelu,
            PeftConfig::lora(2).with_sibo(0.7).with_sibo_sites(&[SiboSite::Ffn]),
            "lora ffn injection",
        ),
        (
            pooled.clone(),
            PeftConfig::lora(2).with_placement(&[Site::Q, Site::V]).with_sibo(0.6),
            "lora q,v pooled",
        ),
        (pooled, PeftConfig::adapter(2).with_sibo(0.2), "adapter pooled"),
    ];
    for (i, (m, p, what)) in cases.iter().enumerate() {
        assert_matches(m, Some(p), 30 + i as u64, what);
    }
}
