use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::numcore::Activation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeftKind {
    Adapter,
    Lora,
}

impl fmt::Display for PeftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PeftKind::Adapter => "adapter",
            PeftKind::Lora => "lora",
        })
    }
}

/// Where a PEFT module is attached inside a layer.
///
/// Adapters use `att`/`ffn` (after each sublayer). LoRA uses `q`/`k`/`v`
/// for the attention projections and `ffn` for the first feed-forward weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Att,
    Ffn,
    Q,
    K,
    V,
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Site::Att => "att",
            Site::Ffn => "ffn",
            Site::Q => "q",
            Site::K => "k",
            Site::V => "v",
        })
    }
}

/// Where the initial residual is mixed in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiboSite {
    /// Adapter after the attention sublayer.
    Att,
    /// Adapter after the feed-forward sublayer.
    Ffn,
    /// Input of every low-rank branch.
    AllLowRank,
    /// Input of the frozen weight of every LoRA target as well.
    FrozenPath,
}

impl fmt::Display for SiboSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SiboSite::Att => "att",
            SiboSite::Ffn => "ffn",
            SiboSite::AllLowRank => "all_low_rank",
            SiboSite::FrozenPath => "frozen_path",
        })
    }
}

pub const DEFAULT_ADAPTER_LAMBDA: f64 = 0.2;
pub const DEFAULT_LORA_LAMBDA: f64 = 0.6;
pub const DEFAULT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "PeftConfigRepr")]
pub struct PeftConfig {
    pub kind: PeftKind,
    /// Bottleneck width (adapter) or rank (LoRA).
    pub r: usize,
    pub lambda: f64,
    /// LoRA branch scale.
    pub s: f64,
    pub sibo: bool,
    pub placement: BTreeSet<Site>,
    pub sibo_sites: BTreeSet<SiboSite>,
    pub nonlinearity: Activation,
    /// Std of the Gaussian used for the down projections.
    pub init_std: f64,
}

/// On-disk form; absent fields take the defaults of `kind`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PeftConfigRepr {
    kind: PeftKind,
    r: usize,
    lambda: Option<f64>,
    s: Option<f64>,
    #[serde(default)]
    sibo: bool,
    placement: Option<BTreeSet<Site>>,
    sibo_sites: Option<BTreeSet<SiboSite>>,
    #[serde(default)]
    nonlinearity: Activation,
    init_std: Option<f64>,
}

impl From<PeftConfigRepr> for PeftConfig {
    fn from(repr: PeftConfigRepr) -> Self {
        let mut cfg = match repr.kind {
            PeftKind::Adapter => PeftConfig::adapter(repr.r),
            PeftKind::Lora => PeftConfig::lora(repr.r),
        };
        cfg.sibo = repr.sibo;
        cfg.nonlinearity = repr.nonlinearity;
        if let Some(l) = repr.lambda {
            cfg.lambda = l;
        }
        if let Some(s) = repr.s {
            cfg.s = s;
        }
        if let Some(p) = repr.placement {
            cfg.placement = p;
        }
        if let Some(p) = repr.sibo_sites {
            cfg.sibo_sites = p;
        }
        if let Some(std) = repr.init_std {
            cfg.init_std = std;
        }

        cfg
    }
}

impl PeftConfig {
    /// Adapters after both sublayers; injection at the attention site only.
    pub fn adapter(r: usize) -> Self {
        Self {
            kind: PeftKind::Adapter,
            r,
            lambda: DEFAULT_ADAPTER_LAMBDA,
            s: 1.0,
            sibo: false,
            placement: [Site::Att, Site::Ffn].into(),
            sibo_sites: [SiboSite::Att].into(),
            nonlinearity: Activation::Relu,
            init_std: DEFAULT_INIT_STD,
        }
    }

    /// LoRA on q, k, v and the first feed-forward weight; injection into
    /// every low-rank branch, frozen path untouched.
    pub fn lora(r: usize) -> Self {
        Self {
            kind: PeftKind::Lora,
            r,
            lambda: DEFAULT_LORA_LAMBDA,
            s: 1.0,
            sibo: false,
            placement: [Site::Q, Site::K, Site::V, Site::Ffn].into(),
            sibo_sites: [SiboSite::AllLowRank].into(),
            nonlinearity: Activation::Relu,
            init_std: DEFAULT_INIT_STD,
        }
    }

    pub fn with_sibo(mut self, lambda: f64) -> Self {
        self.sibo = true;
        self.lambda = lambda;
        self
    }

    pub fn with_placement(mut self, sites: &[Site]) -> Self {
        self.placement = sites.iter().copied().collect();
        self
    }

    pub fn with_sibo_sites(mut self, sites: &[SiboSite]) -> Self {
        self.sibo_sites = sites.iter().copied().collect();
        self
    }

    /// True when the initial residual is mixed in at `site`.
    pub fn injects_at(&self, site: SiboSite) -> bool {
        self.sibo && self.sibo_sites.contains(&site)
    }

    /// True when the LoRA branch on target `site` mixes in `h0`.
    pub fn lora_injects(&self, site: Site) -> bool {
        self.injects_at(SiboSite::AllLowRank) || (site == Site::Ffn && self.injects_at(SiboSite::Ffn))
    }

    /// Human-readable label, e.g. `lora-sibo(0.6)`.
    pub fn label(&self) -> String {
        if self.sibo {
            format!("{}-sibo({})", self.kind, self.lambda)
        } else {
            self.kind.to_string()
        }
    }

    /// Checks the config against a model width `d_model`.
    pub fn validate(&self, d_model: usize) -> Result<()> {
        let mut problems = Vec::new();
        if !(0.0..1.0).contains(&self.lambda) {
            problems.push(format!("lambda {} must lie in [0, 1)", self.lambda));
        }
        if self.r < 1 || self.r > d_model {
            problems.push(format!("r {} must lie in [1, d_model={d_model}]", self.r));
        }
        if !(self.s >= 1.0 && self.s.is_finite()) {
            problems.push(format!("scale s {} must be finite and >= 1", self.s));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            problems.push(format!("init_std {} must be finite and >= 0", self.init_std));
        }
        if self.placement.is_empty() {
            problems.push("placement must name at least one site".into());
        }
        match self.kind {
            PeftKind::Adapter => {
                for site in &self.placement {
                    if !matches!(site, Site::Att | Site::Ffn) {
                        problems.push(format!("adapter placement {site} not in {{att, ffn}}"));
                    }
                }
                for site in &self.sibo_sites {
                    let ok = match site {
                        SiboSite::Att => self.placement.contains(&Site::Att),
                        SiboSite::Ffn => self.placement.contains(&Site::Ffn),
                        _ => false,
                    };
                    if !ok {
                        problems.push(format!("adapter injection site {site} has no adapter"));
                    }
                }
            }
            PeftKind::Lora => {
                if self.placement.contains(&Site::Att) {
                    problems.push("lora placement att not in {q, k, v, ffn}".into());
                }
                for site in &self.sibo_sites {
                    if !matches!(site, SiboSite::AllLowRank | SiboSite::Ffn | SiboSite::FrozenPath) {
                        problems.push(format!(
                            "lora injection site {site} not in {{all_low_rank, ffn, frozen_path}}"
                        ));
                    }
                }
                let all = self.sibo_sites.contains(&SiboSite::AllLowRank);
                let ffn = self.sibo_sites.contains(&SiboSite::Ffn);
                if self.sibo && all == ffn {
                    problems.push("lora injection needs exactly one of all_low_rank, ffn".into());
                }
                if ffn && !self.placement.contains(&Site::Ffn) {
                    problems.push("lora injection site ffn has no ffn target".into());
                }
            }
        }
        if self.sibo && self.sibo_sites.is_empty() {
            problems.push("sibo enabled with no injection sites".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(problems))
        }
    }
}
