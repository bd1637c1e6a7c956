//! Experiment specs and the runners behind the CLI.
//!
//! A run directory `<output_dir>/<run_id>/` holds:
//!
//! | file | content |
//! |---|---|
//! | `config.toml` | resolved spec; `peftlab run --config` on it reproduces the run |
//! | `budget.json` | [`Budget`] for the spec |
//! | `metrics.csv` | `step,lr,loss,acc` (acc on the last step of each epoch) |
//! | `similarity.csv` | `layer,mean_similarity` over the test split |
//! | `<run-id>.profile.svg` | the same profile as a line chart |
//! | `<run-id>.heatmap.csv` / `.svg` | last-layer cosine matrix of the first test sentence |
//! | `summary.json` | accuracies and similarity summary |
//! | `vanilla.*.csv`, `compare.csv` | paired runs only: the matched vanilla run and the last-layer comparison |

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::budget::{flops_count, Budget};
use crate::diagnostics::{
    heatmap_export, last_layers_compare, layer_profile, similarity_matrix, ComparisonTable, ReportMeta,
    SimilarityReport,
};
use crate::error::{LabError, Result};
use crate::model::{ModelConfig, TransformerModel};
use crate::numcore::{Matrix, Tape};
use crate::peft::{attach, AttachedPeft, PeftConfig, PeftKind, SiboSite, Site};
use crate::train::{check_task, train_on, Example, SyntheticTask, TrainConfig, TrainedRun};

/// Relative `output_dir`s are resolved under this directory when set.
pub const OUTPUT_ROOT_ENV: &str = "PEFTLAB_OUTPUT_ROOT";

/// Layers covered by `compare.csv`.
pub const DEFAULT_COMPARE_LAYERS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementVariant {
    /// Adapter injection at the attention site.
    Att,
    /// Adapter injection at the feed-forward site.
    Ffn,
    /// Adapter injection at both sites.
    Both,
    /// LoRA injection into the low-rank branches only.
    LowRankOnly,
    /// LoRA injection into the low-rank branches and the frozen weight.
    FrozenPath,
}

impl PlacementVariant {
    pub fn defaults(kind: PeftKind) -> Vec<Self> {
        match kind {
            PeftKind::Adapter => vec![Self::Att, Self::Ffn, Self::Both],
            PeftKind::Lora => vec![Self::LowRankOnly, Self::FrozenPath],
        }
    }

    pub fn kind(self) -> PeftKind {
        match self {
            Self::Att | Self::Ffn | Self::Both => PeftKind::Adapter,
            Self::LowRankOnly | Self::FrozenPath => PeftKind::Lora,
        }
    }

    pub fn sibo_sites(self) -> Vec<SiboSite> {
        match self {
            Self::Att => vec![SiboSite::Att],
            Self::Ffn => vec![SiboSite::Ffn],
            Self::Both => vec![SiboSite::Att, SiboSite::Ffn],
            Self::LowRankOnly => vec![SiboSite::AllLowRank],
            Self::FrozenPath => vec![SiboSite::AllLowRank, SiboSite::FrozenPath],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Att => "att",
            Self::Ffn => "ffn",
            Self::Both => "both",
            Self::LowRankOnly => "low_rank_only",
            Self::FrozenPath => "frozen_path",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweeps {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambdas: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placements: Option<Vec<PlacementVariant>>,
    /// Seeds for matched-seed ablations; each sets the model and training seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub run_id: String,
    pub output_dir: PathBuf,
    /// Also train the matched vanilla run and write `compare.csv`.
    #[serde(default)]
    pub paired: bool,
    #[serde(default = "default_compare_layers")]
    pub compare_layers: usize,
    pub model: ModelConfig,
    pub peft: PeftConfig,
    pub train: TrainConfig,
    pub task: SyntheticTask,
    #[serde(default)]
    pub sweeps: Sweeps,
}

fn default_compare_layers() -> usize {
    DEFAULT_COMPARE_LAYERS
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut collect = |r: Result<()>| match r {
            Ok(()) => {}
            Err(LabError::Config(p)) => problems.extend(p),
            Err(e) => problems.push(e.to_string()),
        };
        collect(self.model.validate());
        collect(self.peft.validate(self.model.d_model));
        collect(self.train.validate());
        collect(self.task.validate());
        collect(check_task(&self.model, &self.task));
        if self.run_id.is_empty()
            || !self
                .run_id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            problems.push(format!(
                "run_id {:?} must be nonempty and use [A-Za-z0-9._-]",
                self.run_id
            ));
        }
        if self.compare_layers == 0 {
            problems.push("compare_layers must be >= 1".into());
        }
        if self.task.seq_len < 2 {
            problems.push("similarity needs seq_len >= 2".into());
        }
        if let Some(l) = &self.sweeps.lambdas {
            if l.is_empty() {
                problems.push("sweeps.lambdas is empty".into());
            }
            for v in l {
                if !(0.0..1.0).contains(v) {
                    problems.push(format!("sweep lambda {v} must lie in [0, 1)"));
                }
            }
        }
        if let Some(p) = &self.sweeps.placements {
            if p.is_empty() {
                problems.push("sweeps.placements is empty".into());
            }
            for v in p {
                if v.kind() != self.peft.kind {
                    problems.push(format!(
                        "placement variant {} does not apply to {}",
                        v.name(),
                        self.peft.kind
                    ));
                }
            }
        }
        if matches!(&self.sweeps.seeds, Some(s) if s.is_empty()) {
            problems.push("sweeps.seeds is empty".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(LabError::Config(problems))
        }
    }

    /// Resolved TOML snapshot.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| LabError::Format(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| LabError::Format(e.to_string()))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let spec: Self = table
            .try_into()
            .map_err(|e: toml::de::Error| LabError::config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// The same experiment with SIBO switched off.
    pub fn vanilla(&self) -> Self {
        let mut v = self.clone();
        v.peft.sibo = false;
        v
    }

    /// Sets the model-init and shuffling seeds; the data stays fixed.
    pub fn reseeded(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.model.seed = seed;
        s.train.seed = seed;
        s
    }

    pub fn run_dir(&self, output_root: Option<&Path>) -> PathBuf {
        let base = match output_root {
            Some(root) if self.output_dir.is_relative() => root.join(&self.output_dir),
            _ => self.output_dir.clone(),
        };
        base.join(&self.run_id)
    }
}

fn read_table(path: &Path) -> Result<toml::Table> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    toml::from_str(&text).map_err(|e| LabError::Format(format!("{}: {e}", path.display())))
}

/// Applies `path.to.key=value` overrides. Values are parsed as TOML, falling
/// back to a bare string.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .ok_or_else(|| LabError::config(format!("override {item:?} is not path=value")))?;
        let keys: Vec<&str> = path.trim().split('.').collect();
        if keys.iter().any(|k| k.is_empty()) {
            return Err(LabError::config(format!("override path {path:?} has an empty key")));
        }
        let value = parse_value(raw.trim());
        let (last, parents) = keys.split_last().expect("split yields at least one key");
        let mut node = &mut *table;
        for key in parents {
            let entry = node
                .entry(key.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| LabError::config(format!("override {path:?}: {key} is not a table")))?;
        }
        node.insert(last.to_string(), value);
    }
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Reads a spec file and applies overrides before validation.
pub fn load_spec(path: &Path, overrides: &[String]) -> Result<ExperimentSpec> {
    let mut table = read_table(path)?;
    apply_overrides(&mut table, overrides)?;
    ExperimentSpec::from_table(table)
}

/// Reads only the `model` and `peft` sections, for budgets.
pub fn load_budget_input(path: &Path, overrides: &[String]) -> Result<(ModelConfig, PeftConfig)> {
    #[derive(Deserialize)]
    struct Input {
        model: ModelConfig,
        peft: PeftConfig,
    }
    let mut table = read_table(path)?;
    apply_overrides(&mut table, overrides)?;
    table.retain(|k, _| k == "model" || k == "peft");
    let input: Input = table
        .try_into()
        .map_err(|e: toml::de::Error| LabError::config(e.to_string()))?;
    input.model.validate()?;
    input.peft.validate(input.model.d_model)?;
    Ok((input.model, input.peft))
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub output_root: Option<PathBuf>,
    pub dry_run: bool,
    /// Replace an existing run directory.
    pub force: bool,
}

/// In-memory result of training one spec and profiling its test split.
#[derive(Debug, Clone)]
pub struct Trained {
    pub run: TrainedRun,
    pub profile: SimilarityReport,
    /// Last-layer cosine matrix of the first test sentence.
    pub heatmap: Matrix,
    pub majority_baseline: f64,
}

/// Trains `spec` and profiles the test split. No files are written.
pub fn train_and_profile(spec: &ExperimentSpec) -> Result<Trained> {
    spec.validate()?;
    let mut model = TransformerModel::build(&spec.model)?;
    let mut peft = attach(&mut model, &spec.peft)?;
    let (train_set, test_set) = spec.task.splits()?;
    log::info!(
        "{}: training {} on {} examples",
        spec.run_id,
        spec.peft.label(),
        train_set.len()
    );
    let run = train_on(&mut model, &mut peft, &train_set, &test_set, &spec.train)?;
    let traces = test_set
        .iter()
        .map(|ex| model.forward(&ex.tokens, Some(&peft)))
        .collect::<Result<Vec<_>>>()?;
    let meta = ReportMeta {
        seed: spec.model.seed,
        lambda: if spec.peft.sibo { spec.peft.lambda } else { 0.0 },
        method: spec.peft.label(),
        dataset: format!("{:?}", spec.task.kind),
    };
    let heatmap = similarity_matrix(traces[0].hidden.last().expect("trace has H_0"))?;
    let profile = layer_profile(&traces, meta)?;
    Ok(Trained {
        majority_baseline: SyntheticTask::majority_baseline(&test_set),
        run,
        profile,
        heatmap,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub init_accuracy: f64,
    pub final_accuracy: f64,
    pub majority_baseline: f64,
    pub per_layer_mean: Vec<f64>,
    pub last_layer_similarity: f64,
    pub base_checksum: String,
}

impl From<&Trained> for RunMetrics {
    fn from(t: &Trained) -> Self {
        Self {
            init_accuracy: t.run.init_accuracy,
            final_accuracy: t.run.final_accuracy,
            majority_baseline: t.majority_baseline,
            per_layer_mean: t.profile.per_layer_mean.clone(),
            last_layer_similarity: t.profile.last(),
            base_checksum: t.run.base_checksum_after.clone(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub run_id: String,
    pub method: String,
    #[serde(skip)]
    pub dir: PathBuf,
    pub budget: Budget,
    pub metrics: Option<RunMetrics>,
    pub vanilla: Option<RunMetrics>,
    pub compare: Option<ComparisonTable>,
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| LabError::io(path, e))
}

fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        if !force {
            return Err(LabError::config(format!(
                "run directory {} already exists (use --force to replace it)",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))
}

fn to_json<T: Serialize>(value: &T) -> Result<String> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| LabError::Format(e.to_string()))
}

/// Runs one experiment and writes its directory.
pub fn run(spec: &ExperimentSpec, opts: &RunOptions) -> Result<RunSummary> {
    spec.validate()?;
    let dir = spec.run_dir(opts.output_root.as_deref());
    prepare_dir(&dir, opts.force)?;
    let budget = flops_count(&spec.model, &spec.peft)?;
    write(&dir.join("config.toml"), &spec.to_toml()?)?;
    write(&dir.join("budget.json"), &to_json(&budget)?)?;
    let mut summary = RunSummary {
        run_id: spec.run_id.clone(),
        method: spec.peft.label(),
        dir: dir.clone(),
        budget,
        metrics: None,
        vanilla: None,
        compare: None,
    };
    if opts.dry_run {
        return Ok(summary);
    }

    let trained = train_and_profile(spec)?;
    write(&dir.join("metrics.csv"), &trained.run.metrics_csv())?;
    write(&dir.join("similarity.csv"), &trained.profile.to_csv())?;
    write(
        &dir.join(format!("{}.profile.svg", spec.run_id)),
        &trained.profile.to_svg(),
    )?;
    heatmap_export(&trained.heatmap, &dir.join(format!("{}.heatmap", spec.run_id)))?;
    summary.metrics = Some(RunMetrics::from(&trained));

    if spec.paired && spec.peft.sibo {
        let vanilla = train_and_profile(&spec.vanilla())?;
        write(&dir.join("vanilla.metrics.csv"), &vanilla.run.metrics_csv())?;
        write(&dir.join("vanilla.similarity.csv"), &vanilla.profile.to_csv())?;
        let table = last_layers_compare(&vanilla.profile, &trained.profile, spec.compare_layers)?;
        write(&dir.join("compare.csv"), &table.to_csv())?;
        summary.vanilla = Some(RunMetrics::from(&vanilla));
        summary.compare = Some(table);
    } else if spec.paired {
        log::warn!(
            "{}: paired run requested with SIBO disabled; skipping comparison",
            spec.run_id
        );
    }
    write(&dir.join("summary.json"), &to_json(&summary)?)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub lambda: f64,
    pub final_accuracy: f64,
    pub last_layer_similarity: f64,
}

/// One run per λ (SIBO on, shared seeds) under `<run dir>/lambda-<λ>/`,
/// plus `sweep_lambda.csv`.
pub fn sweep_lambda(spec: &ExperimentSpec, lambdas: &[f64], opts: &RunOptions) -> Result<Vec<SweepRow>> {
    spec.validate()?;
    if lambdas.is_empty() {
        return Err(LabError::config("no lambdas to sweep"));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(0.0..1.0).contains(*l)) {
        return Err(LabError::config(format!("sweep lambda {bad} must lie in [0, 1)")));
    }
    let dir = spec.run_dir(opts.output_root.as_deref());
    prepare_dir(&dir, opts.force)?;
    let mut rows = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        let mut member = spec.clone();
        member.output_dir = dir.clone();
        member.run_id = format!("lambda-{lambda}");
        member.paired = false;
        member.peft.sibo = true;
        member.peft.lambda = lambda;
        let s = run(&member, &member_opts(opts))?;
        if let Some(m) = s.metrics {
            rows.push(SweepRow {
                lambda,
                final_accuracy: m.final_accuracy,
                last_layer_similarity: m.last_layer_similarity,
            });
        }
    }
    if !opts.dry_run {
        let mut csv = String::from("lambda,final_accuracy,last_layer_similarity\n");
        for r in &rows {
            let _ = writeln!(csv, "{},{},{}", r.lambda, r.final_accuracy, r.last_layer_similarity);
        }
        write(&dir.join("sweep_lambda.csv"), &csv)?;
    }
    Ok(rows)
}

fn member_opts(opts: &RunOptions) -> RunOptions {
    RunOptions {
        output_root: None,
        dry_run: opts.dry_run,
        force: false,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementRow {
    pub variant: PlacementVariant,
    pub seed: u64,
    pub final_accuracy: f64,
    pub last_layer_similarity: f64,
    /// Highest accuracy among the variants for this seed (first wins ties).
    pub winner: bool,
}

/// Matched-seed runs of every placement variant, plus `ablate_placement.csv`.
pub fn ablate_placement(spec: &ExperimentSpec, opts: &RunOptions) -> Result<Vec<PlacementRow>> {
    spec.validate()?;
    let variants = spec
        .sweeps
        .placements
        .clone()
        .unwrap_or_else(|| PlacementVariant::defaults(spec.peft.kind));
    let seeds = spec.sweeps.seeds.clone().unwrap_or_else(|| vec![spec.model.seed]);
    let dir = spec.run_dir(opts.output_root.as_deref());
    prepare_dir(&dir, opts.force)?;
    let mut rows = Vec::new();
    for &seed in &seeds {
        let start = rows.len();
        for &variant in &variants {
            let mut member = spec.reseeded(seed);
            member.output_dir = dir.clone();
            member.run_id = format!("{}-seed{seed}", variant.name());
            member.paired = false;
            member.peft.sibo = true;
            member.peft.sibo_sites = variant.sibo_sites().into_iter().collect();
            if variant.kind() == PeftKind::Adapter {
                member.peft.placement.extend(variant_adapter_sites(variant));
            }
            let s = run(&member, &member_opts(opts))?;
            if let Some(m) = s.metrics {
                rows.push(PlacementRow {
                    variant,
                    seed,
                    final_accuracy: m.final_accuracy,
                    last_layer_similarity: m.last_layer_similarity,
                    winner: false,
                });
            }
        }
        let group = &mut rows[start..];
        if let Some(best) = (0..group.len()).reduce(|b, i| {
            if group[i].final_accuracy > group[b].final_accuracy {
                i
            } else {
                b
            }
        }) {
            group[best].winner = true;
        }
    }
    if !opts.dry_run {
        let mut csv = String::from("variant,seed,final_accuracy,last_layer_similarity,winner\n");
        for r in &rows {
            let _ = writeln!(
                csv,
                "{},{},{},{},{}",
                r.variant.name(),
                r.seed,
                r.final_accuracy,
                r.last_layer_similarity,
                r.winner
            );
        }
        write(&dir.join("ablate_placement.csv"), &csv)?;
    }
    Ok(rows)
}

/// An adapter must exist wherever its variant injects.
fn variant_adapter_sites(v: PlacementVariant) -> Vec<Site> {
    match v {
        PlacementVariant::Att => vec![Site::Att],
        PlacementVariant::Ffn => vec![Site::Ffn],
        PlacementVariant::Both => vec![Site::Att, Site::Ffn],
        _ => Vec::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub method: String,
    pub iterations: usize,
    pub vanilla_median_ns: u64,
    pub sibo_median_ns: u64,
    /// `sibo / vanilla`
    pub ratio: f64,
}

/// Untimed passes before measuring.
const BENCH_WARMUP: usize = 10;

/// Median forward+backward time of vanilla vs SIBO on one training sentence.
/// The two variants alternate, and which goes first swaps every iteration.
pub fn bench(spec: &ExperimentSpec, iterations: usize) -> Result<BenchReport> {
    spec.validate()?;
    if iterations == 0 {
        return Err(LabError::config("bench needs at least one iteration"));
    }
    let mut sibo_spec = spec.clone();
    sibo_spec.peft.sibo = true;
    let mut vanilla_model = TransformerModel::build(&spec.model)?;
    let vanilla_peft = attach(&mut vanilla_model, &spec.vanilla().peft)?;
    let mut sibo_model = TransformerModel::build(&spec.model)?;
    let sibo_peft = attach(&mut sibo_model, &sibo_spec.peft)?;
    let example = spec.task.generate(1)?.remove(0);

    let pass = |model: &TransformerModel, peft: &AttachedPeft, ex: &Example| -> Result<u64> {
        let start = Instant::now();
        let mut tape = Tape::new();
        let rec = model.record(&mut tape, &ex.tokens, Some(peft))?;
        let loss = tape.cross_entropy(rec.logits, &ex.labels)?;
        let grads = tape.backward(loss)?;
        std::hint::black_box(&grads);
        Ok(start.elapsed().as_nanos() as u64)
    };
    for _ in 0..BENCH_WARMUP {
        pass(&vanilla_model, &vanilla_peft, &example)?;
        pass(&sibo_model, &sibo_peft, &example)?;
    }
    let mut vanilla = Vec::with_capacity(iterations);
    let mut sibo = Vec::with_capacity(iterations);
    for i in 0..iterations {
        if i % 2 == 0 {
            vanilla.push(pass(&vanilla_model, &vanilla_peft, &example)?);
            sibo.push(pass(&sibo_model, &sibo_peft, &example)?);
        } else {
            sibo.push(pass(&sibo_model, &sibo_peft, &example)?);
            vanilla.push(pass(&vanilla_model, &vanilla_peft, &example)?);
        }
    }
    let (v, s) = (median(&mut vanilla), median(&mut sibo));
    Ok(BenchReport {
        method: sibo_spec.peft.label(),
        iterations,
        vanilla_median_ns: v,
        sibo_median_ns: s,
        ratio: s as f64 / v.max(1) as f64,
    })
}

fn median(xs: &mut [u64]) -> u64 {
    xs.sort_unstable();
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2
    }
}

/// `{stage, message, context}` for a failed command.
pub fn error_json(err: &LabError, context: &BTreeMap<String, String>) -> String {
    serde_json::json!({
        "stage": err.stage(),
        "message": err.to_string(),
        "context": context,
    })
    .to_string()
}
