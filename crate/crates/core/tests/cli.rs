use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const TINY: &str = r#"
run_id = "tiny"
output_dir = "runs"
paired = true

[model]
d_model = 16
n_layers = 2
n_heads = 2
d_ff = 32
vocab_size = 16
max_seq_len = 6
n_classes = 4
seed = 3

[peft]
kind = "lora"
r = 4
sibo = true
lambda = 0.6

[train]
learning_rate = 5e-3
batch_size = 8
micro_batch = 4
epochs = 1
seed = 3

[task]
kind = "token_tagging"
vocab_size = 16
seq_len = 6
n_classes = 4
n_train = 32
n_test = 8
seed = 5

[sweeps]
lambdas = [0.1, 0.2]
seeds = [1, 2]
"#;

struct Sandbox {
    dir: TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("tiny.toml"), TINY).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config(&self) -> String {
        self.path("tiny.toml").display().to_string()
    }

    /// Runs the binary inside the sandbox with the output-root variable cleared.
    fn peftlab(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_peftlab"))
            .args(args)
            .env_remove("PEFTLAB_OUTPUT_ROOT")
            .env("RUST_LOG", "warn")
            .current_dir(self.dir.path())
            .output()
            .unwrap()
    }
}

fn ok_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "exit {:?}: {}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn err_json(out: &Output) -> Value {
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let line = stderr
        .lines()
        .rev()
        .find(|l| l.starts_with('{'))
        .expect("error JSON on stderr");
    let v: Value = serde_json::from_str(line).unwrap();
    assert!(v["stage"].is_string());
    assert!(v["message"].is_string());
    assert!(v["context"].is_object());
    v
}

fn files(dir: &Path) -> BTreeSet<String> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect()
}

#[test]
fn dry_run_writes_config_and_budget_only() {
    let sb = Sandbox::new();
    let root = sb.path("out").display().to_string();
    let v = ok_json(&sb.peftlab(&["run", "-c", &sb.config(), "--output-root", &root, "--dry-run"]));
    assert!(v["metrics"].is_null());
    assert_eq!(v["budget"]["trainable_params"], 2 * (3 * (16 + 16) * 4 + (16 + 32) * 4));
    let dir = sb.path("out/runs/tiny");
    assert_eq!(
        files(&dir),
        BTreeSet::from(["budget.json".into(), "config.toml".into()])
    );
}

#[test]
fn rerun_from_snapshot_is_byte_identical() {
    let sb = Sandbox::new();
    let first = sb.path("a").display().to_string();
    let v = ok_json(&sb.peftlab(&["run", "-c", &sb.config(), "--output-root", &first]));
    assert!(v["compare"].is_object(), "paired SIBO run emits the comparison");

    let a = sb.path("a/runs/tiny");
    let snapshot = a.join("config.toml").display().to_string();
    let second = sb.path("b").display().to_string();
    ok_json(&sb.peftlab(&["run", "-c", &snapshot, "--output-root", &second]));
    let b = sb.path("b/runs/tiny");

    let names = files(&a);
    assert_eq!(names, files(&b));
    for want in [
        "config.toml",
        "budget.json",
        "metrics.csv",
        "similarity.csv",
        "vanilla.metrics.csv",
        "vanilla.similarity.csv",
        "compare.csv",
        "summary.json",
        "tiny.profile.svg",
        "tiny.heatmap.csv",
        "tiny.heatmap.svg",
    ] {
        assert!(names.contains(want), "missing {want}");
    }
    for name in &names {
        assert_eq!(
            fs::read(a.join(name)).unwrap(),
            fs::read(b.join(name)).unwrap(),
            "{name} differs"
        );
    }
}

#[test]
fn existing_run_dir_needs_force() {
    let sb = Sandbox::new();
    let root = sb.path("out").display().to_string();
    let args = ["run", "-c", &sb.config(), "--output-root", &root, "--dry-run"];
    ok_json(&sb.peftlab(&args));
    let e = err_json(&sb.peftlab(&args));
    assert_eq!(e["stage"], "config");
    assert_eq!(e["context"]["command"], "run");
    let mut forced = args.to_vec();
    forced.push("--force");
    ok_json(&sb.peftlab(&forced));
}

#[test]
fn bad_configs_fail_with_error_json() {
    let sb = Sandbox::new();
    let e = err_json(&sb.peftlab(&["run", "-c", &sb.config(), "--set", "peft.lambda=1.5", "--dry-run"]));
    assert_eq!(e["stage"], "config");
    assert!(e["message"].as_str().unwrap().contains("lambda"));
    assert_eq!(e["context"]["overrides"], "peft.lambda=1.5");

    fs::write(sb.path("typo.toml"), TINY.replace("d_model = 16", "d_modle = 16")).unwrap();
    let typo = sb.path("typo.toml").display().to_string();
    err_json(&sb.peftlab(&["budget", "-c", &typo]));

    let missing = sb.path("nope.toml").display().to_string();
    assert_eq!(err_json(&sb.peftlab(&["budget", "-c", &missing]))["stage"], "io");
}

#[test]
fn output_root_comes_from_the_environment() {
    let sb = Sandbox::new();
    let out = Command::new(env!("CARGO_BIN_EXE_peftlab"))
        .args(["run", "-c", &sb.config(), "--dry-run"])
        .env("PEFTLAB_OUTPUT_ROOT", sb.path("env-root"))
        .env("RUST_LOG", "warn")
        .current_dir(sb.dir.path())
        .output()
        .unwrap();
    ok_json(&out);
    assert!(sb.path("env-root/runs/tiny/budget.json").exists());
    assert!(!sb.path("runs").exists());
}

#[test]
fn lambda_zero_sweep_reproduces_vanilla_run() {
    let sb = Sandbox::new();
    let root = sb.path("out").display().to_string();
    let rows = ok_json(&sb.peftlab(&[
        "sweep-lambda",
        "-c",
        &sb.config(),
        "--output-root",
        &root,
        "--lambdas",
        "0",
    ]));
    assert_eq!(rows.as_array().unwrap().len(), 1);

    let vanilla_root = sb.path("vanilla").display().to_string();
    ok_json(&sb.peftlab(&[
        "run",
        "-c",
        &sb.config(),
        "--output-root",
        &vanilla_root,
        "--set",
        "peft.sibo=false",
        "--set",
        "paired=false",
    ]));
    let swept = sb.path("out/runs/tiny/lambda-0");
    let vanilla = sb.path("vanilla/runs/tiny");
    for name in ["metrics.csv", "similarity.csv"] {
        assert_eq!(
            fs::read(swept.join(name)).unwrap(),
            fs::read(vanilla.join(name)).unwrap(),
            "{name}"
        );
    }
    let table = fs::read_to_string(sb.path("out/runs/tiny/sweep_lambda.csv")).unwrap();
    assert_eq!(table.lines().count(), 2);
}

#[test]
fn adapter_sweep_emits_one_row_per_lambda() {
    let sb = Sandbox::new();
    let root = sb.path("out").display().to_string();
    let rows = ok_json(&sb.peftlab(&[
        "sweep-lambda",
        "-c",
        &sb.config(),
        "--output-root",
        &root,
        "--set",
        "peft.kind=\"adapter\"",
        "--set",
        "peft.lambda=0.2",
        "--lambdas",
        "0.1,0.2,0.3,0.4,0.5,0.6,0.7",
    ]));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 7);
    for (row, want) in rows.iter().zip([0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7]) {
        assert_eq!(row["lambda"].as_f64().unwrap(), want);
    }
    let table = fs::read_to_string(sb.path("out/runs/tiny/sweep_lambda.csv")).unwrap();
    assert_eq!(table.lines().count(), 8);
}

#[test]
fn placement_ablation_covers_each_variant_per_seed() {
    let sb = Sandbox::new();
    let root = sb.path("adapter").display().to_string();
    let rows = ok_json(&sb.peftlab(&[
        "ablate-placement",
        "-c",
        &sb.config(),
        "--output-root",
        &root,
        "--set",
        "peft.kind=\"adapter\"",
        "--seeds",
        "4",
    ]));
    let rows = rows.as_array().unwrap();
    let variants: Vec<&str> = rows.iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(variants, ["att", "ffn", "both"]);
    assert_eq!(rows.iter().filter(|r| r["winner"] == true).count(), 1);

    let root = sb.path("lora").display().to_string();
    let rows = ok_json(&sb.peftlab(&["ablate-placement", "-c", &sb.config(), "--output-root", &root]));
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 2 * 2);
    for seed in rows.chunks(2) {
        assert_eq!(seed[0]["seed"], seed[1]["seed"]);
        assert_ne!(
            seed[0]["last_layer_similarity"], seed[1]["last_layer_similarity"],
            "frozen-path variant must differ from low-rank only"
        );
        assert_eq!(seed.iter().filter(|r| r["winner"] == true).count(), 1);
    }
    let table = fs::read_to_string(sb.path("lora/runs/tiny/ablate_placement.csv")).unwrap();
    assert_eq!(table.lines().count(), 5);
}

#[test]
fn budget_and_bench_print_json() {
    let sb = Sandbox::new();
    let configs = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let adapter = configs.join("bert-large-adapter.toml").display().to_string();
    let v = ok_json(&sb.peftlab(&["budget", "-c", &adapter]));
    assert_eq!(v["trainable_params"], 6_291_456);
    assert_eq!(v["total_flops"], 6_389_760);
    let v = ok_json(&sb.peftlab(&["budget", "-c", &adapter, "--set", "peft.sibo=false"]));
    assert_eq!(v["total_flops"], 6_291_456);
    assert_eq!(v["sibo_overhead_flops"], 0);

    let v = ok_json(&sb.peftlab(&["bench", "-c", &sb.config(), "--iters", "3"]));
    assert_eq!(v["iterations"], 3);
    assert!(v["ratio"].as_f64().unwrap() > 0.0);
}
