use std::path::PathBuf;

use peftlab::experiment::{load_spec, ExperimentSpec};
use peftlab::model::TransformerModel;
use peftlab::peft::{attach, PeftConfig};
use peftlab::train::{train, SyntheticTask, TrainConfig, TrainedRun};
use peftlab::LabError;

fn config(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../configs")
        .join(name)
}

fn toy(name: &str) -> ExperimentSpec {
    load_spec(&config(name), &[]).unwrap()
}

fn small_task() -> SyntheticTask {
    let mut task = SyntheticTask::tagging(16, 6, 5);
    task.n_train = 48;
    task.n_test = 16;
    task
}

fn small_run(peft_cfg: &PeftConfig, lr: f64) -> (peftlab::Result<TrainedRun>, Vec<Vec<f64>>) {
    let mut model_cfg = peftlab::model::ModelConfig::new(16, 2, 2, 9);
    model_cfg.vocab_size = 16;
    model_cfg.max_seq_len = 6;
    let mut model = TransformerModel::build(&model_cfg).unwrap();
    let mut peft = attach(&mut model, peft_cfg).unwrap();
    let mut cfg = TrainConfig::new(lr, 8, 2, 4);
    cfg.micro_batch = 4;
    let run = train(&mut model, &mut peft, &small_task(), &cfg);
    let params = peft
        .named_params()
        .into_iter()
        .map(|(_, m)| m.data().to_vec())
        .chain(std::iter::once(model.head.data().to_vec()))
        .collect();
    (run, params)
}

fn bits(run: &TrainedRun) -> Vec<(u64, u64)> {
    run.loss_curve
        .iter()
        .map(|s| (s.loss.to_bits(), s.lr.to_bits()))
        .collect()
}

#[test]
fn lambda_zero_training_matches_vanilla_to_the_bit() {
    for vanilla in [PeftConfig::adapter(4), PeftConfig::lora(4)] {
        let (a, pa) = small_run(&vanilla, 5e-3);
        let (b, pb) = small_run(&vanilla.clone().with_sibo(0.0), 5e-3);
        let (a, b) = (a.unwrap(), b.unwrap());
        assert_eq!(bits(&a), bits(&b), "{}", vanilla.label());
        assert_eq!(a.epoch_accuracy, b.epoch_accuracy);
        assert_eq!(pa, pb);
        // λ > 0 takes a different path.
        let (c, _) = small_run(&vanilla.clone().with_sibo(0.5), 5e-3);
        assert_ne!(bits(&a), bits(&c.unwrap()));
    }
}

#[test]
fn run_logs_every_step_and_epoch() {
    let (run, _) = small_run(&PeftConfig::lora(4).with_sibo(0.6), 5e-3);
    let run = run.unwrap();
    assert_eq!(run.total_steps, 2 * 48 / 8);
    assert_eq!(run.loss_curve.len(), run.total_steps);
    assert_eq!(run.epoch_accuracy.len(), 2);
    assert!(run.loss_curve.iter().enumerate().all(|(i, s)| s.step == i + 1));
    assert_eq!(run.loss_curve.last().unwrap().lr, 0.0);
    assert_eq!(run.base_checksum_before, run.base_checksum_after);
    let csv = run.metrics_csv();
    assert_eq!(csv.lines().count(), 1 + run.total_steps);
}

#[test]
fn exploding_learning_rate_aborts_with_the_step() {
    let (run, _) = small_run(&PeftConfig::adapter(4), 1e300);
    match run {
        Err(LabError::Divergence { step, detail }) => {
            assert!(step >= 1);
            assert!(!detail.is_empty());
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn toy_configs_train_above_majority_baseline() {
    for name in ["toy-lora.toml", "toy-adapter.toml"] {
        let spec = toy(name);
        assert_eq!((spec.model.d_model, spec.model.n_layers, spec.train.epochs), (64, 8, 3));
        let mut model = TransformerModel::build(&spec.model).unwrap();
        let mut peft = attach(&mut model, &spec.peft).unwrap();
        let run = train(&mut model, &mut peft, &spec.task, &spec.train).unwrap();
        let (_, test) = spec.task.splits().unwrap();
        let baseline = SyntheticTask::majority_baseline(&test);
        assert!(
            run.final_accuracy > baseline,
            "{name}: accuracy {} vs baseline {baseline}",
            run.final_accuracy
        );
    }
}
