use hfedckd::checkpoint::{load_model, manifest_path};
use hfedckd::config::{DatasetChoice, ExperimentConfig};
use hfedckd::generator::{balanced_labels, GeneratorNet, GeneratorShape};
use hfedckd::metrics::{write_metrics, write_timing, COLUMNS};
use hfedckd::models::{Capacity, Family, ModelDims, ModelSpec, SplitModel};
use hfedckd::protocol::{evaluate, run_rounds, save_server, train_cross_entropy, Experiment};
use hfedckd::data::{synthetic_mixture, Split};

fn dims() -> ModelDims {
    ModelDims {
        input_extent: 3,
        feature_extent: 8,
        class_count: 3,
    }
}

fn trained_teacher(family: Family, seed: u64) -> SplitModel {
    let data = synthetic_mixture(3, 3, 300, seed, Split::Train);
    let mut m = SplitModel::build(ModelSpec::new(family, Capacity::Full, dims()), seed);
    train_cross_entropy(&mut m, data.features(), data.labels(), 5, 16, 0.05, seed).unwrap();
    m
}

#[test]
fn generator_learns_to_satisfy_fixed_teachers() {
    let teachers = [trained_teacher(Family::Shallow, 1), trained_teacher(Family::Deep, 2)];
    let refs: Vec<&SplitModel> = teachers.iter().collect();
    let w = [0.5, 0.5];
    let mut g = GeneratorNet::build(GeneratorShape::new(3, 3), 3);
    let labels = balanced_labels(60, 3);
    let noise = g.noise(60, 99);
    let (_, before, _) = g.objective(&refs, &w, &noise, &labels).unwrap();
    for step in 0..200 {
        g.train_step(&refs, &w, 32, 0.01, step).unwrap();
    }
    let (_, after, _) = g.objective(&refs, &w, &noise, &labels).unwrap();
    assert!(after <= 0.8 * before, "cross-entropy {before} -> {after}");
}

fn tiny(dir: &std::path::Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::defaults(DatasetChoice::Synthetic, 8, 3);
    cfg.participants = 4;
    cfg.rounds = 15;
    cfg.synthetic_train = 400;
    cfg.synthetic_test = 150;
    cfg.lr = 0.05;
    cfg.server_lr = Some(0.002);
    cfg.generator_lr = 0.01;
    cfg.kd_weight = 5.0;
    cfg.contrastive_coefficient = 0.1;
    cfg.output_dir = dir.to_path_buf();
    cfg
}

#[test]
fn short_federation_learns_and_persists() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let mut exp = Experiment::new(cfg.clone()).unwrap();
    let start = evaluate(&exp.server.global, &exp.test).unwrap();
    let mut seen = 0;
    let run = run_rounds(&mut exp, &mut |_| seen += 1).unwrap();
    assert_eq!(seen, 15);
    assert_eq!(run.summary.rounds, 15);
    assert!(run.summary.client_acc_mean > 0.5, "{:?}", run.summary);
    assert!(run.summary.global_acc > start, "{start} -> {}", run.summary.global_acc);
    assert!((run.summary.mean_participation - 0.5).abs() < 1e-12);

    let metrics = dir.path().join("metrics.csv");
    write_metrics(&run.records, &cfg, &metrics).unwrap();
    write_timing(&run.records, &dir.path().join("timing.csv")).unwrap();
    let text = std::fs::read_to_string(&metrics).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), COLUMNS.join(","));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 15);
    assert!(rows.iter().all(|r| r.split(',').count() == COLUMNS.len()));
    let manifest = std::fs::read_to_string(manifest_path(&metrics)).unwrap();
    assert_eq!(ExperimentConfig::parse(&manifest).unwrap(), cfg);

    save_server(&exp, dir.path()).unwrap();
    let (global, _) = load_model(&dir.path().join("global.ckpt")).unwrap();
    assert_eq!(global, exp.server.global);
    let (generator, _) = GeneratorNet::load(&dir.path().join("generator.ckpt")).unwrap();
    assert_eq!(generator.flat_parameters(), exp.server.generator.flat_parameters());
}
