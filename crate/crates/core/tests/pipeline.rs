use hppt::harness::{self, Experiment, ExperimentConfig, Strategy};
use hppt::HpptError;

fn small(seed: u64) -> ExperimentConfig {
    let overrides: Vec<String> = [
        "stream.train_samples=8",
        "stream.test_samples=4",
        "stream.height=16",
        "stream.width=16",
        "train.steps=20",
        "train.eval_samples=4",
        "refine.steps=3",
        "refine.samples=4",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let mut cfg = ExperimentConfig::load(None, &overrides).unwrap();
    cfg.seed = seed;
    cfg
}

#[test]
fn every_strategy_runs_and_hppt_passes_its_audits() {
    let mut exp = Experiment::new(small(3)).unwrap();
    let hppt = exp.run(Strategy::Hppt).unwrap();
    assert!(hppt.report.audits_passed);
    assert!(hppt.report.audits.iter().any(|a| a.episode == 2));
    let last = hppt.report.episodes.last().unwrap();
    assert_eq!(last.refinements.len(), last.taxonomy["new"].len());
    for r in &last.refinements {
        assert!(r.final_loss <= r.initial_loss);
    }
    assert!(last.old_leaf_displacement.is_some());
    assert!(hppt.report.bwt.is_some() && hppt.report.fwt.is_some());
    let tree = hppt.tree.as_ref().unwrap();
    tree.validate().unwrap();
    assert_eq!(tree.classes().count(), 9);

    for s in [Strategy::SeqFinetune, Strategy::Independent, Strategy::Joint] {
        let out = exp.run(s).unwrap();
        assert_eq!(out.report.strategy, s);
        for v in out.report.episodes.last().unwrap().per_class_iou.values() {
            assert!((0.0..=1.0).contains(v));
        }
    }
}

#[test]
fn old_leaves_move_less_when_gamma_is_small_without_theta_steps() {
    let mut cfg = small(1);
    cfg.refine.steps = 0;
    let mut exp = Experiment::new(cfg).unwrap();
    let rows = exp.sweep_gamma(&[0.01, 0.5]).unwrap();
    assert!(rows[0].old_leaf_displacement.unwrap() < rows[1].old_leaf_displacement.unwrap());
}

#[test]
fn written_outputs_are_a_function_of_config_and_seed() {
    let files = ["manifest.json", "report.json", "iou.csv", "trace.jsonl"];
    let dirs: Vec<_> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let mut exp = Experiment::new(small(5)).unwrap();
            let out = exp.run(Strategy::Hppt).unwrap();
            harness::write_outputs(dir.path(), &exp, &out).unwrap();
            dir
        })
        .collect();
    for f in files {
        let a = std::fs::read(dirs[0].path().join(f)).unwrap();
        let b = std::fs::read(dirs[1].path().join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
}

#[test]
fn comparison_flags_best_values_and_rejects_other_layouts() {
    let mut exp = Experiment::new(small(2)).unwrap();
    let a = exp.run(Strategy::Hppt).unwrap().report;
    let b = exp.run(Strategy::SeqFinetune).unwrap().report;
    let table = harness::compare(&[a.clone(), b.clone()]).unwrap();
    assert_eq!(table.rows.len(), 2);
    assert!(table.columns.contains(&"bwt".to_string()));
    let best_bwt = if a.bwt.unwrap() >= b.bwt.unwrap() { "hppt@2" } else { "seq_finetune@2" };
    assert_eq!(table.best["bwt"], best_bwt);
    assert!(matches!(harness::compare(&[a.clone()]), Err(HpptError::Incompatible(_))));

    let mut other = small(2);
    other.stream.layout = hppt::stream::Layout::Rolling;
    other.stream.episodes = 2;
    other.stream.classes_per_episode = 3;
    other.stream.carry = 1;
    let c = Experiment::new(other).unwrap().run(Strategy::Hppt).unwrap().report;
    assert!(matches!(harness::compare(&[a, c]), Err(HpptError::Incompatible(_))));
}
