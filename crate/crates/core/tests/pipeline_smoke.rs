//! End-to-end run of the pipeline on a tiny synthetic corpus.

use fm_defense::attacks::AttackKind;
use fm_defense::datasets::{save_corpus, synthetic_corpus, SplitSizes};
use fm_defense::detector::MorphSearchConfig;
use fm_defense::pipeline::{parse_metrics, render_metrics, run_experiment, ClassifierData, ExperimentConfig, Run};
use fm_defense::FmError;

pub fn tiny_config() -> ExperimentConfig {
    let mut c = ExperimentConfig {
        output_dir: "run".into(),
        splits: SplitSizes { train: 300, cle: 40, val: 200 },
        classifier_data: ClassifierData::TrainSplit,
        attacks: vec![AttackKind::Fgsm, AttackKind::Cw],
        ..Default::default()
    };
    c.classifier.epochs = 3;
    c.vae.latent_dim = 3;
    c.vae.stage1_epochs = 2;
    c.vae.stage2_epochs = 1;
    c.vae.disc_hidden = 16;
    c.attack.cw_iterations = 30;
    c.attack.cw_binary_steps = 2;
    c.attack.cw_initial_const = 1.0;
    c.detector.morph = MorphSearchConfig { n_morphs: 10, batch: 16, ..Default::default() };
    c.detector.sweep = "10:100:10".into();
    c.purifier.eta_grid = vec![10.0, 50.0, 100.0];
    c
}

#[test]
fn tiny_run_completes_resumes_and_refuses_foreign_configs() {
    let root = tempfile::tempdir().unwrap();
    save_corpus(&synthetic_corpus(60, 20, 5), &root.path().join("data")).unwrap();
    let cfg = tiny_config();

    let report = run_experiment(cfg.clone(), root.path()).unwrap();
    report.check().unwrap();
    assert_eq!(report.clean_instances, 40);
    assert_eq!(report.attacks.len(), 2);
    for a in &report.attacks {
        assert_eq!(a.sweep.len(), 10);
        assert_eq!(a.purification.len(), 4);
        assert!(a.purification.last().unwrap().outcome.theta_d.is_none());
        assert_eq!(a.purification.last().unwrap().outcome.adv.rejected, 0);
    }
    let dir = root.path().join("run");
    for f in ["metrics.json", "table.md", "sweep-cw.svg", "purification-fgsm.svg", "resistance-val.jsonl.gz"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }

    // The metrics file round-trips byte for byte.
    let text = std::fs::read_to_string(dir.join("metrics.json")).unwrap();
    assert_eq!(render_metrics(&parse_metrics(&text).unwrap()), text);

    // A rerun loads every artifact and reproduces the metrics exactly.
    let again = run_experiment(cfg.clone(), root.path()).unwrap();
    assert_eq!(again, report);
    assert_eq!(std::fs::read_to_string(dir.join("metrics.json")).unwrap(), text);

    // Another config may not reuse the directory.
    let mut other = cfg;
    other.detector.rho = 0.99;
    assert!(matches!(Run::open(other, root.path()), Err(FmError::State(_))));
}
