use cemb::confidence::{mc_propagation_oracle, PropagationMode};
use cemb::data::{kfold_split, synth_generate, SynthConfig};
use cemb::eval::{metrics, rejection_curve, RejectionMode, DEFAULT_REJECTION_RATIOS};
use cemb::train::{load_model, save_model, train_all, TrainConfig};

fn small_setup() -> (cemb::data::Dataset, TrainConfig) {
    let synth = SynthConfig {
        class_counts: vec![120, 40, 20],
        ..SynthConfig::benchmark(5)
    };
    let mut cfg = TrainConfig { seed: 5, ..TrainConfig::default() };
    cfg.stage1.epochs = 20;
    cfg.stage2.epochs = 10;
    cfg.stage3.epochs = 10;
    (synth_generate(&synth).unwrap(), cfg)
}

#[test]
fn reloaded_model_predicts_identically() {
    let (data, cfg) = small_setup();
    let model = train_all(&data, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_model(&model, dir.path()).unwrap();
    let back = load_model(dir.path(), &cfg, 3).unwrap();
    for i in 0..data.len() {
        let x = data.sample(i);
        assert_eq!(model.predict(x).unwrap(), back.predict(x).unwrap());
        assert_eq!(model.predict_baseline(x).unwrap(), back.predict_baseline(x).unwrap());
    }
}

#[test]
fn trained_head_moments_agree_with_sampling() {
    let (data, cfg) = small_setup();
    let model = train_all(&data, &cfg).unwrap();
    for i in [0, 17, 101] {
        let pooled = model.pooled(data.sample(i)).unwrap();
        let closed = cemb::confidence::propagate_network(&pooled, model.classifier.layers(), PropagationMode::Strict)
            .unwrap();
        let mc = mc_propagation_oracle(&pooled, model.classifier.layers(), 200_000, i as u64).unwrap();
        for c in 0..3 {
            assert!((closed.score_mean[c] - mc.mean[c]).abs() < 4.0 * mc.mean_se[c]);
            assert!((closed.score_var[c] - mc.var[c]).abs() < 4.0 * mc.var_se[c]);
        }
    }
}

#[test]
fn held_out_evaluation_runs_end_to_end() {
    let (data, cfg) = small_setup();
    let folds = kfold_split(data.labels(), 5, 5).unwrap();
    let train = data.subset(&folds[0].train).unwrap();
    let model = train_all(&train, &cfg).unwrap();
    let records: Vec<_> = folds[0]
        .test
        .iter()
        .map(|&i| model.predict(data.sample(i)).unwrap().with_sample(i, Some(data.labels()[i])))
        .collect();
    let m = metrics(&records).unwrap();
    assert!(m.balanced_accuracy > 1.0 / 3.0, "{m:?}");
    let curve = rejection_curve(&records, &DEFAULT_REJECTION_RATIOS, RejectionMode::Global).unwrap();
    assert_eq!(curve.rows[0].accuracy, m.accuracy);
    assert_eq!(curve.rows[0].retained, records.len());
    assert!(curve.rows.windows(2).all(|w| w[1].retained < w[0].retained));
}
