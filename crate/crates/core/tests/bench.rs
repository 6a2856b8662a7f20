use bayesbench::bench::{
    corrupt, make_gap_regression, make_grouped_classification, make_two_moons, ShiftSpec, TaskSpec,
};
use bayesbench::metrics::{evaluate, task_accuracy, MetricConfig, TaskMetric};
use bayesbench::model::{init_params, predict, Predictive, Targets};
use bayesbench::posterior::{train_map, TrainConfig};

fn map_cfg(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn two_moons_is_learnable_by_a_small_mlp() {
    let spec = TaskSpec::TwoMoons {
        n: 500,
        label_noise: 0.0,
    };
    let task = spec.generate(0).unwrap();
    let model = spec.default_model();
    assert_eq!(model.layer_widths[1], 16);
    let params = train_map(&model, &task.train, &map_cfg(0, 200)).unwrap();
    let preds = predict(&model, &params, &task.test_id, None).unwrap();
    let acc = task_accuracy(&preds, TaskMetric::Accuracy, None).unwrap();
    assert!(acc >= 0.98, "test-id accuracy {acc}");
}

#[test]
fn corruption_degrades_a_fixed_map_model() {
    let shift = ShiftSpec::default();
    let spec = TaskSpec::TwoMoons {
        n: 500,
        label_noise: 0.0,
    };
    let model = spec.default_model();
    let mut monotone = 0;
    for seed in 0..5 {
        let task = spec.generate(seed).unwrap();
        let params = train_map(&model, &task.train, &map_cfg(seed, 100)).unwrap();
        let accs: Vec<f64> = shift
            .corruption_levels
            .iter()
            .map(|&l| {
                let data = corrupt(&task, l, &shift).unwrap();
                let preds = predict(&model, &params, &data, None).unwrap();
                task_accuracy(&preds, TaskMetric::Accuracy, None).unwrap()
            })
            .collect();
        if accs.windows(2).all(|w| w[1] <= w[0]) {
            monotone += 1;
        }
    }
    assert!(monotone >= 4, "monotone on {monotone}/5 seeds");
}

#[test]
fn full_turn_rotation_is_the_identity() {
    let task = make_two_moons(100, 0.0, 3).unwrap();
    let shift = ShiftSpec {
        corruption_levels: vec![0, 1, 2],
        rotation_per_level: 360.0,
        noise_std_per_level: 0.0,
    };
    assert_eq!(corrupt(&task, 0, &shift).unwrap(), task.test_id);
    for level in [1, 2] {
        let d = corrupt(&task, level, &shift).unwrap();
        for (a, b) in d
            .inputs
            .as_slice()
            .iter()
            .zip(task.test_id.inputs.as_slice())
        {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

fn mse(preds: &bayesbench::model::PredictionSet) -> f64 {
    match (&preds.predictive, &preds.targets) {
        (Predictive::Regression { means, .. }, Targets::Values(y)) => {
            means
                .iter()
                .zip(y)
                .map(|(m, t)| (m - t).powi(2))
                .sum::<f64>()
                / y.len() as f64
        }
        _ => unreachable!(),
    }
}

#[test]
fn map_fit_is_worse_inside_the_gap() {
    let spec = TaskSpec::GapRegression { n: 300 };
    let model = spec.default_model();
    let mut worse = 0;
    for seed in 0..5 {
        let task = make_gap_regression(300, seed).unwrap();
        let params = train_map(&model, &task.train, &map_cfg(seed, 200)).unwrap();
        let id = mse(&predict(&model, &params, &task.test_id, None).unwrap());
        let gap = mse(&predict(&model, &params, &task.test_ood["gap"], None).unwrap());
        if id < gap {
            worse += 1;
        }
    }
    assert!(worse >= 4, "gap harder on {worse}/5 seeds");
}

#[test]
fn worst_group_never_exceeds_overall_accuracy() {
    let task = make_grouped_classification(400, 4, 0.05, 1).unwrap();
    let spec = TaskSpec::GroupedClassification {
        n: 400,
        groups: 4,
        imbalance: 0.05,
    }
    .default_model();
    for seed in 0..3 {
        let preds = predict(&spec, &init_params(&spec, seed), &task.test_id, None).unwrap();
        let rep = evaluate(&preds, &MetricConfig::default(), None).unwrap();
        let worst = rep.get("worst_group_accuracy").unwrap();
        assert!(worst <= rep.get("accuracy").unwrap());
        assert!(rep.get("quantile_accuracy").unwrap() >= worst);
    }
}
