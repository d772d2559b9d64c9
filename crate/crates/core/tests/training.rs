use cpoly::data::{generate_benchmark, Benchmark, BenchmarkConfig};
use cpoly::experiment::ExperimentConfig;
use cpoly::model::TransformerModel;
use cpoly::routing::RoutingVariant;
use cpoly::tensor::Tensor;
use cpoly::trainer::{mean_train_loss, train, TrainConfig};
use cpoly::Error;

fn snapshot(model: &mut TransformerModel) -> Vec<Tensor> {
    let mut out: Vec<Tensor> = model.frozen_tensors().into_iter().map(|(_, t)| t.clone()).collect();
    out.extend(model.trainable_mut().into_iter().map(|(_, t)| t.clone()));
    out
}

fn one_epoch_lowers_loss(variant: RoutingVariant) {
    let bench = generate_benchmark(&BenchmarkConfig::default()).unwrap();
    let config = ExperimentConfig::default().with_variant(variant).resolve().unwrap();
    for seed in [0, 1, 2] {
        let (model_config, train_config) = config.for_seed(seed);
        let mut model = TransformerModel::new(model_config).unwrap();
        let before = mean_train_loss(&model, &bench.data).unwrap();
        let one = TrainConfig {
            epochs: 1,
            ..train_config
        };
        train(&mut model, &bench.data, &one, None).unwrap();
        let after = mean_train_loss(&model, &bench.data).unwrap();
        assert!(after < before, "{variant} seed {seed}: {before} -> {after}");
    }
}

#[test]
fn one_epoch_lowers_loss_lora() {
    one_epoch_lowers_loss(RoutingVariant::SingleLora);
}

#[test]
fn one_epoch_lowers_loss_moe() {
    one_epoch_lowers_loss(RoutingVariant::MoeLora);
}

#[test]
fn one_epoch_lowers_loss_poly() {
    one_epoch_lowers_loss(RoutingVariant::Poly);
}

#[test]
fn one_epoch_lowers_loss_cpoly() {
    one_epoch_lowers_loss(RoutingVariant::CPoly);
}

fn small() -> (ExperimentConfig, Benchmark) {
    let config = ExperimentConfig {
        benchmark: BenchmarkConfig {
            n_train: 40,
            n_eval: 10,
            ..BenchmarkConfig::default()
        },
        ..ExperimentConfig::default()
    }
    .resolve()
    .unwrap();
    let bench = generate_benchmark(&config.benchmark).unwrap();
    (config, bench)
}

#[test]
fn same_config_same_report() {
    let (config, bench) = small();
    let run = || {
        let (m, t) = config.for_seed(4);
        let mut model = TransformerModel::new(m).unwrap();
        let report = train(&mut model, &bench.data, &t, None).unwrap();
        (report, snapshot(&mut model))
    };
    let (a, ta) = run();
    let (b, tb) = run();
    assert_eq!(a, b);
    assert!(ta.iter().zip(&tb).all(|(x, y)| x.bit_eq(y)));
}

#[test]
fn zero_epochs_change_nothing() {
    let (config, bench) = small();
    let (m, t) = config.for_seed(0);
    let mut model = TransformerModel::new(m).unwrap();
    let before = snapshot(&mut model);
    let report = train(&mut model, &bench.data, &TrainConfig { epochs: 0, ..t }, None).unwrap();
    assert_eq!(report.steps, 0);
    let after = snapshot(&mut model);
    assert!(before.iter().zip(&after).all(|(x, y)| x.bit_eq(y)));
}

#[test]
fn divergence_is_reported() {
    let (config, bench) = small();
    let (m, t) = config.for_seed(0);
    let mut model = TransformerModel::new(m).unwrap();
    for (_, tensor) in model.trainable_mut() {
        tensor.data_mut().fill(f64::NAN);
    }
    match train(&mut model, &bench.data, &t, None) {
        Err(Error::NumericInvalid(msg)) => assert!(msg.contains("step"), "{msg}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

#[test]
fn nan_adapters_poison_the_output() {
    let (config, bench) = small();
    for variant in RoutingVariant::ALL {
        let (m, _) = config.with_variant(variant).resolve().unwrap().for_seed(0);
        let mut model = TransformerModel::new(m).unwrap();
        for (_, tensor) in model.trainable_mut() {
            tensor.data_mut().fill(f64::NAN);
        }
        let refs: Vec<_> = bench.data.tasks[0].train.iter().take(3).collect();
        let batch = cpoly::data::TaskBatch::from_examples(0, &refs, bench.data.form).unwrap();
        let out = model.forward(&batch, cpoly::routing::RoutingMode::Eval).unwrap();
        assert!(out.data().iter().all(|x| x.is_nan()), "{variant}");
    }
}
