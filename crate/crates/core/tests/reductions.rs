use cpoly::adapters::{param_count, LayerSlot, LoraModule, Projection, SkillInventory};
use cpoly::composer::ComposedAdapter;
use cpoly::data::{generate_benchmark, BenchmarkConfig, TaskBatch, TaskForm};
use cpoly::model::{ModelConfig, TransformerModel};
use cpoly::routing::{AllocationMatrix, NoiseKey, RoutingMode, RoutingVariant};
use cpoly::tensor::Tensor;
use cpoly::trainer::{train, TrainConfig};
use rand::Rng;

const SLOT: LayerSlot = LayerSlot {
    layer: 1,
    projection: Projection::Key,
};
const TASKS: usize = 4;
const WIDTH: usize = 8;

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn module(rank: usize, rng: &mut impl Rng) -> LoraModule {
    LoraModule::from_parts(random(&[WIDTH, rank], rng), random(&[rank, WIDTH], rng)).unwrap()
}

/// SingleLoRA, MoE-LoRA, Poly with identical rows and CPoly with `W_B = 0`,
/// all over the same `common` modules.
fn chain(common: usize, seed: u64) -> Vec<ComposedAdapter> {
    let mut rng = cpoly::seeding::rng(seed);
    let rank = 2;
    let shared: Vec<LoraModule> = (0..common).map(|_| module(rank, &mut rng)).collect();
    let row = random(&[1, common], &mut rng);
    let rows = Tensor::new(
        vec![TASKS, common],
        row.data().iter().copied().cycle().take(TASKS * common).collect(),
    )
    .unwrap();
    let specific: Vec<Vec<LoraModule>> = (0..TASKS).map(|_| vec![module(rank, &mut rng)]).collect();
    let alloc = |variant, per_task, logits: Option<Tensor>, wb: Option<Tensor>| {
        AllocationMatrix::from_parts(variant, TASKS, common, per_task, logits, wb, false, true).unwrap()
    };
    let mut out = Vec::new();
    if common == 1 {
        out.push(
            ComposedAdapter::from_parts(
                SLOT,
                SkillInventory::from_modules(shared.clone(), Vec::new()).unwrap(),
                alloc(RoutingVariant::SingleLora, 0, None, None),
            )
            .unwrap(),
        );
    }
    let plain = || SkillInventory::from_modules(shared.clone(), Vec::new()).unwrap();
    out.push(
        ComposedAdapter::from_parts(SLOT, plain(), alloc(RoutingVariant::MoeLora, 0, Some(row), None))
            .unwrap(),
    );
    out.push(
        ComposedAdapter::from_parts(SLOT, plain(), alloc(RoutingVariant::Poly, 0, Some(rows.clone()), None))
            .unwrap(),
    );
    out.push(
        ComposedAdapter::from_parts(
            SLOT,
            SkillInventory::from_modules(shared.clone(), specific).unwrap(),
            alloc(
                RoutingVariant::CPoly,
                1,
                Some(rows),
                Some(Tensor::zeros(&[TASKS, TASKS])),
            ),
        )
        .unwrap(),
    );
    out
}

#[test]
fn reduction_chain_is_bitwise() {
    let mut rng = cpoly::seeding::rng(77);
    for common in [1, 3] {
        let adapters = chain(common, 10 + common as u64);
        assert_eq!(adapters.len(), if common == 1 { 4 } else { 3 });
        for _ in 0..10 {
            let h = random(&[3, WIDTH], &mut rng);
            let base = random(&[WIDTH, WIDTH], &mut rng);
            let task = rng.gen_range(0..TASKS);
            let outs: Vec<Tensor> = adapters
                .iter()
                .map(|a| a.compose_eager(&h, &base, task, RoutingMode::Eval).unwrap())
                .collect();
            for pair in outs.windows(2) {
                assert!(pair[0].bit_eq(&pair[1]), "A={common}");
            }
        }
    }
}

fn small_bench() -> cpoly::data::Benchmark {
    generate_benchmark(&BenchmarkConfig {
        n_train: 24,
        n_eval: 8,
        ..BenchmarkConfig::default()
    })
    .unwrap()
}

#[test]
fn untrained_model_matches_frozen_base() {
    let bench = small_bench();
    for variant in RoutingVariant::ALL {
        let model = TransformerModel::new(ModelConfig::default().with_variant(variant)).unwrap();
        for task in &bench.data.tasks {
            let refs: Vec<_> = task.train.iter().take(5).collect();
            let batch = TaskBatch::from_examples(task.task_id, &refs, TaskForm::Classification).unwrap();
            let base = model.forward_base(&batch).unwrap();
            for mode in [
                RoutingMode::Eval,
                RoutingMode::HardEval,
                RoutingMode::Train(NoiseKey { seed: 2, step: 9 }),
            ] {
                assert!(model.forward(&batch, mode).unwrap().bit_eq(&base), "{variant}");
            }
        }
    }
}

#[test]
fn training_leaves_frozen_weights_untouched() {
    let bench = small_bench();
    for variant in RoutingVariant::ALL {
        let mut model = TransformerModel::new(ModelConfig::default().with_variant(variant)).unwrap();
        let before: Vec<Tensor> = model.frozen_tensors().into_iter().map(|(_, t)| t.clone()).collect();
        let adapters_before: Vec<Tensor> =
            model.trainable_mut().into_iter().map(|(_, t)| t.clone()).collect();
        let config = TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        };
        train(&mut model, &bench.data, &config, None).unwrap();
        for ((_, after), before) in model.frozen_tensors().into_iter().zip(&before) {
            assert!(after.bit_eq(before));
        }
        let moved = model
            .trainable_mut()
            .into_iter()
            .zip(&adapters_before)
            .filter(|((_, a), b)| !a.bit_eq(b))
            .count();
        assert!(moved > 0, "{variant} did not train");
    }
}

#[test]
fn four_rank_two_experts_match_one_rank_eight() {
    for d in [16, 64, 256] {
        for matrices in [1, 6] {
            let moe = param_count(4, 0, 8, 2, d, matrices);
            let lora = param_count(1, 0, 8, 8, d, matrices);
            assert_eq!(moe.adapter, lora.adapter);
        }
        let model = |variant| {
            let config = ModelConfig {
                d_model: d,
                ..ModelConfig::default()
            };
            TransformerModel::new(config.with_variant(variant)).unwrap().count_trainable()
        };
        let (moe, lora) = (model(RoutingVariant::MoeLora), model(RoutingVariant::SingleLora));
        assert_eq!(moe.adapter, lora.adapter);
        assert_eq!(moe.adapter, 6 * 4 * 2 * 2 * d);
        let cpoly = model(RoutingVariant::CPoly);
        assert_eq!(cpoly.adapter, param_count(3, 1, 8, 2, d, 6).adapter);
        assert_eq!(cpoly.routing, param_count(3, 1, 8, 2, d, 6).routing);
    }
}
