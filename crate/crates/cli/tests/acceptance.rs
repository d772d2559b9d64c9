//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Exits non-zero on a failed criterion only when `CPOLY_ACCEPTANCE_STRICT`
//! is set; otherwise failures are reported and the process exits cleanly.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use rand::Rng;

use cpoly::adapters::{param_count, LayerSlot, LoraModule, Projection, SkillInventory};
use cpoly::analysis::{cluster_tasks, euclidean, routing_profiles, Dendrogram};
use cpoly::composer::{AdapterShape, ComposedAdapter};
use cpoly::data::{generate_benchmark, Benchmark, BenchmarkConfig, TaskBatch};
use cpoly::experiment::{
    ablation_configs, analyze_model, median, run_seed, ExperimentConfig, RunOutcome, DEFAULT_SEEDS,
};
use cpoly::model::{ModelConfig, TransformerModel};
use cpoly::routing::{gumbel_sigmoid, AllocationMatrix, NoiseKey, RoutingMode, RoutingVariant};
use cpoly::tensor::gradcheck::{GradCheck, GradReport};
use cpoly::tensor::kernels::sigmoid;
use cpoly::tensor::{Tape, Tensor, Var};
use cpoly::trainer::{lcs_len, lr_at, rouge_l, TrainConfig};

type Check = Result<String, String>;

struct Line {
    id: usize,
    name: &'static str,
    outcome: Check,
    elapsed: Duration,
}

fn timed(id: usize, name: &'static str, f: impl FnOnce() -> Check) -> Line {
    let start = Instant::now();
    let outcome = f();
    Line {
        id,
        name,
        outcome,
        elapsed: start.elapsed(),
    }
}

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random(shape: &[usize], rng: &mut impl Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

// ---------------------------------------------------------------- 1

const PROBES: usize = 8;

fn perturbed(variant: RoutingVariant, seed: u64) -> ComposedAdapter {
    let (common, per_task) = match variant {
        RoutingVariant::SingleLora => (1, 0),
        RoutingVariant::CPoly => (2, 1),
        _ => (3, 0),
    };
    let shape = AdapterShape {
        variant,
        tasks: 3,
        common,
        per_task,
        width: 6,
        rank: 2,
        mask_off_diagonal: false,
        normalize: true,
    };
    let slot = LayerSlot {
        layer: 0,
        projection: Projection::Value,
    };
    let mut a = ComposedAdapter::new(slot, shape, seed).unwrap();
    let mut rng = cpoly::seeding::rng(seed + 99);
    for (_, t) in a.tensors_mut() {
        for x in t.data_mut() {
            *x += rng.gen_range(-0.5..0.5);
        }
    }
    a
}

fn gradient_fidelity() -> Check {
    let gc = GradCheck::default();
    let mut rng = cpoly::seeding::rng(1);
    let mut report = GradReport::default();
    let mut run = |leaves: &[Tensor], f: &dyn Fn(&mut Tape, &[Var]) -> cpoly::Result<Var>| {
        report.extend(gc.run(leaves, PROBES, f).map_err(|e| e.to_string())?);
        Ok::<(), String>(())
    };
    let a = random(&[3, 4], &mut rng, -2.0, 2.0);
    let b = random(&[3, 4], &mut rng, -2.0, 2.0);
    let s = random(&[1], &mut rng, -1.0, 1.0);
    let pos = random(&[3, 4], &mut rng, 0.5, 3.0);
    run(&[a.clone(), b.clone()], &|t, v| t.add(v[0], v[1]))?;
    run(&[a.clone(), b.clone()], &|t, v| t.sub(v[0], v[1]))?;
    run(&[a.clone(), b.clone()], &|t, v| t.mul(v[0], v[1]))?;
    run(&[a.clone(), s.clone()], &|t, v| t.mul(v[0], v[1]))?;
    run(&[a.clone()], &|t, v| Ok(t.scale(v[0], -1.7)))?;
    run(&[a.clone()], &|t, v| Ok(t.add_scalar(v[0], 0.3)))?;
    run(&[a.clone()], &|t, v| Ok(t.sigmoid(v[0])))?;
    run(&[a.clone()], &|t, v| Ok(t.relu(v[0])))?;
    run(&[pos], &|t, v| Ok(t.log(v[0])))?;
    run(&[a.clone()], &|t, v| Ok(t.exp(v[0])))?;
    run(&[a.clone()], &|t, v| Ok(t.sum(v[0])))?;
    run(&[a.clone()], &|t, v| t.row(v[0], 1))?;
    run(&[a.clone()], &|t, v| t.gather(v[0], vec![0, 5, 5, 11]))?;
    let m = random(&[5, 3], &mut rng, -1.0, 1.0);
    let n = random(&[3, 7], &mut rng, -1.0, 1.0);
    run(&[m.clone(), n], &|t, v| t.matmul(v[0], v[1]))?;
    run(&[random(&[4, 6], &mut rng, -2.0, 2.0)], &|t, v| t.layer_norm(v[0]))?;
    run(&[m.clone(), random(&[5, 3], &mut rng, -1.0, 1.0)], &|t, v| t.mse(v[0], v[1]))?;
    run(&[random(&[4, 5], &mut rng, -2.0, 2.0)], &|t, v| {
        t.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)])
    })?;
    run(&[random(&[1, 4], &mut rng, 0.1, 1.0)], &|t, v| Ok(t.normalize_sum(v[0], 1e-8)))?;
    let qkv: Vec<Tensor> = (0..3).map(|_| random(&[6, 4], &mut rng, -1.0, 1.0)).collect();
    run(&qkv, &|t, v| t.attention(v[0], v[1], v[2], 2, 3, 2, None))?;
    let mask = vec![true, true, false, true, false, false];
    run(&qkv, &|t, v| t.attention(v[0], v[1], v[2], 2, 3, 2, Some(mask.clone())))?;
    let u = [0.1, 0.5, 0.9, 0.3, 0.77, 0.02];
    run(&[random(&[2, 3], &mut rng, -3.0, 3.0)], &|t, v| t.gumbel_sigmoid(v[0], &u))?;
    let mut terms: Vec<Tensor> = (0..3).map(|_| random(&[2, 4], &mut rng, -1.0, 1.0)).collect();
    terms.push(random(&[1, 3], &mut rng, -1.0, 1.0));
    run(&terms, &|t, v| t.mix(v[3], &v[..3]))?;
    let mut leaves = vec![random(&[5, 6], &mut rng, -1.0, 1.0), random(&[5, 6], &mut rng, -1.0, 1.0)];
    for _ in 0..3 {
        leaves.push(random(&[6, 2], &mut rng, -1.0, 1.0));
        leaves.push(random(&[2, 6], &mut rng, -1.0, 1.0));
    }
    let mut w = random(&[1, 3], &mut rng, 0.2, 1.0);
    w.data_mut()[1] = 0.0;
    leaves.push(w);
    run(&leaves, &|t, v| {
        let modules: Vec<(Var, Var)> = (0..3).map(|i| (v[2 + 2 * i], v[3 + 2 * i])).collect();
        t.lora_mix(v[0], v[1], &modules, v[8])
    })?;
    let h = random(&[4, 6], &mut rng, -1.0, 1.0);
    let base = random(&[6, 6], &mut rng, -1.0, 1.0);
    for variant in RoutingVariant::ALL {
        for mode in [RoutingMode::Eval, RoutingMode::Train(NoiseKey { seed: 3, step: 11 })] {
            let adapter = perturbed(variant, 72);
            let mut leaves = vec![h.clone(), base.clone()];
            let mut copy = adapter.clone();
            leaves.extend(copy.tensors_mut().into_iter().map(|(_, t)| t.clone()));
            run(&leaves, &|t, v| {
                let vars = adapter.vars_from(&v[2..])?;
                adapter.compose(t, &vars, v[0], v[1], 2, mode)
            })?;
        }
    }
    let total = report.probes.len();
    let failures = report.failures(gc.tolerance).len();
    let detail = format!(
        "{total} probes, {failures} over {:.0e}, worst relative error {:.2e}",
        gc.tolerance,
        report.worst()
    );
    ensure(total >= 100 && failures == 0, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 2

fn gumbel_law() -> Check {
    let mut rng = cpoly::seeding::rng(2);
    let mut freqs = Vec::new();
    let mut ok = true;
    for (w, target) in [(-2.0, 0.1192), (0.0, 0.5), (2.0, 0.8808)] {
        let n = 10_000;
        let mut above = 0;
        for _ in 0..n {
            if gumbel_sigmoid(w, rng.gen::<f64>()).map_err(|e| e.to_string())? > 0.5 {
                above += 1;
            }
        }
        let f = above as f64 / n as f64;
        ok &= (f - target).abs() <= 0.02;
        freqs.push(format!("{w:+}:{f:.4}"));
    }
    for w in [-3.0, -0.4, 0.0, 0.9, 4.0] {
        ok &= gumbel_sigmoid(w, 0.5).unwrap() == sigmoid(w);
    }
    for u in [0.05, 0.3, 0.5, 0.61, 0.95] {
        ok &= gumbel_sigmoid(0.0, u).unwrap() == u;
    }
    let detail = format!("P(>0.5) {}; identities exact: {ok}", freqs.join(" "));
    ensure(ok, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 3

fn chain(common: usize, rng: &mut impl Rng) -> Vec<(&'static str, ComposedAdapter)> {
    const TASKS: usize = 4;
    let width = 8;
    let slot = LayerSlot {
        layer: 0,
        projection: Projection::Query,
    };
    let module = |rng: &mut _| {
        LoraModule::from_parts(random(&[width, 2], rng, -1.0, 1.0), random(&[2, width], rng, -1.0, 1.0))
            .unwrap()
    };
    let shared: Vec<LoraModule> = (0..common).map(|_| module(rng)).collect();
    let row = random(&[1, common], rng, -1.0, 1.0);
    let rows = Tensor::new(
        vec![TASKS, common],
        row.data().iter().copied().cycle().take(TASKS * common).collect(),
    )
    .unwrap();
    let specific: Vec<Vec<LoraModule>> = (0..TASKS).map(|_| vec![module(rng)]).collect();
    let plain = || SkillInventory::from_modules(shared.clone(), Vec::new()).unwrap();
    let alloc = |v, b, logits, wb| {
        AllocationMatrix::from_parts(v, TASKS, common, b, logits, wb, false, true).unwrap()
    };
    let mut out = Vec::new();
    if common == 1 {
        let a = alloc(RoutingVariant::SingleLora, 0, None, None);
        out.push(("lora", ComposedAdapter::from_parts(slot, plain(), a).unwrap()));
    }
    let a = alloc(RoutingVariant::MoeLora, 0, Some(row), None);
    out.push(("moe", ComposedAdapter::from_parts(slot, plain(), a).unwrap()));
    let a = alloc(RoutingVariant::Poly, 0, Some(rows.clone()), None);
    out.push(("poly", ComposedAdapter::from_parts(slot, plain(), a).unwrap()));
    let a = alloc(RoutingVariant::CPoly, 1, Some(rows), Some(Tensor::zeros(&[TASKS, TASKS])));
    let inv = SkillInventory::from_modules(shared.clone(), specific).unwrap();
    out.push(("cpoly", ComposedAdapter::from_parts(slot, inv, a).unwrap()));
    out
}

fn reduction_chain() -> Check {
    let mut rng = cpoly::seeding::rng(3);
    let mut compared = 0;
    for common in [1, 3] {
        let adapters = chain(common, &mut rng);
        for _ in 0..10 {
            let h = random(&[3, 8], &mut rng, -1.0, 1.0);
            let base = random(&[8, 8], &mut rng, -1.0, 1.0);
            let task = rng.gen_range(0..4);
            let outs: Vec<Tensor> = adapters
                .iter()
                .map(|(_, a)| a.compose_eager(&h, &base, task, RoutingMode::Eval).unwrap())
                .collect();
            for (i, pair) in outs.windows(2).enumerate() {
                ensure(
                    pair[0].bit_eq(&pair[1]),
                    format!("{} vs {} differ at A={common}", adapters[i].0, adapters[i + 1].0),
                )?;
                compared += 1;
            }
        }
    }
    Ok(format!("{compared} adjacent pairs bitwise equal (A=1 and A=3)"))
}

// ---------------------------------------------------------------- 4

fn parameter_parity() -> Check {
    let mut seen = Vec::new();
    for d in [16, 64, 256] {
        let moe = param_count(4, 0, 8, 2, d, 1).adapter;
        let lora = param_count(1, 0, 8, 8, d, 1).adapter;
        ensure(moe == lora, format!("d={d}: {moe} vs {lora}"))?;
        let model = |v| {
            let c = ModelConfig {
                d_model: d,
                ..ModelConfig::default()
            };
            TransformerModel::new(c.with_variant(v)).unwrap().count_trainable().adapter
        };
        let (m, l) = (model(RoutingVariant::MoeLora), model(RoutingVariant::SingleLora));
        ensure(m == l, format!("model d={d}: {m} vs {l}"))?;
        seen.push(format!("d={d}:{moe}"));
    }
    Ok(format!("per-matrix counts {}", seen.join(" ")))
}

// ---------------------------------------------------------------- 5

fn zero_delta(bench: &Benchmark, runs: &[&RunOutcome]) -> Check {
    let mut batches = 0;
    for variant in RoutingVariant::ALL {
        let model = TransformerModel::new(ModelConfig::default().with_variant(variant)).unwrap();
        for task in &bench.data.tasks {
            let refs: Vec<_> = task.eval.iter().take(8).collect();
            let batch = TaskBatch::from_examples(task.task_id, &refs, bench.data.form).unwrap();
            let base = model.forward_base(&batch).unwrap();
            let out = model.forward(&batch, RoutingMode::Eval).unwrap();
            ensure(out.bit_eq(&base), format!("{variant} task {} differs from base", task.task_id))?;
            batches += 1;
        }
    }
    let changed = runs.iter().filter(|r| !r.summary.frozen_unchanged).count();
    ensure(changed == 0, format!("{changed} trained runs changed frozen weights"))?;
    Ok(format!("{batches} untrained batches match base; frozen weights intact in {} trained runs", runs.len()))
}

// ---------------------------------------------------------------- 6

fn brute_lcs(a: &[u32], b: &[u32]) -> usize {
    let is_sub = |s: &[u32]| {
        let mut it = b.iter();
        s.iter().all(|x| it.any(|y| y == x))
    };
    (0u32..1 << a.len())
        .filter_map(|mask| {
            let s: Vec<u32> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| a[i]).collect();
            is_sub(&s).then_some(s.len())
        })
        .max()
        .unwrap_or(0)
}

fn brute_rouge_l(a: &[u32], b: &[u32]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let hits = brute_lcs(a, b);
    if hits == 0 {
        return 0.0;
    }
    let (p, r) = (hits as f64 / a.len() as f64, hits as f64 / b.len() as f64);
    2.0 * p * r / (p + r)
}

fn metric_oracles() -> Check {
    let mut rng = cpoly::seeding::rng(6);
    for i in 0..1000 {
        let mut seq = || {
            let n = rng.gen_range(0..=10);
            (0..n).map(|_| rng.gen_range(0..5u32)).collect::<Vec<_>>()
        };
        let (a, b) = (seq(), seq());
        ensure(
            lcs_len(&a, &b) == brute_lcs(&a, &b) && rouge_l(&a, &b).to_bits() == brute_rouge_l(&a, &b).to_bits(),
            format!("pair {i} disagrees: {a:?} {b:?}"),
        )?;
    }
    let cat = rouge_l(&[3, 4, 5], &[3, 4]);
    ensure((cat - 0.8).abs() < 1e-15, format!("cat example {cat}"))?;
    let lr = lr_at(53, 100, 5e-5, 0.06).map_err(|e| e.to_string())?;
    ensure((lr - 2.5e-5).abs() < 1e-18, format!("lr_at {lr}"))?;
    Ok(format!("1000 pairs exact; cat F1 {cat}; lr_at(53) {lr:e}"))
}

// ---------------------------------------------------------------- 7 and 8

type Key = (&'static str, usize, usize);

fn key(config: &ExperimentConfig) -> Key {
    (config.variant.as_str(), config.model.common, config.model.per_task)
}

fn train_config(config: &ExperimentConfig, bench: &Benchmark, runs: &mut BTreeMap<Key, Vec<RunOutcome>>) -> Result<(), String> {
    if runs.contains_key(&key(config)) {
        return Ok(());
    }
    let mut outcomes = Vec::new();
    for &seed in &config.seeds {
        let outcome = run_seed(config, bench, seed).map_err(|e| e.to_string())?;
        eprintln!(
            "  trained {} A={} B={} seed {seed}: exact_match {:.4}",
            config.variant, config.model.common, config.model.per_task, outcome.summary.mean.exact_match
        );
        outcomes.push(outcome);
    }
    runs.insert(key(config), outcomes);
    Ok(())
}

fn median_em(runs: &[RunOutcome]) -> f64 {
    median(&runs.iter().map(|r| r.summary.mean.exact_match).collect::<Vec<_>>())
}

fn mechanism_benefit(medians: &[(RoutingVariant, f64)], elapsed: Duration) -> Check {
    let get = |v| medians.iter().find(|(x, _)| *x == v).map(|&(_, m)| m).unwrap();
    let (lora, moe, poly, cpoly) = (
        get(RoutingVariant::SingleLora),
        get(RoutingVariant::MoeLora),
        get(RoutingVariant::Poly),
        get(RoutingVariant::CPoly),
    );
    let detail = format!(
        "median EM cpoly {cpoly:.4} poly {poly:.4} moe {moe:.4} lora {lora:.4}; cpoly-moe {:+.2} pts; {:.0}s",
        100.0 * (cpoly - moe),
        elapsed.as_secs_f64()
    );
    let mut broken = Vec::new();
    if !(cpoly > poly) {
        broken.push("cpoly > poly");
    }
    if !(poly > moe) {
        broken.push("poly > moe");
    }
    if !(moe >= lora) {
        broken.push("moe >= lora");
    }
    if !(cpoly - moe >= 0.02) {
        broken.push("cpoly - moe >= 2 pts");
    }
    if elapsed >= Duration::from_secs(600) {
        broken.push("runtime < 10 min");
    }
    ensure(broken.is_empty(), format!("{detail}; violated: {}", broken.join(", ")))?;
    Ok(detail)
}

fn ablation_trend(medians: &[((usize, usize), f64)]) -> Check {
    let best = medians.iter().map(|&(_, m)| m).fold(f64::NEG_INFINITY, f64::max);
    let target = medians.iter().find(|(k, _)| *k == (3, 1)).map(|&(_, m)| m).unwrap();
    let table: Vec<String> = medians.iter().map(|((a, b), m)| format!("({a},{b}) {m:.4}")).collect();
    let detail = format!("median EM {}", table.join(" "));
    ensure(best - target <= 0.005, format!("{detail}; (3,1) trails best by {:.2} pts", 100.0 * (best - target)))?;
    Ok(detail)
}

// ---------------------------------------------------------------- 9

fn merged_sets(d: &Dendrogram) -> Vec<BTreeSet<usize>> {
    let mut sets: Vec<BTreeSet<usize>> = (0..d.leaves).map(|i| BTreeSet::from([i])).collect();
    for m in &d.merges {
        let u = sets[m.left].union(&sets[m.right]).copied().collect();
        sets.push(u);
    }
    sets.split_off(d.leaves)
}

fn brute_force_linkage(p: &[Vec<f64>]) -> Vec<(BTreeSet<usize>, f64)> {
    let mut clusters: Vec<BTreeSet<usize>> = (0..p.len()).map(|i| BTreeSet::from([i])).collect();
    let mut out = Vec::new();
    while clusters.len() > 1 {
        let mut best: Option<(f64, (usize, usize), usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut total = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        total += euclidean(&p[i], &p[j]);
                    }
                }
                let d = total / (clusters[a].len() * clusters[b].len()) as f64;
                let (la, lb) = (*clusters[a].first().unwrap(), *clusters[b].first().unwrap());
                let key = (la.min(lb), la.max(lb));
                let wins = best.map_or(true, |(bd, bk, _, _)| {
                    let scale = d.abs().max(bd.abs()).max(f64::MIN_POSITIVE);
                    if (d - bd).abs() <= 1e-12 * scale {
                        key < bk
                    } else {
                        d < bd
                    }
                });
                if wins {
                    best = Some((d, key, a, b));
                }
            }
        }
        let (d, _, a, b) = best.unwrap();
        let right = clusters.remove(b);
        let mut merged = clusters.remove(a);
        merged.extend(right);
        out.push((merged.clone(), d));
        clusters.push(merged);
    }
    out
}

fn matches_oracle(p: &[Vec<f64>]) -> bool {
    let Ok(d) = cluster_tasks(p) else { return false };
    let oracle = brute_force_linkage(p);
    merged_sets(&d).iter().zip(&d.merges).zip(&oracle).all(|((set, m), (want, dist))| {
        set == want && (m.distance - dist).abs() <= 1e-12 * (1.0 + dist)
    }) && oracle.len() == d.merges.len()
}

fn interpretability(bench: &Benchmark, poly: &[RunOutcome], cpoly: &[RunOutcome]) -> Check {
    let ari = |runs: &[RunOutcome]| -> Result<Vec<f64>, String> {
        runs.iter()
            .map(|r| analyze_model(&r.model, bench).map(|s| s.ari).map_err(|e| e.to_string()))
            .collect()
    };
    let (p, c) = (ari(poly)?, ari(cpoly)?);
    let (mp, mc) = (median(&p), median(&c));
    let mut oracle_cases = 0;
    for r in poly.iter().chain(cpoly) {
        let profiles: Vec<Vec<f64>> = routing_profiles(&r.model)
            .map_err(|e| e.to_string())?
            .into_iter()
            .map(|p| p.values)
            .collect();
        ensure(matches_oracle(&profiles), "trained-profile clustering disagrees with oracle")?;
        oracle_cases += 1;
    }
    let mut rng = cpoly::seeding::rng(9);
    for _ in 0..200 {
        let t = rng.gen_range(2..=8);
        let w = rng.gen_range(1..6);
        let p: Vec<Vec<f64>> = (0..t).map(|_| (0..w).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        ensure(matches_oracle(&p), format!("random profiles disagree: {p:?}"))?;
        oracle_cases += 1;
    }
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join("/");
    let detail = format!(
        "median ARI cpoly {mc:.3} ({}) vs poly {mp:.3} ({}); oracle agrees on {oracle_cases} clusterings",
        fmt(&c),
        fmt(&p)
    );
    ensure(mc >= mp, detail.clone())?;
    Ok(detail)
}

// ---------------------------------------------------------------- 10

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn cli_determinism() -> Check {
    let config = ExperimentConfig {
        benchmark: BenchmarkConfig {
            n_train: 24,
            n_eval: 8,
            ..BenchmarkConfig::default()
        },
        train: TrainConfig {
            epochs: 1,
            ..TrainConfig::default()
        },
        seeds: vec![0, 1],
        out: PathBuf::from("runs"),
        ..ExperimentConfig::default()
    };
    let text = serde_json::to_string_pretty(&config).map_err(|e| e.to_string())?;
    let commands: [&[&str]; 6] = [
        &["gen-data"],
        &["train", "--variant", "cpoly"],
        &["analyze", "--variant", "cpoly"],
        &["compare"],
        &["ablate"],
        &["train", "--variant", "poly", "--seed", "3", "--hard-eval"],
    ];
    let mut trees = Vec::new();
    let mut dirs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
        fs::write(dir.path().join("config.json"), &text).map_err(|e| e.to_string())?;
        for args in commands {
            let out = Command::new(env!("CARGO_BIN_EXE_cpoly"))
                .args(args)
                .args(["--config", "config.json"])
                .current_dir(dir.path())
                .output()
                .map_err(|e| e.to_string())?;
            ensure(
                out.status.success(),
                format!("cpoly {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()),
            )?;
        }
        trees.push(files_under(&dir.path().join("runs")));
        dirs.push(dir);
    }
    let (a, b) = (&trees[0], &trees[1]);
    let names: BTreeSet<_> = a.keys().chain(b.keys()).collect();
    let differing: Vec<String> = names
        .iter()
        .filter(|n| a.get(**n) != b.get(**n))
        .map(|n| n.display().to_string())
        .collect();
    let count = |ext: &str| a.keys().filter(|p| p.extension().is_some_and(|e| e == ext)).count();
    ensure(
        differing.is_empty() && count("csv") > 0,
        format!("differing files: {}", differing.join(", ")),
    )?;
    ensure(a.keys().any(|p| p.ends_with("summary.json")), "no summary.json written")?;
    Ok(format!(
        "{} commands twice: {} files identical ({} csv, {} json)",
        commands.len(),
        a.len(),
        count("csv"),
        count("json")
    ))
}

// ----------------------------------------------------------------

fn within(line: &mut Line, limit: Duration) {
    if line.elapsed >= limit {
        if let Ok(d) = &line.outcome {
            line.outcome = Err(format!("{d}; over {limit:?}"));
        }
    }
}

fn main() -> ExitCode {
    println!("acceptance suite");
    let mut lines = vec![
        timed(1, "gradient fidelity", gradient_fidelity),
        timed(2, "gumbel-sigmoid law", gumbel_law),
        timed(3, "reduction chain", reduction_chain),
        timed(4, "parameter parity", parameter_parity),
    ];
    within(&mut lines[0], Duration::from_secs(60));
    within(&mut lines[1], Duration::from_secs(1));

    let base = ExperimentConfig::default();
    let bench = generate_benchmark(&base.benchmark).expect("default benchmark");
    let mut runs: BTreeMap<Key, Vec<RunOutcome>> = BTreeMap::new();
    let mut failures: Vec<String> = Vec::new();

    let start = Instant::now();
    let mut compare = Vec::new();
    for variant in RoutingVariant::ALL {
        let config = base.with_variant(variant).resolve().expect("variant config");
        assert_eq!(config.seeds, DEFAULT_SEEDS);
        if let Err(e) = train_config(&config, &bench, &mut runs) {
            failures.push(e);
        }
        compare.push((variant, key(&config)));
    }
    let compare_time = start.elapsed();

    let mut ablation = Vec::new();
    for config in ablation_configs(&base, &[]) {
        let config = config.resolve().expect("ablation config");
        if let Err(e) = train_config(&config, &bench, &mut runs) {
            failures.push(e);
        }
        ablation.push(((config.model.common, config.model.per_task), key(&config)));
    }

    let all: Vec<&RunOutcome> = runs.values().flatten().collect();
    lines.push(timed(5, "zero-delta init and frozen audit", || zero_delta(&bench, &all)));
    lines.push(timed(6, "metric oracles", metric_oracles));
    let trained = |k: &Key| runs.get(k).filter(|r| r.len() == DEFAULT_SEEDS.len());
    lines.push(Line {
        id: 7,
        name: "mechanism benefit",
        outcome: compare
            .iter()
            .map(|(v, k)| trained(k).map(|r| (*v, median_em(r))).ok_or_else(|| failures.join("; ")))
            .collect::<Result<Vec<_>, _>>()
            .and_then(|m| mechanism_benefit(&m, compare_time)),
        elapsed: compare_time,
    });
    lines.push(timed(8, "ablation trend", || {
        let m = ablation
            .iter()
            .map(|(ab, k)| trained(k).map(|r| (*ab, median_em(r))).ok_or_else(|| failures.join("; ")))
            .collect::<Result<Vec<_>, _>>()?;
        ablation_trend(&m)
    }));
    lines.push(timed(9, "routing interpretability", || {
        let find = |v| compare.iter().find(|(x, _)| *x == v).and_then(|(_, k)| trained(k));
        match (find(RoutingVariant::Poly), find(RoutingVariant::CPoly)) {
            (Some(p), Some(c)) => interpretability(&bench, p, c),
            _ => Err("missing trained runs".into()),
        }
    }));
    lines.push(timed(10, "cli determinism", cli_determinism));

    let mut passed = 0;
    for line in &lines {
        let (tag, detail) = match &line.outcome {
            Ok(d) => {
                passed += 1;
                ("PASS", d)
            }
            Err(d) => ("FAIL", d),
        };
        println!(
            "{tag} {:>2} {:<34} {detail} [{:.1}s]",
            line.id,
            line.name,
            line.elapsed.as_secs_f64()
        );
    }
    println!("{passed}/{} criteria passed", lines.len());
    let strict = std::env::var_os("CPOLY_ACCEPTANCE_STRICT").is_some();
    if strict && passed < lines.len() {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
