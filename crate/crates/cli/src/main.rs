use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use cpoly::checkpoint;
use cpoly::data::{generate_benchmark, Benchmark};
use cpoly::experiment::{
    ablation_configs, analyze_model, run_seed, table_csv, write_analysis, write_run,
    ExperimentConfig, RunSummary, TableRow,
};
use cpoly::model::{ModelConfig, TransformerModel};
use cpoly::routing::RoutingVariant;

#[derive(Parser)]
#[command(name = "cpoly", version, about = "Multi-task low-rank adapter experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark as JSONL plus ground truth.
    GenData(Common),
    /// Train one run per seed.
    Train(Common),
    /// Sweep (A, B) splits at a fixed total skill count.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Also sweep these task counts, e.g. `4,8,16`.
        #[arg(long, value_delimiter = ',')]
        task_counts: Vec<usize>,
    },
    /// Export heatmaps, dendrograms and ARI for trained runs.
    Analyze {
        #[command(flatten)]
        common: Common,
        /// A single run directory written by `train`.
        #[arg(long)]
        run: Option<PathBuf>,
    },
    /// Run every variant with matched adapter budgets.
    Compare(Common),
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON); unset fields keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// lora, moe, poly or cpoly.
    #[arg(long, value_parser = parse_variant)]
    variant: Option<RoutingVariant>,
    /// Threshold routing weights at 0.5 during evaluation.
    #[arg(long)]
    hard_eval: bool,
    /// Keep off-diagonal task-specific weights at zero.
    #[arg(long)]
    mask_off_diagonal: bool,
}

fn parse_variant(s: &str) -> Result<RoutingVariant, String> {
    s.parse().map_err(|e: cpoly::Error| e.to_string())
}

impl Common {
    fn experiment(&self) -> anyhow::Result<ExperimentConfig> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.variant {
            config = config.with_variant(v);
        }
        if let Some(seed) = self.seed {
            config.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            config.out = out.clone();
        }
        config.train.hard_eval |= self.hard_eval;
        config.model.mask_off_diagonal |= self.mask_off_diagonal;
        Ok(config.resolve()?)
    }
}

/// Directory that receives a `.failed` marker if the command aborts.
#[derive(Default)]
struct Guard {
    current: Option<PathBuf>,
}

impl Guard {
    fn enter(&mut self, dir: &Path) -> anyhow::Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let marker = dir.join(".failed");
        if marker.exists() {
            fs::remove_file(&marker)?;
        }
        self.current = Some(dir.to_path_buf());
        Ok(())
    }
}

fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    format!("{:x}", h.finalize())
}

fn write_config(config: &ExperimentConfig, dir: &Path) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(config)?;
    text.push('\n');
    fs::write(dir.join("config.json"), &text)?;
    fs::write(
        dir.join("config.sha256"),
        format!("{}  config.json\n", content_hash(text.as_bytes())),
    )?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn benchmark(config: &ExperimentConfig) -> anyhow::Result<Benchmark> {
    Ok(generate_benchmark(&config.benchmark)?)
}

/// Trains every seed of `config`, writing one directory per seed.
fn train_all(
    config: &ExperimentConfig,
    bench: &Benchmark,
    guard: &mut Guard,
) -> anyhow::Result<Vec<RunSummary>> {
    let mut out = Vec::new();
    for &seed in &config.seeds {
        let dir = config.run_dir(seed);
        guard.enter(&dir)?;
        write_config(
            &ExperimentConfig {
                seeds: vec![seed],
                ..config.clone()
            },
            &dir,
        )?;
        let outcome = run_seed(config, bench, seed)?;
        write_run(&outcome, &dir)?;
        if !outcome.summary.frozen_unchanged {
            bail!("frozen weights changed during training in {}", dir.display());
        }
        println!(
            "{} seed {seed}: exact_match {:.4} loss {:.4} ({})",
            config.variant,
            outcome.summary.mean.exact_match,
            outcome.summary.mean_loss,
            dir.display()
        );
        out.push(outcome.summary);
    }
    Ok(out)
}

fn write_table(dir: &Path, name: &str, rows: &[TableRow]) -> anyhow::Result<()> {
    fs::write(dir.join(format!("{name}.csv")), table_csv(rows))?;
    write_json(&dir.join(format!("{name}.json")), &rows)
}

fn adapter_budget(variant: RoutingVariant, base: &ModelConfig) -> anyhow::Result<usize> {
    let config = base.clone().with_variant(variant);
    Ok(TransformerModel::new(config)?.count_trainable().adapter)
}

fn run(cli: Cli, guard: &mut Guard) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(common) => {
            let config = common.experiment()?;
            let dir = config.out.join("data");
            guard.enter(&dir)?;
            benchmark(&config)?.write(&dir)?;
            write_config(&config, &dir)?;
            println!("benchmark written to {}", dir.display());
        }
        Command::Train(common) => {
            let config = common.experiment()?;
            let bench = benchmark(&config)?;
            let runs = train_all(&config, &bench, guard)?;
            let dir = config.run_dir(0);
            let parent = dir.parent().unwrap_or(&config.out);
            let row = TableRow::from_runs(config.benchmark.tasks, &runs)?;
            write_json(&parent.join("summary.json"), &row)?;
        }
        Command::Ablate {
            common,
            task_counts,
        } => {
            let base = common.experiment()?;
            guard.enter(&base.out)?;
            let mut rows = Vec::new();
            for config in ablation_configs(&base, &task_counts) {
                let config = config.resolve()?;
                let bench = benchmark(&config)?;
                let runs = train_all(&config, &bench, guard)?;
                rows.push(TableRow::from_runs(config.benchmark.tasks, &runs)?);
            }
            guard.enter(&base.out)?;
            write_table(&base.out, "ablation", &rows)?;
            print!("{}", table_csv(&rows));
        }
        Command::Analyze { common, run } => {
            let targets: Vec<(ExperimentConfig, PathBuf)> = match run {
                Some(dir) => vec![(ExperimentConfig::load(&dir.join("config.json"))?.resolve()?, dir)],
                None => {
                    let config = common.experiment()?;
                    config
                        .seeds
                        .iter()
                        .map(|&s| (config.clone(), config.run_dir(s)))
                        .collect()
                }
            };
            for (config, dir) in targets {
                let ckpt = dir.join("checkpoint");
                let model = checkpoint::load(&ckpt)
                    .with_context(|| format!("no trained run at {}", dir.display()))?;
                let out = dir.join("analysis");
                guard.enter(&out)?;
                let bench = benchmark(&config)?;
                let summary = analyze_model(&model, &bench)?;
                write_analysis(&model, &summary, &out)?;
                println!("{} seed {}: ari {:.4} ({})", summary.variant, summary.seed, summary.ari, out.display());
            }
        }
        Command::Compare(common) => {
            let base = common.experiment()?;
            guard.enter(&base.out)?;
            let moe = adapter_budget(RoutingVariant::MoeLora, &base.model)?;
            let lora = adapter_budget(RoutingVariant::SingleLora, &base.model)?;
            if moe != lora {
                bail!("adapter budgets differ: moe {moe} vs lora {lora}");
            }
            let bench = benchmark(&base)?;
            let mut rows = Vec::new();
            for variant in RoutingVariant::ALL {
                let config = base.with_variant(variant).resolve()?;
                let runs = train_all(&config, &bench, guard)?;
                rows.push(TableRow::from_runs(config.benchmark.tasks, &runs)?);
            }
            guard.enter(&base.out)?;
            write_table(&base.out, "compare", &rows)?;
            print!("{}", table_csv(&rows));
        }
    }
    Ok(())
}

fn one_line(err: &anyhow::Error) -> String {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<cpoly::Error>())
        .map_or("cli", cpoly::Error::kind);
    let mut message = String::new();
    for cause in err.chain().map(ToString::to_string) {
        if message.contains(&cause) {
            continue;
        }
        if !message.is_empty() {
            message.push_str(": ");
        }
        message.push_str(&cause);
    }
    let message = message.replace('\n', " ");
    format!("error kind={kind} message={message:?}")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut guard = Guard::default();
    match run(cli, &mut guard) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let line = one_line(&err);
            eprintln!("{line}");
            if let Some(dir) = guard.current {
                let _ = fs::write(dir.join(".failed"), format!("{line}\n"));
            }
            ExitCode::FAILURE
        }
    }
}
