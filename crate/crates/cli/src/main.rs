//! `fedepth` command-line driver.

use std::fs::File;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fedepth::analysis::{compare_models, Measure, PROBE_SIZE};
use fedepth::experiment::{
    load_data, memcost_table, plan_table, run_to_dir, setup, write_memcost_csv, write_similarity_csv, ExperimentConfig,
    RunPaths,
};
use fedepth::nn::ModelWeights;
use fedepth::partition::{partition, save_shards, size_stats, write_label_csv};
use fedepth::rng::{rng_for, tag};

#[derive(Parser)]
#[command(name = "fedepth", version, about = "Depth-wise federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a federation and write metrics, plans and checkpoints.
    Run {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint (default: <out-dir>/checkpoints/latest.bin).
        #[arg(long, value_name = "PATH", num_args = 0..=1)]
        resume: Option<Option<PathBuf>>,
    },
    /// Print every client's budget and decomposition plan.
    Plan {
        #[command(flatten)]
        common: Common,
    },
    /// Print and write the per-block memory cost table.
    Memcost {
        #[command(flatten)]
        common: Common,
    },
    /// Split the training set across clients and export the shards.
    Partition {
        #[command(flatten)]
        common: Common,
    },
    /// Compare the block representations of two checkpoints.
    Similarity {
        #[command(flatten)]
        common: Common,
        /// First checkpoint (rows of the matrix).
        #[arg(long)]
        a: PathBuf,
        /// Second checkpoint (columns).
        #[arg(long)]
        b: PathBuf,
        #[arg(long, value_enum, default_value_t = MeasureArg::Cka)]
        measure: MeasureArg,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    #[arg(long)]
    rounds: Option<usize>,
    /// Override a config entry, e.g. `--override federation.rounds=10`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MeasureArg {
    Cka,
    Cca,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("experiment.seed={seed}"));
        }
        if let Some(rounds) = self.rounds {
            overrides.push(format!("federation.rounds={rounds}"));
        }
        let cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path, &overrides)?,
            None => ExperimentConfig::parse("", &overrides)?,
        };
        Ok(cfg)
    }

    fn out_dir(&self) -> Result<&Path> {
        std::fs::create_dir_all(&self.out_dir)
            .with_context(|| format!("cannot create output directory {}", self.out_dir.display()))?;
        Ok(&self.out_dir)
    }
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Run { common, resume } => run(&common, resume),
        Command::Plan { common } => plan(&common),
        Command::Memcost { common } => memcost(&common),
        Command::Partition { common } => split(&common),
        Command::Similarity { common, a, b, measure } => similarity(&common, &a, &b, measure),
    }
}

fn run(common: &Common, resume: Option<Option<PathBuf>>) -> Result<()> {
    let cfg = common.config()?;
    let dir = common.out_dir()?;
    let resume = resume.map(|p| p.unwrap_or_else(|| RunPaths::new(dir).latest));
    if let Some(path) = &resume {
        if !path.exists() {
            bail!(
                "checkpoint {} does not exist; run without --resume first",
                path.display()
            );
        }
    }
    let s = setup(&cfg)?;
    let summary = run_to_dir(&s, dir, resume.as_deref())?;
    let rounds = summary.records.last().map_or(0, |r| r.round + 1);
    print!("rounds {rounds} final_acc {:.4}", summary.final_top1());
    if let Some(f) = summary.final_fairness() {
        print!(" fairness {f:.4}");
    }
    println!(" -> {}", dir.display());
    Ok(())
}

fn plan(common: &Common) -> Result<()> {
    let s = setup(&common.config()?)?;
    let table = plan_table(&s);
    let path = RunPaths::new(common.out_dir()?).plan;
    std::fs::write(&path, &table).with_context(|| format!("cannot write {}", path.display()))?;
    print!("{table}");
    Ok(())
}

fn memcost(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let (train, _) = load_data(&cfg)?;
    let graph = fedepth::experiment::build_graph(&cfg, train.sample_shape().dims())?;
    let rows = memcost_table(&graph, &cfg.local.client_config().cost_model())?;
    let path = RunPaths::new(common.out_dir()?).memcost;
    write_memcost_csv(&path, &rows)?;
    println!("{:>6} {:>10} {:>10} {:>8}", "block", "total_mb", "unit_mb", "ratio");
    for r in &rows {
        let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
        println!(
            "{:>6} {:>10.4} {:>10} {:>8}",
            r.block,
            r.total_mb,
            cell(r.unit_mb),
            cell(r.ratio)
        );
    }
    Ok(())
}

fn split(common: &Common) -> Result<()> {
    let cfg = common.config()?;
    let (train, _) = load_data(&cfg)?;
    let spec = cfg.partition.spec(cfg.experiment.seed);
    let shards = partition(&train.labels, train.classes, &spec)?;
    let paths = RunPaths::new(common.out_dir()?);
    save_shards(&paths.shards, &shards, train.classes, Some(&spec))?;
    let out = File::create(&paths.labels).with_context(|| format!("cannot create {}", paths.labels.display()))?;
    write_label_csv(out, &shards)?;
    let (mean, std) = size_stats(&shards);
    println!(
        "{} clients, {} samples, shard size mean {mean:.2} std {std:.2} -> {}",
        shards.len(),
        train.len(),
        paths.shards.display()
    );
    Ok(())
}

fn similarity(common: &Common, a: &Path, b: &Path, measure: MeasureArg) -> Result<()> {
    let cfg = common.config()?;
    let (train, test) = load_data(&cfg)?;
    let graph = fedepth::experiment::build_graph(&cfg, train.sample_shape().dims())?;
    let load = |p: &Path| -> Result<ModelWeights<f32>> {
        let (w, _) = ModelWeights::load(p)?;
        w.validate(&graph)
            .with_context(|| format!("{} does not match the configured model", p.display()))?;
        Ok(w)
    };
    let (wa, wb) = (load(a)?, load(b)?);
    let n = PROBE_SIZE.min(test.len());
    let mut idx = rand::seq::index::sample(&mut rng_for(cfg.experiment.seed, &[tag::PROBE]), test.len(), n).into_vec();
    idx.sort_unstable();
    let (probe, _) = test.batch(&idx)?;
    let measure = match measure {
        MeasureArg::Cka => Measure::Cka,
        MeasureArg::Cca => Measure::Cca,
    };
    let name = |p: &Path| p.display().to_string();
    let m = compare_models(&graph, (&name(a), &wa), (&name(b), &wb), &probe, measure)?;
    let path = common.out_dir()?.join("similarity.csv");
    write_similarity_csv(&path, &m)?;
    for row in &m.values {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.4}")).collect();
        println!("{}", cells.join(" "));
    }
    println!(
        "diagonal {:?} -> {}",
        m.diagonal().iter().map(|v| (v * 1e4).round() / 1e4).collect::<Vec<_>>(),
        path.display()
    );
    Ok(())
}
