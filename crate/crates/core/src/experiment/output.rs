//! Files written by a run. Formats (all CSV files have a header row):
//!
//! * `metrics.csv`: `round,global_acc,fairness,lr,sampled,aggregated,failed,
//!   mean_loss,weights_crc,group1_acc,...`. Round 0 is the initial model;
//!   round `t` is the aggregate after `t` rounds. Empty cells mean "not
//!   evaluated" or "not applicable".
//! * `clients.csv`: `round,client,trainer,samples,groups,skipped_prefix,
//!   final_loss,peak_mb,backward_passes,error`.
//! * `memcost.csv`: `block,params_mb,activations_mb,grads_mb,optimizer_mb,
//!   total_mb,unit_mb,ratio`, rows for blocks `1..B`, `head` and `full`;
//!   `head` is the whole-model total minus the blocks, so it also carries
//!   the input buffer and head-input activation.
//! * `similarity.csv`: `block_a,block_b,value`.
//! * `plan.txt`, `shards.json`, `label_distribution.csv`, `config.toml`,
//!   `summary.json`, and checkpoints under `checkpoints/`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{RunSummary, Setup};
use crate::analysis::{EvalReport, SimilarityMatrix};
use crate::error::{Error, Result};
use crate::federation::{Federation, RoundRecord};
use crate::memory::{estimate_block_cost, estimate_training_unit_cost, full_model_cost, CostModel, MemoryCost};
use crate::nn::graph::BlockGraph;
use crate::nn::weights::ModelWeights;
use crate::partition::{save_shards, write_label_csv};

/// Version of the CSV and JSON layouts above.
pub const METRICS_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
    pub metrics: PathBuf,
    pub clients: PathBuf,
    pub plan: PathBuf,
    pub memcost: PathBuf,
    pub shards: PathBuf,
    pub labels: PathBuf,
    pub config: PathBuf,
    pub summary: PathBuf,
    pub checkpoints: PathBuf,
    pub latest: PathBuf,
    pub final_weights: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        let checkpoints = dir.join("checkpoints");
        RunPaths {
            dir: dir.to_path_buf(),
            metrics: dir.join("metrics.csv"),
            clients: dir.join("clients.csv"),
            plan: dir.join("plan.txt"),
            memcost: dir.join("memcost.csv"),
            shards: dir.join("shards.json"),
            labels: dir.join("label_distribution.csv"),
            config: dir.join("config.toml"),
            summary: dir.join("summary.json"),
            latest: checkpoints.join("latest.bin"),
            final_weights: dir.join("final.bin"),
            checkpoints,
        }
    }

    pub fn checkpoint(&self, round: usize) -> PathBuf {
        self.checkpoints.join(format!("round_{round:04}.bin"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MemcostRow {
    pub block: String,
    pub params_mb: f64,
    pub activations_mb: f64,
    pub grads_mb: f64,
    pub optimizer_mb: f64,
    pub total_mb: f64,
    /// Cost of training the block alone as a unit (blocks only).
    pub unit_mb: Option<f64>,
    /// Block total relative to block 1 (blocks only).
    pub ratio: Option<f64>,
}

fn row(block: String, c: &MemoryCost, unit_mb: Option<f64>, ratio: Option<f64>) -> MemcostRow {
    MemcostRow {
        block,
        params_mb: c.params_mb,
        activations_mb: c.activations_mb,
        grads_mb: c.grads_mb,
        optimizer_mb: c.optimizer_mb,
        total_mb: c.total_mb,
        unit_mb,
        ratio,
    }
}

/// Per-block memory table.
pub fn memcost_table(graph: &BlockGraph, model: &CostModel) -> Result<Vec<MemcostRow>> {
    let first = estimate_block_cost(graph, 0, model)?.total_mb;
    let mut rows = (0..graph.num_blocks())
        .map(|j| {
            let c = estimate_block_cost(graph, j, model)?;
            let unit = estimate_training_unit_cost(graph, j..j + 1, model)?.total_mb;
            Ok(row((j + 1).to_string(), &c, Some(unit), Some(c.total_mb / first)))
        })
        .collect::<Result<Vec<_>>>()?;
    let full = full_model_cost(graph, model)?;
    let body = (0..graph.num_blocks())
        .map(|j| estimate_block_cost(graph, j, model))
        .collect::<Result<Vec<_>>>()?
        .iter()
        .fold(MemoryCost::default(), |acc, c| acc.plus(c));
    let head = MemoryCost {
        params_mb: full.params_mb - body.params_mb,
        activations_mb: full.activations_mb - body.activations_mb,
        grads_mb: full.grads_mb - body.grads_mb,
        optimizer_mb: full.optimizer_mb - body.optimizer_mb,
        total_mb: full.total_mb - body.total_mb,
    };
    rows.push(row("head".into(), &head, None, None));
    rows.push(row("full".into(), &full, None, None));
    Ok(rows)
}

pub fn write_memcost_csv(path: &Path, rows: &[MemcostRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_similarity_csv(path: &Path, m: &SimilarityMatrix) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["block_a", "block_b", "value"])?;
    for (i, r) in m.values.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            w.write_record([(i + 1).to_string(), (j + 1).to_string(), format!("{v:.9}")])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One line per client: budget group, capacity, trainer and plan.
pub fn plan_table(setup: &Setup) -> String {
    let mut out = String::from("# client group trainer capacity_mb J skipped_prefix plan\n");
    for c in &setup.clients {
        out.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            c.id,
            setup.budget_group[c.id] + 1,
            c.trainer.name(),
            c.budget
                .map_or_else(|| "unlimited".to_string(), |b| format!("{:.4}", b.capacity_mb)),
            c.plan.num_groups(),
            c.plan.skipped_prefix,
            c.plan
        ));
    }
    out
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write to a sibling temporary file, then rename over `path`.
fn save_atomic(weights: &ModelWeights<f32>, path: &Path, round: usize) -> Result<()> {
    let tmp = path.with_extension("tmp");
    weights.save(&tmp, round as u64)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

fn metrics_header(levels: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "round",
        "global_acc",
        "fairness",
        "lr",
        "sampled",
        "aggregated",
        "failed",
        "mean_loss",
        "weights_crc",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=levels).map(|g| format!("group{g}_acc")));
    h
}

fn metrics_row(setup: &Setup, round: usize, rec: Option<&RoundRecord>, eval: Option<&EvalReport>) -> Vec<String> {
    let losses: Vec<f64> = rec
        .map(|r| r.clients.iter().filter_map(|c| c.final_loss).collect())
        .unwrap_or_default();
    let mut v = vec![
        round.to_string(),
        opt(eval.map(|e| e.top1)),
        opt(eval.and_then(|e| e.fairness)),
        opt(rec.map(|r| r.lr)),
        rec.map_or(0, |r| r.sampled.len()).to_string(),
        rec.map_or(0, |r| r.aggregated.len()).to_string(),
        rec.map_or(0, |r| r.sampled.len() - r.aggregated.len()).to_string(),
        opt((!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64)),
        rec.map_or_else(String::new, |r| format!("{:08x}", r.weights_crc)),
    ];
    let levels = setup.budget_group.iter().max().map_or(1, |m| m + 1);
    match eval {
        Some(e) => v.extend(setup.group_accuracy(e).into_iter().map(|a| format!("{a:.6}"))),
        None => v.extend(std::iter::repeat_n(String::new(), levels)),
    }
    v
}

fn client_rows(rec: &RoundRecord) -> Vec<Vec<String>> {
    rec.clients
        .iter()
        .map(|c| {
            vec![
                (rec.round + 1).to_string(),
                c.client.to_string(),
                c.trainer.clone(),
                c.samples.to_string(),
                c.groups.to_string(),
                c.skipped_prefix.to_string(),
                opt(c.final_loss),
                format!("{:.4}", c.peak_mb),
                c.backward_passes.to_string(),
                c.error.clone().unwrap_or_default(),
            ]
        })
        .collect()
}

/// Keep the header and rows whose leading round is at most `round`.
fn truncate_after(path: &Path, round: usize) -> Result<()> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut kept = String::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lead = line.split(',').next().and_then(|f| f.parse::<usize>().ok());
        if i == 0 || lead.is_some_and(|r| r <= round) {
            kept.push_str(&line);
            kept.push('\n');
        }
    }
    write_text(path, &kept)
}

fn appender(path: &Path) -> Result<csv::Writer<File>> {
    let f = OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(f))
}

fn fresh(path: &Path, header: &[String]) -> Result<csv::Writer<File>> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    Ok(w)
}

#[derive(Serialize)]
struct Summary<'a> {
    version: u32,
    name: &'a str,
    seed: u64,
    rounds: usize,
    resumed_from: Option<usize>,
    initial_top1: f64,
    final_top1: f64,
    final_fairness: Option<f64>,
    parallel: bool,
}

/// Run `setup` and write every artifact under `dir`. With `resume`, the run
/// continues from that checkpoint and rows after its round are dropped from
/// the CSV files before new ones are appended.
pub fn run_to_dir(setup: &Setup, dir: &Path, resume: Option<&Path>) -> Result<RunSummary> {
    let paths = RunPaths::new(dir);
    std::fs::create_dir_all(&paths.checkpoints).map_err(|e| Error::io(&paths.checkpoints, e))?;
    let cfg = &setup.config;
    write_text(&paths.config, &cfg.to_toml())?;
    write_text(&paths.plan, &plan_table(setup))?;
    write_memcost_csv(
        &paths.memcost,
        &memcost_table(&setup.graph, &setup.federation.local.cost_model())?,
    )?;
    let spec = cfg.partition.spec(cfg.experiment.seed);
    save_shards(&paths.shards, &setup.shards, setup.train.classes, Some(&spec))?;
    let labels = File::create(&paths.labels).map_err(|e| Error::io(&paths.labels, e))?;
    write_label_csv(labels, &setup.shards)?;

    let (start_weights, start_round) = match resume {
        Some(p) => {
            let (w, r) = ModelWeights::load(p)?;
            w.validate(&setup.graph)?;
            (w, r as usize)
        }
        None => (setup.initial.clone(), 0),
    };
    let mut fed = Federation::new(
        &setup.graph,
        &setup.federation,
        &setup.clients,
        &setup.test,
        start_weights,
    )?
    .resume_at(start_round)?;
    let initial = fed.evaluate()?;
    let levels = setup.budget_group.iter().max().map_or(1, |m| m + 1);
    let (mut metrics, mut clients) = if resume.is_some() && paths.metrics.exists() {
        truncate_after(&paths.metrics, start_round)?;
        if paths.clients.exists() {
            truncate_after(&paths.clients, start_round)?;
        }
        (appender(&paths.metrics)?, appender(&paths.clients)?)
    } else {
        let client_header: Vec<String> = [
            "round",
            "client",
            "trainer",
            "samples",
            "groups",
            "skipped_prefix",
            "final_loss",
            "peak_mb",
            "backward_passes",
            "error",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let mut m = fresh(&paths.metrics, &metrics_header(levels))?;
        m.write_record(metrics_row(setup, start_round, None, Some(&initial)))?;
        m.flush().map_err(|e| Error::io(&paths.metrics, e))?;
        (m, fresh(&paths.clients, &client_header)?)
    };
    let mut records = Vec::new();
    while !fed.is_done() {
        let rec = fed.step()?;
        let round = rec.round + 1;
        metrics.write_record(metrics_row(setup, round, Some(&rec), rec.eval.as_ref()))?;
        for r in client_rows(&rec) {
            clients.write_record(r)?;
        }
        metrics.flush().map_err(|e| Error::io(&paths.metrics, e))?;
        clients.flush().map_err(|e| Error::io(&paths.clients, e))?;
        let every = cfg.output.checkpoint_every;
        if every > 0 && round % every == 0 {
            save_atomic(fed.weights(), &paths.checkpoint(round), round)?;
            save_atomic(fed.weights(), &paths.latest, round)?;
        }
        records.push(rec);
    }
    let rounds = fed.next_round();
    save_atomic(fed.weights(), &paths.latest, rounds)?;
    save_atomic(fed.weights(), &paths.final_weights, rounds)?;
    let summary = RunSummary {
        initial,
        records,
        weights: fed.into_weights(),
    };
    let json = serde_json::to_string_pretty(&Summary {
        version: METRICS_VERSION,
        name: &cfg.experiment.name,
        seed: cfg.experiment.seed,
        rounds,
        resumed_from: resume.map(|_| start_round),
        initial_top1: summary.initial.top1,
        final_top1: summary.final_top1(),
        final_fairness: summary.final_fairness(),
        parallel: crate::parallel::is_parallel(),
    })?;
    let mut f = File::create(&paths.summary).map_err(|e| Error::io(&paths.summary, e))?;
    f.write_all(json.as_bytes()).map_err(|e| Error::io(&paths.summary, e))?;
    Ok(summary)
}
