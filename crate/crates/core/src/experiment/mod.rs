//! Config-driven experiments: data, shards, budgets, plans and the
//! federation loop, plus the files a run leaves behind.

mod config;
mod output;

pub use config::{
    BudgetMode, BudgetSection, DataKind, DataSection, ExperimentConfig, ExperimentSection, FamilyName,
    FederationSection, LocalSection, ModelKind, ModelSection, OutputSection, PartitionSection, TrainerName,
    TrainerSection,
};
pub use output::{
    memcost_table, plan_table, run_to_dir, write_memcost_csv, write_similarity_csv, MemcostRow, RunPaths,
    METRICS_VERSION,
};

use rand::seq::SliceRandom;

use crate::analysis::EvalReport;
use crate::data::{load_idx, stratified_split, Dataset, GaussianMixture};
use crate::decomposition::{capacity_for_groups, plan_for_graph, DecompositionPlan};
use crate::error::{Error, Result};
use crate::federation::{fedavg_weights, ClientState, Federation, FederationConfig, RoundRecord, TrainerKind};
use crate::memory::{estimate_training_unit_cost, full_model_cost, CostModel, MemoryBudget};
use crate::nn::graph::{width_scale, BlockGraph};
use crate::nn::weights::ModelWeights;
use crate::parallel::*;
use crate::partition::{load_shards, partition, Shard};
use crate::rng::{rng_for, tag};

/// Everything a run needs, built from a config.
#[derive(Clone, Debug)]
pub struct Setup {
    pub config: ExperimentConfig,
    pub graph: BlockGraph,
    /// Training samples after the hold-out; shard indices point here.
    pub train: Dataset<f32>,
    pub test: Dataset<f32>,
    pub shards: Vec<Shard>,
    /// Budget group of every client.
    pub budget_group: Vec<usize>,
    pub clients: Vec<ClientState<f32>>,
    pub federation: FederationConfig,
    pub initial: ModelWeights<f32>,
}

/// Training and test splits named by the config.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset<f32>, Dataset<f32>)> {
    let d = &cfg.data;
    let (train, test) = match d.kind {
        DataKind::Synthetic => GaussianMixture {
            classes: d.classes,
            dim: d.dim,
            clusters_per_class: d.clusters_per_class,
            separation: d.separation,
        }
        .generate(d.train, d.test, cfg.experiment.seed)?,
        DataKind::Idx => load_idx(d.path.as_deref().expect("validated"), d.limit)?,
    };
    if train.classes > d.classes {
        return Err(Error::config(
            "data.classes",
            format!("dataset has {} classes, config says {}", train.classes, d.classes),
        ));
    }
    if d.holdout == 0.0 {
        return Ok((train, test));
    }
    let (kept, _) = stratified_split(&train.labels, train.classes, d.holdout, cfg.experiment.seed)?;
    Ok((train.subset(&kept)?, test))
}

/// The global model for samples of `input` dimensions.
pub fn build_graph(cfg: &ExperimentConfig, input: &[usize]) -> Result<BlockGraph> {
    let m = &cfg.model;
    let classes = cfg.data.classes;
    let graph = match (m.kind, input) {
        (ModelKind::Mlp, &[dim]) => BlockGraph::mlp(dim, m.width, m.blocks, classes)?,
        (ModelKind::Preresnet, &[c, h, w]) => BlockGraph::preresnet(&m.widths, m.per_stage, [c, h, w], classes)?,
        (ModelKind::Mlp, _) => {
            return Err(Error::config(
                "model.kind",
                "the MLP takes flat samples; use preresnet for images",
            ))
        }
        (ModelKind::Preresnet, _) => {
            return Err(Error::config(
                "model.kind",
                "preresnet takes [c, h, w] samples; use mlp for vectors",
            ))
        }
    };
    if m.width_ratio < 1.0 {
        width_scale(&graph, m.width_ratio)
    } else {
        Ok(graph)
    }
}

/// Budget group of each of `clients`: equal contiguous ranges, earlier
/// groups taking the remainder.
pub fn budget_groups(clients: usize, levels: usize) -> Vec<usize> {
    let levels = levels.max(1);
    let base = clients / levels;
    let extra = clients % levels;
    (0..levels)
        .flat_map(|g| std::iter::repeat_n(g, base + usize::from(g < extra)))
        .collect()
}

/// Budget of each level, or `None` when unconstrained.
pub fn level_budgets(
    cfg: &ExperimentConfig,
    graph: &BlockGraph,
    model: &CostModel,
) -> Result<Vec<Option<MemoryBudget>>> {
    let b = &cfg.budget;
    match b.mode {
        BudgetMode::Unconstrained => Ok(vec![None]),
        BudgetMode::Ratios => b
            .effective_ratios()
            .iter()
            .map(|&r| {
                let budget = MemoryBudget::for_ratio(graph, r, model)?;
                Ok(Some(match b.scenario {
                    Some(s) => budget.with_scenario(s),
                    None => budget,
                }))
            })
            .collect(),
        BudgetMode::Capacity => b.capacity_mb.iter().map(|&c| MemoryBudget::new(c).map(Some)).collect(),
        BudgetMode::Groups => b
            .groups
            .iter()
            .map(|&j| {
                let cost = |r| Ok(estimate_training_unit_cost(graph, r, model)?.total_mb);
                match capacity_for_groups(graph.num_blocks(), j, cost)? {
                    Some(c) => Ok(Some(MemoryBudget::new(c)?)),
                    None => Err(Error::config(
                        "budget.groups",
                        format!("no capacity yields exactly {j} groups for this model"),
                    )),
                }
            })
            .collect(),
    }
}

/// Drop block 1 from a plan, leaving it at its global values.
fn skip_first_block(plan: &DecompositionPlan) -> Result<DecompositionPlan> {
    if plan.skipped_prefix > 0 {
        return Ok(plan.clone());
    }
    let mut groups = plan.groups.clone();
    groups[0].start = 1;
    if groups[0].is_empty() {
        groups.remove(0);
    }
    if groups.is_empty() {
        return Err(Error::config(
            "budget.skip_first_fraction",
            "the model has a single block",
        ));
    }
    Ok(DecompositionPlan {
        skipped_prefix: 1,
        groups,
    })
}

/// Build the run described by `cfg`.
pub fn setup(cfg: &ExperimentConfig) -> Result<Setup> {
    cfg.validate()?;
    let seed = cfg.experiment.seed;
    let (train, test) = load_data(cfg)?;
    let graph = build_graph(cfg, train.sample_shape().dims())?;
    let shards = match &cfg.partition.import {
        Some(path) => {
            let s = load_shards(path, &train.labels)?;
            if s.len() != cfg.partition.clients {
                return Err(Error::config(
                    "partition.import",
                    format!("file has {} shards, config expects {}", s.len(), cfg.partition.clients),
                ));
            }
            s
        }
        None => partition(&train.labels, train.classes, &cfg.partition.spec(seed))?,
    };
    if let Some(s) = shards.iter().find(|s| s.is_empty()) {
        return Err(Error::config(
            "partition",
            format!(
                "client {} received no samples; use fewer clients or more data",
                s.client
            ),
        ));
    }
    let local = cfg.local.client_config();
    let model = local.cost_model();
    let budgets = level_budgets(cfg, &graph, &model)?;
    let budget_group = budget_groups(shards.len(), budgets.len());
    let k = shards.len();
    let mut skip = vec![false; k];
    let n_skip = (cfg.budget.skip_first_fraction * k as f64).round() as usize;
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut rng_for(seed, &[tag::BUDGET]));
    for &i in &order[..n_skip] {
        skip[i] = true;
    }
    let full_unit = full_model_cost(&graph, &model)?.total_mb;
    let weights = fedavg_weights(&shards.iter().map(Shard::len).collect::<Vec<_>>());
    let mut clients = Vec::with_capacity(k);
    for (id, shard) in shards.iter().enumerate() {
        let budget = budgets[budget_group[id]];
        let mut plan = match budget {
            Some(b) => plan_for_graph(&graph, &b, &model)?,
            None => DecompositionPlan::whole(graph.num_blocks()),
        };
        if skip[id] {
            plan = skip_first_block(&plan)?;
        }
        let trainer = match cfg.trainer.kind {
            TrainerName::Baseline => {
                plan = DecompositionPlan::whole(graph.num_blocks());
                TrainerKind::Baseline
            }
            TrainerName::Mkd
                if plan.skipped_prefix == 0
                    && budget.is_none_or(|b| b.capacity_mb >= cfg.trainer.mkd.students as f64 * full_unit) =>
            {
                TrainerKind::Mkd(cfg.trainer.mkd.clone())
            }
            _ if plan.skipped_prefix > 0 => {
                if cfg.trainer.kind == TrainerName::Fedepth && !skip[id] {
                    return Err(Error::config(
                        "trainer.kind",
                        format!("client {id}'s budget cannot train block 1; use fedepth-partial"),
                    ));
                }
                TrainerKind::FedepthPartial
            }
            _ => TrainerKind::Fedepth,
        };
        clients.push(ClientState {
            id,
            data: train.subset(&shard.indices)?,
            weight: weights[id],
            budget,
            plan,
            trainer,
        });
    }
    let federation = FederationConfig {
        clients: k,
        participation: cfg.federation.participation,
        rounds: cfg.federation.rounds,
        seed,
        local,
        cosine_lr: cfg.federation.cosine_lr,
        failure: cfg.federation.failure,
        eval_every: cfg.federation.eval_every,
    };
    let initial = ModelWeights::init(&graph, &mut rng_for(seed, &[tag::INIT]));
    Ok(Setup {
        config: cfg.clone(),
        graph,
        train,
        test,
        shards,
        budget_group,
        clients,
        federation,
        initial,
    })
}

/// Outcome of a whole run.
#[derive(Clone, Debug)]
pub struct RunSummary {
    /// Evaluation of W^0.
    pub initial: EvalReport,
    pub records: Vec<RoundRecord>,
    pub weights: ModelWeights<f32>,
}

impl RunSummary {
    /// Top-1 of the last evaluated round.
    pub fn final_top1(&self) -> f64 {
        self.records
            .iter()
            .rev()
            .find_map(|r| r.eval.as_ref().map(|e| e.top1))
            .unwrap_or(self.initial.top1)
    }

    pub fn final_fairness(&self) -> Option<f64> {
        self.records
            .iter()
            .rev()
            .find_map(|r| r.eval.as_ref().and_then(|e| e.fairness))
    }
}

impl Setup {
    /// All rounds without touching the file system.
    pub fn run(&self) -> Result<RunSummary> {
        let mut fed = Federation::new(
            &self.graph,
            &self.federation,
            &self.clients,
            &self.test,
            self.initial.clone(),
        )?;
        let initial = fed.evaluate()?;
        let mut records = Vec::with_capacity(self.federation.rounds);
        while !fed.is_done() {
            records.push(fed.step()?);
        }
        Ok(RunSummary {
            initial,
            records,
            weights: fed.into_weights(),
        })
    }

    /// Mean per-client accuracy of each budget group in `eval`.
    pub fn group_accuracy(&self, eval: &EvalReport) -> Vec<f64> {
        let levels = self.budget_group.iter().max().map_or(1, |m| m + 1);
        (0..levels)
            .map(|g| {
                let accs: Vec<f64> = (0..self.clients.len())
                    .filter(|&k| self.budget_group[k] == g)
                    .map(|k| eval.client_accuracy[k])
                    .collect();
                accs.iter().sum::<f64>() / accs.len().max(1) as f64
            })
            .collect()
    }
}

/// One in-memory run per seed, in parallel; results keep the seed order.
pub fn sweep(cfg: &ExperimentConfig, seeds: &[u64]) -> Vec<Result<RunSummary>> {
    seeds
        .par_iter()
        .map(|&s| {
            let mut c = cfg.clone();
            c.experiment.seed = s;
            setup(&c)?.run()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.train = 400;
        cfg.data.test = 200;
        cfg.partition.clients = 8;
        cfg.federation.rounds = 2;
        cfg
    }

    #[test]
    fn budget_groups_are_contiguous() {
        assert_eq!(budget_groups(6, 4), vec![0, 0, 1, 1, 2, 3]);
        assert_eq!(budget_groups(3, 1), vec![0, 0, 0]);
    }

    #[test]
    fn group_budgets_force_plan_sizes() {
        let mut cfg = small();
        cfg.budget.mode = BudgetMode::Groups;
        let s = setup(&cfg).unwrap();
        let j: Vec<usize> = s.clients.iter().map(|c| c.plan.num_groups()).collect();
        assert_eq!(j, vec![1, 1, 2, 2, 3, 3, 4, 4]);
        assert!(s.clients.iter().all(|c| c.trainer == TrainerKind::Fedepth));
    }

    #[test]
    fn skip_fraction_marks_partial_clients() {
        let mut cfg = small();
        cfg.budget.mode = BudgetMode::Groups;
        cfg.budget.skip_first_fraction = 0.25;
        let s = setup(&cfg).unwrap();
        let partial: Vec<&ClientState<f32>> = s
            .clients
            .iter()
            .filter(|c| c.trainer == TrainerKind::FedepthPartial)
            .collect();
        assert_eq!(partial.len(), 2);
        assert!(partial.iter().all(|c| c.plan.skipped_prefix == 1));
    }

    #[test]
    fn mkd_goes_to_clients_with_surplus() {
        let mut cfg = small();
        cfg.budget.mode = BudgetMode::Capacity;
        let s = setup(&cfg).unwrap_err();
        assert!(matches!(s, Error::Config { .. }));
        let full = full_model_cost(&setup(&small()).unwrap().graph, &cfg.local.client_config().cost_model())
            .unwrap()
            .total_mb;
        cfg.budget.capacity_mb = vec![full, 2.0 * full];
        cfg.trainer.kind = TrainerName::Mkd;
        let s = setup(&cfg).unwrap();
        let kinds: Vec<&str> = s.clients.iter().map(|c| c.trainer.name()).collect();
        assert_eq!(
            kinds,
            vec!["fedepth"; 4].into_iter().chain(vec!["mkd"; 4]).collect::<Vec<_>>()
        );
    }

    #[test]
    fn runs_are_deterministic() {
        let cfg = small();
        let a = setup(&cfg).unwrap().run().unwrap();
        let b = setup(&cfg).unwrap().run().unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.records, b.records);
        let swept = sweep(&cfg, &[cfg.experiment.seed]);
        assert_eq!(swept[0].as_ref().unwrap().weights, a.weights);
    }
}
