//! Server loop: client sampling, broadcast, parallel local updates and
//! weighted aggregation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{evaluate, EvalReport};
use crate::data::Dataset;
use crate::decomposition::DecompositionPlan;
use crate::error::{Error, Result};
use crate::memory::MemoryBudget;
use crate::nn::graph::BlockGraph;
use crate::nn::optim::cosine_lr;
use crate::nn::tensor::{Scalar, Tensor};
use crate::nn::weights::ModelWeights;
use crate::parallel::*;
use crate::rng::{derive_seed, rng_for, tag};
use crate::trainer::{
    baseline_update, client_update, fingerprint, mkd_update, ClientOutput, ClientUpdateConfig, MkdConfig,
};

/// Local training procedure of a client.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TrainerKind {
    /// Depth-wise sequential training; the plan must not skip blocks.
    Fedepth,
    /// Depth-wise training that may leave a prefix at its global values.
    FedepthPartial,
    Mkd(MkdConfig),
    /// Plain whole-model local SGD.
    Baseline,
}

impl TrainerKind {
    pub fn name(&self) -> &'static str {
        match self {
            TrainerKind::Fedepth => "fedepth",
            TrainerKind::FedepthPartial => "fedepth-partial",
            TrainerKind::Mkd(_) => "mkd",
            TrainerKind::Baseline => "baseline",
        }
    }
}

/// Behaviour when a sampled client's update fails.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureMode {
    /// Abort the round with the first failure in client order.
    #[default]
    Strict,
    /// Leave failed clients out of the aggregate.
    DropTolerant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    /// K.
    pub clients: usize,
    /// γ in (0, 1].
    pub participation: f64,
    /// R.
    pub rounds: usize,
    pub seed: u64,
    /// Template for every local update; the seed and budget are set per
    /// client and round.
    pub local: ClientUpdateConfig,
    /// Anneal the local learning rate over rounds with a cosine schedule.
    pub cosine_lr: bool,
    pub failure: FailureMode,
    /// Evaluate every this many rounds (and always after the last).
    pub eval_every: usize,
}

impl Default for FederationConfig {
    fn default() -> Self {
        FederationConfig {
            clients: 1,
            participation: 1.0,
            rounds: 1,
            seed: 0,
            local: ClientUpdateConfig::default(),
            cosine_lr: false,
            failure: FailureMode::Strict,
            eval_every: 1,
        }
    }
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::config("federation.clients", "must be at least 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(Error::config("federation.participation", "must lie in (0, 1]"));
        }
        if self.rounds == 0 {
            return Err(Error::config("federation.rounds", "must be at least 1"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("federation.eval_every", "must be at least 1"));
        }
        self.local.validate()
    }

    /// Local learning rate in round `t`.
    pub fn lr_at(&self, t: usize) -> f64 {
        if self.cosine_lr {
            cosine_lr(self.local.sgd.lr, t, self.rounds)
        } else {
            self.local.sgd.lr
        }
    }
}

/// One participant: its shard, aggregation weight p_k, budget and plan.
#[derive(Clone, Debug)]
pub struct ClientState<T> {
    pub id: usize,
    pub data: Dataset<T>,
    pub weight: f64,
    pub budget: Option<MemoryBudget>,
    pub plan: DecompositionPlan,
    pub trainer: TrainerKind,
}

/// `p_k = n_k / Σ n`.
pub fn fedavg_weights(sizes: &[usize]) -> Vec<f64> {
    let total: usize = sizes.iter().sum();
    sizes.iter().map(|&n| n as f64 / total as f64).collect()
}

/// |S^t| = ⌈γK⌉. The small offset keeps products such as 0.1 × 100 from
/// rounding up to 11.
pub fn sample_size(clients: usize, participation: f64) -> usize {
    ((participation * clients as f64 - 1e-9).ceil() as usize).clamp(1, clients)
}

/// Uniform sample without replacement, returned in ascending order.
pub fn sample_clients<R: Rng + ?Sized>(clients: usize, participation: f64, rng: &mut R) -> Vec<usize> {
    let m = sample_size(clients, participation);
    let mut ids = rand::seq::index::sample(rng, clients, m).into_vec();
    ids.sort_unstable();
    ids
}

/// `p_k / Σ p` over the given clients.
pub fn normalized_coefficients(weights: &[f64]) -> Result<Vec<f64>> {
    if weights.is_empty() {
        return Err(Error::usage("nothing to aggregate"));
    }
    if weights.iter().any(|&p| !(p.is_finite() && p > 0.0)) {
        return Err(Error::usage("aggregation weights must be positive"));
    }
    let total: f64 = weights.iter().sum();
    Ok(weights.iter().map(|p| p / total).collect())
}

/// Weighted average `Σ_k (p_k / Σ p) W_k`, accumulated in f64 in client
/// order. Each element is clamped to the range of its inputs so rounding
/// never leaves the convex hull.
pub fn aggregate<T: Scalar>(updates: &[&ModelWeights<T>], weights: &[f64]) -> Result<ModelWeights<T>> {
    if updates.len() != weights.len() {
        return Err(Error::usage(format!(
            "{} updates but {} weights",
            updates.len(),
            weights.len()
        )));
    }
    let coef = normalized_coefficients(weights)?;
    let first = updates[0];
    if let Some(k) = updates.iter().position(|u| !u.same_layout(first)) {
        return Err(Error::structure(format!("update {k} differs in shape from update 0")));
    }
    let mix = |pick: &dyn Fn(&ModelWeights<T>) -> &Tensor<T>| -> Tensor<T> {
        let base = pick(first);
        let data = (0..base.len())
            .map(|e| {
                let (mut acc, mut lo, mut hi) = (0.0f64, f64::INFINITY, f64::NEG_INFINITY);
                for (u, c) in updates.iter().zip(&coef) {
                    let v = pick(u).data()[e].f64();
                    acc += c * v;
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                T::of(acc.clamp(lo, hi))
            })
            .collect();
        Tensor::from_vec(base.shape().clone(), data).expect("shape taken from an input")
    };
    Ok(ModelWeights {
        body: (0..first.body.len())
            .map(|j| (0..first.body[j].len()).map(|i| mix(&|w| &w.body[j][i])).collect())
            .collect(),
        head: (0..first.head.len()).map(|i| mix(&|w| &w.head[i])).collect(),
    })
}

/// What one sampled client did in a round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientRound {
    pub client: usize,
    pub samples: usize,
    pub trainer: String,
    pub groups: usize,
    pub skipped_prefix: usize,
    /// Mean loss of the last logged epoch.
    pub final_loss: Option<f64>,
    pub peak_mb: f64,
    pub backward_passes: usize,
    /// Failure message when the update was dropped.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    /// 0-based round t; the record describes W^{t+1}.
    pub round: usize,
    pub sampled: Vec<usize>,
    /// Clients whose updates entered the aggregate.
    pub aggregated: Vec<usize>,
    pub clients: Vec<ClientRound>,
    pub lr: f64,
    /// CRC32 of the aggregated parameters.
    pub weights_crc: u32,
    pub eval: Option<EvalReport>,
}

/// Resumable server state.
pub struct Federation<'a, T> {
    graph: &'a BlockGraph,
    cfg: &'a FederationConfig,
    clients: &'a [ClientState<T>],
    test: &'a Dataset<T>,
    histograms: Vec<Vec<usize>>,
    weights: ModelWeights<T>,
    next_round: usize,
}

impl<'a, T: Scalar> Federation<'a, T> {
    pub fn new(
        graph: &'a BlockGraph,
        cfg: &'a FederationConfig,
        clients: &'a [ClientState<T>],
        test: &'a Dataset<T>,
        initial: ModelWeights<T>,
    ) -> Result<Self> {
        cfg.validate()?;
        initial.validate(graph)?;
        if clients.len() != cfg.clients {
            return Err(Error::config(
                "federation.clients",
                format!("{} declared but {} client states given", cfg.clients, clients.len()),
            ));
        }
        let total: f64 = clients.iter().map(|c| c.weight).sum();
        if clients.iter().any(|c| !(c.weight > 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::usage("client weights must be positive and sum to 1"));
        }
        for (k, c) in clients.iter().enumerate() {
            if c.id != k {
                return Err(Error::usage(format!("client at position {k} has id {}", c.id)));
            }
            c.plan.validate(graph.num_blocks())?;
            if c.trainer == TrainerKind::Fedepth && c.plan.skipped_prefix > 0 {
                return Err(Error::config(
                    format!("client {k} trainer"),
                    "plan skips blocks; use fedepth-partial",
                ));
            }
        }
        Ok(Federation {
            graph,
            cfg,
            clients,
            test,
            histograms: clients.iter().map(|c| c.data.label_histogram()).collect(),
            weights: initial,
            next_round: 0,
        })
    }

    /// Continue from a checkpoint of W^{round}.
    pub fn resume_at(mut self, round: usize) -> Result<Self> {
        if round > self.cfg.rounds {
            return Err(Error::usage(format!(
                "checkpoint round {round} is beyond the configured {} rounds",
                self.cfg.rounds
            )));
        }
        self.next_round = round;
        Ok(self)
    }

    pub fn weights(&self) -> &ModelWeights<T> {
        &self.weights
    }

    pub fn into_weights(self) -> ModelWeights<T> {
        self.weights
    }

    pub fn next_round(&self) -> usize {
        self.next_round
    }

    pub fn is_done(&self) -> bool {
        self.next_round >= self.cfg.rounds
    }

    /// Evaluation of the current global model.
    pub fn evaluate(&self) -> Result<EvalReport> {
        evaluate(self.graph, &self.weights, self.test, &self.histograms, self.next_round)
    }

    fn local_update(&self, id: usize, round: usize, lr: f64) -> Result<ClientOutput<T>> {
        let c = &self.clients[id];
        let mut cfg = self.cfg.local.clone();
        cfg.seed = derive_seed(self.cfg.seed, &[tag::CLIENT, round as u64, id as u64]);
        cfg.budget = c.budget;
        cfg.sgd.lr = lr;
        match &c.trainer {
            TrainerKind::Fedepth | TrainerKind::FedepthPartial => {
                client_update(self.graph, &self.weights, &c.plan, &c.data, &cfg)
            }
            TrainerKind::Mkd(mkd) => mkd_update(self.graph, &self.weights, &c.plan, &c.data, &cfg, mkd),
            TrainerKind::Baseline => baseline_update(self.graph, &self.weights, &c.data, &cfg),
        }
    }

    /// Run one round and replace the global model with the aggregate.
    pub fn step(&mut self) -> Result<RoundRecord> {
        let t = self.next_round;
        if self.is_done() {
            return Err(Error::usage("all rounds have run"));
        }
        let sampled = sample_clients(
            self.cfg.clients,
            self.cfg.participation,
            &mut rng_for(self.cfg.seed, &[tag::SAMPLE, t as u64]),
        );
        let lr = self.cfg.lr_at(t);
        let outcomes: Vec<Result<ClientOutput<T>>> =
            sampled.par_iter().map(|&id| self.local_update(id, t, lr)).collect();
        let mut clients = Vec::with_capacity(sampled.len());
        let mut kept = Vec::new();
        for (&id, outcome) in sampled.iter().zip(outcomes) {
            let c = &self.clients[id];
            let mut row = ClientRound {
                client: id,
                samples: c.data.len(),
                trainer: c.trainer.name().to_string(),
                groups: c.plan.num_groups(),
                skipped_prefix: c.plan.skipped_prefix,
                final_loss: None,
                peak_mb: 0.0,
                backward_passes: 0,
                error: None,
            };
            match outcome {
                Ok(out) => {
                    row.final_loss = out.report.epochs.last().map(|e| e.loss);
                    row.peak_mb = out.report.peak_mb;
                    row.backward_passes = out.report.backward_passes;
                    kept.push((id, out.weights));
                }
                Err(e) if self.cfg.failure == FailureMode::DropTolerant => row.error = Some(e.to_string()),
                Err(e) => return Err(e),
            }
            clients.push(row);
        }
        if kept.is_empty() {
            return Err(Error::usage(format!("every sampled client failed in round {t}")));
        }
        let updates: Vec<&ModelWeights<T>> = kept.iter().map(|(_, w)| w).collect();
        let p: Vec<f64> = kept.iter().map(|(id, _)| self.clients[*id].weight).collect();
        self.weights = aggregate(&updates, &p)?;
        self.next_round += 1;
        let eval = if self.next_round % self.cfg.eval_every == 0 || self.is_done() {
            Some(self.evaluate()?)
        } else {
            None
        };
        Ok(RoundRecord {
            round: t,
            sampled,
            aggregated: kept.iter().map(|(id, _)| *id).collect(),
            clients,
            lr,
            weights_crc: fingerprint(&self.weights.tensors().cloned().collect::<Vec<_>>()),
            eval,
        })
    }
}

/// All rounds from W^0; returns W^R and one record per round.
pub fn run<T: Scalar>(
    graph: &BlockGraph,
    cfg: &FederationConfig,
    clients: &[ClientState<T>],
    initial: ModelWeights<T>,
    test: &Dataset<T>,
) -> Result<(ModelWeights<T>, Vec<RoundRecord>)> {
    let mut fed = Federation::new(graph, cfg, clients, test, initial)?;
    let mut records = Vec::with_capacity(cfg.rounds);
    while !fed.is_done() {
        records.push(fed.step()?);
    }
    Ok((fed.into_weights(), records))
}
