//! Client-side training: depth-wise sequential learning, partial training,
//! mutual knowledge distillation, the plain baseline and depth-wise
//! inference with disk spill.

mod inference;
mod local;

pub use inference::{depthwise_inference, FileSpill, MemorySpill, SpillStats, SpillStore, SPILL_MAGIC, SPILL_VERSION};
pub use local::{baseline_update, client_update, mkd_update};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{CostModel, MemoryBudget};
use crate::nn::optim::SgdConfig;
use crate::nn::weights::ModelWeights;
use crate::rng::rng_for;

/// How a group's output reaches a classifier during its training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadStrategy {
    /// Zero-pad the group output to the shared head's input shape.
    #[default]
    SkipConnection,
    /// Train a fresh per-group head, discarded afterwards; the shared head is
    /// trained only with the last group.
    AuxiliaryClassifier,
}

/// How the local update budget is shared among groups.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleMode {
    /// `epochs · ceil(n / batch)` minibatch steps in total, split as evenly as
    /// possible across groups with the remainder going to later groups.
    #[default]
    SplitSteps,
    /// Every group trains for the full number of epochs.
    FullPerGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdateConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub head: HeadStrategy,
    pub buffer_activations: bool,
    pub schedule: ScheduleMode,
    pub sgd: SgdConfig,
    /// Seed of the client's shuffling and auxiliary-head streams.
    pub seed: u64,
    /// When set, every training unit is checked against it and activation
    /// buffers are only kept if they fit alongside the unit.
    pub budget: Option<MemoryBudget>,
}

impl Default for ClientUpdateConfig {
    fn default() -> Self {
        ClientUpdateConfig {
            epochs: 1,
            batch_size: 32,
            head: HeadStrategy::SkipConnection,
            buffer_activations: false,
            schedule: ScheduleMode::SplitSteps,
            sgd: SgdConfig::default(),
            seed: 0,
            budget: None,
        }
    }
}

impl ClientUpdateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        self.sgd.validate()
    }

    /// Cost model matching this configuration's batch and optimizer.
    pub fn cost_model(&self) -> CostModel {
        CostModel {
            batch: self.batch_size,
            bytes_per_element: 4,
            momentum: self.sgd.momentum > 0.0,
        }
    }
}

/// Initial state of the co-trained students beyond student 0, which always
/// starts from the received global model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StudentInit {
    Identical,
    /// Global weights plus `N(0, scale²)` noise.
    Perturbed {
        scale: f64,
    },
    /// A freshly initialized model.
    Fresh,
}

/// Local training mode of one student.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StudentMode {
    #[default]
    Plain,
    /// Train with the client's decomposition plan.
    DepthWise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MkdConfig {
    /// Number of students M.
    pub students: usize,
    /// Weight of the mutual KL term.
    pub weight: f64,
    /// Index of the student whose weights are returned.
    pub upload: usize,
    pub init: StudentInit,
    /// Per-student mode; missing entries default to plain training.
    pub modes: Vec<StudentMode>,
}

impl Default for MkdConfig {
    fn default() -> Self {
        MkdConfig {
            students: 2,
            weight: 1.0,
            upload: 0,
            init: StudentInit::Perturbed { scale: 0.01 },
            modes: Vec::new(),
        }
    }
}

impl MkdConfig {
    pub fn validate(&self) -> Result<()> {
        if self.students == 0 {
            return Err(Error::usage("MKD needs at least one student"));
        }
        if self.upload >= self.students {
            return Err(Error::usage(format!(
                "upload index {} out of range for {} students",
                self.upload, self.students
            )));
        }
        if !(self.weight.is_finite() && self.weight >= 0.0) {
            return Err(Error::config("mkd.weight", "must be non-negative"));
        }
        if let StudentInit::Perturbed { scale } = self.init {
            if !(scale.is_finite() && scale >= 0.0) {
                return Err(Error::config("mkd.init.scale", "must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn mode(&self, m: usize) -> StudentMode {
        self.modes.get(m).copied().unwrap_or_default()
    }
}

/// Mean loss over the steps of one epoch within one group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based group index.
    pub group: usize,
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub lr: f64,
    pub peak_mb: f64,
}

/// One trained group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupLog {
    pub group: usize,
    /// 1-based block numbers.
    pub blocks: Vec<usize>,
    pub steps: usize,
    pub buffered: bool,
    /// Fingerprints of the shared head before and after the group.
    pub head_in: u32,
    pub head_out: u32,
    pub unit_mb: f64,
}

/// What a local update did, for logs and invariant checks.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientReport {
    pub epochs: Vec<EpochLog>,
    pub groups: Vec<GroupLog>,
    /// Minibatch gradient evaluations.
    pub backward_passes: usize,
    /// Body parameter elements that received a gradient, summed over steps.
    pub body_param_visits: usize,
    pub head_param_visits: usize,
    /// Largest tracked allocation under the memory model.
    pub peak_mb: f64,
    /// Epoch means of the mutual KL between students (empty for M = 1).
    pub kl_by_epoch: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ClientOutput<T> {
    pub weights: ModelWeights<T>,
    pub report: ClientReport,
}

/// Steps per epoch and the ordered minibatches of epoch `epoch`.
pub(crate) struct BatchSchedule {
    n: usize,
    batch: usize,
    seed: u64,
}

impl BatchSchedule {
    pub(crate) fn new(n: usize, batch: usize, seed: u64) -> Self {
        BatchSchedule { n, batch, seed }
    }

    pub(crate) fn per_epoch(&self) -> usize {
        self.n.div_ceil(self.batch)
    }

    /// Indices of minibatch `b` in epoch `epoch`.
    pub(crate) fn batches(&self, epoch: usize) -> Vec<Vec<usize>> {
        use rand::seq::SliceRandom;
        let mut perm: Vec<usize> = (0..self.n).collect();
        perm.shuffle(&mut rng_for(self.seed, &[crate::rng::tag::SHUFFLE, epoch as u64]));
        perm.chunks(self.batch).map(<[usize]>::to_vec).collect()
    }
}

/// Split `total` steps across `groups`, remainder to the later groups.
pub fn split_steps(total: usize, groups: usize) -> Vec<usize> {
    let base = total / groups;
    let rem = total % groups;
    (0..groups).map(|j| base + usize::from(j >= groups - rem)).collect()
}

/// CRC32 fingerprint of a parameter list, for head-continuity audits.
pub fn fingerprint<T: crate::nn::tensor::Scalar>(tensors: &[crate::nn::tensor::Tensor<T>]) -> u32 {
    let mut h = crc32fast::Hasher::new();
    let mut buf = Vec::new();
    for t in tensors {
        buf.clear();
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        h.update(&buf);
    }
    h.finalize()
}
