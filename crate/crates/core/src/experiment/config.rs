//! Experiment configuration file.
//!
//! A TOML document with the sections below; every key has a default, so an
//! empty file describes a small synthetic run. `--override a.b=v` sets a
//! dotted key before validation, with `v` parsed as a TOML value (bare
//! words fall back to strings).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::FailureMode;
use crate::memory::Scenario;
use crate::nn::optim::SgdConfig;
use crate::partition::{Family, PartitionSpec};
use crate::trainer::{ClientUpdateConfig, HeadStrategy, MkdConfig, ScheduleMode};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub partition: PartitionSection,
    pub federation: FederationSection,
    pub local: LocalSection,
    pub budget: BudgetSection,
    pub trainer: TrainerSection,
    pub output: OutputSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub name: String,
    pub seed: u64,
}

impl Default for ExperimentSection {
    fn default() -> Self {
        ExperimentSection {
            name: "fedepth".into(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataKind {
    /// Gaussian mixture generated from the seed.
    Synthetic,
    /// MNIST-format IDX files in `path`.
    Idx,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub kind: DataKind,
    pub classes: usize,
    pub dim: usize,
    pub clusters_per_class: usize,
    pub separation: f64,
    pub train: usize,
    pub test: usize,
    pub path: Option<PathBuf>,
    /// Cap on samples per split for IDX data.
    pub limit: Option<usize>,
    /// Fraction of the training set held out before partitioning.
    pub holdout: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            kind: DataKind::Synthetic,
            classes: 4,
            dim: 8,
            clusters_per_class: 3,
            separation: 4.0,
            train: 4000,
            test: 2000,
            path: None,
            limit: None,
            holdout: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mlp,
    Preresnet,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    /// Hidden width of the MLP.
    pub width: usize,
    /// Number of MLP blocks.
    pub blocks: usize,
    /// Stage widths of the PreResNet.
    pub widths: Vec<usize>,
    pub per_stage: usize,
    /// Width multiplier applied to the whole global model.
    pub width_ratio: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Mlp,
            width: 48,
            blocks: 4,
            widths: vec![16, 32, 64],
            per_stage: 3,
            width_ratio: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyName {
    DirichletBalanced,
    DirichletUnbalanced,
    Pathological,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub family: FamilyName,
    pub lambda: f64,
    pub labels_per_client: usize,
    pub clients: usize,
    /// Load shards from this export instead of sampling them.
    pub import: Option<PathBuf>,
}

impl Default for PartitionSection {
    fn default() -> Self {
        PartitionSection {
            family: FamilyName::DirichletBalanced,
            lambda: 1.0,
            labels_per_client: 2,
            clients: 20,
            import: None,
        }
    }
}

impl PartitionSection {
    pub fn spec(&self, seed: u64) -> PartitionSpec {
        let family = match self.family {
            FamilyName::DirichletBalanced => Family::DirichletBalanced { lambda: self.lambda },
            FamilyName::DirichletUnbalanced => Family::DirichletUnbalanced { lambda: self.lambda },
            FamilyName::Pathological => Family::Pathological {
                labels_per_client: self.labels_per_client,
            },
        };
        PartitionSpec {
            family,
            clients: self.clients,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FederationSection {
    pub participation: f64,
    pub rounds: usize,
    pub cosine_lr: bool,
    pub failure: FailureMode,
    pub eval_every: usize,
}

impl Default for FederationSection {
    fn default() -> Self {
        FederationSection {
            participation: 0.5,
            rounds: 50,
            cosine_lr: true,
            failure: FailureMode::Strict,
            eval_every: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub head: HeadStrategy,
    pub schedule: ScheduleMode,
    pub buffer_activations: bool,
}

impl Default for LocalSection {
    fn default() -> Self {
        LocalSection {
            epochs: 2,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            head: HeadStrategy::SkipConnection,
            schedule: ScheduleMode::SplitSteps,
            buffer_activations: false,
        }
    }
}

impl LocalSection {
    pub fn client_config(&self) -> ClientUpdateConfig {
        ClientUpdateConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            head: self.head,
            buffer_activations: self.buffer_activations,
            schedule: self.schedule,
            sgd: SgdConfig {
                lr: self.lr,
                momentum: self.momentum,
                weight_decay: self.weight_decay,
            },
            seed: 0,
            budget: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetMode {
    /// No memory limit; every client trains the whole model as one group.
    Unconstrained,
    /// Capacity of whole-model training at each group's width ratio.
    Ratios,
    /// Capacity chosen so the greedy plan has the requested group count.
    Groups,
    /// Explicit capacities in MB.
    Capacity,
}

/// Clients are split into equal contiguous budget groups, one per entry of
/// the active list (`ratios`, `groups` or `capacity_mb`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    pub mode: BudgetMode,
    /// Overrides `ratios` when set.
    pub scenario: Option<Scenario>,
    pub ratios: Vec<f64>,
    pub groups: Vec<usize>,
    pub capacity_mb: Vec<f64>,
    /// Fraction of clients (chosen by seed) whose plan leaves block 1 at its
    /// global values.
    pub skip_first_fraction: f64,
}

impl Default for BudgetSection {
    fn default() -> Self {
        BudgetSection {
            mode: BudgetMode::Unconstrained,
            scenario: None,
            ratios: Scenario::Fair.ratios().to_vec(),
            groups: vec![1, 2, 3, 4],
            capacity_mb: Vec::new(),
            skip_first_fraction: 0.0,
        }
    }
}

impl BudgetSection {
    pub fn effective_ratios(&self) -> Vec<f64> {
        self.scenario
            .map_or_else(|| self.ratios.clone(), |s| s.ratios().to_vec())
    }

    /// Number of budget groups the clients are split into.
    pub fn levels(&self) -> usize {
        match self.mode {
            BudgetMode::Unconstrained => 1,
            BudgetMode::Ratios => self.effective_ratios().len(),
            BudgetMode::Groups => self.groups.len(),
            BudgetMode::Capacity => self.capacity_mb.len(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainerName {
    Fedepth,
    FedepthPartial,
    /// MKD for clients that can afford every student as a whole model,
    /// depth-wise training for the rest.
    Mkd,
    Baseline,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerSection {
    pub kind: TrainerName,
    pub mkd: MkdConfig,
}

impl Default for TrainerSection {
    fn default() -> Self {
        TrainerSection {
            kind: TrainerName::Fedepth,
            mkd: MkdConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Write a checkpoint every this many rounds (0 disables periodic ones).
    pub checkpoint_every: usize,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { checkpoint_every: 10 }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Set `key` (dotted) in `table` to the parsed `raw` value.
fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(key, "malformed key"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw));
    Ok(())
}

/// Name the offending key of a deserialization failure where serde tells us.
fn describe(e: toml::de::Error) -> Error {
    let msg = e.message().to_string();
    let key = msg
        .split('`')
        .nth(1)
        .filter(|_| msg.starts_with("unknown field") || msg.starts_with("missing field"))
        .unwrap_or("config")
        .to_string();
    Error::config(key, msg)
}

impl ExperimentConfig {
    /// Parse TOML text and apply `key=value` overrides.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(describe)?;
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::config(o.as_str(), "override must look like key=value"))?;
            set_dotted(&mut table, k.trim(), v.trim())?;
        }
        let cfg: ExperimentConfig = table.try_into().map_err(describe)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.classes < 2 {
            return Err(Error::config("data.classes", "must be at least 2"));
        }
        if d.kind == DataKind::Idx && d.path.is_none() {
            return Err(Error::config("data.path", "required for idx data"));
        }
        if !(0.0..1.0).contains(&d.holdout) {
            return Err(Error::config("data.holdout", "must lie in [0, 1)"));
        }
        let m = &self.model;
        if !(m.width_ratio > 0.0 && m.width_ratio <= 1.0) {
            return Err(Error::config("model.width_ratio", "must lie in (0, 1]"));
        }
        if m.kind == ModelKind::Mlp && (m.blocks == 0 || m.width == 0) {
            return Err(Error::config(
                "model.blocks",
                "the MLP needs at least one block of positive width",
            ));
        }
        if self.partition.clients == 0 {
            return Err(Error::config("partition.clients", "must be at least 1"));
        }
        self.partition.spec(0).validate()?;
        let b = &self.budget;
        if b.mode != BudgetMode::Unconstrained && b.levels() == 0 {
            return Err(Error::config("budget", "the active budget list is empty"));
        }
        if b.levels() > self.partition.clients {
            return Err(Error::config("budget", "more budget groups than clients"));
        }
        if b.effective_ratios().iter().any(|&r| !(r > 0.0 && r.is_finite())) {
            return Err(Error::config("budget.ratios", "must be positive"));
        }
        if b.groups.contains(&0) {
            return Err(Error::config("budget.groups", "group counts must be at least 1"));
        }
        if b.capacity_mb.iter().any(|&c| !(c > 0.0 && c.is_finite())) {
            return Err(Error::config("budget.capacity_mb", "must be positive"));
        }
        if !(0.0..=1.0).contains(&b.skip_first_fraction) {
            return Err(Error::config("budget.skip_first_fraction", "must lie in [0, 1]"));
        }
        let f = &self.federation;
        if !(f.participation > 0.0 && f.participation <= 1.0) {
            return Err(Error::config("federation.participation", "must lie in (0, 1]"));
        }
        if f.eval_every == 0 {
            return Err(Error::config("federation.eval_every", "must be at least 1"));
        }
        if f.rounds == 0 {
            return Err(Error::config("federation.rounds", "must be at least 1"));
        }
        self.trainer.mkd.validate()?;
        self.local.client_config().validate()
    }
}
