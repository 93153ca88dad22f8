//! Training-memory accounting.
//!
//! The rule, applied per layer at a given batch size:
//!
//! * every layer's output activation is stored once; a residual layer stores
//!   its body outputs, the shortcut adapter output when the adapter is not an
//!   identity, and the sum;
//! * gradients take one parameter-sized copy plus one activation gradient in
//!   flight, sized as the largest layer output of the block;
//! * SGD momentum, when enabled, takes one more parameter-sized copy.
//!
//! A training unit (a group of consecutive blocks trained with the head) adds
//! the head's own cost, the head-input adapter output and the buffered input
//! activation of the group's first block.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{width_scale, BlockGraph};
use crate::nn::layer::{adapter_plan, LayerSpec};
use crate::nn::tensor::Shape;

pub const BYTES_PER_MB: f64 = 1024.0 * 1024.0;

/// Memory footprint in megabytes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryCost {
    pub params_mb: f64,
    pub activations_mb: f64,
    pub grads_mb: f64,
    pub optimizer_mb: f64,
    pub total_mb: f64,
}

impl MemoryCost {
    fn from_parts(params_mb: f64, activations_mb: f64, grads_mb: f64, optimizer_mb: f64) -> Self {
        MemoryCost {
            params_mb,
            activations_mb,
            grads_mb,
            optimizer_mb,
            total_mb: params_mb + activations_mb + grads_mb + optimizer_mb,
        }
    }

    /// Component-wise sum.
    pub fn plus(&self, other: &MemoryCost) -> MemoryCost {
        MemoryCost::from_parts(
            self.params_mb + other.params_mb,
            self.activations_mb + other.activations_mb,
            self.grads_mb + other.grads_mb,
            self.optimizer_mb + other.optimizer_mb,
        )
    }

    /// Every component multiplied by `k`, e.g. for `k` co-trained models.
    pub fn times(&self, k: f64) -> MemoryCost {
        MemoryCost::from_parts(
            self.params_mb * k,
            self.activations_mb * k,
            self.grads_mb * k,
            self.optimizer_mb * k,
        )
    }
}

/// Budget scenarios: the width ratios handed out to equal quarters of the
/// client population.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Fair,
    Lack,
    Surplus,
}

impl Scenario {
    pub fn ratios(self) -> [f64; 4] {
        match self {
            Scenario::Fair => [1.0 / 6.0, 1.0 / 3.0, 0.5, 1.0],
            Scenario::Lack => [1.0 / 8.0, 1.0 / 6.0, 0.5, 1.0],
            Scenario::Surplus => [1.0 / 6.0, 1.0 / 3.0, 0.5, 2.0],
        }
    }
}

/// A client's memory capacity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub capacity_mb: f64,
    pub scenario: Option<Scenario>,
    /// Width ratio the capacity was derived from, for reporting.
    pub ratio: Option<f64>,
}

impl MemoryBudget {
    pub fn new(capacity_mb: f64) -> Result<Self> {
        if !(capacity_mb.is_finite() && capacity_mb > 0.0) {
            return Err(Error::usage(format!("capacity must be positive, got {capacity_mb}")));
        }
        Ok(MemoryBudget {
            capacity_mb,
            scenario: None,
            ratio: None,
        })
    }

    /// Capacity equal to whole-model training of `graph` at width `ratio`.
    /// Ratios above 1 scale the full-width cost, so `r = 2` affords two
    /// full-size models side by side.
    pub fn for_ratio(graph: &BlockGraph, ratio: f64, model: &CostModel) -> Result<Self> {
        let capacity_mb = if ratio > 1.0 {
            ratio * full_model_cost(graph, model)?.total_mb
        } else {
            full_model_cost(&width_scale(graph, ratio)?, model)?.total_mb
        };
        Ok(MemoryBudget {
            capacity_mb,
            scenario: None,
            ratio: Some(ratio),
        })
    }

    pub fn with_scenario(mut self, scenario: Scenario) -> Self {
        self.scenario = Some(scenario);
        self
    }
}

/// Batch size, element width and optimizer assumptions behind an estimate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub batch: usize,
    pub bytes_per_element: usize,
    pub momentum: bool,
}

impl Default for CostModel {
    /// Batch 32, 32-bit elements, momentum counted: the calibration under
    /// which the PreResNet-20 block ratios line up with the published table.
    fn default() -> Self {
        CostModel {
            batch: 32,
            bytes_per_element: 4,
            momentum: true,
        }
    }
}

impl CostModel {
    fn mb(&self, elements: usize) -> f64 {
        (elements * self.bytes_per_element) as f64 / BYTES_PER_MB
    }

    fn mb_batched(&self, per_sample: usize) -> f64 {
        self.mb(per_sample * self.batch)
    }
}

/// Per-sample element counts for a layer chain.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct ChainFootprint {
    stored: usize,
    largest: usize,
}

fn chain_footprint(layers: &[LayerSpec], input: &Shape) -> Result<(ChainFootprint, Shape)> {
    let mut fp = ChainFootprint::default();
    let mut shape = input.clone();
    for layer in layers {
        let out = layer.output_shape(&shape)?;
        if let LayerSpec::Residual { body } = layer {
            let (inner, body_out) = chain_footprint(body, &shape)?;
            fp.stored += inner.stored;
            fp.largest = fp.largest.max(inner.largest);
            if !adapter_plan(&shape, &body_out)?.is_identity() {
                fp.stored += out.numel();
            }
        }
        fp.stored += out.numel();
        fp.largest = fp.largest.max(out.numel());
        shape = out;
    }
    Ok((fp, shape))
}

fn layers_cost(layers: &[LayerSpec], input: &Shape, model: &CostModel) -> Result<MemoryCost> {
    let params: usize = layers.iter().map(LayerSpec::param_count).sum();
    let (fp, _) = chain_footprint(layers, input)?;
    Ok(MemoryCost::from_parts(
        model.mb(params),
        model.mb_batched(fp.stored),
        model.mb(params) + model.mb_batched(fp.largest),
        if model.momentum { model.mb(params) } else { 0.0 },
    ))
}

/// Cost of training block `j` (0-based) on its own, without the head.
pub fn estimate_block_cost(graph: &BlockGraph, j: usize, model: &CostModel) -> Result<MemoryCost> {
    if j >= graph.num_blocks() {
        return Err(Error::usage(format!("no block {}", j + 1)));
    }
    if model.batch == 0 {
        return Err(Error::usage("batch must be at least 1"));
    }
    layers_cost(&graph.blocks()[j].layers, graph.block_input_shape(j), model)
}

/// Fixed cost every training unit carries: the head, the head-input adapter
/// output and the buffered input of the unit's first block.
fn unit_overhead(graph: &BlockGraph, first: usize, model: &CostModel) -> Result<MemoryCost> {
    let head = layers_cost(graph.head(), graph.head_input_shape(), model)?;
    let extra =
        model.mb_batched(graph.head_input_shape().numel()) + model.mb_batched(graph.block_input_shape(first).numel());
    Ok(head.plus(&MemoryCost::from_parts(0.0, extra, 0.0, 0.0)))
}

/// Cost of training blocks `range` (0-based, half-open) jointly with the head.
pub fn estimate_training_unit_cost(
    graph: &BlockGraph,
    range: std::ops::Range<usize>,
    model: &CostModel,
) -> Result<MemoryCost> {
    if range.is_empty() || range.end > graph.num_blocks() {
        return Err(Error::usage(format!(
            "invalid block range {}..{} for {} blocks",
            range.start + 1,
            range.end,
            graph.num_blocks()
        )));
    }
    let mut total = unit_overhead(graph, range.start, model)?;
    for j in range {
        total = total.plus(&estimate_block_cost(graph, j, model)?);
    }
    Ok(total)
}

/// Cost of ordinary whole-model training.
pub fn full_model_cost(graph: &BlockGraph, model: &CostModel) -> Result<MemoryCost> {
    estimate_training_unit_cost(graph, 0..graph.num_blocks(), model)
}

/// Singleton-group costs for every block, the input to decomposition.
pub fn block_unit_costs(graph: &BlockGraph, model: &CostModel) -> Result<Vec<f64>> {
    (0..graph.num_blocks())
        .map(|j| Ok(estimate_training_unit_cost(graph, j..j + 1, model)?.total_mb))
        .collect()
}

/// Inclusive at the boundary.
pub fn fits(cost: &MemoryCost, budget: &MemoryBudget) -> bool {
    cost.total_mb <= budget.capacity_mb
}

/// Per-block totals relative to block 1.
pub fn block_cost_ratios(graph: &BlockGraph, model: &CostModel) -> Result<Vec<f64>> {
    let costs: Vec<f64> = (0..graph.num_blocks())
        .map(|j| Ok(estimate_block_cost(graph, j, model)?.total_mb))
        .collect::<Result<_>>()?;
    Ok(costs.iter().map(|c| c / costs[0]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::graph::Block;

    fn single(layers: Vec<LayerSpec>, input: Vec<usize>, classes: usize) -> BlockGraph {
        let out = crate::nn::layer::chain_output_shape(&layers, &Shape::new(input.clone()).unwrap()).unwrap();
        BlockGraph::new(
            Shape::new(input).unwrap(),
            vec![Block { layers }],
            vec![LayerSpec::Classifier {
                inputs: out.numel(),
                classes,
            }],
        )
        .unwrap()
    }

    #[test]
    fn relu_block_has_no_parameters() {
        let g = single(vec![LayerSpec::Relu], vec![4], 2);
        let c = estimate_block_cost(&g, 0, &CostModel::default()).unwrap();
        assert_eq!(c.params_mb, 0.0);
        assert!(c.activations_mb > 0.0);
    }

    #[test]
    fn dense_hand_count() {
        let g = single(
            vec![LayerSpec::Dense {
                inputs: 10,
                outputs: 10,
            }],
            vec![10],
            2,
        );
        let m = CostModel {
            batch: 1,
            bytes_per_element: 4,
            momentum: true,
        };
        let c = estimate_block_cost(&g, 0, &m).unwrap();
        assert_eq!(c.params_mb * BYTES_PER_MB, 440.0);
        assert_eq!(c.activations_mb * BYTES_PER_MB, 40.0);
        assert_eq!(c.grads_mb * BYTES_PER_MB, 480.0);
        assert_eq!(c.optimizer_mb * BYTES_PER_MB, 440.0);
        assert_eq!(c.total_mb, c.params_mb + c.activations_mb + c.grads_mb + c.optimizer_mb);
    }

    #[test]
    fn activations_scale_with_batch() {
        let g = BlockGraph::mlp(4, 8, 3, 3).unwrap();
        let a = estimate_block_cost(
            &g,
            1,
            &CostModel {
                batch: 8,
                ..Default::default()
            },
        )
        .unwrap();
        let b = estimate_block_cost(
            &g,
            1,
            &CostModel {
                batch: 16,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(a.params_mb, b.params_mb);
        assert!((b.activations_mb - 2.0 * a.activations_mb).abs() < 1e-15);
    }

    #[test]
    fn whole_network_unit_is_full_model() {
        let g = BlockGraph::mlp(4, 8, 3, 3).unwrap();
        let m = CostModel::default();
        assert_eq!(
            estimate_training_unit_cost(&g, 0..3, &m).unwrap(),
            full_model_cost(&g, &m).unwrap()
        );
    }

    #[test]
    fn boundary_fit_is_inclusive() {
        let budget = MemoryBudget::new(3.0).unwrap();
        let at = MemoryCost::from_parts(1.0, 2.0, 0.0, 0.0);
        let over = MemoryCost::from_parts(1.0, 2.01, 0.0, 0.0);
        assert!(fits(&at, &budget));
        assert!(!fits(&over, &budget));
        assert!(MemoryBudget::new(0.0).is_err());
    }

    #[test]
    fn preresnet_block_activations_match_hand_count() {
        // stem + block: stem 16·32·32, then norm, relu, conv, norm, relu, conv, add
        let g = BlockGraph::preresnet20(10).unwrap();
        let per = |j: usize| {
            let (fp, _) = chain_footprint(&g.blocks()[j].layers, g.block_input_shape(j)).unwrap();
            fp
        };
        assert_eq!(per(0).stored, 131072);
        assert_eq!(per(1).stored, 114688);
        assert_eq!(per(3).stored, 81920);
        assert_eq!(per(4).stored, 57344);
        assert_eq!(per(6).stored, 40960);
        assert_eq!(per(8).stored, 28672);
        assert_eq!(per(8).largest, 4096);
    }

    #[test]
    fn surplus_ratio_affords_two_models() {
        let g = BlockGraph::mlp(4, 8, 3, 3).unwrap();
        let m = CostModel::default();
        let b = MemoryBudget::for_ratio(&g, 2.0, &m).unwrap();
        assert!((b.capacity_mb - 2.0 * full_model_cost(&g, &m).unwrap().total_mb).abs() < 1e-12);
    }
}
