//! Memory-adaptive grouping of finest blocks into sequential training units.

use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{estimate_training_unit_cost, CostModel, MemoryBudget};
use crate::nn::graph::BlockGraph;

/// A client's training schedule over the body blocks.
///
/// Block indices are 0-based and groups are half-open ranges; [`fmt::Display`]
/// prints the 1-based form, e.g. `[1],[2,3],[4,5,6]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionPlan {
    pub skipped_prefix: usize,
    pub groups: Vec<Range<usize>>,
}

impl DecompositionPlan {
    /// One group spanning every block.
    pub fn whole(blocks: usize) -> Self {
        DecompositionPlan {
            skipped_prefix: 0,
            groups: vec![0..blocks],
        }
    }

    /// Plan from 1-based block lists, e.g. `&[&[1], &[2, 3]]`.
    pub fn from_one_based(skipped_prefix: usize, groups: &[&[usize]]) -> Result<Self> {
        let groups = groups
            .iter()
            .map(|g| match (g.first(), g.last()) {
                (Some(&a), Some(&b)) if a >= 1 && b >= a && g.len() == b - a + 1 => Ok(a - 1..b),
                _ => Err(Error::usage(format!("group {g:?} is not a contiguous 1-based range"))),
            })
            .collect::<Result<_>>()?;
        Ok(DecompositionPlan { skipped_prefix, groups })
    }

    /// J: number of trained groups.
    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.groups.last().map_or(self.skipped_prefix, |g| g.end)
    }

    /// Groups as 1-based block lists.
    pub fn one_based(&self) -> Vec<Vec<usize>> {
        self.groups.iter().map(|g| (g.start + 1..=g.end).collect()).collect()
    }

    /// Check the plan covers exactly `blocks` blocks: the skipped prefix, then
    /// contiguous, non-empty, ordered groups.
    pub fn validate(&self, blocks: usize) -> Result<()> {
        if self.groups.is_empty() {
            return Err(Error::structure("plan trains no blocks"));
        }
        let mut next = self.skipped_prefix;
        for g in &self.groups {
            if g.start != next || g.end <= g.start {
                return Err(Error::structure(format!("plan {self} is not contiguous")));
            }
            next = g.end;
        }
        if next != blocks {
            return Err(Error::structure(format!(
                "plan {self} covers {next} blocks, graph has {blocks}"
            )));
        }
        Ok(())
    }

    /// Human-readable text form used for `plan.txt`.
    pub fn to_text(&self) -> String {
        format!(
            "groups: {}\nJ: {}\nskipped_prefix: {}\n",
            self,
            self.num_groups(),
            self.skipped_prefix
        )
    }
}

impl fmt::Display for DecompositionPlan {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .one_based()
            .iter()
            .map(|g| {
                let ids: Vec<String> = g.iter().map(usize::to_string).collect();
                format!("[{}]", ids.join(","))
            })
            .collect();
        write!(f, "{}", parts.join(","))
    }
}

/// Greedy packing with an arbitrary joint cost for a block range.
///
/// Leading blocks whose singleton cost exceeds `capacity` form the skipped
/// prefix. After that, each group grows while its joint cost still fits
/// (inclusive). An unaffordable block after the prefix is an error, because
/// skipping it would cut the network in the middle.
pub fn decompose_with<F>(blocks: usize, capacity: f64, mut cost: F) -> Result<DecompositionPlan>
where
    F: FnMut(Range<usize>) -> Result<f64>,
{
    if blocks == 0 {
        return Err(Error::usage("nothing to decompose"));
    }
    let mut skipped = 0;
    while skipped < blocks && cost(skipped..skipped + 1)? > capacity {
        skipped += 1;
    }
    if skipped == blocks {
        return Err(Error::BudgetTooSmall {
            block: blocks,
            required_mb: cost(blocks - 1..blocks)?,
            capacity_mb: capacity,
        });
    }
    let mut groups = Vec::new();
    let mut start = skipped;
    while start < blocks {
        let single = cost(start..start + 1)?;
        if single > capacity {
            return Err(Error::BudgetTooSmall {
                block: start + 1,
                required_mb: single,
                capacity_mb: capacity,
            });
        }
        let mut end = start + 1;
        while end < blocks && cost(start..end + 1)? <= capacity {
            end += 1;
        }
        groups.push(start..end);
        start = end;
    }
    Ok(DecompositionPlan {
        skipped_prefix: skipped,
        groups,
    })
}

/// Greedy packing of additive per-block costs.
pub fn decompose(costs: &[f64], budget: &MemoryBudget) -> Result<DecompositionPlan> {
    decompose_with(costs.len(), budget.capacity_mb, |r| Ok(costs[r].iter().sum()))
}

/// Plan for a graph, costing each candidate group with the memory model.
pub fn plan_for_graph(graph: &BlockGraph, budget: &MemoryBudget, model: &CostModel) -> Result<DecompositionPlan> {
    decompose_with(graph.num_blocks(), budget.capacity_mb, |r| {
        Ok(estimate_training_unit_cost(graph, r, model)?.total_mb)
    })
}

/// The PreResNet-20 plan at the smallest budget that trains every block:
/// block 1's own training-unit cost.
pub fn preresnet20_reference_plan() -> DecompositionPlan {
    let graph = BlockGraph::preresnet20(10).expect("reference graph is valid");
    let model = CostModel::default();
    let capacity = estimate_training_unit_cost(&graph, 0..1, &model)
        .expect("reference cost")
        .total_mb;
    let budget = MemoryBudget::new(capacity).expect("positive capacity");
    plan_for_graph(&graph, &budget, &model).expect("block 1 fits its own cost")
}

/// Smallest capacity (among the joint costs of contiguous ranges) whose
/// greedy plan has exactly `groups` groups and no skipped prefix.
pub fn capacity_for_groups<F>(blocks: usize, groups: usize, mut cost: F) -> Result<Option<f64>>
where
    F: FnMut(Range<usize>) -> Result<f64>,
{
    let mut candidates = Vec::new();
    for a in 0..blocks {
        for b in a + 1..=blocks {
            candidates.push(cost(a..b)?);
        }
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    for c in candidates {
        match decompose_with(blocks, c, &mut cost) {
            Ok(plan) if plan.skipped_prefix == 0 && plan.num_groups() == groups => return Ok(Some(c)),
            Ok(_) | Err(Error::BudgetTooSmall { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}
