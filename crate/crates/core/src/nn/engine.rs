//! Forward execution and reverse-mode differentiation over block graphs.
//!
//! [`forward`] runs any contiguous stretch of the network without recording.
//! A [`Tape`] records the layers a training step actually differentiates
//! (the blocks being trained, the skip adapter and the head); frozen blocks
//! run through [`forward`] beforehand and never appear on it, so they get no
//! gradient entries.

use std::collections::BTreeMap;

use super::graph::BlockGraph;
use super::layer::{Cache, LayerSpec};
use super::loss::LossOutput;
use super::tensor::{Scalar, Shape, Tensor};
use super::weights::ModelWeights;
use crate::error::{Error, Result};

/// Position in the network. `Input` is the raw sample (z_0).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Input,
    /// Output of body block `j` (0-based).
    Block(usize),
    Head,
}

/// An activation batch together with the stage that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct Activation<T> {
    pub values: Tensor<T>,
    pub stage: Stage,
    pub requires_grad: bool,
}

impl<T: Scalar> Activation<T> {
    pub fn input(values: Tensor<T>) -> Self {
        Activation {
            values,
            stage: Stage::Input,
            requires_grad: false,
        }
    }
}

fn first_block(stage: Stage, graph: &BlockGraph) -> Result<usize> {
    match stage {
        Stage::Input => Ok(0),
        Stage::Block(j) if j < graph.num_blocks() => Ok(j + 1),
        Stage::Block(j) => Err(Error::usage(format!("no block {}", j + 1))),
        Stage::Head => Err(Error::usage("cannot continue forward from logits")),
    }
}

pub(crate) fn check_finite<T: Scalar>(t: &Tensor<T>, location: impl FnOnce() -> String) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(location()))
    }
}

/// Run a chain of layers without recording.
pub fn run_layers<T: Scalar>(layers: &[LayerSpec], params: &[Tensor<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut h = x.clone();
    let mut offset = 0;
    for layer in layers {
        let n = layer.num_param_tensors();
        let slice = params
            .get(offset..offset + n)
            .ok_or_else(|| Error::structure("too few parameter tensors for layer chain"))?;
        h = layer.forward(slice, &h, false)?.0;
        offset += n;
    }
    if offset != params.len() {
        return Err(Error::structure("too many parameter tensors for layer chain"));
    }
    Ok(h)
}

/// Run one body block.
pub fn run_block<T: Scalar>(
    graph: &BlockGraph,
    weights: &ModelWeights<T>,
    j: usize,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let expected = graph.block_input_shape(j);
    if x.shape().sample()? != *expected {
        return Err(Error::structure(format!(
            "block {} expects samples of {expected:?}, got {:?}",
            j + 1,
            x.dims()
        )));
    }
    let y = run_layers(&graph.blocks()[j].layers, &weights.body[j], x)?;
    check_finite(&y, || format!("block {}", j + 1))?;
    Ok(y)
}

/// Run the classifier head on the final body output.
pub fn run_head<T: Scalar>(graph: &BlockGraph, weights: &ModelWeights<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let y = run_layers(graph.head(), &weights.head, x)?;
    check_finite(&y, || "head".to_string())?;
    Ok(y)
}

/// Forward from `input` up to and including `upto`.
pub fn forward<T: Scalar>(
    graph: &BlockGraph,
    weights: &ModelWeights<T>,
    input: &Activation<T>,
    upto: Stage,
) -> Result<Activation<T>> {
    let start = first_block(input.stage, graph)?;
    let end = match upto {
        Stage::Input => return Err(Error::usage("cannot forward up to the input")),
        Stage::Block(j) if j >= graph.num_blocks() => return Err(Error::usage(format!("no block {}", j + 1))),
        Stage::Block(j) => j + 1,
        Stage::Head => graph.num_blocks(),
    };
    if end < start {
        return Err(Error::usage(format!("{upto:?} precedes {:?}", input.stage)));
    }
    if start == graph.num_blocks() && upto != Stage::Head {
        return Err(Error::usage("input is already past the last block"));
    }
    if input.values.shape().sample()? != *graph.block_input_shape(start) {
        return Err(Error::structure(format!(
            "input shape {:?} does not match {:?}",
            input.values.dims(),
            graph.block_input_shape(start)
        )));
    }
    let mut h = input.values.clone();
    for j in start..end {
        h = run_block(graph, weights, j, &h)?;
    }
    if upto == Stage::Head {
        h = run_head(graph, weights, &h)?;
    }
    Ok(Activation {
        values: h,
        stage: upto,
        requires_grad: false,
    })
}

/// Logits for raw inputs.
pub fn predict<T: Scalar>(graph: &BlockGraph, weights: &ModelWeights<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(forward(graph, weights, &Activation::input(x.clone()), Stage::Head)?.values)
}

/// Which parameter set a recorded segment reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Owner {
    Block(usize),
    Head,
    /// Parameter-free glue, e.g. the skip adapter.
    None,
}

#[derive(Debug)]
struct Segment<T> {
    owner: Owner,
    layers: Vec<LayerSpec>,
    caches: Vec<Cache<T>>,
}

/// Parameters looked up by a tape during backward.
#[derive(Clone, Copy)]
pub struct Params<'a, T> {
    pub body: &'a [Vec<Tensor<T>>],
    pub head: &'a [Tensor<T>],
}

impl<'a, T> Params<'a, T> {
    pub fn of(weights: &'a ModelWeights<T>) -> Self {
        Params {
            body: &weights.body,
            head: &weights.head,
        }
    }

    fn get(&self, owner: Owner) -> &'a [Tensor<T>] {
        match owner {
            Owner::Block(j) => &self.body[j],
            Owner::Head => self.head,
            Owner::None => &[],
        }
    }
}

/// Gradients of one backward pass. Only recorded parameter sets appear.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    pub body: BTreeMap<usize, Vec<Tensor<T>>>,
    pub head: Option<Vec<Tensor<T>>>,
    pub input: Option<Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Number of parameter elements that received a gradient.
    pub fn param_elements(&self) -> usize {
        self.body
            .values()
            .flatten()
            .chain(self.head.iter().flatten())
            .map(Tensor::len)
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.body
            .values()
            .flatten()
            .chain(self.head.iter().flatten())
            .all(Tensor::all_finite)
    }
}

/// Record of a differentiable forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    segments: Vec<Segment<T>>,
    input_requires_grad: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            segments: Vec::new(),
            input_requires_grad: false,
        }
    }

    /// Record gradients with respect to the tape's first input as well.
    pub fn with_input_grad(mut self) -> Self {
        self.input_requires_grad = true;
        self
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Record a layer chain owned by `owner`.
    pub fn run(
        &mut self,
        owner: Owner,
        layers: &[LayerSpec],
        params: &[Tensor<T>],
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut h = x.clone();
        let mut caches = Vec::with_capacity(layers.len());
        let mut offset = 0;
        for layer in layers {
            let n = layer.num_param_tensors();
            let slice = params
                .get(offset..offset + n)
                .ok_or_else(|| Error::structure("too few parameter tensors for layer chain"))?;
            let (y, cache) = layer.forward(slice, &h, true)?;
            caches.push(cache.expect("recording forward returns a cache"));
            offset += n;
            h = y;
        }
        if offset != params.len() {
            return Err(Error::structure("too many parameter tensors for layer chain"));
        }
        let location = match owner {
            Owner::Block(j) => format!("block {}", j + 1),
            Owner::Head => "head".to_string(),
            Owner::None => "adapter".to_string(),
        };
        check_finite(&h, || location)?;
        self.segments.push(Segment {
            owner,
            layers: layers.to_vec(),
            caches,
        });
        Ok(h)
    }

    /// Record body block `j`.
    pub fn run_block(
        &mut self,
        graph: &BlockGraph,
        params: &[Tensor<T>],
        j: usize,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.run(Owner::Block(j), &graph.blocks()[j].layers, params, x)
    }

    /// Record the zero-pad adapter from `x` to `target`; a no-op for equal shapes.
    pub fn run_adapter(&mut self, x: &Tensor<T>, target: &Shape) -> Result<Tensor<T>> {
        if x.shape().sample()? == *target {
            return Ok(x.clone());
        }
        let layer = LayerSpec::ZeroPad {
            target: target.dims().to_vec(),
        };
        self.run(Owner::None, std::slice::from_ref(&layer), &[], x)
    }

    /// Reverse pass from the loss root.
    pub fn backward(&self, params: Params<'_, T>, loss: &LossOutput<T>) -> Result<Gradients<T>> {
        if self.segments.is_empty() {
            return Err(Error::usage("backward called without a recorded forward pass"));
        }
        let mut grads = Gradients {
            body: BTreeMap::new(),
            head: None,
            input: None,
        };
        let mut g = loss.grad.clone();
        let last_seg = self.segments.len() - 1;
        for (si, seg) in self.segments.iter().enumerate().rev() {
            let set = params.get(seg.owner);
            let mut offsets = Vec::with_capacity(seg.layers.len());
            let mut offset = 0;
            for l in &seg.layers {
                offsets.push(offset);
                offset += l.num_param_tensors();
            }
            if offset != set.len() {
                return Err(Error::structure("parameters changed shape since forward"));
            }
            let mut per_layer: Vec<Vec<Tensor<T>>> = vec![Vec::new(); seg.layers.len()];
            for (li, layer) in seg.layers.iter().enumerate().rev() {
                let n = layer.num_param_tensors();
                let is_first = si == 0 && li == 0;
                let need_input = !is_first || self.input_requires_grad;
                let (dx, pg) = layer.backward(&set[offsets[li]..offsets[li] + n], &seg.caches[li], &g, need_input)?;
                per_layer[li] = pg;
                match dx {
                    Some(dx) => g = dx,
                    None => debug_assert!(is_first),
                }
            }
            let flat: Vec<Tensor<T>> = per_layer.into_iter().flatten().collect();
            match seg.owner {
                Owner::Block(j) => {
                    grads.body.insert(j, flat);
                }
                Owner::Head => grads.head = Some(flat),
                Owner::None => {}
            }
            let _ = last_seg;
        }
        if self.input_requires_grad {
            grads.input = Some(g);
        }
        Ok(grads)
    }
}
