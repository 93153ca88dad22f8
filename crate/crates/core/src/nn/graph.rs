use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layer::{chain_output_shape, LayerSpec};
use super::tensor::Shape;
use crate::error::{Error, Result};

/// One finest trainable unit of the body.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub layers: Vec<LayerSpec>,
}

/// A block-structured network: input shape, ordered body blocks and the
/// classifier head.
///
/// Blocks are indexed from 0 in code. Plans and reports print them from 1.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawGraph", into = "RawGraph")]
pub struct BlockGraph {
    input: Shape,
    blocks: Vec<Block>,
    head: Vec<LayerSpec>,
    /// `shapes[j]` is the input of block `j`; `shapes[B]` feeds the head.
    shapes: Vec<Shape>,
    classes: usize,
}

#[derive(Serialize, Deserialize)]
struct RawGraph {
    version: u32,
    input: Shape,
    blocks: Vec<Block>,
    head: Vec<LayerSpec>,
}

const GRAPH_FORMAT_VERSION: u32 = 1;

impl TryFrom<RawGraph> for BlockGraph {
    type Error = Error;
    fn try_from(raw: RawGraph) -> Result<Self> {
        if raw.version != GRAPH_FORMAT_VERSION {
            return Err(Error::structure(format!(
                "unsupported model-spec version {}",
                raw.version
            )));
        }
        BlockGraph::new(raw.input, raw.blocks, raw.head)
    }
}

impl From<BlockGraph> for RawGraph {
    fn from(g: BlockGraph) -> Self {
        RawGraph {
            version: GRAPH_FORMAT_VERSION,
            input: g.input,
            blocks: g.blocks,
            head: g.head,
        }
    }
}

impl BlockGraph {
    pub fn new(input: Shape, blocks: Vec<Block>, head: Vec<LayerSpec>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::structure("a graph needs at least one block"));
        }
        if head.is_empty() {
            return Err(Error::structure("a graph needs a classifier head"));
        }
        let mut shapes = vec![input.clone()];
        for (j, block) in blocks.iter().enumerate() {
            if block.layers.is_empty() {
                return Err(Error::structure(format!("block {} is empty", j + 1)));
            }
            let out = chain_output_shape(&block.layers, &shapes[j])
                .map_err(|e| Error::structure(format!("block {}: {e}", j + 1)))?;
            shapes.push(out);
        }
        let logits =
            chain_output_shape(&head, &shapes[blocks.len()]).map_err(|e| Error::structure(format!("head: {e}")))?;
        if logits.rank() != 1 {
            return Err(Error::structure(format!(
                "head must produce class logits, got {logits:?}"
            )));
        }
        if !matches!(head.last(), Some(LayerSpec::Classifier { .. })) {
            return Err(Error::structure("head must end in a classifier layer"));
        }
        Ok(BlockGraph {
            input,
            blocks,
            head,
            shapes,
            classes: logits.dims()[0],
        })
    }

    pub fn input_shape(&self) -> &Shape {
        &self.input
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn head(&self) -> &[LayerSpec] {
        &self.head
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn block_input_shape(&self, j: usize) -> &Shape {
        &self.shapes[j]
    }

    pub fn block_output_shape(&self, j: usize) -> &Shape {
        &self.shapes[j + 1]
    }

    pub fn head_input_shape(&self) -> &Shape {
        &self.shapes[self.blocks.len()]
    }

    pub fn block_param_count(&self, j: usize) -> usize {
        self.blocks[j].layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn head_param_count(&self) -> usize {
        self.head.iter().map(LayerSpec::param_count).sum()
    }

    pub fn param_count(&self) -> usize {
        (0..self.num_blocks()).map(|j| self.block_param_count(j)).sum::<usize>() + self.head_param_count()
    }

    /// Per-block output shapes, i.e. the hidden widths (leading extent).
    pub fn hidden_widths(&self) -> Vec<usize> {
        (0..self.num_blocks())
            .map(|j| self.block_output_shape(j).dims()[0])
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Multilayer perceptron with `blocks` finest units of `width` features.
    ///
    /// Each block is a residual unit `x + relu(norm(dense(x)))`, with the
    /// zero-pad adapter widening the raw input on the first shortcut, so
    /// `input_dim <= width` is required. The head is `norm, relu, classifier`.
    pub fn mlp(input_dim: usize, width: usize, blocks: usize, classes: usize) -> Result<Self> {
        let groups = default_groups(width);
        let mut body = Vec::with_capacity(blocks);
        for j in 0..blocks {
            let inputs = if j == 0 { input_dim } else { width };
            body.push(Block {
                layers: vec![LayerSpec::Residual {
                    body: vec![
                        LayerSpec::Dense { inputs, outputs: width },
                        LayerSpec::GroupNorm {
                            channels: width,
                            groups,
                        },
                        LayerSpec::Relu,
                    ],
                }],
            });
        }
        let head = vec![
            LayerSpec::GroupNorm {
                channels: width,
                groups,
            },
            LayerSpec::Relu,
            LayerSpec::Classifier { inputs: width, classes },
        ];
        BlockGraph::new(Shape::new(vec![input_dim])?, body, head)
    }

    /// Pre-activation ResNet-20 for `[3, 32, 32]` inputs: a 3×3 stem folded
    /// into block 1, then nine residual blocks of two 3×3 convolutions at
    /// widths 16/32/64 (stride 2 entering blocks 4 and 7).
    pub fn preresnet20(classes: usize) -> Result<Self> {
        Self::preresnet(&[16, 32, 64], 3, [3, 32, 32], classes)
    }

    /// Pre-activation ResNet with `per_stage` blocks at each stage width.
    pub fn preresnet(widths: &[usize], per_stage: usize, input: [usize; 3], classes: usize) -> Result<Self> {
        if widths.is_empty() || per_stage == 0 {
            return Err(Error::structure("preresnet needs at least one stage and block"));
        }
        let conv = |i, o, stride| LayerSpec::Conv2d {
            in_channels: i,
            out_channels: o,
            kernel: 3,
            stride,
            padding: 1,
        };
        let norm = |c| LayerSpec::GroupNorm {
            channels: c,
            groups: default_groups(c),
        };
        let mut blocks = Vec::new();
        let mut channels = widths[0];
        for (s, &w) in widths.iter().enumerate() {
            for b in 0..per_stage {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let unit = LayerSpec::Residual {
                    body: vec![
                        norm(channels),
                        LayerSpec::Relu,
                        conv(channels, w, stride),
                        norm(w),
                        LayerSpec::Relu,
                        conv(w, w, 1),
                    ],
                };
                let layers = if blocks.is_empty() {
                    vec![conv(input[0], widths[0], 1), unit]
                } else {
                    vec![unit]
                };
                blocks.push(Block { layers });
                channels = w;
            }
        }
        let head = vec![
            norm(channels),
            LayerSpec::Relu,
            LayerSpec::GlobalAvgPool,
            LayerSpec::Classifier {
                inputs: channels,
                classes,
            },
        ];
        BlockGraph::new(Shape::new(input.to_vec())?, blocks, head)
    }
}

/// Group count used by the builders: 4 groups when possible.
pub(crate) fn default_groups(channels: usize) -> usize {
    largest_divisor_at_most(channels, 4)
}

fn largest_divisor_at_most(n: usize, cap: usize) -> usize {
    (1..=cap.min(n)).rev().find(|d| n % d == 0).unwrap_or(1)
}

/// Scale a hidden channel count: round half up, floor at one channel.
pub fn scale_channels(c: usize, ratio: f64) -> usize {
    ((ratio * c as f64 + 0.5 + 1e-9).floor() as usize).max(1)
}

/// Width-scaled copy of `graph`: every hidden channel count `c` becomes
/// [`scale_channels`]`(c, r)`. Input extents and the class count are kept.
pub fn width_scale(graph: &BlockGraph, ratio: f64) -> Result<BlockGraph> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::usage(format!("width ratio {ratio} not in (0, 1]")));
    }
    let mut cur = graph.input_shape().clone();
    let mut blocks = Vec::with_capacity(graph.num_blocks());
    for block in graph.blocks() {
        let layers = scale_chain(&block.layers, &mut cur, ratio)?;
        blocks.push(Block { layers });
    }
    let head = scale_chain(graph.head(), &mut cur, ratio)?;
    BlockGraph::new(graph.input_shape().clone(), blocks, head)
}

fn scale_chain(layers: &[LayerSpec], cur: &mut Shape, r: f64) -> Result<Vec<LayerSpec>> {
    let mut out = Vec::with_capacity(layers.len());
    for layer in layers {
        let scaled = scale_layer(layer, cur, r)?;
        *cur = scaled.output_shape(cur)?;
        out.push(scaled);
    }
    Ok(out)
}

fn scale_layer(layer: &LayerSpec, input: &Shape, r: f64) -> Result<LayerSpec> {
    let in_c = input.dims()[0];
    Ok(match layer {
        LayerSpec::Dense { outputs, .. } => LayerSpec::Dense {
            inputs: in_c,
            outputs: scale_channels(*outputs, r),
        },
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            stride,
            padding,
            ..
        } => LayerSpec::Conv2d {
            in_channels: in_c,
            out_channels: scale_channels(*out_channels, r),
            kernel: *kernel,
            stride: *stride,
            padding: *padding,
        },
        LayerSpec::GroupNorm { groups, .. } => LayerSpec::GroupNorm {
            channels: in_c,
            groups: largest_divisor_at_most(in_c, *groups),
        },
        LayerSpec::Classifier { classes, .. } => LayerSpec::Classifier {
            inputs: input.numel(),
            classes: *classes,
        },
        LayerSpec::ZeroPad { target } => {
            let mut t = target.clone();
            t[0] = scale_channels(t[0], r);
            LayerSpec::ZeroPad { target: t }
        }
        LayerSpec::Residual { body } => {
            let mut cur = input.clone();
            LayerSpec::Residual {
                body: scale_chain(body, &mut cur, r)?,
            }
        }
        other => other.clone(),
    })
}
