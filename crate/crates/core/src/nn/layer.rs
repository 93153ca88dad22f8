//! Layer kinds, shape inference and the forward/backward kernels.
//!
//! Shapes here are per-sample; activations carry a leading batch extent.
//! No kernel mixes values across samples, so any row of a batched output is
//! bit-identical to the same sample run alone.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tensor::{Scalar, Shape, Tensor};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    /// Per-sample group normalization with a learned affine transform.
    GroupNorm {
        channels: usize,
        groups: usize,
    },
    /// Non-overlapping `window`×`window` average pooling.
    AvgPool {
        window: usize,
    },
    GlobalAvgPool,
    Flatten,
    /// `body(x) + adapter(x)`, with the zero-pad adapter reconciling shapes.
    Residual {
        body: Vec<LayerSpec>,
    },
    /// Parameter-free adapter to `target` (see [`adapter_plan`]).
    ZeroPad {
        target: Vec<usize>,
    },
    /// Final linear map to class logits.
    Classifier {
        inputs: usize,
        classes: usize,
    },
}

/// How the zero-pad adapter maps a source shape onto a target shape:
/// average-pool spatial extents by `pool`, then append zero channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AdapterPlan {
    pub pool: usize,
    pub src_channels: usize,
    pub dst_channels: usize,
}

impl AdapterPlan {
    pub fn is_identity(&self) -> bool {
        self.pool == 1 && self.src_channels == self.dst_channels
    }
}

/// Work out the adapter between `src` and `dst`.
///
/// Both shapes must have the same rank (1 for features, 3 for images).
/// Channels may only grow. Spatial extents may only shrink, by one integer
/// factor shared by height and width.
pub fn adapter_plan(src: &Shape, dst: &Shape) -> Result<AdapterPlan> {
    let (s, d) = (src.dims(), dst.dims());
    if s.len() != d.len() || !(s.len() == 1 || s.len() == 3) {
        return Err(Error::structure(format!(
            "zero-pad adapter cannot map {src:?} to {dst:?}"
        )));
    }
    if d[0] < s[0] {
        return Err(Error::structure(format!(
            "zero-pad adapter cannot shrink channels {} -> {}",
            s[0], d[0]
        )));
    }
    let pool = if s.len() == 3 {
        if d[1] > s[1] || d[2] > s[2] || s[1] % d[1] != 0 || s[2] % d[2] != 0 {
            return Err(Error::structure(format!(
                "zero-pad adapter has no pooling rule for {src:?} -> {dst:?}"
            )));
        }
        let (fh, fw) = (s[1] / d[1], s[2] / d[2]);
        if fh != fw {
            return Err(Error::structure(format!(
                "zero-pad adapter needs a square pooling factor for {src:?} -> {dst:?}"
            )));
        }
        fh
    } else {
        1
    };
    Ok(AdapterPlan {
        pool,
        src_channels: s[0],
        dst_channels: d[0],
    })
}

/// Saved forward state needed by `backward`.
#[derive(Clone, Debug)]
pub enum Cache<T> {
    Input(Tensor<T>),
    Output(Tensor<T>),
    Norm { xhat: Tensor<T>, inv_std: Vec<T> },
    InputShape(Shape),
    Residual { body: Vec<Cache<T>>, input: Shape },
}

fn expect_rank(input: &Shape, rank: usize, what: &str) -> Result<()> {
    if input.rank() != rank {
        return Err(Error::structure(format!(
            "{what} expects rank-{rank} samples, got {input:?}"
        )));
    }
    Ok(())
}

impl LayerSpec {
    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &Shape) -> Result<Shape> {
        let d = input.dims();
        match self {
            LayerSpec::Dense { inputs, outputs } => {
                if d != [*inputs] {
                    return Err(Error::structure(format!("dense expects [{inputs}], got {input:?}")));
                }
                Shape::new(vec![*outputs])
            }
            LayerSpec::Classifier { inputs, classes } => {
                if d != [*inputs] {
                    return Err(Error::structure(format!(
                        "classifier expects [{inputs}], got {input:?}"
                    )));
                }
                Shape::new(vec![*classes])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                expect_rank(input, 3, "conv2d")?;
                if d[0] != *in_channels {
                    return Err(Error::structure(format!(
                        "conv2d expects {in_channels} channels, got {input:?}"
                    )));
                }
                if *stride == 0 || *kernel == 0 {
                    return Err(Error::structure("conv2d stride and kernel must be >= 1"));
                }
                let span = |n: usize| -> Result<usize> {
                    let padded = n + 2 * padding;
                    if padded < *kernel {
                        return Err(Error::structure(format!(
                            "conv2d kernel {kernel} larger than padded input {padded}"
                        )));
                    }
                    Ok((padded - kernel) / stride + 1)
                };
                Shape::new(vec![*out_channels, span(d[1])?, span(d[2])?])
            }
            LayerSpec::Relu => Ok(input.clone()),
            LayerSpec::GroupNorm { channels, groups } => {
                if !(input.rank() == 1 || input.rank() == 3) || d[0] != *channels {
                    return Err(Error::structure(format!(
                        "group-norm expects {channels} channels, got {input:?}"
                    )));
                }
                if *groups == 0 || channels % groups != 0 {
                    return Err(Error::structure(format!(
                        "group-norm groups {groups} must divide channels {channels}"
                    )));
                }
                Ok(input.clone())
            }
            LayerSpec::AvgPool { window } => {
                expect_rank(input, 3, "avg-pool")?;
                if *window == 0 || d[1] % window != 0 || d[2] % window != 0 {
                    return Err(Error::structure(format!(
                        "avg-pool window {window} does not tile {input:?}"
                    )));
                }
                Shape::new(vec![d[0], d[1] / window, d[2] / window])
            }
            LayerSpec::GlobalAvgPool => {
                expect_rank(input, 3, "global-avg-pool")?;
                if d[1] != d[2] {
                    return Err(Error::structure(format!(
                        "global-avg-pool expects square maps, got {input:?}"
                    )));
                }
                Shape::new(vec![d[0]])
            }
            LayerSpec::Flatten => Shape::new(vec![input.numel()]),
            LayerSpec::Residual { body } => {
                if body.is_empty() {
                    return Err(Error::structure("residual body is empty"));
                }
                let out = chain_output_shape(body, input)?;
                adapter_plan(input, &out)?;
                Ok(out)
            }
            LayerSpec::ZeroPad { target } => {
                let target = Shape::new(target.clone())?;
                adapter_plan(input, &target)?;
                Ok(target)
            }
        }
    }

    /// Shapes of this layer's parameter tensors, in storage order.
    pub fn param_shapes(&self) -> Vec<Shape> {
        let s = |v: Vec<usize>| Shape::new(v).expect("layer hyperparameters are positive");
        match self {
            LayerSpec::Dense { inputs, outputs } => {
                vec![s(vec![*outputs, *inputs]), s(vec![*outputs])]
            }
            LayerSpec::Classifier { inputs, classes } => {
                vec![s(vec![*classes, *inputs]), s(vec![*classes])]
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                s(vec![*out_channels, *in_channels, *kernel, *kernel]),
                s(vec![*out_channels]),
            ],
            LayerSpec::GroupNorm { channels, .. } => vec![s(vec![*channels]), s(vec![*channels])],
            LayerSpec::Residual { body } => body.iter().flat_map(|l| l.param_shapes()).collect(),
            _ => Vec::new(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(Shape::numel).sum()
    }

    pub fn num_param_tensors(&self) -> usize {
        match self {
            LayerSpec::Dense { .. }
            | LayerSpec::Classifier { .. }
            | LayerSpec::Conv2d { .. }
            | LayerSpec::GroupNorm { .. } => 2,
            LayerSpec::Residual { body } => body.iter().map(|l| l.num_param_tensors()).sum(),
            _ => 0,
        }
    }

    /// Fresh parameters: He-normal weights for dense and conv layers,
    /// `N(0, 1/fan_in)` for the classifier, unit scale for norms, zero biases.
    pub fn init_params<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor<T>> {
        let normal = |shape: Shape, std: f64, rng: &mut R| {
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..shape.numel()).map(|_| T::of(dist.sample(rng))).collect();
            Tensor::from_vec(shape, data).expect("sized to shape")
        };
        match self {
            LayerSpec::Dense { inputs, .. } => {
                let shapes = self.param_shapes();
                vec![
                    normal(shapes[0].clone(), (2.0 / *inputs as f64).sqrt(), rng),
                    Tensor::zeros(shapes[1].clone()),
                ]
            }
            LayerSpec::Classifier { inputs, .. } => {
                let shapes = self.param_shapes();
                vec![
                    normal(shapes[0].clone(), (1.0 / *inputs as f64).sqrt(), rng),
                    Tensor::zeros(shapes[1].clone()),
                ]
            }
            LayerSpec::Conv2d {
                in_channels, kernel, ..
            } => {
                let shapes = self.param_shapes();
                let fan_in = (in_channels * kernel * kernel) as f64;
                vec![
                    normal(shapes[0].clone(), (2.0 / fan_in).sqrt(), rng),
                    Tensor::zeros(shapes[1].clone()),
                ]
            }
            LayerSpec::GroupNorm { .. } => {
                let shapes = self.param_shapes();
                vec![
                    Tensor::full(shapes[0].clone(), T::one()),
                    Tensor::zeros(shapes[1].clone()),
                ]
            }
            LayerSpec::Residual { body } => body.iter().flat_map(|l| l.init_params(rng)).collect(),
            _ => Vec::new(),
        }
    }

    /// Forward pass. With `record` set, also returns the cache `backward` needs.
    pub fn forward<T: Scalar>(
        &self,
        params: &[Tensor<T>],
        x: &Tensor<T>,
        record: bool,
    ) -> Result<(Tensor<T>, Option<Cache<T>>)> {
        let sample = x.shape().sample()?;
        let out_sample = self.output_shape(&sample)?;
        let out_shape = out_sample.batched(x.batch())?;
        if params.len() != self.num_param_tensors() {
            return Err(Error::structure(format!(
                "layer {self:?} given {} parameter tensors",
                params.len()
            )));
        }
        let keep_input = |x: &Tensor<T>| record.then(|| Cache::Input(x.clone()));
        let keep_shape = || record.then(|| Cache::InputShape(sample.clone()));
        match self {
            LayerSpec::Dense { inputs, outputs } => {
                let y = dense_forward(&params[0], &params[1], x, *inputs, *outputs, out_shape);
                Ok((y, keep_input(x)))
            }
            LayerSpec::Classifier { inputs, classes } => {
                let y = dense_forward(&params[0], &params[1], x, *inputs, *classes, out_shape);
                Ok((y, keep_input(x)))
            }
            LayerSpec::Conv2d { stride, padding, .. } => {
                let y = conv_forward(&params[0], &params[1], x, *stride, *padding, out_shape);
                Ok((y, keep_input(x)))
            }
            LayerSpec::Relu => {
                let y = x.map(|v| if v.is_nan() || v > T::zero() { v } else { T::zero() });
                let cache = record.then(|| Cache::Output(y.clone()));
                Ok((y, cache))
            }
            LayerSpec::GroupNorm { groups, .. } => {
                let (y, xhat, inv_std) = norm_forward(&params[0], &params[1], x, *groups);
                Ok((y, record.then_some(Cache::Norm { xhat, inv_std })))
            }
            LayerSpec::AvgPool { window } => Ok((pool_forward(x, *window, out_shape), keep_shape())),
            LayerSpec::GlobalAvgPool => {
                let d = sample.dims();
                Ok((pool_forward(x, d[1], out_shape), keep_shape()))
            }
            LayerSpec::Flatten => Ok((x.clone().reshape(out_shape)?, keep_shape())),
            LayerSpec::ZeroPad { .. } => {
                let plan = adapter_plan(&sample, &out_sample)?;
                Ok((adapter_forward(x, &plan, out_shape), keep_shape()))
            }
            LayerSpec::Residual { body } => {
                let mut caches = Vec::with_capacity(body.len());
                let mut h = x.clone();
                let mut offset = 0;
                for layer in body {
                    let n = layer.num_param_tensors();
                    let (y, c) = layer.forward(&params[offset..offset + n], &h, record)?;
                    offset += n;
                    h = y;
                    if let Some(c) = c {
                        caches.push(c);
                    }
                }
                let plan = adapter_plan(&sample, &out_sample)?;
                let shortcut = adapter_forward(x, &plan, out_shape);
                h.add_assign(&shortcut)?;
                let cache = record.then(|| Cache::Residual {
                    body: caches,
                    input: sample.clone(),
                });
                Ok((h, cache))
            }
        }
    }

    /// Backward pass: returns the input gradient (when `need_input`) and the
    /// parameter gradients in storage order.
    pub fn backward<T: Scalar>(
        &self,
        params: &[Tensor<T>],
        cache: &Cache<T>,
        grad: &Tensor<T>,
        need_input: bool,
    ) -> Result<(Option<Tensor<T>>, Vec<Tensor<T>>)> {
        let batch = grad.batch();
        let mismatch = || Error::structure(format!("cache does not belong to layer {self:?}"));
        match (self, cache) {
            (LayerSpec::Dense { inputs, outputs }, Cache::Input(x))
            | (
                LayerSpec::Classifier {
                    inputs,
                    classes: outputs,
                },
                Cache::Input(x),
            ) => {
                let (dx, dw, db) = dense_backward(&params[0], x, grad, *inputs, *outputs, need_input);
                Ok((dx, vec![dw, db]))
            }
            (LayerSpec::Conv2d { stride, padding, .. }, Cache::Input(x)) => {
                let (dx, dw, db) = conv_backward(&params[0], x, grad, *stride, *padding, need_input);
                Ok((dx, vec![dw, db]))
            }
            (LayerSpec::Relu, Cache::Output(y)) => {
                let mut dx = grad.clone();
                for (g, &v) in dx.data_mut().iter_mut().zip(y.data()) {
                    if v <= T::zero() {
                        *g = T::zero();
                    }
                }
                Ok((Some(dx), Vec::new()))
            }
            (LayerSpec::GroupNorm { groups, .. }, Cache::Norm { xhat, inv_std }) => {
                let (dx, dg, db) = norm_backward(&params[0], xhat, inv_std, grad, *groups);
                Ok((Some(dx), vec![dg, db]))
            }
            (LayerSpec::AvgPool { window }, Cache::InputShape(s)) => {
                Ok((Some(pool_backward(grad, *window, s.batched(batch)?)), Vec::new()))
            }
            (LayerSpec::GlobalAvgPool, Cache::InputShape(s)) => {
                let w = s.dims()[1];
                Ok((Some(pool_backward(grad, w, s.batched(batch)?)), Vec::new()))
            }
            (LayerSpec::Flatten, Cache::InputShape(s)) => {
                Ok((Some(grad.clone().reshape(s.batched(batch)?)?), Vec::new()))
            }
            (LayerSpec::ZeroPad { target }, Cache::InputShape(s)) => {
                let plan = adapter_plan(s, &Shape::new(target.clone())?)?;
                Ok((Some(adapter_backward(grad, &plan, s.batched(batch)?)), Vec::new()))
            }
            (LayerSpec::Residual { body }, Cache::Residual { body: caches, input }) => {
                if caches.len() != body.len() {
                    return Err(mismatch());
                }
                let mut offsets = Vec::with_capacity(body.len());
                let mut offset = 0;
                for layer in body {
                    offsets.push(offset);
                    offset += layer.num_param_tensors();
                }
                let mut param_grads: Vec<Vec<Tensor<T>>> = vec![Vec::new(); body.len()];
                let mut g = grad.clone();
                for (i, layer) in body.iter().enumerate().rev() {
                    let n = layer.num_param_tensors();
                    let p = &params[offsets[i]..offsets[i] + n];
                    let (dx, pg) = layer.backward(p, &caches[i], &g, true)?;
                    param_grads[i] = pg;
                    g = dx.expect("input gradient requested");
                }
                let out = Shape::new(grad.dims()[1..].to_vec())?;
                let plan = adapter_plan(input, &out)?;
                g.add_assign(&adapter_backward(grad, &plan, input.batched(batch)?))?;
                Ok((Some(g), param_grads.into_iter().flatten().collect()))
            }
            _ => Err(mismatch()),
        }
        .map(|(dx, pg)| (if need_input { dx } else { None }, pg))
    }
}

/// Output shape of a layer chain.
pub fn chain_output_shape(layers: &[LayerSpec], input: &Shape) -> Result<Shape> {
    layers.iter().try_fold(input.clone(), |s, l| l.output_shape(&s))
}

fn dense_forward<T: Scalar>(
    w: &Tensor<T>,
    b: &Tensor<T>,
    x: &Tensor<T>,
    inputs: usize,
    outputs: usize,
    out_shape: Shape,
) -> Tensor<T> {
    let batch = x.batch();
    let (w, b, xs) = (w.data(), b.data(), x.data());
    let mut y = vec![T::zero(); batch * outputs];
    for n in 0..batch {
        let row = &xs[n * inputs..(n + 1) * inputs];
        for o in 0..outputs {
            let wr = &w[o * inputs..(o + 1) * inputs];
            let mut acc = b[o];
            for i in 0..inputs {
                acc = acc + wr[i] * row[i];
            }
            y[n * outputs + o] = acc;
        }
    }
    Tensor::from_vec(out_shape, y).expect("sized to shape")
}

fn dense_backward<T: Scalar>(
    w: &Tensor<T>,
    x: &Tensor<T>,
    g: &Tensor<T>,
    inputs: usize,
    outputs: usize,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let batch = x.batch();
    let (wd, xs, gs) = (w.data(), x.data(), g.data());
    let mut dw = vec![T::zero(); outputs * inputs];
    let mut db = vec![T::zero(); outputs];
    for n in 0..batch {
        let row = &xs[n * inputs..(n + 1) * inputs];
        for o in 0..outputs {
            let go = gs[n * outputs + o];
            db[o] = db[o] + go;
            let dwr = &mut dw[o * inputs..(o + 1) * inputs];
            for i in 0..inputs {
                dwr[i] = dwr[i] + go * row[i];
            }
        }
    }
    let dx = need_input.then(|| {
        let mut dx = vec![T::zero(); batch * inputs];
        for n in 0..batch {
            let drow = &mut dx[n * inputs..(n + 1) * inputs];
            for o in 0..outputs {
                let go = gs[n * outputs + o];
                let wr = &wd[o * inputs..(o + 1) * inputs];
                for i in 0..inputs {
                    drow[i] = drow[i] + wr[i] * go;
                }
            }
        }
        Tensor::from_vec(x.shape().clone(), dx).expect("sized to shape")
    });
    (
        dx,
        Tensor::from_vec(w.shape().clone(), dw).expect("sized"),
        Tensor::from_vec(Shape::new(vec![outputs]).expect("positive"), db).expect("sized"),
    )
}

fn conv_forward<T: Scalar>(
    w: &Tensor<T>,
    b: &Tensor<T>,
    x: &Tensor<T>,
    stride: usize,
    padding: usize,
    out_shape: Shape,
) -> Tensor<T> {
    let [batch, ic, ih, iw]: [usize; 4] = x.dims().try_into().expect("rank-4 input");
    let (oc, k) = (w.dims()[0], w.dims()[2]);
    let (oh, ow) = (out_shape.dims()[2], out_shape.dims()[3]);
    let (wd, bd, xs) = (w.data(), b.data(), x.data());
    let mut y = vec![T::zero(); batch * oc * oh * ow];
    for n in 0..batch {
        for o in 0..oc {
            for r in 0..oh {
                for c in 0..ow {
                    let mut acc = bd[o];
                    for ch in 0..ic {
                        for kh in 0..k {
                            let yy = (r * stride + kh) as isize - padding as isize;
                            if yy < 0 || yy >= ih as isize {
                                continue;
                            }
                            for kw in 0..k {
                                let xx = (c * stride + kw) as isize - padding as isize;
                                if xx < 0 || xx >= iw as isize {
                                    continue;
                                }
                                let xv = xs[((n * ic + ch) * ih + yy as usize) * iw + xx as usize];
                                acc = acc + wd[((o * ic + ch) * k + kh) * k + kw] * xv;
                            }
                        }
                    }
                    y[((n * oc + o) * oh + r) * ow + c] = acc;
                }
            }
        }
    }
    Tensor::from_vec(out_shape, y).expect("sized to shape")
}

fn conv_backward<T: Scalar>(
    w: &Tensor<T>,
    x: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    padding: usize,
    need_input: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let [batch, ic, ih, iw]: [usize; 4] = x.dims().try_into().expect("rank-4 input");
    let (oc, k) = (w.dims()[0], w.dims()[2]);
    let (oh, ow) = (g.dims()[2], g.dims()[3]);
    let (wd, xs, gs) = (w.data(), x.data(), g.data());
    let mut dw = vec![T::zero(); wd.len()];
    let mut db = vec![T::zero(); oc];
    let mut dx = if need_input {
        vec![T::zero(); xs.len()]
    } else {
        Vec::new()
    };
    for n in 0..batch {
        for o in 0..oc {
            for r in 0..oh {
                for c in 0..ow {
                    let go = gs[((n * oc + o) * oh + r) * ow + c];
                    db[o] = db[o] + go;
                    for ch in 0..ic {
                        for kh in 0..k {
                            let yy = (r * stride + kh) as isize - padding as isize;
                            if yy < 0 || yy >= ih as isize {
                                continue;
                            }
                            for kw in 0..k {
                                let xx = (c * stride + kw) as isize - padding as isize;
                                if xx < 0 || xx >= iw as isize {
                                    continue;
                                }
                                let xi = ((n * ic + ch) * ih + yy as usize) * iw + xx as usize;
                                let wi = ((o * ic + ch) * k + kh) * k + kw;
                                dw[wi] = dw[wi] + go * xs[xi];
                                if need_input {
                                    dx[xi] = dx[xi] + go * wd[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        need_input.then(|| Tensor::from_vec(x.shape().clone(), dx).expect("sized")),
        Tensor::from_vec(w.shape().clone(), dw).expect("sized"),
        Tensor::from_vec(Shape::new(vec![oc]).expect("positive"), db).expect("sized"),
    )
}

/// (channels, spatial size) of a batched feature or image tensor.
fn channel_layout(dims: &[usize]) -> (usize, usize) {
    let channels = dims[1];
    let spatial = dims[2..].iter().product::<usize>();
    (channels, spatial)
}

fn norm_forward<T: Scalar>(
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    x: &Tensor<T>,
    groups: usize,
) -> (Tensor<T>, Tensor<T>, Vec<T>) {
    let batch = x.batch();
    let (channels, spatial) = channel_layout(x.dims());
    let per_group = channels / groups * spatial;
    let count = T::of(per_group as f64);
    let eps = T::of(NORM_EPS);
    let xs = x.data();
    let mut xhat = vec![T::zero(); xs.len()];
    let mut y = vec![T::zero(); xs.len()];
    let mut inv_std = Vec::with_capacity(batch * groups);
    for n in 0..batch {
        for gi in 0..groups {
            let start = (n * channels + gi * (channels / groups)) * spatial;
            let seg = &xs[start..start + per_group];
            let mean = seg.iter().copied().sum::<T>() / count;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv = T::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (i, &v) in seg.iter().enumerate() {
                let idx = start + i;
                let ch = (idx / spatial) % channels;
                let h = (v - mean) * inv;
                xhat[idx] = h;
                y[idx] = gamma.data()[ch] * h + beta.data()[ch];
            }
        }
    }
    (
        Tensor::from_vec(x.shape().clone(), y).expect("sized"),
        Tensor::from_vec(x.shape().clone(), xhat).expect("sized"),
        inv_std,
    )
}

fn norm_backward<T: Scalar>(
    gamma: &Tensor<T>,
    xhat: &Tensor<T>,
    inv_std: &[T],
    g: &Tensor<T>,
    groups: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let batch = g.batch();
    let (channels, spatial) = channel_layout(g.dims());
    let per_group = channels / groups * spatial;
    let count = T::of(per_group as f64);
    let (gs, hs, gam) = (g.data(), xhat.data(), gamma.data());
    let mut dgamma = vec![T::zero(); channels];
    let mut dbeta = vec![T::zero(); channels];
    let mut dx = vec![T::zero(); gs.len()];
    for n in 0..batch {
        for gi in 0..groups {
            let start = (n * channels + gi * (channels / groups)) * spatial;
            let mut sum_d = T::zero();
            let mut sum_dh = T::zero();
            for i in start..start + per_group {
                let ch = (i / spatial) % channels;
                dgamma[ch] = dgamma[ch] + gs[i] * hs[i];
                dbeta[ch] = dbeta[ch] + gs[i];
                let d = gs[i] * gam[ch];
                sum_d = sum_d + d;
                sum_dh = sum_dh + d * hs[i];
            }
            let scale = inv_std[n * groups + gi] / count;
            for i in start..start + per_group {
                let ch = (i / spatial) % channels;
                let d = gs[i] * gam[ch];
                dx[i] = scale * (count * d - sum_d - hs[i] * sum_dh);
            }
        }
    }
    let cshape = Shape::new(vec![channels]).expect("positive");
    (
        Tensor::from_vec(g.shape().clone(), dx).expect("sized"),
        Tensor::from_vec(cshape.clone(), dgamma).expect("sized"),
        Tensor::from_vec(cshape, dbeta).expect("sized"),
    )
}

/// Average-pool the trailing two axes of a rank-4 tensor by `f`.
fn pool_forward<T: Scalar>(x: &Tensor<T>, f: usize, out_shape: Shape) -> Tensor<T> {
    let [batch, ch, ih, iw]: [usize; 4] = x.dims().try_into().expect("rank-4 input");
    let (oh, ow) = (ih / f, iw / f);
    let area = T::of((f * f) as f64);
    let xs = x.data();
    let mut y = vec![T::zero(); batch * ch * oh * ow];
    for nc in 0..batch * ch {
        for r in 0..oh {
            for c in 0..ow {
                let mut acc = T::zero();
                for u in 0..f {
                    let base = (nc * ih + r * f + u) * iw + c * f;
                    for v in 0..f {
                        acc = acc + xs[base + v];
                    }
                }
                y[(nc * oh + r) * ow + c] = acc / area;
            }
        }
    }
    Tensor::from_vec(out_shape, y).expect("sized")
}

fn pool_backward<T: Scalar>(g: &Tensor<T>, f: usize, in_shape: Shape) -> Tensor<T> {
    let [batch, ch, ih, iw]: [usize; 4] = in_shape.dims().try_into().expect("rank-4 input");
    let (oh, ow) = (ih / f, iw / f);
    let area = T::of((f * f) as f64);
    let gs = g.data();
    let mut dx = vec![T::zero(); batch * ch * ih * iw];
    for nc in 0..batch * ch {
        for r in 0..oh {
            for c in 0..ow {
                let share = gs[(nc * oh + r) * ow + c] / area;
                for u in 0..f {
                    let base = (nc * ih + r * f + u) * iw + c * f;
                    for v in 0..f {
                        dx[base + v] = share;
                    }
                }
            }
        }
    }
    Tensor::from_vec(in_shape, dx).expect("sized")
}

fn adapter_forward<T: Scalar>(x: &Tensor<T>, plan: &AdapterPlan, out_shape: Shape) -> Tensor<T> {
    if plan.is_identity() {
        return x.clone();
    }
    let pooled = if plan.pool > 1 {
        let d = x.dims();
        let shape = Shape::new(vec![d[0], d[1], d[2] / plan.pool, d[3] / plan.pool]).expect("positive");
        pool_forward(x, plan.pool, shape)
    } else {
        x.clone()
    };
    let batch = x.batch();
    let src_row = pooled.row_len();
    let dst_row = out_shape.numel() / batch;
    let mut y = vec![T::zero(); batch * dst_row];
    for n in 0..batch {
        y[n * dst_row..n * dst_row + src_row].copy_from_slice(pooled.row(n));
    }
    Tensor::from_vec(out_shape, y).expect("sized")
}

fn adapter_backward<T: Scalar>(g: &Tensor<T>, plan: &AdapterPlan, in_shape: Shape) -> Tensor<T> {
    if plan.is_identity() {
        return g.clone();
    }
    let batch = g.batch();
    let d = in_shape.dims();
    let pooled_dims: Vec<usize> = if d.len() == 4 {
        vec![d[0], d[1], d[2] / plan.pool, d[3] / plan.pool]
    } else {
        d.to_vec()
    };
    let pooled_shape = Shape::new(pooled_dims).expect("positive");
    let src_row = pooled_shape.numel() / batch;
    let mut head = Vec::with_capacity(batch * src_row);
    for n in 0..batch {
        head.extend_from_slice(&g.row(n)[..src_row]);
    }
    let head = Tensor::from_vec(pooled_shape, head).expect("sized");
    if plan.pool > 1 {
        pool_backward(&head, plan.pool, in_shape)
    } else {
        head
    }
}

/// Apply the zero-pad adapter to an activation batch.
pub fn zero_pad_adapter<T: Scalar>(z: &Tensor<T>, target: &Shape) -> Result<Tensor<T>> {
    let layer = LayerSpec::ZeroPad {
        target: target.dims().to_vec(),
    };
    layer.forward(&[], z, false).map(|(y, _)| y)
}
