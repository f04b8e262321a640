//! Differentiable layers over mini-batches.
//!
//! Each forward returns its output together with a context holding whatever
//! the matching backward needs. Convolutional activations are `[B × C × L]`,
//! dense activations are `[B × n]`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{for_each_chunk, map_indexed, Execution};
use crate::tensor::{axpy, conv1d_backward_raw, conv1d_raw, dot, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

fn dims3(op: &'static str, t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, c, l] => Ok((b, c, l)),
        ref s => Err(Error::shape(op, format!("expected [B x C x L], got {s:?}"))),
    }
}

fn dims2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [b, n] => Ok((b, n)),
        ref s => Err(Error::shape(op, format!("expected [B x n], got {s:?}"))),
    }
}

fn same_shape(op: &'static str, expected: &[usize], got: &Tensor) -> Result<()> {
    if got.shape() != expected {
        return Err(Error::shape(
            op,
            format!("upstream {:?}, expected {expected:?}", got.shape()),
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// convolution

/// Per-sample `conv1d` over a `[B × C_in × L]` batch.
pub fn conv1d_batch(input: &Tensor, kernels: &Tensor, bias: &Tensor, exec: Execution) -> Result<Tensor> {
    let (b, cin, len) = dims3("conv1d", input)?;
    let [cout, kcin, ksize] = *kernels.shape() else {
        return Err(Error::shape("conv1d", format!("kernels {:?}", kernels.shape())));
    };
    if kcin != cin || bias.shape() != [cout] {
        return Err(Error::shape(
            "conv1d",
            format!(
                "input C_in = {cin}, kernels {:?}, bias {:?}",
                kernels.shape(),
                bias.shape()
            ),
        ));
    }
    let mut out = vec![0.0; b * cout * len];
    let (x, k, bv) = (input.data(), kernels.data(), bias.data());
    for_each_chunk(exec, &mut out, cout * len, |i, o| {
        conv1d_raw(&x[i * cin * len..(i + 1) * cin * len], cin, len, k, bv, cout, ksize, o)
    });
    Tensor::new(vec![b, cout, len], out)
}

#[derive(Clone, Debug)]
pub struct ConvBatchGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// Backward of [`conv1d_batch`]. Parameter gradients are summed over the
/// batch in sample order.
pub fn conv1d_batch_grad(
    input: &Tensor,
    kernels: &Tensor,
    upstream: &Tensor,
    exec: Execution,
) -> Result<ConvBatchGrads> {
    let (b, cin, len) = dims3("conv1d_grad", input)?;
    let [cout, _, ksize] = *kernels.shape() else {
        return Err(Error::shape("conv1d_grad", format!("kernels {:?}", kernels.shape())));
    };
    same_shape("conv1d_grad", &[b, cout, len], upstream)?;
    let (x, k, up) = (input.data(), kernels.data(), upstream.data());
    let partials = map_indexed(exec, b, |i| {
        let mut dx = vec![0.0; cin * len];
        let mut dk = vec![0.0; k.len()];
        let mut db = vec![0.0; cout];
        conv1d_backward_raw(
            &x[i * cin * len..(i + 1) * cin * len],
            cin,
            len,
            k,
            cout,
            ksize,
            &up[i * cout * len..(i + 1) * cout * len],
            &mut dx,
            &mut dk,
            &mut db,
        );
        (dx, dk, db)
    });
    let mut d_in = Vec::with_capacity(b * cin * len);
    let mut d_k = vec![0.0; k.len()];
    let mut d_b = vec![0.0; cout];
    for (dx, dk, db) in partials {
        d_in.extend_from_slice(&dx);
        axpy(1.0, &dk, &mut d_k);
        axpy(1.0, &db, &mut d_b);
    }
    Ok(ConvBatchGrads {
        input: Tensor::new(vec![b, cin, len], d_in)?,
        kernels: Tensor::new(kernels.shape().to_vec(), d_k)?,
        bias: Tensor::vector(d_b),
    })
}

// ---------------------------------------------------------------------------
// batch normalization

/// Running statistics of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BnStats {
    pub mean: Tensor,
    pub var: Tensor,
}

impl BnStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::filled(&[channels], 1.0),
        }
    }

    /// Exponential moving average; `momentum` is the weight kept on the old
    /// value. The running variance uses the unbiased batch estimate.
    pub fn update(&mut self, ctx: &BnContext, momentum: f64) {
        let Some(train) = &ctx.train else { return };
        let n = train.count as f64;
        let correction = if train.count > 1 { n / (n - 1.0) } else { 1.0 };
        for (c, (m, v)) in self
            .mean
            .data_mut()
            .iter_mut()
            .zip(self.var.data_mut().iter_mut())
            .enumerate()
        {
            *m = momentum * *m + (1.0 - momentum) * train.mean[c];
            *v = momentum * *v + (1.0 - momentum) * train.var[c] * correction;
        }
    }
}

#[derive(Clone, Debug)]
pub struct BnTrainCache {
    xhat: Tensor,
    inv_std: Vec<f64>,
    mean: Vec<f64>,
    var: Vec<f64>,
    count: usize,
}

#[derive(Clone, Debug)]
pub struct BnContext {
    train: Option<BnTrainCache>,
}

impl BnContext {
    pub fn mode(&self) -> Mode {
        if self.train.is_some() {
            Mode::Train
        } else {
            Mode::Infer
        }
    }

    /// Biased per-channel batch variance of the last train-mode forward.
    pub fn batch_var(&self) -> Option<&[f64]> {
        self.train.as_ref().map(|t| t.var.as_slice())
    }

    pub fn batch_mean(&self) -> Option<&[f64]> {
        self.train.as_ref().map(|t| t.mean.as_slice())
    }
}

pub fn batchnorm1d_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    stats: &BnStats,
    mode: Mode,
    eps: f64,
) -> Result<(Tensor, BnContext)> {
    let (b, c, len) = dims3("batchnorm1d", input)?;
    if gamma.shape() != [c] || beta.shape() != [c] || stats.mean.shape() != [c] {
        return Err(Error::shape(
            "batchnorm1d",
            format!(
                "{c} channels but gamma {:?}, beta {:?}, running {:?}",
                gamma.shape(),
                beta.shape(),
                stats.mean.shape()
            ),
        ));
    }
    let x = input.data();
    let at = |i: usize, ch: usize| (i * c + ch) * len;
    let mut out = vec![0.0; x.len()];
    match mode {
        Mode::Infer => {
            for ch in 0..c {
                let inv = 1.0 / (stats.var.data()[ch] + eps).sqrt();
                let scale = gamma.data()[ch] * inv;
                let shift = beta.data()[ch] - stats.mean.data()[ch] * scale;
                for i in 0..b {
                    let o = at(i, ch);
                    for t in 0..len {
                        out[o + t] = x[o + t] * scale + shift;
                    }
                }
            }
            Ok((Tensor::new(vec![b, c, len], out)?, BnContext { train: None }))
        }
        Mode::Train => {
            let count = b * len;
            if count <= 1 {
                return Err(Error::InvalidArgument(
                    "batchnorm1d in train mode needs batch * length > 1".into(),
                ));
            }
            let n = count as f64;
            let mut xhat = vec![0.0; x.len()];
            let mut means = vec![0.0; c];
            let mut vars = vec![0.0; c];
            let mut inv_std = vec![0.0; c];
            for ch in 0..c {
                let mut sum = 0.0;
                for i in 0..b {
                    sum += x[at(i, ch)..at(i, ch) + len].iter().sum::<f64>();
                }
                let mean = sum / n;
                let mut sq = 0.0;
                for i in 0..b {
                    sq += x[at(i, ch)..at(i, ch) + len]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
                let var = sq / n;
                let inv = 1.0 / (var + eps).sqrt();
                let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
                for i in 0..b {
                    let o = at(i, ch);
                    for t in 0..len {
                        let h = (x[o + t] - mean) * inv;
                        xhat[o + t] = h;
                        out[o + t] = g * h + bt;
                    }
                }
                means[ch] = mean;
                vars[ch] = var;
                inv_std[ch] = inv;
            }
            let shape = vec![b, c, len];
            Ok((
                Tensor::new(shape.clone(), out)?,
                BnContext {
                    train: Some(BnTrainCache {
                        xhat: Tensor::new(shape, xhat)?,
                        inv_std,
                        mean: means,
                        var: vars,
                        count,
                    }),
                },
            ))
        }
    }
}

#[derive(Clone, Debug)]
pub struct BnGrads {
    pub input: Tensor,
    pub gamma: Tensor,
    pub beta: Tensor,
}

pub fn batchnorm1d_backward(ctx: &BnContext, gamma: &Tensor, upstream: &Tensor) -> Result<BnGrads> {
    let cache = ctx
        .train
        .as_ref()
        .ok_or(Error::InferContext { op: "batchnorm1d_backward" })?;
    let (b, c, len) = dims3("batchnorm1d_backward", &cache.xhat)?;
    same_shape("batchnorm1d_backward", cache.xhat.shape(), upstream)?;
    let (up, xh) = (upstream.data(), cache.xhat.data());
    let n = cache.count as f64;
    let at = |i: usize, ch: usize| (i * c + ch) * len;
    let mut d_in = vec![0.0; up.len()];
    let mut d_gamma = vec![0.0; c];
    let mut d_beta = vec![0.0; c];
    for ch in 0..c {
        let (mut sum_up, mut sum_up_xh) = (0.0, 0.0);
        for i in 0..b {
            let o = at(i, ch);
            sum_up += up[o..o + len].iter().sum::<f64>();
            sum_up_xh += dot(&up[o..o + len], &xh[o..o + len]);
        }
        d_beta[ch] = sum_up;
        d_gamma[ch] = sum_up_xh;
        let k = gamma.data()[ch] * cache.inv_std[ch] / n;
        for i in 0..b {
            let o = at(i, ch);
            for t in 0..len {
                d_in[o + t] = k * (n * up[o + t] - sum_up - xh[o + t] * sum_up_xh);
            }
        }
    }
    Ok(BnGrads {
        input: Tensor::new(vec![b, c, len], d_in)?,
        gamma: Tensor::vector(d_gamma),
        beta: Tensor::vector(d_beta),
    })
}

// ---------------------------------------------------------------------------
// relu

#[derive(Clone, Debug, PartialEq)]
pub struct ReluContext {
    active: Vec<bool>,
    shape: Vec<usize>,
}

impl ReluContext {
    /// Which units passed a positive input.
    pub fn active(&self) -> &[bool] {
        &self.active
    }
}

pub fn relu(input: &Tensor) -> (Tensor, ReluContext) {
    let active: Vec<bool> = input.data().iter().map(|&v| v > 0.0).collect();
    let out = input.map(|v| if v > 0.0 { v } else { 0.0 });
    (
        out,
        ReluContext {
            active,
            shape: input.shape().to_vec(),
        },
    )
}

/// The subgradient at zero is taken as 0.
pub fn relu_backward(ctx: &ReluContext, upstream: &Tensor) -> Result<Tensor> {
    same_shape("relu_backward", &ctx.shape, upstream)?;
    let data = upstream
        .data()
        .iter()
        .zip(&ctx.active)
        .map(|(&u, &a)| if a { u } else { 0.0 })
        .collect();
    Tensor::new(ctx.shape.clone(), data)
}

// ---------------------------------------------------------------------------
// dropout

#[derive(Clone, Debug)]
pub struct DropoutContext {
    /// `None` when the layer acted as the identity.
    scale: Option<Vec<f64>>,
    shape: Vec<usize>,
}

impl DropoutContext {
    pub fn scale(&self) -> Option<&[f64]> {
        self.scale.as_deref()
    }
}

/// Inverted dropout: in train mode each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`; inference is the
/// identity.
pub fn dropout<R: Rng + ?Sized>(
    input: &Tensor,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, DropoutContext)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    let shape = input.shape().to_vec();
    if mode == Mode::Infer || rate == 0.0 {
        return Ok((input.clone(), DropoutContext { scale: None, shape }));
    }
    let keep = 1.0 / (1.0 - rate);
    let scale: Vec<f64> = (0..input.len())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let out = input.data().iter().zip(&scale).map(|(x, s)| x * s).collect();
    Ok((
        Tensor::new(shape.clone(), out)?,
        DropoutContext {
            scale: Some(scale),
            shape,
        },
    ))
}

pub fn dropout_backward(ctx: &DropoutContext, upstream: &Tensor) -> Result<Tensor> {
    same_shape("dropout_backward", &ctx.shape, upstream)?;
    Ok(match &ctx.scale {
        None => upstream.clone(),
        Some(s) => Tensor::new(
            ctx.shape.clone(),
            upstream.data().iter().zip(s).map(|(u, s)| u * s).collect(),
        )?,
    })
}

// ---------------------------------------------------------------------------
// dense

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Identity,
    Relu,
}

#[derive(Clone, Debug)]
pub struct DenseContext {
    input: Tensor,
    relu: Option<ReluContext>,
}

impl DenseContext {
    pub fn relu(&self) -> Option<&ReluContext> {
        self.relu.as_ref()
    }
}

const ROW_BLOCK: usize = 4;

/// Affine map of each row of a `[B × n]` batch, followed by `activation`.
/// Softmax outputs go through [`softmax_xent`] instead, which fuses the
/// loss gradient.
pub fn dense_forward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    activation: Activation,
    exec: Execution,
) -> Result<(Tensor, DenseContext)> {
    let (b, n) = dims2("dense", input)?;
    let [m, wn] = *weights.shape() else {
        return Err(Error::shape("dense", format!("weights {:?}", weights.shape())));
    };
    if wn != n || bias.shape() != [m] {
        return Err(Error::shape(
            "dense",
            format!("input width {n}, weights {:?}, bias {:?}", weights.shape(), bias.shape()),
        ));
    }
    let mut out = vec![0.0; b * m];
    let (x, w, bv) = (input.data(), weights.data(), bias.data());
    // Blocks of rows share each weight row while it is in cache.
    for_each_chunk(exec, &mut out, m * ROW_BLOCK, |blk, rows| {
        let i0 = blk * ROW_BLOCK;
        for k in 0..m {
            let wk = &w[k * n..(k + 1) * n];
            for (r, row) in rows.chunks_mut(m).enumerate() {
                row[k] = dot(wk, &x[(i0 + r) * n..(i0 + r + 1) * n]) + bv[k];
            }
        }
    });
    let affine = Tensor::new(vec![b, m], out)?;
    let (out, relu) = match activation {
        Activation::Identity => (affine, None),
        Activation::Relu => {
            let (o, c) = relu(&affine);
            (o, Some(c))
        }
    };
    Ok((
        out,
        DenseContext {
            input: input.clone(),
            relu,
        },
    ))
}

#[derive(Clone, Debug)]
pub struct DenseGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(
    ctx: &DenseContext,
    weights: &Tensor,
    upstream: &Tensor,
    exec: Execution,
) -> Result<DenseGrads> {
    let (b, n) = dims2("dense_backward", &ctx.input)?;
    let m = weights.dim(0);
    same_shape("dense_backward", &[b, m], upstream)?;
    let up = match &ctx.relu {
        Some(r) => relu_backward(r, upstream)?,
        None => upstream.clone(),
    };
    let (x, w, g) = (ctx.input.data(), weights.data(), up.data());

    let mut d_in = vec![0.0; b * n];
    for_each_chunk(exec, &mut d_in, n * ROW_BLOCK, |blk, rows| {
        let i0 = blk * ROW_BLOCK;
        for k in 0..m {
            let wk = &w[k * n..(k + 1) * n];
            for (r, row) in rows.chunks_mut(n).enumerate() {
                let gk = g[(i0 + r) * m + k];
                if gk != 0.0 {
                    axpy(gk, wk, row);
                }
            }
        }
    });
    let mut d_w = vec![0.0; m * n];
    for_each_chunk(exec, &mut d_w, n, |k, row| {
        for i in 0..b {
            let gk = g[i * m + k];
            if gk != 0.0 {
                axpy(gk, &x[i * n..(i + 1) * n], row);
            }
        }
    });
    let mut d_b = vec![0.0; m];
    for i in 0..b {
        axpy(1.0, &g[i * m..(i + 1) * m], &mut d_b);
    }
    Ok(DenseGrads {
        input: Tensor::new(vec![b, n], d_in)?,
        weights: Tensor::new(vec![m, n], d_w)?,
        bias: Tensor::vector(d_b),
    })
}

// ---------------------------------------------------------------------------
// pooling

/// `[B × C × L] -> [B × C]` temporal mean.
pub fn gap_forward(input: &Tensor) -> Result<Tensor> {
    let (b, c, len) = dims3("global_average_pool", input)?;
    let inv = 1.0 / len as f64;
    let data = input
        .data()
        .chunks_exact(len)
        .map(|row| row.iter().sum::<f64>() * inv)
        .collect();
    Tensor::new(vec![b, c], data)
}

pub fn gap_backward(upstream: &Tensor, len: usize) -> Result<Tensor> {
    let (b, c) = dims2("global_average_pool_backward", upstream)?;
    let inv = 1.0 / len as f64;
    let mut data = Vec::with_capacity(b * c * len);
    for &u in upstream.data() {
        data.extend(std::iter::repeat(u * inv).take(len));
    }
    Tensor::new(vec![b, c, len], data)
}

// ---------------------------------------------------------------------------
// softmax + categorical cross-entropy

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

#[derive(Clone, Debug)]
pub struct SoftmaxXent {
    pub probabilities: Tensor,
    pub loss: f64,
    /// `p - onehot(target)`.
    pub d_logits: Tensor,
}

pub fn softmax_xent(logits: &Tensor, target: usize) -> Result<SoftmaxXent> {
    let [k] = *logits.shape() else {
        return Err(Error::shape("softmax_xent", format!("logits {:?}", logits.shape())));
    };
    if k < 2 {
        return Err(Error::InvalidArgument("softmax_xent needs at least 2 classes".into()));
    }
    if target >= k {
        return Err(Error::Label {
            index: 0,
            label: target,
            classes: k,
        });
    }
    let z = logits.data();
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_total = z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    let p = softmax(z);
    let loss = log_total - (z[target] - max);
    let mut d = p.clone();
    d[target] -= 1.0;
    Ok(SoftmaxXent {
        probabilities: Tensor::vector(p),
        loss,
        d_logits: Tensor::vector(d),
    })
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}
