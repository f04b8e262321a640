//! Dense tensors and the numeric kernels every layer is built from.
//!
//! Buffers are row-major, channels-major and time-minor: a `[C × L]` signal
//! stores channel `c` at `data[c * L..(c + 1) * L]`.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} elements, buffer has {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// A rank-1 tensor.
    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Elements drawn i.i.d. from `N(0, std^2)`.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite non-negative std");
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(|_| normal.sample(rng)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// Slice of the `i`-th entry along the leading axis.
    pub fn outer(&self, i: usize) -> &[f64] {
        let stride = self.data.len() / self.shape[0];
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn outer_mut(&mut self, i: usize) -> &mut [f64] {
        let stride = self.data.len() / self.shape[0];
        &mut self.data[i * stride..(i + 1) * stride]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "add_scaled",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        axpy(alpha, &other.data, &mut self.data);
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Temporal extent of a window: `channels × length`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Shape1D {
    pub channels: usize,
    pub length: usize,
}

impl Shape1D {
    pub fn new(channels: usize, length: usize) -> Result<Self> {
        if channels == 0 || length == 0 {
            return Err(Error::InvalidArgument(format!(
                "signal shape needs channels >= 1 and length >= 1, got {channels} x {length}"
            )));
        }
        Ok(Self { channels, length })
    }

    pub fn of(t: &Tensor) -> Result<Self> {
        match *t.shape() {
            [c, l] => Self::new(c, l),
            ref s => Err(Error::shape("signal", format!("expected [C x L], got {s:?}"))),
        }
    }
}

// ---------------------------------------------------------------------------
// slice kernels

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
/// The summation order is fixed, so results are reproducible.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Left zero padding for a SAME convolution; even kernels put the extra
/// zero on the right.
#[inline]
pub(crate) fn pad_left(kernel: usize) -> usize {
    (kernel - 1) / 2
}

/// Copies `[rows × len]` into rows of `len + ksize - 1` with `left` zeros in front.
fn pad_rows(x: &[f64], rows: usize, len: usize, ksize: usize, left: usize) -> Vec<f64> {
    let plen = len + ksize - 1;
    let mut out = vec![0.0; rows * plen];
    for r in 0..rows {
        out[r * plen + left..r * plen + left + len].copy_from_slice(&x[r * len..(r + 1) * len]);
    }
    out
}

const TILE: usize = 8;

/// `out[o][t] = init[o] + sum_c sum_k w[o][c][k] * xpad[c][t + k]`, with
/// `xpad` rows of `len + ksize - 1`. Two output rows and eight positions are
/// accumulated in registers at a time; each element sums in (c, k) order.
#[allow(clippy::too_many_arguments)]
fn conv_padded(xpad: &[f64], cin: usize, len: usize, w: &[f64], init: &[f64], cout: usize, ksize: usize, out: &mut [f64]) {
    let plen = len + ksize - 1;
    let full = len / TILE * TILE;
    let mut o = 0;
    while o < cout {
        let pair = o + 1 < cout;
        let (w0, w1) = (&w[o * cin * ksize..(o + 1) * cin * ksize], if pair { &w[(o + 1) * cin * ksize..(o + 2) * cin * ksize] } else { &w[..0] });
        let mut t = 0;
        while t < full {
            let mut a0 = [init[o]; TILE];
            let mut a1 = [if pair { init[o + 1] } else { 0.0 }; TILE];
            for c in 0..cin {
                let x = &xpad[c * plen + t..c * plen + t + TILE + ksize - 1];
                for k in 0..ksize {
                    let xs: &[f64; TILE] = x[k..k + TILE].try_into().unwrap();
                    let v0 = w0[c * ksize + k];
                    for j in 0..TILE {
                        a0[j] += v0 * xs[j];
                    }
                    if pair {
                        let v1 = w1[c * ksize + k];
                        for j in 0..TILE {
                            a1[j] += v1 * xs[j];
                        }
                    }
                }
            }
            out[o * len + t..o * len + t + TILE].copy_from_slice(&a0);
            if pair {
                out[(o + 1) * len + t..(o + 1) * len + t + TILE].copy_from_slice(&a1);
            }
            t += TILE;
        }
        for oo in o..(o + if pair { 2 } else { 1 }) {
            let wo = &w[oo * cin * ksize..(oo + 1) * cin * ksize];
            for t in full..len {
                let mut a = init[oo];
                for c in 0..cin {
                    for k in 0..ksize {
                        a += wo[c * ksize + k] * xpad[c * plen + t + k];
                    }
                }
                out[oo * len + t] = a;
            }
        }
        o += 2;
    }
}

/// Same-padded, stride-1 convolution of one `[cin × len]` signal.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_raw(
    input: &[f64],
    cin: usize,
    len: usize,
    kernels: &[f64],
    bias: &[f64],
    cout: usize,
    ksize: usize,
    out: &mut [f64],
) {
    let xpad = pad_rows(input, cin, len, ksize, pad_left(ksize));
    conv_padded(&xpad, cin, len, kernels, bias, cout, ksize, out);
}

/// Accumulates the gradients of one sample's convolution into `d_input`,
/// `d_kernels` and `d_bias`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward_raw(
    input: &[f64],
    cin: usize,
    len: usize,
    kernels: &[f64],
    cout: usize,
    ksize: usize,
    upstream: &[f64],
    d_input: &mut [f64],
    d_kernels: &mut [f64],
    d_bias: &mut [f64],
) {
    let pl = pad_left(ksize);
    let plen = len + ksize - 1;
    let xpad = pad_rows(input, cin, len, ksize, pl);
    for o in 0..cout {
        let up = &upstream[o * len..(o + 1) * len];
        d_bias[o] += up.iter().sum::<f64>();
        for c in 0..cin {
            let base = (o * cin + c) * ksize;
            for k in 0..ksize {
                d_kernels[base + k] += dot(up, &xpad[c * plen + k..c * plen + k + len]);
            }
        }
    }
    // The input gradient is a convolution of the upstream with the
    // transposed, flipped kernels.
    let mut wt = vec![0.0; cin * cout * ksize];
    for o in 0..cout {
        for c in 0..cin {
            for k in 0..ksize {
                wt[(c * cout + o) * ksize + (ksize - 1 - k)] = kernels[(o * cin + c) * ksize + k];
            }
        }
    }
    let uppad = pad_rows(upstream, cout, len, ksize, ksize - 1 - pl);
    let mut dx = vec![0.0; cin * len];
    conv_padded(&uppad, cout, len, &wt, &vec![0.0; cin], cin, ksize, &mut dx);
    axpy(1.0, &dx, d_input);
}

// ---------------------------------------------------------------------------
// tensor-level operations

/// Same-padded, stride-1 1D convolution.
///
/// `input` is `[C_in × L]`, `kernels` is `[C_out × C_in × s]`, `bias` is
/// `[C_out]`; the result is `[C_out × L]`.
pub fn conv1d(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (cin, len, cout, ksize) = conv_dims(input, kernels, bias)?;
    let mut out = vec![0.0; cout * len];
    conv1d_raw(input.data(), cin, len, kernels.data(), bias.data(), cout, ksize, &mut out);
    Tensor::new(vec![cout, len], out)
}

/// Gradients of `conv1d` with respect to its input, kernels and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernels: Tensor,
    pub bias: Tensor,
}

pub fn conv1d_grad(input: &Tensor, kernels: &Tensor, upstream: &Tensor) -> Result<ConvGrads> {
    let cout = kernels.shape().first().copied().unwrap_or(0);
    let bias = Tensor::zeros(&[cout.max(1)]);
    let (cin, len, cout, ksize) = conv_dims(input, kernels, &bias)?;
    if upstream.shape() != [cout, len] {
        return Err(Error::shape(
            "conv1d_grad",
            format!("upstream {:?}, expected [{cout}, {len}]", upstream.shape()),
        ));
    }
    let mut d_in = vec![0.0; cin * len];
    let mut d_k = vec![0.0; kernels.len()];
    let mut d_b = vec![0.0; cout];
    conv1d_backward_raw(
        input.data(),
        cin,
        len,
        kernels.data(),
        cout,
        ksize,
        upstream.data(),
        &mut d_in,
        &mut d_k,
        &mut d_b,
    );
    Ok(ConvGrads {
        input: Tensor::new(vec![cin, len], d_in)?,
        kernels: Tensor::new(kernels.shape().to_vec(), d_k)?,
        bias: Tensor::vector(d_b),
    })
}

fn conv_dims(input: &Tensor, kernels: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let [cin, len] = *input.shape() else {
        return Err(Error::shape(
            "conv1d",
            format!("input must be [C_in x L], got {:?}", input.shape()),
        ));
    };
    let [cout, kcin, ksize] = *kernels.shape() else {
        return Err(Error::shape(
            "conv1d",
            format!("kernels must be [C_out x C_in x s], got {:?}", kernels.shape()),
        ));
    };
    if kcin != cin {
        return Err(Error::shape(
            "conv1d",
            format!("input has C_in = {cin} but kernels expect C_in = {kcin}"),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "conv1d",
            format!("bias {:?} does not match C_out = {cout}", bias.shape()),
        ));
    }
    if ksize > len + 2 * (ksize / 2) {
        return Err(Error::shape(
            "conv1d",
            format!("kernel size {ksize} exceeds padded length for L = {len}"),
        ));
    }
    Ok((cin, len, cout, ksize))
}

/// Temporal mean of each channel: `[C × L] -> [C]`.
pub fn global_average_pool(input: &Tensor) -> Result<Tensor> {
    let shape = Shape1D::of(input)?;
    let inv = 1.0 / shape.length as f64;
    Ok(Tensor::vector(
        (0..shape.channels)
            .map(|c| input.outer(c).iter().sum::<f64>() * inv)
            .collect(),
    ))
}

/// `weights · input + bias` for `weights: [m × n]`.
pub fn matmul_affine(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n] = *input.shape() else {
        return Err(Error::shape(
            "matmul_affine",
            format!("input must be a vector, got {:?}", input.shape()),
        ));
    };
    let [m, wn] = *weights.shape() else {
        return Err(Error::shape(
            "matmul_affine",
            format!("weights must be [m x n], got {:?}", weights.shape()),
        ));
    };
    if wn != n {
        return Err(Error::shape(
            "matmul_affine",
            format!("weights have n = {wn}, input has {n}"),
        ));
    }
    if bias.shape() != [m] {
        return Err(Error::shape(
            "matmul_affine",
            format!("bias {:?} does not match m = {m}", bias.shape()),
        ));
    }
    let x = input.data();
    Ok(Tensor::vector(
        (0..m)
            .map(|k| dot(weights.outer(k), x) + bias.data()[k])
            .collect(),
    ))
}
