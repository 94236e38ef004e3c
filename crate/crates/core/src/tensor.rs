//! Dense row-major `f64` tensors and the eager kernels shared with the
//! autodiff tape.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    /// One-dimensional tensor over a copy of `values`.
    pub fn vector(values: &[f64]) -> Self {
        Tensor {
            shape: vec![values.len()],
            data: values.to_vec(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &extent)| acc * extent + i)
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    /// Row `r` of a tensor viewed as `[shape[0], rest]`.
    pub fn row(&self, r: usize) -> &[f64] {
        let width = self.data.len() / self.shape[0];
        &self.data[r * width..(r + 1) * width]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?}{:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

pub(crate) fn conv_out_extent(input: usize, kernel: usize, stride: usize) -> usize {
    (input - kernel) / stride + 1
}

/// Valid (unpadded) cross-correlation of `input[Cin,H,W]` with
/// `kernels[Cout,Cin,kh,kw]` plus a per-output-channel bias.
pub fn conv2d(input: &Tensor, kernels: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let (cin, h, w) = match *input.shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::shape(format!("conv2d input must be [C,H,W], got {:?}", input.shape()))),
    };
    let (cout, kcin, kh, kw) = match *kernels.shape() {
        [a, b, c, d] => (a, b, c, d),
        _ => {
            return Err(Error::shape(format!(
                "conv2d kernels must be [Cout,Cin,kh,kw], got {:?}",
                kernels.shape()
            )))
        }
    };
    if kcin != cin {
        return Err(Error::shape(format!(
            "conv2d kernels expect {kcin} input channels but input has {cin}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(format!(
            "conv2d bias must be [{cout}], got {:?}",
            bias.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::invalid("conv2d stride must be at least 1"));
    }
    if kh > h || kw > w {
        return Err(Error::shape(format!(
            "conv2d kernel {kh}x{kw} larger than input {h}x{w}"
        )));
    }
    let oh = conv_out_extent(h, kh, stride);
    let ow = conv_out_extent(w, kw, stride);
    let x = input.data();
    let k = kernels.data();
    let mut out = vec![0.0; cout * oh * ow];
    for co in 0..cout {
        let plane = &mut out[co * oh * ow..(co + 1) * oh * ow];
        plane.fill(bias.data()[co]);
        for ci in 0..cin {
            let xin = &x[ci * h * w..(ci + 1) * h * w];
            for i in 0..kh {
                for j in 0..kw {
                    let kv = k[((co * cin + ci) * kh + i) * kw + j];
                    for y in 0..oh {
                        let src = &xin[(y * stride + i) * w + j..];
                        let dst = &mut plane[y * ow..(y + 1) * ow];
                        for (xo, d) in dst.iter_mut().enumerate() {
                            *d += kv * src[xo * stride];
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![cout, oh, ow], out)
}

pub fn relu(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Bias-free matrix-vector product `weights[T,K] · input[K]`.
pub fn linear(input: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let (t, k) = match *weights.shape() {
        [t, k] => (t, k),
        _ => return Err(Error::shape(format!("linear weights must be 2-D, got {:?}", weights.shape()))),
    };
    if input.shape() != [k] {
        return Err(Error::shape(format!(
            "linear weights {:?} cannot multiply input {:?}",
            weights.shape(),
            input.shape()
        )));
    }
    let out = (0..t)
        .map(|r| {
            weights.data()[r * k..(r + 1) * k]
                .iter()
                .zip(input.data())
                .map(|(a, b)| a * b)
                .sum()
        })
        .collect();
    Tensor::new(vec![t], out)
}

/// Softmax probabilities with max subtraction.
pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// `-ln softmax(logits)[label]`, computed as a stabilised log-sum-exp.
pub fn softmax_cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    if logits.shape().len() != 1 || logits.is_empty() {
        return Err(Error::shape(format!("logits must be a non-empty vector, got {:?}", logits.shape())));
    }
    let l = logits.data();
    if label >= l.len() {
        return Err(Error::invalid(format!("label {label} out of range for {} classes", l.len())));
    }
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = l.iter().map(|&v| (v - m).exp()).sum();
    Ok(z.ln() - (l[label] - m))
}

pub fn sq_l2_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "distance between {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(sq_l2(a.data(), b.data()))
}

#[inline]
pub(crate) fn sq_l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Maximum and the smallest index attaining it.
pub fn max_with_argmax(values: &Tensor) -> Result<(f64, usize)> {
    argmax_slice(values.data()).ok_or_else(|| Error::invalid("max of an empty tensor"))
}

pub(crate) fn argmax_slice(values: &[f64]) -> Option<(f64, usize)> {
    let (&first, rest) = values.split_first()?;
    let mut best = (first, 0);
    for (i, &v) in rest.iter().enumerate() {
        if v > best.0 {
            best = (v, i + 1);
        }
    }
    Some(best)
}

pub(crate) fn argmin_slice(values: &[f64]) -> Option<(f64, usize)> {
    let (&first, rest) = values.split_first()?;
    let mut best = (first, 0);
    for (i, &v) in rest.iter().enumerate() {
        if v < best.0 {
            best = (v, i + 1);
        }
    }
    Some(best)
}
