//! Reverse-mode differentiation over a per-step tape.
//!
//! A [`Graph`] records nodes in creation order, which is already a
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//! Max/min reductions route the upstream gradient only to the recorded
//! argmax/argmin element (smallest index on ties).

use crate::error::{Error, Result};
use crate::tensor::{self, argmax_slice, argmin_slice, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, kernel: Var, bias: Var, stride: usize },
    Relu(Var),
    MatVec { weights: Var, input: Var },
    SoftmaxCe { logits: Var, label: usize, probs: Vec<f64> },
    PairwiseSqDist { a: Var, b: Var },
    LogRatio { x: Var, eps: f64 },
    MaxLastAxis { x: Var, argmax: Vec<usize> },
    MinAll { x: Var, argmin: usize },
    GatherRows { x: Var, rows: Vec<usize> },
    Reshape(Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Abs(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, stride: usize) -> Result<Var> {
        let out = tensor::conv2d(self.value(input), self.value(kernel), self.value(bias), stride)?;
        let rg = self.needs(&[input, kernel, bias]);
        Ok(self.push(out, Op::Conv2d { input, kernel, bias, stride }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = tensor::relu(self.value(x));
        let rg = self.needs(&[x]);
        self.push(out, Op::Relu(x), rg)
    }

    pub fn matvec(&mut self, weights: Var, input: Var) -> Result<Var> {
        let out = tensor::linear(self.value(input), self.value(weights))?;
        let rg = self.needs(&[weights, input]);
        Ok(self.push(out, Op::MatVec { weights, input }, rg))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let loss = tensor::softmax_cross_entropy(self.value(logits), label)?;
        let probs = tensor::softmax(self.value(logits).data());
        let rg = self.needs(&[logits]);
        Ok(self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, label, probs }, rg))
    }

    /// Squared L2 distance between every row of `a[N,D]` and every row of
    /// `b[M,D]`, giving `[N,M]`.
    pub fn pairwise_sq_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (n, d) = match *av.shape() {
            [n, d] => (n, d),
            _ => return Err(Error::shape(format!("pairwise distance lhs must be 2-D, got {:?}", av.shape()))),
        };
        let m = match *bv.shape() {
            [m, d2] if d2 == d => m,
            _ => {
                return Err(Error::shape(format!(
                    "pairwise distance rows differ: {:?} vs {:?}",
                    av.shape(),
                    bv.shape()
                )))
            }
        };
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            let ra = &av.data()[i * d..(i + 1) * d];
            for j in 0..m {
                out.push(tensor::sq_l2(ra, &bv.data()[j * d..(j + 1) * d]));
            }
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::PairwiseSqDist { a, b }, rg))
    }

    pub fn sq_l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(format!(
                "distance between {:?} and {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let n = self.value(a).len();
        let ra = self.reshape(a, &[1, n])?;
        let rb = self.reshape(b, &[1, n])?;
        let d = self.pairwise_sq_dist(ra, rb)?;
        self.reshape(d, &[])
    }

    /// Elementwise `ln((x + 1) / (x + eps))`.
    pub fn log_ratio(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("epsilon must be positive, got {eps}")));
        }
        let out = self.value(x).map(|d| ((d + 1.0) / (d + eps)).ln());
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::LogRatio { x, eps }, rg))
    }

    /// Maximum over the last axis of `x[..., L]`.
    pub fn max_last_axis(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        let l = *shape.last().ok_or_else(|| Error::shape("max over the last axis of a scalar"))?;
        if l == 0 {
            return Err(Error::invalid("max over an empty axis"));
        }
        let (vals, argmax): (Vec<f64>, Vec<usize>) = xv
            .data()
            .chunks(l)
            .map(|row| argmax_slice(row).expect("non-empty row"))
            .unzip();
        let out = Tensor::new(shape[..shape.len() - 1].to_vec(), vals)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::MaxLastAxis { x, argmax }, rg))
    }

    pub fn min_all(&mut self, x: Var) -> Result<Var> {
        let (v, argmin) =
            argmin_slice(self.value(x).data()).ok_or_else(|| Error::invalid("min of an empty tensor"))?;
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::scalar(v), Op::MinAll { x, argmin }, rg))
    }

    /// Recorded argmax per row of a [`Graph::max_last_axis`] node.
    pub fn argmax_of(&self, v: Var) -> Option<&[usize]> {
        match &self.nodes[v.0].op {
            Op::MaxLastAxis { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// Recorded flat argmin of a [`Graph::min_all`] node.
    pub fn argmin_of(&self, v: Var) -> Option<usize> {
        match &self.nodes[v.0].op {
            Op::MinAll { argmin, .. } => Some(*argmin),
            _ => None,
        }
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let r = *xv.shape().first().ok_or_else(|| Error::shape("gather rows of a scalar"))?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::invalid(format!("row {bad} out of range for {r} rows")));
        }
        let width = xv.len() / r.max(1);
        let mut data = Vec::with_capacity(rows.len() * width);
        for &i in rows {
            data.extend_from_slice(&xv.data()[i * width..(i + 1) * width]);
        }
        let mut shape = xv.shape().to_vec();
        shape[0] = rows.len();
        let out = Tensor::new(shape, data)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::GatherRows { x, rows: rows.to_vec() }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = transpose2(self.value(x))?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(format!(
                "elementwise op on {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        let rg = self.needs(&[x]);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        let rg = self.needs(&[x]);
        self.push(out, Op::Abs(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Which side of every kink the recorded values sit on: ReLU and abs
    /// input signs plus every stored argmax/argmin. Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn branch_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) | Op::Abs(x) => sig.extend(self.nodes[x.0].value.data().iter().map(|&v| (v > 0.0) as usize + (v < 0.0) as usize * 2)),
                Op::MaxLastAxis { argmax, .. } => sig.extend_from_slice(argmax),
                Op::MinAll { argmin, .. } => sig.push(*argmin),
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from a scalar `loss`. Only nodes that depend on a
    /// trainable leaf receive gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::shape(format!("backward needs a scalar loss, got {:?}", lv.shape())));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias, stride } => {
                let x = self.value(*input);
                let k = self.value(*kernel);
                let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (cout, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
                let (oh, ow) = (node.value.shape()[1], node.value.shape()[2]);
                let s = *stride;
                if self.nodes[bias.0].requires_grad {
                    let db: Vec<f64> = gd.chunks(oh * ow).map(|c| c.iter().sum()).collect();
                    self.accumulate(grads, *bias, db);
                }
                if self.nodes[kernel.0].requires_grad {
                    let mut dk = vec![0.0; k.len()];
                    for co in 0..cout {
                        let gp = &gd[co * oh * ow..(co + 1) * oh * ow];
                        for ci in 0..cin {
                            let xin = &x.data()[ci * h * w..(ci + 1) * h * w];
                            for i in 0..kh {
                                for j in 0..kw {
                                    let mut acc = 0.0;
                                    for y in 0..oh {
                                        let src = &xin[(y * s + i) * w + j..];
                                        let grow = &gp[y * ow..(y + 1) * ow];
                                        for (xo, gv) in grow.iter().enumerate() {
                                            acc += gv * src[xo * s];
                                        }
                                    }
                                    dk[((co * cin + ci) * kh + i) * kw + j] = acc;
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *kernel, dk);
                }
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![0.0; x.len()];
                    for co in 0..cout {
                        let gp = &gd[co * oh * ow..(co + 1) * oh * ow];
                        for ci in 0..cin {
                            let dxin = &mut dx[ci * h * w..(ci + 1) * h * w];
                            for i in 0..kh {
                                for j in 0..kw {
                                    let kv = k.data()[((co * cin + ci) * kh + i) * kw + j];
                                    for y in 0..oh {
                                        let grow = &gp[y * ow..(y + 1) * ow];
                                        let base = (y * s + i) * w + j;
                                        for (xo, gv) in grow.iter().enumerate() {
                                            dxin[base + xo * s] += kv * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
            }
            Op::Relu(x) => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| if v > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::MatVec { weights, input } => {
                let w = self.value(*weights);
                let x = self.value(*input);
                let k = x.len();
                if self.nodes[weights.0].requires_grad {
                    let mut dw = vec![0.0; w.len()];
                    for (t, &gv) in gd.iter().enumerate() {
                        for (c, &xv) in x.data().iter().enumerate() {
                            dw[t * k + c] = gv * xv;
                        }
                    }
                    self.accumulate(grads, *weights, dw);
                }
                if self.nodes[input.0].requires_grad {
                    let mut dx = vec![0.0; k];
                    for (t, &gv) in gd.iter().enumerate() {
                        for (c, d) in dx.iter_mut().enumerate() {
                            *d += gv * w.data()[t * k + c];
                        }
                    }
                    self.accumulate(grads, *input, dx);
                }
            }
            Op::SoftmaxCe { logits, label, probs } => {
                let up = gd[0];
                let d = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| up * (p - if i == *label { 1.0 } else { 0.0 }))
                    .collect();
                self.accumulate(grads, *logits, d);
            }
            Op::PairwiseSqDist { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (n, d) = (av.shape()[0], av.shape()[1]);
                let m = bv.shape()[0];
                let need_a = self.nodes[a.0].requires_grad;
                let need_b = self.nodes[b.0].requires_grad;
                let mut da = vec![0.0; if need_a { av.len() } else { 0 }];
                let mut db = vec![0.0; if need_b { bv.len() } else { 0 }];
                for i in 0..n {
                    for j in 0..m {
                        let gv = gd[i * m + j];
                        if gv == 0.0 {
                            continue;
                        }
                        for c in 0..d {
                            let diff = 2.0 * gv * (av.data()[i * d + c] - bv.data()[j * d + c]);
                            if need_a {
                                da[i * d + c] += diff;
                            }
                            if need_b {
                                db[j * d + c] -= diff;
                            }
                        }
                    }
                }
                if need_a {
                    self.accumulate(grads, *a, da);
                }
                if need_b {
                    self.accumulate(grads, *b, db);
                }
            }
            Op::LogRatio { x, eps } => {
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| gv * (1.0 / (v + 1.0) - 1.0 / (v + eps)))
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::MaxLastAxis { x, argmax } => {
                let xv = self.value(*x);
                let l = *xv.shape().last().unwrap();
                let mut d = vec![0.0; xv.len()];
                for (r, (&a, &gv)) in argmax.iter().zip(gd).enumerate() {
                    d[r * l + a] = gv;
                }
                self.accumulate(grads, *x, d);
            }
            Op::MinAll { x, argmin } => {
                let mut d = vec![0.0; self.value(*x).len()];
                d[*argmin] = gd[0];
                self.accumulate(grads, *x, d);
            }
            Op::GatherRows { x, rows } => {
                let xv = self.value(*x);
                let width = xv.len() / xv.shape()[0].max(1);
                let mut d = vec![0.0; xv.len()];
                for (o, &r) in rows.iter().enumerate() {
                    for c in 0..width {
                        d[r * width + c] += gd[o * width + c];
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec()),
            Op::Transpose(x) => {
                let t = transpose2(g).expect("gradient of a 2-D node");
                self.accumulate(grads, *x, t.into_data());
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, gd.to_vec());
                self.accumulate(grads, *b, gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let da = gd.iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                let db = gd.iter().zip(av.data()).map(|(g, x)| g * x).collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, gd.iter().map(|v| v * c).collect()),
            Op::Abs(x) => {
                // sign(0) = 0
                let d = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gv)| {
                        if v > 0.0 {
                            gv
                        } else if v < 0.0 {
                            -gv
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], target: Var, delta: Vec<f64>) {
        let node = &self.nodes[target.0];
        if !node.requires_grad {
            return;
        }
        match &mut grads[target.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(&delta) {
                    *e += d;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(node.value.shape().to_vec(), delta).expect("gradient shape"));
            }
        }
    }
}

fn transpose2(x: &Tensor) -> Result<Tensor> {
    let (r, c) = match *x.shape() {
        [r, c] => (r, c),
        _ => return Err(Error::shape(format!("transpose needs a 2-D tensor, got {:?}", x.shape()))),
    };
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences of `f` around `x`, one coordinate at a time.
    fn numeric_grad(x: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64]) {
        for (a, n) in analytic.iter().zip(numeric) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
            assert!(rel < 1e-6, "analytic {a} vs numeric {n}");
        }
    }

    #[test]
    fn sq_distance_gradient_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[6], &mut rng);
        let b = random(&[6], &mut rng);
        let mut g = Graph::new();
        let va = g.param(a.clone());
        let vb = g.constant(b.clone());
        let d = g.sq_l2_distance(va, vb).unwrap();
        let grads = g.backward(d).unwrap();
        let expect: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| 2.0 * (x - y)).collect();
        assert_eq!(grads.get(va).unwrap().data(), expect.as_slice());
        assert!(grads.get(vb).is_none());
    }

    #[test]
    fn relu_dead_region_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(&[-1.0, -0.5, -3.0]));
        let r = g.relu(x);
        let s = g.sum(r);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(&[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[2, 5, 5], &mut rng);
        let k = random(&[3, 2, 3, 3], &mut rng);
        let b = random(&[3], &mut rng);
        let w = random(&[3, 2, 2], &mut rng);
        let eval = |x: &Tensor, k: &Tensor, b: &Tensor| -> f64 {
            let y = crate::tensor::conv2d(x, k, b, 2).unwrap();
            y.data().iter().zip(w.data()).map(|(a, c)| a * c).sum()
        };
        let mut g = Graph::new();
        let (vx, vk, vb) = (g.param(x.clone()), g.param(k.clone()), g.param(b.clone()));
        let vw = g.constant(w.clone());
        let y = g.conv2d(vx, vk, vb, 2).unwrap();
        let p = g.mul(y, vw).unwrap();
        let s = g.sum(p);
        let grads = g.backward(s).unwrap();
        assert_close(grads.get(vx).unwrap().data(), &numeric_grad(&x, |t| eval(t, &k, &b)));
        assert_close(grads.get(vk).unwrap().data(), &numeric_grad(&k, |t| eval(&x, t, &b)));
        assert_close(grads.get(vb).unwrap().data(), &numeric_grad(&b, |t| eval(&x, &k, t)));
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        // matvec -> cross-entropy, pairwise distance -> log ratio -> max, abs, transpose, gather
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats = random(&[4, 3], &mut rng);
        let protos = random(&[6, 4], &mut rng);
        let w = random(&[2, 6], &mut rng);
        let f = |feats: &Tensor, protos: &Tensor, w: &Tensor| -> (f64, Graph, [Var; 4]) {
            let mut g = Graph::new();
            let vf = g.param(feats.clone());
            let vp = g.param(protos.clone());
            let vw = g.param(w.clone());
            let t = g.transpose(vf).unwrap();
            let d = g.pairwise_sq_dist(vp, t).unwrap();
            let s = g.log_ratio(d, 1e-4).unwrap();
            let m = g.max_last_axis(s).unwrap();
            let logits = g.matvec(vw, m).unwrap();
            let ce = g.softmax_cross_entropy(logits, 1).unwrap();
            let rows = g.gather_rows(d, &[1, 4]).unwrap();
            let mn = g.min_all(rows).unwrap();
            let a = g.abs(vw);
            let aw = g.sum(a);
            let aw = g.scale(aw, 0.3);
            let t1 = g.add(ce, mn).unwrap();
            let loss = g.sub(t1, aw).unwrap();
            (g.value(loss).item(), g, [vf, vp, vw, loss])
        };
        let (_, g, [vf, vp, vw, loss]) = f(&feats, &protos, &w);
        let grads = g.backward(loss).unwrap();
        assert_close(grads.get(vf).unwrap().data(), &numeric_grad(&feats, |t| f(t, &protos, &w).0));
        assert_close(grads.get(vp).unwrap().data(), &numeric_grad(&protos, |t| f(&feats, t, &w).0));
        assert_close(grads.get(vw).unwrap().data(), &numeric_grad(&w, |t| f(&feats, &protos, t).0));
    }

    #[test]
    fn max_routes_to_smallest_tied_index() {
        let mut g = Graph::new();
        let x = g.param(Tensor::new(vec![1, 3], vec![2.0, 2.0, 1.0]).unwrap());
        let m = g.max_last_axis(x).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn repeated_backward_is_bit_identical() {
        let build = || {
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut g = Graph::new();
            let a = g.param(random(&[5, 4], &mut rng));
            let b = g.param(random(&[3, 4], &mut rng));
            let d = g.pairwise_sq_dist(a, b).unwrap();
            let l = g.log_ratio(d, 1e-4).unwrap();
            let s = g.sum(l);
            let grads = g.backward(s).unwrap();
            (grads.get(a).unwrap().clone(), grads.get(b).unwrap().clone())
        };
        let (a1, b1) = build();
        let (a2, b2) = build();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(b1.data(), b2.data());
    }
}
