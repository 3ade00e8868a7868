//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a per-call tape: nodes are appended in evaluation order, so
//! reverse index order is a valid topological order for the backward sweep.

use crate::error::{Error, Result};
use crate::ops::{self, ActivationParams, ConvGeometry};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    Relu(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Delta(Var, ActivationParams),
    Gem(Var, f64),
    AttributePool {
        features: Var,
        attention: Var,
        p: f64,
    },
    RowDistance(Var, Var),
    Distance(Var, Var),
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    CrossEntropy(Var, usize),
    Sum(Var),
    Stack(Vec<Var>),
    Index(Var, usize),
    External(Var, Tensor),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by [`Var`]; `None` for nodes that do not need one.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("{op:?}")));
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let value = ops::conv2d(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let needs = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        self.push(value, Op::Conv2d { input, weight, bias, geom }, needs)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.max(0.0));
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).scale(c);
        let needs = self.needs(x);
        self.push(value, Op::Scale(x, c), needs)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).map(|v| v + c);
        let needs = self.needs(x);
        self.push(value, Op::AddScalar(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Mul(a, b), needs)
    }

    pub fn delta(&mut self, x: Var, params: ActivationParams) -> Result<Var> {
        let value = ops::delta_activation(self.value(x), &params)?;
        let needs = self.needs(x);
        self.push(value, Op::Delta(x, params), needs)
    }

    pub fn gem(&mut self, x: Var, p: f64) -> Result<Var> {
        let value = ops::gem_pool(self.value(x), p)?;
        let needs = self.needs(x);
        self.push(value, Op::Gem(x, p), needs)
    }

    /// `[C,h,w]` features and `[M,h,w]` attention to `[M,C]` pooled vectors.
    pub fn attribute_pool(&mut self, features: Var, attention: Var, p: f64) -> Result<Var> {
        let value = ops::attribute_pool(self.value(features), self.value(attention), p)?;
        let needs = self.needs(features) || self.needs(attention);
        self.push(value, Op::AttributePool { features, attention, p }, needs)
    }

    /// Row-wise Euclidean distance of two `[R,C]` tensors, giving `[R]`.
    pub fn row_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        va.expect_rank(2)?;
        vb.expect_shape(va.shape())?;
        let c = va.shape()[1];
        let d = va
            .data()
            .chunks_exact(c)
            .zip(vb.data().chunks_exact(c))
            .map(|(x, y)| euclid(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::from_vec(d), Op::RowDistance(a, b), needs)
    }

    /// Euclidean distance between equally shaped tensors, as a scalar.
    pub fn distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        vb.expect_shape(va.shape())?;
        let d = euclid(va.data(), vb.data());
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(d), Op::Distance(a, b), needs)
    }

    /// `weight [O,I] * input [I] + bias [O]`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        x.expect_rank(1)?;
        w.expect_rank(2)?;
        let (o, i) = (w.shape()[0], w.shape()[1]);
        x.expect_shape(&[i])?;
        b.expect_shape(&[o])?;
        let out = w
            .data()
            .chunks_exact(i)
            .zip(b.data())
            .map(|(row, bv)| row.iter().zip(x.data()).map(|(p, q)| p * q).sum::<f64>() + bv)
            .collect();
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        self.push(Tensor::from_vec(out), Op::Linear { input, weight, bias }, needs)
    }

    /// Softmax cross-entropy of `[O]` logits against a class index.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let l = self.value(logits);
        l.expect_rank(1)?;
        if target >= l.numel() {
            return Err(Error::InvalidParam(format!(
                "target class {target} outside {} logits",
                l.numel()
            )));
        }
        let value = log_sum_exp(l.data()) - l.data()[target];
        let needs = self.needs(logits);
        self.push(Tensor::scalar(value), Op::CrossEntropy(logits, target), needs)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(value, Op::Sum(x), needs)
    }

    /// Stacks scalar nodes into a vector.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let mut data = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if v.numel() != 1 {
                return Err(Error::ShapeMismatch(format!("stack expects scalars, got {:?}", v.shape())));
            }
            data.push(v.item());
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::from_vec(data), Op::Stack(parts.to_vec()), needs)
    }

    pub fn index(&mut self, x: Var, i: usize) -> Result<Var> {
        let v = self.value(x);
        let value = *v
            .data()
            .get(i)
            .ok_or_else(|| Error::ShapeMismatch(format!("index {i} outside {:?}", v.shape())))?;
        let needs = self.needs(x);
        self.push(Tensor::scalar(value), Op::Index(x, i), needs)
    }

    /// Scalar function evaluated outside the tape, given its value and its
    /// gradient with respect to `x`.
    pub fn external(&mut self, x: Var, value: f64, grad: Tensor) -> Result<Var> {
        grad.expect_shape(self.value(x).shape())?;
        let needs = self.needs(x);
        self.push(Tensor::scalar(value), Op::External(x, grad), needs)
    }

    /// Backward sweep from `output`, seeded with `seed` (same shape as the
    /// output). Use a scalar seed of 1 for a loss.
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        seed.expect_shape(self.value(output).shape())?;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, pg) in self.local_grads(node, &g) {
                if !self.nodes[parent.0].needs_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Conv2d { input, weight, bias, geom } => {
                let cg = ops::conv2d_backward(
                    val(*input),
                    val(*weight),
                    bias.is_some(),
                    *geom,
                    g,
                    self.needs(*input),
                    self.needs(*weight),
                );
                let mut out = vec![];
                if let Some(t) = cg.input {
                    out.push((*input, t));
                }
                if let Some(t) = cg.kernel {
                    out.push((*weight, t));
                }
                if let (Some(b), Some(t)) = (bias, cg.bias) {
                    out.push((*b, t));
                }
                out
            }
            Op::Relu(x) => {
                let gx = val(*x).zip_map(g, |v, gv| if v > 0.0 { gv } else { 0.0 }).unwrap();
                vec![(*x, gx)]
            }
            Op::Scale(x, c) => vec![(*x, g.scale(*c))],
            Op::AddScalar(x) => vec![(*x, g.clone())],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(val(*b), |x, y| x * y).unwrap()),
                (*b, g.zip_map(val(*a), |x, y| x * y).unwrap()),
            ],
            Op::Delta(x, p) => {
                let gx = val(*x).zip_map(g, |v, gv| gv * p.derivative(v)).unwrap();
                vec![(*x, gx)]
            }
            Op::Gem(x, p) => vec![(*x, ops::gem_pool_backward(val(*x), &node.value, g, *p))],
            Op::AttributePool { features, attention, p } => {
                let (gf, ga) = ops::attribute_pool_backward(
                    val(*features),
                    val(*attention),
                    &node.value,
                    g,
                    *p,
                    self.needs(*features),
                    self.needs(*attention),
                );
                gf.map(|t| (*features, t))
                    .into_iter()
                    .chain(ga.map(|t| (*attention, t)))
                    .collect()
            }
            Op::RowDistance(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let c = va.shape()[1];
                let mut ga = Tensor::zeros(va.shape());
                for (r, ((x, y), out)) in va
                    .data()
                    .chunks_exact(c)
                    .zip(vb.data().chunks_exact(c))
                    .zip(ga.data_mut().chunks_exact_mut(c))
                    .enumerate()
                {
                    let d = node.value.data()[r];
                    if d > 0.0 {
                        let s = g.data()[r] / d;
                        for ((o, xv), yv) in out.iter_mut().zip(x).zip(y) {
                            *o = s * (xv - yv);
                        }
                    }
                }
                let gb = ga.scale(-1.0);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Distance(a, b) => {
                let d = node.value.item();
                let ga = if d > 0.0 {
                    let s = g.item() / d;
                    val(*a).zip_map(val(*b), |x, y| s * (x - y)).unwrap()
                } else {
                    Tensor::zeros(val(*a).shape())
                };
                let gb = ga.scale(-1.0);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Linear { input, weight, bias } => {
                let (x, w) = (val(*input), val(*weight));
                let i = x.numel();
                let mut gx = vec![0.0; i];
                let mut gw = vec![0.0; w.numel()];
                for (o, &gv) in g.data().iter().enumerate() {
                    let row = &w.data()[o * i..(o + 1) * i];
                    for j in 0..i {
                        gx[j] += gv * row[j];
                        gw[o * i + j] = gv * x.data()[j];
                    }
                }
                vec![
                    (*input, Tensor::new(x.shape().to_vec(), gx).unwrap()),
                    (*weight, Tensor::new(w.shape().to_vec(), gw).unwrap()),
                    (*bias, g.clone()),
                ]
            }
            Op::CrossEntropy(logits, target) => {
                let l = val(*logits);
                let lse = log_sum_exp(l.data());
                let gv = g.item();
                let mut gl = l.map(|v| gv * (v - lse).exp());
                gl.data_mut()[*target] -= gv;
                vec![(*logits, gl)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Stack(parts) => parts
                .iter()
                .enumerate()
                .map(|(i, &p)| (p, Tensor::new(val(p).shape().to_vec(), vec![g.data()[i]]).unwrap()))
                .collect(),
            Op::Index(x, i) => {
                let mut gx = Tensor::zeros(val(*x).shape());
                gx.data_mut()[*i] = g.item();
                vec![(*x, gx)]
            }
            Op::External(x, grad) => vec![(*x, grad.scale(g.item()))],
        }
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheck};
    use rand::{Rng, SeedableRng};

    fn rand_tensor(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    /// Runs `build` on a fresh graph with `x` as the only parameter and
    /// returns the scalar value and its gradient.
    fn eval_with(build: impl Fn(&mut Graph, Var) -> Result<Var>) -> impl Fn(&Tensor) -> Result<(f64, Tensor)> {
        move |x: &Tensor| {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let out = build(&mut g, v)?;
            let out = if g.value(out).numel() == 1 { out } else { g.sum(out)? };
            let value = g.value(out).item();
            let seed = Tensor::new(g.value(out).shape().to_vec(), vec![1.0])?;
            let grads = g.backward(out, seed)?;
            Ok((value, grads.get(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()))))
        }
    }

    #[test]
    fn conv_gradients() {
        let w = rand_tensor(&[3, 2, 3, 3], 1, -1.0, 1.0);
        let b = rand_tensor(&[3], 2, -1.0, 1.0);
        let x = rand_tensor(&[2, 6, 5], 3, -1.0, 1.0);
        let geom = ConvGeometry::new(2, 1);
        let wrt_input = {
            let (w, b) = (w.clone(), b.clone());
            eval_with(move |g, v| {
                let w = g.constant(w.clone());
                let b = g.constant(b.clone());
                let y = g.conv2d(v, w, Some(b), geom)?;
                let y2 = g.mul(y, y)?;
                g.sum(y2)
            })
        };
        let r = grad_check(wrt_input, &x, 1e-5).unwrap();
        assert!(r < 1e-6, "input grad error {r}");
        let wrt_weight = {
            let x = x.clone();
            eval_with(move |g, v| {
                let x = g.constant(x.clone());
                let y = g.conv2d(x, v, None, geom)?;
                let y2 = g.mul(y, y)?;
                g.sum(y2)
            })
        };
        assert!(grad_check(wrt_weight, &w, 1e-5).unwrap() < 1e-6);
        let wrt_bias = eval_with(move |g, v| {
            let x = g.constant(x.clone());
            let w = g.constant(w.clone());
            let y = g.conv2d(x, w, Some(v), geom)?;
            let y2 = g.mul(y, y)?;
            g.sum(y2)
        });
        assert!(grad_check(wrt_bias, &b, 1e-5).unwrap() < 1e-6);
    }

    #[test]
    fn delta_gradient_away_from_kink() {
        let p = ActivationParams::new(0.5, 1.7).unwrap();
        let x = rand_tensor(&[40], 4, -2.0, 2.0).map(|v| if v.abs() < 1e-3 { v + 0.1 } else { v });
        let f = eval_with(move |g, v| g.delta(v, p));
        assert!(grad_check(f, &x, 1e-5).unwrap() <= 1e-4);
    }

    #[test]
    fn gem_gradient() {
        let x = rand_tensor(&[3, 4, 2], 5, 0.1, 2.0);
        let f = eval_with(|g, v| g.gem(v, 3.0));
        assert!(grad_check(f, &x, 1e-5).unwrap() <= 1e-4);
        let f = eval_with(|g, v| g.gem(v, 2.5));
        assert!(grad_check(f, &x, 1e-5).unwrap() <= 1e-4);
    }

    #[test]
    fn attribute_pool_gradients() {
        let feats = rand_tensor(&[4, 3, 2], 6, 0.1, 2.0);
        let att = rand_tensor(&[5, 3, 2], 7, 0.1, 1.0);
        let probe = rand_tensor(&[5, 4], 8, -1.0, 1.0);
        let (f2, p2) = (feats.clone(), probe.clone());
        let wrt_att = eval_with(move |g, v| {
            let f = g.constant(f2.clone());
            let pr = g.constant(p2.clone());
            let y = g.attribute_pool(f, v, 3.0)?;
            let y = g.mul(y, pr)?;
            g.sum(y)
        });
        assert!(grad_check(wrt_att, &att, 1e-5).unwrap() <= 1e-4);
        let wrt_feat = eval_with(move |g, v| {
            let a = g.constant(att.clone());
            let pr = g.constant(probe.clone());
            let y = g.attribute_pool(v, a, 3.0)?;
            let y = g.mul(y, pr)?;
            g.sum(y)
        });
        assert!(grad_check(wrt_feat, &feats, 1e-5).unwrap() <= 1e-4);
    }

    #[test]
    fn distances_linear_and_cross_entropy() {
        let other = rand_tensor(&[3, 4], 9, -1.0, 1.0);
        let x = rand_tensor(&[3, 4], 10, -1.0, 1.0);
        let o2 = other.clone();
        let f = eval_with(move |g, v| {
            let o = g.constant(o2.clone());
            g.row_distance(v, o)
        });
        assert!(grad_check(f, &x, 1e-6).unwrap() <= 1e-6);
        let f = eval_with(move |g, v| {
            let o = g.constant(other.clone());
            g.distance(o, v)
        });
        assert!(grad_check(f, &x, 1e-6).unwrap() <= 1e-6);

        let w = rand_tensor(&[5, 4], 11, -1.0, 1.0);
        let b = rand_tensor(&[5], 12, -1.0, 1.0);
        let input = rand_tensor(&[4], 13, -1.0, 1.0);
        let (w2, b2) = (w.clone(), b.clone());
        let f = eval_with(move |g, v| {
            let w = g.constant(w2.clone());
            let b = g.constant(b2.clone());
            let l = g.linear(v, w, b)?;
            g.cross_entropy(l, 2)
        });
        assert!(grad_check(f, &input, 1e-6).unwrap() <= 1e-6);
        let f = eval_with(move |g, v| {
            let x = g.constant(input.clone());
            let b = g.constant(b.clone());
            let l = g.linear(x, v, b)?;
            g.cross_entropy(l, 4)
        });
        assert!(grad_check(f, &w, 1e-6).unwrap() <= 1e-6);
    }

    #[test]
    fn scalar_plumbing() {
        let x = rand_tensor(&[6], 14, -1.0, 1.0);
        let f = eval_with(|g, v| {
            let a = g.index(v, 1)?;
            let b = g.index(v, 4)?;
            let d = g.sub(a, b)?;
            let d = g.add_scalar(d, 0.3)?;
            let d = g.scale(d, 2.0)?;
            let s = g.stack(&[d, a])?;
            let s = g.relu(s)?;
            let t = g.add(s, s)?;
            g.sum(t)
        });
        assert!(grad_check(f, &x, 1e-6).unwrap() <= 1e-6);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::from_vec(vec![1.0, 2.0]));
        let p = g.param(Tensor::from_vec(vec![3.0, 4.0]));
        let y = g.mul(c, p).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s, Tensor::scalar(1.0)).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn non_finite_values_are_rejected() {
        let mut g = Graph::new();
        let x = g.param(Tensor::from_vec(vec![1e300]));
        let y = g.mul(x, x);
        assert!(matches!(y, Err(Error::NonFinite(_))));
    }

    #[test]
    fn gradcheck_config_excludes_kinks() {
        // |x| has a kink at 0; the coordinate at 0 must be skipped.
        let f = eval_with(|g, v| {
            let r = g.relu(v)?;
            let n = g.scale(v, -1.0)?;
            let rn = g.relu(n)?;
            let s = g.add(r, rn)?;
            g.sum(s)
        });
        let x = Tensor::from_vec(vec![0.0, 0.5, -0.7]);
        let report = GradCheck::new(1e-5).run(&f, &x).unwrap();
        assert_eq!(report.skipped, 1);
        assert!(report.max_rel_error < 1e-8);
    }
}
