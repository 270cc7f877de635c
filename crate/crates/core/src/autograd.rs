//! A small define-by-run reverse-mode tape covering exactly the operators the
//! generators, discriminators and losses need.
//!
//! A [`Graph`] lives for one forward/backward pass. Nodes are appended in
//! evaluation order, so walking the tape backwards is a valid reverse
//! topological order and gradient accumulation order is fully determined by
//! the order in which the forward pass was written.

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Im2Col, Real, Tensor};

const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    },
    InstanceNorm {
        input: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Add(Var, Var),
    Upsample2x(Var),
    ConcatChannels(Var, Var),
    GradScale(Var, Tensor<T>),
    MeanSqToConst(Var, T),
    MeanAbsDiff(Var, Var),
    Huber(Var, Var, T),
    Mean(Var),
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked (parameters, saliency inputs).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    /// Copies the current value into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let (o, wc, kh, kw) = self.value(weight).dims4()?;
        if wc != c || kh != spec.kernel || kw != spec.kernel {
            return Err(Error::Shape(format!(
                "conv weight {:?} does not fit input channels {c} / kernel {}",
                self.value(weight).shape(),
                spec.kernel
            )));
        }
        if let Some(b) = bias {
            if self.value(b).numel() != o {
                return Err(Error::Shape(format!("conv bias must have {o} entries")));
            }
        }
        let lw = Im2Col::new(&spec, c, h, w)?;
        let (kl, l) = (lw.patch_len(), lw.out_len());
        let mut out = Tensor::zeros(&[n, o, lw.oh, lw.ow]);
        let mut scratch = Vec::new();
        for s in 0..n {
            let cols = lower_sample(&lw, self.value(input).outer(s), &mut scratch);
            let dst = &mut out.data_mut()[s * o * l..(s + 1) * o * l];
            T::gemm(
                o,
                kl,
                l,
                self.value(weight).data(),
                (kl as isize, 1),
                cols,
                (l as isize, 1),
                T::zero(),
                dst,
                (l as isize, 1),
            );
            if let Some(b) = bias {
                let bv = self.value(b).data();
                for (oc, row) in dst.chunks_mut(l).enumerate() {
                    for x in row {
                        *x += bv[oc];
                    }
                }
            }
        }
        let needs = self.needs_grad(input) || self.needs_grad(weight) || bias.is_some_and(|b| self.needs_grad(b));
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            },
            needs,
        ))
    }

    pub fn instance_norm(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let hw = h * w;
        let eps = T::lit(NORM_EPS);
        let inv_hw = T::one() / T::from_usize(hw).unwrap();
        let x = self.value(input).data();
        let mut xhat = vec![T::zero(); x.len()];
        let mut inv_std = vec![T::zero(); n * c];
        for p in 0..n * c {
            let seg = &x[p * hw..(p + 1) * hw];
            let mean = seg.iter().copied().sum::<T>() * inv_hw;
            let var = seg.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_hw;
            let is = T::one() / (var + eps).sqrt();
            inv_std[p] = is;
            for (d, &v) in xhat[p * hw..(p + 1) * hw].iter_mut().zip(seg) {
                *d = (v - mean) * is;
            }
        }
        let out = Tensor::from_vec(&[n, c, h, w], xhat.clone())?;
        let needs = self.needs_grad(input);
        Ok(self.push(out, Op::InstanceNorm { input, xhat, inv_std }, needs))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let out = self.value(input).map(|x| x.max(T::zero()));
        let needs = self.needs_grad(input);
        self.push(out, Op::Relu(input), needs)
    }

    pub fn leaky_relu(&mut self, input: Var, slope: f64) -> Var {
        let slope = T::lit(slope);
        let out = self
            .value(input)
            .map(|x| if x > T::zero() { x } else { x * slope });
        let needs = self.needs_grad(input);
        self.push(out, Op::LeakyRelu(input, slope), needs)
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        let out = self
            .value(input)
            .map(|x| T::one() / (T::one() + (-x).exp()));
        let needs = self.needs_grad(input);
        self.push(out, Op::Sigmoid(input), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4()?;
        let x = self.value(input).data();
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        let o = out.data_mut();
        for p in 0..n * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    o[p * 4 * h * w + y * 2 * w + xx] = x[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let needs = self.needs_grad(input);
        Ok(self.push(out, Op::Upsample2x(input), needs))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let mut data = Vec::with_capacity(n * (ca + cb) * h * w);
        for s in 0..n {
            data.extend_from_slice(self.value(a).outer(s));
            data.extend_from_slice(self.value(b).outer(s));
        }
        let out = Tensor::from_vec(&[n, ca + cb, h, w], data)?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(out, Op::ConcatChannels(a, b), needs))
    }

    /// Identity in the forward pass; multiplies the incoming gradient
    /// elementwise by `scale` in the backward pass.
    pub fn grad_scale(&mut self, input: Var, scale: Tensor<T>) -> Result<Var> {
        self.value(input).expect_same_shape(&scale)?;
        let out = self.value(input).clone();
        let needs = self.needs_grad(input);
        Ok(self.push(out, Op::GradScale(input, scale), needs))
    }

    /// `mean((x - target)²)`.
    pub fn mean_sq_to(&mut self, input: Var, target: f64) -> Var {
        let t = T::lit(target);
        let x = self.value(input);
        let v = x.data().iter().map(|&v| (v - t) * (v - t)).sum::<T>() / T::from_usize(x.numel()).unwrap();
        let needs = self.needs_grad(input);
        self.push(Tensor::scalar(v), Op::MeanSqToConst(input, t), needs)
    }

    /// `mean(|a - b|)`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).expect_same_shape(self.value(b))?;
        let (x, y) = (self.value(a), self.value(b));
        let v = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| (p - q).abs())
            .sum::<T>()
            / T::from_usize(x.numel()).unwrap();
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Tensor::scalar(v), Op::MeanAbsDiff(a, b), needs))
    }

    /// Mean Huber penalty of `a - b` with transition point `gamma`.
    pub fn huber(&mut self, a: Var, b: Var, gamma: f64) -> Result<Var> {
        let v = crate::objectives::huber(self.value(a), self.value(b), gamma)?;
        let needs = self.needs_grad(a) || self.needs_grad(b);
        Ok(self.push(Tensor::scalar(v), Op::Huber(a, b, T::lit(gamma)), needs))
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let v = self.value(input).mean();
        let needs = self.needs_grad(input);
        self.push(Tensor::scalar(v), Op::Mean(input), needs)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let terms: Vec<(Var, T)> = terms.iter().map(|&(v, w)| (v, T::lit(w))).collect();
        let mut acc = T::zero();
        for &(v, w) in &terms {
            acc += w * self.value(v).item();
        }
        let needs = terms.iter().any(|&(v, _)| self.needs_grad(v));
        self.push(Tensor::scalar(acc), Op::WeightedSum(terms), needs)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape("backward needs a scalar root".into()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::scalar(T::one()));
        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs_grad(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                spec,
            } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let wt = self.value(*weight);
                let o = wt.shape()[0];
                let lw = Im2Col::new(spec, c, h, w)?;
                let (kl, l) = (lw.patch_len(), lw.out_len());
                if self.needs_grad(*weight) {
                    let mut dw = Tensor::zeros(wt.shape());
                    let mut scratch = Vec::new();
                    for s in 0..n {
                        let col = lower_sample(&lw, self.value(*input).outer(s), &mut scratch);
                        let go = &g.data()[s * o * l..(s + 1) * o * l];
                        T::gemm(o, l, kl, go, (l as isize, 1), col, (1, l as isize), T::one(), dw.data_mut(), (kl as isize, 1));
                    }
                    self.accumulate(grads, *weight, dw);
                }
                if let Some(b) = bias {
                    if self.needs_grad(*b) {
                        let mut db = Tensor::zeros(self.value(*b).shape());
                        for s in 0..n {
                            for oc in 0..o {
                                let row = &g.data()[(s * o + oc) * l..(s * o + oc + 1) * l];
                                db.data_mut()[oc] += row.iter().copied().sum::<T>();
                            }
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
                if self.needs_grad(*input) {
                    let mut dx = Tensor::zeros(&[n, c, h, w]);
                    let mut dcols = vec![T::zero(); kl * l];
                    for s in 0..n {
                        let go = &g.data()[s * o * l..(s + 1) * o * l];
                        T::gemm(kl, o, l, wt.data(), (1, kl as isize), go, (l as isize, 1), T::zero(), &mut dcols, (l as isize, 1));
                        lw.raise(&dcols, &mut dx.data_mut()[s * c * h * w..(s + 1) * c * h * w]);
                    }
                    self.accumulate(grads, *input, dx);
                }
            }
            Op::InstanceNorm { input, xhat, inv_std } => {
                let (n, c, h, w) = self.value(*input).dims4()?;
                let hw = h * w;
                let inv_hw = T::one() / T::from_usize(hw).unwrap();
                let mut dx = Tensor::zeros(&[n, c, h, w]);
                let gd = g.data();
                for p in 0..n * c {
                    let r = p * hw..(p + 1) * hw;
                    let (gs, xs) = (&gd[r.clone()], &xhat[r.clone()]);
                    let mean_g = gs.iter().copied().sum::<T>() * inv_hw;
                    let mean_gx = gs.iter().zip(xs).map(|(&a, &b)| a * b).sum::<T>() * inv_hw;
                    for ((d, &gv), &xv) in dx.data_mut()[r].iter_mut().zip(gs).zip(xs) {
                        *d = inv_std[p] * (gv - mean_g - xv * mean_gx);
                    }
                }
                self.accumulate(grads, *input, dx);
            }
            Op::Relu(x) => {
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                self.accumulate(grads, *x, d);
            }
            Op::LeakyRelu(x, slope) => {
                let s = *slope;
                let d = g.zip_map(self.value(*x), |gv, xv| if xv > T::zero() { gv } else { gv * s })?;
                self.accumulate(grads, *x, d);
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, |gv, y| gv * y * (T::one() - y))?;
                self.accumulate(grads, *x, d);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4()?;
                let mut d = Tensor::zeros(&[n, c, h, w]);
                let gd = g.data();
                let dd = d.data_mut();
                for p in 0..n * c {
                    for y in 0..2 * h {
                        for xx in 0..2 * w {
                            dd[p * h * w + (y / 2) * w + xx / 2] += gd[p * 4 * h * w + y * 2 * w + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, d);
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.value(*b).shape()[1];
                let (sa, sb) = (ca * h * w, cb * h * w);
                let mut da = Vec::with_capacity(n * sa);
                let mut db = Vec::with_capacity(n * sb);
                for s in 0..n {
                    let chunk = g.outer(s);
                    da.extend_from_slice(&chunk[..sa]);
                    db.extend_from_slice(&chunk[sa..]);
                }
                self.accumulate(grads, *a, Tensor::from_vec(&[n, ca, h, w], da)?);
                self.accumulate(grads, *b, Tensor::from_vec(&[n, cb, h, w], db)?);
            }
            Op::GradScale(x, scale) => {
                let d = g.zip_map(scale, |gv, s| gv * s)?;
                self.accumulate(grads, *x, d);
            }
            Op::MeanSqToConst(x, t) => {
                let xv = self.value(*x);
                let k = g.item() * T::lit(2.0) / T::from_usize(xv.numel()).unwrap();
                let t = *t;
                self.accumulate(grads, *x, xv.map(|v| k * (v - t)));
            }
            Op::MeanAbsDiff(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = g.item() / T::from_usize(av.numel()).unwrap();
                let da = av.zip_map(bv, |p, q| k * sign(p - q))?;
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, da.map(|v| -v));
                }
                self.accumulate(grads, *a, da);
            }
            Op::Huber(a, b, gamma) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = g.item() / T::from_usize(av.numel()).unwrap();
                let gm = *gamma;
                let da = av.zip_map(bv, |p, q| k * (p - q).max(-gm).min(gm))?;
                if self.needs_grad(*b) {
                    self.accumulate(grads, *b, da.map(|v| -v));
                }
                self.accumulate(grads, *a, da);
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let k = g.item() / T::from_usize(xv.numel()).unwrap();
                self.accumulate(grads, *x, Tensor::full(xv.shape(), k));
            }
            Op::WeightedSum(terms) => {
                for &(v, w) in terms {
                    self.accumulate(grads, v, Tensor::scalar(g.item() * w));
                }
            }
        }
        Ok(())
    }
}

/// Column matrix of one sample; borrows the sample itself for 1×1 convs.
fn lower_sample<'a, T: Real>(lw: &Im2Col, sample: &'a [T], scratch: &'a mut Vec<T>) -> &'a [T] {
    if lw.is_identity() {
        return sample;
    }
    scratch.resize(lw.patch_len() * lw.out_len(), T::zero());
    lw.lower(sample, scratch);
    scratch
}

fn sign<T: Real>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::PadMode;

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    /// Central-difference check of d(loss)/d(leaf) for a graph-building closure.
    fn check_grad(shape: &[usize], build: impl Fn(&mut Graph<f64>, Var) -> Var) {
        let x0 = Tensor::from_vec(shape, pseudo(shape.iter().product(), 7)).unwrap();
        let mut g = Graph::new();
        let x = g.input(x0.clone());
        let root = build(&mut g, x);
        let grads = g.backward(root).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let h = 1e-6;
        for i in 0..x0.numel() {
            let eval = |delta: f64| {
                let mut t = x0.clone();
                t.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.input(t);
                let r = build(&mut g, x);
                g.value(r).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let an = analytic.data()[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs()),
                "element {i}: analytic {an} vs finite-difference {fd}"
            );
        }
    }

    fn weight(g: &mut Graph<f64>, shape: &[usize], seed: u64) -> Var {
        let t = Tensor::from_vec(shape, pseudo(shape.iter().product(), seed)).unwrap();
        g.constant(t)
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        for (spec, mode) in [
            (ConvSpec::new(3, 1, 1, PadMode::Reflect), "reflect"),
            (ConvSpec::new(3, 2, 1, PadMode::Zero), "zero"),
            (ConvSpec::new(4, 2, 1, PadMode::Zero), "k4"),
        ] {
            let _ = mode;
            check_grad(&[2, 2, 6, 6], |g, x| {
                let w = weight(g, &[3, 2, spec.kernel, spec.kernel], 3);
                let b = weight(g, &[3], 5);
                let y = g.conv2d(x, w, Some(b), spec).unwrap();
                let y = g.leaky_relu(y, 0.2);
                g.mean_sq_to(y, 0.3)
            });
        }
    }

    #[test]
    fn conv_weight_gradient_matches_finite_differences() {
        let input = Tensor::from_vec(&[2, 2, 5, 5], pseudo(100, 11)).unwrap();
        check_grad(&[3, 2, 3, 3], |g, w| {
            let x = g.constant(input.clone());
            let y = g.conv2d(x, w, None, ConvSpec::new(3, 1, 1, PadMode::Reflect)).unwrap();
            let y = g.sigmoid(y);
            g.mean_sq_to(y, 0.5)
        });
    }

    #[test]
    fn norm_and_upsample_gradients_match_finite_differences() {
        check_grad(&[2, 2, 3, 3], |g, x| {
            let y = g.instance_norm(x).unwrap();
            let y = g.upsample2x(y).unwrap();
            let target = weight(g, &[2, 2, 6, 6], 9);
            g.huber(y, target, 0.7).unwrap()
        });
    }

    #[test]
    fn concat_and_residual_gradients_match_finite_differences() {
        check_grad(&[1, 2, 4, 4], |g, x| {
            let m = weight(g, &[1, 1, 4, 4], 2);
            let y = g.concat_channels(x, m).unwrap();
            let w = weight(g, &[2, 3, 1, 1], 4);
            let y = g.conv2d(y, w, None, ConvSpec::new(1, 1, 0, PadMode::Zero)).unwrap();
            let y = g.relu(y);
            let y = g.add(y, x).unwrap();
            let t = weight(g, &[1, 2, 4, 4], 8);
            let l1 = g.mean_abs_diff(y, t).unwrap();
            let l2 = g.mean(y);
            g.weighted_sum(&[(l1, 2.0), (l2, -0.5)])
        });
    }

    #[test]
    fn grad_scale_is_forward_identity() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(&[1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap());
        let s = g
            .grad_scale(x, Tensor::from_vec(&[1, 1, 1, 3], vec![0.0, 0.5, 1.0]).unwrap())
            .unwrap();
        assert_eq!(g.value(s), g.value(x));
        let l = g.mean(s);
        let gr = g.backward(l).unwrap();
        let third = 1.0 / 3.0;
        assert_eq!(gr.get(x).unwrap().data(), &[0.0, 0.5 * third, third]);
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f32>::new();
        let c = g.constant(Tensor::ones(&[1, 1, 2, 2]));
        let x = g.input(Tensor::ones(&[1, 1, 2, 2]));
        let y = g.add(c, x).unwrap();
        let l = g.mean(y);
        let gr = g.backward(l).unwrap();
        assert!(gr.get(c).is_none());
        assert!(gr.get(x).is_some());
    }
}
