use std::collections::HashMap;

use crate::float::{lit, Float};
use crate::kernels::{self, gemm, gemm_view, MatRef};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Input,
    Param(ParamId),
    Reshape(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv3x3 {
        x: Var,
        w: Var,
        b: Option<Var>,
        cols: Vec<T>,
    },
    Add(Var, Var),
    Scale(Var, T),
    ScaleBatch {
        x: Var,
        factors: Vec<T>,
    },
    AddBroadcastLeading {
        x: Var,
        v: Var,
    },
    AddPerBatch {
        x: Var,
        v: Var,
    },
    Silu(Var),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        per_row: bool,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    ConcatLast(Var, Var),
    SpaceToDepth(Var),
    DepthToSpace(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<T>,
    },
    GatherRows {
        sources: Vec<Var>,
        index: Vec<(usize, usize)>,
    },
    MeanMiddle(Var),
    Mse {
        pred: Var,
        target: Var,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Result of a backward pass: parameter gradients plus gradients of any
/// inputs registered with [`Graph::input_with_grad`].
pub struct Backward<T> {
    pub params: Gradients<T>,
    inputs: HashMap<Var, Tensor<T>>,
}

impl<T: Float> Backward<T> {
    pub fn input(&self, v: Var) -> Option<&Tensor<T>> {
        self.inputs.get(&v)
    }
}

/// Tape recording the forward computation. Values of every node are kept
/// until the graph is dropped so that backward can reuse them.
pub struct Graph<'a, T> {
    store: Option<&'a ParamStore<T>>,
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    param_nodes: HashMap<ParamId, Var>,
}

const NORM_EPS: f64 = 1e-5;

impl<'a, T: Float> Graph<'a, T> {
    /// Graph that records everything needed for backward.
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            grad_enabled: true,
            param_nodes: HashMap::new(),
        }
    }

    /// Forward-only graph; saved activations for backward are skipped.
    pub fn inference(store: &'a ParamStore<T>) -> Self {
        Self {
            grad_enabled: false,
            ..Self::new(store)
        }
    }

    /// Graph with no parameter store, for pure functions of inputs.
    pub fn detached() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            grad_enabled: true,
            param_nodes: HashMap::new(),
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self
                .store
                .expect("parameter node without a store")
                .get(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes.get(&id) {
            return *v;
        }
        assert!(self.store.is_some(), "graph has no parameter store");
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Constant leaf.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            op: Op::Input,
            needs_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// `x·w + b` over the last axis of `x`; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        let k = *xs.last().unwrap();
        if ws.len() != 2 || ws[0] != k {
            return Err(Error::Shape(format!("linear: input {xs:?} weight {ws:?}")));
        }
        let n = ws[1];
        let rows = self.value(x).numel() / k;
        let mut out = vec![T::zero(); rows * n];
        gemm(rows, k, n, self.value(x).data(), false, self.value(w).data(), false, T::zero(), &mut out);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.numel() != n {
                return Err(Error::Shape(format!("linear bias {:?} for width {n}", bias.shape())));
            }
            add_rowwise(&mut out, bias.data());
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(Tensor::new(&shape, out)?, Op::Linear { x, w, b }, &parents))
    }

    /// Same-padded 3×3 convolution on an NHWC batch. `w` is `[9·c_in, c_out]`
    /// with rows ordered `(dy, dx, c_in)`.
    pub fn conv3x3(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 2 || ws[0] != 9 * xs[3] {
            return Err(Error::Shape(format!("conv3x3: input {xs:?} weight {ws:?}")));
        }
        let (bn, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
        let o = ws[1];
        let rows = bn * h * wd;
        let cols = kernels::im2col3x3(self.value(x).data(), bn, h, wd, c);
        let mut out = vec![T::zero(); rows * o];
        gemm(rows, 9 * c, o, &cols, false, self.value(w).data(), false, T::zero(), &mut out);
        if let Some(b) = b {
            let bias = self.value(b);
            if bias.numel() != o {
                return Err(Error::Shape(format!("conv bias {:?} for width {o}", bias.shape())));
            }
            add_rowwise(&mut out, bias.data());
        }
        let parents: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        let keep = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        let op = Op::Conv3x3 {
            x,
            w,
            b,
            cols: if keep { cols } else { Vec::new() },
        };
        Ok(self.push(Tensor::new(&[bn, h, wd, o], out)?, op, &parents))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let t = self.value(x).map(|v| v * s);
        self.push(t, Op::Scale(x, s), &[x])
    }

    /// Multiplies each leading-axis slice `x[i]` by `factors[i]`.
    pub fn scale_batch(&mut self, x: Var, factors: &[T]) -> Result<Var> {
        let xv = self.value(x);
        let lead = xv.shape()[0];
        if factors.len() != lead {
            return Err(Error::Shape(format!("scale_batch: {} factors for batch {lead}", factors.len())));
        }
        let inner = xv.numel() / lead;
        let mut data = xv.data().to_vec();
        for (i, chunk) in data.chunks_mut(inner).enumerate() {
            for v in chunk {
                *v *= factors[i];
            }
        }
        let t = Tensor::new(xv.shape(), data)?;
        Ok(self.push(t, Op::ScaleBatch { x, factors: factors.to_vec() }, &[x]))
    }

    /// Adds `v` to every trailing block of `x` whose shape equals `v`'s.
    pub fn add_broadcast_leading(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xs, vs) = (self.value(x).shape(), self.value(v).shape());
        if vs.len() > xs.len() || xs[xs.len() - vs.len()..] != *vs {
            return Err(Error::Shape(format!("broadcast {vs:?} onto {xs:?}")));
        }
        let mut data = self.value(x).data().to_vec();
        let vd = self.value(v).data();
        for chunk in data.chunks_mut(vd.len()) {
            for (a, b) in chunk.iter_mut().zip(vd) {
                *a += *b;
            }
        }
        let t = Tensor::new(self.value(x).shape(), data)?;
        Ok(self.push(t, Op::AddBroadcastLeading { x, v }, &[x, v]))
    }

    /// `x: [b, ..., c]` plus a per-sample vector `v: [b, c]`.
    pub fn add_per_batch(&mut self, x: Var, v: Var) -> Result<Var> {
        let (xs, vs) = (self.value(x).shape(), self.value(v).shape());
        if vs.len() != 2 || xs[0] != vs[0] || xs[xs.len() - 1] != vs[1] {
            return Err(Error::Shape(format!("add_per_batch {vs:?} onto {xs:?}")));
        }
        let (bn, c) = (vs[0], vs[1]);
        let inner = self.value(x).numel() / bn;
        let mut data = self.value(x).data().to_vec();
        let vd = self.value(v).data();
        for bi in 0..bn {
            let row = &vd[bi * c..(bi + 1) * c];
            for chunk in data[bi * inner..(bi + 1) * inner].chunks_mut(c) {
                for (a, b) in chunk.iter_mut().zip(row) {
                    *a += *b;
                }
            }
        }
        let t = Tensor::new(self.value(x).shape(), data)?;
        Ok(self.push(t, Op::AddPerBatch { x, v }, &[x, v]))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v * sigmoid(v));
        self.push(t, Op::Silu(x), &[x])
    }

    /// Group normalisation of `x: [b, ..., c]` over all positions and the
    /// `c / groups` channels of each group, with per-channel affine.
    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let c = *xs.last().unwrap();
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(Error::Shape(format!("group_norm: {c} channels into {groups} groups")));
        }
        self.norm(x, gamma, beta, groups, false)
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.norm(x, gamma, beta, 1, true)
    }

    fn norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, per_row: bool) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let c = *shape.last().unwrap();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::Shape(format!("norm affine size for width {c}")));
        }
        let (units, positions) = if per_row {
            (xv.numel() / c, 1)
        } else {
            (shape[0], xv.numel() / (shape[0] * c))
        };
        let cg = c / groups;
        let n = lit::<T>((positions * cg) as f64);
        let mut xhat = vec![T::zero(); xv.numel()];
        let mut rstd = vec![T::zero(); units * groups];
        let data = xv.data();
        for u in 0..units {
            let base = u * positions * c;
            for g in 0..groups {
                let mut mean = T::zero();
                for p in 0..positions {
                    let off = base + p * c + g * cg;
                    for &v in &data[off..off + cg] {
                        mean += v;
                    }
                }
                mean /= n;
                let mut var = T::zero();
                for p in 0..positions {
                    let off = base + p * c + g * cg;
                    for &v in &data[off..off + cg] {
                        let d = v - mean;
                        var += d * d;
                    }
                }
                var /= n;
                let r = T::one() / (var + lit(NORM_EPS)).sqrt();
                rstd[u * groups + g] = r;
                for p in 0..positions {
                    let off = base + p * c + g * cg;
                    for i in off..off + cg {
                        xhat[i] = (data[i] - mean) * r;
                    }
                }
            }
        }
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(c) {
            for ((v, &gm), &bt) in row.iter_mut().zip(gd).zip(bd) {
                *v = *v * gm + bt;
            }
        }
        let t = Tensor::new(&shape, out)?;
        let keep = self.grad_enabled;
        let op = Op::Norm {
            x,
            gamma,
            beta,
            groups,
            per_row,
            xhat: if keep { xhat } else { Vec::new() },
            rstd: if keep { rstd } else { Vec::new() },
        };
        Ok(self.push(t, op, &[x, gamma, beta]))
    }

    /// Concatenation along the last axis.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (asz, bsz) = (self.value(a).shape().to_vec(), self.value(b).shape().to_vec());
        if asz.len() != bsz.len() || asz[..asz.len() - 1] != bsz[..bsz.len() - 1] {
            return Err(Error::Shape(format!("concat_last {asz:?} with {bsz:?}")));
        }
        let (ca, cb) = (*asz.last().unwrap(), *bsz.last().unwrap());
        let rows = self.value(a).numel() / ca.max(1);
        let mut out = Vec::with_capacity(rows * (ca + cb));
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for r in 0..rows {
            out.extend_from_slice(&ad[r * ca..(r + 1) * ca]);
            out.extend_from_slice(&bd[r * cb..(r + 1) * cb]);
        }
        let mut shape = asz;
        *shape.last_mut().unwrap() = ca + cb;
        Ok(self.push(Tensor::new(&shape, out)?, Op::ConcatLast(a, b), &[a, b]))
    }

    /// `[b, h, w, c] -> [b, h/2, w/2, 4c]`.
    pub fn space_to_depth(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || !s[1].is_multiple_of(2) || !s[2].is_multiple_of(2) {
            return Err(Error::Shape(format!("space_to_depth on {s:?}")));
        }
        let out = kernels::space_to_depth(self.value(x).data(), s[0], s[1], s[2], s[3], 2);
        let t = Tensor::new(&[s[0], s[1] / 2, s[2] / 2, 4 * s[3]], out)?;
        Ok(self.push(t, Op::SpaceToDepth(x), &[x]))
    }

    /// `[b, h, w, 4c] -> [b, 2h, 2w, c]`.
    pub fn depth_to_space(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() != 4 || !s[3].is_multiple_of(4) {
            return Err(Error::Shape(format!("depth_to_space on {s:?}")));
        }
        let out = kernels::depth_to_space(self.value(x).data(), s[0], s[1], s[2], s[3] / 4, 2);
        let t = Tensor::new(&[s[0], s[1] * 2, s[2] * 2, s[3] / 4], out)?;
        Ok(self.push(t, Op::DepthToSpace(x), &[x]))
    }

    /// Multi-head scaled dot-product attention.
    /// `q: [b, sq, d]`, `k, v: [b, sk, d]`; returns `[b, sq, d]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qs, ks, vs) = (
            self.value(q).shape().to_vec(),
            self.value(k).shape().to_vec(),
            self.value(v).shape().to_vec(),
        );
        if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(Error::Shape(format!("attention q {qs:?} k {ks:?} v {vs:?}")));
        }
        let (bn, sq, d) = (qs[0], qs[1], qs[2]);
        let sk = ks[1];
        if heads == 0 || d % heads != 0 {
            return Err(Error::Shape(format!("attention width {d} with {heads} heads")));
        }
        let dh = d / heads;
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); bn * heads * sq * sk];
        let mut out = vec![T::zero(); bn * sq * d];
        {
            let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
            for bi in 0..bn {
                for h in 0..heads {
                    let p_off = (bi * heads + h) * sq * sk;
                    let q_off = bi * sq * d + h * dh;
                    let k_off = bi * sk * d + h * dh;
                    gemm_view(
                        scale,
                        qd,
                        q_off,
                        strided(sq, dh, d, 1),
                        kd,
                        k_off,
                        strided(dh, sk, 1, d),
                        T::zero(),
                        &mut probs,
                        p_off,
                        MatRef::dense(sq, sk, false),
                    );
                    for row in probs[p_off..p_off + sq * sk].chunks_mut(sk) {
                        softmax_in_place(row);
                    }
                    gemm_view(
                        T::one(),
                        &probs,
                        p_off,
                        MatRef::dense(sq, sk, false),
                        vd,
                        k_off,
                        strided(sk, dh, d, 1),
                        T::zero(),
                        &mut out,
                        q_off,
                        strided(sq, dh, d, 1),
                    );
                }
            }
        }
        let keep = self.grad_enabled;
        let op = Op::Attention {
            q,
            k,
            v,
            heads,
            probs: if keep { probs } else { Vec::new() },
        };
        Ok(self.push(Tensor::new(&[bn, sq, d], out)?, op, &[q, k, v]))
    }

    /// Row `i` of the result is row `index[i].1` of `sources[index[i].0]`;
    /// every source must be `[rows, d]`.
    pub fn gather_rows(&mut self, sources: &[Var], index: &[(usize, usize)], shape: &[usize]) -> Result<Var> {
        let d = self.value(sources[0]).last_dim();
        let mut out = Vec::with_capacity(index.len() * d);
        for &(s, r) in index {
            let src = self.value(*sources.get(s).ok_or_else(|| Error::Shape(format!("gather source {s}")))?);
            if src.shape().len() != 2 || src.shape()[1] != d {
                return Err(Error::Shape(format!("gather source shape {:?}", src.shape())));
            }
            if r >= src.shape()[0] {
                return Err(Error::Shape(format!("gather row {r} of {:?}", src.shape())));
            }
            out.extend_from_slice(&src.data()[r * d..(r + 1) * d]);
        }
        let t = Tensor::new(shape, out)?;
        let op = Op::GatherRows {
            sources: sources.to_vec(),
            index: index.to_vec(),
        };
        Ok(self.push(t, op, sources))
    }

    /// `[b, ..., c] -> [b, c]` averaging over the middle axes.
    pub fn mean_middle(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape().to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("mean_middle on {s:?}")));
        }
        let (bn, c) = (s[0], *s.last().unwrap());
        let positions = self.value(x).numel() / (bn * c);
        let inv = lit::<T>(1.0 / positions as f64);
        let mut out = vec![T::zero(); bn * c];
        let xd = self.value(x).data();
        for bi in 0..bn {
            for p in 0..positions {
                let off = (bi * positions + p) * c;
                for (o, &v) in out[bi * c..(bi + 1) * c].iter_mut().zip(&xd[off..off + c]) {
                    *o += v;
                }
            }
        }
        for o in &mut out {
            *o *= inv;
        }
        Ok(self.push(Tensor::new(&[bn, c], out)?, Op::MeanMiddle(x), &[x]))
    }

    /// Mean of squared differences over every element.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (self.value(pred), self.value(target));
        p.expect_same_shape(t)?;
        let n = lit::<T>(p.numel() as f64);
        let loss = p
            .data()
            .iter()
            .zip(t.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / n;
        Ok(self.push(Tensor::scalar(loss), Op::Mse { pred, target }, &[pred, target]))
    }

    /// Mean softmax cross-entropy of `logits: [b, k]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() || labels.iter().any(|&l| l >= s[1]) {
            return Err(Error::Shape(format!("cross_entropy logits {s:?} with {} labels", labels.len())));
        }
        let k = s[1];
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = T::zero();
        for (row, &l) in probs.chunks_mut(k).zip(labels) {
            softmax_in_place(row);
            loss -= row[l].max(lit(1e-30)).ln();
        }
        loss /= lit(labels.len() as f64);
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(Tensor::scalar(loss), op, &[logits]))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, root: Var) -> Result<Backward<T>> {
        if !self.grad_enabled {
            return Err(Error::NoGrad);
        }
        let seed = Tensor::full(self.value(root).shape(), T::one());
        self.backward_with(root, seed)
    }

    /// Reverse sweep seeded with an arbitrary output cotangent.
    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Result<Backward<T>> {
        if !self.grad_enabled {
            return Err(Error::NoGrad);
        }
        self.value(root).expect_same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        let n_params = self.store.map(ParamStore::len).unwrap_or(0);
        let mut param_grads: Vec<Option<Tensor<T>>> = (0..n_params).map(|_| None).collect();
        let mut inputs = HashMap::new();

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Param(id) => {
                    accumulate(&mut param_grads[id.0], g);
                }
                Op::Input => {
                    inputs.insert(Var(i), g);
                }
                op => {
                    for (parent, pg) in self.op_backward(op, &g)? {
                        if self.nodes[parent.0].needs_grad {
                            accumulate(&mut grads[parent.0], pg);
                        }
                    }
                }
            }
        }
        Ok(Backward {
            params: Gradients { params: param_grads },
            inputs,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn op_backward(&self, op: &Op<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let mut out = Vec::new();
        match op {
            Op::Input | Op::Param(_) => {}
            Op::Reshape(x) => {
                out.push((*x, g.clone().reshape(self.shape(*x))?));
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.numel() / k;
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); rows * k];
                    gemm(rows, n, k, g.data(), false, wv.data(), true, T::zero(), &mut dx);
                    out.push((*x, Tensor::new(xv.shape(), dx)?));
                }
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); k * n];
                    gemm(k, rows, n, xv.data(), true, g.data(), false, T::zero(), &mut dw);
                    out.push((*w, Tensor::new(wv.shape(), dw)?));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        out.push((*b, Tensor::new(self.shape(*b), column_sums(g.data(), n))?));
                    }
                }
            }
            Op::Conv3x3 { x, w, b, cols } => {
                let xs = self.shape(*x).to_vec();
                let (bn, h, wd, c) = (xs[0], xs[1], xs[2], xs[3]);
                let wv = self.value(*w);
                let o = wv.shape()[1];
                let rows = bn * h * wd;
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); 9 * c * o];
                    gemm(9 * c, rows, o, cols, true, g.data(), false, T::zero(), &mut dw);
                    out.push((*w, Tensor::new(wv.shape(), dw)?));
                }
                if self.wants(*x) {
                    let mut dcols = vec![T::zero(); rows * 9 * c];
                    gemm(rows, o, 9 * c, g.data(), false, wv.data(), true, T::zero(), &mut dcols);
                    let dx = kernels::col2im3x3(&dcols, bn, h, wd, c);
                    out.push((*x, Tensor::new(&xs, dx)?));
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        out.push((*b, Tensor::new(self.shape(*b), column_sums(g.data(), o))?));
                    }
                }
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Scale(x, s) => {
                out.push((*x, g.map(|v| v * *s)));
            }
            Op::ScaleBatch { x, factors } => {
                let inner = g.numel() / factors.len();
                let mut d = g.data().to_vec();
                for (i, chunk) in d.chunks_mut(inner).enumerate() {
                    for v in chunk {
                        *v *= factors[i];
                    }
                }
                out.push((*x, Tensor::new(g.shape(), d)?));
            }
            Op::AddBroadcastLeading { x, v } => {
                out.push((*x, g.clone()));
                if self.wants(*v) {
                    let vs = self.shape(*v);
                    let len = vs.iter().product::<usize>();
                    let mut dv = vec![T::zero(); len];
                    for chunk in g.data().chunks(len) {
                        for (a, &b) in dv.iter_mut().zip(chunk) {
                            *a += b;
                        }
                    }
                    out.push((*v, Tensor::new(vs, dv)?));
                }
            }
            Op::AddPerBatch { x, v } => {
                out.push((*x, g.clone()));
                if self.wants(*v) {
                    let vs = self.shape(*v).to_vec();
                    let (bn, c) = (vs[0], vs[1]);
                    let inner = g.numel() / bn;
                    let mut dv = vec![T::zero(); bn * c];
                    for bi in 0..bn {
                        for chunk in g.data()[bi * inner..(bi + 1) * inner].chunks(c) {
                            for (a, &b) in dv[bi * c..(bi + 1) * c].iter_mut().zip(chunk) {
                                *a += b;
                            }
                        }
                    }
                    out.push((*v, Tensor::new(&vs, dv)?));
                }
            }
            Op::Silu(x) => {
                let xv = self.value(*x);
                let d = xv
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| {
                        let s = sigmoid(v);
                        gv * s * (T::one() + v * (T::one() - s))
                    })
                    .collect();
                out.push((*x, Tensor::new(xv.shape(), d)?));
            }
            Op::Norm {
                x,
                gamma,
                beta,
                groups,
                per_row,
                xhat,
                rstd,
            } => {
                let shape = self.shape(*x).to_vec();
                let c = *shape.last().unwrap();
                let numel = g.numel();
                let (units, positions) = if *per_row {
                    (numel / c, 1)
                } else {
                    (shape[0], numel / (shape[0] * c))
                };
                let groups = *groups;
                let cg = c / groups;
                let gd = self.value(*gamma).data();
                let gdat = g.data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (row_g, row_x) in gdat.chunks(c).zip(xhat.chunks(c)) {
                    for ch in 0..c {
                        dgamma[ch] += row_g[ch] * row_x[ch];
                        dbeta[ch] += row_g[ch];
                    }
                }
                if self.wants(*x) {
                    let n = lit::<T>((positions * cg) as f64);
                    let mut dx = vec![T::zero(); numel];
                    for u in 0..units {
                        let base = u * positions * c;
                        for gi in 0..groups {
                            let mut sum_d = T::zero();
                            let mut sum_dx = T::zero();
                            for p in 0..positions {
                                let off = base + p * c + gi * cg;
                                for j in 0..cg {
                                    let dxh = gdat[off + j] * gd[gi * cg + j];
                                    sum_d += dxh;
                                    sum_dx += dxh * xhat[off + j];
                                }
                            }
                            let mean_d = sum_d / n;
                            let mean_dx = sum_dx / n;
                            let r = rstd[u * groups + gi];
                            for p in 0..positions {
                                let off = base + p * c + gi * cg;
                                for j in 0..cg {
                                    let dxh = gdat[off + j] * gd[gi * cg + j];
                                    dx[off + j] = r * (dxh - mean_d - xhat[off + j] * mean_dx);
                                }
                            }
                        }
                    }
                    out.push((*x, Tensor::new(&shape, dx)?));
                }
                out.push((*gamma, Tensor::new(self.shape(*gamma), dgamma)?));
                out.push((*beta, Tensor::new(self.shape(*beta), dbeta)?));
            }
            Op::ConcatLast(a, b) => {
                let (ca, cb) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                let rows = g.numel() / (ca + cb);
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for row in g.data().chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                out.push((*a, Tensor::new(self.shape(*a), da)?));
                out.push((*b, Tensor::new(self.shape(*b), db)?));
            }
            Op::SpaceToDepth(x) => {
                let s = self.shape(*x).to_vec();
                let d = kernels::depth_to_space(g.data(), s[0], s[1] / 2, s[2] / 2, s[3], 2);
                out.push((*x, Tensor::new(&s, d)?));
            }
            Op::DepthToSpace(x) => {
                let s = self.shape(*x).to_vec();
                let d = kernels::space_to_depth(g.data(), s[0], s[1] * 2, s[2] * 2, s[3] / 4, 2);
                out.push((*x, Tensor::new(&s, d)?));
            }
            Op::Attention { q, k, v, heads, probs } => {
                out.extend(self.attention_backward(*q, *k, *v, *heads, probs, g)?);
            }
            Op::GatherRows { sources, index } => {
                let d = self.value(sources[0]).last_dim();
                let mut per_source: Vec<Option<Vec<T>>> = vec![None; sources.len()];
                for (i, &(s, r)) in index.iter().enumerate() {
                    if !self.wants(sources[s]) {
                        continue;
                    }
                    let buf = per_source[s]
                        .get_or_insert_with(|| vec![T::zero(); self.value(sources[s]).numel()]);
                    for (a, &b) in buf[r * d..(r + 1) * d].iter_mut().zip(&g.data()[i * d..(i + 1) * d]) {
                        *a += b;
                    }
                }
                for (s, buf) in per_source.into_iter().enumerate() {
                    if let Some(buf) = buf {
                        out.push((sources[s], Tensor::new(self.shape(sources[s]), buf)?));
                    }
                }
            }
            Op::MeanMiddle(x) => {
                let s = self.shape(*x).to_vec();
                let (bn, c) = (s[0], *s.last().unwrap());
                let numel: usize = s.iter().product();
                let positions = numel / (bn * c);
                let inv = lit::<T>(1.0 / positions as f64);
                let mut d = vec![T::zero(); numel];
                for bi in 0..bn {
                    let row = &g.data()[bi * c..(bi + 1) * c];
                    for p in 0..positions {
                        let off = (bi * positions + p) * c;
                        for (a, &b) in d[off..off + c].iter_mut().zip(row) {
                            *a = b * inv;
                        }
                    }
                }
                out.push((*x, Tensor::new(&s, d)?));
            }
            Op::Mse { pred, target } => {
                let (p, t) = (self.value(*pred), self.value(*target));
                let f = g.data()[0] * lit::<T>(2.0 / p.numel() as f64);
                let dp = p.zip_map(t, |a, b| (a - b) * f)?;
                if self.wants(*target) {
                    out.push((*target, dp.map(|v| -v)));
                }
                out.push((*pred, dp));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.value(*logits).last_dim();
                let f = g.data()[0] / lit(labels.len() as f64);
                let mut d = probs.clone();
                for (row, &l) in d.chunks_mut(k).zip(labels) {
                    row[l] -= T::one();
                    for v in row.iter_mut() {
                        *v *= f;
                    }
                }
                out.push((*logits, Tensor::new(self.shape(*logits), d)?));
            }
        }
        Ok(out)
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[T],
        g: &Tensor<T>,
    ) -> Result<Vec<(Var, Tensor<T>)>> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (bn, sq, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let sk = kv.shape()[1];
        let dh = d / heads;
        let scale = lit::<T>(1.0 / (dh as f64).sqrt());
        let mut dq = vec![T::zero(); qv.numel()];
        let mut dk = vec![T::zero(); kv.numel()];
        let mut dv = vec![T::zero(); vv.numel()];
        let mut dp = vec![T::zero(); sq * sk];
        let gd = g.data();
        for bi in 0..bn {
            for h in 0..heads {
                let p_off = (bi * heads + h) * sq * sk;
                let q_off = bi * sq * d + h * dh;
                let k_off = bi * sk * d + h * dh;
                let p = MatRef::dense(sq, sk, false);
                // dV = Pᵀ·dO
                gemm_view(
                    T::one(),
                    probs,
                    p_off,
                    MatRef::dense(sk, sq, true),
                    gd,
                    q_off,
                    strided(sq, dh, d, 1),
                    T::zero(),
                    &mut dv,
                    k_off,
                    strided(sk, dh, d, 1),
                );
                // dP = dO·Vᵀ
                gemm_view(
                    T::one(),
                    gd,
                    q_off,
                    strided(sq, dh, d, 1),
                    vv.data(),
                    k_off,
                    strided(dh, sk, 1, d),
                    T::zero(),
                    &mut dp,
                    0,
                    p,
                );
                // dS = P ⊙ (dP − rowsum(dP ⊙ P)), folded with the score scale
                for r in 0..sq {
                    let prow = &probs[p_off + r * sk..p_off + (r + 1) * sk];
                    let drow = &mut dp[r * sk..(r + 1) * sk];
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (dv_, &pv) in drow.iter_mut().zip(prow) {
                        *dv_ = pv * (*dv_ - dot) * scale;
                    }
                }
                // dQ = dS·K
                gemm_view(
                    T::one(),
                    &dp,
                    0,
                    p,
                    kv.data(),
                    k_off,
                    strided(sk, dh, d, 1),
                    T::zero(),
                    &mut dq,
                    q_off,
                    strided(sq, dh, d, 1),
                );
                // dK = dSᵀ·Q
                gemm_view(
                    T::one(),
                    &dp,
                    0,
                    MatRef::dense(sk, sq, true),
                    qv.data(),
                    q_off,
                    strided(sq, dh, d, 1),
                    T::zero(),
                    &mut dk,
                    k_off,
                    strided(sk, dh, d, 1),
                );
            }
        }
        Ok(vec![
            (q, Tensor::new(qv.shape(), dq)?),
            (k, Tensor::new(kv.shape(), dk)?),
            (v, Tensor::new(vv.shape(), dv)?),
        ])
    }
}

fn strided(rows: usize, cols: usize, rs: usize, cs: usize) -> MatRef {
    MatRef {
        rows,
        cols,
        row_stride: rs as isize,
        col_stride: cs as isize,
    }
}

fn accumulate<T: Float>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(existing) => {
            for (a, &b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        None => *slot = Some(g),
    }
}

fn add_rowwise<T: Float>(out: &mut [T], bias: &[T]) {
    for row in out.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn column_sums<T: Float>(data: &[T], n: usize) -> Vec<T> {
    let mut s = vec![T::zero(); n];
    for row in data.chunks(n) {
        for (a, &b) in s.iter_mut().zip(row) {
            *a += b;
        }
    }
    s
}

fn sigmoid<T: Float>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

pub(crate) fn softmax_in_place<T: Float>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax of a `[rows, k]` tensor, outside of any graph.
pub fn softmax_rows<T: Float>(t: &Tensor<T>) -> Tensor<T> {
    let k = t.last_dim();
    let mut d = t.data().to_vec();
    for row in d.chunks_mut(k) {
        softmax_in_place(row);
    }
    Tensor::new(t.shape(), d).expect("same shape")
}
