use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeom};
use super::{softmax_row, Scalar, Tensor};
use crate::error::{MindError, Result};

/// Floor for probabilities inside logarithms.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Divergence used between teacher and student distributions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillKind {
    /// `½·KL(p_T‖p_S) + ½·KL(p_S‖p_T)`.
    #[default]
    SymmetricKl,
    /// Midpoint form `½·KL(p_T‖m) + ½·KL(p_S‖m)`, `m = (p_T + p_S)/2`.
    JensenShannon,
}

enum Op<T> {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    Linear {
        x: NodeId,
        w: NodeId,
    },
    AddBias {
        x: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        s: T,
    },
    Sum {
        x: NodeId,
    },
    Relu {
        x: NodeId,
    },
    Reshape {
        x: NodeId,
    },
    SelectCols {
        x: NodeId,
        cols: Vec<usize>,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    MaxPool {
        x: NodeId,
        argmax: Vec<u32>,
    },
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
        mean: Vec<T>,
        var: Vec<T>,
    },
    Softmax {
        x: NodeId,
    },
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Distill {
        student: NodeId,
        kind: DistillKind,
        inv_temp: T,
        p_s: Vec<T>,
        p_t: Vec<T>,
    },
}

impl<T> Op<T> {
    fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b } | Add { a, b } | Mul { a, b } => vec![*a, *b],
            Linear { x, w } | Conv2d { x, w, .. } => vec![*x, *w],
            AddBias { x, b } => vec![*x, *b],
            Scale { x, .. } | Sum { x } | Relu { x } | Reshape { x } | SelectCols { x, .. } | MaxPool { x, .. } | Softmax { x } => vec![*x],
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            CrossEntropy { logits, .. } => vec![*logits],
            // The teacher is an input value only; no gradient flows to it.
            Distill { student, .. } => vec![*student],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recorded forward computation. Nodes are appended in evaluation order, so
/// index order is a topological order of the DAG.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dim_err(msg: String) -> MindError {
    MindError::Dimension(msg)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> NodeId {
        let needs_grad = match op {
            Op::Leaf => value.requires_grad,
            _ => op.inputs().iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node { value, op, needs_grad });
        self.leaf_grads.push(None);
        NodeId(self.nodes.len() - 1)
    }

    /// Adds a leaf. It receives a gradient iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn param(&mut self, t: Tensor<T>) -> NodeId {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        let mut t = t;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.leaf_grads[id.0].as_deref()
    }

    pub fn zero_grads(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    /// Batch mean and biased variance seen by a training-mode batch norm node.
    pub fn batch_stats(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.nodes[id.0].op {
            Op::BatchNorm { train: true, mean, var, .. } => Some((mean, var)),
            _ => None,
        }
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(dim_err(format!("matmul {sa:?} × {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), &mut out, m, k, n, false);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }))
    }

    /// `x[B×in] · w[out×in]ᵀ`.
    pub fn linear(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(dim_err(format!("linear input {sx:?} with weight {sw:?}")));
        }
        let (b, k, n) = (sx[0], sx[1], sw[0]);
        let mut out = vec![T::zero(); b * n];
        kernels::matmul_bt(self.value(x).data(), self.value(w).data(), &mut out, b, k, n, false);
        Ok(self.push(Tensor::new(vec![b, n], out)?, Op::Linear { x, w }))
    }

    /// Adds `b[C]` along axis 1 of `x[N×C×…]`.
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        let c = self.value(b).numel();
        if sx.len() < 2 || sx[1] != c {
            return Err(dim_err(format!("bias of {c} on {sx:?}")));
        }
        let inner: usize = sx[2..].iter().product();
        let mut out = self.value(x).data().to_vec();
        let bd = self.value(b).data();
        for (i, chunk) in out.chunks_mut(inner).enumerate() {
            let bv = bd[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        Ok(self.push(Tensor::new(sx, out)?, Op::AddBias { x, b }))
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!("{what} {:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p + q).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(&p, &q)| p * q).collect();
        let t = Tensor::new(self.shape(a).to_vec(), out)?;
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: NodeId, s: T) -> NodeId {
        let v = self.value(x);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| e * s).collect()).expect("same shape");
        self.push(t, Op::Scale { x, s })
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = v.data().iter().map(|&e| if e > T::zero() { e } else { T::zero() }).collect();
        let t = Tensor::new(v.shape().to_vec(), out).expect("same shape");
        self.push(t, Op::Relu { x })
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape { x }))
    }

    /// Keeps the listed columns of `x[B×C]`, in the given order.
    pub fn select_cols(&mut self, x: NodeId, cols: &[usize]) -> Result<NodeId> {
        let sx = self.shape(x);
        if sx.len() != 2 || cols.iter().any(|&c| c >= sx[1]) {
            return Err(dim_err(format!("select {cols:?} from {sx:?}")));
        }
        let (b, c) = (sx[0], sx[1]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(b * cols.len());
        for r in 0..b {
            out.extend(cols.iter().map(|&j| src[r * c + j]));
        }
        let t = Tensor::new(vec![b, cols.len()], out)?;
        Ok(self.push(t, Op::SelectCols { x, cols: cols.to_vec() }))
    }

    /// Cross-correlation of `x[N×C×H×W]` with `w[F×C×kh×kw]`, zero padded.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(dim_err(format!("conv2d input {sx:?} with kernel {sw:?}")));
        }
        if stride == 0 {
            return Err(dim_err("conv2d stride must be ≥ 1".into()));
        }
        let (n, c, h, wd) = (sx[0], sx[1], sx[2], sx[3]);
        let (f, kh, kw) = (sw[0], sw[2], sw[3]);
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
        if kh > ph || kw > pw {
            return Err(dim_err(format!("kernel {kh}×{kw} larger than padded input {ph}×{pw}")));
        }
        let geom = ConvGeom {
            n,
            c,
            h,
            w: wd,
            f,
            kh,
            kw,
            stride,
            pad,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        };
        let mut cols = vec![T::zero(); geom.patch() * geom.cols()];
        kernels::im2col(self.value(x).data(), &geom, &mut cols);
        let mut tmp = vec![T::zero(); f * geom.cols()];
        kernels::matmul(self.value(w).data(), &cols, &mut tmp, f, geom.patch(), geom.cols(), false);
        let mut out = vec![T::zero(); tmp.len()];
        kernels::fold_channels(&tmp, n, f, geom.out_plane(), &mut out);
        let t = Tensor::new(vec![n, f, geom.oh, geom.ow], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, geom, cols }))
    }

    /// Non-overlapping `k×k` max pooling (trailing rows/cols dropped).
    pub fn max_pool(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 || k == 0 || sx[2] < k || sx[3] < k {
            return Err(dim_err(format!("max_pool {k} on {sx:?}")));
        }
        let (nc, h, w) = (sx[0] * sx[1], sx[2], sx[3]);
        let (oh, ow) = (h / k, w / k);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(nc * oh * ow);
        let mut argmax = Vec::with_capacity(nc * oh * ow);
        for p in 0..nc {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = oy * k * w + ox * k;
                    for dy in 0..k {
                        for dx in 0..k {
                            let i = (oy * k + dy) * w + ox * k + dx;
                            if plane[i] > plane[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(plane[best]);
                    argmax.push((p * h * w + best) as u32);
                }
            }
        }
        let t = Tensor::new(vec![sx[0], sx[1], oh, ow], out)?;
        Ok(self.push(t, Op::MaxPool { x, argmax }))
    }

    fn bn_check(&self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<(usize, usize, usize)> {
        let sx = self.shape(x);
        if sx.len() < 2 {
            return Err(dim_err(format!("batch norm on {sx:?}")));
        }
        let c = sx[1];
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(dim_err(format!("batch norm affine size vs {c} channels")));
        }
        let inner: usize = sx[2..].iter().product();
        Ok((sx[0], c, inner))
    }

    /// Batch norm over axis 1 using batch statistics.
    pub fn batch_norm_train(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let (n, c, inner) = self.bn_check(x, gamma, beta)?;
        let m = T::from_usize(n * inner).unwrap();
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for s in 0..n {
            for ch in 0..c {
                let seg = &xd[(s * c + ch) * inner..(s * c + ch + 1) * inner];
                mean[ch] += seg.iter().copied().sum::<T>();
            }
        }
        mean.iter_mut().for_each(|v| *v = *v / m);
        for s in 0..n {
            for ch in 0..c {
                let seg = &xd[(s * c + ch) * inner..(s * c + ch + 1) * inner];
                var[ch] += seg.iter().map(|&v| (v - mean[ch]) * (v - mean[ch])).sum::<T>();
            }
        }
        var.iter_mut().for_each(|v| *v = *v / m);
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        self.bn_finish(x, gamma, beta, mean, var, inv_std, true, n, c, inner)
    }

    /// Batch norm over axis 1 using stored running statistics.
    pub fn batch_norm_eval(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, mean: &[T], var: &[T], eps: T) -> Result<NodeId> {
        let (n, c, inner) = self.bn_check(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(dim_err(format!("running stats size vs {c} channels")));
        }
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        self.bn_finish(x, gamma, beta, mean.to_vec(), var.to_vec(), inv_std, false, n, c, inner)
    }

    #[allow(clippy::too_many_arguments)]
    fn bn_finish(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: Vec<T>,
        var: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
        n: usize,
        c: usize,
        inner: usize,
    ) -> Result<NodeId> {
        let xd = self.value(x).data();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for s in 0..n {
            for ch in 0..c {
                let r = (s * c + ch) * inner..(s * c + ch + 1) * inner;
                for i in r {
                    let h = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gd[ch] * h + bd[ch];
                }
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                mean,
                var,
            },
        ))
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        if v.shape().is_empty() || *v.shape().last().unwrap() == 0 {
            return Err(dim_err(format!("softmax on {:?}", v.shape())));
        }
        let t = super::softmax(v, T::one());
        Ok(self.push(t, Op::Softmax { x }))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let sl = self.shape(logits);
        if sl.len() != 2 || sl[0] != labels.len() || sl[0] == 0 {
            return Err(dim_err(format!("cross entropy logits {sl:?} with {} labels", labels.len())));
        }
        let (b, c) = (sl[0], sl[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(MindError::Contract(format!("label {bad} outside [0, {c})")));
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for r in 0..b {
            let row = &z[r * c..(r + 1) * c];
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            total += lse - row[labels[r]];
            softmax_row(row, T::one(), &mut probs[r * c..(r + 1) * c]);
        }
        let loss = total / T::from_usize(b).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Batch-mean divergence between `softmax(student/T)` and `softmax(teacher/T)`.
    /// The teacher is treated as a constant.
    pub fn distill(&mut self, student: NodeId, teacher: NodeId, kind: DistillKind, temperature: T) -> Result<NodeId> {
        self.same_shape(student, teacher, "distill")?;
        let ss = self.shape(student);
        if ss.len() != 2 || ss[0] == 0 {
            return Err(dim_err(format!("distill logits {ss:?}")));
        }
        let (b, c) = (ss[0], ss[1]);
        let inv_temp = temperature.recip();
        let mut p_s = vec![T::zero(); b * c];
        let mut p_t = vec![T::zero(); b * c];
        let (zs, zt) = (self.value(student).data(), self.value(teacher).data());
        let mut total = T::zero();
        for r in 0..b {
            let rr = r * c..(r + 1) * c;
            softmax_row(&zs[rr.clone()], inv_temp, &mut p_s[rr.clone()]);
            softmax_row(&zt[rr.clone()], inv_temp, &mut p_t[rr.clone()]);
            total += divergence(kind, &p_t[rr.clone()], &p_s[rr]);
        }
        let loss = total / T::from_usize(b).unwrap();
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Distill {
                student,
                kind,
                inv_temp,
                p_s,
                p_t,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if !lv.is_scalar() {
            return Err(MindError::Contract(format!("backward needs a scalar loss, got shape {:?}", lv.shape())));
        }
        lv.check_finite("loss")?;
        let Graph { nodes, leaf_grads } = self;
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let mut acc = |id: NodeId, f: &dyn Fn(&mut [T])| {
                if !nodes[id.0].needs_grad {
                    return;
                }
                let slot = grads[id.0].get_or_insert_with(|| vec![T::zero(); nodes[id.0].value.numel()]);
                f(slot);
            };
            let val = |id: NodeId| &nodes[id.0].value;
            match &node.op {
                Op::Leaf => {
                    let slot = leaf_grads[i].get_or_insert_with(|| vec![T::zero(); g.len()]);
                    slot.iter_mut().zip(&g).for_each(|(s, &v)| *s += v);
                }
                Op::MatMul { a, b } => {
                    let (sa, sb) = (val(*a).shape(), val(*b).shape());
                    let (m, k, n) = (sa[0], sa[1], sb[1]);
                    acc(*a, &|da| kernels::matmul_bt(&g, val(*b).data(), da, m, n, k, true));
                    acc(*b, &|db| kernels::matmul_at(val(*a).data(), &g, db, k, m, n, true));
                }
                Op::Linear { x, w } => {
                    let (sx, sw) = (val(*x).shape(), val(*w).shape());
                    let (bsz, k, n) = (sx[0], sx[1], sw[0]);
                    acc(*x, &|dx| kernels::matmul(&g, val(*w).data(), dx, bsz, n, k, true));
                    acc(*w, &|dw| kernels::matmul_at(&g, val(*x).data(), dw, n, bsz, k, true));
                }
                Op::AddBias { x, b } => {
                    acc(*x, &|dx| dx.iter_mut().zip(&g).for_each(|(d, &v)| *d += v));
                    let c = val(*b).numel();
                    let inner: usize = val(*x).shape()[2..].iter().product();
                    acc(*b, &|db| {
                        for (j, chunk) in g.chunks(inner).enumerate() {
                            db[j % c] += chunk.iter().copied().sum::<T>();
                        }
                    });
                }
                Op::Add { a, b } => {
                    acc(*a, &|d| d.iter_mut().zip(&g).for_each(|(d, &v)| *d += v));
                    acc(*b, &|d| d.iter_mut().zip(&g).for_each(|(d, &v)| *d += v));
                }
                Op::Mul { a, b } => {
                    acc(*a, &|d| d.iter_mut().zip(&g).zip(val(*b).data()).for_each(|((d, &v), &o)| *d += v * o));
                    acc(*b, &|d| d.iter_mut().zip(&g).zip(val(*a).data()).for_each(|((d, &v), &o)| *d += v * o));
                }
                Op::Scale { x, s } => acc(*x, &|d| d.iter_mut().zip(&g).for_each(|(d, &v)| *d += v * *s)),
                Op::Sum { x } => acc(*x, &|d| d.iter_mut().for_each(|d| *d += g[0])),
                Op::Relu { x } => acc(*x, &|d| {
                    d.iter_mut().zip(&g).zip(val(*x).data()).for_each(|((d, &v), &xi)| {
                        if xi > T::zero() {
                            *d += v
                        }
                    })
                }),
                Op::Reshape { x } => acc(*x, &|d| d.iter_mut().zip(&g).for_each(|(d, &v)| *d += v)),
                Op::SelectCols { x, cols } => {
                    let c = val(*x).shape()[1];
                    let k = cols.len();
                    acc(*x, &|d| {
                        for (r, grow) in g.chunks(k).enumerate() {
                            for (&j, &v) in cols.iter().zip(grow) {
                                d[r * c + j] += v;
                            }
                        }
                    });
                }
                Op::Conv2d { x, w, geom, cols } => {
                    let mut gu = vec![T::zero(); g.len()];
                    kernels::unfold_channels(&g, geom.n, geom.f, geom.out_plane(), &mut gu);
                    acc(*w, &|dw| kernels::matmul_bt(&gu, cols, dw, geom.f, geom.cols(), geom.patch(), true));
                    acc(*x, &|dx| {
                        let mut dcols = vec![T::zero(); cols.len()];
                        kernels::matmul_at(val(*w).data(), &gu, &mut dcols, geom.patch(), geom.f, geom.cols(), false);
                        kernels::col2im(&dcols, geom, dx);
                    });
                }
                Op::MaxPool { x, argmax } => acc(*x, &|d| {
                    for (&src, &v) in argmax.iter().zip(&g) {
                        d[src as usize] += v;
                    }
                }),
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                    ..
                } => {
                    let c = inv_std.len();
                    let shape = val(*x).shape();
                    let (n, inner) = (shape[0], shape[2..].iter().product::<usize>());
                    let gd = val(*gamma).data();
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for s in 0..n {
                        for ch in 0..c {
                            let r = (s * c + ch) * inner..(s * c + ch + 1) * inner;
                            for idx in r {
                                dgamma[ch] += g[idx] * xhat[idx];
                                dbeta[ch] += g[idx];
                            }
                        }
                    }
                    acc(*gamma, &|d| d.iter_mut().zip(&dgamma).for_each(|(d, &v)| *d += v));
                    acc(*beta, &|d| d.iter_mut().zip(&dbeta).for_each(|(d, &v)| *d += v));
                    acc(*x, &|dx| {
                        let m = T::from_usize(n * inner).unwrap();
                        for s in 0..n {
                            for ch in 0..c {
                                let r = (s * c + ch) * inner..(s * c + ch + 1) * inner;
                                if *train {
                                    // dxhat = g·γ; Σdxhat = γ·Σg; Σdxhat·xhat = γ·dγ
                                    let k = gd[ch] * inv_std[ch] / m;
                                    for idx in r {
                                        dx[idx] += k * (m * g[idx] - dbeta[ch] - xhat[idx] * dgamma[ch]);
                                    }
                                } else {
                                    let k = gd[ch] * inv_std[ch];
                                    for idx in r {
                                        dx[idx] += k * g[idx];
                                    }
                                }
                            }
                        }
                    });
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let c = *node.value.shape().last().unwrap();
                    acc(*x, &|d| {
                        for ((dr, yr), gr) in d.chunks_mut(c).zip(y.chunks(c)).zip(g.chunks(c)) {
                            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                                *d += yv * (gv - dot);
                            }
                        }
                    });
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let c = val(*logits).shape()[1];
                    let k = g[0] / T::from_usize(labels.len()).unwrap();
                    acc(*logits, &|d| {
                        for (r, &l) in labels.iter().enumerate() {
                            for j in 0..c {
                                let onehot = if j == l { T::one() } else { T::zero() };
                                d[r * c + j] += k * (probs[r * c + j] - onehot);
                            }
                        }
                    });
                }
                Op::Distill {
                    student,
                    kind,
                    inv_temp,
                    p_s,
                    p_t,
                } => {
                    let c = val(*student).shape()[1];
                    let b = p_s.len() / c;
                    let k = g[0] * *inv_temp / T::from_usize(b).unwrap();
                    acc(*student, &|d| {
                        let mut dp = vec![T::zero(); c];
                        for r in 0..b {
                            let rr = r * c..(r + 1) * c;
                            divergence_grad(*kind, &p_t[rr.clone()], &p_s[rr.clone()], &mut dp);
                            let ps = &p_s[rr.clone()];
                            let dot: T = ps.iter().zip(&dp).map(|(&p, &q)| p * q).sum();
                            for ((dz, &p), &q) in d[rr].iter_mut().zip(ps).zip(&dp) {
                                *dz += k * p * (q - dot);
                            }
                        }
                    });
                }
            }
        }
        Ok(())
    }
}

fn floor<T: Scalar>(p: T) -> T {
    p.max(T::lit(PROB_FLOOR))
}

/// `Σ p·ln(p/q)` with both arguments floored.
fn kl<T: Scalar>(p: &[T], q: &[T]) -> T {
    p.iter().zip(q).map(|(&a, &b)| a * (floor(a) / floor(b)).ln()).sum()
}

/// Summed termwise so that every term is non-negative in floating point as well.
fn divergence<T: Scalar>(kind: DistillKind, p_t: &[T], p_s: &[T]) -> T {
    let half = T::lit(0.5);
    match kind {
        DistillKind::SymmetricKl => half * p_t.iter().zip(p_s).map(|(&a, &b)| (a - b) * (floor(a).ln() - floor(b).ln())).sum::<T>(),
        DistillKind::JensenShannon => {
            let term = |a: T, b: T| {
                let m = half * (a + b);
                (kl(&[a], &[m]) + kl(&[b], &[m])).max(T::zero())
            };
            half * p_t.iter().zip(p_s).map(|(&a, &b)| term(a, b)).sum::<T>()
        }
    }
}

/// Gradient of [`divergence`] with respect to the student probabilities.
fn divergence_grad<T: Scalar>(kind: DistillKind, p_t: &[T], p_s: &[T], out: &mut [T]) {
    let half = T::lit(0.5);
    for ((o, &q), &p) in out.iter_mut().zip(p_t).zip(p_s) {
        *o = match kind {
            DistillKind::SymmetricKl => half * ((floor(p) / floor(q)).ln() + T::one() - q / floor(p)),
            DistillKind::JensenShannon => half * (floor(p) / floor(half * (p + q))).ln(),
        };
    }
}
