//! Reverse-mode differentiation over a linear record of operations.
//!
//! Every method that produces a value appends one node, so the node order is
//! a topological order and `backward` is a single reverse sweep. Leaves that
//! were registered with `requires_grad` keep an accumulator that survives
//! across `backward` calls until [`Tape::zero_grad`].
//!
//! Reductions: [`Tape::mean`], [`Tape::mse`] and [`Tape::l1`] average over all
//! elements, so `mse(x, 0)` with `x = [2]` has gradient `2·x/n = [4]`.

use std::fmt::Debug;
use std::sync::Arc;

use super::ops::{self, Unary};
use super::{linalg, Tensor};
use crate::error::{dim_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A fixed linear map whose adjoint is known, recorded as one node.
pub trait LinearMap: Send + Sync + Debug {
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>>;
    fn apply(&self, x: &Tensor) -> Result<Tensor>;
    /// Applies the transpose to `g`, producing a tensor of shape `input`.
    fn apply_adjoint(&self, g: &Tensor, input: &[usize]) -> Tensor;
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    ScaleBy(usize, usize),
    AddBias(usize, usize),
    MulChannel(usize, usize),
    Unary(usize, Unary),
    Sum(usize),
    Mean(usize),
    Mse(usize, usize),
    L1(usize, usize),
    Matmul(usize, usize),
    Bmm(usize, usize),
    TransposeLast2(usize),
    SolveSpd { m: usize, b: usize, factors: Vec<f64> },
    AddScaledIdentity(usize, usize),
    Reshape(usize),
    Permute(usize, Vec<usize>),
    Concat(Vec<usize>, usize),
    Slice { src: usize, axis: usize, start: usize },
    SelectBatch { mask: Vec<bool>, a: usize, b: usize },
    Index(usize, usize),
    AvgPool2(usize),
    Upsample2(usize),
    DwConv2(usize, usize),
    RmsNorm { x: usize, gain: usize, inv_rms: Vec<f64> },
    SoftmaxLast(usize),
    Rope { x: usize, cos: Arc<Vec<f64>>, sin: Arc<Vec<f64>> },
    Linear { x: usize, map: Arc<dyn LinearMap> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    requires_grad: bool,
}

/// One recording of a differentiable computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Tensor>>,
}

/// Splits a shape into `(leading product, second-to-last, last)`.
fn split_last2(shape: &[usize]) -> Option<(usize, usize, usize)> {
    let r = shape.len();
    if r < 2 {
        return None;
    }
    Some((shape[..r - 2].iter().product(), shape[r - 2], shape[r - 1]))
}

fn outer_axis_inner(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (shape[..axis].iter().product(), shape[axis], shape[axis + 1..].iter().product())
}

/// Splits `[..., H, W, D]` into `(outer, H, W, D)`.
fn grid_dims(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    let r = shape.len();
    if r < 3 {
        return dim_err(format!("{what} needs [..., H, W, D], got {:?}", shape));
    }
    Ok((shape[..r - 3].iter().product(), shape[r - 3], shape[r - 2], shape[r - 1]))
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("{what}: shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a `requires_grad` leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.leaf_grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: requires_grad, requires_grad });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A leaf that participates in differentiation.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies the current value of `v` into a new constant; gradient flow stops here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[usize]) -> Var {
        let needs_grad = parents.iter().any(|&p| self.nodes[p].needs_grad);
        self.nodes.push(Node { value, op, needs_grad, requires_grad: false });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    // ---- elementwise ------------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).add(self.val(b))?;
        Ok(self.push(out, Op::Add(a.0, b.0), &[a.0, b.0]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).sub(self.val(b))?;
        Ok(self.push(out, Op::Sub(a.0, b.0), &[a.0, b.0]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.val(a).zip_map(self.val(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.val(a).scale(s);
        self.push(out, Op::Scale(a.0, s), &[a.0])
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.val(s).len() != 1 {
            return dim_err(format!("scale_by needs a single-element factor, got {:?}", self.shape(s)));
        }
        let f = self.val(s).item();
        let out = self.val(a).scale(f);
        Ok(self.push(out, Op::ScaleBy(a.0, s.0), &[a.0, s.0]))
    }

    /// Adds a per-channel bias `[D]` along the last axis.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let d = self.channel_check(a, bias, "add_bias")?;
        let b = self.val(bias).data().to_vec();
        let mut out = self.val(a).clone();
        out.data_mut().chunks_mut(d).for_each(|row| row.iter_mut().zip(&b).for_each(|(x, y)| *x += y));
        Ok(self.push(out, Op::AddBias(a.0, bias.0), &[a.0, bias.0]))
    }

    /// Multiplies by a per-channel factor `[D]` along the last axis.
    pub fn mul_channel(&mut self, a: Var, gain: Var) -> Result<Var> {
        let d = self.channel_check(a, gain, "mul_channel")?;
        let g = self.val(gain).data().to_vec();
        let mut out = self.val(a).clone();
        out.data_mut().chunks_mut(d).for_each(|row| row.iter_mut().zip(&g).for_each(|(x, y)| *x *= y));
        Ok(self.push(out, Op::MulChannel(a.0, gain.0), &[a.0, gain.0]))
    }

    fn channel_check(&self, a: Var, c: Var, what: &str) -> Result<usize> {
        let sa = self.shape(a);
        let sc = self.shape(c);
        match (sa.last(), sc) {
            (Some(&d), [dc]) if d == *dc => Ok(d),
            _ => dim_err(format!("{what}: channel vector {:?} does not match tensor {:?}", sc, sa)),
        }
    }

    fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let out = self.val(a).map(|x| kind.eval(x));
        self.push(out, Op::Unary(a.0, kind), &[a.0])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    /// `elu(x) + 1`, a strictly positive smooth feature map.
    pub fn elu_plus_one(&mut self, a: Var) -> Var {
        self.unary(a, Unary::EluPlusOne)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Abs)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.val(a).sum());
        self.push(out, Op::Sum(a.0), &[a.0])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.val(a).mean());
        self.push(out, Op::Mean(a.0), &[a.0])
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.val(a), self.val(b), "mse")?;
        let (x, y) = (self.val(a).data(), self.val(b).data());
        let s: f64 = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
        let out = Tensor::scalar(s / x.len() as f64);
        Ok(self.push(out, Op::Mse(a.0, b.0), &[a.0, b.0]))
    }

    /// Mean absolute difference over all elements.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape(self.val(a), self.val(b), "l1")?;
        let (x, y) = (self.val(a).data(), self.val(b).data());
        let s: f64 = x.iter().zip(y).map(|(p, q)| (p - q).abs()).sum();
        let out = Tensor::scalar(s / x.len() as f64);
        Ok(self.push(out, Op::L1(a.0, b.0), &[a.0, b.0]))
    }

    // ---- linear algebra ---------------------------------------------------

    /// `a[..., k] · b[k, n] -> [..., n]`; a rank-2 `a` is the ordinary product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return dim_err(format!("matmul shape mismatch: {:?} x {:?}", sa, sb));
        }
        let k = sb[0];
        let n = sb[1];
        let m = self.val(a).len() / k;
        let mut out = vec![0.0; m * n];
        ops::gemm_nn(self.val(a).data(), self.val(b).data(), &mut out, m, k, n);
        let mut shape = sa.clone();
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Matmul(a.0, b.0), &[a.0, b.0]))
    }

    /// Batched product over identical leading axes: `[..., m, k] · [..., k, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (Some((ba, m, k)), Some((bb, k2, n))) = (split_last2(&sa), split_last2(&sb)) else {
            return dim_err(format!("bmm needs rank >= 2 operands, got {:?} x {:?}", sa, sb));
        };
        if ba != bb || k != k2 || sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return dim_err(format!("bmm shape mismatch: {:?} x {:?}", sa, sb));
        }
        let (x, y) = (self.val(a).data(), self.val(b).data());
        let mut out = vec![0.0; ba * m * n];
        for i in 0..ba {
            ops::gemm_nn(
                &x[i * m * k..(i + 1) * m * k],
                &y[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Bmm(a.0, b.0), &[a.0, b.0]))
    }

    pub fn transpose_last2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let Some((bt, r, c)) = split_last2(&s) else {
            return dim_err(format!("transpose needs rank >= 2, got {:?}", s));
        };
        let data = ops::transpose_last2(self.val(a).data(), bt, r, c);
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 1, l - 2);
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::TransposeLast2(a.0), &[a.0]))
    }

    /// Solves `M·X = B` for symmetric positive definite `M[..., d, d]` by
    /// Cholesky factorisation of the symmetric part of `M`.
    pub fn solve_spd(&mut self, m: Var, b: Var) -> Result<Var> {
        let sm = self.shape(m).to_vec();
        let sb = self.shape(b).to_vec();
        let (Some((bm, d, d2)), Some((bb, db, n))) = (split_last2(&sm), split_last2(&sb)) else {
            return dim_err(format!("solve_spd needs rank >= 2 operands, got {:?}, {:?}", sm, sb));
        };
        if d != d2 || d != db || bm != bb || sm[..sm.len() - 2] != sb[..sb.len() - 2] {
            return dim_err(format!("solve_spd shape mismatch: {:?} vs {:?}", sm, sb));
        }
        let mv = self.val(m).data();
        let mut factors = vec![0.0; bm * d * d];
        for i in 0..bm {
            let src = &mv[i * d * d..(i + 1) * d * d];
            let dst = &mut factors[i * d * d..(i + 1) * d * d];
            for r in 0..d {
                for c in 0..d {
                    dst[r * d + c] = 0.5 * (src[r * d + c] + src[c * d + r]);
                }
            }
            linalg::cholesky_in_place(dst, d)?;
        }
        let mut x = self.val(b).data().to_vec();
        for i in 0..bm {
            linalg::cholesky_solve_in_place(
                &factors[i * d * d..(i + 1) * d * d],
                &mut x[i * d * n..(i + 1) * d * n],
                d,
                n,
            );
        }
        let t = Tensor::new(&sb, x)?;
        Ok(self.push(t, Op::SolveSpd { m: m.0, b: b.0, factors }, &[m.0, b.0]))
    }

    /// `G + s·I` for every trailing `d×d` matrix of `g`; `s` is a single-element tensor.
    pub fn add_scaled_identity(&mut self, g: Var, s: Var) -> Result<Var> {
        let sg = self.shape(g).to_vec();
        let Some((bt, d, d2)) = split_last2(&sg) else {
            return dim_err(format!("add_scaled_identity needs square matrices, got {:?}", sg));
        };
        if d != d2 || self.val(s).len() != 1 {
            return dim_err(format!("add_scaled_identity: {:?} with factor {:?}", sg, self.shape(s)));
        }
        let f = self.val(s).item();
        let mut out = self.val(g).clone();
        for i in 0..bt {
            for r in 0..d {
                out.data_mut()[i * d * d + r * d + r] += f;
            }
        }
        Ok(self.push(out, Op::AddScaledIdentity(g.0, s.0), &[g.0, s.0]))
    }

    // ---- layout -----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.val(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a.0), &[a.0]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let out = self.val(a).permute(axes)?;
        Ok(self.push(out, Op::Permute(a.0, axes.to_vec()), &[a.0]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat of an empty list");
        };
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return dim_err(format!("concat axis {axis} out of range for {:?}", s0));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != s0[i])
            {
                return dim_err(format!("concat shape mismatch: {:?} vs {:?} on axis {axis}", s0, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = outer_axis_inner(&s0, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let v = self.val(p);
                let len = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = s0.clone();
        shape[axis] = total;
        let t = Tensor::new(&shape, data)?;
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        Ok(self.push(t, Op::Concat(ids.clone(), axis), &ids))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return dim_err(format!("slice [{start}, {}) out of range on axis {axis} of {:?}", start + len, s));
        }
        let (outer, ext, inner) = outer_axis_inner(&s, axis);
        let src = self.val(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[axis] = len;
        let t = Tensor::new(&shape, data)?;
        Ok(self.push(t, Op::Slice { src: a.0, axis, start }, &[a.0]))
    }

    /// Per leading index `i`, takes `a[i]` when `mask[i]` else `b[i]`.
    pub fn select_batch(&mut self, mask: &[bool], a: Var, b: Var) -> Result<Var> {
        same_shape(self.val(a), self.val(b), "select_batch")?;
        let s = self.shape(a).to_vec();
        if s.first() != Some(&mask.len()) {
            return dim_err(format!("select_batch mask of {} for shape {:?}", mask.len(), s));
        }
        let inner = self.val(a).len() / mask.len();
        let (x, y) = (self.val(a).data(), self.val(b).data());
        let mut data = Vec::with_capacity(x.len());
        for (i, &m) in mask.iter().enumerate() {
            let src = if m { x } else { y };
            data.extend_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        let t = Tensor::new(&s, data)?;
        Ok(self.push(t, Op::SelectBatch { mask: mask.to_vec(), a: a.0, b: b.0 }, &[a.0, b.0]))
    }

    /// Element `i` of the flattened tensor as a scalar.
    pub fn index(&mut self, a: Var, i: usize) -> Result<Var> {
        let v = self.val(a);
        if i >= v.len() {
            return dim_err(format!("index {i} out of range for {:?}", v.shape()));
        }
        let t = Tensor::scalar(v.data()[i]);
        Ok(self.push(t, Op::Index(a.0, i), &[a.0]))
    }

    // ---- spatial ----------------------------------------------------------

    /// 2×2 average pooling over the `H, W` axes of `[..., H, W, D]`.
    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (outer, h, w, d) = grid_dims(&s, "avg_pool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return dim_err(format!("avg_pool2 needs even H and W, got {h}x{w}"));
        }
        let out = ops::avg_pool2(self.val(a).data(), outer, h, w, d);
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 3] = h / 2;
        shape[r - 2] = w / 2;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::AvgPool2(a.0), &[a.0]))
    }

    pub fn upsample_nearest2(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (outer, h, w, d) = grid_dims(&s, "upsample_nearest2")?;
        let out = ops::upsample2(self.val(a).data(), outer, h, w, d);
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 3] = 2 * h;
        shape[r - 2] = 2 * w;
        let t = Tensor::new(&shape, out)?;
        Ok(self.push(t, Op::Upsample2(a.0), &[a.0]))
    }

    /// Depthwise 2-D correlation, zero padded, kernel `[kh, kw, D]` with odd extents.
    pub fn depthwise_conv2(&mut self, x: Var, k: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (outer, h, w, d) = grid_dims(&s, "depthwise_conv2")?;
        let sk = self.shape(k).to_vec();
        if sk.len() != 3 || sk[2] != d {
            return dim_err(format!("depthwise kernel {:?} does not fit input {:?}", sk, s));
        }
        if sk[0] % 2 == 0 || sk[1] % 2 == 0 {
            return Err(Error::Config(format!("depthwise kernel extents must be odd, got {:?}", &sk[..2])));
        }
        let out = ops::dwconv2(self.val(x).data(), self.val(k).data(), outer, (h, w, d), (sk[0], sk[1]));
        let t = Tensor::new(&s, out)?;
        Ok(self.push(t, Op::DwConv2(x.0, k.0), &[x.0, k.0]))
    }

    // ---- composite kernels -----------------------------------------------

    /// Scale-only RMS normalisation over the last axis: `x / rms(x) · gain`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        const EPS: f64 = 1e-6;
        let d = self.channel_check(x, gain, "rms_norm")?;
        let g = self.val(gain).data().to_vec();
        let mut out = self.val(x).clone();
        let mut inv_rms = Vec::with_capacity(out.len() / d);
        for row in out.data_mut().chunks_mut(d) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let r = 1.0 / (ms + EPS).sqrt();
            inv_rms.push(r);
            row.iter_mut().zip(&g).for_each(|(v, gi)| *v *= r * gi);
        }
        Ok(self.push(out, Op::RmsNorm { x: x.0, gain: gain.0, inv_rms }, &[x.0, gain.0]))
    }

    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let Some(&d) = s.last() else {
            return dim_err("softmax of a scalar");
        };
        let mut out = self.val(a).clone();
        for row in out.data_mut().chunks_mut(d) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            row.iter_mut().for_each(|v| {
                *v = (*v - mx).exp();
                z += *v;
            });
            row.iter_mut().for_each(|v| *v /= z);
        }
        Ok(self.push(out, Op::SoftmaxLast(a.0), &[a.0]))
    }

    /// Rotates consecutive feature pairs of `x[..., N, d]` by per-token angles.
    /// `cos`/`sin` are `[N, d/2]` tables.
    pub fn rope(&mut self, x: Var, cos: Arc<Vec<f64>>, sin: Arc<Vec<f64>>) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let Some((bt, n, d)) = split_last2(&s) else {
            return dim_err(format!("rope needs [..., N, d], got {:?}", s));
        };
        if d % 2 != 0 || cos.len() != n * d / 2 || sin.len() != n * d / 2 {
            return dim_err(format!("rope tables do not match input {:?}", s));
        }
        let src = self.val(x).data();
        let mut out = vec![0.0; src.len()];
        rotate_pairs(src, &mut out, bt, n, d, &cos, &sin, 1.0);
        let t = Tensor::new(&s, out)?;
        Ok(self.push(t, Op::Rope { x: x.0, cos, sin }, &[x.0]))
    }

    /// Applies a fixed linear map with a known adjoint.
    pub fn linear_map(&mut self, x: Var, map: Arc<dyn LinearMap>) -> Result<Var> {
        let out = map.apply(self.val(x))?;
        Ok(self.push(out, Op::Linear { x: x.0, map }, &[x.0]))
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates `∂loss/∂·` to every `requires_grad` leaf, adding to any
    /// gradient already accumulated there.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.val(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![1.0])?);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            if self.nodes[i].requires_grad {
                match &mut self.leaf_grads[i] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            for (p, pg) in self.node_backward(i, &g)? {
                if !self.nodes[p].needs_grad {
                    continue;
                }
                match &mut grads[p] {
                    Some(acc) => acc.data_mut().iter_mut().zip(pg.data()).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, g: &Tensor) -> Result<Vec<(usize, Tensor)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let v = |j: usize| &self.nodes[j].value;
        let like = |j: usize, data: Vec<f64>| Tensor::new(self.nodes[j].value.shape(), data);
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.scale(-1.0))],
            Op::Mul(a, b) => vec![
                (*a, g.zip_map(v(*b), |x, y| x * y)?),
                (*b, g.zip_map(v(*a), |x, y| x * y)?),
            ],
            Op::Scale(a, s) => vec![(*a, g.scale(*s))],
            Op::ScaleBy(a, s) => {
                let f = v(*s).item();
                let ds: f64 = g.data().iter().zip(v(*a).data()).map(|(x, y)| x * y).sum();
                vec![(*a, g.scale(f)), (*s, like(*s, vec![ds])?)]
            }
            Op::AddBias(a, bias) => {
                let d = v(*bias).len();
                let mut gb = vec![0.0; d];
                g.data().chunks(d).for_each(|row| gb.iter_mut().zip(row).for_each(|(x, y)| *x += y));
                vec![(*a, g.clone()), (*bias, like(*bias, gb)?)]
            }
            Op::MulChannel(a, gain) => {
                let d = v(*gain).len();
                let gv = v(*gain).data();
                let mut ga = g.clone();
                ga.data_mut().chunks_mut(d).for_each(|row| row.iter_mut().zip(gv).for_each(|(x, y)| *x *= y));
                let mut gg = vec![0.0; d];
                for (grow, xrow) in g.data().chunks(d).zip(v(*a).data().chunks(d)) {
                    for c in 0..d {
                        gg[c] += grow[c] * xrow[c];
                    }
                }
                vec![(*a, ga), (*gain, like(*gain, gg)?)]
            }
            Op::Unary(a, kind) => {
                let x = v(*a).data();
                let data = g
                    .data()
                    .iter()
                    .zip(x)
                    .zip(out.data())
                    .map(|((gv, &xv), &yv)| gv * kind.deriv(xv, yv))
                    .collect();
                vec![(*a, like(*a, data)?)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(v(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let n = v(*a).len() as f64;
                vec![(*a, Tensor::full(v(*a).shape(), g.item() / n))]
            }
            Op::Mse(a, b) => {
                let n = v(*a).len() as f64;
                let f = 2.0 * g.item() / n;
                let ga = v(*a).zip_map(v(*b), |x, y| f * (x - y))?;
                let gb = ga.scale(-1.0);
                vec![(*a, ga), (*b, gb)]
            }
            Op::L1(a, b) => {
                let n = v(*a).len() as f64;
                let f = g.item() / n;
                let ga = v(*a).zip_map(v(*b), |x, y| f * Unary::Abs.deriv(x - y, 0.0))?;
                let gb = ga.scale(-1.0);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let m = av.len() / k;
                let mut ga = vec![0.0; m * k];
                ops::gemm_nt(g.data(), bv.data(), &mut ga, m, n, k);
                let mut gb = vec![0.0; k * n];
                ops::gemm_tn(av.data(), g.data(), &mut gb, k, m, n);
                vec![(*a, like(*a, ga)?), (*b, like(*b, gb)?)]
            }
            Op::Bmm(a, b) => {
                let (av, bv) = (v(*a), v(*b));
                let (bt, m, k) = split_last2(av.shape()).unwrap();
                let n = bv.shape()[bv.rank() - 1];
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                let gd = g.data();
                for i in 0..bt {
                    let gs = &gd[i * m * n..(i + 1) * m * n];
                    ops::gemm_nt(gs, &bv.data()[i * k * n..(i + 1) * k * n], &mut ga[i * m * k..(i + 1) * m * k], m, n, k);
                    ops::gemm_tn(&av.data()[i * m * k..(i + 1) * m * k], gs, &mut gb[i * k * n..(i + 1) * k * n], k, m, n);
                }
                vec![(*a, like(*a, ga)?), (*b, like(*b, gb)?)]
            }
            Op::TransposeLast2(a) => {
                let (bt, r, c) = split_last2(out.shape()).unwrap();
                vec![(*a, like(*a, ops::transpose_last2(g.data(), bt, r, c))?)]
            }
            Op::SolveSpd { m, b, factors } => {
                let (bt, d, n) = split_last2(out.shape()).unwrap();
                // dB = M⁻¹ dX ; dM = -sym(dB Xᵀ)
                let mut gb = g.data().to_vec();
                let mut gm = vec![0.0; bt * d * d];
                let x = out.data();
                for i in 0..bt {
                    let gbs = &mut gb[i * d * n..(i + 1) * d * n];
                    linalg::cholesky_solve_in_place(&factors[i * d * d..(i + 1) * d * d], gbs, d, n);
                    let xs = &x[i * d * n..(i + 1) * d * n];
                    let gms = &mut gm[i * d * d..(i + 1) * d * d];
                    let mut outer = vec![0.0; d * d];
                    ops::gemm_nt(gbs, xs, &mut outer, d, n, d);
                    for r in 0..d {
                        for c in 0..d {
                            gms[r * d + c] = -0.5 * (outer[r * d + c] + outer[c * d + r]);
                        }
                    }
                }
                vec![(*m, like(*m, gm)?), (*b, like(*b, gb)?)]
            }
            Op::AddScaledIdentity(gi, s) => {
                let (bt, d, _) = split_last2(out.shape()).unwrap();
                let mut tr = 0.0;
                for i in 0..bt {
                    for r in 0..d {
                        tr += g.data()[i * d * d + r * d + r];
                    }
                }
                vec![(*gi, g.clone()), (*s, like(*s, vec![tr])?)]
            }
            Op::Reshape(a) => vec![(*a, g.reshape(v(*a).shape())?)],
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                vec![(*a, g.permute(&inv)?)]
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = outer_axis_inner(out.shape(), *axis);
                let mut res = Vec::with_capacity(parts.len());
                let mut offset = 0;
                for &p in parts {
                    let ext = v(p).shape()[*axis];
                    let mut data = Vec::with_capacity(v(p).len());
                    for o in 0..outer {
                        let base = (o * total + offset) * inner;
                        data.extend_from_slice(&g.data()[base..base + ext * inner]);
                    }
                    offset += ext;
                    res.push((p, like(p, data)?));
                }
                res
            }
            Op::Slice { src, axis, start } => {
                let (outer, ext, inner) = outer_axis_inner(v(*src).shape(), *axis);
                let len = out.shape()[*axis];
                let mut data = vec![0.0; v(*src).len()];
                for o in 0..outer {
                    let base = (o * ext + start) * inner;
                    data[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*src, like(*src, data)?)]
            }
            Op::SelectBatch { mask, a, b } => {
                let inner = g.len() / mask.len();
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; g.len()];
                for (i, &m) in mask.iter().enumerate() {
                    let dst = if m { &mut ga } else { &mut gb };
                    dst[i * inner..(i + 1) * inner].copy_from_slice(&g.data()[i * inner..(i + 1) * inner]);
                }
                vec![(*a, like(*a, ga)?), (*b, like(*b, gb)?)]
            }
            Op::Index(a, idx) => {
                let mut data = vec![0.0; v(*a).len()];
                data[*idx] = g.item();
                vec![(*a, like(*a, data)?)]
            }
            Op::AvgPool2(a) => {
                let (outer, h, w, d) = grid_dims(out.shape(), "avg_pool2")?;
                let mut data = ops::upsample2(g.data(), outer, h, w, d);
                data.iter_mut().for_each(|x| *x *= 0.25);
                vec![(*a, like(*a, data)?)]
            }
            Op::Upsample2(a) => {
                let (outer, h, w, d) = grid_dims(v(*a).shape(), "upsample2")?;
                vec![(*a, like(*a, ops::block_sum2(g.data(), outer, h, w, d))?)]
            }
            Op::DwConv2(x, k) => {
                let (outer, h, w, d) = grid_dims(out.shape(), "depthwise_conv2")?;
                let ks = v(*k).shape();
                let (gx, gk) = ops::dwconv2_backward(
                    v(*x).data(),
                    v(*k).data(),
                    g.data(),
                    outer,
                    (h, w, d),
                    (ks[0], ks[1]),
                );
                vec![(*x, like(*x, gx)?), (*k, like(*k, gk)?)]
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let d = v(*gain).len();
                let gv = v(*gain).data();
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; d];
                for (row, ((grow, xrow), &r)) in
                    g.data().chunks(d).zip(v(*x).data().chunks(d)).zip(inv_rms).enumerate()
                {
                    // y = x r gain,  r = (mean(x²)+eps)^-1/2
                    let mut dot = 0.0;
                    for c in 0..d {
                        gg[c] += grow[c] * xrow[c] * r;
                        dot += grow[c] * gv[c] * xrow[c];
                    }
                    let coef = r * r * r * dot / d as f64;
                    for c in 0..d {
                        gx[row * d + c] = grow[c] * gv[c] * r - coef * xrow[c];
                    }
                }
                vec![(*x, like(*x, gx)?), (*gain, like(*gain, gg)?)]
            }
            Op::SoftmaxLast(a) => {
                let d = *out.shape().last().unwrap();
                let mut data = vec![0.0; g.len()];
                for ((dst, grow), yrow) in data.chunks_mut(d).zip(g.data().chunks(d)).zip(out.data().chunks(d)) {
                    let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                    for c in 0..d {
                        dst[c] = yrow[c] * (grow[c] - dot);
                    }
                }
                vec![(*a, like(*a, data)?)]
            }
            Op::Rope { x, cos, sin } => {
                let (bt, n, d) = split_last2(out.shape()).unwrap();
                let mut data = vec![0.0; g.len()];
                rotate_pairs(g.data(), &mut data, bt, n, d, cos, sin, -1.0);
                vec![(*x, like(*x, data)?)]
            }
            Op::Linear { x, map } => vec![(*x, map.apply_adjoint(g, v(*x).shape()))],
        })
    }
}

#[allow(clippy::too_many_arguments)]
fn rotate_pairs(
    src: &[f64],
    dst: &mut [f64],
    bt: usize,
    n: usize,
    d: usize,
    cos: &[f64],
    sin: &[f64],
    sign: f64,
) {
    let half = d / 2;
    for b in 0..bt {
        for t in 0..n {
            let base = (b * n + t) * d;
            for p in 0..half {
                let (c, s) = (cos[t * half + p], sign * sin[t * half + p]);
                let (x0, x1) = (src[base + 2 * p], src[base + 2 * p + 1]);
                dst[base + 2 * p] = x0 * c - x1 * s;
                dst[base + 2 * p + 1] = x0 * s + x1 * c;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[3], vec![1., -2., 5.]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1., 1., 1.]);
    }

    #[test]
    fn mse_gradient_uses_mean_reduction() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[1], vec![2.0]).unwrap());
        let z = tape.constant(Tensor::zeros(&[1]));
        let l = tape.mse(x, z).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(&[2], vec![1., 2.]).unwrap());
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2., 2.]);
        tape.zero_grad();
        assert!(tape.grad(x).is_none());
    }

    #[test]
    fn non_scalar_loss_is_usage_error() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 2]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn solve_scalar_matrix() {
        let mut tape = Tape::new();
        let b = Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap();
        let two_i = tape.constant(Tensor::eye(2).scale(2.0));
        let bv = tape.constant(b.clone());
        let x = tape.solve_spd(two_i, bv).unwrap();
        // factor is √2·I, so allow one rounding per division
        assert!(tape.value(x).max_abs_diff(&b.scale(0.5)) < 1e-15);
        let eye = tape.constant(Tensor::eye(2));
        let x = tape.solve_spd(eye, bv).unwrap();
        assert_eq!(tape.value(x), &b);
    }

    #[test]
    fn even_kernel_is_config_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[4, 4, 1]));
        let k = tape.constant(Tensor::zeros(&[2, 3, 1]));
        assert!(matches!(tape.depthwise_conv2(x, k), Err(Error::Config(_))));
    }

    #[test]
    fn pool_rejects_odd_extent() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[3, 4, 1]));
        assert!(matches!(tape.avg_pool2(x), Err(Error::Dimension(_))));
    }

    #[test]
    fn pool_inverts_upsample() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3, 3, 2], |i| (i as f64).sin()));
        let u = tape.upsample_nearest2(x).unwrap();
        let p = tape.avg_pool2(u).unwrap();
        assert_eq!(tape.value(p), tape.value(x));
    }
}
