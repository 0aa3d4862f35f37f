//! Token mixer: kernelized linear attention with an optional ridge-corrected
//! state, axial RoPE, convolutional positional terms and output gating.
//!
//! Tokens are `[B, N, D]` with `N = h·w` laid out row-major over the grid.
//! Attention works on row vectors, so the state is kept transposed:
//! `Cᵀ = Σ φ(k_j) v_jᵀ` (`d_k×d_v`) and outputs are `φ(Q)·Sᵀ`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Linear,
    Softmax,
}

/// Positive feature map applied to queries and keys.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMap {
    EluPlusOne,
    Softplus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixerConfig {
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub attention: AttentionKind,
    pub feature_map: FeatureMap,
    pub ridge: bool,
    pub gate: bool,
    pub lepe: bool,
    pub cpe: bool,
    pub rope: bool,
    pub mila_block: bool,
}

impl Default for MixerConfig {
    fn default() -> Self {
        MixerConfig {
            dim: 32,
            heads: 1,
            mlp_ratio: 4,
            attention: AttentionKind::Linear,
            feature_map: FeatureMap::EluPlusOne,
            ridge: true,
            gate: true,
            lepe: true,
            cpe: true,
            rope: true,
            mila_block: true,
        }
    }
}

/// Rows of the mixer ablation table.
pub const ABLATION_ROWS: [&str; 9] = ["A1", "A2", "A3", "A4", "A5", "B1", "B2", "B3", "C1"];

impl MixerConfig {
    /// Flags of a named ablation row. RoPE stays on in every row.
    pub fn ablation(row: &str, dim: usize) -> Result<MixerConfig> {
        // (ridge, gate, lepe, cpe, mila)
        let flags = match row {
            "A1" => (false, false, false, false, false),
            "A2" => (true, false, false, false, false),
            "A3" => (true, true, false, false, false),
            "A4" => (true, true, true, false, false),
            "A5" => (true, true, true, true, false),
            "B1" => (false, false, true, false, true),
            "B2" => (true, false, true, false, true),
            "B3" => (true, false, true, true, true),
            "C1" => (true, true, true, true, true),
            _ => {
                return Err(Error::Config(format!(
                    "unknown ablation row '{row}', expected one of {}",
                    ABLATION_ROWS.join(", ")
                )))
            }
        };
        Ok(MixerConfig {
            dim,
            ridge: flags.0,
            gate: flags.1,
            lepe: flags.2,
            cpe: flags.3,
            mila_block: flags.4,
            ..MixerConfig::default()
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.mlp_ratio == 0 {
            return Err(Error::Config("mixer dim, heads and mlp_ratio must be positive".into()));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!("dim {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.rope && self.head_dim() % 4 != 0 {
            return Err(Error::Config(format!(
                "axial RoPE needs a head dimension divisible by 4, got {}",
                self.head_dim()
            )));
        }
        Ok(())
    }
}

// ---- functional attention on plain tensors --------------------------------

/// `φ(x)`, strictly positive, elementwise.
pub fn feature_map(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v + 1.0 } else { v.exp() })
}

fn apply_feature_map(tape: &mut Tape, x: Var, kind: FeatureMap) -> Var {
    match kind {
        FeatureMap::EluPlusOne => tape.elu_plus_one(x),
        FeatureMap::Softplus => tape.softplus(x),
    }
}

/// `cos`/`sin` tables `[h·w, d/2]` for axial rotary embeddings.
///
/// Pairs `0..d/4` rotate with the row index, the rest with the column index.
/// Within each half, frequencies are geometric from `2π/extent` (one period
/// over the grid) up to `π`.
pub fn rope_tables(grid: (usize, usize), d: usize) -> Result<(Arc<Vec<f64>>, Arc<Vec<f64>>)> {
    if d % 4 != 0 {
        return Err(Error::Config(format!("axial RoPE needs a dimension divisible by 4, got {d}")));
    }
    let (h, w) = grid;
    let quarter = d / 4;
    let freqs = |extent: usize| -> Vec<f64> {
        let lo = 2.0 * std::f64::consts::PI / extent.max(1) as f64;
        let hi = std::f64::consts::PI;
        (0..quarter)
            .map(|p| if quarter == 1 { lo } else { lo * (hi / lo).powf(p as f64 / (quarter - 1) as f64) })
            .collect()
    };
    let (fr, fc) = (freqs(h), freqs(w));
    let half = d / 2;
    let mut cos = vec![0.0; h * w * half];
    let mut sin = vec![0.0; h * w * half];
    for i in 0..h {
        for j in 0..w {
            let t = i * w + j;
            for p in 0..half {
                let angle = if p < quarter { i as f64 * fr[p] } else { j as f64 * fc[p - quarter] };
                cos[t * half + p] = angle.cos();
                sin[t * half + p] = angle.sin();
            }
        }
    }
    Ok((Arc::new(cos), Arc::new(sin)))
}

/// Rotates `x[..., N, d]` with `N = h·w`.
pub fn apply_rope(x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let s = x.shape();
    if s.len() < 2 || s[s.len() - 2] != grid.0 * grid.1 {
        return dim_err(format!("RoPE input {:?} does not hold {}x{} tokens", s, grid.0, grid.1));
    }
    let (cos, sin) = rope_tables(grid, s[s.len() - 1])?;
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let out = tape.rope(v, cos, sin)?;
    Ok(tape.value(out).clone())
}

/// Accumulated key statistics. `c` is `d_v×d_k`, `g` is `d_k×d_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionState {
    pub c: Tensor,
    pub g: Tensor,
}

impl AttentionState {
    /// From already feature-mapped keys `[N, d_k]` and values `[N, d_v]`.
    pub fn from_features(kf: &Tensor, v: &Tensor) -> Result<AttentionState> {
        check_tokens(kf, v)?;
        let c = v.transpose2()?.matmul(kf)?;
        let g = kf.transpose2()?.matmul(kf)?;
        Ok(AttentionState { c, g })
    }

    pub fn from_keys(k: &Tensor, v: &Tensor) -> Result<AttentionState> {
        Self::from_features(&feature_map(k), v)
    }

    /// `S_λ = C(G + λI)⁻¹`.
    pub fn ridge(&self, lambda: f64) -> Result<Tensor> {
        if !(lambda > 0.0) {
            return Err(Error::Config(format!("ridge λ must be positive, got {lambda}")));
        }
        let d = self.g.shape()[0];
        let mut m = self.g.clone();
        for i in 0..d {
            m.data_mut()[i * d + i] += lambda;
        }
        // (G+λI) Sᵀ = Cᵀ
        let mut tape = Tape::new();
        let mv = tape.constant(m);
        let ct = tape.constant(self.c.transpose2()?);
        let st = tape.solve_spd(mv, ct)?;
        tape.value(st).transpose2()
    }
}

fn check_tokens(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[0] != b.shape()[0] {
        return dim_err(format!("token count mismatch: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// `o_i = C·φ(q_i)` for `q, k: [N, d_k]`, `v: [N, d_v]`.
pub fn linear_attention_vanilla(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_tokens(q, k)?;
    check_tokens(k, v)?;
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let qf = tape.elu_plus_one(qv);
    let kf = tape.elu_plus_one(kv);
    let out = state_attention(&mut tape, qf, kf, vv, None)?;
    Ok(tape.value(out).clone())
}

/// `o_i = S_λ·φ(q_i)` with `S_λ = C(G + λI)⁻¹`.
pub fn linear_attention_ridge(q: &Tensor, k: &Tensor, v: &Tensor, lambda: f64) -> Result<Tensor> {
    check_tokens(q, k)?;
    check_tokens(k, v)?;
    if !(lambda > 0.0) {
        return Err(Error::Config(format!("ridge λ must be positive, got {lambda}")));
    }
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let lam = tape.constant(Tensor::scalar(lambda));
    let qf = tape.elu_plus_one(qv);
    let kf = tape.elu_plus_one(kv);
    let out = state_attention(&mut tape, qf, kf, vv, Some(lam))?;
    Ok(tape.value(out).clone())
}

/// `Σ_j ‖v_j − S·φ(k_j)‖² + λ‖S‖²_F` for `S: [d_v, d_k]`.
pub fn ridge_objective(s: &Tensor, k: &Tensor, v: &Tensor, lambda: f64) -> Result<f64> {
    let (val, _) = ridge_objective_with_grad(s, k, v, lambda)?;
    Ok(val)
}

/// Objective value and `∂/∂S`, differentiated on a tape.
pub fn ridge_objective_with_grad(s: &Tensor, k: &Tensor, v: &Tensor, lambda: f64) -> Result<(f64, Tensor)> {
    check_tokens(k, v)?;
    let mut tape = Tape::new();
    let sv = tape.param(s.clone());
    let kv = tape.constant(k.clone());
    let vv = tape.constant(v.clone());
    let kf = tape.elu_plus_one(kv);
    let st = tape.transpose_last2(sv)?;
    let pred = tape.matmul(kf, st)?;
    let r = tape.sub(vv, pred)?;
    let r2 = tape.square(r);
    let fit = tape.sum(r2);
    let s2 = tape.square(sv);
    let reg = tape.sum(s2);
    let reg = tape.scale(reg, lambda);
    let total = tape.add(fit, reg)?;
    tape.backward(total)?;
    let g = tape.grad(sv).cloned().unwrap_or_else(|| Tensor::zeros(s.shape()));
    Ok((tape.value(total).item(), g))
}

/// `softmax(QKᵀ/√d)·V` for `[N, d]` inputs.
pub fn softmax_attention_reference(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_tokens(q, k)?;
    check_tokens(k, v)?;
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = softmax_attention(&mut tape, qv, kv, vv)?;
    Ok(tape.value(out).clone())
}

// ---- tape kernels ---------------------------------------------------------

/// `φ(Q)·Sᵀ` on `[..., N, d]` operands. With `lambda`, `Sᵀ = (G+λI)⁻¹ Cᵀ`,
/// otherwise `Sᵀ = Cᵀ`.
pub(crate) fn state_attention(tape: &mut Tape, qf: Var, kf: Var, v: Var, lambda: Option<Var>) -> Result<Var> {
    let kt = tape.transpose_last2(kf)?;
    let ct = tape.bmm(kt, v)?;
    let st = match lambda {
        Some(lam) => {
            let g = tape.bmm(kt, kf)?;
            let m = tape.add_scaled_identity(g, lam)?;
            tape.solve_spd(m, ct)?
        }
        None => ct,
    };
    tape.bmm(qf, st)
}

pub(crate) fn softmax_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<Var> {
    let d = *tape.shape(q).last().unwrap_or(&1);
    let kt = tape.transpose_last2(k)?;
    let scores = tape.bmm(q, kt)?;
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let a = tape.softmax_last(scores)?;
    tape.bmm(a, v)
}

// ---- parameters and the full block ---------------------------------------

/// Handles of one mixer block's parameters inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct MixerParams {
    pub cfg: MixerConfig,
    pub norm1: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub gate_proj: Option<ParamId>,
    pub lepe: Option<ParamId>,
    pub cpe: Option<(ParamId, ParamId)>,
    pub ridge_raw: Option<ParamId>,
    pub mila_in: Option<(ParamId, ParamId)>,
    pub norm2: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

/// `softplus⁻¹(1)`, so the initial ridge weight is exactly 1.
pub const RIDGE_RAW_INIT: f64 = 0.541_324_854_612_918_1;

fn dense<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    Tensor::randn(&[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt(), rng)
}

impl MixerParams {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, cfg: &MixerConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let hidden = d * cfg.mlp_ratio;
        let name = |s: &str| format!("{prefix}.{s}");
        let norm1 = store.add(name("norm1"), Tensor::ones(&[d]));
        let mila_in = cfg.mila_block.then(|| {
            let w = store.add(name("mila.in"), dense(rng, d, d));
            let mut k = Tensor::zeros(&[3, 3, d]);
            k.data_mut()[4 * d..5 * d].iter_mut().for_each(|v| *v = 1.0);
            (w, store.add(name("mila.conv"), k))
        });
        let w_q = store.add(name("attn.q"), dense(rng, d, d));
        let w_k = store.add(name("attn.k"), dense(rng, d, d));
        let w_v = store.add(name("attn.v"), dense(rng, d, d));
        let gate_proj = cfg.gate.then(|| store.add(name("attn.gate"), dense(rng, d, d)));
        let ridge_raw = (cfg.ridge && cfg.attention == AttentionKind::Linear)
            .then(|| store.add(name("attn.ridge_raw"), Tensor::full(&[1], RIDGE_RAW_INIT)));
        let lepe = cfg.lepe.then(|| store.add(name("attn.lepe"), Tensor::zeros(&[3, 3, d])));
        let w_o = store.add(name("attn.o"), Tensor::zeros(&[d, d]));
        let cpe = cfg.cpe.then(|| {
            (store.add(name("cpe1"), Tensor::zeros(&[3, 3, d])), store.add(name("cpe2"), Tensor::zeros(&[3, 3, d])))
        });
        let norm2 = store.add(name("norm2"), Tensor::ones(&[d]));
        let mlp_w1 = store.add(name("mlp.w1"), dense(rng, d, hidden));
        let mlp_b1 = store.add(name("mlp.b1"), Tensor::zeros(&[hidden]));
        let mlp_w2 = store.add(name("mlp.w2"), Tensor::zeros(&[hidden, d]));
        let mlp_b2 = store.add(name("mlp.b2"), Tensor::zeros(&[d]));
        Ok(MixerParams {
            cfg: cfg.clone(),
            norm1,
            w_q,
            w_k,
            w_v,
            w_o,
            gate_proj,
            lepe,
            cpe,
            ridge_raw,
            mila_in,
            norm2,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
        })
    }
}

fn split_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    if heads == 1 {
        return Ok(x);
    }
    let s = tape.shape(x).to_vec();
    let (b, n, d) = (s[0], s[1], s[2]);
    let r = tape.reshape(x, &[b, n, heads, d / heads])?;
    tape.permute(r, &[0, 2, 1, 3])
}

fn merge_heads(tape: &mut Tape, x: Var, heads: usize) -> Result<Var> {
    if heads == 1 {
        return Ok(x);
    }
    let s = tape.shape(x).to_vec();
    let (b, n, dh) = (s[0], s[2], s[3]);
    let p = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(p, &[b, n, heads * dh])
}

/// Depthwise 3×3 on `[B, N, D]` tokens viewed as a `(h, w)` grid.
fn grid_conv(tape: &mut Tape, x: Var, k: Var, grid: (usize, usize)) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let g = tape.reshape(x, &[s[0], grid.0, grid.1, s[2]])?;
    let c = tape.depthwise_conv2(g, k)?;
    tape.reshape(c, &s)
}

/// One full mixer block on `x: [B, N, D]` with `N = h·w`.
pub fn mixer_block(tape: &mut Tape, bound: &Bound, p: &MixerParams, x: Var, grid: (usize, usize)) -> Result<Var> {
    let cfg = &p.cfg;
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[2] != cfg.dim {
        return dim_err(format!("mixer expects [B, N, {}], got {:?}", cfg.dim, s));
    }
    let n = s[1];
    if n != grid.0 * grid.1 {
        return dim_err(format!("mixer got {n} tokens for a {}x{} grid", grid.0, grid.1));
    }

    let mut x = x;
    if let Some((c1, _)) = p.cpe {
        let pe = grid_conv(tape, x, bound[c1], grid)?;
        x = tape.add(x, pe)?;
    }

    // attention sub-block
    let mut xn = tape.rms_norm(x, bound[p.norm1])?;
    if let Some((w_in, conv)) = p.mila_in {
        let h = tape.matmul(xn, bound[w_in])?;
        let h = grid_conv(tape, h, bound[conv], grid)?;
        xn = tape.silu(h);
    }
    let q = tape.matmul(xn, bound[p.w_q])?;
    let k = tape.matmul(xn, bound[p.w_k])?;
    let v = tape.matmul(xn, bound[p.w_v])?;
    let (qh, kh, vh) = (split_heads(tape, q, cfg.heads)?, split_heads(tape, k, cfg.heads)?, split_heads(tape, v, cfg.heads)?);
    let tables = if cfg.rope { Some(rope_tables(grid, cfg.head_dim())?) } else { None };
    let rot = |tape: &mut Tape, t: Var| -> Result<Var> {
        match &tables {
            Some((c, s)) => tape.rope(t, c.clone(), s.clone()),
            None => Ok(t),
        }
    };
    let att = match cfg.attention {
        AttentionKind::Linear => {
            let qf = apply_feature_map(tape, qh, cfg.feature_map);
            let kf = apply_feature_map(tape, kh, cfg.feature_map);
            let qf = rot(tape, qf)?;
            let kf = rot(tape, kf)?;
            match p.ridge_raw {
                Some(raw) => {
                    let lam = tape.softplus(bound[raw]);
                    state_attention(tape, qf, kf, vh, Some(lam))?
                }
                None => {
                    // λ⁻¹ ≈ 1/N keeps the state scale independent of grid size
                    let a = state_attention(tape, qf, kf, vh, None)?;
                    tape.scale(a, 1.0 / n as f64)
                }
            }
        }
        AttentionKind::Softmax => {
            let qr = rot(tape, qh)?;
            let kr = rot(tape, kh)?;
            softmax_attention(tape, qr, kr, vh)?
        }
    };
    let mut att = merge_heads(tape, att, cfg.heads)?;
    if let Some(lk) = p.lepe {
        let le = grid_conv(tape, v, bound[lk], grid)?;
        att = tape.add(att, le)?;
    }
    if let Some(gw) = p.gate_proj {
        let gl = tape.matmul(xn, bound[gw])?;
        let g = tape.sigmoid(gl);
        att = tape.mul(att, g)?;
    }
    let o = tape.matmul(att, bound[p.w_o])?;
    x = tape.add(x, o)?;

    if let Some((_, c2)) = p.cpe {
        let pe = grid_conv(tape, x, bound[c2], grid)?;
        x = tape.add(x, pe)?;
    }

    // MLP sub-block
    let xn = tape.rms_norm(x, bound[p.norm2])?;
    let h = tape.matmul(xn, bound[p.mlp_w1])?;
    let h = tape.add_bias(h, bound[p.mlp_b1])?;
    let h = tape.gelu(h);
    let h = tape.matmul(h, bound[p.mlp_w2])?;
    let h = tape.add_bias(h, bound[p.mlp_b2])?;
    tape.add(x, h)
}
