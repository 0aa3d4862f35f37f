//! Full surrogate: DWT tokens → linear embedding → pyramid blocks → linear
//! head → inverse DWT. Also the multi-dataset variant with a shared trunk,
//! a per-channel lifting matrix, task embeddings and per-dataset heads.
//!
//! Token features at each spatial location are flattened time-major:
//! index `t·(C·4^ℓ) + c·4^ℓ + band`, i.e. the DWT channel vector of each
//! history frame concatenated in time order. This order is frozen; the
//! checkpoint stores the embedding rows in it.
//!
//! Parameter count of a bespoke model with `D`, depth `N_L`, pyramid depth `L`,
//! MLP ratio 4 and all mixer options on:
//! `T·C·4^ℓ·D + N_L·(14D² + 43D + L + 2) + (D + 1)·C_out·4^ℓ`,
//! where each block counts q/k/v/o/gate/MILA-in (6D²), the MLP (8D² + 5D),
//! two norms (2D), four 3×3 depthwise kernels (36D), the ridge scalar and the
//! `L + 1` level weights.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::mixer::MixerConfig;
use crate::pyramid::{pyramid_forward, PyramidParams};
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};
use crate::wavelet::{dwt2_var, idwt2_var, WaveletFilterBank, WaveletName};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaveLiTConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub fpn_levels: usize,
    pub wavelet: WaveletName,
    pub dwt_levels: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub history: usize,
    pub grid: [usize; 2],
    /// Predict `u_{t+1} − u_t` and add the last input frame back. Experimental.
    pub predict_delta: bool,
    /// Mixer options; `mixer.dim` is replaced by `embed_dim`.
    pub mixer: MixerConfig,
}

impl Default for WaveLiTConfig {
    fn default() -> Self {
        WaveLiTConfig::preset("wavelit-tiny").expect("built-in preset")
    }
}

pub const PRESETS: [&str; 2] = ["wavelit-tiny", "wavelit-small-proxy"];

impl WaveLiTConfig {
    /// Named desk-scale configurations. `wavelit-small-proxy` has its width
    /// solved from the count formula to land near 1.2M parameters.
    pub fn preset(name: &str) -> Result<WaveLiTConfig> {
        let base = WaveLiTConfig {
            embed_dim: 32,
            depth: 2,
            fpn_levels: 1,
            wavelet: WaveletName::Bior22,
            dwt_levels: 1,
            in_channels: 1,
            out_channels: 1,
            history: 1,
            grid: [32, 32],
            predict_delta: false,
            mixer: MixerConfig::default(),
        };
        match name {
            "wavelit-tiny" => Ok(base),
            "wavelit-small-proxy" => Ok(WaveLiTConfig { embed_dim: 144, depth: 4, grid: [64, 64], ..base }),
            _ => Err(Error::Config(format!("unknown model preset '{name}', expected one of {}", PRESETS.join(", ")))),
        }
    }

    pub fn mixer_config(&self) -> MixerConfig {
        MixerConfig { dim: self.embed_dim, ..self.mixer.clone() }
    }

    pub fn bands(&self) -> usize {
        4usize.pow(self.dwt_levels as u32)
    }

    pub fn token_grid(&self) -> (usize, usize) {
        (self.grid[0] >> self.dwt_levels, self.grid[1] >> self.dwt_levels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.depth == 0 {
            return Err(Error::Config("embed_dim and depth must be at least 1".into()));
        }
        if self.dwt_levels == 0 || self.history == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("dwt_levels, history and channel counts must be at least 1".into()));
        }
        let f = 1usize << (self.dwt_levels + self.fpn_levels);
        for (axis, &e) in ["H", "W"].iter().zip(&self.grid) {
            if e == 0 || e % f != 0 {
                return Err(Error::Config(format!(
                    "grid axis {axis} = {e} must be divisible by 2^(dwt_levels + fpn_levels) = {f}"
                )));
            }
        }
        if self.predict_delta && self.in_channels != self.out_channels {
            return Err(Error::Config("predict_delta needs in_channels == out_channels".into()));
        }
        self.mixer_config().validate()
    }

    /// Closed-form parameter count (see module docs).
    pub fn param_count_formula(&self) -> usize {
        let d = self.embed_dim;
        let m = self.mixer_config();
        let hidden = d * m.mlp_ratio;
        let mut block = 4 * d * d + hidden * d * 2 + hidden + d + 2 * d;
        if m.gate {
            block += d * d;
        }
        if m.mila_block {
            block += d * d + 9 * d;
        }
        if m.lepe {
            block += 9 * d;
        }
        if m.cpe {
            block += 18 * d;
        }
        if m.ridge && m.attention == crate::mixer::AttentionKind::Linear {
            block += 1;
        }
        block += self.fpn_levels + 1;
        let nb = self.bands();
        self.history * self.in_channels * nb * d + self.depth * block + d * self.out_channels * nb + self.out_channels * nb
    }
}

/// Total learnable scalars.
pub fn param_count(store: &ParamStore) -> usize {
    store.scalar_count()
}

/// Anything that maps a history `[B, T, H, W, C]` to a next frame `[B, 1, H, W, C_out]`.
pub trait Surrogate {
    fn config(&self) -> &WaveLiTConfig;
    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, dataset: usize) -> Result<Var>;
    fn datasets(&self) -> usize {
        1
    }
}

/// Shared trunk pieces used by both variants.
#[derive(Clone, Debug)]
struct Trunk {
    cfg: WaveLiTConfig,
    bank: WaveletFilterBank,
    blocks: Vec<PyramidParams>,
}

impl Trunk {
    fn init<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &WaveLiTConfig, rng: &mut R) -> Result<Trunk> {
        let mc = cfg.mixer_config();
        let blocks = (0..cfg.depth)
            .map(|i| PyramidParams::init(store, &format!("block{i}"), &mc, cfg.fpn_levels, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trunk { cfg: cfg.clone(), bank: cfg.wavelet.bank(), blocks })
    }

    /// `[B, T, H, W, C] -> [B, N, T·C·4^ℓ]`.
    fn tokens(&self, tape: &mut Tape, x: Var, channels: usize) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let want = [self.cfg.history, self.cfg.grid[0], self.cfg.grid[1], channels];
        if s.len() != 5 || s[1..] != want {
            return dim_err(format!("model input {:?} does not match [B, {}, {}, {}, {}]", s, want[0], want[1], want[2], want[3]));
        }
        let y = dwt2_var(tape, x, &self.bank, self.cfg.dwt_levels)?;
        let y = tape.permute(y, &[0, 2, 3, 1, 4])?;
        let (h, w) = self.cfg.token_grid();
        tape.reshape(y, &[s[0], h * w, s[1] * channels * self.cfg.bands()])
    }

    fn mix(&self, tape: &mut Tape, bound: &Bound, z: Var) -> Result<Var> {
        let grid = self.cfg.token_grid();
        let mut z = z;
        for b in &self.blocks {
            z = pyramid_forward(tape, bound, b, z, grid)?;
        }
        Ok(z)
    }

    /// `[B, N, C_out·4^ℓ]` coefficients → `[B, 1, H, W, C_out]` field.
    fn reconstruct(&self, tape: &mut Tape, coeffs: Var, x: Var, c_out: usize) -> Result<Var> {
        let b = tape.shape(coeffs)[0];
        let (h, w) = self.cfg.token_grid();
        let y = tape.reshape(coeffs, &[b, h, w, c_out * self.cfg.bands()])?;
        let f = idwt2_var(tape, y, &self.bank, self.cfg.dwt_levels)?;
        let f = tape.reshape(f, &[b, 1, self.cfg.grid[0], self.cfg.grid[1], c_out])?;
        if self.cfg.predict_delta {
            let last = tape.slice(x, 1, self.cfg.history - 1, 1)?;
            return tape.add(f, last);
        }
        Ok(f)
    }
}

fn head<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, d: usize, out: usize, _rng: &mut R) -> (ParamId, ParamId) {
    (store.add(format!("{prefix}.w"), Tensor::zeros(&[d, out])), store.add(format!("{prefix}.b"), Tensor::zeros(&[out])))
}

fn apply_head(tape: &mut Tape, bound: &Bound, (w, b): (ParamId, ParamId), z: Var) -> Result<Var> {
    let y = tape.matmul(z, bound[w])?;
    tape.add_bias(y, bound[b])
}

/// Single-dataset model.
#[derive(Clone, Debug)]
pub struct WaveLiT {
    trunk: Trunk,
    pub embed: ParamId,
    pub head: (ParamId, ParamId),
}

impl WaveLiT {
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &WaveLiTConfig, rng: &mut R) -> Result<WaveLiT> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let fan_in = cfg.history * cfg.in_channels * cfg.bands();
        let embed = store.add("embed", Tensor::randn(&[fan_in, d], 1.0 / (fan_in as f64).sqrt(), rng));
        let trunk = Trunk::init(store, cfg, rng)?;
        let head = head(store, "head", d, cfg.out_channels * cfg.bands(), rng);
        Ok(WaveLiT { trunk, embed, head })
    }

    pub fn blocks(&self) -> &[PyramidParams] {
        &self.trunk.blocks
    }

    /// Trunk input tokens `[B, N, D]` (embedding without task conditioning).
    pub fn embed(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let t = self.trunk.tokens(tape, x, self.trunk.cfg.in_channels)?;
        tape.matmul(t, bound[self.embed])
    }

    /// Tape-free prediction with the given parameters.
    pub fn predict(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = tape.bind_frozen(store);
        let xv = tape.constant(x.clone());
        let y = self.forward(&mut tape, &b, xv, 0)?;
        Ok(tape.value(y).clone())
    }
}

impl Surrogate for WaveLiT {
    fn config(&self) -> &WaveLiTConfig {
        &self.trunk.cfg
    }

    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, _dataset: usize) -> Result<Var> {
        let z = self.embed(tape, bound, x)?;
        let z = self.trunk.mix(tape, bound, z)?;
        let c = apply_head(tape, bound, self.head, z)?;
        self.trunk.reconstruct(tape, c, x, self.trunk.cfg.out_channels)
    }
}

/// One dataset of the multi-dataset model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FMDataset {
    pub name: String,
    /// Canonical index of each native channel.
    pub channels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FMConfig {
    pub canonical_channels: usize,
    pub datasets: Vec<FMDataset>,
}

impl FMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Config("multi-dataset model needs at least one dataset".into()));
        }
        for ds in &self.datasets {
            if ds.channels.is_empty() {
                return Err(Error::Config(format!("dataset '{}' has no channels", ds.name)));
            }
            for (i, &c) in ds.channels.iter().enumerate() {
                if c >= self.canonical_channels {
                    return Err(Error::Config(format!(
                        "dataset '{}' maps to canonical channel {c}, only {} exist",
                        ds.name, self.canonical_channels
                    )));
                }
                if ds.channels[..i].contains(&c) {
                    return Err(Error::Config(format!("dataset '{}' repeats canonical channel {c}", ds.name)));
                }
            }
        }
        Ok(())
    }
}

/// Multi-dataset model: channel-wise lifting into a shared trunk.
#[derive(Clone, Debug)]
pub struct WaveLiTFM {
    trunk: Trunk,
    pub fm: FMConfig,
    /// `[C_total, T·4^ℓ, D]`, no bias.
    pub lift: ParamId,
    /// `[K, D]`.
    pub task_embed: ParamId,
    pub heads: Vec<(ParamId, ParamId)>,
}

impl WaveLiTFM {
    /// `cfg.in_channels` and `cfg.out_channels` are ignored; each dataset's
    /// head emits its native channel count.
    pub fn init<R: Rng + ?Sized>(store: &mut ParamStore, cfg: &WaveLiTConfig, fm: &FMConfig, rng: &mut R) -> Result<WaveLiTFM> {
        fm.validate()?;
        let cfg = WaveLiTConfig { in_channels: fm.canonical_channels, out_channels: fm.canonical_channels, ..cfg.clone() };
        cfg.validate()?;
        let d = cfg.embed_dim;
        let per_c = cfg.history * cfg.bands();
        let std = 1.0 / (per_c as f64).sqrt();
        let lift = store.add("fm.lift", Tensor::randn(&[fm.canonical_channels, per_c, d], std, rng));
        let task_embed = store.add("fm.task_embed", Tensor::zeros(&[fm.datasets.len(), d]));
        let trunk = Trunk::init(store, &cfg, rng)?;
        let heads = fm
            .datasets
            .iter()
            .map(|ds| head(store, &format!("fm.head.{}", ds.name), d, ds.channels.len() * cfg.bands(), rng))
            .collect();
        Ok(WaveLiTFM { trunk, fm: fm.clone(), lift, task_embed, heads })
    }

    fn check_dataset(&self, id: usize) -> Result<()> {
        if id >= self.fm.datasets.len() {
            return Err(Error::Config(format!("unknown dataset id {id}, {} registered", self.fm.datasets.len())));
        }
        Ok(())
    }

    /// Scatters native channels `[..., C_ds]` into zero-filled canonical slots.
    pub fn to_canonical(&self, x: &Tensor, dataset: usize) -> Result<Tensor> {
        self.check_dataset(dataset)?;
        let map = &self.fm.datasets[dataset].channels;
        let c = *x.shape().last().unwrap_or(&0);
        if c != map.len() {
            return dim_err(format!("dataset {dataset} has {} channels, input has {c}", map.len()));
        }
        let ct = self.fm.canonical_channels;
        let mut shape = x.shape().to_vec();
        *shape.last_mut().unwrap() = ct;
        let mut out = vec![0.0; x.len() / c * ct];
        for (row, dst) in x.data().chunks(c).zip(out.chunks_mut(ct)) {
            for (v, &k) in row.iter().zip(map) {
                dst[k] = *v;
            }
        }
        Tensor::new(&shape, out)
    }

    /// Lifting rows in token-feature order `(t, c, band)`: `[T·C_total·4^ℓ, D]`.
    fn lift_matrix(&self, tape: &mut Tape, bound: &Bound) -> Result<Var> {
        let cfg = &self.trunk.cfg;
        let (ct, t, nb, d) = (self.fm.canonical_channels, cfg.history, cfg.bands(), cfg.embed_dim);
        let l = tape.reshape(bound[self.lift], &[ct, t, nb, d])?;
        let l = tape.permute(l, &[1, 0, 2, 3])?;
        tape.reshape(l, &[t * ct * nb, d])
    }

    /// `z = Σ_c x_c W_lift[c] + e_k` on canonical input `[B, T, H, W, C_total]`.
    pub fn fm_embed(&self, tape: &mut Tape, bound: &Bound, x: Var, dataset: usize) -> Result<Var> {
        self.check_dataset(dataset)?;
        let tokens = self.trunk.tokens(tape, x, self.fm.canonical_channels)?;
        let w = self.lift_matrix(tape, bound)?;
        let z = tape.matmul(tokens, w)?;
        let d = self.trunk.cfg.embed_dim;
        let e = tape.slice(bound[self.task_embed], 0, dataset, 1)?;
        let e = tape.reshape(e, &[d])?;
        tape.add_bias(z, e)
    }

    /// Embedding computed from an explicit channel subset only, with the
    /// remaining channels left out of the lifting sum entirely.
    pub fn fm_embed_subset(&self, tape: &mut Tape, bound: &Bound, x: Var, dataset: usize, keep: &[usize]) -> Result<Var> {
        self.check_dataset(dataset)?;
        let cfg = &self.trunk.cfg;
        let (ct, t, nb, d) = (self.fm.canonical_channels, cfg.history, cfg.bands(), cfg.embed_dim);
        let tokens = self.trunk.tokens(tape, x, ct)?;
        let s = tape.shape(tokens).to_vec();
        let tok = tape.reshape(tokens, &[s[0], s[1], t, ct, nb])?;
        let lift = tape.reshape(bound[self.lift], &[ct, t, nb, d])?;
        let lift = tape.permute(lift, &[1, 0, 2, 3])?;
        let mut tok_parts = Vec::new();
        let mut lift_parts = Vec::new();
        for &c in keep {
            tok_parts.push(tape.slice(tok, 3, c, 1)?);
            lift_parts.push(tape.slice(lift, 1, c, 1)?);
        }
        let z = if keep.is_empty() {
            tape.constant(Tensor::zeros(&[s[0], s[1], d]))
        } else {
            let k = keep.len();
            let tk = tape.concat(&tok_parts, 3)?;
            let tk = tape.reshape(tk, &[s[0], s[1], t * k * nb])?;
            let lk = tape.concat(&lift_parts, 1)?;
            let lk = tape.reshape(lk, &[t * k * nb, d])?;
            tape.matmul(tk, lk)?
        };
        let e = tape.slice(bound[self.task_embed], 0, dataset, 1)?;
        let e = tape.reshape(e, &[d])?;
        tape.add_bias(z, e)
    }

    /// Per-dataset linear head: `[B, N, D] -> [B, N, C_ds·4^ℓ]`.
    pub fn fm_head(&self, tape: &mut Tape, bound: &Bound, latent: Var, dataset: usize) -> Result<Var> {
        self.check_dataset(dataset)?;
        apply_head(tape, bound, self.heads[dataset], latent)
    }

    pub fn head_param_count(&self, store: &ParamStore, dataset: usize) -> usize {
        let (w, b) = self.heads[dataset];
        store.get(w).len() + store.get(b).len()
    }

    pub fn trunk_param_count(&self, store: &ParamStore) -> usize {
        let heads: usize = (0..self.heads.len()).map(|k| self.head_param_count(store, k)).sum();
        store.scalar_count() - heads
    }

    /// Forward on canonical input; returns native channels of `dataset`.
    pub fn forward_canonical(&self, tape: &mut Tape, bound: &Bound, x: Var, dataset: usize) -> Result<Var> {
        let z = self.fm_embed(tape, bound, x, dataset)?;
        let z = self.trunk.mix(tape, bound, z)?;
        let c = self.fm_head(tape, bound, z, dataset)?;
        let n_out = self.fm.datasets[dataset].channels.len();
        let cfg = &self.trunk.cfg;
        if cfg.predict_delta {
            return Err(Error::Config("predict_delta is not supported by the multi-dataset model".into()));
        }
        self.trunk.reconstruct(tape, c, x, n_out)
    }
}

impl Surrogate for WaveLiTFM {
    fn config(&self) -> &WaveLiTConfig {
        &self.trunk.cfg
    }

    /// `x` holds the dataset's native channels.
    fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, dataset: usize) -> Result<Var> {
        let xc = self.scatter_var(tape, x, dataset)?;
        self.forward_canonical(tape, bound, xc, dataset)
    }

    fn datasets(&self) -> usize {
        self.fm.datasets.len()
    }
}

impl WaveLiTFM {
    fn scatter_var(&self, tape: &mut Tape, x: Var, dataset: usize) -> Result<Var> {
        self.check_dataset(dataset)?;
        let map = &self.fm.datasets[dataset].channels;
        let s = tape.shape(x).to_vec();
        let last = s.len() - 1;
        if s[last] != map.len() {
            return dim_err(format!("dataset {dataset} has {} channels, input has {}", map.len(), s[last]));
        }
        let mut zshape = s.clone();
        zshape[last] = 1;
        let zero = tape.constant(Tensor::zeros(&zshape));
        let mut parts = Vec::with_capacity(self.fm.canonical_channels);
        for c in 0..self.fm.canonical_channels {
            match map.iter().position(|&k| k == c) {
                Some(i) => parts.push(tape.slice(x, last, i, 1)?),
                None => parts.push(zero),
            }
        }
        tape.concat(&parts, last)
    }
}
