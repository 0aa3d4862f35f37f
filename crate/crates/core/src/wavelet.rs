//! Separable 2-D discrete wavelet transform with symmetric boundary extension.
//!
//! Layout: inputs are `[..., H, W, C]`. One level produces `[..., H/2, W/2, 4C]`
//! where channel `4c + b` holds band `b` of input channel `c`, with
//! `b = 0 (LL), 1 (LH), 2 (HL), 3 (HH)`. The first letter is the filter applied
//! along `H`, the second along `W`. Further levels split every channel again, so
//! level `ℓ` yields `C·4^ℓ` channels and band digits are appended base-4.
//!
//! Boundaries use whole-sample symmetric extension (`d c b | a b c d | c b a`).
//! With lowpass outputs taken at even and highpass at odd sample positions the
//! transform is non-expansive and exactly invertible for the symmetric
//! biorthogonal banks; haar never touches the boundary.
//!
//! Normalisation follows the common DC-gain-√2 convention: `Σ dec_lo = √2`.
//! Haar is orthonormal and preserves energy; the biorthogonal banks do not.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{LinearMap, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WaveletName {
    #[serde(rename = "haar")]
    Haar,
    #[serde(rename = "bior2.2")]
    Bior22,
    #[serde(rename = "bior4.4")]
    Bior44,
}

impl WaveletName {
    pub const ALL: [WaveletName; 3] = [WaveletName::Haar, WaveletName::Bior22, WaveletName::Bior44];

    pub fn as_str(self) -> &'static str {
        match self {
            WaveletName::Haar => "haar",
            WaveletName::Bior22 => "bior2.2",
            WaveletName::Bior44 => "bior4.4",
        }
    }
}

impl fmt::Display for WaveletName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for WaveletName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        WaveletName::ALL.into_iter().find(|w| w.as_str() == s).ok_or_else(|| {
            Error::Config(format!("unknown wavelet '{s}', supported: haar, bior2.2, bior4.4"))
        })
    }
}

/// Analysis and synthesis filters of one wavelet.
///
/// Coefficient lists are stored zero-padded to the family's nominal length
/// (2 for haar, 6 for bior2.2, 10 for bior4.4). Analysis filters are applied
/// as correlations, synthesis filters as convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletFilterBank {
    pub name: WaveletName,
    pub dec_lo: Vec<f64>,
    pub dec_hi: Vec<f64>,
    pub rec_lo: Vec<f64>,
    pub rec_hi: Vec<f64>,
}

const H: f64 = std::f64::consts::FRAC_1_SQRT_2;

pub fn filter_bank(name: &str) -> Result<WaveletFilterBank> {
    Ok(WaveletName::from_str(name)?.bank())
}

impl WaveletName {
    pub fn bank(self) -> WaveletFilterBank {
        let (dec_lo, dec_hi, rec_lo, rec_hi): (&[f64], &[f64], &[f64], &[f64]) = match self {
            WaveletName::Haar => (&[H, H], &[H, -H], &[H, H], &[H, -H]),
            WaveletName::Bior22 => (
                &[
                    0.0,
                    -0.176_776_695_296_636_9,
                    0.353_553_390_593_273_8,
                    1.060_660_171_779_821_2,
                    0.353_553_390_593_273_8,
                    -0.176_776_695_296_636_9,
                ],
                &[0.0, 0.353_553_390_593_273_8, -0.707_106_781_186_547_6, 0.353_553_390_593_273_8, 0.0, 0.0],
                &[0.0, 0.353_553_390_593_273_8, 0.707_106_781_186_547_6, 0.353_553_390_593_273_8, 0.0, 0.0],
                &[
                    0.0,
                    0.176_776_695_296_636_9,
                    0.353_553_390_593_273_8,
                    -1.060_660_171_779_821_2,
                    0.353_553_390_593_273_8,
                    0.176_776_695_296_636_9,
                ],
            ),
            WaveletName::Bior44 => (
                &[
                    0.0,
                    0.037_828_455_507_264_04,
                    -0.023_849_465_019_556_843,
                    -0.110_624_404_418_437_18,
                    0.377_402_855_612_830_66,
                    0.852_698_679_008_893_8,
                    0.377_402_855_612_830_66,
                    -0.110_624_404_418_437_18,
                    -0.023_849_465_019_556_843,
                    0.037_828_455_507_264_04,
                ],
                &[
                    0.0,
                    -0.064_538_882_628_697_06,
                    0.040_689_417_609_164_06,
                    0.418_092_273_221_617_24,
                    -0.788_485_616_405_582_9,
                    0.418_092_273_221_617_24,
                    0.040_689_417_609_164_06,
                    -0.064_538_882_628_697_06,
                    0.0,
                    0.0,
                ],
                &[
                    0.0,
                    -0.064_538_882_628_697_06,
                    -0.040_689_417_609_164_06,
                    0.418_092_273_221_617_24,
                    0.788_485_616_405_582_9,
                    0.418_092_273_221_617_24,
                    -0.040_689_417_609_164_06,
                    -0.064_538_882_628_697_06,
                    0.0,
                    0.0,
                ],
                &[
                    0.0,
                    -0.037_828_455_507_264_04,
                    -0.023_849_465_019_556_843,
                    0.110_624_404_418_437_18,
                    0.377_402_855_612_830_66,
                    -0.852_698_679_008_893_8,
                    0.377_402_855_612_830_66,
                    0.110_624_404_418_437_18,
                    -0.023_849_465_019_556_843,
                    -0.037_828_455_507_264_04,
                ],
            ),
        };
        WaveletFilterBank {
            name: self,
            dec_lo: dec_lo.to_vec(),
            dec_hi: dec_hi.to_vec(),
            rec_lo: rec_lo.to_vec(),
            rec_hi: rec_hi.to_vec(),
        }
    }
}

/// Nonzero span of a filter and its alignment origin.
#[derive(Clone, Debug)]
struct Taps {
    coeffs: Vec<f64>,
    origin: isize,
}

impl Taps {
    /// `high` selects the ceiling of the half-length for even-length filters.
    fn from_padded(padded: &[f64], high: bool) -> Taps {
        let first = padded.iter().position(|&c| c != 0.0).unwrap_or(0);
        let last = padded.iter().rposition(|&c| c != 0.0).unwrap_or(0);
        let coeffs = padded[first..=last].to_vec();
        let l = coeffs.len() as isize;
        let origin = if high { l / 2 } else { (l - 1) / 2 };
        Taps { coeffs, origin }
    }
}

/// Whole-sample symmetric index folding into `[0, n)`.
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Sparse `n×n` matrix stored row by row.
#[derive(Clone, Debug)]
struct Sparse {
    rows: Vec<Vec<(usize, f64)>>,
}

impl Sparse {
    fn push(row: &mut Vec<(usize, f64)>, col: usize, w: f64) {
        if let Some(e) = row.iter_mut().find(|e| e.0 == col) {
            e.1 += w;
        } else {
            row.push((col, w));
        }
    }

    /// Rows `[0, n/2)` are lowpass coefficients, `[n/2, n)` highpass.
    fn analysis(bank: &WaveletFilterBank, n: usize) -> Sparse {
        let lo = Taps::from_padded(&bank.dec_lo, false);
        let hi = Taps::from_padded(&bank.dec_hi, true);
        let half = n / 2;
        let mut rows = vec![Vec::new(); n];
        for k in 0..half {
            for (j, &c) in lo.coeffs.iter().enumerate() {
                let idx = reflect(2 * k as isize + j as isize - lo.origin, n);
                Self::push(&mut rows[k], idx, c);
            }
            for (j, &c) in hi.coeffs.iter().enumerate() {
                let idx = reflect(2 * k as isize + 1 + j as isize - hi.origin, n);
                Self::push(&mut rows[half + k], idx, c);
            }
        }
        Sparse { rows }
    }

    /// Maps `[lo; hi]` coefficients back to `n` samples.
    fn synthesis(bank: &WaveletFilterBank, n: usize) -> Sparse {
        let lo = Taps::from_padded(&bank.rec_lo, false);
        let hi = Taps::from_padded(&bank.rec_hi, true);
        let half = n / 2;
        let mut rows = vec![Vec::new(); n];
        for (s, row) in rows.iter_mut().enumerate() {
            for (j, &c) in lo.coeffs.iter().enumerate() {
                let m = reflect(s as isize - j as isize + lo.origin, n);
                if m % 2 == 0 {
                    Self::push(row, m / 2, c);
                }
            }
            for (j, &c) in hi.coeffs.iter().enumerate() {
                let m = reflect(s as isize - j as isize + hi.origin, n);
                if m % 2 == 1 {
                    Self::push(row, half + (m - 1) / 2, c);
                }
            }
        }
        Sparse { rows }
    }

    /// `out[o, r, i] = Σ w · x[o, c, i]` along the middle axis.
    fn apply(&self, x: &[f64], outer: usize, inner: usize) -> Vec<f64> {
        let n = self.rows.len();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for (r, row) in self.rows.iter().enumerate() {
                let dst = (o * n + r) * inner;
                for &(c, w) in row {
                    let src = (o * n + c) * inner;
                    for i in 0..inner {
                        out[dst + i] += w * x[src + i];
                    }
                }
            }
        }
        out
    }

    fn apply_transpose(&self, g: &[f64], outer: usize, inner: usize) -> Vec<f64> {
        let n = self.rows.len();
        let mut out = vec![0.0; g.len()];
        for o in 0..outer {
            for (r, row) in self.rows.iter().enumerate() {
                let src = (o * n + r) * inner;
                for &(c, w) in row {
                    let dst = (o * n + c) * inner;
                    for i in 0..inner {
                        out[dst + i] += w * g[src + i];
                    }
                }
            }
        }
        out
    }
}

/// `[outer, H, W, C]` in blocked layout (band rows/cols stacked) <-> `[outer, H/2, W/2, 4C]`.
fn blocked_to_channels(z: &[f64], outer: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let (hh, wh) = (h / 2, w / 2);
    let mut out = vec![0.0; z.len()];
    for o in 0..outer {
        for i in 0..hh {
            for j in 0..wh {
                for ch in 0..c {
                    for b in 0..4 {
                        let (bh, bw) = (b / 2, b % 2);
                        let src = ((o * h + bh * hh + i) * w + bw * wh + j) * c + ch;
                        let dst = ((o * hh + i) * wh + j) * 4 * c + 4 * ch + b;
                        out[dst] = z[src];
                    }
                }
            }
        }
    }
    out
}

fn channels_to_blocked(y: &[f64], outer: usize, h: usize, w: usize, c: usize) -> Vec<f64> {
    let (hh, wh) = (h / 2, w / 2);
    let mut out = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..hh {
            for j in 0..wh {
                for ch in 0..c {
                    for b in 0..4 {
                        let (bh, bw) = (b / 2, b % 2);
                        let dst = ((o * h + bh * hh + i) * w + bw * wh + j) * c + ch;
                        let src = ((o * hh + i) * wh + j) * 4 * c + 4 * ch + b;
                        out[dst] = y[src];
                    }
                }
            }
        }
    }
    out
}

/// Splits `[..., H, W, C]` into `(outer, H, W, C)`.
fn field_dims(shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    let r = shape.len();
    if r < 3 {
        return dim_err(format!("wavelet transform needs [..., H, W, C], got {:?}", shape));
    }
    Ok((shape[..r - 3].iter().product(), shape[r - 3], shape[r - 2], shape[r - 1]))
}

/// One level of the 2-D transform (or its inverse) as a recorded linear map.
#[derive(Debug)]
pub struct Dwt2Level {
    bank: WaveletFilterBank,
    inverse: bool,
}

impl Dwt2Level {
    pub fn forward(bank: &WaveletFilterBank) -> Self {
        Dwt2Level { bank: bank.clone(), inverse: false }
    }

    pub fn inverse(bank: &WaveletFilterBank) -> Self {
        Dwt2Level { bank: bank.clone(), inverse: true }
    }

    /// Spatial extents and channel count of the full-resolution side.
    fn full_dims(&self, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
        let (outer, h, w, c) = field_dims(shape)?;
        if self.inverse {
            if c % 4 != 0 {
                return dim_err(format!("inverse DWT needs a multiple of 4 channels, got {c}"));
            }
            Ok((outer, 2 * h, 2 * w, c / 4))
        } else {
            if h % 2 != 0 {
                return dim_err(format!("DWT: axis H has odd extent {h}"));
            }
            if w % 2 != 0 {
                return dim_err(format!("DWT: axis W has odd extent {w}"));
            }
            Ok((outer, h, w, c))
        }
    }

    fn analysis(&self, x: &[f64], (outer, h, w, c): (usize, usize, usize, usize)) -> Vec<f64> {
        let ah = Sparse::analysis(&self.bank, h);
        let aw = Sparse::analysis(&self.bank, w);
        let z = ah.apply(x, outer, w * c);
        let z = aw.apply(&z, outer * h, c);
        blocked_to_channels(&z, outer, h, w, c)
    }

    fn analysis_adjoint(&self, g: &[f64], (outer, h, w, c): (usize, usize, usize, usize)) -> Vec<f64> {
        let ah = Sparse::analysis(&self.bank, h);
        let aw = Sparse::analysis(&self.bank, w);
        let z = channels_to_blocked(g, outer, h, w, c);
        let z = aw.apply_transpose(&z, outer * h, c);
        ah.apply_transpose(&z, outer, w * c)
    }

    fn synthesis(&self, y: &[f64], (outer, h, w, c): (usize, usize, usize, usize)) -> Vec<f64> {
        let sh = Sparse::synthesis(&self.bank, h);
        let sw = Sparse::synthesis(&self.bank, w);
        let z = channels_to_blocked(y, outer, h, w, c);
        let z = sw.apply(&z, outer * h, c);
        sh.apply(&z, outer, w * c)
    }

    fn synthesis_adjoint(&self, g: &[f64], (outer, h, w, c): (usize, usize, usize, usize)) -> Vec<f64> {
        let sh = Sparse::synthesis(&self.bank, h);
        let sw = Sparse::synthesis(&self.bank, w);
        let z = sh.apply_transpose(g, outer, w * c);
        let z = sw.apply_transpose(&z, outer * h, c);
        blocked_to_channels(&z, outer, h, w, c)
    }
}

impl LinearMap for Dwt2Level {
    fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let (_, h, w, c) = self.full_dims(input)?;
        let r = input.len();
        let mut s = input.to_vec();
        if self.inverse {
            s[r - 3] = h;
            s[r - 2] = w;
            s[r - 1] = c;
        } else {
            s[r - 3] = h / 2;
            s[r - 2] = w / 2;
            s[r - 1] = 4 * c;
        }
        Ok(s)
    }

    fn apply(&self, x: &Tensor) -> Result<Tensor> {
        let dims = self.full_dims(x.shape())?;
        let shape = self.output_shape(x.shape())?;
        let data = if self.inverse { self.synthesis(x.data(), dims) } else { self.analysis(x.data(), dims) };
        Tensor::new(&shape, data)
    }

    fn apply_adjoint(&self, g: &Tensor, input: &[usize]) -> Tensor {
        let dims = self.full_dims(input).expect("shape validated in forward");
        let data = if self.inverse {
            self.synthesis_adjoint(g.data(), dims)
        } else {
            self.analysis_adjoint(g.data(), dims)
        };
        Tensor::new(input, data).expect("adjoint preserves element count")
    }
}

/// Wavelet coefficients of a field, stored as a channels-last token tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct SubbandSet {
    pub coeffs: Tensor,
    pub levels: usize,
    /// Channel count of the original field.
    pub channels: usize,
}

impl SubbandSet {
    /// Band `b` (0 = LL, 1 = LH, 2 = HL, 3 = HH) of the first split, for all
    /// original channels: `[..., h, w, C·4^(levels-1)]`.
    pub fn band(&self, b: usize) -> Tensor {
        assert!(b < 4);
        let shape = self.coeffs.shape();
        let total = *shape.last().unwrap();
        let per_c = total / self.channels; // 4^levels
        let sub = per_c / 4;
        let rows = self.coeffs.len() / total;
        let mut data = Vec::with_capacity(rows * self.channels * sub);
        for row in self.coeffs.data().chunks(total) {
            for c in 0..self.channels {
                let base = c * per_c + b * sub;
                data.extend_from_slice(&row[base..base + sub]);
            }
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = self.channels * sub;
        Tensor::new(&out_shape, data).expect("band extraction preserves counts")
    }

    pub fn ll(&self) -> Tensor {
        self.band(0)
    }
    pub fn lh(&self) -> Tensor {
        self.band(1)
    }
    pub fn hl(&self) -> Tensor {
        self.band(2)
    }
    pub fn hh(&self) -> Tensor {
        self.band(3)
    }

    /// Sum of squared coefficients.
    pub fn energy(&self) -> f64 {
        self.coeffs.data().iter().map(|x| x * x).sum()
    }
}

fn check_divisible(shape: &[usize], levels: usize) -> Result<()> {
    if levels == 0 {
        return Err(Error::Config("DWT levels must be at least 1".into()));
    }
    let (_, h, w, _) = field_dims(shape)?;
    let f = 1usize << levels;
    if h % f != 0 {
        return dim_err(format!("DWT: axis H = {h} is not divisible by 2^{levels}"));
    }
    if w % f != 0 {
        return dim_err(format!("DWT: axis W = {w} is not divisible by 2^{levels}"));
    }
    Ok(())
}

/// Multi-level forward transform of `x[..., H, W, C]`.
pub fn dwt2(x: &Tensor, bank: &WaveletFilterBank, levels: usize) -> Result<SubbandSet> {
    check_divisible(x.shape(), levels)?;
    let level = Dwt2Level::forward(bank);
    let mut y = x.clone();
    for _ in 0..levels {
        y = level.apply(&y)?;
    }
    Ok(SubbandSet { coeffs: y, levels, channels: *x.shape().last().unwrap() })
}

/// Exact inverse of [`dwt2`].
pub fn idwt2(s: &SubbandSet, bank: &WaveletFilterBank) -> Result<Tensor> {
    let total = *s.coeffs.shape().last().unwrap_or(&0);
    if s.levels == 0 || total != s.channels * 4usize.pow(s.levels as u32) {
        return dim_err(format!(
            "subband set with {} channels is inconsistent with {} levels of {} channels",
            total, s.levels, s.channels
        ));
    }
    let level = Dwt2Level::inverse(bank);
    let mut x = s.coeffs.clone();
    for _ in 0..s.levels {
        x = level.apply(&x)?;
    }
    Ok(x)
}

/// Differentiable multi-level forward transform.
pub fn dwt2_var(tape: &mut Tape, x: Var, bank: &WaveletFilterBank, levels: usize) -> Result<Var> {
    check_divisible(tape.shape(x), levels)?;
    let map: Arc<dyn LinearMap> = Arc::new(Dwt2Level::forward(bank));
    let mut y = x;
    for _ in 0..levels {
        y = tape.linear_map(y, map.clone())?;
    }
    Ok(y)
}

/// Differentiable multi-level inverse transform.
pub fn idwt2_var(tape: &mut Tape, y: Var, bank: &WaveletFilterBank, levels: usize) -> Result<Var> {
    let map: Arc<dyn LinearMap> = Arc::new(Dwt2Level::inverse(bank));
    let mut x = y;
    for _ in 0..levels {
        x = tape.linear_map(x, map.clone())?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn banks() -> Vec<WaveletFilterBank> {
        WaveletName::ALL.iter().map(|w| w.bank()).collect()
    }

    #[test]
    fn nominal_filter_lengths() {
        assert_eq!(filter_bank("haar").unwrap().dec_lo.len(), 2);
        assert_eq!(filter_bank("bior2.2").unwrap().dec_lo.len(), 6);
        assert_eq!(filter_bank("bior4.4").unwrap().dec_lo.len(), 10);
    }

    #[test]
    fn unknown_name_lists_supported() {
        let err = filter_bank("db4").unwrap_err().to_string();
        assert!(err.contains("haar") && err.contains("bior2.2") && err.contains("bior4.4"));
    }

    #[test]
    fn highpass_has_vanishing_moment() {
        for b in banks() {
            // bior4.4 taps are tabulated to about 12 digits
            assert!(b.dec_hi.iter().sum::<f64>().abs() < 2e-12, "{}", b.name);
            assert!((b.dec_lo.iter().sum::<f64>() - 2f64.sqrt()).abs() < 1e-12, "{}", b.name);
        }
    }

    #[test]
    fn one_dimensional_operators_are_inverse() {
        for b in banks() {
            for n in [2, 4, 6, 8, 16] {
                let a = Sparse::analysis(&b, n);
                let s = Sparse::synthesis(&b, n);
                for col in 0..n {
                    let mut e = vec![0.0; n];
                    e[col] = 1.0;
                    let back = s.apply(&a.apply(&e, 1, 1), 1, 1);
                    for (i, v) in back.iter().enumerate() {
                        let want = if i == col { 1.0 } else { 0.0 };
                        assert!((v - want).abs() < 1e-12, "{} n={n} col={col}: {back:?}", b.name);
                    }
                }
            }
        }
    }

    #[test]
    fn haar_constant_block() {
        let c = 3.25;
        let x = Tensor::full(&[2, 2, 1], c);
        let s = dwt2(&x, &WaveletName::Haar.bank(), 1).unwrap();
        // direct filter oracle: (1/√2)² · 4c
        assert!((s.ll().item() - 2.0 * c).abs() < 1e-12);
        for b in 1..4 {
            assert_eq!(s.band(b).item(), 0.0);
        }
        let back = idwt2(&s, &WaveletName::Haar.bank()).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn shape_formula() {
        let x = Tensor::zeros(&[1, 1, 64, 64, 3]);
        let s = dwt2(&x, &WaveletName::Bior22.bank(), 1).unwrap();
        assert_eq!(s.coeffs.shape(), &[1, 1, 32, 32, 12]);
    }

    #[test]
    fn indivisible_axis_is_named() {
        let x = Tensor::zeros(&[8, 6, 1]);
        let err = dwt2(&x, &WaveletName::Haar.bank(), 2).unwrap_err().to_string();
        assert!(err.contains("axis W"), "{err}");
    }

    #[test]
    fn constant_field_detail_bands_vanish() {
        for b in banks() {
            let x = Tensor::full(&[16, 16, 2], -1.7);
            let s = dwt2(&x, &b, 1).unwrap();
            for band in 1..4 {
                assert!(s.band(band).max_abs() <= 1e-11, "{} band {band}", b.name);
            }
        }
    }

    #[test]
    fn haar_preserves_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(&[32, 32, 2], 1.0, &mut rng);
        let s = dwt2(&x, &WaveletName::Haar.bank(), 2).unwrap();
        let e = x.data().iter().map(|v| v * v).sum::<f64>();
        assert!((s.energy() - e).abs() / e < 1e-9);
    }

    #[test]
    fn adjoint_matches_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for b in banks() {
            for inverse in [false, true] {
                let map = if inverse { Dwt2Level::inverse(&b) } else { Dwt2Level::forward(&b) };
                let in_shape = if inverse { [2, 4, 4, 8] } else { [2, 8, 8, 2] };
                let x = Tensor::randn(&in_shape, 1.0, &mut rng);
                let y = map.apply(&x).unwrap();
                let g = Tensor::randn(y.shape(), 1.0, &mut rng);
                let lhs: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                let gt = map.apply_adjoint(&g, &in_shape);
                let rhs: f64 = x.data().iter().zip(gt.data()).map(|(a, b)| a * b).sum();
                assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{} inverse={inverse}", b.name);
            }
        }
    }
}
