//! Training losses, evaluation metrics and the radially averaged power spectrum.

use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::wavelet::{dwt2, dwt2_var, WaveletFilterBank};

/// How the wavelet-domain absolute error is reduced over coefficients.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WaveletReduction {
    Mean,
    Sum,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_mse: f64,
    pub lambda_l1: f64,
    pub wavelet_levels: usize,
    pub reduction: WaveletReduction,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_mse: 1.0, lambda_l1: 1.0, wavelet_levels: 1, reduction: WaveletReduction::Mean }
    }
}

impl LossWeights {
    pub fn new(lambda_mse: f64, lambda_l1: f64) -> Self {
        LossWeights { lambda_mse, lambda_l1, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for (n, v) in [("lambda_mse", self.lambda_mse), ("lambda_l1", self.lambda_l1)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{n} must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// The combined loss and its two unweighted terms.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub mse: Var,
    pub wavelet: Var,
}

/// `λ_mse·mean((p−t)²) + λ_l1·reduce(|DWT p − DWT t|)` over fields `[..., H, W, C]`.
pub fn combined_loss(
    tape: &mut Tape,
    pred: Var,
    target: Var,
    bank: &WaveletFilterBank,
    weights: &LossWeights,
) -> Result<LossTerms> {
    if tape.shape(pred) != tape.shape(target) {
        return dim_err(format!("loss shapes differ: {:?} vs {:?}", tape.shape(pred), tape.shape(target)));
    }
    let mse = tape.mse(pred, target)?;
    let diff = tape.sub(pred, target)?;
    // the transform is linear, so DWT(p) − DWT(t) = DWT(p − t)
    let wd = dwt2_var(tape, diff, bank, weights.wavelet_levels)?;
    let a = tape.abs(wd);
    let wavelet = match weights.reduction {
        WaveletReduction::Mean => tape.mean(a),
        WaveletReduction::Sum => tape.sum(a),
    };
    let m = tape.scale(mse, weights.lambda_mse);
    let w = tape.scale(wavelet, weights.lambda_l1);
    let total = tape.add(m, w)?;
    Ok(LossTerms { total, mse, wavelet })
}

/// Tape-free evaluation of the wavelet-domain mean absolute error.
pub fn wavelet_l1(pred: &Tensor, target: &Tensor, bank: &WaveletFilterBank, levels: usize) -> Result<f64> {
    same_shape(pred, target)?;
    let a = dwt2(pred, bank, levels)?;
    let b = dwt2(target, bank, levels)?;
    let n = a.coeffs.len() as f64;
    Ok(a.coeffs.data().iter().zip(b.coeffs.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return dim_err(format!("metric shapes differ: {:?} vs {:?}", a.shape(), b.shape()));
    }
    Ok(())
}

/// `‖p − t‖₂ / ‖t‖₂` over all elements.
pub fn relative_l2(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target)?;
    let tn = target.norm();
    if tn == 0.0 {
        return Err(Error::UndefinedMetric("relative L2 of a zero target".into()));
    }
    Ok(pred.sub(target)?.norm() / tn)
}

/// Per-channel `RMSE / std(target)` averaged over channels. All axes but the
/// last are pooled as samples.
pub fn vrmse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    same_shape(pred, target)?;
    let c = *target.shape().last().ok_or_else(|| Error::Dimension("vrmse of a scalar".into()))?;
    let n = target.len() / c;
    let mut total = 0.0;
    for ch in 0..c {
        let t = target.data().iter().skip(ch).step_by(c);
        let mean = t.clone().sum::<f64>() / n as f64;
        let var = t.clone().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        if var == 0.0 {
            return Err(Error::UndefinedMetric(format!("vrmse: target channel {ch} has zero variance")));
        }
        let mse = pred
            .data()
            .iter()
            .skip(ch)
            .step_by(c)
            .zip(t)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n as f64;
        total += (mse / var).sqrt();
    }
    Ok(total / c as f64)
}

/// Radially averaged power spectrum of a square field.
#[derive(Clone, Debug, PartialEq)]
pub struct Rapsd {
    /// Integer radius of each bin, `0..=max`.
    pub radius: Vec<usize>,
    /// Mean `|F|²` per bin (0 for empty bins).
    pub power: Vec<f64>,
    /// Frequencies falling in each bin.
    pub count: Vec<usize>,
}

/// Unnormalised forward 2-D DFT of a real `[H, W]` field.
pub fn dft2(field: &Tensor) -> Result<Vec<Complex<f64>>> {
    if field.rank() != 2 {
        return dim_err(format!("dft2 expects [H, W], got {:?}", field.shape()));
    }
    let (h, w) = (field.shape()[0], field.shape()[1]);
    let mut buf: Vec<Complex<f64>> = field.data().iter().map(|&v| Complex::new(v, 0.0)).collect();
    let mut planner = FftPlanner::new();
    let fw = planner.plan_fft_forward(w);
    for row in buf.chunks_mut(w) {
        fw.process(row);
    }
    let fh = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            col[i] = buf[i * w + j];
        }
        fh.process(&mut col);
        for i in 0..h {
            buf[i * w + j] = col[i];
        }
    }
    Ok(buf)
}

fn signed_freq(k: usize, n: usize) -> i64 {
    if k <= n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// Power `|F|²` (unnormalised DFT, so `Σ|F|² = H·W·Σx²`) binned by
/// `⌊√(kx² + ky²)⌋` with signed frequencies.
pub fn rapsd(field: &Tensor) -> Result<Rapsd> {
    if field.rank() != 2 || field.shape()[0] != field.shape()[1] {
        return dim_err(format!("rapsd needs a square [N, N] field, got {:?}", field.shape()));
    }
    let n = field.shape()[0];
    let f = dft2(field)?;
    let mut sums = Vec::new();
    let mut count = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let (ky, kx) = (signed_freq(i, n), signed_freq(j, n));
            let r = ((kx * kx + ky * ky) as f64).sqrt().floor() as usize;
            if r >= sums.len() {
                sums.resize(r + 1, 0.0);
                count.resize(r + 1, 0);
            }
            sums[r] += f[i * n + j].norm_sqr();
            count[r] += 1;
        }
    }
    let power = sums.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
    Ok(Rapsd { radius: (0..sums.len()).collect(), power, count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wavelet::WaveletName;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(s: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(s)
    }

    fn loss_value(p: &Tensor, t: &Tensor, w: LossWeights) -> (f64, f64, f64) {
        let mut tape = Tape::new();
        let (pv, tv) = (tape.constant(p.clone()), tape.constant(t.clone()));
        let l = combined_loss(&mut tape, pv, tv, &WaveletName::Bior22.bank(), &w).unwrap();
        (tape.value(l.total).item(), tape.value(l.mse).item(), tape.value(l.wavelet).item())
    }

    #[test]
    fn equal_fields_give_zero_loss() {
        let t = Tensor::randn(&[1, 1, 8, 8, 2], 1.0, &mut rng(0));
        assert_eq!(loss_value(&t, &t, LossWeights::default()).0, 0.0);
    }

    #[test]
    fn mse_only_weighting() {
        let mut r = rng(1);
        let p = Tensor::randn(&[2, 8, 8, 1], 1.0, &mut r);
        let t = Tensor::randn(&[2, 8, 8, 1], 1.0, &mut r);
        let (total, mse, _) = loss_value(&p, &t, LossWeights::new(1.0, 0.0));
        let direct = p.data().iter().zip(t.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.len() as f64;
        assert_eq!(total, mse);
        assert!((mse - direct).abs() < 1e-15);
    }

    #[test]
    fn constant_offset_lives_in_ll_band() {
        let t = Tensor::randn(&[8, 8, 1], 1.0, &mut rng(2));
        let p = t.map(|v| v + 0.5);
        let (total, _, _) = loss_value(&p, &t, LossWeights::new(0.0, 1.0));
        // LL of a constant c is 2c (DC gain √2 per axis); detail bands vanish
        let expect = (2.0 * 0.5) / 4.0;
        assert!((total - expect).abs() < 1e-11, "{total}");
        let s = dwt2(&p.sub(&t).unwrap(), &WaveletName::Bior22.bank(), 1).unwrap();
        for b in 1..4 {
            assert!(s.band(b).max_abs() < 1e-11);
        }
    }

    #[test]
    fn loss_shape_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[4, 4, 1]));
        let b = tape.constant(Tensor::zeros(&[4, 4, 2]));
        let r = combined_loss(&mut tape, a, b, &WaveletName::Haar.bank(), &LossWeights::default());
        assert!(matches!(r, Err(Error::Dimension(_))));
    }

    #[test]
    fn relative_l2_cases() {
        let t = Tensor::randn(&[5, 3], 1.0, &mut rng(3));
        assert_eq!(relative_l2(&t, &t).unwrap(), 0.0);
        assert!((relative_l2(&t.scale(2.0), &t).unwrap() - 1.0).abs() < 1e-15);
        assert!((relative_l2(&Tensor::zeros(&[5, 3]), &t).unwrap() - 1.0).abs() < 1e-15);
        assert!(matches!(relative_l2(&t, &Tensor::zeros(&[5, 3])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn vrmse_cases() {
        let t = Tensor::randn(&[6, 6, 2], 1.0, &mut rng(4));
        assert_eq!(vrmse(&t, &t).unwrap(), 0.0);
        let mut mean_field = Tensor::zeros(t.shape());
        for c in 0..2 {
            let m = t.data().iter().skip(c).step_by(2).sum::<f64>() / 36.0;
            mean_field.data_mut().iter_mut().skip(c).step_by(2).for_each(|v| *v = m);
        }
        assert!((vrmse(&mean_field, &t).unwrap() - 1.0).abs() < 1e-12);
        let p = Tensor::randn(&[6, 6, 2], 1.0, &mut rng(5));
        let a = vrmse(&p, &t).unwrap();
        assert!((vrmse(&p.scale(-3.5), &t.scale(-3.5)).unwrap() - a).abs() < 1e-12);
        assert!((vrmse(&p.map(|v| v + 7.0), &t.map(|v| v + 7.0)).unwrap() - a).abs() < 1e-12);
        let mut flat = t.clone();
        flat.data_mut().iter_mut().skip(1).step_by(2).for_each(|v| *v = 2.0);
        let err = vrmse(&p, &flat).unwrap_err().to_string();
        assert!(err.contains("channel 1"), "{err}");
    }

    #[test]
    fn rapsd_constant_and_single_mode() {
        let r = rapsd(&Tensor::full(&[16, 16], 1.25)).unwrap();
        assert!(r.power[0] > 0.0);
        assert!(r.power[1..].iter().all(|p| p.abs() <= 1e-10));

        let n = 32;
        let f = Tensor::from_fn(&[n, n], |i| (2.0 * std::f64::consts::PI * 3.0 * (i % n) as f64 / n as f64).sin());
        let r = rapsd(&f).unwrap();
        let total: f64 = r.power.iter().zip(&r.count).map(|(p, &c)| p * c as f64).sum();
        let in3 = r.power[3] * r.count[3] as f64;
        assert!(in3 / total > 1.0 - 1e-12);
    }

    #[test]
    fn rapsd_parseval() {
        let f = Tensor::randn(&[16, 16], 1.0, &mut rng(6));
        let r = rapsd(&f).unwrap();
        let total: f64 = r.power.iter().zip(&r.count).map(|(p, &c)| p * c as f64).sum();
        let energy: f64 = f.data().iter().map(|v| v * v).sum();
        assert!((total - 256.0 * energy).abs() < 1e-9 * total);
    }

    #[test]
    fn rapsd_rejects_non_square() {
        assert!(matches!(rapsd(&Tensor::zeros(&[8, 16])), Err(Error::Dimension(_))));
    }

    #[test]
    fn rapsd_white_noise_is_flat() {
        let n = 64;
        let reps = 16;
        let mut acc: Vec<Vec<f64>> = Vec::new();
        let mut r = rng(7);
        for _ in 0..reps {
            let f = Tensor::randn(&[n, n], 1.0, &mut r);
            let s = dft2(&f).unwrap();
            if acc.is_empty() {
                acc = vec![Vec::new(); 64];
            }
            for i in 0..n {
                for j in 0..n {
                    let (ky, kx) = (signed_freq(i, n), signed_freq(j, n));
                    let rad = ((kx * kx + ky * ky) as f64).sqrt().floor() as usize;
                    if rad < acc.len() {
                        acc[rad].push(s[i * n + j].norm_sqr());
                    }
                }
            }
        }
        // expected power per frequency for unit white noise is N²
        let expect = (n * n) as f64;
        for (rad, samples) in acc.iter().enumerate() {
            if samples.len() < 32 {
                continue;
            }
            let m = samples.iter().sum::<f64>() / samples.len() as f64;
            let var = samples.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (samples.len() - 1) as f64;
            let se = (var / samples.len() as f64).sqrt();
            assert!((m - expect).abs() <= 3.0 * se + 1e-9, "radius {rad}: {m} vs {expect} (se {se})");
        }
    }
}
