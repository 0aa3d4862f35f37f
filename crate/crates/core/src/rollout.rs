//! Autoregressive rollout evaluation and the geometric error bound
//! `E_n ≤ ε·(L_Fⁿ − 1)/(L_F − 1)` for a surrogate `F` of a true map `f`.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::objectives::{relative_l2, vrmse};
use crate::tensor::Tensor;

/// Upper bound on the step-`n` error given one-step error `eps` and
/// Lipschitz constant `lf`. Uses `n·ε` when `|lf − 1| < 1e-9`.
pub fn error_bound(eps: f64, lf: f64, n: usize) -> f64 {
    if (lf - 1.0).abs() < 1e-9 {
        return n as f64 * eps;
    }
    eps * (lf.powi(n as i32) - 1.0) / (lf - 1.0)
}

/// Largest observed `‖F(x) − F(x+δ)‖ / ‖δ‖` over `directions` random unit
/// directions of length `radius` around each probe. A lower bound on the
/// true constant.
pub fn estimate_lipschitz<F, R>(map: F, probes: &[Tensor], radius: f64, directions: usize, rng: &mut R) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<Tensor>,
    R: Rng + ?Sized,
{
    if !(radius > 0.0) {
        return Err(Error::Config(format!("probe radius must be positive, got {radius}")));
    }
    let mut best: f64 = 0.0;
    for x in probes {
        let fx = map(x)?;
        for _ in 0..directions {
            let d = Tensor::randn(x.shape(), 1.0, rng);
            let d = d.scale(radius / d.norm());
            let fy = map(&x.add(&d)?)?;
            best = best.max(fx.sub(&fy)?.norm() / d.norm());
        }
    }
    Ok(best)
}

/// How the synthetic `(f, F)` pair is built from `(ε, L_F)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    /// `F(x) = L·R·x` with a fixed rotation `R`, `f = F − ε·sin(x)/√d`.
    Rotation,
    /// `F(x) = L·tanh(x)`, `f = F + ε·sin(x)/√d`.
    Tanh,
    /// `F(x) = L·x`, `f = F − ε·e` with a fixed unit `e`; the bound is attained.
    Aligned,
}

/// A true map and a surrogate with `‖F − f‖ ≤ ε` and `Lip(F) = L_F`.
#[derive(Clone, Debug)]
pub struct SyntheticPair {
    pub eps: f64,
    pub lf: f64,
    pub kind: PairKind,
    dim: usize,
}

impl SyntheticPair {
    pub fn new(eps: f64, lf: f64, kind: PairKind, dim: usize) -> Result<Self> {
        if eps < 0.0 || !(lf > 0.0) || dim < 2 || dim % 2 != 0 {
            return Err(Error::Config("need eps >= 0, L_F > 0 and an even dimension >= 2".into()));
        }
        Ok(SyntheticPair { eps, lf, kind, dim })
    }

    fn rotate(&self, x: &[f64]) -> Vec<f64> {
        // plane rotations by a fixed angle per coordinate pair
        let mut y = vec![0.0; x.len()];
        for p in 0..x.len() / 2 {
            let th = 0.3 + 0.7 * p as f64;
            let (c, s) = (th.cos(), th.sin());
            y[2 * p] = c * x[2 * p] - s * x[2 * p + 1];
            y[2 * p + 1] = s * x[2 * p] + c * x[2 * p + 1];
        }
        y
    }

    /// Surrogate `F`.
    pub fn surrogate(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            PairKind::Rotation => self.rotate(x).into_iter().map(|v| self.lf * v).collect(),
            PairKind::Tanh => x.iter().map(|v| self.lf * v.tanh()).collect(),
            PairKind::Aligned => x.iter().map(|v| self.lf * v).collect(),
        }
    }

    /// True map `f`.
    pub fn truth(&self, x: &[f64]) -> Vec<f64> {
        let s = self.eps / (self.dim as f64).sqrt();
        let fx = self.surrogate(x);
        match self.kind {
            PairKind::Rotation => fx.iter().zip(x).map(|(f, v)| f - s * v.sin()).collect(),
            PairKind::Tanh => fx.iter().zip(x).map(|(f, v)| f + s * v.sin()).collect(),
            PairKind::Aligned => fx.iter().map(|f| f - s).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    /// `E_0 … E_n`.
    pub errors: Vec<f64>,
    pub bounds: Vec<f64>,
    pub first_violation: Option<usize>,
    /// First `n` where `E_{n+1} > ε + L_F·E_n + slack`.
    pub first_recurrence_violation: Option<usize>,
}

impl BoundReport {
    pub fn passed(&self) -> bool {
        self.first_violation.is_none() && self.first_recurrence_violation.is_none()
    }
}

/// Rolls `f` and `F` from the same start and checks `E_n` against the bound.
pub fn bound_verification(pair: &SyntheticPair, x0: &[f64], n_steps: usize, slack: f64) -> Result<BoundReport> {
    if x0.len() != pair.dim {
        return dim_err(format!("start state has {} entries, pair expects {}", x0.len(), pair.dim));
    }
    let mut x = x0.to_vec();
    let mut xh = x0.to_vec();
    let mut errors = vec![0.0];
    let mut bounds = vec![0.0];
    let (mut first, mut first_rec) = (None, None);
    for n in 1..=n_steps {
        x = pair.truth(&x);
        xh = pair.surrogate(&xh);
        let e = x.iter().zip(&xh).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        let b = error_bound(pair.eps, pair.lf, n);
        if first.is_none() && e > b + slack {
            first = Some(n);
        }
        if first_rec.is_none() && e > pair.eps + pair.lf * errors[n - 1] + slack {
            first_rec = Some(n - 1);
        }
        errors.push(e);
        bounds.push(b);
    }
    Ok(BoundReport { errors, bounds, first_violation: first, first_recurrence_violation: first_rec })
}

// ---- model rollouts --------------------------------------------------------

/// Per-step errors of one trajectory, steps `1..=n`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRollout {
    pub vrmse: Vec<f64>,
    pub rel_l2: Vec<f64>,
    /// First step whose prediction is non-finite or has VRMSE above the threshold.
    pub diverged_at: Option<usize>,
}

pub const DIVERGENCE_VRMSE: f64 = 1e3;

/// Feeds `step` its own predictions for `targets.len()` steps.
///
/// `history` is `[T, H, W, C]`; each prediction `[H, W, C]` is appended and
/// the oldest frame dropped. Errors after divergence are recorded as NaN.
pub fn autoregressive_rollout<F>(mut step: F, history: &Tensor, targets: &[Tensor]) -> Result<TrajectoryRollout>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    let s = history.shape().to_vec();
    if s.len() != 4 {
        return dim_err(format!("rollout history must be [T, H, W, C], got {:?}", s));
    }
    let mut frames: Vec<Tensor> = (0..s[0]).map(|t| history.index_axis0(t)).collect();
    let mut out = TrajectoryRollout { vrmse: Vec::new(), rel_l2: Vec::new(), diverged_at: None };
    for (i, target) in targets.iter().enumerate() {
        if out.diverged_at.is_some() {
            out.vrmse.push(f64::NAN);
            out.rel_l2.push(f64::NAN);
            continue;
        }
        let h = Tensor::stack(&frames)?;
        let pred = step(&h)?.reshape(target.shape())?;
        let v = if pred.all_finite() { vrmse(&pred, target).unwrap_or(f64::NAN) } else { f64::NAN };
        let r = if pred.all_finite() { relative_l2(&pred, target).unwrap_or(f64::NAN) } else { f64::NAN };
        if !pred.all_finite() || !(v <= DIVERGENCE_VRMSE) {
            out.diverged_at = Some(i + 1);
        }
        out.vrmse.push(v);
        out.rel_l2.push(r);
        frames.remove(0);
        frames.push(pred);
    }
    Ok(out)
}

/// Inclusive 1-based step ranges.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Windows {
    pub ranges: Vec<(String, usize, usize)>,
}

impl Default for Windows {
    fn default() -> Self {
        Windows { ranges: vec![("one_step".into(), 1, 1), ("t1_20".into(), 1, 20), ("t21_60".into(), 21, 60)] }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WindowSummary {
    pub name: String,
    pub median_vrmse: f64,
    pub median_rel_l2: f64,
    /// Trajectories that diverged inside or before the window and were excluded.
    pub diverged: usize,
    pub counted: usize,
}

pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median-over-trajectories summary per window plus error estimates.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutReport {
    pub trajectories: Vec<TrajectoryRollout>,
    pub windows: Vec<WindowSummary>,
    /// Median one-step VRMSE.
    pub eps_hat: f64,
    pub lipschitz_hat: Option<f64>,
}

impl RolloutReport {
    pub fn new(trajectories: Vec<TrajectoryRollout>, windows: &Windows) -> RolloutReport {
        let mut summaries = Vec::new();
        for (name, lo, hi) in &windows.ranges {
            let (mut v, mut r, mut div) = (Vec::new(), Vec::new(), 0);
            for t in &trajectories {
                let hi = (*hi).min(t.vrmse.len());
                if *lo > hi {
                    continue;
                }
                if matches!(t.diverged_at, Some(d) if d <= hi) {
                    div += 1;
                    continue;
                }
                let k = (hi - lo + 1) as f64;
                v.push(t.vrmse[lo - 1..hi].iter().sum::<f64>() / k);
                r.push(t.rel_l2[lo - 1..hi].iter().sum::<f64>() / k);
            }
            let counted = v.len();
            summaries.push(WindowSummary {
                name: name.clone(),
                median_vrmse: median(&mut v),
                median_rel_l2: median(&mut r),
                diverged: div,
                counted,
            });
        }
        let mut first: Vec<f64> = trajectories.iter().filter_map(|t| t.vrmse.first().copied()).filter(|v| v.is_finite()).collect();
        let eps_hat = median(&mut first);
        RolloutReport { trajectories, windows: summaries, eps_hat, lipschitz_hat: None }
    }

    /// Per-step rows followed by one summary row per window.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let e = |e: csv::Error| Error::Format(e.to_string());
        w.write_record(["trajectory_id", "step", "vrmse", "rel_l2", "diverged"]).map_err(e)?;
        for (i, t) in self.trajectories.iter().enumerate() {
            for (s, (v, r)) in t.vrmse.iter().zip(&t.rel_l2).enumerate() {
                let d = matches!(t.diverged_at, Some(k) if k <= s + 1);
                w.write_record([i.to_string(), (s + 1).to_string(), format!("{v:e}"), format!("{r:e}"), d.to_string()])
                    .map_err(e)?;
            }
        }
        for s in &self.windows {
            w.write_record([
                format!("median:{}", s.name),
                format!("{}/{}", s.counted, s.counted + s.diverged),
                format!("{:e}", s.median_vrmse),
                format!("{:e}", s.median_rel_l2),
                s.diverged.to_string(),
            ])
            .map_err(e)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Rolls every trajectory from its first `T` frames using `step` as the
/// one-step map (history `[T, H, W, C]` → next frame), parallel over
/// trajectories, and aggregates per window.
pub fn rollout_report<F>(step: F, trajs: &[crate::synthdata::Trajectory], history: usize, windows: &Windows) -> Result<RolloutReport>
where
    F: Fn(&Tensor) -> Result<Tensor> + Sync,
{
    use rayon::prelude::*;
    let horizon = windows.ranges.iter().map(|r| r.2).max().unwrap_or(1);
    let per = trajs
        .par_iter()
        .map(|t| {
            if t.len() <= history {
                return dim_err(format!("trajectory of {} frames is too short for history {history}", t.len()));
            }
            let n = horizon.min(t.len() - history);
            let h = Tensor::stack(&(0..history).map(|i| t.frame(i)).collect::<Vec<_>>())?;
            let targets: Vec<Tensor> = (history..history + n).map(|i| t.frame(i)).collect();
            autoregressive_rollout(&step, &h, &targets)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RolloutReport::new(per, windows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bound_closed_forms() {
        assert_eq!(error_bound(0.1, 1.0, 10), 1.0);
        assert_eq!(error_bound(1.0, 2.0, 3), 7.0);
        assert_eq!(error_bound(0.3, 1.7, 0), 0.0);
        let n = 25;
        let near = error_bound(0.02, 1.0 + 1e-10, n);
        assert!((near - n as f64 * 0.02).abs() <= 1e-6 * n as f64 * 0.02);
    }

    #[test]
    fn bound_is_monotone() {
        let grid = [0.0, 0.01, 0.1, 0.5];
        let ls = [0.3, 0.9, 1.0, 1.2, 2.0];
        for &e in &grid {
            for &l in &ls {
                for n in 0..30 {
                    assert!(error_bound(e, l, n + 1) >= error_bound(e, l, n));
                    assert!(error_bound(e + 0.01, l, n) >= error_bound(e, l, n));
                }
            }
        }
        for w in ls.windows(2) {
            for n in 0..30 {
                assert!(error_bound(0.1, w[1], n) >= error_bound(0.1, w[0], n) * (1.0 - 1e-12));
            }
        }
    }

    #[test]
    fn lipschitz_of_linear_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probes: Vec<Tensor> = (0..4).map(|_| Tensor::randn(&[6], 1.0, &mut rng)).collect();
        let id = estimate_lipschitz(|x| Ok(x.clone()), &probes, 0.1, 5, &mut rng).unwrap();
        assert!((id - 1.0).abs() < 1e-10);
        let two = estimate_lipschitz(|x| Ok(x.scale(2.0)), &probes, 0.1, 5, &mut rng).unwrap();
        assert!((two - 2.0).abs() < 1e-10);
    }

    #[test]
    fn lipschitz_of_ball_projection_outside() {
        let proj = |x: &Tensor| -> Result<Tensor> {
            let n = x.norm();
            Ok(if n > 1.0 { x.scale(1.0 / n) } else { x.clone() })
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let probes: Vec<Tensor> = (0..8).map(|_| Tensor::randn(&[4], 1.0, &mut rng)).map(|x| x.scale(3.0 / x.norm())).collect();
        assert!(estimate_lipschitz(proj, &probes, 0.5, 10, &mut rng).unwrap() <= 1.0);
    }

    #[test]
    fn contractive_pair_stays_below_limit() {
        let pair = SyntheticPair::new(0.01, 0.5, PairKind::Rotation, 8).unwrap();
        let r = bound_verification(&pair, &[0.4; 8], 50, 1e-9).unwrap();
        assert!(r.passed());
        assert!(r.errors.iter().all(|&e| e <= 2.0 * 0.01 + 1e-12));
    }

    #[test]
    fn exact_surrogate_has_zero_error() {
        let pair = SyntheticPair::new(0.0, 1.5, PairKind::Tanh, 4).unwrap();
        let r = bound_verification(&pair, &[0.1, -0.2, 0.3, 0.7], 20, 0.0).unwrap();
        assert!(r.errors.iter().all(|&e| e == 0.0));
    }

    #[test]
    fn aligned_pair_attains_bound() {
        let pair = SyntheticPair::new(0.01, 0.8, PairKind::Aligned, 4).unwrap();
        let r = bound_verification(&pair, &[1.0; 4], 30, 1e-12).unwrap();
        assert!(r.passed());
        assert!((r.errors[30] - r.bounds[30]).abs() < 1e-12);
    }

    #[test]
    fn oracle_and_identity_rollouts() {
        let targets: Vec<Tensor> = (1..=5).map(|n| Tensor::from_fn(&[4, 4, 1], |i| i as f64 + n as f64)).collect();
        let h = Tensor::from_fn(&[1, 4, 4, 1], |i| i as f64);
        let mut k = 0;
        let oracle = autoregressive_rollout(
            |_| {
                k += 1;
                Ok(targets[k - 1].clone())
            },
            &h,
            &targets,
        )
        .unwrap();
        assert!(oracle.vrmse.iter().all(|&v| v == 0.0));

        let stat = vec![h.index_axis0(0); 5];
        let id = autoregressive_rollout(|x| Ok(x.index_axis0(x.shape()[0] - 1)), &h, &stat).unwrap();
        assert!(id.rel_l2.iter().all(|&v| v == 0.0));

        // drifting target u_n = u_0 + n·δ: identity error grows linearly
        let drift: Vec<Tensor> = (1..=5).map(|n| h.index_axis0(0).map(|v| v + 0.5 * n as f64)).collect();
        let r = autoregressive_rollout(|x| Ok(x.index_axis0(x.shape()[0] - 1)), &h, &drift).unwrap();
        let norm0 = h.norm();
        let errs: Vec<f64> = r.rel_l2.iter().zip(&drift).map(|(e, t)| e * t.norm()).collect();
        for (n, e) in errs.iter().enumerate() {
            assert!((e - 0.5 * (n + 1) as f64 * 4.0).abs() < 1e-9, "{n}: {e} (norm {norm0})");
        }
    }

    #[test]
    fn window_median_fixture() {
        let t = |v: [f64; 3], d: Option<usize>| TrajectoryRollout { vrmse: v.to_vec(), rel_l2: v.to_vec(), diverged_at: d };
        let trajs = vec![t([1.0, 2.0, 3.0], None), t([3.0, 5.0, 7.0], None), t([2.0, 2.0, 2.0], None)];
        let w = Windows { ranges: vec![("a".into(), 1, 1), ("b".into(), 2, 3)] };
        let r = RolloutReport::new(trajs, &w);
        // window a: {1,3,2} → 2; window b: means {2.5, 6, 2} → 2.5
        assert_eq!(r.windows[0].median_vrmse, 2.0);
        assert_eq!(r.windows[1].median_vrmse, 2.5);
        assert_eq!(r.eps_hat, 2.0);

        let trajs = vec![t([1.0, 2.0, 3.0], None), t([3.0, f64::NAN, f64::NAN], Some(2))];
        let r = RolloutReport::new(trajs, &w);
        assert_eq!(r.windows[1].diverged, 1);
        assert_eq!(r.windows[1].median_vrmse, 2.5);
        assert_eq!(r.windows[0].counted, 2);
    }

    #[test]
    fn oracle_report_is_all_zero() {
        use crate::synthdata::{generate_all, oracle_step, System, TrajectorySpec};
        let specs: Vec<_> = (0..3).map(|i| TrajectorySpec::new(System::Heat2d, 8, 10, i)).collect();
        let trajs = generate_all(&specs).unwrap();
        let spec = specs[0].clone();
        let r = rollout_report(|h| oracle_step(&spec, &h.index_axis0(h.shape()[0] - 1)), &trajs, 2, &Windows::default()).unwrap();
        assert!(r.trajectories.iter().all(|t| t.vrmse.len() == 8 && t.vrmse.iter().all(|&v| v == 0.0)));
        assert_eq!(r.windows[2].counted, 0);
        assert_eq!(r.eps_hat, 0.0);
    }

    #[test]
    fn divergence_is_flagged() {
        let h = Tensor::from_fn(&[1, 2, 2, 1], |i| i as f64);
        let targets = vec![h.index_axis0(0); 3];
        let r = autoregressive_rollout(|_| Ok(Tensor::full(&[2, 2, 1], f64::NAN)), &h, &targets).unwrap();
        assert_eq!(r.diverged_at, Some(1));
    }
}
