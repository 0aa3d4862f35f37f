//! Optimizer, schedule, EMA, the teacher-forced pretraining loop and the
//! rollout finetuning strategies.
//!
//! All randomness is drawn from [`stream_rng`], keyed by `(seed, stream, step)`,
//! so a run resumed from a checkpoint at step `k` draws exactly the batches
//! and coin flips the uninterrupted run would have drawn.

pub mod checkpoint;
mod finetune;
mod optim;
mod schedule;

use std::io::Write;
use std::sync::mpsc::sync_channel;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Surrogate, WaveLiT, WaveLiTConfig};
use crate::objectives::{combined_loss, relative_l2, vrmse, wavelet_l1, LossWeights};
use crate::rollout::median;
use crate::sampling::next_dataset;
use crate::synthdata::{window_batch, Trajectory};
use crate::tensor::{ParamStore, Tape, Tensor};

pub use finetune::{causal_weights, rollout_finetune, teacher_forcing_prob, unroll_loss, FinetuneConfig, Strategy, Unroll};
pub use optim::{clip_global_norm, ema_update, AdamWConfig, OptimizerState};
pub use schedule::{lr_at, ScheduleConfig};

/// Named random sub-streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Data = 1,
    Init = 2,
    Sampling = 3,
    TeacherForcing = 4,
    Eval = 5,
}

/// Independent generator for `(seed, stream, step)`.
pub fn stream_rng(seed: u64, stream: Stream, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(((stream as u64) << 56) ^ step);
    r
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ParamStore,
    pub ema: ParamStore,
    pub opt: OptimizerState,
    /// Completed optimizer steps over pretraining and finetuning.
    pub step: u64,
}

impl TrainState {
    pub fn new(params: ParamStore, adamw: AdamWConfig) -> TrainState {
        let opt = OptimizerState::new(&params, adamw);
        TrainState { ema: params.clone(), params, opt, step: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schedule: ScheduleConfig,
    pub adamw: AdamWConfig,
    /// Total pretraining steps; finetuning steps are counted after these.
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    pub loss: LossWeights,
    /// Evaluate every this many steps (0 disables).
    pub eval_every: u64,
    pub eval_samples: usize,
    /// Call the checkpoint hook every this many steps (0 only at the end).
    pub checkpoint_every: u64,
    /// Batches prepared ahead of the optimizer.
    pub prefetch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: ScheduleConfig::default(),
            adamw: AdamWConfig::default(),
            steps: 5000,
            batch_size: 4,
            seed: 0,
            clip_norm: 1.0,
            ema_decay: 0.999,
            loss: LossWeights::default(),
            eval_every: 500,
            eval_samples: 64,
            checkpoint_every: 1000,
            prefetch: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be positive, got {}", self.clip_norm)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must be in [0, 1), got {}", self.ema_decay)));
        }
        Ok(())
    }
}

/// Fresh model and training state with weights drawn from the init stream.
pub fn init_model(cfg: &WaveLiTConfig, seed: u64, adamw: AdamWConfig) -> Result<(WaveLiT, TrainState)> {
    let mut store = ParamStore::new();
    let mut rng = stream_rng(seed, Stream::Init, 0);
    let model = WaveLiT::init(&mut store, cfg, &mut rng)?;
    Ok((model, TrainState::new(store, adamw)))
}

/// Training trajectories grouped by dataset with draw probabilities.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub sets: Vec<Vec<Trajectory>>,
    pub weights: Vec<f64>,
}

impl Corpus {
    pub fn single(trajs: Vec<Trajectory>) -> Corpus {
        Corpus { sets: vec![trajs], weights: vec![1.0] }
    }

    fn validate(&self, history: usize, extra: usize) -> Result<()> {
        if self.sets.len() != self.weights.len() || self.sets.is_empty() {
            return Err(Error::Config("corpus needs one weight per non-empty dataset list".into()));
        }
        for (d, set) in self.sets.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Config(format!("dataset {d} has no trajectories")));
            }
            if let Some(t) = set.iter().find(|t| t.len() < history + extra) {
                return Err(Error::Config(format!(
                    "dataset {d} has a trajectory of {} frames; history {history} plus {extra} target frames needed",
                    t.len()
                )));
            }
        }
        Ok(())
    }

    /// `(trajectory, start)` picks such that `start + span ≤ len`.
    fn draw(&self, dataset: usize, span: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
        let set = &self.sets[dataset];
        (0..n)
            .map(|_| {
                let t = rng.random_range(0..set.len());
                (t, rng.random_range(0..=set[t].len() - span))
            })
            .collect()
    }
}

/// One row of the metrics CSV. Missing values are written as empty cells.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub split: &'static str,
    pub loss_mse: Option<f64>,
    pub loss_wavelet: Option<f64>,
    pub lr: Option<f64>,
    pub grad_norm: Option<f64>,
    pub vrmse_median: Option<f64>,
    pub rel_l2: Option<f64>,
}

impl MetricsRow {
    fn train(step: u64, split: &'static str, mse: f64, wav: f64, lr: f64, grad_norm: f64) -> MetricsRow {
        MetricsRow {
            step,
            split,
            loss_mse: Some(mse),
            loss_wavelet: Some(wav),
            lr: Some(lr),
            grad_norm: Some(grad_norm),
            vrmse_median: None,
            rel_l2: None,
        }
    }
}

pub const METRICS_HEADER: [&str; 8] = ["step", "split", "loss_mse", "loss_wavelet", "lr", "grad_norm", "vrmse_median", "rel_l2"];

pub fn write_metrics<W: Write>(rows: &[MetricsRow], header: bool, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let e = |e: csv::Error| Error::Format(e.to_string());
    if header {
        w.write_record(METRICS_HEADER).map_err(e)?;
    }
    let f = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.step.to_string(),
            r.split.to_string(),
            f(r.loss_mse),
            f(r.loss_wavelet),
            f(r.lr),
            f(r.grad_norm),
            f(r.vrmse_median),
            f(r.rel_l2),
        ])
        .map_err(e)?;
    }
    w.flush()?;
    Ok(())
}

/// Outcome of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub loss: f64,
    pub mse: f64,
    pub wavelet: f64,
    pub grad_norm: f64,
    pub clipped: bool,
    pub lr: f64,
}

/// Clip, update, EMA, advance. Leaves the state untouched on error.
fn apply_gradients(state: &mut TrainState, mut grads: Vec<Tensor>, cfg: &TrainConfig) -> Result<(f64, bool, f64)> {
    let lr = lr_at(state.step, &cfg.schedule);
    let grad_norm = clip_global_norm(&mut grads, cfg.clip_norm);
    state.opt.update(&mut state.params, &grads, lr)?;
    ema_update(&mut state.ema, &state.params, cfg.ema_decay)?;
    state.step += 1;
    Ok((grad_norm, grad_norm > cfg.clip_norm, lr))
}

/// One teacher-forced step on `x: [B, T, H, W, C] → y: [B, 1, H, W, C]`.
pub fn train_step<M: Surrogate>(
    model: &M,
    state: &mut TrainState,
    x: &Tensor,
    y: &Tensor,
    dataset: usize,
    cfg: &TrainConfig,
) -> Result<StepStats> {
    let bank = model.config().wavelet.bank();
    let mut tape = Tape::new();
    let bound = tape.bind(&state.params);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let pred = model.forward(&mut tape, &bound, xv, dataset)?;
    let terms = combined_loss(&mut tape, pred, yv, &bank, &cfg.loss)?;
    let loss = tape.value(terms.total).item();
    if !loss.is_finite() {
        return Err(Error::Divergence(format!("training loss at step {}", state.step)));
    }
    tape.backward(terms.total)?;
    let grads = tape.param_grads(&bound);
    let (mse, wavelet) = (tape.value(terms.mse).item(), tape.value(terms.wavelet).item());
    let (grad_norm, clipped, lr) = apply_gradients(state, grads, cfg)?;
    Ok(StepStats { loss, mse, wavelet, grad_norm, clipped, lr })
}

/// Fixed evaluation windows and their metrics.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub trajs: Vec<Trajectory>,
    pub picks: Vec<(usize, usize)>,
    pub dataset: usize,
}

impl EvalSet {
    /// `n` windows drawn once from the eval stream (independent of the training step).
    pub fn sample(trajs: Vec<Trajectory>, history: usize, n: usize, seed: u64) -> Result<EvalSet> {
        let c = Corpus::single(trajs);
        c.validate(history, 1)?;
        let mut rng = stream_rng(seed, Stream::Eval, 0);
        let picks = c.draw(0, history + 1, n, &mut rng);
        Ok(EvalSet { trajs: c.sets.into_iter().next().unwrap(), picks, dataset: 0 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss_mse: f64,
    pub loss_wavelet: f64,
    pub vrmse_median: f64,
    /// Mean one-step relative L2 over windows.
    pub rel_l2: f64,
    /// Mean wavelet-domain L1 over windows.
    pub wavelet_l1: f64,
}

/// One-step metrics of `params` on every eval window, parallel over windows.
pub fn evaluate<M: Surrogate + Sync>(model: &M, params: &ParamStore, eval: &EvalSet) -> Result<EvalMetrics> {
    let cfg = model.config();
    let bank = cfg.wavelet.bank();
    let per: Vec<[f64; 5]> = eval
        .picks
        .par_iter()
        .map(|&p| -> Result<[f64; 5]> {
            let (x, y) = window_batch(&eval.trajs, &[p], cfg.history)?;
            let mut tape = Tape::new();
            let b = tape.bind_frozen(params);
            let xv = tape.constant(x);
            let pred = model.forward(&mut tape, &b, xv, eval.dataset)?;
            let pred = tape.value(pred);
            let mse = pred.sub(&y)?.data().iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
            let wl = wavelet_l1(pred, &y, &bank, 1)?;
            let v = vrmse(pred, &y).unwrap_or(f64::NAN);
            Ok([mse, wl, v, relative_l2(pred, &y)?, wl])
        })
        .collect::<Result<_>>()?;
    let n = per.len().max(1) as f64;
    let mean = |i: usize| per.iter().map(|r| r[i]).sum::<f64>() / n;
    let mut v: Vec<f64> = per.iter().map(|r| r[2]).collect();
    Ok(EvalMetrics { loss_mse: mean(0), loss_wavelet: mean(1), vrmse_median: median(&mut v), rel_l2: mean(3), wavelet_l1: mean(4) })
}

fn eval_row(step: u64, m: &EvalMetrics) -> MetricsRow {
    MetricsRow {
        step,
        split: "eval",
        loss_mse: Some(m.loss_mse),
        loss_wavelet: Some(m.loss_wavelet),
        lr: None,
        grad_norm: None,
        vrmse_median: Some(m.vrmse_median),
        rel_l2: Some(m.rel_l2),
    }
}

/// Called with the state and the rows produced since the previous call.
pub type Hook<'a> = dyn FnMut(&TrainState, &[MetricsRow]) -> Result<()> + 'a;

/// Teacher-forced pretraining from `state.step` up to `cfg.steps`.
///
/// Batches for step `s` come from `stream_rng(seed, Data, s)` and are built on
/// a producer thread at most `cfg.prefetch` steps ahead. On a non-finite loss
/// or gradient the error is returned and `state` is left at the last good step.
pub fn pretrain<M: Surrogate + Sync>(
    model: &M,
    state: &mut TrainState,
    corpus: &Corpus,
    eval: Option<&EvalSet>,
    cfg: &TrainConfig,
    hook: &mut Hook<'_>,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let history = model.config().history;
    corpus.validate(history, 1)?;
    let (start, end) = (state.step, cfg.steps);
    let mut rows = Vec::new();
    let mut pending = 0;
    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel(cfg.prefetch.max(1));
        scope.spawn(move || {
            for s in start..end {
                let mut rng = stream_rng(cfg.seed, Stream::Data, s);
                let batch = next_dataset(&corpus.weights, &mut rng).and_then(|d| {
                    let picks = corpus.draw(d, history + 1, cfg.batch_size, &mut rng);
                    window_batch(&corpus.sets[d], &picks, history).map(|(x, y)| (d, x, y))
                });
                if tx.send(batch).is_err() {
                    return;
                }
            }
        });
        for batch in rx {
            let (d, x, y) = batch?;
            let st = train_step(model, state, &x, &y, d, cfg)?;
            rows.push(MetricsRow::train(state.step, "train", st.mse, st.wavelet, st.lr, st.grad_norm));
            if let Some(ev) = eval {
                if cfg.eval_every > 0 && (state.step % cfg.eval_every == 0 || state.step == end) {
                    rows.push(eval_row(state.step, &evaluate(model, &state.ema, ev)?));
                }
            }
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                hook(state, &rows[pending..])?;
                pending = rows.len();
            }
        }
        Ok(())
    })?;
    hook(state, &rows[pending..])?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{WaveLiT, WaveLiTConfig};
    use crate::synthdata::{generate_all, System, TrajectorySpec};

    fn tiny() -> WaveLiTConfig {
        let mut c = WaveLiTConfig::preset("wavelit-tiny").unwrap();
        c.grid = [8, 8];
        c.embed_dim = 8;
        c.depth = 1;
        c
    }

    fn setup(seed: u64) -> (WaveLiT, TrainState, Corpus) {
        let cfg = tiny();
        let mut store = ParamStore::new();
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let m = WaveLiT::init(&mut store, &cfg, &mut rng).unwrap();
        let specs: Vec<_> = (0..3).map(|i| TrajectorySpec::new(System::Heat2d, 8, 6, i)).collect();
        (m, TrainState::new(store, AdamWConfig::default()), Corpus::single(generate_all(&specs).unwrap()))
    }

    fn quick(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            schedule: ScheduleConfig { warmup_steps: 5, ..Default::default() },
            eval_every: 0,
            checkpoint_every: 0,
            ..Default::default()
        }
    }

    fn losses(rows: &[MetricsRow]) -> Vec<u64> {
        rows.iter().filter(|r| r.split == "train").map(|r| r.loss_mse.unwrap().to_bits()).collect()
    }

    #[test]
    fn streams_are_distinct_and_repeatable() {
        let a: u64 = stream_rng(1, Stream::Data, 5).random();
        assert_eq!(a, stream_rng(1, Stream::Data, 5).random::<u64>());
        assert_ne!(a, stream_rng(1, Stream::Data, 6).random::<u64>());
        assert_ne!(a, stream_rng(1, Stream::Eval, 5).random::<u64>());
        assert_ne!(a, stream_rng(2, Stream::Data, 5).random::<u64>());
    }

    #[test]
    fn same_seed_same_losses() {
        let (m, mut s1, c) = setup(0);
        let (_, mut s2, _) = setup(0);
        let r1 = pretrain(&m, &mut s1, &c, None, &quick(6), &mut |_, _| Ok(())).unwrap();
        let r2 = pretrain(&m, &mut s2, &c, None, &quick(6), &mut |_, _| Ok(())).unwrap();
        assert_eq!(losses(&r1), losses(&r2));
        assert_eq!(s1, s2);
    }

    #[test]
    fn split_run_matches_uninterrupted() {
        let (m, mut full, c) = setup(1);
        let r_full = pretrain(&m, &mut full, &c, None, &quick(6), &mut |_, _| Ok(())).unwrap();
        let (_, mut part, _) = setup(1);
        let mut r = pretrain(&m, &mut part, &c, None, &quick(3), &mut |_, _| Ok(())).unwrap();
        let mut buf = Vec::new();
        checkpoint::save(&part, "", &mut buf).unwrap();
        let (mut resumed, _) = checkpoint::load(buf.as_slice(), AdamWConfig::default()).unwrap();
        r.extend(pretrain(&m, &mut resumed, &c, None, &quick(6), &mut |_, _| Ok(())).unwrap());
        assert_eq!(losses(&r), losses(&r_full));
        assert_eq!(resumed, full);
    }

    #[test]
    fn hook_sees_every_row_once() {
        let (m, mut s, c) = setup(2);
        let cfg = TrainConfig { checkpoint_every: 2, ..quick(5) };
        let mut seen = Vec::new();
        let rows = pretrain(&m, &mut s, &c, None, &cfg, &mut |st, r| {
            seen.push((st.step, r.len()));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![(2, 2), (4, 2), (5, 1)]);
        assert_eq!(rows.len(), 5);
    }

    #[test]
    fn eval_rows_and_metrics_csv() {
        let (m, mut s, c) = setup(3);
        let ev = EvalSet::sample(c.sets[0].clone(), 1, 4, 0).unwrap();
        let cfg = TrainConfig { eval_every: 2, ..quick(4) };
        let rows = pretrain(&m, &mut s, &c, Some(&ev), &cfg, &mut |_, _| Ok(())).unwrap();
        assert_eq!(rows.iter().filter(|r| r.split == "eval").count(), 2);
        let mut out = Vec::new();
        write_metrics(&rows, true, &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("step,split,loss_mse,loss_wavelet,lr,grad_norm,vrmse_median,rel_l2\n"));
        assert_eq!(text.lines().count(), 1 + rows.len());
    }

    #[test]
    fn zero_head_model_predicts_zero() {
        let (m, s, c) = setup(4);
        let ev = EvalSet::sample(c.sets[0].clone(), 1, 3, 0).unwrap();
        let e = evaluate(&m, &s.params, &ev).unwrap();
        assert!((e.rel_l2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn short_trajectories_are_rejected() {
        let (m, mut s, mut c) = setup(5);
        c.sets[0][0].frames = c.sets[0][0].frames.index_axis0(0).reshape(&[1, 8, 8, 1]).unwrap();
        let err = pretrain(&m, &mut s, &c, None, &quick(2), &mut |_, _| Ok(())).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
