use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Surrogate;
use crate::objectives::{combined_loss, LossWeights};
use crate::sampling::next_dataset;
use crate::synthdata::window_batch;
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

use super::{apply_gradients, stream_rng, Corpus, EvalSet, Hook, MetricsRow, Stream, TrainConfig, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Per-sample coin flips between ground truth and prediction, annealed.
    ScheduledSampling,
    /// Fully autoregressive, summed losses, full backpropagation.
    Bptt,
    /// Autoregressive with loss weights `exp(−ε Σ_{k<i} L_k)`, losses detached.
    CausalBptt,
    /// Intermediate states detached; only the final step is differentiated.
    Pushforward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub strategy: Strategy,
    pub unroll: usize,
    pub epsilon: f64,
    pub tf_start: f64,
    pub tf_end: f64,
    /// Finetuning steps, counted after the pretraining steps.
    pub steps: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig { strategy: Strategy::ScheduledSampling, unroll: 8, epsilon: 1.0, tf_start: 1.0, tf_end: 0.1, steps: 500 }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unroll == 0 {
            return Err(Error::Config("unroll K must be at least 1".into()));
        }
        if !(self.epsilon >= 0.0) {
            return Err(Error::Config(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        for p in [self.tf_start, self.tf_end] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("teacher-forcing probabilities must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

/// Teacher-forcing probability at finetuning step `step` of `total`:
/// `tf_start` at the first step, `tf_end` at the last, linear between.
pub fn teacher_forcing_prob(step: u64, total: u64, cfg: &FinetuneConfig) -> f64 {
    if total <= 1 {
        return cfg.tf_start;
    }
    let f = (step.min(total - 1)) as f64 / (total - 1) as f64;
    cfg.tf_start * (1.0 - f) + cfg.tf_end * f
}

/// `w_i = exp(−ε Σ_{k<i} L_k)`, evaluated as the running product of
/// `exp(−ε L_k)` so that equal losses give exact powers.
pub fn causal_weights(losses: &[f64], epsilon: f64) -> Vec<f64> {
    let mut w = Vec::with_capacity(losses.len());
    let mut acc = 1.0;
    for l in losses {
        w.push(acc);
        acc *= (-epsilon * l).exp();
    }
    w
}

/// Result of unrolling `K` steps on a tape.
pub struct Unroll {
    pub loss: Var,
    pub bound: Bound,
    /// Per-step total, MSE and wavelet terms.
    pub step_losses: Vec<f64>,
    pub step_mse: Vec<f64>,
    pub step_wavelet: Vec<f64>,
    /// Weight applied to each step's loss in `loss`.
    pub weights: Vec<f64>,
}

fn shift_in(tape: &mut Tape, h: Var, next: Var) -> Result<Var> {
    let t = tape.shape(h)[1];
    if t == 1 {
        return Ok(next);
    }
    let keep = tape.slice(h, 1, 1, t - 1)?;
    tape.concat(&[keep, next], 1)
}

/// Unrolls `targets.len()` steps from `history: [B, T, H, W, C]`; `targets[i]` is
/// `[B, 1, H, W, C]`. `tf_mask[i][b]` selects ground truth as input to step
/// `i + 1` for sample `b` (scheduled sampling only). Binds `params` on `tape`.
#[allow(clippy::too_many_arguments)]
pub fn unroll_loss<M: Surrogate>(
    model: &M,
    params: &ParamStore,
    tape: &mut Tape,
    history: &Tensor,
    targets: &[Tensor],
    dataset: usize,
    ft: &FinetuneConfig,
    tf_mask: &[Vec<bool>],
    weights: &LossWeights,
) -> Result<Unroll> {
    let k = targets.len();
    if k == 0 {
        return Err(Error::Config("unroll needs at least one target".into()));
    }
    let bank = model.config().wavelet.bank();
    let (mut totals, mut mses, mut wavs) = (Vec::with_capacity(k), Vec::with_capacity(k), Vec::with_capacity(k));

    if ft.strategy == Strategy::Pushforward {
        // intermediate steps on throwaway tapes, so the kept graph is one step long
        let mut h = history.clone();
        for target in &targets[..k - 1] {
            let mut scratch = Tape::new();
            let sb = scratch.bind_frozen(params);
            let hv = scratch.constant(h.clone());
            let pred = model.forward(&mut scratch, &sb, hv, dataset)?;
            let tv = scratch.constant(target.clone());
            let terms = combined_loss(&mut scratch, pred, tv, &bank, weights)?;
            totals.push(scratch.value(terms.total).item());
            mses.push(scratch.value(terms.mse).item());
            wavs.push(scratch.value(terms.wavelet).item());
            let next = shift_in(&mut scratch, hv, pred)?;
            h = scratch.value(next).clone();
        }
        let bound = tape.bind(params);
        let hv = tape.constant(h);
        let pred = model.forward(tape, &bound, hv, dataset)?;
        let tv = tape.constant(targets[k - 1].clone());
        let terms = combined_loss(tape, pred, tv, &bank, weights)?;
        totals.push(tape.value(terms.total).item());
        mses.push(tape.value(terms.mse).item());
        wavs.push(tape.value(terms.wavelet).item());
        let mut w = vec![0.0; k];
        w[k - 1] = 1.0;
        return Ok(Unroll { loss: terms.total, bound, step_losses: totals, step_mse: mses, step_wavelet: wavs, weights: w });
    }

    let bound = tape.bind(params);
    let mut h = tape.constant(history.clone());
    let mut step_vars = Vec::with_capacity(k);
    for (i, target) in targets.iter().enumerate() {
        let pred = model.forward(tape, &bound, h, dataset)?;
        let tv = tape.constant(target.clone());
        let terms = combined_loss(tape, pred, tv, &bank, weights)?;
        totals.push(tape.value(terms.total).item());
        mses.push(tape.value(terms.mse).item());
        wavs.push(tape.value(terms.wavelet).item());
        step_vars.push(terms.total);
        if i + 1 < k {
            let next = match ft.strategy {
                Strategy::ScheduledSampling => {
                    let mask = tf_mask.get(i).ok_or_else(|| Error::Config(format!("no teacher-forcing mask for step {i}")))?;
                    tape.select_batch(mask, tv, pred)?
                }
                _ => pred,
            };
            h = shift_in(tape, h, next)?;
        }
    }
    let (loss, w) = match ft.strategy {
        Strategy::CausalBptt => {
            let w = causal_weights(&totals, ft.epsilon);
            let mut acc = tape.scale(step_vars[0], w[0]);
            for (&l, &wi) in step_vars[1..].iter().zip(&w[1..]) {
                let term = tape.scale(l, wi);
                acc = tape.add(acc, term)?;
            }
            (acc, w)
        }
        _ => {
            let mut acc = step_vars[0];
            for &l in &step_vars[1..] {
                acc = tape.add(acc, l)?;
            }
            (acc, vec![1.0; k])
        }
    };
    Ok(Unroll { loss, bound, step_losses: totals, step_mse: mses, step_wavelet: wavs, weights: w })
}

/// Rollout finetuning for global steps `train.steps .. train.steps + ft.steps`,
/// resuming from `state.step`.
pub fn rollout_finetune<M: Surrogate + Sync>(
    model: &M,
    state: &mut TrainState,
    corpus: &Corpus,
    eval: Option<&EvalSet>,
    train: &TrainConfig,
    ft: &FinetuneConfig,
    hook: &mut Hook<'_>,
) -> Result<Vec<MetricsRow>> {
    train.validate()?;
    ft.validate()?;
    let history = model.config().history;
    corpus.validate(history, ft.unroll)?;
    let base = train.steps;
    if state.step < base {
        return Err(Error::Config(format!(
            "finetuning starts after {base} pretraining steps but the state is at step {}",
            state.step
        )));
    }
    let end = base + ft.steps;
    let mut rows = Vec::new();
    let mut pending = 0;
    while state.step < end {
        let step = state.step;
        let mut rng = stream_rng(train.seed, Stream::Data, step);
        let d = next_dataset(&corpus.weights, &mut rng)?;
        let picks = corpus.draw(d, history + ft.unroll, train.batch_size, &mut rng);
        let set = &corpus.sets[d];
        let (x, _) = window_batch(set, &picks, history)?;
        let targets = (0..ft.unroll)
            .map(|i| {
                let shifted: Vec<_> = picks.iter().map(|&(t, s)| (t, s + i)).collect();
                window_batch(set, &shifted, history).map(|(_, y)| y)
            })
            .collect::<Result<Vec<_>>>()?;
        let p = teacher_forcing_prob(step - base, ft.steps, ft);
        let mut tf = stream_rng(train.seed, Stream::TeacherForcing, step);
        let mask: Vec<Vec<bool>> =
            (1..ft.unroll).map(|_| (0..train.batch_size).map(|_| tf.random::<f64>() < p).collect()).collect();

        let mut tape = Tape::new();
        let u = unroll_loss(model, &state.params, &mut tape, &x, &targets, d, ft, &mask, &train.loss)?;
        if !tape.value(u.loss).item().is_finite() {
            return Err(Error::Divergence(format!("finetuning loss at step {step}")));
        }
        tape.backward(u.loss)?;
        let grads = tape.param_grads(&u.bound);
        let (grad_norm, _, lr) = apply_gradients(state, grads, train)?;
        let k = ft.unroll as f64;
        rows.push(MetricsRow::train(
            state.step,
            "finetune",
            u.step_mse.iter().sum::<f64>() / k,
            u.step_wavelet.iter().sum::<f64>() / k,
            lr,
            grad_norm,
        ));
        if let Some(ev) = eval {
            if train.eval_every > 0 && (state.step % train.eval_every == 0 || state.step == end) {
                rows.push(super::eval_row(state.step, &super::evaluate(model, &state.ema, ev)?));
            }
        }
        if train.checkpoint_every > 0 && state.step % train.checkpoint_every == 0 {
            hook(state, &rows[pending..])?;
            pending = rows.len();
        }
    }
    hook(state, &rows[pending..])?;
    Ok(rows)
}
