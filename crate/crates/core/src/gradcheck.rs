//! Central finite-difference checks for tape gradients.
//!
//! The relative error of one input is `‖g_tape − g_fd‖₂ / max(‖g_tape‖₂, ‖g_fd‖₂, 1e-10)`
//! over the checked entries.

use crate::error::Result;
use crate::tensor::{Bound, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub step: f64,
    /// Check at most this many entries per input (evenly strided); `None` checks all.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig { step: 1e-5, max_entries: None }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub rel_errors: Vec<f64>,
    pub checked_entries: usize,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

fn eval(inputs: &[Tensor], f: &impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares the tape gradient of the scalar `f(inputs)` against central differences.
pub fn check_gradients(
    inputs: &[Tensor],
    cfg: GradCheckConfig,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();

    let mut rel_errors = Vec::with_capacity(inputs.len());
    let mut checked = 0;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = match cfg.max_entries {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for i in (0..n).step_by(stride) {
            let orig = input.data()[i];
            work[k].data_mut()[i] = orig + cfg.step;
            let fp = eval(&work, &f)?;
            work[k].data_mut()[i] = orig - cfg.step;
            let fm = eval(&work, &f)?;
            work[k].data_mut()[i] = orig;
            let fd = (fp - fm) / (2.0 * cfg.step);
            let an = analytic[k].data()[i];
            diff2 += (fd - an) * (fd - an);
            a2 += an * an;
            n2 += fd * fd;
            checked += 1;
        }
        let denom = a2.sqrt().max(n2.sqrt()).max(1e-10);
        rel_errors.push(diff2.sqrt() / denom);
    }
    Ok(GradCheckReport { rel_errors, checked_entries: checked })
}

/// Like [`check_gradients`], also differentiating every parameter of `store`.
/// Report entries come parameters first (store order), then `inputs`.
pub fn check_param_gradients(
    store: &ParamStore,
    inputs: &[Tensor],
    cfg: GradCheckConfig,
    f: impl Fn(&mut Tape, &Bound, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let np = store.len();
    let all: Vec<Tensor> = store.values().iter().chain(inputs).cloned().collect();
    check_gradients(&all, cfg, |tape, vars| {
        let bound = Bound::from_vars(vars[..np].to_vec());
        f(tape, &bound, &vars[np..])
    })
}
