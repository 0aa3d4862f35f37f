//! Desk-scale ablation sweeps: wavelet family, loss weighting, pyramid depth
//! and the named mixer configurations. Each variant trains from scratch on
//! the same data and is scored on the same eval windows.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mixer::{MixerConfig, ABLATION_ROWS};
use crate::model::param_count;
use crate::objectives::LossWeights;
use crate::training::{evaluate, init_model, pretrain, Corpus, EvalSet};
use crate::wavelet::WaveletName;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Wavelet,
    Loss,
    Fpn,
    Mixer,
}

impl Axis {
    pub const ALL: [Axis; 4] = [Axis::Wavelet, Axis::Loss, Axis::Fpn, Axis::Mixer];
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Axis::Wavelet => "wavelet",
            Axis::Loss => "loss",
            Axis::Fpn => "fpn",
            Axis::Mixer => "mixer",
        })
    }
}

impl FromStr for Axis {
    type Err = Error;
    fn from_str(s: &str) -> Result<Axis> {
        Axis::ALL
            .into_iter()
            .find(|a| a.to_string() == s)
            .ok_or_else(|| Error::Usage(format!("unknown ablation axis '{s}'; supported: wavelet, loss, fpn, mixer")))
    }
}

#[derive(Clone, Debug)]
pub struct Variant {
    pub name: String,
    pub config: RunConfig,
}

/// The configurations swept along `axis`, each a modified copy of `base`.
pub fn variants(base: &RunConfig, axis: Axis) -> Result<Vec<Variant>> {
    let with = |name: String, f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        Variant { name, config: c }
    };
    let out = match axis {
        Axis::Wavelet => WaveletName::ALL.iter().map(|&w| with(w.to_string(), &|c| c.model.wavelet = w)).collect(),
        Axis::Loss => [(1.0, 0.0), (0.0, 1.0), (1.0, 1.0)]
            .iter()
            .map(|&(m, l)| {
                with(format!("mse{m}_l1{l}"), &|c| c.train.loss = LossWeights { lambda_mse: m, lambda_l1: l, ..c.train.loss })
            })
            .collect(),
        Axis::Fpn => {
            let (h, w) = base.model.token_grid();
            (0..=2usize)
                .filter(|l| h % (1 << l) == 0 && w % (1 << l) == 0)
                .map(|l| with(format!("fpn{l}"), &|c| c.model.fpn_levels = l))
                .collect()
        }
        Axis::Mixer => ABLATION_ROWS
            .iter()
            .map(|row| -> Result<Variant> {
                let m = MixerConfig::ablation(row, base.model.embed_dim)?;
                Ok(with(row.to_string(), &|c| c.model.mixer = m.clone()))
            })
            .collect::<Result<Vec<_>>>()?,
    };
    for v in &out {
        v.config.validate()?;
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub params: usize,
    pub steps: u64,
    pub final_train_loss: f64,
    pub rel_l2: f64,
    pub vrmse_median: f64,
    pub wavelet_l1: f64,
}

/// Trains one variant from scratch and scores its EMA weights.
pub fn run_variant(axis: Axis, v: &Variant, corpus: &Corpus, eval: &EvalSet) -> Result<AblationRow> {
    let cfg = &v.config;
    let (model, mut state) = init_model(&cfg.model, cfg.train.seed, cfg.train.adamw.clone())?;
    let train = crate::training::TrainConfig { eval_every: 0, checkpoint_every: 0, ..cfg.train.clone() };
    let rows = pretrain(&model, &mut state, corpus, None, &train, &mut |_, _| Ok(()))?;
    let last = rows
        .iter()
        .rev()
        .find(|r| r.split == "train")
        .map(|r| train.loss.lambda_mse * r.loss_mse.unwrap_or(f64::NAN) + train.loss.lambda_l1 * r.loss_wavelet.unwrap_or(f64::NAN))
        .unwrap_or(f64::NAN);
    let m = evaluate(&model, &state.ema, eval)?;
    Ok(AblationRow {
        axis: axis.to_string(),
        variant: v.name.clone(),
        params: param_count(&state.params),
        steps: state.step,
        final_train_loss: last,
        rel_l2: m.rel_l2,
        vrmse_median: m.vrmse_median,
        wavelet_l1: m.wavelet_l1,
    })
}

pub fn run_sweep(base: &RunConfig, axis: Axis, corpus: &Corpus, eval: &EvalSet) -> Result<Vec<AblationRow>> {
    variants(base, axis)?.iter().map(|v| run_variant(axis, v, corpus, eval)).collect()
}

pub fn write_csv<W: Write>(rows: &[AblationRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let e = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["axis", "variant", "params", "steps", "final_train_loss", "rel_l2", "vrmse_median", "wavelet_l1"])
        .map_err(e)?;
    for r in rows {
        w.write_record([
            r.axis.clone(),
            r.variant.clone(),
            r.params.to_string(),
            r.steps.to_string(),
            format!("{:e}", r.final_train_loss),
            format!("{:e}", r.rel_l2),
            format!("{:e}", r.vrmse_median),
            format!("{:e}", r.wavelet_l1),
        ])
        .map_err(e)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::generate_all;

    fn small() -> RunConfig {
        let mut c = RunConfig::default();
        c.model.grid = [8, 8];
        c.model.embed_dim = 8;
        c.model.depth = 1;
        c.model.mixer = MixerConfig { dim: 8, ..MixerConfig::default() };
        c.data.template.height = 8;
        c.data.template.width = 8;
        c.data.template.n_steps = 4;
        c.data.train_trajectories = 2;
        c.data.eval_trajectories = 1;
        c.train.steps = 2;
        c.train.batch_size = 2;
        c
    }

    #[test]
    fn axis_names() {
        assert_eq!("fpn".parse::<Axis>().unwrap(), Axis::Fpn);
        let err = "depth".parse::<Axis>().unwrap_err();
        assert!(matches!(&err, Error::Usage(m) if m.contains("wavelet, loss, fpn, mixer")));
    }

    #[test]
    fn variant_counts() {
        let c = small();
        assert_eq!(variants(&c, Axis::Wavelet).unwrap().len(), 3);
        assert_eq!(variants(&c, Axis::Loss).unwrap().len(), 3);
        assert_eq!(variants(&c, Axis::Mixer).unwrap().len(), 9);
        // 8×8 grid, one DWT level → 4×4 tokens → pyramid depths 0, 1, 2
        assert_eq!(variants(&c, Axis::Fpn).unwrap().len(), 3);
    }

    #[test]
    fn wavelet_sweep_rows_are_finite() {
        let c = small();
        let corpus = Corpus::single(generate_all(&c.data.train_specs()).unwrap());
        let ev = EvalSet::sample(generate_all(&c.data.eval_specs()).unwrap(), 1, 2, 0).unwrap();
        let rows = run_sweep(&c, Axis::Wavelet, &corpus, &ev).unwrap();
        assert_eq!(rows.len(), 3);
        for r in &rows {
            assert!(r.rel_l2.is_finite() && r.wavelet_l1.is_finite() && r.final_train_loss.is_finite());
            assert_eq!(r.steps, 2);
        }
    }
}
