//! TOML run configuration. Every field has a default; unknown keys are rejected.
//! `wavelit config --print-defaults` dumps the full default document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::BenchConfig;
use crate::error::{Error, Result};
use crate::model::WaveLiTConfig;
use crate::rollout::Windows;
use crate::synthdata::TrajectorySpec;
use crate::training::{FinetuneConfig, TrainConfig};

/// Trajectory sets derived from one template; trajectory `i` uses seed
/// `template.seed + i`, eval trajectories continue after the training ones.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub template: TrajectorySpec,
    pub train_trajectories: usize,
    pub eval_trajectories: usize,
    /// Where `generate` writes and training reads; relative to `out_dir` unless absolute.
    pub dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { template: TrajectorySpec::default(), train_trajectories: 200, eval_trajectories: 20, dir: "data".into() }
    }
}

impl DataConfig {
    pub fn train_specs(&self) -> Vec<TrajectorySpec> {
        (0..self.train_trajectories).map(|i| TrajectorySpec { seed: self.template.seed + i as u64, ..self.template.clone() }).collect()
    }

    pub fn eval_specs(&self) -> Vec<TrajectorySpec> {
        let base = self.template.seed + self.train_trajectories as u64;
        (0..self.eval_trajectories).map(|i| TrajectorySpec { seed: base + i as u64, ..self.template.clone() }).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub windows: Windows,
    /// Evaluate the EMA weights rather than the raw parameters.
    pub use_ema: bool,
    /// Random directions per probe for the Lipschitz estimate (0 skips it).
    pub lipschitz_directions: usize,
    pub lipschitz_radius: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { windows: Windows::default(), use_ema: true, lipschitz_directions: 4, lipschitz_radius: 1e-3 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out_dir: PathBuf,
    pub model: WaveLiTConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out_dir: "runs/default".into(),
            model: WaveLiTConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serialises")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.finetune.validate()?;
        self.data.template.validate()?;
        let t = &self.data.template;
        if self.model.grid != [t.height, t.width] {
            return Err(Error::Config(format!(
                "model grid {:?} does not match data grid [{}, {}]",
                self.model.grid, t.height, t.width
            )));
        }
        if self.model.in_channels != t.channels() || self.model.out_channels != t.channels() {
            return Err(Error::Config(format!(
                "{} has {} channels but the model maps {} -> {}",
                t.system,
                t.channels(),
                self.model.in_channels,
                self.model.out_channels
            )));
        }
        if t.n_steps <= self.model.history {
            return Err(Error::Config(format!(
                "trajectories of {} frames cannot supply history {} plus a target",
                t.n_steps, self.model.history
            )));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        if self.data.dir.is_absolute() {
            self.data.dir.clone()
        } else {
            self.out_dir.join(&self.data.dir)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let d = RunConfig::default();
        d.validate().unwrap();
        let back = RunConfig::from_toml(&d.to_toml()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let c = RunConfig::from_toml("[train]\nsteps = 10\n[data.template]\nseed = 5\n").unwrap();
        assert_eq!(c.train.steps, 10);
        assert_eq!(c.train.batch_size, 4);
        assert_eq!(c.data.template.seed, 5);
        assert_eq!(c.data.eval_specs()[0].seed, 205);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[train]\nstepz = 10\n").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("stepz")), "{err}");
        assert!(RunConfig::from_toml("colour = 1\n").is_err());
    }

    #[test]
    fn grid_mismatch_is_a_config_error() {
        let err = RunConfig::from_toml("[data.template]\nheight = 16\nwidth = 16\n").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("grid")));
    }
}
