//! Multi-dataset sampling weights and their diagnostics.

use std::io::{Read, Write};

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub n_trajectories: u64,
    /// Tokens per example.
    pub tokens: u64,
}

impl DatasetStats {
    /// Tokens after `dwt_levels` halvings of an `height×width` grid.
    pub fn from_grid(name: &str, n_trajectories: u64, height: u64, width: u64, dwt_levels: u32) -> Self {
        let f = 1u64 << dwt_levels;
        DatasetStats { name: name.into(), n_trajectories, tokens: (height / f) * (width / f) }
    }

    pub fn total_tokens(&self) -> u64 {
        self.n_trajectories * self.tokens
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub datasets: Vec<DatasetStats>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct StatsRecord {
    name: String,
    n_trajectories: u64,
    height: u64,
    width: u64,
    dwt_levels: u32,
}

impl CorpusStats {
    /// The eight-dataset benchmark corpus at one wavelet level.
    pub fn reference() -> CorpusStats {
        let rows: [(&str, u64, u64, u64); 8] = [
            ("active_matter", 14_000, 256, 256),
            ("gray_scott_reaction_diffusion", 960_000, 128, 128),
            ("rayleigh_benard", 278_600, 512, 128),
            ("shear_flow", 178_304, 256, 512),
            ("turbulent_radiative_layer_2D", 7_200, 128, 384),
            ("viscoelastic_instability", 6_487, 512, 512),
            ("acoustic_scattering_maze", 321_600, 256, 256),
            ("helmholtz_staircase", 20_384, 1024, 256),
        ];
        CorpusStats { datasets: rows.iter().map(|&(n, k, h, w)| DatasetStats::from_grid(n, k, h, w, 1)).collect() }
    }

    /// Parses CSV with header `name,n_trajectories,height,width,dwt_levels`.
    pub fn from_csv<R: Read>(reader: R) -> Result<CorpusStats> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut datasets = Vec::new();
        for (i, rec) in rdr.deserialize::<StatsRecord>().enumerate() {
            let line = i + 2;
            let r = rec.map_err(|e| Error::Config(format!("corpus stats line {line}: {e}")))?;
            if r.n_trajectories == 0 || r.height == 0 || r.width == 0 {
                return Err(Error::Config(format!("corpus stats line {line}: counts must be positive")));
            }
            let f = 1u64 << r.dwt_levels;
            if r.height % f != 0 || r.width % f != 0 {
                return Err(Error::Config(format!(
                    "corpus stats line {line}: {}x{} is not divisible by 2^{}",
                    r.height, r.width, r.dwt_levels
                )));
            }
            datasets.push(DatasetStats::from_grid(&r.name, r.n_trajectories, r.height, r.width, r.dwt_levels));
        }
        Ok(CorpusStats { datasets })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(e.to_string())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "scheme")]
pub enum SamplingScheme {
    Uniform,
    Temperature { temperature: f64 },
    Sqrt,
}

/// `p_i = N_i / Σ N_j`.
pub fn proportional_share(stats: &CorpusStats) -> Result<Vec<f64>> {
    let total: u128 = stats.datasets.iter().map(|d| d.total_tokens() as u128).sum();
    if total == 0 {
        return Err(Error::Config("corpus has no tokens".into()));
    }
    Ok(stats.datasets.iter().map(|d| d.total_tokens() as f64 / total as f64).collect())
}

fn normalise(mut w: Vec<f64>) -> Vec<f64> {
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Sampling probabilities under `scheme`.
pub fn weights(scheme: SamplingScheme, stats: &CorpusStats) -> Result<Vec<f64>> {
    let p = proportional_share(stats)?;
    let k = p.len();
    Ok(match scheme {
        SamplingScheme::Uniform => vec![1.0 / k as f64; k],
        SamplingScheme::Temperature { temperature } => {
            if !(temperature > 0.0) || !temperature.is_finite() {
                return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
            }
            // shifting by the max keeps the largest term at exactly 1
            let m = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            normalise(p.iter().map(|&pi| ((pi - m) / temperature).exp()).collect())
        }
        SamplingScheme::Sqrt => normalise(stats.datasets.iter().map(|d| (d.total_tokens() as f64).sqrt()).collect()),
    })
}

/// `Σ w_i ln(w_i / p_i)` in nats; zero-weight terms contribute 0.
pub fn kl_to_proportional(w: &[f64], p: &[f64]) -> f64 {
    w.iter().zip(p).filter(|(wi, _)| **wi > 0.0).map(|(wi, pi)| wi * (wi / pi).ln()).sum()
}

pub fn oversampling_ratio(w: &[f64], p: &[f64]) -> Vec<f64> {
    w.iter().zip(p).map(|(a, b)| a / b).collect()
}

/// Categorical draw of the next dataset index.
pub fn next_dataset<R: Rng + ?Sized>(w: &[f64], rng: &mut R) -> Result<usize> {
    let dist = WeightedIndex::new(w).map_err(|e| Error::Config(format!("invalid sampling weights: {e}")))?;
    Ok(dist.sample(rng))
}

/// Probabilities, KL and oversampling for the three schemes side by side.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingReport {
    pub names: Vec<String>,
    pub proportional: Vec<f64>,
    pub uniform: Vec<f64>,
    pub temperature: Vec<f64>,
    pub sqrt: Vec<f64>,
    pub temperature_value: f64,
}

impl SamplingReport {
    pub fn new(stats: &CorpusStats, temperature: f64) -> Result<SamplingReport> {
        Ok(SamplingReport {
            names: stats.datasets.iter().map(|d| d.name.clone()).collect(),
            proportional: proportional_share(stats)?,
            uniform: weights(SamplingScheme::Uniform, stats)?,
            temperature: weights(SamplingScheme::Temperature { temperature }, stats)?,
            sqrt: weights(SamplingScheme::Sqrt, stats)?,
            temperature_value: temperature,
        })
    }

    fn columns(&self) -> [&[f64]; 4] {
        [&self.proportional, &self.uniform, &self.temperature, &self.sqrt]
    }

    /// `[proportional, uniform, temperature, sqrt]`.
    pub fn kl(&self) -> [f64; 4] {
        self.columns().map(|w| kl_to_proportional(w, &self.proportional))
    }

    pub fn ratios(&self) -> [Vec<f64>; 4] {
        self.columns().map(|w| oversampling_ratio(w, &self.proportional))
    }

    /// One row per dataset plus a KL footer row.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let t = self.temperature_value;
        w.write_record([
            "dataset".to_string(),
            "prop".into(),
            "uniform".into(),
            format!("temp_{t}"),
            "sqrt".into(),
            "ratio_prop".into(),
            "ratio_uniform".into(),
            format!("ratio_temp_{t}"),
            "ratio_sqrt".into(),
        ])
        .map_err(csv_err)?;
        let ratios = self.ratios();
        for (i, name) in self.names.iter().enumerate() {
            let mut row = vec![name.clone()];
            row.extend(self.columns().iter().map(|c| format!("{:.4}", c[i])));
            row.extend(ratios.iter().map(|r| format!("{:.1}", r[i])));
            w.write_record(&row).map_err(csv_err)?;
        }
        let mut row = vec!["kl_nats".to_string()];
        row.extend(self.kl().iter().map(|k| format!("{k:.3}")));
        row.extend(std::iter::repeat_n(String::new(), 4));
        w.write_record(&row).map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn round(x: f64, d: i32) -> f64 {
        let f = 10f64.powi(d);
        (x * f).round() / f
    }

    #[test]
    fn reference_token_counts() {
        let c = CorpusStats::reference();
        assert_eq!(c.datasets[3].total_tokens(), 5_842_665_472);
        let total: u64 = c.datasets.iter().map(|d| d.total_tokens()).sum();
        assert_eq!(total, 21_687_369_728);
    }

    #[test]
    fn proportional_examples() {
        let p = proportional_share(&CorpusStats::reference()).unwrap();
        assert_eq!(round(p[3], 4), 0.2694);
        assert_eq!(round(p[4], 4), 0.0041);
        let eq = CorpusStats {
            datasets: vec![DatasetStats { name: "a".into(), n_trajectories: 3, tokens: 4 }; 4],
        };
        assert_eq!(proportional_share(&eq).unwrap(), vec![0.25; 4]);
    }

    #[test]
    fn empty_corpus_is_config_error() {
        assert!(matches!(proportional_share(&CorpusStats::default()), Err(Error::Config(_))));
    }

    #[test]
    fn weights_sum_to_one_and_positive() {
        let c = CorpusStats::reference();
        for s in [SamplingScheme::Uniform, SamplingScheme::Temperature { temperature: 0.2 }, SamplingScheme::Sqrt] {
            let w = weights(s, &c).unwrap();
            assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(w.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn kl_ordering() {
        let r = SamplingReport::new(&CorpusStats::reference(), 0.2).unwrap();
        let [k0, ku, kt, ks] = r.kl();
        assert_eq!(k0, 0.0);
        assert!(ks < kt && kt < ku);
    }

    #[test]
    fn temperature_limits() {
        let c = CorpusStats::reference();
        let hot = weights(SamplingScheme::Temperature { temperature: 100.0 }, &c).unwrap();
        assert!(hot.iter().all(|&v| (v - 0.125).abs() < 1e-3));
        let cold = weights(SamplingScheme::Temperature { temperature: 1e-4 }, &c).unwrap();
        assert!((cold[3] - 1.0).abs() < 1e-12);
        assert!(matches!(weights(SamplingScheme::Temperature { temperature: 0.0 }, &c), Err(Error::Config(_))));
    }

    #[test]
    fn draws_follow_weights() {
        assert_eq!(next_dataset(&[1.0, 0.0, 0.0], &mut ChaCha8Rng::seed_from_u64(0)).unwrap(), 0);
        let w = weights(SamplingScheme::Sqrt, &CorpusStats::reference()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut counts = [0usize; 8];
        let mut seq = Vec::new();
        for _ in 0..100_000 {
            let i = next_dataset(&w, &mut rng).unwrap();
            counts[i] += 1;
            seq.push(i);
        }
        for (c, wi) in counts.iter().zip(&w) {
            assert!((*c as f64 / 1e5 - wi).abs() <= 0.005);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let again: Vec<usize> = (0..100_000).map(|_| next_dataset(&w, &mut rng).unwrap()).collect();
        assert_eq!(seq, again);
    }

    #[test]
    fn csv_parse_reports_line() {
        let text = "name,n_trajectories,height,width,dwt_levels\na,10,32,32,1\nb,x,32,32,1\n";
        let err = CorpusStats::from_csv(text.as_bytes()).unwrap_err().to_string();
        assert!(err.contains("line 3"), "{err}");
        let ok = CorpusStats::from_csv("name,n_trajectories,height,width,dwt_levels\na,10,32,64,1\n".as_bytes()).unwrap();
        assert_eq!(ok.datasets[0].tokens, 16 * 32);
    }

    #[test]
    fn single_and_twin_corpora() {
        let one = CorpusStats { datasets: vec![DatasetStats { name: "a".into(), n_trajectories: 5, tokens: 7 }] };
        let r = SamplingReport::new(&one, 0.2).unwrap();
        for col in r.columns() {
            assert_eq!(col, &[1.0]);
        }
        let two = CorpusStats { datasets: vec![DatasetStats { name: "a".into(), n_trajectories: 5, tokens: 7 }; 2] };
        let r = SamplingReport::new(&two, 0.2).unwrap();
        for col in r.columns() {
            assert_eq!(col, &[0.5, 0.5]);
        }
    }
}
