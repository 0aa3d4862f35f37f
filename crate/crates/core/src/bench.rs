//! Wall-clock comparison of linear and softmax attention, forward plus backward.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixer::{softmax_attention, state_attention, AttentionKind};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub sizes: Vec<usize>,
    pub kinds: Vec<AttentionKind>,
    pub head_dim: usize,
    /// Timed repetitions per point; the minimum is reported.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            sizes: vec![256, 1024, 4096],
            kinds: vec![AttentionKind::Linear, AttentionKind::Softmax],
            head_dim: 32,
            repeats: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub kind: AttentionKind,
    pub seconds: f64,
}

fn inputs(n: usize, d: usize, seed: u64) -> [Tensor; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = 1.0 / (d as f64).sqrt();
    [Tensor::randn(&[1, n, d], s, &mut rng), Tensor::randn(&[1, n, d], s, &mut rng), Tensor::randn(&[1, n, d], 1.0, &mut rng)]
}

/// One forward and backward pass; returns the attention output.
pub fn attention_pass(kind: AttentionKind, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.param(q.clone()), tape.param(k.clone()), tape.param(v.clone()));
    let out = match kind {
        AttentionKind::Linear => {
            let qf = tape.elu_plus_one(qv);
            let kf = tape.elu_plus_one(kv);
            state_attention(&mut tape, qf, kf, vv, None)?
        }
        AttentionKind::Softmax => softmax_attention(&mut tape, qv, kv, vv)?,
    };
    let l = tape.sum(out);
    tape.backward(l)?;
    Ok(tape.value(out).clone())
}

pub fn run(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.repeats == 0 || cfg.head_dim == 0 || cfg.sizes.contains(&0) {
        return Err(Error::Config("bench needs positive sizes, head_dim and repeats".into()));
    }
    let mut rows = Vec::new();
    for &n in &cfg.sizes {
        let [q, k, v] = inputs(n, cfg.head_dim, cfg.seed);
        for &kind in &cfg.kinds {
            attention_pass(kind, &q, &k, &v)?;
            let mut best = f64::INFINITY;
            for _ in 0..cfg.repeats {
                let t = Instant::now();
                std::hint::black_box(attention_pass(kind, &q, &k, &v)?);
                best = best.min(t.elapsed().as_secs_f64());
            }
            rows.push(BenchRow { n, kind, seconds: best });
        }
    }
    Ok(rows)
}

/// `seconds(n_hi) / seconds(n_lo)` for one kind.
pub fn scaling_ratio(rows: &[BenchRow], kind: AttentionKind, n_lo: usize, n_hi: usize) -> Option<f64> {
    let t = |n| rows.iter().find(|r| r.kind == kind && r.n == n).map(|r| r.seconds);
    Some(t(n_hi)? / t(n_lo)?)
}

pub fn write_csv<W: Write>(rows: &[BenchRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let e = |e: csv::Error| Error::Format(e.to_string());
    w.write_record(["n", "kind", "seconds"]).map_err(e)?;
    for r in rows {
        let kind = match r.kind {
            AttentionKind::Linear => "linear",
            AttentionKind::Softmax => "softmax",
        };
        w.write_record([r.n.to_string(), kind.to_string(), format!("{:.6e}", r.seconds)]).map_err(e)?;
    }
    w.flush()?;
    Ok(())
}
