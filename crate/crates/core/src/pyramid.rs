//! Shared-weight feature pyramid: one mixer applied at `L+1` resolutions.

use rand::Rng;

use crate::error::{dim_err, Result};
use crate::mixer::{mixer_block, MixerConfig, MixerParams};
use crate::tensor::{Bound, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct PyramidParams {
    pub mixer: MixerParams,
    /// `[L+1]` aggregation weights.
    pub level_weights: ParamId,
    pub levels: usize,
}

impl PyramidParams {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &MixerConfig,
        levels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mixer = MixerParams::init(store, &format!("{prefix}.mixer"), cfg, rng)?;
        let w = Tensor::full(&[levels + 1], 1.0 / (levels + 1) as f64);
        let level_weights = store.add(format!("{prefix}.level_weights"), w);
        Ok(PyramidParams { mixer, level_weights, levels })
    }
}

/// `Σ_ℓ w_ℓ · Upsample^ℓ(mixer(Pool^ℓ(x), grid/2^ℓ))` for `x: [B, h·w, D]`.
pub fn pyramid_forward(
    tape: &mut Tape,
    bound: &Bound,
    p: &PyramidParams,
    x: Var,
    grid: (usize, usize),
) -> Result<Var> {
    let f = 1usize << p.levels;
    if grid.0 % f != 0 || grid.1 % f != 0 {
        return dim_err(format!(
            "pyramid with {} levels needs a grid divisible by {f}, got {}x{}",
            p.levels, grid.0, grid.1
        ));
    }
    let s = tape.shape(x).to_vec();
    if s.len() != 3 || s[1] != grid.0 * grid.1 {
        return dim_err(format!("pyramid expects [B, {}, D], got {:?}", grid.0 * grid.1, s));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    let mut level_in = tape.reshape(x, &[b, grid.0, grid.1, d])?;
    let mut total: Option<Var> = None;
    for l in 0..=p.levels {
        let g = (grid.0 >> l, grid.1 >> l);
        if l > 0 {
            level_in = tape.avg_pool2(level_in)?;
        }
        let tokens = tape.reshape(level_in, &[b, g.0 * g.1, d])?;
        debug_assert_eq!(g.0 * g.1 * (1 << (2 * l)), n);
        let y = mixer_block(tape, bound, &p.mixer, tokens, g)?;
        let mut up = tape.reshape(y, &[b, g.0, g.1, d])?;
        for _ in 0..l {
            up = tape.upsample_nearest2(up)?;
        }
        let up = tape.reshape(up, &[b, n, d])?;
        let wl = tape.index(bound[p.level_weights], l)?;
        let term = tape.scale_by(up, wl)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one level"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(levels: usize, seed: u64) -> (ParamStore, PyramidParams) {
        let cfg = MixerConfig { dim: 8, ..MixerConfig::default() };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = PyramidParams::init(&mut store, "fpn", &cfg, levels, &mut rng).unwrap();
        for (name, v) in store.names().to_vec().iter().zip(store.values_mut()) {
            if !name.ends_with("level_weights") {
                *v = Tensor::randn(v.shape(), 0.3, &mut rng);
            }
        }
        (store, p)
    }

    fn run(store: &ParamStore, p: &PyramidParams, x: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
        let mut tape = Tape::new();
        let b = tape.bind(store);
        let xv = tape.constant(x.clone());
        let y = pyramid_forward(&mut tape, &b, p, xv, grid)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn single_level_is_weighted_mixer() {
        let (store, p) = setup(0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[1, 16, 8], 1.0, &mut rng);
        let y = run(&store, &p, &x, (4, 4)).unwrap();
        let mut tape = Tape::new();
        let b = tape.bind(&store);
        let xv = tape.constant(x);
        let m = mixer_block(&mut tape, &b, &p.mixer, xv, (4, 4)).unwrap();
        assert_eq!(y, tape.value(m).scale(store.get(p.level_weights).item()));
    }

    #[test]
    fn unit_first_weight_matches_single_level() {
        let (mut s2, p2) = setup(2, 3);
        let (mut s0, p0) = setup(0, 3);
        let mut w = Tensor::zeros(&[3]);
        w.data_mut()[0] = 1.0;
        *s2.get_mut(p2.level_weights) = w;
        *s0.get_mut(p0.level_weights) = Tensor::ones(&[1]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 64, 8], 1.0, &mut rng);
        assert_eq!(run(&s2, &p2, &x, (8, 8)).unwrap(), run(&s0, &p0, &x, (8, 8)).unwrap());
    }

    #[test]
    fn parameter_count_grows_by_level_scalars_only() {
        let (s0, _) = setup(0, 5);
        let (s3, _) = setup(3, 5);
        assert_eq!(s3.scalar_count(), s0.scalar_count() + 3);
    }

    #[test]
    fn indivisible_grid_states_requirement() {
        let (store, p) = setup(2, 6);
        let err = run(&store, &p, &Tensor::zeros(&[1, 24, 8]), (4, 6)).unwrap_err();
        assert!(matches!(&err, Error::Dimension(m) if m.contains("divisible by 4")), "{err}");
    }
}
