//! Builds each preset, checks the parameter count against its closed form
//! and runs one prediction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wavelit::model::{param_count, WaveLiT, WaveLiTConfig};
use wavelit::tensor::ParamStore;
use wavelit::Tensor;

fn main() -> wavelit::Result<()> {
    for preset in ["wavelit-tiny", "wavelit-small-proxy"] {
        let cfg = WaveLiTConfig::preset(preset)?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = WaveLiT::init(&mut store, &cfg, &mut rng)?;
        let [h, w] = cfg.grid;
        let x = Tensor::randn(&[1, cfg.history, h, w, cfg.in_channels], 1.0, &mut rng);
        let t0 = std::time::Instant::now();
        let y = model.predict(&store, &x)?;
        println!(
            "{preset}: {} params (formula {}), tokens {:?}, {:?} -> {:?} in {:.1?}",
            param_count(&store),
            cfg.param_count_formula(),
            cfg.token_grid(),
            x.shape(),
            y.shape(),
            t0.elapsed()
        );
    }
    Ok(())
}
