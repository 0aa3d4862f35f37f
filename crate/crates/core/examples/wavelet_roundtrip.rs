//! Decomposes a synthetic field with each filter bank, reports subband
//! energies and the reconstruction error.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wavelit::synthdata::{generate, System, TrajectorySpec};
use wavelit::wavelet::{dwt2, idwt2, WaveletName};

fn main() -> wavelit::Result<()> {
    let field = generate(&TrajectorySpec::new(System::GrayScott2d, 64, 2, 7))?.frame(1);
    let noise = wavelit::Tensor::randn(field.shape(), 1.0, &mut ChaCha8Rng::seed_from_u64(0));
    for (label, x) in [("gray-scott", &field), ("white noise", &noise)] {
        println!("{label} {:?}", x.shape());
        for name in WaveletName::ALL {
            let bank = name.bank();
            let s = dwt2(x, &bank, 1)?;
            let e = |t: wavelit::Tensor| t.data().iter().map(|v| v * v).sum::<f64>();
            let bands = [e(s.ll()), e(s.lh()), e(s.hl()), e(s.hh())];
            let total: f64 = bands.iter().sum();
            let err = idwt2(&s, &bank)?.max_abs_diff(x);
            println!(
                "  {:<8} LL {:5.1}%  LH {:5.1}%  HL {:5.1}%  HH {:5.1}%  round trip {:.1e}",
                name.as_str(),
                100.0 * bands[0] / total,
                100.0 * bands[1] / total,
                100.0 * bands[2] / total,
                100.0 * bands[3] / total,
                err
            );
        }
    }
    Ok(())
}
