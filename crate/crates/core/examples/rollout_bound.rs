//! Compounding one-step error against the geometric rollout bound on
//! synthetic map pairs with known defect and Lipschitz constant.

use wavelit::rollout::{bound_verification, PairKind, SyntheticPair};

fn main() -> wavelit::Result<()> {
    let x0: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).sin()).collect();
    for lf in [0.5, 1.0, 1.5] {
        for kind in [PairKind::Rotation, PairKind::Tanh, PairKind::Aligned] {
            let pair = SyntheticPair::new(0.01, lf, kind, 8)?;
            let start = if kind == PairKind::Aligned { vec![0.0; 8] } else { x0.clone() };
            let r = bound_verification(&pair, &start, 30, 1e-9)?;
            let show = |n: usize| format!("E{n}={:.3e}/{:.3e}", r.errors[n], r.bounds[n]);
            println!("L={lf} {:<8} {}  {}  {}  ok={}", format!("{kind:?}"), show(1), show(10), show(30), r.passed());
        }
    }
    Ok(())
}
