//! Linear attention against its quadratic form, and the ridge-corrected
//! state across regularisation strengths.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wavelit::mixer::{
    linear_attention_ridge, linear_attention_vanilla, ridge_objective_with_grad, softmax_attention_reference,
    AttentionState,
};
use wavelit::Tensor;

fn main() -> wavelit::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (n, d) = (128, 8);
    let q = Tensor::randn(&[n, d], 1.0, &mut rng);
    let k = Tensor::randn(&[n, d], 1.0, &mut rng);
    let v = Tensor::randn(&[n, d], 1.0, &mut rng);

    let lin = linear_attention_vanilla(&q, &k, &v)?;
    let soft = softmax_attention_reference(&q, &k, &v)?;
    println!("N={n}: |linear| {:.3e}, |softmax| {:.3e}", lin.norm(), soft.norm());

    let st = AttentionState::from_keys(&k, &v)?;
    println!("{:>8}  {:>10}  {:>10}  {:>10}", "lambda", "|S|", "|grad|", "|out|");
    for lambda in [1e-6, 1e-2, 1.0, 1e2, 1e6] {
        let s = st.ridge(lambda)?;
        let (_, g) = ridge_objective_with_grad(&s, &k, &v, lambda)?;
        let out = linear_attention_ridge(&q, &k, &v, lambda)?;
        println!("{lambda:>8.0e}  {:>10.3e}  {:>10.2e}  {:>10.3e}", s.norm(), g.max_abs(), out.norm());
    }
    let big = 1e8;
    let rel = st.ridge(big)?.scale(big).sub(&st.c)?.norm() / st.c.norm();
    println!("lambda*S at lambda=1e8 vs C: rel {rel:.2e}");
    Ok(())
}
