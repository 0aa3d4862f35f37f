//! Wall-clock of one forward and backward pass of linear and softmax
//! attention as the token count grows.

use wavelit::bench::{run, scaling_ratio, BenchConfig};
use wavelit::mixer::AttentionKind;

fn main() -> wavelit::Result<()> {
    let cfg = BenchConfig { sizes: vec![256, 1024, 2048, 4096], repeats: 2, ..BenchConfig::default() };
    let rows = run(&cfg)?;
    for r in &rows {
        println!("{:>5} {:<8?} {:.4}s", r.n, r.kind, r.seconds);
    }
    for kind in [AttentionKind::Linear, AttentionKind::Softmax] {
        if let Some(x) = scaling_ratio(&rows, kind, 1024, 4096) {
            println!("{kind:?} 1024 -> 4096: x{x:.2}");
        }
    }
    Ok(())
}
