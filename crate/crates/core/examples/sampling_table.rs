//! Dataset sampling probabilities for the eight-dataset reference corpus,
//! followed by a short draw to show the empirical frequencies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wavelit::sampling::{next_dataset, CorpusStats, SamplingReport};

fn main() -> wavelit::Result<()> {
    let stats = CorpusStats::reference();
    let report = SamplingReport::new(&stats, 0.2)?;
    report.write_csv(std::io::stdout())?;

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut counts = vec![0usize; report.sqrt.len()];
    let draws = 20_000;
    for _ in 0..draws {
        counts[next_dataset(&report.sqrt, &mut rng)?] += 1;
    }
    println!();
    for (name, (c, w)) in report.names.iter().zip(counts.iter().zip(&report.sqrt)) {
        println!("{name:<30} drawn {:.4}  target {w:.4}", *c as f64 / draws as f64);
    }
    Ok(())
}
