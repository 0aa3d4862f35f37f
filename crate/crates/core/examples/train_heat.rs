//! Trains wavelit-tiny on synthetic heat2d trajectories and reports one-step
//! accuracy of the EMA weights as training progresses.
//!
//! `cargo run --release --example train_heat -- [steps] [trajectories]`

use wavelit::model::WaveLiTConfig;
use wavelit::synthdata::{generate_all, System, TrajectorySpec};
use wavelit::training::{init_model, pretrain, Corpus, EvalSet, ScheduleConfig, TrainConfig};

fn main() -> wavelit::Result<()> {
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>().expect("numeric argument"));
    let steps = args.next().unwrap_or(2000);
    let n = args.next().unwrap_or(200) as usize;

    let train: Vec<_> = (0..n as u64).map(|s| TrajectorySpec::new(System::Heat2d, 32, 64, s)).collect();
    let eval: Vec<_> = (0..20).map(|s| TrajectorySpec::new(System::Heat2d, 32, 64, 10_000 + s)).collect();
    let corpus = Corpus::single(generate_all(&train)?);
    let ev = EvalSet::sample(generate_all(&eval)?, 1, 64, 0)?;

    let cfg = WaveLiTConfig::preset("wavelit-tiny")?;
    let train_cfg = TrainConfig {
        steps,
        schedule: ScheduleConfig { warmup_steps: 50, transition_steps: 20, ..Default::default() },
        eval_every: (steps / 10).max(1),
        checkpoint_every: 0,
        ..Default::default()
    };
    let (model, mut state) = init_model(&cfg, train_cfg.seed, train_cfg.adamw.clone())?;
    let t0 = std::time::Instant::now();
    let rows = pretrain(&model, &mut state, &corpus, Some(&ev), &train_cfg, &mut |_, _| Ok(()))?;
    for r in rows.iter().filter(|r| r.split == "eval") {
        println!(
            "step {:>5}  rel_l2 {:.4}  vrmse {:.4}  wavelet_l1 {:.3e}",
            r.step,
            r.rel_l2.unwrap(),
            r.vrmse_median.unwrap(),
            r.loss_wavelet.unwrap()
        );
    }
    println!("{} steps in {:.1?}", steps, t0.elapsed());
    Ok(())
}
