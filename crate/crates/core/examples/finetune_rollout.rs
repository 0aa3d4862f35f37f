//! Short pretraining on advection, rollout finetuning with each strategy,
//! then autoregressive rollout errors per horizon window.

use wavelit::model::WaveLiTConfig;
use wavelit::rollout::{rollout_report, Windows};
use wavelit::synthdata::{generate_all, System, TrajectorySpec};
use wavelit::training::{
    init_model, pretrain, rollout_finetune, Corpus, FinetuneConfig, ScheduleConfig, Strategy, TrainConfig,
};

fn main() -> wavelit::Result<()> {
    let mut cfg = WaveLiTConfig::preset("wavelit-tiny")?;
    cfg.grid = [16, 16];
    let specs: Vec<_> = (0..16).map(|s| TrajectorySpec::new(System::Advection2d, 16, 40, s)).collect();
    let test: Vec<_> = (100..104).map(|s| TrajectorySpec::new(System::Advection2d, 16, 40, s)).collect();
    let corpus = Corpus::single(generate_all(&specs)?);
    let test = generate_all(&test)?;
    let train = TrainConfig {
        steps: 300,
        schedule: ScheduleConfig { warmup_steps: 20, transition_steps: 20, ..ScheduleConfig::default() },
        eval_every: 0,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let (model, mut base) = init_model(&cfg, 0, train.adamw.clone())?;
    pretrain(&model, &mut base, &corpus, None, &train, &mut |_, _| Ok(()))?;

    let windows = Windows { ranges: vec![("1".into(), 1, 1), ("1-10".into(), 1, 10), ("11-30".into(), 11, 30)] };
    let report = |params: &wavelit::tensor::ParamStore| -> wavelit::Result<String> {
        let step = |h: &wavelit::Tensor| -> wavelit::Result<wavelit::Tensor> {
            let s = h.shape().to_vec();
            let x = h.reshape(&[1, s[0], s[1], s[2], s[3]])?;
            model.predict(params, &x)?.into_shape(&[s[1], s[2], s[3]])
        };
        let r = rollout_report(step, &test, cfg.history, &windows)?;
        Ok(r.windows.iter().map(|w| format!("{} {:.3}", w.name, w.median_vrmse)).collect::<Vec<_>>().join("  "))
    };
    println!("{:<19} {}", "pretrained", report(&base.params)?);
    for strategy in [Strategy::ScheduledSampling, Strategy::Bptt, Strategy::CausalBptt, Strategy::Pushforward] {
        let mut state = base.clone();
        let ft = FinetuneConfig { strategy, unroll: 4, steps: 60, ..FinetuneConfig::default() };
        rollout_finetune(&model, &mut state, &corpus, None, &train, &ft, &mut |_, _| Ok(()))?;
        println!("{:<19} {}", format!("{strategy:?}"), report(&state.params)?);
    }
    Ok(())
}
