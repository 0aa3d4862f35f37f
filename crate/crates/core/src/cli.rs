//! Command-line front end. Exit codes: 0 success, 2 usage or configuration
//! error, 3 numerical failure.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand_chacha::ChaCha8Rng;

use crate::ablation::{self, Axis};
use crate::bench;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::mixer::AttentionKind;
use crate::model::WaveLiT;
use crate::rollout::{estimate_lipschitz, rollout_report};
use crate::sampling::{CorpusStats, SamplingReport};
use crate::synthdata::{generate_all, oracle_step, System, Trajectory, TrajectorySpec};
use crate::tensor::{ParamStore, Tensor};
use crate::training::checkpoint;
use crate::training::{
    init_model, pretrain, rollout_finetune, stream_rng, write_metrics, Corpus, EvalSet, MetricsRow, OptimizerState,
    Strategy, Stream, TrainState,
};

pub const THREADS_ENV: &str = "WAVELIT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "wavelit", version, about = "Wavelet-tokenized linear-attention PDE surrogates")]
pub struct Cli {
    /// Worker threads for parallel evaluation and data generation (falls back to WAVELIT_THREADS).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write synthetic trajectory files.
    Generate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// heat2d, advection2d or gray_scott2d
        #[arg(long)]
        system: Option<String>,
        /// Square grid size.
        #[arg(long)]
        size: Option<usize>,
        /// Stored frames per trajectory.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        eval: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (default: the configured data directory).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite existing files.
        #[arg(long)]
        force: bool,
    },
    /// Teacher-forced pretraining.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the total step count.
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rollout finetuning from a pretrained (or partially finetuned) checkpoint.
    Finetune {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint to start from (default: <out>/checkpoint.wlt).
        #[arg(long)]
        from: Option<PathBuf>,
        /// scheduled_sampling, bptt, causal_bptt or pushforward
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        unroll: Option<usize>,
        #[arg(long)]
        epsilon: Option<f64>,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One-step and autoregressive rollout metrics on the eval trajectories.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Use the reference solver as the model.
        #[arg(long)]
        oracle: bool,
        /// Evaluate raw parameters instead of the EMA weights.
        #[arg(long)]
        raw: bool,
        /// Report CSV path (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time forward+backward of linear and softmax attention.
    BenchAttention {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated token counts.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        /// Comma-separated kinds: linear, softmax.
        #[arg(long, value_delimiter = ',')]
        kinds: Option<Vec<String>>,
        #[arg(long)]
        repeats: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sampling probabilities, KL divergences and oversampling ratios.
    SamplingReport {
        /// CSV with header name,n_trajectories,height,width,dwt_levels.
        #[arg(long, conflicts_with = "reference")]
        stats: Option<PathBuf>,
        /// Use the built-in eight-dataset reference corpus.
        #[arg(long)]
        reference: bool,
        #[arg(long, default_value_t = 0.2)]
        temperature: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and score every variant along one ablation axis.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        /// wavelet, loss, fpn or mixer
        #[arg(long)]
        axis: String,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inspect run configurations.
    Config {
        /// Print the full default configuration.
        #[arg(long)]
        print_defaults: bool,
        /// Validate a configuration file.
        #[arg(long)]
        check: Option<PathBuf>,
    },
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Divergence(_) | Error::Generation(_) | Error::Singular { .. } | Error::UndefinedMetric(_) => 3,
        _ => 2,
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.parse().map_err(|_| Error::Usage(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?),
            Err(_) => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::Usage("thread count must be positive".into()));
        }
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Generate { config, system, size, steps, train, eval, seed, out, force } => {
            let mut cfg = load_config(config.as_deref())?;
            let t = &mut cfg.data.template;
            if let Some(s) = system {
                t.system = s.parse::<System>()?;
                t.dt = TrajectorySpec::new(t.system, 8, 1, 0).dt;
            }
            if let Some(n) = size {
                t.height = n;
                t.width = n;
            }
            if let Some(n) = steps {
                t.n_steps = n;
            }
            if let Some(s) = seed {
                t.seed = s;
            }
            if let Some(n) = train {
                cfg.data.train_trajectories = n;
            }
            if let Some(n) = eval {
                cfg.data.eval_trajectories = n;
            }
            t.validate()?;
            let dir = out.unwrap_or_else(|| cfg.data_dir());
            cmd_generate(&cfg, &dir, force)
        }
        Command::Train { config, resume, steps, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cmd_train(&cfg, resume.as_deref())
        }
        Command::Finetune { config, from, strategy, unroll, epsilon, steps, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = strategy {
                cfg.finetune.strategy = parse_strategy(&s)?;
            }
            if let Some(k) = unroll {
                cfg.finetune.unroll = k;
            }
            if let Some(e) = epsilon {
                cfg.finetune.epsilon = e;
            }
            if let Some(s) = steps {
                cfg.finetune.steps = s;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cfg.finetune.validate()?;
            let from = from.unwrap_or_else(|| cfg.out_dir.join("checkpoint.wlt"));
            cmd_finetune(&cfg, &from)
        }
        Command::Eval { config, checkpoint, oracle, raw, out } => {
            let mut cfg = load_config(config.as_deref())?;
            if raw {
                cfg.eval.use_ema = false;
            }
            let ckpt = checkpoint.unwrap_or_else(|| cfg.out_dir.join("checkpoint.wlt"));
            cmd_eval(&cfg, if oracle { None } else { Some(&ckpt) }, out.as_deref())
        }
        Command::BenchAttention { config, sizes, kinds, repeats, out } => {
            let mut b = load_config(config.as_deref())?.bench;
            if let Some(s) = sizes {
                b.sizes = s;
            }
            if let Some(k) = kinds {
                b.kinds = k.iter().map(|k| parse_kind(k)).collect::<Result<_>>()?;
            }
            if let Some(r) = repeats {
                b.repeats = r;
            }
            let rows = bench::run(&b)?;
            with_output(out.as_deref(), |w| bench::write_csv(&rows, w))
        }
        Command::SamplingReport { stats, reference, temperature, out } => {
            let corpus = match (stats, reference) {
                (Some(p), _) => {
                    let f = File::open(&p).map_err(|e| Error::Usage(format!("cannot open {}: {e}", p.display())))?;
                    CorpusStats::from_csv(BufReader::new(f))?
                }
                (None, true) => CorpusStats::reference(),
                (None, false) => return Err(Error::Usage("pass --stats FILE or --reference".into())),
            };
            let report = SamplingReport::new(&corpus, temperature)?;
            with_output(out.as_deref(), |w| report.write_csv(w))
        }
        Command::Ablate { config, axis, steps, out } => {
            let axis: Axis = axis.parse()?;
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            let (train, eval) = load_data(&cfg)?;
            let ev = EvalSet::sample(eval, cfg.model.history, cfg.train.eval_samples, cfg.train.seed)?;
            let rows = ablation::run_sweep(&cfg, axis, &Corpus::single(train), &ev)?;
            with_output(out.as_deref(), |w| ablation::write_csv(&rows, w))
        }
        Command::Config { print_defaults, check } => {
            if let Some(p) = check {
                let c = RunConfig::load(&p)?;
                println!("{}: ok ({} parameters)", p.display(), c.model.param_count_formula());
                return Ok(());
            }
            if print_defaults {
                print!("{}", RunConfig::default().to_toml());
                return Ok(());
            }
            Err(Error::Usage("config needs --print-defaults or --check FILE".into()))
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn parse_strategy(s: &str) -> Result<Strategy> {
    toml::Value::String(s.to_string())
        .try_into()
        .map_err(|_| Error::Usage(format!("unknown strategy '{s}'; supported: scheduled_sampling, bptt, causal_bptt, pushforward")))
}

fn parse_kind(s: &str) -> Result<AttentionKind> {
    match s {
        "linear" => Ok(AttentionKind::Linear),
        "softmax" => Ok(AttentionKind::Softmax),
        _ => Err(Error::Usage(format!("unknown attention kind '{s}'; supported: linear, softmax"))),
    }
}

fn with_output(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p)?);
            f(&mut w)?;
            w.flush()?;
            Ok(())
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)
        }
    }
}

fn traj_path(dir: &Path, set: &str, i: usize) -> PathBuf {
    dir.join(format!("{set}_{i:04}.traj"))
}

fn cmd_generate(cfg: &RunConfig, dir: &Path, force: bool) -> Result<()> {
    let sets = [("train", cfg.data.train_specs()), ("eval", cfg.data.eval_specs())];
    if !force {
        for (name, specs) in &sets {
            if let Some(p) = (0..specs.len()).map(|i| traj_path(dir, name, i)).find(|p| p.exists()) {
                return Err(Error::Usage(format!("{} already exists; pass --force to overwrite", p.display())));
            }
        }
    }
    fs::create_dir_all(dir)?;
    println!("{:<6} {:>5}  {:<13} {:>9} {:>6} {:>10}", "set", "count", "system", "grid", "frames", "bytes/file");
    for (name, specs) in &sets {
        let trajs = generate_all(specs)?;
        for (i, t) in trajs.iter().enumerate() {
            t.write(BufWriter::new(File::create(traj_path(dir, name, i))?))?;
        }
        let t = &cfg.data.template;
        println!(
            "{:<6} {:>5}  {:<13} {:>9} {:>6} {:>10}",
            name,
            specs.len(),
            t.system.to_string(),
            format!("{}x{}", t.height, t.width),
            t.n_steps,
            t.file_bytes()
        );
    }
    println!("wrote {}", dir.display());
    Ok(())
}

/// Trajectories from the data directory, or generated in memory when absent.
fn load_data(cfg: &RunConfig) -> Result<(Vec<Trajectory>, Vec<Trajectory>)> {
    let dir = cfg.data_dir();
    let load = |set: &str, specs: Vec<TrajectorySpec>| -> Result<Vec<Trajectory>> {
        if !traj_path(&dir, set, 0).exists() {
            return generate_all(&specs);
        }
        specs
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let p = traj_path(&dir, set, i);
                let f = File::open(&p).map_err(|e| Error::Usage(format!("cannot open {}: {e}", p.display())))?;
                let t = Trajectory::read(BufReader::new(f))?;
                if &t.spec != spec {
                    return Err(Error::Config(format!(
                        "{} was generated from a different data template; regenerate with --force",
                        p.display()
                    )));
                }
                Ok(t)
            })
            .collect()
    };
    Ok((load("train", cfg.data.train_specs())?, load("eval", cfg.data.eval_specs())?))
}

fn ema_only(state: &TrainState) -> TrainState {
    TrainState {
        params: state.ema.clone(),
        ema: state.ema.clone(),
        opt: OptimizerState::new(&state.ema, state.opt.cfg.clone()),
        step: state.step,
    }
}

/// Rewrites `path` keeping only rows at or before `step` (header included).
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let f = BufReader::new(File::open(path)?);
    let mut kept = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        let keep = i == 0 || line.split(',').next().and_then(|s| s.parse::<u64>().ok()).is_some_and(|s| s <= step);
        if keep {
            kept.push(line);
        }
    }
    fs::write(path, kept.join("\n") + "\n")?;
    Ok(())
}

struct RunFiles {
    checkpoint: PathBuf,
    ema: PathBuf,
    metrics: PathBuf,
}

fn training_hook<'a>(files: &'a RunFiles, meta: &'a str) -> impl FnMut(&TrainState, &[MetricsRow]) -> Result<()> + 'a {
    move |state, rows| {
        let header = !files.metrics.exists();
        let f = fs::OpenOptions::new().create(true).append(true).open(&files.metrics)?;
        write_metrics(rows, header, f)?;
        checkpoint::save_file(state, meta, &files.checkpoint)?;
        checkpoint::save_file(&ema_only(state), meta, &files.ema)?;
        Ok(())
    }
}

fn report_outcome(result: Result<Vec<MetricsRow>>, files: &RunFiles) -> Result<()> {
    match result {
        Ok(rows) => {
            if let Some(e) = rows.iter().rev().find(|r| r.split == "eval") {
                println!(
                    "step {}: eval rel_l2 {:.4e}, vrmse median {:.4e}",
                    e.step,
                    e.rel_l2.unwrap_or(f64::NAN),
                    e.vrmse_median.unwrap_or(f64::NAN)
                );
            }
            println!("checkpoint {}", files.checkpoint.display());
            Ok(())
        }
        Err(e) => {
            if files.checkpoint.exists() {
                eprintln!("last good checkpoint kept at {}", files.checkpoint.display());
            }
            Err(e)
        }
    }
}

fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    let meta = cfg.to_toml();
    fs::write(cfg.out_dir.join("config.toml"), &meta)?;
    let (model, mut state) = init_model(&cfg.model, cfg.train.seed, cfg.train.adamw.clone())?;
    let files = RunFiles {
        checkpoint: cfg.out_dir.join("checkpoint.wlt"),
        ema: cfg.out_dir.join("ema.wlt"),
        metrics: cfg.out_dir.join("metrics.csv"),
    };
    match resume {
        Some(p) => {
            let (s, _) = checkpoint::load_file(p, cfg.train.adamw.clone())?;
            check_compatible(&state.params, &s.params)?;
            state = s;
            truncate_metrics(&files.metrics, state.step)?;
        }
        None => {
            if files.metrics.exists() {
                fs::remove_file(&files.metrics)?;
            }
        }
    }
    let (train, eval) = load_data(cfg)?;
    let ev = EvalSet::sample(eval, cfg.model.history, cfg.train.eval_samples, cfg.train.seed)?;
    let mut hook = training_hook(&files, &meta);
    let result = pretrain(&model, &mut state, &Corpus::single(train), Some(&ev), &cfg.train, &mut hook);
    report_outcome(result, &files)
}

fn cmd_finetune(cfg: &RunConfig, from: &Path) -> Result<()> {
    fs::create_dir_all(&cfg.out_dir)?;
    let meta = cfg.to_toml();
    let (model, fresh) = init_model(&cfg.model, cfg.train.seed, cfg.train.adamw.clone())?;
    let (mut state, _) = checkpoint::load_file(from, cfg.train.adamw.clone())?;
    check_compatible(&fresh.params, &state.params)?;
    let files = RunFiles {
        checkpoint: cfg.out_dir.join("finetune.wlt"),
        ema: cfg.out_dir.join("finetune_ema.wlt"),
        metrics: cfg.out_dir.join("finetune_metrics.csv"),
    };
    if state.step <= cfg.train.steps && files.metrics.exists() {
        fs::remove_file(&files.metrics)?;
    } else {
        truncate_metrics(&files.metrics, state.step)?;
    }
    let (train, eval) = load_data(cfg)?;
    let ev = EvalSet::sample(eval, cfg.model.history, cfg.train.eval_samples, cfg.train.seed)?;
    let mut hook = training_hook(&files, &meta);
    let result = rollout_finetune(&model, &mut state, &Corpus::single(train), Some(&ev), &cfg.train, &cfg.finetune, &mut hook);
    report_outcome(result, &files)
}

fn check_compatible(expected: &ParamStore, found: &ParamStore) -> Result<()> {
    let same = expected.names() == found.names()
        && expected.values().iter().zip(found.values()).all(|(a, b)| a.shape() == b.shape());
    if !same {
        return Err(Error::Config("checkpoint parameters do not match the configured model".into()));
    }
    Ok(())
}

fn model_step<'a>(model: &'a WaveLiT, params: &'a ParamStore) -> impl Fn(&Tensor) -> Result<Tensor> + Sync + 'a {
    move |h: &Tensor| {
        let mut shape = vec![1];
        shape.extend_from_slice(h.shape());
        model.predict(params, &h.reshape(&shape)?)
    }
}

fn cmd_eval(cfg: &RunConfig, ckpt: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (_, eval) = load_data(cfg)?;
    let history = cfg.model.history;
    let report = match ckpt {
        None => {
            let spec = cfg.data.template.clone();
            let step = |h: &Tensor| oracle_step(&spec, &h.index_axis0(h.shape()[0] - 1));
            rollout_report(step, &eval, history, &cfg.eval.windows)?
        }
        Some(p) => {
            if !p.exists() {
                return Err(Error::Usage(format!("checkpoint {} does not exist", p.display())));
            }
            let (model, fresh) = init_model(&cfg.model, cfg.train.seed, cfg.train.adamw.clone())?;
            let (state, _) = checkpoint::load_file(p, cfg.train.adamw.clone())?;
            check_compatible(&fresh.params, &state.params)?;
            let params = if cfg.eval.use_ema { &state.ema } else { &state.params };
            let step = model_step(&model, params);
            let mut report = rollout_report(&step, &eval, history, &cfg.eval.windows)?;
            if cfg.eval.lipschitz_directions > 0 {
                let probes: Vec<Tensor> = eval
                    .iter()
                    .take(4)
                    .map(|t| Tensor::stack(&(0..history).map(|i| t.frame(i)).collect::<Vec<_>>()))
                    .collect::<Result<_>>()?;
                let mut rng: ChaCha8Rng = stream_rng(cfg.train.seed, Stream::Eval, 1);
                let l = estimate_lipschitz(&step, &probes, cfg.eval.lipschitz_radius, cfg.eval.lipschitz_directions, &mut rng)?;
                report.lipschitz_hat = Some(l);
            }
            report
        }
    };
    for w in &report.windows {
        eprintln!(
            "{:<10} median VRMSE {:.4e}  median relL2 {:.4e}  ({} counted, {} diverged)",
            w.name, w.median_vrmse, w.median_rel_l2, w.counted, w.diverged
        );
    }
    eprint!("one-step error estimate {:.4e}", report.eps_hat);
    match report.lipschitz_hat {
        Some(l) => eprintln!(", Lipschitz estimate {l:.4}"),
        None => eprintln!(),
    }
    with_output(out, |w| report.write_csv(w))
}
