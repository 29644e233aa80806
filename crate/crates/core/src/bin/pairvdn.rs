use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use pairvdn::boxjump::{write_log, BoxJumpConfig, BoxWorldState, LogRecord, NUM_ACTIONS};
use pairvdn::checkpoint::Checkpoint;
use pairvdn::config::RunConfigFile;
use pairvdn::env::Environment;
use pairvdn::matrix::MatrixGameSpec;
use pairvdn::maximizer::{bench_scaling, format_bench_rows};
use pairvdn::models::num_actions_for;
use pairvdn::training::{evaluate, format_curve, train_with, EnvSpec, Policy, QModel};
use pairvdn::verify::{self, Suite};

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(name = "pairvdn", version, about = "Pairwise value decomposition for cooperative multi-agent Q-learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a TOML run config.
    Train {
        config: PathBuf,
    },
    /// Evaluate a checkpoint (or a random policy) with the greedy policy.
    Eval(EvalArgs),
    /// Time the cycle maximizer on random instances; prints `n,mean_seconds`.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "250,500,1000,2000")]
        n: Vec<usize>,
        #[arg(long, default_value_t = 4)]
        actions: usize,
        #[arg(long, default_value_t = 5)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run an oracle verification suite.
    Verify {
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Dump Box Jump frames (binary PPM) and an episode log.
    Render(RenderArgs),
}

#[derive(Args)]
struct PolicyArgs {
    /// Model checkpoint to act greedily with.
    #[arg(long, conflicts_with = "random", required_unless_present = "random")]
    checkpoint: Option<PathBuf>,
    /// Uniform random actions instead of a checkpoint.
    #[arg(long)]
    random: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    policy: PolicyArgs,
    /// `boxjump`, `unison` or `table:<path>`.
    #[arg(long, default_value = "boxjump")]
    env: String,
    #[arg(long, default_value_t = 16)]
    n_agents: usize,
    /// Action count for `unison`.
    #[arg(long, default_value_t = 2)]
    num_actions: usize,
    #[arg(long, default_value_t = 20)]
    episodes: usize,
    #[arg(long, default_value_t = 400)]
    tmax: usize,
    /// First episode seed; episode k uses seed + k.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct RenderArgs {
    #[command(flatten)]
    policy: PolicyArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 400)]
    tmax: usize,
    #[arg(long, default_value_t = 16)]
    n_agents: usize,
    /// Write a frame every this many steps.
    #[arg(long, default_value_t = 50)]
    every: usize,
    #[arg(long, default_value_t = 256)]
    size: usize,
    #[arg(long)]
    outdir: PathBuf,
}

/// Error carrying the exit code it should produce.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn usage(err: anyhow::Error) -> Failure {
    Failure { code: EXIT_USAGE, err }
}

fn failed(err: anyhow::Error) -> Failure {
    Failure { code: EXIT_FAILURE, err }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config } => cmd_train(&config),
        Command::Eval(args) => cmd_eval(&args),
        Command::Bench { n, actions, trials, seed } => cmd_bench(&n, actions, trials, seed),
        Command::Verify { suite, seed } => cmd_verify(&suite, seed),
        Command::Render(args) => cmd_render(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".into())
}

fn cmd_train(config: &Path) -> Result<(), Failure> {
    if !config.is_file() {
        return Err(usage(anyhow!("config not found: {}", config.display())));
    }
    let (file, source) = RunConfigFile::load(config)
        .map_err(|e| usage(anyhow!("{}: {e}", config.display())))?;
    let plan = file
        .resolve(&source)
        .map_err(|e| usage(anyhow!("{}: {e}", config.display())))?;

    let out = &plan.file.output_dir;
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(failed)?;
    let manifest = format!(
        "config_sha256 = \"{}\"\nseed = {}\ngit_describe = \"{}\"\n\n[config]\n{}",
        plan.file.sha256(),
        plan.file.seed,
        git_describe(),
        plan.file.canonical()
    );
    fs::write(out.join("manifest"), manifest).map_err(|e| failed(e.into()))?;

    let n_agents = match &plan.env {
        EnvSpec::BoxJump(c) => c.n_agents,
        EnvSpec::Matrix(m) => m.n(),
    };
    let mut curve = Vec::new();
    let curve_path = out.join("curve.csv");
    let outcome = train_with(&plan.train, &plan.env, plan.kind, |point, model| {
        curve.push(*point);
        fs::write(&curve_path, format_curve(&curve))?;
        Checkpoint {
            kind: model.kind,
            n_agents,
            params: model.params.clone(),
        }
        .save(&out.join(format!("ckpt_{:03}", point.epoch)))?;
        eprintln!(
            "epoch {:>3}: reward {:.4} ± {:.4}",
            point.epoch, point.mean_reward, point.std_reward
        );
        Ok(())
    })
    .map_err(|e| failed(e.into()))?;

    fs::write(&curve_path, format_curve(&outcome.curve)).map_err(|e| failed(e.into()))?;
    Checkpoint {
        kind: plan.kind,
        n_agents,
        params: outcome.model.params,
    }
    .save(&out.join("ckpt_final"))
    .map_err(|e| failed(e.into()))?;
    println!(
        "trained {} for {} epochs ({} env steps, {} SGD steps); outputs in {}",
        plan.kind,
        plan.train.epochs,
        outcome.env_steps,
        outcome.sgd_steps,
        out.display()
    );
    Ok(())
}

fn build_env(name: &str, n_agents: usize, num_actions: usize, t_max: usize) -> Result<EnvSpec> {
    Ok(if name == "boxjump" {
        EnvSpec::BoxJump(BoxJumpConfig::new(n_agents, t_max))
    } else if name == "unison" {
        EnvSpec::Matrix(MatrixGameSpec::unison(n_agents, num_actions)?)
    } else if let Some(path) = name.strip_prefix("table:") {
        EnvSpec::Matrix(MatrixGameSpec::from_table_file(Path::new(path))?)
    } else {
        bail!("unknown environment `{name}` (expected boxjump, unison or table:<path>)")
    })
}

/// Loads a checkpoint and checks it fits the environment.
fn load_model(path: &Path, env: &dyn Environment) -> Result<QModel, Failure> {
    let ckpt = Checkpoint::load(path)
        .with_context(|| format!("loading checkpoint {}", path.display()))
        .map_err(usage)?;
    let n = env.n_agents();
    if ckpt.n_agents != n {
        return Err(usage(anyhow!(
            "checkpoint was trained with {} agents, environment has {n}",
            ckpt.n_agents
        )));
    }
    let want_in = ckpt.kind.input_dim(env.obs_dim(), n);
    let actions = num_actions_for(ckpt.kind, &ckpt.params).map_err(|e| usage(e.into()))?;
    if ckpt.params.input_dim() != want_in || actions != env.num_actions() {
        return Err(usage(anyhow!(
            "{} checkpoint (input {}, {} actions) does not match environment (input {want_in}, {} actions)",
            ckpt.kind,
            ckpt.params.input_dim(),
            actions,
            env.num_actions()
        )));
    }
    Ok(QModel {
        kind: ckpt.kind,
        params: ckpt.params,
    })
}

fn cmd_eval(args: &EvalArgs) -> Result<(), Failure> {
    if args.episodes == 0 {
        return Err(usage(anyhow!("--episodes must be >= 1")));
    }
    let spec = build_env(&args.env, args.n_agents, args.num_actions, args.tmax).map_err(usage)?;
    let mut env = spec.build().map_err(|e| usage(e.into()))?;
    let model;
    let (label, mut policy) = match &args.policy.checkpoint {
        Some(path) => {
            model = load_model(path, env.as_ref())?;
            (model.kind.as_str(), Policy::Greedy(&model))
        }
        None => ("random", Policy::random(args.seed)),
    };
    let (stats, _) = evaluate(env.as_mut(), &mut policy, args.episodes, args.tmax, args.seed)
        .map_err(|e| failed(e.into()))?;
    println!(
        "{label} | t_max={} | episodes={} | {:.3} ± {:.3}",
        args.tmax, args.episodes, stats.mean, stats.std
    );
    Ok(())
}

fn cmd_bench(n: &[usize], actions: usize, trials: usize, seed: u64) -> Result<(), Failure> {
    if n.iter().any(|&k| k < 2) || actions == 0 {
        return Err(usage(anyhow!("need n >= 2 and actions >= 1")));
    }
    let rows = bench_scaling(n, actions, trials, seed).map_err(|e| usage(e.into()))?;
    print!("{}", format_bench_rows(&rows));
    Ok(())
}

fn cmd_verify(suite: &str, seed: u64) -> Result<(), Failure> {
    let suite: Suite = suite.parse().map_err(|e: pairvdn::Error| usage(e.into()))?;
    let report = verify::run(suite, seed).map_err(|e| failed(e.into()))?;
    for f in &report.failures {
        println!("counterexample: {f}");
    }
    println!(
        "{suite:?}: {} cases, {} failures, worst discrepancy {:e}",
        report.cases,
        report.failures.len(),
        report.worst
    );
    if report.passed() {
        Ok(())
    } else {
        Err(failed(anyhow!("{} violations", report.failures.len())))
    }
}

fn cmd_render(args: &RenderArgs) -> Result<(), Failure> {
    if args.every == 0 || args.size < 8 {
        return Err(usage(anyhow!("--every must be >= 1 and --size >= 8")));
    }
    let cfg = BoxJumpConfig::new(args.n_agents, args.tmax);
    let env = pairvdn::boxjump::BoxJumpEnv::new(cfg.clone()).map_err(|e| usage(e.into()))?;
    let model;
    let mut policy = match &args.policy.checkpoint {
        Some(path) => {
            model = load_model(path, &env)?;
            Policy::Greedy(&model)
        }
        None => Policy::random(args.seed),
    };
    let frames = args.outdir.join("frames");
    fs::create_dir_all(&frames)
        .with_context(|| format!("creating {}", frames.display()))
        .map_err(failed)?;

    let mut state = BoxWorldState::reset(&cfg, args.seed).map_err(|e| usage(e.into()))?;
    let write_frame = |state: &BoxWorldState, step: usize| -> Result<()> {
        let path = frames.join(format!("frame_{step:05}.ppm"));
        fs::write(&path, state.render_ppm(args.size, args.size))
            .with_context(|| format!("writing {}", path.display()))
    };
    write_frame(&state, 0).map_err(failed)?;
    let mut log = Vec::with_capacity(args.tmax);
    let mut step = 0;
    while !state.is_done() {
        let obs = state.observe();
        let actions = match &mut policy {
            Policy::Greedy(m) => m.greedy(&obs).map_err(|e| failed(e.into()))?,
            Policy::Random(rng) => {
                use rand::Rng;
                (0..args.n_agents).map(|_| rng.gen_range(0..NUM_ACTIONS)).collect()
            }
        };
        let out = state.step(&actions).map_err(|e| failed(e.into()))?;
        step += 1;
        log.push(LogRecord {
            step,
            actions,
            reward: out.reward,
            y_best: state.y_best(),
        });
        if step % args.every == 0 {
            write_frame(&state, step).map_err(failed)?;
        }
    }
    let log_file = fs::File::create(args.outdir.join("episode.log")).map_err(|e| failed(e.into()))?;
    write_log(std::io::BufWriter::new(log_file), &log).map_err(|e| failed(e.into()))?;
    println!(
        "rendered {} steps, final y_best {:.4}, frames in {}",
        step,
        state.y_best(),
        frames.display()
    );
    Ok(())
}
