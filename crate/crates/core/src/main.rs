use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vaoi_core::agents::Algo;
use vaoi_core::harness::plot::{line_plot, PlotSpec, Series};
use vaoi_core::harness::sweep::{read_rows, write_outputs, SWEEP_FILE};
use vaoi_core::harness::{
    default_out_root, deploy, eval_seed, load_checkpoint, run_sweep, summarize, train_run, write_samples,
    ExperimentConfig, Method, Profile, Scheduler, SweepParam, SweepSpec,
};
use vaoi_core::oracles::{oracle_report, SmallInstance};

#[derive(Parser)]
#[command(name = "vaoi", version, about = "VAoI scheduling with diffusion and risk-sensitive soft actor-critic")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Experiment file (TOML, or JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in defaults used when no config file is given: desk or full.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// CVaR confidence level for training; sets phi = 1 - alpha.
    #[arg(long)]
    alpha: Option<f64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => ExperimentConfig::profile(self.profile.parse::<Profile>()?),
        };
        if let Some(a) = self.alpha {
            cfg.train.alpha = a;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent and write a run directory.
    Train {
        #[arg(long)]
        algo: Algo,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Run directory; defaults to `$VAOI_OUT_ROOT/<algo>_seed_<seed>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Deploy a frozen checkpoint and write eval.json and samples.csv.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Environment to evaluate in; defaults to the checkpoint's own.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 5000)]
        slots: usize,
        /// Evaluation seeds; derived from the training seed when omitted.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "0.75")]
        alpha: Vec<f64>,
        /// Take the most likely action instead of sampling.
        #[arg(long)]
        greedy: bool,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every (value, method, seed) cell of a sweep.
    Sweep {
        /// eta_max, arrival_rate, success_prob, n_users or alpha.
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Learned algorithms and heuristics (greedy_max_vaoi, random_budget, always_idle).
        #[arg(long, value_delimiter = ',', default_value = "sac,d2sac,rs_dsac,rs_d3sac")]
        algos: Vec<Method>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Solve a small instance exactly and print a JSON report.
    Oracle {
        /// Arrival rate per user; give two values for two users.
        #[arg(long, value_delimiter = ',', default_value = "0.5")]
        arrival_rate: Vec<f64>,
        #[arg(long, default_value_t = 0.9)]
        success_prob: f64,
        #[arg(long, default_value_t = 3)]
        d_max: u32,
        #[arg(long, default_value_t = 0.95)]
        gamma: f64,
        #[arg(long, default_value_t = 0.3)]
        lambda: f64,
        #[arg(long, value_delimiter = ',', default_value = "0.5,0.75,0.9")]
        alpha: Vec<f64>,
    },
    /// Redraw plots for a sweep directory or training curves for a run directory.
    Plot {
        dir: PathBuf,
    },
}

fn train(algo: Algo, cfg: &ConfigArgs, seed: u64, out: Option<PathBuf>) -> Result<()> {
    let cfg = cfg.load()?;
    let dir = out.unwrap_or_else(|| default_out_root().join(format!("{algo}_seed_{seed}")));
    let run = train_run(algo, &cfg, seed, &dir)?;
    let last = run.metrics.last().context("no iterations were run")?;
    println!(
        "{}: {} iterations, mean VAoI {:.4}, lambda {:.4}, eta {:.4}",
        dir.display(),
        last.iteration,
        last.mean_vaoi,
        last.lambda,
        last.eta
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    checkpoint: &Path,
    config: Option<&Path>,
    slots: usize,
    seeds: Vec<u64>,
    alphas: &[f64],
    greedy: bool,
    out: Option<PathBuf>,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let env = match config {
        Some(p) => ExperimentConfig::load(p)?.env_config(),
        None => ckpt.env.clone(),
    };
    ckpt.check_env(&env)?;
    let seeds = if seeds.is_empty() { vec![eval_seed(ckpt.seed, 0)] } else { seeds };
    let scheduler = Scheduler::Learned { actor: &ckpt.actor, greedy };
    let traces = seeds
        .iter()
        .map(|&s| deploy(&scheduler, &env, slots, s).map(|t| (s, t)))
        .collect::<vaoi_core::Result<Vec<_>>>()?;
    let summary = summarize(ckpt.algo.name(), &traces, alphas, env.eta_max)?;
    let dir = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    fs::create_dir_all(&dir)?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("eval.json"))?), &summary)?;
    write_samples(BufWriter::new(File::create(dir.join("samples.csv"))?), &traces)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn plot(dir: &Path) -> Result<()> {
    let sweep = dir.join(SWEEP_FILE);
    let metrics = dir.join("metrics.csv");
    if sweep.exists() {
        let rows = read_rows(&sweep)?;
        let files = write_outputs(dir, &rows)?;
        files.iter().for_each(|f| println!("{}", f.display()));
    } else if metrics.exists() {
        let mut reader = csv::Reader::from_path(&metrics)?;
        let rows: Vec<vaoi_core::agents::IterationMetrics> =
            reader.deserialize().collect::<std::result::Result<_, _>>()?;
        let curves: [(&str, fn(&vaoi_core::agents::IterationMetrics) -> f64); 3] =
            [("mean_vaoi", |m| m.mean_vaoi), ("lambda", |m| m.lambda), ("eta", |m| m.eta)];
        for (name, get) in curves {
            let series = vec![Series {
                name: name.into(),
                points: rows
                    .iter()
                    .map(|m| {
                        let y = get(m);
                        (m.iteration as f64, y, y, y)
                    })
                    .collect(),
            }];
            let spec = PlotSpec { title: name, x_label: "iteration", y_label: name };
            for f in line_plot(&dir.join("plots").join(format!("train_{name}")), &spec, &series)? {
                println!("{}", f.display());
            }
        }
    } else {
        bail!("{} holds neither {SWEEP_FILE} nor metrics.csv", dir.display());
    }
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { algo, cfg, seed, out } => train(algo, &cfg, seed, out),
        Command::Evaluate { checkpoint, config, slots, seeds, alpha, greedy, out } => {
            evaluate(&checkpoint, config.as_deref(), slots, seeds, &alpha, greedy, out)
        }
        Command::Sweep { param, values, algos, seeds, cfg, out, jobs } => {
            let base = cfg.load()?;
            let seeds = if seeds.is_empty() { base.seeds.clone() } else { seeds };
            let out = out.unwrap_or_else(|| default_out_root().join(format!("sweep_{param}")));
            let spec = SweepSpec { param, values, methods: algos, seeds, base, out_dir: out.clone(), jobs };
            let results = run_sweep(&spec)?;
            let reused = results.iter().filter(|c| c.reused).count();
            println!("{} cells ({reused} reused); results in {}", results.len(), out.display());
            Ok(())
        }
        Command::Oracle { arrival_rate, success_prob, d_max, gamma, lambda, alpha } => {
            let inst = SmallInstance { arrival_rates: arrival_rate, success_prob, d_max, gamma, lambda };
            inst.validate()?;
            println!("{}", serde_json::to_string_pretty(&oracle_report(&inst, &alpha)?)?);
            Ok(())
        }
        Command::Plot { dir } => plot(&dir),
    }
}
