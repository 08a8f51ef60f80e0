//! Parameter sweeps over methods and seeds.
//!
//! Each `(value, method, seed)` cell lives in
//! `<out>/<param>_<value>/<method>/seed_<seed>/` and holds `config.toml`,
//! `eval.json` and `samples.csv` (plus the training run files for learned
//! methods). A cell whose `eval.json` exists and whose `config.toml` matches
//! the requested config is reused, so re-running a sweep only fills gaps.
//!
//! `sweep.csv` columns: `param,param_value,algo,seed,avg_vaoi,cvar,avg_cost`.
//! `summary.csv` columns: `param,param_value,algo,n_seeds` followed by
//! `_mean`, `_min` and `_max` of each metric.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

use super::config::ExperimentConfig;
use super::evaluate::{evaluate, write_samples, EvalSummary, Method, Scheduler};
use super::plot::{line_plot, PlotSpec, Series};
use super::run::{train_run, write_json, CONFIG_FILE};

pub const EVAL_FILE: &str = "eval.json";
pub const SAMPLES_FILE: &str = "samples.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    EtaMax,
    ArrivalRate,
    SuccessProb,
    NUsers,
    Alpha,
}

impl SweepParam {
    pub const ALL: [SweepParam; 5] = [
        SweepParam::EtaMax,
        SweepParam::ArrivalRate,
        SweepParam::SuccessProb,
        SweepParam::NUsers,
        SweepParam::Alpha,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::EtaMax => "eta_max",
            SweepParam::ArrivalRate => "arrival_rate",
            SweepParam::SuccessProb => "success_prob",
            SweepParam::NUsers => "n_users",
            SweepParam::Alpha => "alpha",
        }
    }

    /// Copy of `base` with the parameter set to `value`. An `alpha` sweep sets
    /// the training confidence level and the reported CVaR level together.
    pub fn apply(self, base: &ExperimentConfig, value: f64) -> Result<ExperimentConfig> {
        let mut cfg = base.clone();
        match self {
            SweepParam::EtaMax => cfg.env.eta_max = value,
            SweepParam::ArrivalRate => {
                cfg.env.arrival_rate = value;
                cfg.env.arrival_rates = None;
            }
            SweepParam::SuccessProb => cfg.env.success_prob = value,
            SweepParam::NUsers => {
                if value < 1.0 || value.fract() != 0.0 {
                    return Err(arg_err(format!("n_users must be a positive integer, got {value}")));
                }
                cfg.env.n_users = value as usize;
                cfg.env.arrival_rates = None;
            }
            SweepParam::Alpha => {
                cfg.train.alpha = value;
                if !cfg.eval.alphas.contains(&value) {
                    cfg.eval.alphas.insert(0, value);
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Confidence level reported in the `cvar` column.
    pub fn report_alpha(self, cfg: &ExperimentConfig) -> f64 {
        match self {
            SweepParam::Alpha => cfg.train.alpha,
            _ => cfg.eval.alphas.first().copied().unwrap_or(cfg.train.alpha),
        }
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| arg_err(format!("unknown sweep parameter '{s}'")))
    }
}

#[derive(Clone, Debug)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub base: ExperimentConfig,
    pub out_dir: PathBuf,
    /// Worker threads; cells are independent.
    pub jobs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: String,
    pub param_value: f64,
    pub algo: String,
    pub seed: u64,
    pub avg_vaoi: f64,
    pub cvar: f64,
    pub avg_cost: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub param: String,
    pub param_value: f64,
    pub algo: String,
    pub n_seeds: usize,
    pub avg_vaoi_mean: f64,
    pub avg_vaoi_min: f64,
    pub avg_vaoi_max: f64,
    pub cvar_mean: f64,
    pub cvar_min: f64,
    pub cvar_max: f64,
    pub avg_cost_mean: f64,
    pub avg_cost_min: f64,
    pub avg_cost_max: f64,
}

/// One finished cell.
#[derive(Clone, Debug)]
pub struct CellResult {
    pub row: SweepRow,
    pub summary: EvalSummary,
    pub dir: PathBuf,
    pub reused: bool,
}

#[derive(Clone, Debug)]
struct Cell {
    value: f64,
    method: Method,
    seed: u64,
    cfg: ExperimentConfig,
    dir: PathBuf,
}

pub fn cell_dir(out: &Path, param: SweepParam, value: f64, method: Method, seed: u64) -> PathBuf {
    out.join(format!("{param}_{value}"))
        .join(method.name())
        .join(format!("seed_{seed}"))
}

fn cached(cell: &Cell) -> Option<EvalSummary> {
    let cfg = ExperimentConfig::load(&cell.dir.join(CONFIG_FILE)).ok()?;
    if cfg != cell.cfg {
        return None;
    }
    serde_json::from_reader(File::open(cell.dir.join(EVAL_FILE)).ok()?).ok()
}

/// Train (for learned methods) and evaluate one configuration, writing
/// `eval.json` and `samples.csv` into `dir`.
pub fn run_cell(method: Method, cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<EvalSummary> {
    fs::create_dir_all(dir)?;
    let env = cfg.env_config();
    let (summary, traces) = match method {
        Method::Learned(algo) => {
            let run = train_run(algo, cfg, seed, dir)?;
            let scheduler = Scheduler::Learned {
                actor: &run.checkpoint.actor,
                greedy: cfg.eval.greedy,
            };
            evaluate(method.name(), &scheduler, &env, cfg.eval.slots, cfg.eval.episodes, seed, &cfg.eval.alphas)?
        }
        Method::Heuristic(kind) => {
            fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
            let scheduler = Scheduler::Heuristic(kind);
            evaluate(method.name(), &scheduler, &env, cfg.eval.slots, cfg.eval.episodes, seed, &cfg.eval.alphas)?
        }
    };
    write_samples(BufWriter::new(File::create(dir.join(SAMPLES_FILE))?), &traces)?;
    write_json(&dir.join(EVAL_FILE), &summary)?;
    Ok(summary)
}

fn cells(spec: &SweepSpec) -> Result<Vec<Cell>> {
    if spec.values.is_empty() {
        return Err(arg_err("sweep needs at least one value"));
    }
    if spec.methods.is_empty() || spec.seeds.is_empty() {
        return Err(arg_err("sweep needs at least one method and one seed"));
    }
    let mut out = Vec::new();
    for &value in &spec.values {
        let cfg = spec.param.apply(&spec.base, value)?;
        for &method in &spec.methods {
            for &seed in &spec.seeds {
                out.push(Cell {
                    value,
                    method,
                    seed,
                    cfg: cfg.clone(),
                    dir: cell_dir(&spec.out_dir, spec.param, value, method, seed),
                });
            }
        }
    }
    Ok(out)
}

fn finish_cell(spec: &SweepSpec, cell: &Cell) -> Result<CellResult> {
    let (summary, reused) = match cached(cell) {
        Some(s) => (s, true),
        None => (run_cell(cell.method, &cell.cfg, cell.seed, &cell.dir)?, false),
    };
    let alpha = spec.param.report_alpha(&cell.cfg);
    let cvar = summary
        .cvar_at(alpha)
        .ok_or_else(|| Error::State(format!("{} lacks CVaR at {alpha}", cell.dir.display())))?;
    Ok(CellResult {
        row: SweepRow {
            param: spec.param.name().into(),
            param_value: cell.value,
            algo: cell.method.name().into(),
            seed: cell.seed,
            avg_vaoi: summary.avg_vaoi,
            cvar,
            avg_cost: summary.avg_cost,
        },
        summary,
        dir: cell.dir.clone(),
        reused,
    })
}

/// Run every cell of the sweep, then write `sweep.csv`, `summary.csv` and
/// plots. Results come back in `(value, method, seed)` order.
pub fn run_sweep(spec: &SweepSpec) -> Result<Vec<CellResult>> {
    let cells = cells(spec)?;
    fs::create_dir_all(&spec.out_dir)?;
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<CellResult>>>> = Mutex::new((0..cells.len()).map(|_| None).collect());
    let workers = spec.jobs.clamp(1, cells.len());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= cells.len() {
                    break;
                }
                let res = finish_cell(spec, &cells[i]);
                let failed = res.is_err();
                slots.lock().unwrap_or_else(|e| e.into_inner())[i] = Some(res);
                if failed {
                    next.store(cells.len(), Ordering::Relaxed);
                }
            });
        }
    });
    let mut results = Vec::with_capacity(cells.len());
    for r in slots.into_inner().unwrap_or_else(|e| e.into_inner()) {
        match r {
            Some(r) => results.push(r?),
            None => continue,
        }
    }
    if results.len() != cells.len() {
        return Err(Error::State("sweep stopped early".into()));
    }
    let rows: Vec<SweepRow> = results.iter().map(|c| c.row.clone()).collect();
    write_outputs(&spec.out_dir, &rows)?;
    Ok(results)
}

fn stats(xs: impl Iterator<Item = f64> + Clone) -> (f64, f64, f64) {
    let n = xs.clone().count() as f64;
    let mean = xs.clone().sum::<f64>() / n;
    let min = xs.clone().fold(f64::INFINITY, f64::min);
    let max = xs.fold(f64::NEG_INFINITY, f64::max);
    (mean, min, max)
}

/// Mean, min and max over seeds for each `(param_value, algo)` pair, in order
/// of first appearance.
pub fn aggregate(rows: &[SweepRow]) -> Vec<SummaryRow> {
    let mut order: Vec<(String, f64, String)> = Vec::new();
    let mut groups: BTreeMap<usize, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        let key = (r.param.clone(), r.param_value, r.algo.clone());
        let idx = order.iter().position(|k| *k == key).unwrap_or_else(|| {
            order.push(key);
            order.len() - 1
        });
        groups.entry(idx).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(idx, g)| {
            let (param, param_value, algo) = order[idx].clone();
            let (vm, vlo, vhi) = stats(g.iter().map(|r| r.avg_vaoi));
            let (cm, clo, chi) = stats(g.iter().map(|r| r.cvar));
            let (km, klo, khi) = stats(g.iter().map(|r| r.avg_cost));
            SummaryRow {
                param,
                param_value,
                algo,
                n_seeds: g.len(),
                avg_vaoi_mean: vm,
                avg_vaoi_min: vlo,
                avg_vaoi_max: vhi,
                cvar_mean: cm,
                cvar_min: clo,
                cvar_max: chi,
                avg_cost_mean: km,
                avg_cost_min: klo,
                avg_cost_max: khi,
            }
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Write `sweep.csv`, `summary.csv` and the plots for `rows`.
pub fn write_outputs(out: &Path, rows: &[SweepRow]) -> Result<Vec<PathBuf>> {
    write_csv(&out.join(SWEEP_FILE), rows)?;
    let summary = aggregate(rows);
    write_csv(&out.join(SUMMARY_FILE), &summary)?;
    plot_summary(&out.join("plots"), &summary)
}

/// One plot per metric: mean over seeds with min/max bars, one line per method.
pub fn plot_summary(dir: &Path, summary: &[SummaryRow]) -> Result<Vec<PathBuf>> {
    let param = summary.first().map(|r| r.param.clone()).ok_or_else(|| arg_err("nothing to plot"))?;
    let mut files = Vec::new();
    let metrics: [(&str, &str, fn(&SummaryRow) -> (f64, f64, f64)); 3] = [
        ("avg_vaoi", "average VAoI", |r| (r.avg_vaoi_mean, r.avg_vaoi_min, r.avg_vaoi_max)),
        ("cvar", "CVaR of VAoI", |r| (r.cvar_mean, r.cvar_min, r.cvar_max)),
        ("avg_cost", "average cost", |r| (r.avg_cost_mean, r.avg_cost_min, r.avg_cost_max)),
    ];
    for (key, label, get) in metrics {
        let mut series: Vec<Series> = Vec::new();
        for r in summary {
            let (m, lo, hi) = get(r);
            let idx = match series.iter().position(|s| s.name == r.algo) {
                Some(i) => i,
                None => {
                    series.push(Series { name: r.algo.clone(), points: Vec::new() });
                    series.len() - 1
                }
            };
            series[idx].points.push((r.param_value, m, lo, hi));
        }
        for s in &mut series {
            s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        let title = format!("{label} vs {param}");
        let spec = PlotSpec { title: &title, x_label: &param, y_label: label };
        files.extend(line_plot(&dir.join(format!("{param}_{key}")), &spec, &series)?);
    }
    Ok(files)
}
