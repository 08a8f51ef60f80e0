//! Training run directories.
//!
//! Layout of a run directory:
//!
//! ```text
//! manifest.json        status, config snapshot, seed, revision, timestamps
//! config.toml          the experiment config the run was started with
//! metrics.csv          iteration,mean_reward,mean_vaoi,lambda,eta,critic_loss,actor_loss,updates
//! timing.csv           iteration,seconds
//! ckpt_iter_XXXX.json  periodic checkpoints
//! ckpt_final.json      final checkpoint
//! ```

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::agents::{Algo, IterationMetrics, PolicyCheckpoint, Trainer, CHECKPOINT_FORMAT};
use crate::error::{Error, Result};

use super::config::ExperimentConfig;

/// Environment variable naming the default output root.
pub const OUT_ROOT_VAR: &str = "VAOI_OUT_ROOT";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const METRICS_FILE: &str = "metrics.csv";
pub const TIMING_FILE: &str = "timing.csv";
pub const FINAL_CHECKPOINT: &str = "ckpt_final.json";

/// Source revision baked in at build time.
pub const CODE_REVISION: &str = env!("VAOI_CODE_REVISION");

/// `$VAOI_OUT_ROOT`, or `runs` when unset.
pub fn default_out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_VAR)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Running,
    Completed,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub algo: Algo,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub revision: String,
    pub status: RunStatus,
    pub started_at: String,
    pub finished_at: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    /// Files written so far, relative to the run directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(File::open(dir.join(MANIFEST_FILE))?)?)
    }

    fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST_FILE), self)
    }
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let tmp = path.with_extension("json.tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        serde_json::to_writer_pretty(&mut w, value)?;
        std::io::Write::flush(&mut w)?;
    }
    fs::rename(tmp, path)?;
    Ok(())
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("ckpt_iter_{iteration:04}.json")
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyCheckpoint> {
    let ckpt: PolicyCheckpoint = serde_json::from_reader(std::io::BufReader::new(File::open(path)?))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::Mismatch(format!(
            "unsupported checkpoint format '{}'",
            ckpt.format
        )));
    }
    Ok(ckpt)
}

/// Result of a finished training run.
pub struct TrainedRun {
    pub dir: PathBuf,
    pub checkpoint: PolicyCheckpoint,
    pub metrics: Vec<IterationMetrics>,
}

/// Train `algo` and persist the run under `dir`. The manifest is written
/// before the first iteration and marked failed if training errors.
pub fn train_run(algo: Algo, cfg: &ExperimentConfig, seed: u64, dir: &Path) -> Result<TrainedRun> {
    cfg.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = RunManifest {
        algo,
        config: cfg.clone(),
        seed,
        revision: CODE_REVISION.to_string(),
        status: RunStatus::Running,
        started_at: now(),
        finished_at: None,
        error: None,
        outputs: vec![CONFIG_FILE.into(), METRICS_FILE.into(), TIMING_FILE.into()],
    };
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    manifest.save(dir)?;
    match train_loop(algo, cfg, seed, dir, &mut manifest) {
        Ok(run) => {
            manifest.status = RunStatus::Completed;
            manifest.finished_at = Some(now());
            manifest.save(dir)?;
            Ok(run)
        }
        Err(e) => {
            manifest.status = RunStatus::Failed;
            manifest.finished_at = Some(now());
            manifest.error = Some(e.to_string());
            manifest.save(dir)?;
            Err(e)
        }
    }
}

fn train_loop(
    algo: Algo,
    cfg: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<TrainedRun> {
    let mut trainer = Trainer::new(algo, cfg.env_config(), cfg.train.clone(), seed)?;
    let mut metrics_csv = csv::Writer::from_path(dir.join(METRICS_FILE))?;
    let mut timing_csv = csv::Writer::from_path(dir.join(TIMING_FILE))?;
    timing_csv.write_record(["iteration", "seconds"])?;
    let mut metrics = Vec::with_capacity(cfg.train.iterations);
    for _ in 0..cfg.train.iterations {
        let start = Instant::now();
        let m = trainer.train_iteration()?;
        if !m.lambda.is_finite() || !m.mean_reward.is_finite() {
            return Err(Error::Numerical(format!("non-finite metrics at iteration {}", m.iteration)));
        }
        metrics_csv.serialize(&m)?;
        metrics_csv.flush()?;
        timing_csv.write_record([m.iteration.to_string(), format!("{:.6}", start.elapsed().as_secs_f64())])?;
        timing_csv.flush()?;
        let every = cfg.train.checkpoint_every;
        if every > 0 && m.iteration % every == 0 && m.iteration < cfg.train.iterations {
            let name = checkpoint_name(m.iteration);
            write_json(&dir.join(&name), &trainer.checkpoint())?;
            manifest.outputs.push(name);
            manifest.save(dir)?;
        }
        metrics.push(m);
    }
    let checkpoint = trainer.checkpoint();
    write_json(&dir.join(FINAL_CHECKPOINT), &checkpoint)?;
    manifest.outputs.push(FINAL_CHECKPOINT.into());
    Ok(TrainedRun {
        dir: dir.to_path_buf(),
        checkpoint,
        metrics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::Profile;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::profile(Profile::Desk);
        cfg.env.n_users = 2;
        cfg.env.d_max = 8;
        cfg.train.iterations = 3;
        cfg.train.transitions_per_iteration = 40;
        cfg.train.batch_size = 32;
        cfg.train.hidden = vec![8, 8];
        cfg.train.n_quantiles = 4;
        cfg.train.diffusion_arch = crate::diffusion::DiffusionArch::tiny(8);
        cfg.train.checkpoint_every = 2;
        cfg
    }

    #[test]
    fn run_directory_contents() {
        let dir = tempfile::tempdir().unwrap();
        let run = train_run(Algo::RsD3sac, &tiny(), 4, dir.path()).unwrap();
        assert_eq!(run.metrics.len(), 3);
        let m = RunManifest::load(dir.path()).unwrap();
        assert_eq!(m.status, RunStatus::Completed);
        assert!(m.finished_at.is_some());
        assert_eq!(m.config, tiny());
        for f in &m.outputs {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        assert!(m.outputs.contains(&"ckpt_iter_0002.json".to_string()));
        let ckpt = load_checkpoint(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(ckpt, run.checkpoint);
        assert_eq!(ckpt.iteration, 3);
        let cfg = ExperimentConfig::load(&dir.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(cfg, tiny());
        let text = fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
        assert!(text.starts_with("iteration,mean_reward,mean_vaoi,lambda,eta,critic_loss,actor_loss,updates\n"));
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn identical_runs_identical_metrics() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        train_run(Algo::D2sac, &tiny(), 9, a.path()).unwrap();
        train_run(Algo::D2sac, &tiny(), 9, b.path()).unwrap();
        let read = |d: &Path| fs::read(d.join(METRICS_FILE)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
        let read = |d: &Path| fs::read(d.join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(read(a.path()), read(b.path()));
    }

    #[test]
    fn invalid_config_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.train.gamma = 1.5;
        assert!(train_run(Algo::Sac, &cfg, 1, &dir.path().join("r")).is_err());
        assert!(!dir.path().join("r").exists());
    }

    #[test]
    fn bad_checkpoint_format() {
        let dir = tempfile::tempdir().unwrap();
        let run = train_run(Algo::Sac, &tiny(), 1, dir.path()).unwrap();
        let mut ck = run.checkpoint;
        ck.format = "other".into();
        let p = dir.path().join("x.json");
        write_json(&p, &ck).unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Mismatch(_))));
    }
}
