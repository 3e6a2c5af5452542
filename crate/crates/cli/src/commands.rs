use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use lfd_core::demos::{augment_demos, generate_demos, read_dataset_file, split_dataset, write_dataset_file, Demonstration, Outcome, Waypoint};
use lfd_core::nn::Architecture;
use lfd_core::runtime::{evaluate, replay as replay_trace, Controller, FailureReason, NetworkController};
use lfd_core::sim::{GRIPPER_DIM, OBS_DIM};
use lfd_core::training::{train_with_progress, Checkpoint, TrainStats};
use lfd_core::wire::to_line;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{Provenance, Resolved};

/// Hex SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetReport {
    pub path: PathBuf,
    pub demonstrations: usize,
    pub successes: usize,
    pub with_corrections: usize,
    pub mean_waypoints: f64,
    pub digest: String,
    pub provenance: Provenance,
}

fn dataset_report(path: &Path, demos: &[Demonstration], cfg: &Resolved) -> Result<DatasetReport> {
    let waypoints: usize = demos.iter().map(Demonstration::len).sum();
    Ok(DatasetReport {
        path: path.to_path_buf(),
        demonstrations: demos.len(),
        successes: demos.iter().filter(|d| d.outcome == Outcome::Success).count(),
        with_corrections: demos.iter().filter(|d| d.corrections > 0).count(),
        mean_waypoints: waypoints as f64 / demos.len().max(1) as f64,
        digest: file_digest(path)?,
        provenance: cfg.provenance()?,
    })
}

pub fn gen_demos(cfg: &Resolved, out: &Path) -> Result<DatasetReport> {
    let c = &cfg.config;
    let task = Arc::new(c.scene());
    let demos = generate_demos(&task, c.demos.count, c.seed, &c.imperfections)?;
    write_dataset_file(out, &demos).with_context(|| format!("writing {}", out.display()))?;
    dataset_report(out, &demos, cfg)
}

pub fn augment(cfg: &Resolved, input: &Path, out: &Path) -> Result<DatasetReport> {
    let demos = read_dataset_file(input).with_context(|| format!("reading {}", input.display()))?;
    let Some(first) = demos.first() else {
        bail!("{} holds no demonstrations", input.display());
    };
    let mut scene = cfg.config.scene();
    if first.task != scene.kind {
        if cfg.config.scene.is_some() {
            bail!("dataset is {}, configured scene is {}", first.task, scene.kind);
        }
        scene = lfd_core::sim::TaskSpec::for_kind(first.task);
    }
    let augmented = augment_demos(&demos, &scene)?;
    write_dataset_file(out, &augmented).with_context(|| format!("writing {}", out.display()))?;
    dataset_report(out, &augmented, cfg)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub checkpoint_digest: String,
    pub architecture: Architecture,
    pub demonstrations: usize,
    pub stats: TrainStats,
    pub provenance: Provenance,
}

/// Trains `architecture` on a dataset file. Progress lines go to `log`.
pub fn train(cfg: &Resolved, dataset: &Path, architecture: Architecture, out: &Path, log: &mut dyn Write) -> Result<TrainReport> {
    let c = &cfg.config;
    let demos = read_dataset_file(dataset).with_context(|| format!("reading {}", dataset.display()))?;
    let count = demos.len();
    let data = split_dataset(demos, &mut ChaCha8Rng::seed_from_u64(c.training.seed))?;
    let spec = architecture.spec(OBS_DIM, GRIPPER_DIM);
    let (mut checkpoint, stats) = train_with_progress(&data, spec, &c.training, |r| {
        let _ = writeln!(
            log,
            "epoch {:>4}  train {:>12.5}  validation {:>12.5}  best {}",
            r.epoch, r.train_loss, r.validation_loss, r.best_epoch
        );
    })?;
    checkpoint.config_digest = c.digest()?;
    checkpoint.save(out).with_context(|| format!("writing {}", out.display()))?;
    Ok(TrainReport {
        checkpoint: out.to_path_buf(),
        checkpoint_digest: file_digest(out)?,
        architecture,
        demonstrations: count,
        stats,
        provenance: cfg.provenance()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub success: bool,
    pub elapsed: f64,
    pub waypoints: usize,
    pub waypoint_timeouts: usize,
    pub failure: FailureReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub controller: String,
    pub task: lfd_core::sim::TaskKind,
    pub trials: usize,
    pub base_seed: u64,
    pub success_rate: f64,
    pub results: Vec<TrialRecord>,
    pub provenance: Provenance,
}

impl EvalReport {
    /// Summary line followed by one line per trial.
    pub fn to_jsonl(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Summary<'a> {
            controller: &'a str,
            task: lfd_core::sim::TaskKind,
            trials: usize,
            base_seed: u64,
            success_rate: f64,
            provenance: &'a Provenance,
        }
        let mut out = to_line(&Summary {
            controller: &self.controller,
            task: self.task,
            trials: self.trials,
            base_seed: self.base_seed,
            success_rate: self.success_rate,
            provenance: &self.provenance,
        })?;
        out.push('\n');
        for r in &self.results {
            out.push_str(&to_line(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Evaluates any controller with the configured task, trials and seed.
pub fn eval_controller(cfg: &Resolved, label: &str, controller: &mut dyn Controller) -> Result<EvalReport> {
    let c = &cfg.config;
    let task = Arc::new(c.scene());
    let e = evaluate(controller, Arc::clone(&task), c.eval.trials, c.seed, &c.execution)?;
    Ok(EvalReport {
        controller: label.to_string(),
        task: task.kind,
        trials: c.eval.trials,
        base_seed: c.seed,
        success_rate: e.success_rate,
        results: e
            .trials
            .into_iter()
            .map(|t| TrialRecord {
                seed: t.seed,
                success: t.success,
                elapsed: t.elapsed,
                waypoints: t.waypoints,
                waypoint_timeouts: t.waypoint_timeouts,
                failure: t.failure,
                diagnostic: t.diagnostic,
            })
            .collect(),
        provenance: cfg.provenance()?,
    })
}

pub fn eval_checkpoint(cfg: &Resolved, path: &Path) -> Result<EvalReport> {
    let checkpoint = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let mut cfg = cfg.clone();
    if let Some(kind) = checkpoint.task {
        if cfg.config.scene.as_ref().is_some_and(|s| s.kind != kind) {
            bail!("checkpoint was trained for {kind}, configured scene is {}", cfg.config.task);
        }
        cfg.config.task = kind;
    }
    let label = checkpoint
        .architecture
        .map(|a| a.label().to_string())
        .unwrap_or_else(|| path.display().to_string());
    let mut controller = NetworkController::new(&checkpoint)?;
    eval_controller(&cfg, &label, &mut controller)
}

/// Success rates laid out with one row per controller and one column per task.
pub fn table(reports: &[EvalReport]) -> String {
    let mut rows: BTreeMap<&str, BTreeMap<lfd_core::sim::TaskKind, f64>> = BTreeMap::new();
    let mut tasks: Vec<lfd_core::sim::TaskKind> = reports.iter().map(|r| r.task).collect();
    tasks.sort();
    tasks.dedup();
    let order = |name: &str| Architecture::ALL.iter().position(|a| a.label() == name).unwrap_or(usize::MAX);
    for r in reports {
        rows.entry(&r.controller).or_default().insert(r.task, r.success_rate);
    }
    let mut names: Vec<&str> = rows.keys().copied().collect();
    names.sort_by_key(|n| (order(n), n.to_string()));
    let width = names.iter().map(|n| n.len()).max().unwrap_or(0).max("Controller".len());
    let mut s = format!("{:<width$}", "Controller");
    for t in &tasks {
        write!(s, "  {:>12}", t.name()).unwrap();
    }
    s.push('\n');
    for n in names {
        write!(s, "{n:<width$}").unwrap();
        for t in &tasks {
            match rows[n].get(t) {
                Some(rate) => write!(s, "  {:>11.0}%", rate * 100.0).unwrap(),
                None => write!(s, "  {:>12}", "-").unwrap(),
            }
        }
        s.push('\n');
    }
    s
}

/// Replays demonstration `index` of a dataset or trace file. Returns one line
/// per step and, when `out` is given, writes the replayed states there.
pub fn replay(path: &Path, index: usize, out: Option<&Path>) -> Result<String> {
    let demos = read_dataset_file(path).with_context(|| format!("reading {}", path.display()))?;
    let Some(demo) = demos.get(index) else {
        bail!("{} holds {} demonstrations, no index {index}", path.display(), demos.len());
    };
    let task = Arc::new(lfd_core::sim::TaskSpec::for_kind(demo.task));
    let states = replay_trace(demo, task)?;
    let mut text = String::new();
    let mut max_dev: f64 = 0.0;
    let dt = 1.0 / demo.record_hz;
    for (i, s) in states.iter().enumerate() {
        let g = &s.gripper.pose;
        let b = &s.objects[0];
        if let Some(rec) = demo.waypoints.get(i) {
            let now = Waypoint::from_state(s);
            for (x, y) in now.objects[0].iter().zip(&rec.objects[0]).chain(now.gripper.iter().zip(&rec.gripper)) {
                max_dev = max_dev.max((x - y).abs());
            }
        }
        writeln!(
            text,
            "{:>5} t={:>7.3}s  gripper ({:+.4}, {:+.4}, {:+.4}) yaw {:+.3} {}  box ({:+.4}, {:+.4}, {:+.4}) yaw {:+.3}{}",
            i,
            i as f64 * dt,
            g.position[0],
            g.position[1],
            g.position[2],
            g.yaw(),
            if s.gripper.open { "open  " } else { "closed" },
            b.position[0],
            b.position[1],
            b.position[2],
            b.yaw(),
            if s.attached.is_some() { "  held" } else { "" }
        )
        .unwrap();
    }
    let last = states.last().expect("replay yields the initial state");
    writeln!(
        text,
        "{} steps, success {}, recorded outcome {:?}, max deviation from recording {:.3e}",
        states.len() - 1,
        last.success(),
        demo.outcome,
        max_dev
    )
    .unwrap();
    if let Some(out) = out {
        let mut replayed = demo.clone();
        replayed.waypoints = states.iter().map(Waypoint::from_state).collect();
        replayed.outcome = Outcome::from_success(last.success());
        write_dataset_file(out, &[replayed]).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(text)
}
