//! Demonstration data: scripted demonstrators, augmentation, splitting and
//! persistence.

mod augment;
mod dataset;
mod io;
mod pipeline;
mod script;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::{EnvState, Pose, TaskKind, GRIPPER_DIM, OBS_DIM};

pub use augment::{frequency_reduce, reduction_factor, shift_augment, DEFAULT_SHIFT_COUNT};
pub use dataset::{split_dataset, Dataset, NormStats, TRAIN_FRACTION};
pub use io::{read_dataset, read_dataset_file, write_dataset, write_dataset_file, DatasetHeader, DATASET_SCHEMA, DATASET_VERSION};
pub use pipeline::{augment_demos, generate_demos, TRAIN_HZ};
pub use script::{scripted_pick_place, scripted_push, ImperfectionConfig, PushStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Source {
    Scripted,
    Human,
    Augmented,
    Controller,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Outcome {
    Success,
    Failure,
}

impl Outcome {
    pub fn from_success(ok: bool) -> Self {
        if ok {
            Outcome::Success
        } else {
            Outcome::Failure
        }
    }
}

/// One recorded time step: all object poses plus the gripper vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Waypoint {
    pub objects: Vec<[f64; 7]>,
    pub gripper: [f64; GRIPPER_DIM],
}

impl Waypoint {
    pub fn from_state(state: &EnvState) -> Self {
        Self {
            objects: state.objects.iter().map(Pose::to_array).collect(),
            gripper: state.gripper.to_vector(),
        }
    }

    /// Network input: first object pose followed by the gripper vector.
    pub fn input(&self) -> [f64; OBS_DIM] {
        let mut out = [0.0; OBS_DIM];
        out[..7].copy_from_slice(&self.objects[0]);
        out[7..].copy_from_slice(&self.gripper);
        out
    }
}

fn is_zero(v: &u32) -> bool {
    *v == 0
}

fn is_false(v: &bool) -> bool {
    !*v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Demonstration {
    pub task: TaskKind,
    pub record_hz: f64,
    pub source: Source,
    pub outcome: Outcome,
    /// Identifier of the raw recording every derived copy came from.
    pub raw_id: u64,
    pub waypoints: Vec<Waypoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strategy: Option<PushStrategy>,
    /// Recovery episodes (retries, corrective pushes) inside the recording.
    #[serde(default, skip_serializing_if = "is_zero")]
    pub corrections: u32,
    /// Offset along the shelf axis applied by shift augmentation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shift: Option<f64>,
    /// Starting index of a frequency-reduced sub-trajectory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<usize>,
    /// Set when the source was too short to split at the requested rate.
    #[serde(default, skip_serializing_if = "is_false")]
    pub truncated: bool,
    /// Per-tick gripper commands of a controller rollout; replaying them
    /// reproduces `waypoints[1..]` exactly.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub commands: Vec<[f64; GRIPPER_DIM]>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub perturbations: Vec<Perturbation>,
}

/// Object displacement applied just before the command of tick `tick`
/// (counted from 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub tick: usize,
    pub object: usize,
    pub offset: [f64; 2],
    pub yaw: f64,
}

impl Demonstration {
    pub fn new(task: TaskKind, record_hz: f64, source: Source, outcome: Outcome, raw_id: u64, waypoints: Vec<Waypoint>) -> Self {
        Self {
            task,
            record_hz,
            source,
            outcome,
            raw_id,
            waypoints,
            strategy: None,
            corrections: 0,
            shift: None,
            phase: None,
            truncated: false,
            commands: Vec::new(),
            perturbations: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.waypoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.waypoints.is_empty()
    }

    pub fn is_augmented(&self) -> bool {
        self.shift.is_some() || self.phase.is_some() || self.source == Source::Augmented
    }

    pub fn duration(&self) -> f64 {
        (self.len().saturating_sub(1)) as f64 / self.record_hz
    }

    pub fn validate(&self) -> Result<()> {
        let min = if self.truncated { 1 } else { 2 };
        if self.waypoints.len() < min {
            return Err(Error::Invalid(format!(
                "demonstration {} has {} waypoints, needs at least {min}",
                self.raw_id,
                self.waypoints.len()
            )));
        }
        if !(self.record_hz > 0.0) || !self.record_hz.is_finite() {
            return Err(Error::Invalid(format!("record_hz must be positive, got {}", self.record_hz)));
        }
        let objects = self.waypoints[0].objects.len();
        if objects == 0 {
            return Err(Error::Invalid("waypoint without objects".into()));
        }
        for (t, w) in self.waypoints.iter().enumerate() {
            if w.objects.len() != objects {
                return Err(Error::Invalid(format!("waypoint {t} changes the object count")));
            }
            for o in &w.objects {
                Pose::from_array(o)?;
            }
            crate::sim::GripperState::from_slice(&w.gripper)
                .map_err(|e| Error::Invalid(format!("waypoint {t}: {e}")))?;
        }
        if !self.commands.is_empty() && self.commands.len() + 1 != self.waypoints.len() {
            return Err(Error::Invalid(format!(
                "{} commands for {} waypoints",
                self.commands.len(),
                self.waypoints.len()
            )));
        }
        Ok(())
    }
}
