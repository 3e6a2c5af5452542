use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Simulator tick rate, equal to the demonstration recording rate.
pub const TICK_HZ: f64 = 33.0;
/// Rate at which controllers see observations and emit waypoints.
pub const CONTROL_HZ: f64 = 4.0;

pub fn tick() -> f64 {
    1.0 / TICK_HZ
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    PickPlace,
    PushToPose,
}

impl TaskKind {
    pub const ALL: [TaskKind; 2] = [TaskKind::PickPlace, TaskKind::PushToPose];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::PickPlace => "pick-place",
            TaskKind::PushToPose => "push-to-pose",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pick-place" => Ok(TaskKind::PickPlace),
            "push-to-pose" | "push" => Ok(TaskKind::PushToPose),
            other => Err(Error::Invalid(format!("unknown task `{other}`"))),
        }
    }
}

/// Axis-aligned box in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Bounds {
    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn clamp(&self, p: &[f64; 3]) -> [f64; 3] {
        let mut out = *p;
        for (i, v) in out.iter_mut().enumerate() {
            *v = v.clamp(self.min[i], self.max[i]);
        }
        out
    }

    fn validate(&self, what: &str) -> Result<()> {
        if (0..3).any(|i| !(self.min[i] <= self.max[i]) || !self.min[i].is_finite() || !self.max[i].is_finite()) {
            return Err(Error::Invalid(format!("{what}: empty or non-finite bounds {self:?}")));
        }
        Ok(())
    }
}

/// Horizontal shelf board the pick-place box has to end up on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shelf {
    pub min_xy: [f64; 2],
    pub max_xy: [f64; 2],
    pub surface_z: f64,
}

impl Shelf {
    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.min_xy[0] && x <= self.max_xy[0] && y >= self.min_xy[1] && y <= self.max_xy[1]
    }
}

/// Oriented rectangle on the table the pushed box must fit inside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetRegion {
    pub center: [f64; 2],
    pub yaw: f64,
    pub size: [f64; 2],
}

/// Quasi-static push model constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PushGains {
    pub translation_gain: f64,
    /// Yaw per unit of (lever arm x push), in 1/m^2.
    pub rotation_gain: f64,
    pub max_translation: f64,
    pub max_yaw: f64,
    /// Radius of the closed fingertips acting as the pusher.
    pub pusher_radius: f64,
}

impl Default for PushGains {
    fn default() -> Self {
        Self {
            translation_gain: 1.0,
            rotation_gain: 300.0,
            max_translation: 0.02,
            max_yaw: 0.15,
            pusher_radius: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Full box extents (x, y, z) in its own frame.
    pub box_size: [f64; 3],
    pub time_limit: f64,
    /// Reachable region for the gripper frame origin.
    pub workspace: Bounds,
    /// Region of the tabletop where the box is spawned (z ignored).
    pub box_spawn: Bounds,
    pub gripper_spawn: Bounds,
    /// Half-range of the uniform initial box yaw around its nominal value.
    pub box_yaw_jitter: f64,
    pub min_spawn_separation: f64,
    pub grasp_tolerance: f64,
    pub max_linear_speed: f64,
    pub max_angular_speed: f64,
    pub shelf: Option<Shelf>,
    /// Gripper distance from the box required before a placement counts.
    pub release_clearance: f64,
    pub target: Option<TargetRegion>,
    /// Initial box yaw relative to the target yaw for pushing.
    pub target_yaw_offset: f64,
    pub push: PushGains,
    pub object_count: usize,
}

impl TaskSpec {
    pub fn pick_place() -> Self {
        Self {
            kind: TaskKind::PickPlace,
            box_size: [0.05, 0.05, 0.05],
            time_limit: 60.0,
            workspace: Bounds {
                min: [-0.4, -0.4, 0.02],
                max: [0.4, 0.5, 0.45],
            },
            box_spawn: Bounds {
                min: [-0.25, -0.3, 0.0],
                max: [0.25, 0.0, 0.0],
            },
            gripper_spawn: Bounds {
                min: [-0.3, -0.3, 0.1],
                max: [0.3, 0.1, 0.3],
            },
            box_yaw_jitter: std::f64::consts::FRAC_PI_4,
            min_spawn_separation: 0.08,
            grasp_tolerance: 0.02,
            max_linear_speed: 0.5,
            max_angular_speed: 2.0,
            shelf: Some(Shelf {
                min_xy: [-0.45, 0.25],
                max_xy: [0.45, 0.4],
                surface_z: 0.2,
            }),
            release_clearance: 0.06,
            target: None,
            target_yaw_offset: 0.0,
            push: PushGains::default(),
            object_count: 1,
        }
    }

    pub fn push_to_pose() -> Self {
        let box_size = [0.1, 0.07, 0.07];
        Self {
            kind: TaskKind::PushToPose,
            box_size,
            time_limit: 120.0,
            workspace: Bounds {
                min: [-0.4, -0.4, 0.02],
                max: [0.4, 0.5, 0.45],
            },
            box_spawn: Bounds {
                min: [-0.1, -0.05, 0.0],
                max: [0.1, 0.15, 0.0],
            },
            gripper_spawn: Bounds {
                min: [-0.3, -0.3, 0.1],
                max: [0.3, 0.3, 0.3],
            },
            box_yaw_jitter: 0.15,
            min_spawn_separation: 0.12,
            grasp_tolerance: 0.02,
            max_linear_speed: 0.5,
            max_angular_speed: 2.0,
            shelf: None,
            release_clearance: 0.0,
            target: Some(TargetRegion {
                center: [0.0, 0.05],
                yaw: 0.0,
                size: [box_size[0] + 2.0 * 0.03, box_size[1] + 2.0 * 0.03],
            }),
            target_yaw_offset: FRAC_PI_2,
            push: PushGains::default(),
            object_count: 1,
        }
    }

    pub fn for_kind(kind: TaskKind) -> Self {
        match kind {
            TaskKind::PickPlace => Self::pick_place(),
            TaskKind::PushToPose => Self::push_to_pose(),
        }
    }

    pub fn half_extents(&self) -> [f64; 3] {
        [self.box_size[0] / 2.0, self.box_size[1] / 2.0, self.box_size[2] / 2.0]
    }

    /// Largest yaw error that still lets the box footprint fit the target
    /// region. Rotating the box by `t` about its center sweeps its half
    /// diagonal `d` sideways by `2 d sin(t/2)`; the tolerance is the angle at
    /// which that chord equals the margin on the tighter axis.
    pub fn yaw_tolerance(&self) -> f64 {
        let Some(target) = &self.target else {
            return 0.0;
        };
        let half = self.half_extents();
        let margin = ((target.size[0] - self.box_size[0]).min(target.size[1] - self.box_size[1]) / 2.0).max(0.0);
        let diag = half[0].hypot(half[1]);
        2.0 * (margin / (2.0 * diag)).min(1.0).asin()
    }

    pub fn validate(&self) -> Result<()> {
        self.workspace.validate("workspace")?;
        self.box_spawn.validate("box_spawn")?;
        self.gripper_spawn.validate("gripper_spawn")?;
        let positive = [
            ("box_size", self.box_size.iter().cloned().fold(f64::INFINITY, f64::min)),
            ("time_limit", self.time_limit),
            ("grasp_tolerance", self.grasp_tolerance),
            ("max_linear_speed", self.max_linear_speed),
            ("max_angular_speed", self.max_angular_speed),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if self.object_count != 1 {
            return Err(Error::Invalid(format!(
                "only single-object scenes are supported, got {}",
                self.object_count
            )));
        }
        match self.kind {
            TaskKind::PickPlace if self.shelf.is_none() => {
                Err(Error::Invalid("pick-place needs a shelf".into()))
            }
            TaskKind::PushToPose if self.target.is_none() => {
                Err(Error::Invalid("push-to-pose needs a target region".into()))
            }
            _ => Ok(()),
        }
    }
}
