use std::f64::consts::PI;
use std::sync::Arc;

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::pose::{normalize_quaternion, quaternion_angle, slerp, wrap_angle, Pose};
use super::push::{push_displacement, rotate, to_local};
use super::task::{TaskKind, TaskSpec};
use crate::error::{Error, Result};

/// Length of an observation vector: box pose, gripper pose, open flag.
pub const OBS_DIM: usize = 15;
/// Length of a gripper vector: pose plus open flag.
pub const GRIPPER_DIM: usize = 8;

const RESET_RETRIES: usize = 1000;
const CONTACT_MARGIN: f64 = 1e-3;
const SEPARATION: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GripperState {
    pub pose: Pose,
    pub open: bool,
}

impl GripperState {
    pub fn to_vector(&self) -> [f64; GRIPPER_DIM] {
        let mut out = [0.0; GRIPPER_DIM];
        out[..7].copy_from_slice(&self.pose.to_array());
        out[7] = if self.open { 1.0 } else { 0.0 };
        out
    }

    /// Parses stored data, where the open flag must be exactly 0 or 1.
    pub fn from_slice(v: &[f64]) -> Result<Self> {
        if v.len() != GRIPPER_DIM {
            return Err(Error::Shape(format!("gripper vector has {GRIPPER_DIM} values, got {}", v.len())));
        }
        let open = match v[7] {
            x if x == 1.0 => true,
            x if x == 0.0 => false,
            x => return Err(Error::Invalid(format!("gripper open flag must be 0 or 1, got {x}"))),
        };
        Ok(Self {
            pose: Pose::from_array(&v[..7])?,
            open,
        })
    }
}

/// A grasped object and its pose expressed in the gripper frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub object: usize,
    pub offset: [f64; 3],
    pub rotation: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub objects: Vec<Pose>,
    pub gripper: GripperState,
    pub attached: Option<Attachment>,
    pub clock: f64,
    pub ticks: u64,
    /// Set when the last command had to be clamped into the workspace.
    pub clamped: bool,
    pub task: Arc<TaskSpec>,
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

impl EnvState {
    /// Fresh task instance with random box and gripper placement.
    pub fn reset(task: Arc<TaskSpec>, rng: &mut impl Rng) -> Result<Self> {
        task.validate()?;
        let half = task.half_extents();
        let s = &task.box_spawn;
        let bx = uniform(rng, s.min[0], s.max[0]);
        let by = uniform(rng, s.min[1], s.max[1]);
        let jitter = uniform(rng, -task.box_yaw_jitter, task.box_yaw_jitter);
        let yaw = match (task.kind, &task.target) {
            (TaskKind::PushToPose, Some(t)) => t.yaw + task.target_yaw_offset + jitter,
            _ => jitter,
        };
        let object = Pose::from_yaw([bx, by, half[2]], yaw);

        let g = &task.gripper_spawn;
        for _ in 0..RESET_RETRIES {
            let p = [
                uniform(rng, g.min[0], g.max[0]),
                uniform(rng, g.min[1], g.max[1]),
                uniform(rng, g.min[2], g.max[2]),
            ];
            let gyaw = uniform(rng, -PI / 4.0, PI / 4.0);
            let clear = (p[0] - bx).hypot(p[1] - by) >= task.min_spawn_separation;
            if clear && task.workspace.contains(&p) {
                let open = task.kind == TaskKind::PickPlace;
                return Ok(Self {
                    objects: vec![object],
                    gripper: GripperState {
                        pose: Pose::from_yaw(p, gyaw),
                        open,
                    },
                    attached: None,
                    clock: 0.0,
                    ticks: 0,
                    clamped: false,
                    task,
                });
            }
        }
        Err(Error::Invalid(format!(
            "no collision-free gripper start found in {RESET_RETRIES} tries"
        )))
    }

    pub fn observe(&self) -> [f64; OBS_DIM] {
        let mut out = [0.0; OBS_DIM];
        out[..7].copy_from_slice(&self.objects[0].to_array());
        out[7..].copy_from_slice(&self.gripper.to_vector());
        out
    }

    /// Rebuilds a resting (unattached) state from an observation vector.
    pub fn from_observation(task: Arc<TaskSpec>, obs: &[f64]) -> Result<Self> {
        if obs.len() != OBS_DIM {
            return Err(Error::Shape(format!("observation has {OBS_DIM} values, got {}", obs.len())));
        }
        Ok(Self {
            objects: vec![Pose::from_array(&obs[..7])?],
            gripper: GripperState::from_slice(&obs[7..])?,
            attached: None,
            clock: 0.0,
            ticks: 0,
            clamped: false,
            task,
        })
    }

    pub fn step(&self, command: &GripperState, dt: f64) -> Result<EnvState> {
        let mut next = self.clone();
        next.advance(command, dt)?;
        Ok(next)
    }

    /// In-place version of [`EnvState::step`].
    pub fn advance(&mut self, command: &GripperState, dt: f64) -> Result<()> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::Invalid(format!("dt must be positive, got {dt}")));
        }
        let cmd = command.pose.to_array();
        if cmd.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gripper command".into()));
        }
        let task = Arc::clone(&self.task);
        let prev = self.gripper.pose.position;

        let target = task.workspace.clamp(&command.pose.position);
        self.clamped = target != command.pose.position;
        let mut pos = prev;
        let delta = [target[0] - pos[0], target[1] - pos[1], target[2] - pos[2]];
        let dist = (delta[0] * delta[0] + delta[1] * delta[1] + delta[2] * delta[2]).sqrt();
        let reach = task.max_linear_speed * dt;
        if dist <= reach {
            pos = target;
        } else {
            let f = reach / dist;
            for i in 0..3 {
                pos[i] += delta[i] * f;
            }
        }

        let cmd_q = normalize_quaternion(command.pose.rotation)?;
        let angle = quaternion_angle(&self.gripper.pose.rotation, &cmd_q);
        let turn = task.max_angular_speed * dt;
        let rot = if angle <= turn {
            cmd_q
        } else {
            normalize_quaternion(slerp(&self.gripper.pose.rotation, &cmd_q, turn / angle))?
        };
        self.gripper.pose = Pose {
            position: pos,
            rotation: rot,
        };

        if command.open && !self.gripper.open {
            self.gripper.open = true;
            self.release();
        } else if !command.open && self.gripper.open {
            self.gripper.open = false;
            self.try_grasp();
        }

        if let Some(a) = self.attached {
            self.objects[a.object] = self.carried_pose(&a);
        } else if !self.gripper.open {
            for i in 0..self.objects.len() {
                self.resolve_contact(i, prev)?;
            }
        }

        self.ticks += 1;
        self.clock = self.ticks as f64 * dt;
        Ok(())
    }

    fn carried_pose(&self, a: &Attachment) -> Pose {
        let gq = self.gripper.pose.unit_quaternion();
        let offset = gq * Vector3::from(a.offset);
        let mut pose = Pose {
            position: (self.gripper.pose.translation() + offset).into(),
            rotation: [0.0, 0.0, 0.0, 1.0],
        };
        let [x, y, z, w] = a.rotation;
        let rel = UnitQuaternion::new_unchecked(nalgebra::Quaternion::new(w, x, y, z));
        pose.set_unit_quaternion(&(gq * rel));
        pose
    }

    fn try_grasp(&mut self) {
        let gp = self.gripper.pose;
        let best = self
            .objects
            .iter()
            .enumerate()
            .map(|(i, o)| (i, o.distance_to(&gp)))
            .filter(|&(_, d)| d <= self.task.grasp_tolerance)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, _)) = best {
            let gq = gp.unit_quaternion();
            let inv = gq.inverse();
            let o = &self.objects[i];
            let offset = inv * (o.translation() - gp.translation());
            let rel = inv * o.unit_quaternion();
            let c = rel.quaternion().coords;
            self.attached = Some(Attachment {
                object: i,
                offset: offset.into(),
                rotation: [c[0], c[1], c[2], c[3]],
            });
        }
    }

    fn release(&mut self) {
        if let Some(a) = self.attached.take() {
            self.drop_to_support(a.object);
        }
    }

    /// Puts an unsupported object down flat on the shelf or the table.
    fn drop_to_support(&mut self, i: usize) {
        let half = self.task.half_extents();
        let o = self.objects[i];
        let [x, y, z] = o.position;
        let rest = match &self.task.shelf {
            Some(s) if s.contains_xy(x, y) && z - half[2] >= s.surface_z - 1e-9 => s.surface_z + half[2],
            _ => half[2],
        };
        self.objects[i] = Pose::from_yaw([x, y, rest], o.yaw());
    }

    /// Lets the closed fingertips, treated as a disk, push object `i`.
    fn resolve_contact(&mut self, i: usize, prev: [f64; 3]) -> Result<()> {
        let task = Arc::clone(&self.task);
        let half = task.half_extents();
        let r = task.push.pusher_radius;
        let ext = [half[0] + r, half[1] + r];
        let obj = self.objects[i];
        let top = obj.position[2] + half[2];
        let g = self.gripper.pose.position;
        if g[2] >= top {
            return Ok(());
        }
        let inside = |l: [f64; 2]| l[0].abs() < ext[0] && l[1].abs() < ext[1];
        let l0 = to_local(&obj, [prev[0], prev[1]]);
        let l1 = to_local(&obj, [g[0], g[1]]);
        if !inside(l1) {
            return Ok(());
        }
        if inside(l0) {
            if prev[2] >= top {
                // Came down onto the lid.
                self.gripper.pose.position[2] = top;
            }
            return Ok(());
        }

        let d = [l1[0] - l0[0], l1[1] - l0[1]];
        let entry = |axis: usize| -> f64 {
            if l0[axis] >= ext[axis] {
                (ext[axis] - l0[axis]) / d[axis]
            } else if l0[axis] <= -ext[axis] {
                (-ext[axis] - l0[axis]) / d[axis]
            } else {
                // already within this slab; cannot be the entry face
                f64::NEG_INFINITY
            }
        };
        let (tx, ty) = (entry(0), entry(1));
        let (axis, t) = if tx >= ty { (0, tx) } else { (1, ty) };
        let t = t.clamp(0.0, 1.0);
        let e = [l0[0] + t * d[0], l0[1] + t * d[1]];
        let mut contact_local = [0.0; 2];
        contact_local[axis] = half[axis] * e[axis].signum();
        contact_local[1 - axis] = e[1 - axis].clamp(-half[1 - axis], half[1 - axis]);
        let yaw = obj.yaw();
        let c = rotate(yaw, contact_local);
        let contact = [obj.position[0] + c[0], obj.position[1] + c[1]];
        let push = rotate(yaw, [d[0] * (1.0 - t), d[1] * (1.0 - t)]);
        let disp = push_displacement(contact, push, &obj, [half[0], half[1]], &task.push)?;

        let moved = Pose::from_yaw(
            [
                obj.position[0] + disp.translation[0],
                obj.position[1] + disp.translation[1],
                obj.position[2],
            ],
            wrap_angle(yaw + disp.yaw),
        );
        self.objects[i] = moved;

        // Fingertips cannot end up inside the box: slide them back out
        // through the face they entered.
        let mut l = to_local(&moved, [g[0], g[1]]);
        if inside(l) {
            l[axis] = contact_local[axis].signum() * (ext[axis] + SEPARATION);
            let w = rotate(moved.yaw(), l);
            self.gripper.pose.position[0] = moved.position[0] + w[0];
            self.gripper.pose.position[1] = moved.position[1] + w[1];
        }
        Ok(())
    }

    /// Whether the fingertips touch object `i` (or hold it).
    pub fn in_contact(&self, i: usize) -> bool {
        if self.attached.map(|a| a.object) == Some(i) {
            return true;
        }
        let half = self.task.half_extents();
        let r = self.task.push.pusher_radius + CONTACT_MARGIN;
        let obj = &self.objects[i];
        let g = self.gripper.pose.position;
        if g[2] >= obj.position[2] + half[2] + CONTACT_MARGIN {
            return false;
        }
        let l = to_local(obj, [g[0], g[1]]);
        l[0].abs() <= half[0] + r && l[1].abs() <= half[1] + r
    }

    /// Footprint corners of object `i` in world coordinates.
    pub fn footprint(&self, i: usize) -> [[f64; 2]; 4] {
        let half = self.task.half_extents();
        let o = &self.objects[i];
        let yaw = o.yaw();
        let mut out = [[0.0; 2]; 4];
        for (k, (sx, sy)) in [(1.0, 1.0), (-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0)].into_iter().enumerate() {
            let c = rotate(yaw, [sx * half[0], sy * half[1]]);
            out[k] = [o.position[0] + c[0], o.position[1] + c[1]];
        }
        out
    }

    pub fn success(&self) -> bool {
        let task = &self.task;
        let half = task.half_extents();
        match task.kind {
            TaskKind::PickPlace => {
                let Some(shelf) = &task.shelf else { return false };
                let o = &self.objects[0];
                self.attached.is_none()
                    && self.gripper.open
                    && (o.position[2] - (shelf.surface_z + half[2])).abs() < 1e-9
                    && self.footprint(0).iter().all(|c| shelf.contains_xy(c[0], c[1]))
                    && o.distance_to(&self.gripper.pose) >= task.release_clearance
            }
            TaskKind::PushToPose => {
                let Some(target) = &task.target else { return false };
                let o = &self.objects[0];
                let region = Pose::from_yaw([target.center[0], target.center[1], 0.0], target.yaw);
                let inside = self.footprint(0).iter().all(|c| {
                    let l = to_local(&region, *c);
                    l[0].abs() <= target.size[0] / 2.0 && l[1].abs() <= target.size[1] / 2.0
                });
                let err = (o.yaw() - target.yaw).rem_euclid(PI);
                let err = err.min(PI - err);
                self.attached.is_none() && inside && err <= task.yaw_tolerance() && !self.in_contact(0)
            }
        }
    }

    /// Moves object `i` by a planar offset and yaw, breaking any grasp on it;
    /// the object then settles on whatever is below it.
    pub fn displace_object(&mut self, i: usize, offset: [f64; 2], yaw: f64) -> Result<()> {
        if i >= self.objects.len() {
            return Err(Error::Invalid(format!("no object {i}")));
        }
        let o = self.objects[i];
        let moved = [o.position[0] + offset[0], o.position[1] + offset[1], o.position[2]];
        let ws = &self.task.workspace;
        if moved[0] < ws.min[0] || moved[0] > ws.max[0] || moved[1] < ws.min[1] || moved[1] > ws.max[1] {
            return Err(Error::Invalid(format!("displaced object {moved:?} leaves the workspace")));
        }
        if self.attached.map(|a| a.object) == Some(i) {
            self.attached = None;
        }
        self.objects[i] = Pose::from_yaw(moved, o.yaw() + yaw);
        self.drop_to_support(i);
        Ok(())
    }
}
