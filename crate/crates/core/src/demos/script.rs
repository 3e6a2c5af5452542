use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Demonstration, Outcome, Source, Waypoint};
use crate::error::{Error, Result};
use crate::sim::{tick, wrap_angle, EnvState, GripperState, Pose, TaskKind, TICK_HZ};

const SPEED: f64 = 0.3;
const TURN_RATE: f64 = 1.5;
const STALL_TICKS: usize = 10;
const MAX_JITTER: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImperfectionConfig {
    /// Chance that a grasp attempt closes 3-4 cm above the box.
    pub grasp_miss: f64,
    /// Accidental releases per second of carrying.
    pub drop_rate: f64,
    /// Chance that a push stroke goes 1.4-2x too far.
    pub overpush: f64,
    /// Standard deviation of via-point noise, meters.
    pub jitter_std: f64,
    pub max_retries: u32,
}

impl Default for ImperfectionConfig {
    fn default() -> Self {
        Self {
            grasp_miss: 0.15,
            drop_rate: 0.02,
            overpush: 0.2,
            jitter_std: 0.005,
            max_retries: 3,
        }
    }
}

impl ImperfectionConfig {
    /// No injected mistakes and no jitter.
    pub fn perfect() -> Self {
        Self {
            grasp_miss: 0.0,
            drop_rate: 0.0,
            overpush: 0.0,
            jitter_std: 0.0,
            max_retries: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("grasp_miss", self.grasp_miss), ("overpush", self.overpush)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Invalid(format!("{name} must be a probability, got {p}")));
            }
        }
        if !(self.drop_rate >= 0.0) || !(self.jitter_std >= 0.0) {
            return Err(Error::Invalid("drop_rate and jitter_std must be non-negative".into()));
        }
        if self.drop_rate * tick() > 1.0 {
            return Err(Error::Invalid(format!("drop_rate {} exceeds one per tick", self.drop_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PushStrategy {
    RotateFirst,
    TranslateFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Motion {
    Arrived,
    Dropped,
    Blocked,
    OutOfTime,
}

/// Drives the simulator tick by tick and records every resulting state.
struct Recorder<'r, R: Rng> {
    env: EnvState,
    rng: &'r mut R,
    waypoints: Vec<Waypoint>,
    jitter: Option<Normal<f64>>,
}

impl<'r, R: Rng> Recorder<'r, R> {
    fn new(env: EnvState, rng: &'r mut R, jitter_std: f64) -> Result<Self> {
        let jitter = if jitter_std > 0.0 {
            Some(Normal::new(0.0, jitter_std).map_err(|e| Error::Invalid(e.to_string()))?)
        } else {
            None
        };
        let waypoints = vec![Waypoint::from_state(&env)];
        Ok(Self {
            env,
            rng,
            waypoints,
            jitter,
        })
    }

    fn noise(&mut self) -> f64 {
        match &self.jitter {
            Some(n) => n.sample(self.rng).clamp(-MAX_JITTER, MAX_JITTER),
            None => 0.0,
        }
    }

    fn out_of_time(&self) -> bool {
        self.env.clock >= self.env.task.time_limit - 1e-9
    }

    fn command(&mut self, position: [f64; 3], yaw: f64, open: bool) -> Result<()> {
        let cmd = GripperState {
            pose: Pose::from_yaw(position, yaw),
            open,
        };
        self.env.advance(&cmd, tick())?;
        self.waypoints.push(Waypoint::from_state(&self.env));
        Ok(())
    }

    fn gripper(&self) -> ([f64; 3], f64, bool) {
        let g = &self.env.gripper;
        (g.pose.position, g.pose.yaw(), g.open)
    }

    fn hold(&mut self, open: bool, ticks: usize) -> Result<Motion> {
        for _ in 0..ticks {
            if self.out_of_time() {
                return Ok(Motion::OutOfTime);
            }
            let (p, yaw, _) = self.gripper();
            self.command(p, yaw, open)?;
        }
        Ok(Motion::Arrived)
    }

    /// Straight-line move at script speed. With a positive `drop_rate` the
    /// script may fumble the box: it opens for two ticks and closes again.
    fn move_to(&mut self, target: [f64; 3], yaw: f64, open: bool, drop_rate: f64) -> Result<Motion> {
        let target = self.env.task.workspace.clamp(&target);
        let step = SPEED * tick();
        let turn = TURN_RATE * tick();
        let mut stalled = 0;
        loop {
            let (p, cur_yaw, _) = self.gripper();
            let d = [target[0] - p[0], target[1] - p[1], target[2] - p[2]];
            let dist = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            let yaw_err = wrap_angle(yaw - cur_yaw);
            if dist == 0.0 && yaw_err.abs() <= 1e-12 {
                return Ok(Motion::Arrived);
            }
            if self.out_of_time() {
                return Ok(Motion::OutOfTime);
            }
            if drop_rate > 0.0 && self.rng.gen::<f64>() < drop_rate * tick() {
                self.hold(true, 2)?;
                self.hold(false, 1)?;
                return Ok(Motion::Dropped);
            }
            let next = if dist <= step {
                target
            } else {
                let f = step / dist;
                [p[0] + d[0] * f, p[1] + d[1] * f, p[2] + d[2] * f]
            };
            let next_yaw = if yaw_err.abs() <= turn {
                yaw
            } else {
                cur_yaw + turn * yaw_err.signum()
            };
            self.command(next, next_yaw, open)?;
            let moved = self.env.gripper.pose.position;
            if dist > 0.0 && (0..3).all(|i| (moved[i] - p[i]).abs() < 1e-9) {
                stalled += 1;
                if stalled >= STALL_TICKS {
                    return Ok(Motion::Blocked);
                }
            } else {
                stalled = 0;
            }
        }
    }

    fn finish(self, raw_id: u64, corrections: u32, strategy: Option<PushStrategy>) -> Demonstration {
        let outcome = Outcome::from_success(self.env.success());
        let mut demo = Demonstration::new(
            self.env.task.kind,
            TICK_HZ,
            Source::Scripted,
            outcome,
            raw_id,
            self.waypoints,
        );
        demo.corrections = corrections;
        demo.strategy = strategy;
        demo
    }
}

fn check_task(env: &EnvState, kind: TaskKind) -> Result<()> {
    if env.task.kind != kind {
        return Err(Error::Invalid(format!("expected a {kind} scene, got {}", env.task.kind)));
    }
    if env.attached.is_some() || env.ticks != 0 {
        return Err(Error::Invalid("scripted demonstrations start from a fresh reset".into()));
    }
    Ok(())
}

const CARRY_Z: f64 = 0.28;
const HOVER: f64 = 0.08;

/// Scripted pick-and-place with optional injected mistakes and recovery.
pub fn scripted_pick_place(env: EnvState, rng: &mut impl Rng, cfg: &ImperfectionConfig, raw_id: u64) -> Result<Demonstration> {
    check_task(&env, TaskKind::PickPlace)?;
    cfg.validate()?;
    let task = Arc::clone(&env.task);
    let shelf = task.shelf.ok_or_else(|| Error::Invalid("pick-place scene without a shelf".into()))?;
    let half = task.half_extents();
    let mut rec = Recorder::new(env, rng, cfg.jitter_std)?;
    let mut retries = 0u32;
    let mut corrections = 0u32;

    // Placement point chosen once, like a user picking a spot on the shelf.
    let place_x = rec.rng.gen_range(-0.3..=0.3);
    let place_y = rec.rng.gen_range((shelf.min_xy[1] + 0.047)..=(shelf.max_xy[1] - 0.047));

    'attempt: loop {
        let (g, _, open) = rec.gripper();
        if !open {
            // Recovering from a miss or fumble: let go and back off first.
            if rec.hold(true, 3)? == Motion::OutOfTime {
                break;
            }
            let up = [g[0], g[1], g[2].max(0.12)];
            if rec.move_to(up, rec.env.gripper.pose.yaw(), true, 0.0)? == Motion::OutOfTime {
                break;
            }
        }

        let b = rec.env.objects[0];
        let box_yaw = b.yaw();
        let miss = rec.rng.gen::<f64>() < cfg.grasp_miss;
        let mut grasp = [b.position[0] + rec.noise(), b.position[1] + rec.noise(), b.position[2]];
        if miss {
            // Misjudged depth: the fingers close above the box.
            grasp[2] += rec.rng.gen_range(0.03..=0.04);
        }
        let hover = [grasp[0], grasp[1], b.position[2] + HOVER];
        for target in [hover, grasp] {
            if rec.move_to(target, box_yaw, true, 0.0)? == Motion::OutOfTime {
                break 'attempt;
            }
        }
        if rec.hold(false, 4)? == Motion::OutOfTime {
            break;
        }
        if rec.env.attached.is_none() {
            if retries >= cfg.max_retries {
                break;
            }
            retries += 1;
            corrections += 1;
            continue;
        }

        let (g, gyaw, _) = rec.gripper();
        let place = [place_x + rec.noise(), place_y + rec.noise(), shelf.surface_z + half[2] + 0.01];
        let carry = [
            [g[0], g[1], CARRY_Z],
            [place[0], place[1], CARRY_Z],
            place,
        ];
        for target in carry {
            match rec.move_to(target, gyaw, false, cfg.drop_rate)? {
                Motion::Dropped => {
                    if retries >= cfg.max_retries {
                        break 'attempt;
                    }
                    retries += 1;
                    corrections += 1;
                    continue 'attempt;
                }
                Motion::OutOfTime => break 'attempt,
                _ => {}
            }
        }
        if rec.hold(true, 3)? == Motion::OutOfTime {
            break;
        }
        let (g, gyaw, _) = rec.gripper();
        let retreat = [g[0], g[1] - 0.04, g[2] + 0.1];
        if rec.move_to(retreat, gyaw, true, 0.0)? != Motion::OutOfTime {
            rec.hold(true, 2)?;
        }
        break;
    }
    Ok(rec.finish(raw_id, corrections, None))
}

/// Residual box error relative to the target, in the box frame.
struct PushError {
    local: [f64; 2],
    yaw: f64,
}

fn push_error(env: &EnvState) -> PushError {
    let target = env.task.target.expect("push scene has a target");
    let b = &env.objects[0];
    let yaw = b.yaw();
    let dx = target.center[0] - b.position[0];
    let dy = target.center[1] - b.position[1];
    let (s, c) = yaw.sin_cos();
    // Box is symmetric under half turns, so fold the error into (-pi/2, pi/2].
    let mut e = wrap_angle(yaw - target.yaw);
    if e > FRAC_PI_2 {
        e -= std::f64::consts::PI;
    } else if e <= -FRAC_PI_2 {
        e += std::f64::consts::PI;
    }
    PushError {
        local: [c * dx + s * dy, -s * dx + c * dy],
        yaw: e,
    }
}

const POS_TOL: f64 = 0.012;
const YAW_TOL: f64 = 0.12;
const STROKE_Z: f64 = 0.03;
const TRAVEL_Z: f64 = 0.12;
const APPROACH_GAP: f64 = 0.04;
const COUPLE_LEVER: f64 = 0.04;
const MAX_STROKE_TURN: f64 = FRAC_PI_4;
const MAX_STROKES: u32 = 16;

/// One push: approach from outside face `axis`/`side` (outward normal in the
/// box frame) at `offset` along the face, then push `depth` meters inward.
fn stroke<R: Rng>(rec: &mut Recorder<'_, R>, axis: usize, side: f64, offset: f64, depth: f64) -> Result<Motion> {
    let task = Arc::clone(&rec.env.task);
    let half = task.half_extents();
    let r = task.push.pusher_radius;
    let b = rec.env.objects[0];
    let yaw = b.yaw();
    let (s, c) = yaw.sin_cos();
    let to_world = |l: [f64; 2]| [b.position[0] + c * l[0] - s * l[1], b.position[1] + s * l[0] + c * l[1]];
    let mut start = [0.0; 2];
    start[axis] = side * (half[axis] + r + APPROACH_GAP);
    start[1 - axis] = offset;
    let mut end = start;
    end[axis] = side * (half[axis] + r - depth);
    let mut back = end;
    back[axis] += side * 0.03;
    let (start, end, back) = (to_world(start), to_world(end), to_world(back));

    let (g, gyaw, _) = rec.gripper();
    let path = [
        [g[0], g[1], g[2].max(TRAVEL_Z)],
        [start[0], start[1], TRAVEL_Z],
        [start[0], start[1], STROKE_Z],
        [end[0], end[1], STROKE_Z],
        [back[0], back[1], STROKE_Z],
    ];
    for p in path {
        match rec.move_to(p, gyaw, false, 0.0)? {
            Motion::OutOfTime => return Ok(Motion::OutOfTime),
            Motion::Blocked => return Ok(Motion::Blocked),
            _ => {}
        }
    }
    Ok(Motion::Arrived)
}

/// Scripted push-to-pose: turns the box with off-center pushes on its long
/// sides and slides it with face-center pushes, in one of two orders.
pub fn scripted_push(env: EnvState, rng: &mut impl Rng, cfg: &ImperfectionConfig, raw_id: u64) -> Result<Demonstration> {
    check_task(&env, TaskKind::PushToPose)?;
    cfg.validate()?;
    let gains = env.task.push;
    let strategy = if rng.gen::<bool>() {
        PushStrategy::RotateFirst
    } else {
        PushStrategy::TranslateFirst
    };
    let mut rec = Recorder::new(env, rng, cfg.jitter_std)?;
    let mut strokes = 0u32;
    let mut corrections = 0u32;
    let mut couple_side = 1.0;
    let mut overpushed = false;

    loop {
        let err = push_error(&rec.env);
        let rotated = err.yaw.abs() <= YAW_TOL;
        let placed = err.local[0].abs() <= POS_TOL && err.local[1].abs() <= POS_TOL;
        if rotated && placed {
            break;
        }
        if strokes >= MAX_STROKES || (overpushed && corrections > cfg.max_retries) {
            break;
        }
        let turn_now = match strategy {
            PushStrategy::RotateFirst => !rotated,
            PushStrategy::TranslateFirst => placed && !rotated,
        };
        let over = rec.rng.gen::<f64>() < cfg.overpush;
        let scale = if over { rec.rng.gen_range(1.4..=2.0) } else { 1.0 };
        if overpushed {
            corrections += 1;
            overpushed = false;
        }
        overpushed |= over;

        let motion = if turn_now {
            // Push a long side off-center; the face alternates so the
            // translations of successive strokes cancel.
            let turn = err.yaw.abs().min(MAX_STROKE_TURN);
            let want = -err.yaw.signum();
            let side = couple_side;
            couple_side = -couple_side;
            let offset = -COUPLE_LEVER * want * side + rec.noise();
            let depth = scale * turn / (gains.rotation_gain * COUPLE_LEVER);
            stroke(&mut rec, 1, side, offset, depth)?
        } else {
            let axis = if err.local[0].abs() >= err.local[1].abs() { 0 } else { 1 };
            let side = -err.local[axis].signum();
            let offset = rec.noise();
            stroke(&mut rec, axis, side, offset, scale * err.local[axis].abs())?
        };
        strokes += 1;
        if motion == Motion::OutOfTime {
            break;
        }
    }

    let (g, gyaw, _) = rec.gripper();
    if rec.move_to([g[0], g[1], TRAVEL_Z + 0.03], gyaw, false, 0.0)? != Motion::OutOfTime {
        rec.hold(false, 2)?;
    }
    Ok(rec.finish(raw_id, corrections, Some(strategy)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::TaskSpec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fresh(kind: TaskKind, seed: u64) -> (EnvState, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let env = EnvState::reset(Arc::new(TaskSpec::for_kind(kind)), &mut rng).unwrap();
        (env, rng)
    }

    #[test]
    fn forced_miss_without_retries_fails() {
        let cfg = ImperfectionConfig {
            grasp_miss: 1.0,
            max_retries: 0,
            ..ImperfectionConfig::perfect()
        };
        let (env, mut rng) = fresh(TaskKind::PickPlace, 1);
        let demo = scripted_pick_place(env, &mut rng, &cfg, 0).unwrap();
        assert_eq!(demo.outcome, Outcome::Failure);
    }

    #[test]
    fn forced_miss_then_retry_recovers() {
        let cfg = ImperfectionConfig {
            grasp_miss: 0.0,
            ..ImperfectionConfig::perfect()
        };
        let (env, mut rng) = fresh(TaskKind::PickPlace, 2);
        let clean = scripted_pick_place(env, &mut rng, &cfg, 0).unwrap();
        assert_eq!(clean.outcome, Outcome::Success);
        assert_eq!(clean.corrections, 0);
    }

    #[test]
    fn recorded_at_tick_rate_and_valid() {
        let (env, mut rng) = fresh(TaskKind::PushToPose, 3);
        let demo = scripted_push(env, &mut rng, &ImperfectionConfig::default(), 7).unwrap();
        assert_eq!(demo.record_hz, 33.0);
        assert_eq!(demo.raw_id, 7);
        assert!(demo.strategy.is_some());
        demo.validate().unwrap();
    }

    #[test]
    fn wrong_scene_is_rejected() {
        let (env, mut rng) = fresh(TaskKind::PushToPose, 4);
        assert!(scripted_pick_place(env, &mut rng, &ImperfectionConfig::perfect(), 0).is_err());
    }
}
