//! Closed-loop execution of trained controllers in the simulator and the
//! seeded evaluation protocol.

mod controller;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::demos::{Demonstration, Outcome, Perturbation, Source, Waypoint};
use crate::error::{Error, Result};
use crate::sim::{quaternion_angle, slerp, tick, EnvState, GripperState, Pose, TaskSpec, TICK_HZ};

pub use controller::{next_waypoint, Controller, NetworkController};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingMode {
    /// Draw from the predicted mixture.
    Sample,
    /// Center of the kernel with the largest mixing coefficient.
    Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExecutionConfig {
    /// Interval between arrival checks, seconds.
    pub wait_quantum: f64,
    pub arrival_position: f64,
    pub arrival_angle: f64,
    pub waypoint_timeout: f64,
    /// Number of intermediate commands per waypoint, issued one per tick;
    /// the default spans one wait quantum.
    pub substeps: usize,
    /// Overrides the task's own limit when set.
    pub time_limit: Option<f64>,
    pub sampling: SamplingMode,
    /// Recurrent state is cleared after this many waypoints, matching the
    /// training windows.
    pub state_reset: usize,
}

impl Default for ExecutionConfig {
    fn default() -> Self {
        Self {
            wait_quantum: 0.2,
            arrival_position: 0.01,
            arrival_angle: 0.1,
            waypoint_timeout: 2.0,
            substeps: 7,
            time_limit: None,
            sampling: SamplingMode::Sample,
            state_reset: crate::nn::DEFAULT_UNROLL,
        }
    }
}

impl ExecutionConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.wait_quantum,
            self.arrival_position,
            self.arrival_angle,
            self.waypoint_timeout,
        ];
        if positive.iter().any(|v| !(*v > 0.0)) || self.substeps == 0 || self.state_reset == 0 {
            return Err(Error::Invalid("execution settings must be positive".into()));
        }
        if let Some(t) = self.time_limit {
            if !(t > 0.0) {
                return Err(Error::Invalid(format!("time limit must be positive, got {t}")));
            }
        }
        Ok(())
    }

    fn quantum_ticks(&self) -> usize {
        ((self.wait_quantum * TICK_HZ).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FailureReason {
    None,
    /// Task time limit ran out.
    Timeout,
    /// Time ran out after at least one waypoint could not be reached.
    WaypointTimeout,
    /// The controller produced an unusable prediction.
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    pub success: bool,
    pub elapsed: f64,
    pub waypoints: usize,
    pub waypoint_timeouts: usize,
    pub failure: FailureReason,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
    /// Commands and resulting states at the simulator tick rate.
    pub trace: Demonstration,
}

/// `substeps` commands moving linearly in position and spherically in
/// orientation; the open/close change happens on the last one.
pub fn interpolate(current: &GripperState, target: &GripperState, substeps: usize) -> Result<Vec<GripperState>> {
    if substeps == 0 {
        return Err(Error::Invalid("interpolation needs at least one substep".into()));
    }
    let a = current.pose;
    let b = target.pose;
    let mut out = Vec::with_capacity(substeps);
    for k in 1..substeps {
        let f = k as f64 / substeps as f64;
        let p = [
            a.position[0] + f * (b.position[0] - a.position[0]),
            a.position[1] + f * (b.position[1] - a.position[1]),
            a.position[2] + f * (b.position[2] - a.position[2]),
        ];
        out.push(GripperState {
            pose: Pose {
                position: p,
                rotation: slerp(&a.rotation, &b.rotation, f),
            },
            open: current.open,
        });
    }
    out.push(*target);
    Ok(out)
}

/// The open/close command counts as part of the pose: a waypoint that
/// changes the gripper is reached only once the change has been issued.
fn arrived(env: &EnvState, target: &GripperState, cfg: &ExecutionConfig) -> bool {
    let g = &env.gripper.pose;
    env.gripper.open == target.open
        && g.distance_to(&target.pose) <= cfg.arrival_position
        && quaternion_angle(&g.rotation, &target.pose.rotation) <= cfg.arrival_angle
}

/// When and how hard to knock the box during a trial.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Trigger {
    /// Before the n-th predicted waypoint (0-based).
    AtWaypoint { waypoint: usize },
    /// `waypoints` predictions after the box was first grasped.
    AfterGrasp { waypoints: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxPerturbation {
    pub trigger: Trigger,
    pub offset: [f64; 2],
    pub yaw: f64,
}

impl BoxPerturbation {
    fn is_zero(&self) -> bool {
        self.offset == [0.0, 0.0] && self.yaw == 0.0
    }
}

fn policy_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// One seeded trial: reset, then predict / interpolate / wait until success
/// or the time limit.
pub fn rollout(controller: &mut dyn Controller, task: Arc<TaskSpec>, seed: u64, cfg: &ExecutionConfig) -> Result<TrialResult> {
    run_trial(controller, task, seed, cfg, None)
}

/// Like [`rollout`], but the box is displaced once when `perturbation`
/// triggers. A grasped box is knocked out of the gripper.
pub fn perturb_and_rollout(
    controller: &mut dyn Controller,
    task: Arc<TaskSpec>,
    seed: u64,
    cfg: &ExecutionConfig,
    perturbation: BoxPerturbation,
) -> Result<TrialResult> {
    run_trial(controller, task, seed, cfg, Some(perturbation))
}

fn run_trial(
    controller: &mut dyn Controller,
    task: Arc<TaskSpec>,
    seed: u64,
    cfg: &ExecutionConfig,
    perturbation: Option<BoxPerturbation>,
) -> Result<TrialResult> {
    cfg.validate()?;
    let mut env = EnvState::reset(Arc::clone(&task), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let mut rng = policy_rng(seed);
    let limit = cfg.time_limit.unwrap_or(task.time_limit);
    let quantum = cfg.quantum_ticks();
    let timeout_ticks = (cfg.waypoint_timeout * TICK_HZ).round() as usize;

    let mut trace = Demonstration::new(task.kind, TICK_HZ, Source::Controller, Outcome::Failure, seed, vec![Waypoint::from_state(&env)]);
    controller.reset();
    let mut waypoints = 0;
    let mut timeouts = 0;
    let mut grasped_at: Option<usize> = None;
    let mut pending = perturbation.filter(|p| !p.is_zero());
    let mut diagnostic = None;
    let mut success = env.success();

    'trial: while !success && env.clock < limit - 1e-9 {
        if let Some(p) = pending {
            let fire = match p.trigger {
                Trigger::AtWaypoint { waypoint } => waypoints >= waypoint,
                Trigger::AfterGrasp { waypoints: n } => grasped_at.is_some_and(|g| waypoints >= g + n),
            };
            if fire {
                env.displace_object(0, p.offset, p.yaw)?;
                trace.perturbations.push(Perturbation {
                    tick: trace.commands.len(),
                    object: 0,
                    offset: p.offset,
                    yaw: p.yaw,
                });
                pending = None;
            }
        }
        if waypoints > 0 && waypoints % cfg.state_reset == 0 {
            controller.reset();
        }
        let target = match controller.next(&env.observe(), cfg.sampling, &mut rng) {
            Ok(t) => t,
            Err(e) => {
                diagnostic = Some(e.to_string());
                break;
            }
        };
        waypoints += 1;
        let commands = interpolate(&env.gripper, &target, cfg.substeps)?;
        let mut k = 0;
        loop {
            let cmd = commands[k.min(commands.len() - 1)];
            env.advance(&cmd, tick())?;
            trace.commands.push(cmd.to_vector());
            trace.waypoints.push(Waypoint::from_state(&env));
            k += 1;
            if grasped_at.is_none() && env.attached.is_some() {
                grasped_at = Some(waypoints);
            }
            success = env.success();
            if success || env.clock >= limit - 1e-9 {
                break 'trial;
            }
            if k % quantum == 0 && arrived(&env, &target, cfg) {
                break;
            }
            if k >= timeout_ticks {
                timeouts += 1;
                break;
            }
        }
    }

    let failure = if success {
        FailureReason::None
    } else if diagnostic.is_some() {
        FailureReason::Aborted
    } else if timeouts > 0 {
        FailureReason::WaypointTimeout
    } else {
        FailureReason::Timeout
    };
    trace.outcome = Outcome::from_success(success);
    Ok(TrialResult {
        seed,
        success,
        elapsed: env.clock,
        waypoints,
        waypoint_timeouts: timeouts,
        failure,
        diagnostic,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub success_rate: f64,
    pub trials: Vec<TrialResult>,
}

/// `trials` rollouts with seeds `base_seed, base_seed + 1, ...`.
pub fn evaluate(controller: &mut dyn Controller, task: Arc<TaskSpec>, trials: usize, base_seed: u64, cfg: &ExecutionConfig) -> Result<Evaluation> {
    if trials == 0 {
        return Err(Error::Invalid("evaluation needs at least one trial".into()));
    }
    let results = (0..trials as u64)
        .map(|i| rollout(controller, Arc::clone(&task), base_seed + i, cfg))
        .collect::<Result<Vec<_>>>()?;
    let wins = results.iter().filter(|r| r.success).count();
    Ok(Evaluation {
        success_rate: wins as f64 / trials as f64,
        trials: results,
    })
}

/// A random planar knock of `distance` meters for trial `seed`.
pub fn random_knock(seed: u64, trigger: Trigger, distance: f64) -> BoxPerturbation {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let angle: f64 = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    BoxPerturbation {
        trigger,
        offset: [distance * angle.cos(), distance * angle.sin()],
        yaw: 0.0,
    }
}

/// Re-executes a recording from its first waypoint. Controller traces are
/// driven by their stored commands and reproduce every state exactly; plain
/// demonstrations are driven by their recorded gripper states.
pub fn replay(demo: &Demonstration, task: Arc<TaskSpec>) -> Result<Vec<EnvState>> {
    if demo.task != task.kind {
        return Err(Error::Invalid(format!("recording is {}, scene is {}", demo.task, task.kind)));
    }
    demo.validate()?;
    let mut env = EnvState::from_observation(task, &demo.waypoints[0].input())?;
    let commands: Vec<[f64; 8]> = if demo.commands.is_empty() {
        demo.waypoints[1..].iter().map(|w| w.gripper).collect()
    } else {
        demo.commands.clone()
    };
    let dt = 1.0 / demo.record_hz;
    let mut states = vec![env.clone()];
    let mut events = demo.perturbations.iter().peekable();
    for (t, c) in commands.iter().enumerate() {
        while let Some(p) = events.next_if(|p| p.tick == t) {
            env.displace_object(p.object, p.offset, p.yaw)?;
        }
        let cmd = GripperState::from_slice(c)?;
        env.advance(&cmd, dt)?;
        states.push(env.clone());
    }
    Ok(states)
}
