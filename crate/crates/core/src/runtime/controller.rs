use rand::RngCore;

use super::SamplingMode;
use crate::demos::NormStats;
use crate::error::{Error, Result};
use crate::mdn::{mode, sample, split_activations_with};
use crate::nn::{Head, LstmState, Network};
use crate::sim::{normalize_quaternion, GripperState, Pose, GRIPPER_DIM};
use crate::training::Checkpoint;

/// Anything that maps observations to the next gripper waypoint.
pub trait Controller {
    /// Clears any recurrent state.
    fn reset(&mut self);
    fn next(&mut self, observation: &[f64], sampling: SamplingMode, rng: &mut dyn RngCore) -> Result<GripperState>;
}

/// One prediction: normalizes the observation, advances the network, draws
/// (or picks) a target and converts it to a gripper command.
pub fn next_waypoint(
    net: &Network,
    stats: &NormStats,
    state: &mut LstmState,
    observation: &[f64],
    sampling: SamplingMode,
    rng: &mut dyn RngCore,
) -> Result<GripperState> {
    let x = stats.normalize(observation);
    let raw = net.step(&x, state)?;
    let spec = net.spec();
    let y = match spec.head {
        Head::Mse => raw,
        Head::Mdn { kernels, density } => {
            let mix = split_activations_with(&raw, kernels, spec.output_dim, density)?;
            match sampling {
                SamplingMode::Sample => sample(&mix, rng),
                SamplingMode::Mode => mode(&mix),
            }
        }
    };
    let v = stats.denormalize_tail(&y);
    if v.len() != GRIPPER_DIM || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("predicted waypoint {v:?}")));
    }
    let rotation = normalize_quaternion([v[3], v[4], v[5], v[6]])?;
    Ok(GripperState {
        pose: Pose {
            position: [v[0], v[1], v[2]],
            rotation,
        },
        open: v[7] > 0.5,
    })
}

/// A trained checkpoint with its recurrent state.
pub struct NetworkController {
    net: Network,
    stats: NormStats,
    state: LstmState,
}

impl NetworkController {
    pub fn new(checkpoint: &Checkpoint) -> Result<Self> {
        let net = checkpoint.network()?;
        let state = net.initial_state();
        Ok(Self {
            net,
            stats: checkpoint.stats.clone(),
            state,
        })
    }
}

impl Controller for NetworkController {
    fn reset(&mut self) {
        self.state = self.net.initial_state();
    }

    fn next(&mut self, observation: &[f64], sampling: SamplingMode, rng: &mut dyn RngCore) -> Result<GripperState> {
        next_waypoint(&self.net, &self.stats, &mut self.state, observation, sampling, rng)
    }
}
