use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{frequency_reduce, scripted_pick_place, scripted_push, shift_augment, Demonstration, ImperfectionConfig, DEFAULT_SHIFT_COUNT};
use crate::error::{Error, Result};
use crate::sim::{EnvState, TaskKind, TaskSpec};

/// Training rate of the waypoint sequences, Hz.
pub const TRAIN_HZ: f64 = 4.0;

/// `count` scripted demonstrations. Demonstration `i` draws from its own
/// stream of the seeded generator and gets raw id `i`, so any prefix of a
/// corpus is reproducible on its own.
pub fn generate_demos(task: &Arc<TaskSpec>, count: usize, seed: u64, cfg: &ImperfectionConfig) -> Result<Vec<Demonstration>> {
    cfg.validate()?;
    task.validate()?;
    (0..count as u64)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i);
            let env = EnvState::reset(Arc::clone(task), &mut rng)?;
            match task.kind {
                TaskKind::PickPlace => scripted_pick_place(env, &mut rng, cfg, i),
                TaskKind::PushToPose => scripted_push(env, &mut rng, cfg, i),
            }
        })
        .collect()
}

/// The task's augmentation chain: pick-and-place is shifted then reduced in
/// frequency, push only reduced. Already augmented input is rejected.
pub fn augment_demos(demos: &[Demonstration], task: &TaskSpec) -> Result<Vec<Demonstration>> {
    let mut out = Vec::new();
    for d in demos {
        if d.is_augmented() {
            return Err(Error::Invalid(format!("demonstration {} is already augmented", d.raw_id)));
        }
        if d.task != task.kind {
            return Err(Error::Invalid(format!("{} demonstration in a {} corpus", d.task, task.kind)));
        }
        match task.kind {
            TaskKind::PickPlace => {
                for s in shift_augment(d, DEFAULT_SHIFT_COUNT, task)? {
                    out.extend(frequency_reduce(&s, TRAIN_HZ)?);
                }
            }
            TaskKind::PushToPose => out.extend(frequency_reduce(d, TRAIN_HZ)?),
        }
    }
    Ok(out)
}
