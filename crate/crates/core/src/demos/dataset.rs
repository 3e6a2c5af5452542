use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Demonstration;
use crate::error::{Error, Result};
use crate::sim::OBS_DIM;

pub const TRAIN_FRACTION: f64 = 0.8;
const STD_FLOOR: f64 = 1e-8;

/// Per-dimension input statistics; the gripper slice (last 8 values) also
/// normalizes the targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Population mean and standard deviation; constant dimensions get a
    /// unit scale instead of a zero one.
    pub fn from_inputs<'a>(inputs: impl Iterator<Item = &'a [f64]> + Clone, dim: usize) -> Result<Self> {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        for x in inputs.clone() {
            if x.len() != dim {
                return Err(Error::Shape(format!("input of length {} where {dim} expected", x.len())));
            }
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
            n += 1;
        }
        if n == 0 {
            return Err(Error::Invalid("no inputs to compute statistics from".into()));
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; dim];
        for x in inputs {
            for ((s, v), m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd < STD_FLOOR {
                    1.0
                } else {
                    sd
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    /// Normalizes a vector that corresponds to the trailing dimensions.
    pub fn normalize_tail(&self, x: &[f64]) -> Vec<f64> {
        let off = self.dim() - x.len();
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[off + i]) / self.std[off + i])
            .collect()
    }

    pub fn denormalize_tail(&self, x: &[f64]) -> Vec<f64> {
        let off = self.dim() - x.len();
        x.iter()
            .enumerate()
            .map(|(i, v)| v * self.std[off + i] + self.mean[off + i])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub demos: Vec<Demonstration>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub stats: NormStats,
}

impl Dataset {
    pub fn train_demos(&self) -> impl Iterator<Item = &Demonstration> + Clone {
        self.train.iter().map(|&i| &self.demos[i])
    }

    pub fn validation_demos(&self) -> impl Iterator<Item = &Demonstration> + Clone {
        self.validation.iter().map(|&i| &self.demos[i])
    }

    /// Total waypoints across the training split.
    pub fn train_waypoints(&self) -> usize {
        self.train_demos().map(Demonstration::len).sum()
    }
}

/// Random 80/20 split by raw recording, so every derived copy of a recording
/// lands on the same side. Statistics come from the training side only.
pub fn split_dataset(demos: Vec<Demonstration>, rng: &mut impl Rng) -> Result<Dataset> {
    if demos.len() < 5 {
        return Err(Error::Invalid(format!("need at least 5 demonstrations, got {}", demos.len())));
    }
    let mut raw: Vec<u64> = demos.iter().map(|d| d.raw_id).collect::<BTreeSet<_>>().into_iter().collect();
    if raw.len() < 2 {
        return Err(Error::Invalid("all demonstrations share one raw id; cannot split".into()));
    }
    raw.shuffle(rng);
    let n_train = ((raw.len() as f64 * TRAIN_FRACTION).round() as usize).clamp(1, raw.len() - 1);
    let train_ids: HashSet<u64> = raw[..n_train].iter().copied().collect();
    let (train, validation): (Vec<usize>, Vec<usize>) =
        (0..demos.len()).partition(|&i| train_ids.contains(&demos[i].raw_id));

    let inputs: Vec<[f64; OBS_DIM]> = train
        .iter()
        .flat_map(|&i| demos[i].waypoints.iter().map(|w| w.input()))
        .collect();
    let stats = NormStats::from_inputs(inputs.iter().map(|x| x.as_slice()), OBS_DIM)?;
    Ok(Dataset {
        demos,
        train,
        validation,
        stats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::demos::testutil::synthetic;
    use crate::demos::frequency_reduce;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn hundred_raw_demos_split_eighty_twenty_without_leakage() {
        let demos: Vec<_> = (0..100)
            .flat_map(|i| frequency_reduce(&synthetic(40, i), 4.0).unwrap())
            .collect();
        let ds = split_dataset(demos, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tr: BTreeSet<u64> = ds.train_demos().map(|d| d.raw_id).collect();
        let va: BTreeSet<u64> = ds.validation_demos().map(|d| d.raw_id).collect();
        assert_eq!(tr.len(), 80);
        assert_eq!(va.len(), 20);
        assert!(tr.is_disjoint(&va));
        assert_eq!(ds.train.len() + ds.validation.len(), 800);
    }

    #[test]
    fn training_inputs_normalize_to_zero_mean_unit_std() {
        let demos: Vec<_> = (0..20).map(|i| synthetic(25 + i as usize, i)).collect();
        let ds = split_dataset(demos, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let normed: Vec<Vec<f64>> = ds
            .train_demos()
            .flat_map(|d| d.waypoints.iter().map(|w| ds.stats.normalize(&w.input())))
            .collect();
        let n = normed.len() as f64;
        for k in 0..OBS_DIM {
            let mean: f64 = normed.iter().map(|x| x[k]).sum::<f64>() / n;
            let var: f64 = normed.iter().map(|x| (x[k] - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-9, "dim {k} mean {mean}");
            // constant dimensions keep their zero spread
            if ds.stats.std[k] != 1.0 || var > 0.0 {
                assert!((var.sqrt() - 1.0).abs() < 1e-9, "dim {k} std {}", var.sqrt());
            }
        }
    }

    #[test]
    fn tail_round_trip() {
        let stats = NormStats {
            mean: vec![1.0, 2.0, 3.0],
            std: vec![2.0, 4.0, 0.5],
        };
        let y = [5.0, -1.0];
        let back = stats.denormalize_tail(&stats.normalize_tail(&y));
        assert_eq!(back, y.to_vec());
        assert!(split_dataset(vec![synthetic(3, 0); 4], &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
