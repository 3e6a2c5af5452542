use super::network::Parameters;
use crate::error::{Error, Result};

pub const DEFAULT_LEARNING_RATE: f64 = 0.001;
pub const DEFAULT_DECAY: f64 = 0.99;
pub const LARGE_DATASET_DECAY: f64 = 0.999;
pub const RMSPROP_EPSILON: f64 = 1e-8;
pub const DEFAULT_CLIP: f64 = 1.0;

/// Decay for the squared-gradient average: 0.99 below 10^5 training
/// waypoints, 0.999 from there on.
pub fn decay_for_waypoints(waypoints: usize) -> f64 {
    if waypoints < 100_000 {
        DEFAULT_DECAY
    } else {
        LARGE_DATASET_DECAY
    }
}

/// Elementwise clamp of every gradient into `[-limit, limit]`.
pub fn clip_gradients(grads: &mut Parameters, limit: f64) {
    for t in grads.tensors_mut() {
        clip_slice(t.data_mut(), limit);
    }
}

pub fn clip_slice(values: &mut [f64], limit: f64) {
    values.iter_mut().for_each(|v| *v = v.clamp(-limit, limit));
}

/// RMSProp running averages plus hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    cache: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &Parameters, learning_rate: f64, decay: f64) -> Result<Self> {
        if !(0.99..=0.999).contains(&decay) {
            return Err(Error::Invalid(format!("decay {decay} outside [0.99, 0.999]")));
        }
        if !(learning_rate > 0.0) {
            return Err(Error::Invalid(format!("learning rate {learning_rate} must be positive")));
        }
        Ok(Self {
            learning_rate,
            decay,
            epsilon: RMSPROP_EPSILON,
            cache: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        })
    }

    pub fn cache(&self) -> &[Vec<f64>] {
        &self.cache
    }

    /// `cache <- decay cache + (1 - decay) g^2; p <- p - lr g / (sqrt(cache) + eps)`
    pub fn rmsprop_update(&mut self, params: &mut Parameters, grads: &Parameters) -> Result<()> {
        let grads = grads.tensors();
        let mut params = params.tensors_mut();
        if params.len() != grads.len() || params.len() != self.cache.len() {
            return Err(Error::Shape("optimizer, parameter and gradient layouts differ".into()));
        }
        for (idx, ((p, g), c)) in params.iter_mut().zip(&grads).zip(&mut self.cache).enumerate() {
            if p.len() != g.len() || p.len() != c.len() {
                return Err(Error::Shape(format!("tensor {idx}: parameter and gradient sizes differ")));
            }
            rmsprop_slice(p.data_mut(), g.data(), c, self.learning_rate, self.decay, self.epsilon);
            if !p.all_finite() {
                return Err(Error::NonFinite(format!("parameter tensor {idx} after RMSProp update")));
            }
        }
        Ok(())
    }
}

pub fn rmsprop_slice(p: &mut [f64], g: &[f64], cache: &mut [f64], lr: f64, decay: f64, eps: f64) {
    for ((p, g), c) in p.iter_mut().zip(g).zip(cache.iter_mut()) {
        *c = decay * *c + (1.0 - decay) * g * g;
        *p -= lr * g / (c.sqrt() + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_examples_and_idempotence() {
        let mut v = vec![2.5, -3.0, 0.3, -0.999, 1.0];
        clip_slice(&mut v, 1.0);
        assert_eq!(v, vec![1.0, -1.0, 0.3, -0.999, 1.0]);
        let again = {
            let mut w = v.clone();
            clip_slice(&mut w, 1.0);
            w
        };
        assert_eq!(v, again);
    }

    #[test]
    fn zero_gradient_only_decays_the_cache() {
        let mut p = vec![0.5, -0.25];
        let mut cache = vec![4.0, 1.0];
        rmsprop_slice(&mut p, &[0.0, 0.0], &mut cache, 0.001, 0.99, 1e-8);
        assert_eq!(p, vec![0.5, -0.25]);
        assert_eq!(cache, vec![0.99 * 4.0, 0.99]);
    }

    #[test]
    fn constant_gradient_reaches_the_fixed_point() {
        // cache_n = g^2 (1 - decay^n), so the step tends to lr
        let g = 0.37;
        let mut p = vec![0.0];
        let mut cache = vec![0.0];
        let mut last = 0.0;
        for n in 1..=3000 {
            let before = p[0];
            rmsprop_slice(&mut p, &[g], &mut cache, 0.001, 0.99, 1e-8);
            last = before - p[0];
            let closed = g * g * (1.0 - 0.99f64.powi(n));
            assert!((cache[0] - closed).abs() < 1e-12);
        }
        assert!((cache[0] - g * g).abs() < 1e-12);
        assert!((last - 0.001).abs() < 1e-9);
    }

    proptest::proptest! {
        // The cold-cache first step has magnitude 10 lr, so the starting point
        // must sit more than 5 lr from the minimum for the step not to overshoot.
        #[test]
        fn one_step_decreases_a_convex_quadratic(
            lr in 1e-5f64..=0.1,
            a in 0.01f64..100.0,
            b in -5.0f64..5.0,
            dist in 0.51f64..10.0,
            sign in proptest::bool::ANY,
            warm in 0.0f64..4.0,
        ) {
            let x0 = if sign { b + dist } else { b - dist };
            let f = |x: f64| a * (x - b) * (x - b);
            let g = 2.0 * a * (x0 - b);
            let mut x = vec![x0];
            let mut cache = vec![warm * g * g];
            rmsprop_slice(&mut x, &[g], &mut cache, lr, 0.99, 1e-8);
            proptest::prop_assert!(f(x[0]) < f(x0));
        }
    }

    #[test]
    fn decay_schedule() {
        assert_eq!(decay_for_waypoints(99_999), 0.99);
        assert_eq!(decay_for_waypoints(100_000), 0.999);
    }
}
