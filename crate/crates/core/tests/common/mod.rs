//! Finite-difference helpers shared by the integration tests.

#![allow(dead_code)]

use lfd_core::nn::{Network, NetworkSpec, SequenceBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const EPS: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Relative error of an analytic derivative `a` against a central difference
/// `n` of a loss of size `loss`.
pub fn rel_err(a: f64, n: f64, loss: f64) -> f64 {
    // Central differences carry ~1e-16 |L| / eps of round-off, so components
    // below 1e-6 max(1, |L|) are compared against that floor instead of their
    // own size.
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6 * loss.abs().max(1.0))
}

/// Linear probe of the raw outputs: L = sum_r w_r . out_r
fn probe_loss(net: &Network, batch: &SequenceBatch, weights: &[f64]) -> f64 {
    let cache = net.forward_batch(batch).unwrap();
    cache.outputs.iter().zip(weights).map(|(o, w)| o * w).sum()
}

/// Worst relative error between backprop and central differences over every
/// parameter, for a random packed batch where `active[t]` sequences still
/// run at step `t`.
pub fn check_packed(spec: NetworkSpec, active: Vec<usize>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::new(spec, &mut rng).unwrap();
    // larger weights than the init range so gates leave their linear regime
    for t in net.params_mut().tensors_mut() {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.6..0.6));
    }
    let rows: usize = active.iter().sum();
    let batch = SequenceBatch {
        steps: active.len(),
        batch: active[0],
        input_dim: spec.input_dim,
        inputs: (0..rows * spec.input_dim).map(|_| rng.gen_range(-1.5..1.5)).collect(),
        active,
    };
    let cache = net.forward_batch(&batch).unwrap();
    let weights: Vec<f64> = (0..cache.outputs.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let loss = probe_loss(&net, &batch, &weights);
    let grads = net.backward_batch(&cache, &weights).unwrap();
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|t| t.data().to_vec()).collect();

    let mut worst: f64 = 0.0;
    for (ti, a_t) in analytic.iter().enumerate() {
        for k in 0..a_t.len() {
            let orig = net.params().tensors()[ti].data()[k];
            net.params_mut().tensors_mut()[ti].data_mut()[k] = orig + EPS;
            let hi = probe_loss(&net, &batch, &weights);
            net.params_mut().tensors_mut()[ti].data_mut()[k] = orig - EPS;
            let lo = probe_loss(&net, &batch, &weights);
            net.params_mut().tensors_mut()[ti].data_mut()[k] = orig;
            let numeric = (hi - lo) / (2.0 * EPS);
            worst = worst.max(rel_err(a_t[k], numeric, loss));
        }
    }
    worst
}
