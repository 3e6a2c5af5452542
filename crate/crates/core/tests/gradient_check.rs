//! Central finite differences against the analytic backward passes.

use lfd_core::mdn::{nll_loss, split_activations_with, DensityForm};
use lfd_core::nn::{Body, Head, Network, NetworkSpec, SequenceBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

mod common;

use common::{check_packed, rel_err, EPS, TOL};

fn check_network(spec: NetworkSpec, steps: usize, batch_size: usize, seed: u64) -> f64 {
    check_packed(spec, vec![batch_size; steps], seed)
}

#[test]
fn toy_lstm_bptt_matches_finite_differences() {
    // 2 layers x 5 units, 10 steps, 3-dim input
    let spec = NetworkSpec {
        body: Body::Lstm { layers: 2, width: 5 },
        head: Head::Mse,
        input_dim: 3,
        output_dim: 2,
        unroll: 50,
    };
    let worst = check_network(spec, 10, 1, 1);
    assert!(worst < TOL, "max relative error {worst}");
}

#[test]
fn every_variant_matches_finite_differences_on_small_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for trial in 0..12 {
        let layers = rng.gen_range(1..=3);
        let width = rng.gen_range(2..=5);
        let input_dim = rng.gen_range(1..=4);
        let output_dim = rng.gen_range(1..=3);
        let body = if trial % 2 == 0 {
            Body::Lstm { layers, width }
        } else {
            Body::Feedforward { layers, width }
        };
        let head = if trial % 4 < 2 {
            Head::Mse
        } else {
            Head::Mdn {
                kernels: rng.gen_range(1..=3),
                density: DensityForm::Normalized,
            }
        };
        let spec = NetworkSpec {
            body,
            head,
            input_dim,
            output_dim,
            unroll: 50,
        };
        let steps = rng.gen_range(1..=6);
        let batch = rng.gen_range(1..=3);
        let worst = check_network(spec, steps, batch, 1000 + trial);
        assert!(worst < TOL, "trial {trial} {spec:?}: max relative error {worst}");
    }
}

#[test]
fn mdn_nll_gradient_over_all_200_raw_activations() {
    let (m, c) = (20, 8);
    for form in [DensityForm::Normalized, DensityForm::SinglePower] {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let raw: Vec<f64> = (0..(c + 2) * m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let (loss, g) = nll_loss(&split_activations_with(&raw, m, c, form).unwrap(), &y).unwrap();
        let e = |r: &[f64]| nll_loss(&split_activations_with(r, m, c, form).unwrap(), &y).unwrap().0;
        for k in 0..raw.len() {
            let mut hi = raw.clone();
            let mut lo = raw.clone();
            hi[k] += EPS;
            lo[k] -= EPS;
            let numeric = (e(&hi) - e(&lo)) / (2.0 * EPS);
            assert!(rel_err(g[k], numeric, loss) < TOL, "{form:?} slot {k}: {} vs {numeric}", g[k]);
        }
    }
}

#[test]
fn zero_loss_gradient_gives_zero_parameter_gradient() {
    let spec = NetworkSpec {
        body: Body::Lstm { layers: 2, width: 4 },
        head: Head::Mse,
        input_dim: 3,
        output_dim: 2,
        unroll: 50,
    };
    let net = Network::new(spec, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let inputs: Vec<Vec<f64>> = (0..7).map(|t| vec![t as f64 * 0.1, -0.2, 0.5]).collect();
    let (_, cache) = net.forward_sequence(&inputs).unwrap();
    let grads = net.backward_sequence(&cache, &vec![vec![0.0; 2]; 7]).unwrap();
    assert!(grads.tensors().iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn ragged_batches_match_finite_differences() {
    let spec = NetworkSpec {
        body: Body::Lstm { layers: 2, width: 4 },
        head: Head::Mdn {
            kernels: 2,
            density: DensityForm::Normalized,
        },
        input_dim: 3,
        output_dim: 2,
        unroll: 50,
    };
    for (i, active) in [vec![3, 3, 2, 1], vec![4, 2, 2, 2, 1], vec![2, 1]].into_iter().enumerate() {
        let worst = check_packed(spec, active, 70 + i as u64);
        assert!(worst < TOL, "max relative error {worst}");
    }
}

#[test]
fn packed_rows_match_separate_sequences() {
    let spec = NetworkSpec {
        body: Body::Lstm { layers: 2, width: 4 },
        head: Head::Mse,
        input_dim: 3,
        output_dim: 2,
        unroll: 50,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let net = Network::new(spec, &mut rng).unwrap();
    let seqs: Vec<Vec<Vec<f64>>> = [5, 3, 2]
        .iter()
        .map(|&n| (0..n).map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect())
        .collect();
    let active = vec![3, 3, 2, 1, 1];
    let mut inputs = Vec::new();
    for (t, &n) in active.iter().enumerate() {
        for s in &seqs[..n] {
            inputs.extend_from_slice(&s[t]);
        }
    }
    let packed = net
        .forward_batch(&SequenceBatch {
            steps: 5,
            batch: 3,
            input_dim: 3,
            active,
            inputs,
        })
        .unwrap();
    for (j, s) in seqs.iter().enumerate() {
        let (alone, _) = net.forward_sequence(s).unwrap();
        for (t, o) in alone.iter().enumerate() {
            for (a, b) in o.iter().zip(packed.output(t, j)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
