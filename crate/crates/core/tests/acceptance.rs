//! End-to-end acceptance checks. Each test prints one PASS/FAIL line per
//! criterion before asserting it.

mod common;

use std::io::Write;
use std::sync::{Arc, Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use lfd_core::demos::{
    augment_demos, frequency_reduce, generate_demos, shift_augment, split_dataset, write_dataset, Demonstration, ImperfectionConfig,
    DEFAULT_SHIFT_COUNT, TRAIN_HZ,
};
use lfd_core::mdn::{kernel_density, sample, split_activations, split_activations_with, DensityForm, MixtureParams};
use lfd_core::nn::{Architecture, Body, Head, NetworkSpec};
use lfd_core::runtime::{evaluate, perturb_and_rollout, random_knock, ExecutionConfig, NetworkController, Trigger};
use lfd_core::sim::{TaskKind, TaskSpec, GRIPPER_DIM, OBS_DIM};
use lfd_core::training::{bimodal_windows, fit, train, Checkpoint, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use common::{check_packed, rel_err, EPS, TOL};

/// Raw scripted demonstrations per task for the controller comparisons.
const RAW_DEMOS: usize = 600;
const TRIALS: u64 = 20;
const EVAL_SEED: u64 = 1000;

/// Written straight to stdout so the verdicts show up without `--nocapture`.
fn say(line: String) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn report(id: &str, ok: bool, detail: impl AsRef<str>) -> bool {
    say(format!("{id} {} {}", if ok { "PASS" } else { "FAIL" }, detail.as_ref()));
    ok
}

/// Runtimes are part of the criteria, so the tests take turns on the CPU.
fn serial() -> MutexGuard<'static, ()> {
    static LOCK: Mutex<()> = Mutex::new(());
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed <= Duration::from_secs(limit_secs)
}

#[test]
fn a1_gradients_match_finite_differences() {
    let _serial = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);

    let mut worst_mdn: f64 = 0.0;
    for k in 0..100 {
        let m = rng.gen_range(1..=6);
        let c = rng.gen_range(1..=8);
        let form = if k % 2 == 0 { DensityForm::Normalized } else { DensityForm::SinglePower };
        let scale = rng.gen_range(0.2..2.0);
        let raw: Vec<f64> = (0..(c + 2) * m).map(|_| rng.gen_range(-scale..scale)).collect();
        let y: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = |r: &[f64]| lfd_core::mdn::nll_loss(&split_activations_with(r, m, c, form).unwrap(), &y).unwrap();
        let (loss, g) = e(&raw);
        for j in 0..raw.len() {
            let mut hi = raw.clone();
            let mut lo = raw.clone();
            hi[j] += EPS;
            lo[j] -= EPS;
            let numeric = (e(&hi).0 - e(&lo).0) / (2.0 * EPS);
            worst_mdn = worst_mdn.max(rel_err(g[j], numeric, loss));
        }
    }

    let mut worst_net: f64 = 0.0;
    for k in 0..100u64 {
        let layers = rng.gen_range(1..=3);
        let width = rng.gen_range(2..=5);
        let head = if k % 2 == 0 {
            Head::Mse
        } else {
            Head::Mdn {
                kernels: rng.gen_range(1..=3),
                density: DensityForm::Normalized,
            }
        };
        let spec = NetworkSpec {
            body: Body::Lstm { layers, width },
            head,
            input_dim: rng.gen_range(1..=4),
            output_dim: rng.gen_range(1..=3),
            unroll: 50,
        };
        // ragged batches: sequence j runs for lens[j] steps
        let mut lens: Vec<usize> = (0..rng.gen_range(1..=3)).map(|_| rng.gen_range(1..=8)).collect();
        lens.sort_by(|a, b| b.cmp(a));
        let active = (0..lens[0]).map(|t| lens.iter().filter(|&&l| l > t).count()).collect();
        worst_net = worst_net.max(check_packed(spec, active, 5000 + k));
    }

    let ok = worst_mdn < TOL && worst_net < TOL && within(started.elapsed(), 60);
    let detail = format!(
        "mdn max rel err {worst_mdn:.2e}, lstm bptt max rel err {worst_net:.2e} (100 configurations each, {:.1}s)",
        started.elapsed().as_secs_f64()
    );
    assert!(report("A1", ok, detail));
}

fn raw_corpus(kind: TaskKind, count: usize, seed: u64, imperfections: &ImperfectionConfig) -> (Arc<TaskSpec>, Vec<Demonstration>) {
    let task = Arc::new(TaskSpec::for_kind(kind));
    let demos = generate_demos(&task, count, seed, imperfections).unwrap();
    (task, demos)
}

#[test]
fn a2_pipeline_counts() {
    let _serial = serial();
    let started = Instant::now();
    let (pick, raw) = raw_corpus(TaskKind::PickPlace, 650, 7, &ImperfectionConfig::default());
    let mut shifted = Vec::new();
    for d in &raw {
        shifted.extend(shift_augment(d, DEFAULT_SHIFT_COUNT, &pick).unwrap());
    }
    let mut reduced = 0;
    for d in &shifted {
        reduced += frequency_reduce(d, TRAIN_HZ).unwrap().len();
    }
    let (push, raw_push) = raw_corpus(TaskKind::PushToPose, 1614, 7, &ImperfectionConfig::default());
    let push_out = augment_demos(&raw_push, &push).unwrap().len();
    let pick_out = augment_demos(&raw, &pick).unwrap().len();

    let ok = shifted.len() == 3900 && reduced == 31_200 && pick_out == 31_200 && push_out == 12_912;
    let detail = format!(
        "pick-place {} -> {} -> {reduced}, push {} -> {push_out} ({:.1}s)",
        raw.len(),
        shifted.len(),
        raw_push.len(),
        started.elapsed().as_secs_f64()
    );
    assert!(report("A2", ok, detail));
}

#[test]
fn a3_mixture_correctness() {
    let _serial = serial();
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);

    let (m, c) = (20, 8);
    let mut raw = vec![0.0; (c + 2) * m];
    let mut worst_sum: f64 = 0.0;
    for _ in 0..1_000_000 {
        let scale = rng.gen_range(0.1..60.0);
        for v in raw[m * c + m..].iter_mut() {
            *v = rng.gen_range(-scale..scale);
        }
        let p = split_activations(&raw, m, c).unwrap();
        worst_sum = worst_sum.max((p.alphas.iter().sum::<f64>() - 1.0).abs());
    }

    // composite Simpson over +-12 sigma; the tails beyond hold < 1e-32
    let mut worst_integral: f64 = 0.0;
    for (mu, sigma) in [(0.0, 1.0), (0.3, 0.05), (-2.0, 3.0), (5.0, 1e-3)] {
        let (a, b, n) = (mu - 12.0 * sigma, mu + 12.0 * sigma, 20_000);
        let h = (b - a) / n as f64;
        let f = |x: f64| kernel_density(&[x], &[mu], sigma, 1).unwrap();
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        worst_integral = worst_integral.max((s * h / 3.0 - 1.0).abs());
    }

    // kernels 10 apart with tiny widths, so a draw identifies its kernel
    let alphas = vec![0.05, 0.4, 0.25, 0.3];
    let mus: Vec<f64> = (0..4).map(|i| 10.0 * i as f64).collect();
    let mix = MixtureParams::new(alphas.clone(), mus, vec![1e-3; 4], 1, DensityForm::Normalized).unwrap();
    let mut counts = [0usize; 4];
    let draws = 100_000;
    for _ in 0..draws {
        counts[(sample(&mix, &mut rng)[0] / 10.0).round() as usize] += 1;
    }
    let worst_freq = counts
        .iter()
        .zip(&alphas)
        .map(|(&n, a)| (n as f64 / draws as f64 - a).abs())
        .fold(0.0, f64::max);

    let ok = worst_sum < 1e-12 && worst_integral < 1e-6 && worst_freq <= 0.01 && within(started.elapsed(), 60);
    let detail = format!(
        "alpha sum err {worst_sum:.1e}, density integral err {worst_integral:.1e}, frequency err {worst_freq:.4} ({:.1}s)",
        started.elapsed().as_secs_f64()
    );
    assert!(report("A3", ok, detail));
}

fn checkpoint_digest(c: &Checkpoint) -> String {
    let mut bytes = Vec::new();
    c.write_to(&mut bytes).unwrap();
    hex::encode(Sha256::digest(&bytes))
}

fn dataset_digest(demos: &[Demonstration]) -> String {
    let mut bytes = Vec::new();
    write_dataset(&mut bytes, demos).unwrap();
    hex::encode(Sha256::digest(&bytes))
}

/// Default training configuration apart from the seed, or an explicit epoch cap.
fn train_on(task: &TaskSpec, raw: &[Demonstration], arch: Architecture, epochs: Option<usize>) -> Checkpoint {
    let demos = augment_demos(raw, task).unwrap();
    let dataset = split_dataset(demos, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        max_epochs: epochs.unwrap_or(defaults.max_epochs),
        seed: 1,
        ..defaults
    };
    train(&dataset, arch.spec(OBS_DIM, GRIPPER_DIM), &cfg).unwrap().0
}

fn success_rate(ckpt: &Checkpoint, task: &Arc<TaskSpec>) -> f64 {
    let mut c = NetworkController::new(ckpt).unwrap();
    evaluate(&mut c, Arc::clone(task), TRIALS as usize, EVAL_SEED, &ExecutionConfig::default()).unwrap().success_rate
}

#[test]
fn a6_seed_and_config_determine_every_artifact() {
    let _serial = serial();
    let started = Instant::now();
    let run = || {
        let (task, raw) = raw_corpus(TaskKind::PushToPose, 12, 5, &ImperfectionConfig::default());
        let data = dataset_digest(&raw);
        let ckpt = train_on(&task, &raw, Architecture::LstmMdn, Some(2));
        let mut c = NetworkController::new(&ckpt).unwrap();
        let e = evaluate(&mut c, Arc::clone(&task), 3, EVAL_SEED, &ExecutionConfig::default()).unwrap();
        let traces: Vec<String> = e.trials.iter().map(|t| dataset_digest(std::slice::from_ref(&t.trace))).collect();
        let outcomes: Vec<bool> = e.trials.iter().map(|t| t.success).collect();
        (data, checkpoint_digest(&ckpt), outcomes, traces)
    };
    let a = run();
    let b = run();
    let ok = a == b;
    let detail = format!(
        "dataset {}, checkpoint {}, {} trial traces identical across runs ({:.0}s)",
        &a.0[..12],
        &a.1[..12],
        a.3.len(),
        started.elapsed().as_secs_f64()
    );
    assert!(report("A6", ok, detail));
}

#[test]
fn a7_mdn_keeps_both_modes_where_mse_averages() {
    let _serial = serial();
    let started = Instant::now();
    let train_w = bimodal_windows(1000, 10);
    let val_w = bimodal_windows(200, 20);
    // Every kernel starts out on the single-Gaussian fit at 0, and splitting
    // away from it takes 25-60 epochs during which the validation loss is
    // flat, so early stopping is off for the mixture.
    let mdn_cfg = TrainConfig {
        max_epochs: 150,
        patience: 150,
        ..Default::default()
    };
    let mdn = fit(&train_w, &val_w, Architecture::LstmMdn.spec(1, 1), &mdn_cfg).unwrap().network;
    let mse = fit(&train_w, &val_w, Architecture::LstmMse.spec(1, 1), &TrainConfig::default()).unwrap().network;

    let Head::Mdn { kernels, density } = mdn.spec().head else { unreachable!() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut near_neg, mut near_pos, mut total) = (0usize, 0usize, 0usize);
    let mut worst_mse: f64 = 0.0;
    for w in bimodal_windows(100, 5) {
        let xs: Vec<Vec<f64>> = (0..w.len).map(|t| w.input(t).to_vec()).collect();
        let (raw, _) = mdn.forward_sequence(&xs).unwrap();
        for r in &raw {
            let y = sample(&split_activations_with(r, kernels, 1, density).unwrap(), &mut rng)[0];
            near_neg += ((y + 1.0).abs() <= 0.15) as usize;
            near_pos += ((y - 1.0).abs() <= 0.15) as usize;
            total += 1;
        }
        let (pred, _) = mse.forward_sequence(&xs).unwrap();
        worst_mse = pred.iter().fold(worst_mse, |acc, p| acc.max(p[0].abs()));
    }
    let (neg, pos) = (near_neg as f64 / total as f64, near_pos as f64 / total as f64);
    let ok = neg >= 0.35 && pos >= 0.35 && worst_mse <= 0.15 && within(started.elapsed(), 300);
    let detail = format!(
        "MDN samples {:.0}% near -1, {:.0}% near +1; MSE max |prediction| {worst_mse:.3} ({:.0}s)",
        neg * 100.0,
        pos * 100.0,
        started.elapsed().as_secs_f64()
    );
    assert!(report("A7", ok, detail));
}

struct Controllers {
    /// Indexed like `Architecture::ALL`.
    pick: Vec<Checkpoint>,
    push: Vec<Checkpoint>,
    pick_task: Arc<TaskSpec>,
    push_task: Arc<TaskSpec>,
    training: Duration,
}

fn controllers() -> &'static Controllers {
    static CELL: OnceLock<Controllers> = OnceLock::new();
    CELL.get_or_init(|| {
        let started = Instant::now();
        let imperfect = ImperfectionConfig::default();
        let (pick_task, pick_raw) = raw_corpus(TaskKind::PickPlace, RAW_DEMOS, 1, &imperfect);
        let (push_task, push_raw) = raw_corpus(TaskKind::PushToPose, RAW_DEMOS, 1, &imperfect);
        let pick = Architecture::ALL.iter().map(|&a| train_on(&pick_task, &pick_raw, a, None)).collect();
        let push = Architecture::ALL.iter().map(|&a| train_on(&push_task, &push_raw, a, None)).collect();
        Controllers {
            pick,
            push,
            pick_task,
            push_task,
            training: started.elapsed(),
        }
    })
}

#[test]
fn a4_architecture_ordering() {
    let _serial = serial();
    let models = controllers();
    let started = Instant::now();
    let mut pick = Vec::new();
    let mut push = Vec::new();
    for (i, arch) in Architecture::ALL.iter().enumerate() {
        let p = success_rate(&models.pick[i], &models.pick_task) * 100.0;
        let q = success_rate(&models.push[i], &models.push_task) * 100.0;
        say(format!("    {:<16} pick-place {p:>5.1}%  push {q:>5.1}%", arch.label()));
        pick.push(p);
        push.push(q);
    }
    let idx = |a: Architecture| Architecture::ALL.iter().position(|&b| b == a).unwrap();
    let (lstm_mdn, ff_mse) = (idx(Architecture::LstmMdn), idx(Architecture::FeedforwardMse));
    let elapsed = models.training + started.elapsed();
    let checks = [
        report("A4", pick[lstm_mdn] >= 80.0, format!("LSTM-MDN pick-place {:.0}% (>= 80%)", pick[lstm_mdn])),
        report("A4", push[lstm_mdn] >= 50.0, format!("LSTM-MDN push {:.0}% (>= 50%)", push[lstm_mdn])),
        report(
            "A4",
            push[lstm_mdn] - push[ff_mse] >= 30.0,
            format!("LSTM-MDN leads Feedforward-MSE on push by {:.0} points (>= 30)", push[lstm_mdn] - push[ff_mse]),
        ),
        report("A4", push[ff_mse] <= 20.0, format!("Feedforward-MSE push {:.0}% (<= 20%)", push[ff_mse])),
        report("A4", within(elapsed, 3600), format!("runtime {:.0}s (<= 3600s)", elapsed.as_secs_f64())),
    ];
    assert!(checks.iter().all(|&c| c));
}

#[test]
fn a5_imperfect_demonstrations_teach_recovery() {
    let _serial = serial();
    let models = controllers();
    let started = Instant::now();
    let task = &models.pick_task;
    let lstm_mdn = Architecture::ALL.iter().position(|&a| a == Architecture::LstmMdn).unwrap();
    let (_, perfect_raw) = raw_corpus(TaskKind::PickPlace, RAW_DEMOS, 1, &ImperfectionConfig::perfect());
    let perfect = train_on(task, &perfect_raw, Architecture::LstmMdn, None);

    let recover = |ckpt: &Checkpoint| {
        let mut c = NetworkController::new(ckpt).unwrap();
        let cfg = ExecutionConfig::default();
        let mut ok = 0;
        for seed in EVAL_SEED..EVAL_SEED + TRIALS {
            let knock = random_knock(seed, Trigger::AfterGrasp { waypoints: 1 }, 0.05);
            ok += perturb_and_rollout(&mut c, Arc::clone(task), seed, &cfg, knock).unwrap().success as u64;
        }
        100.0 * ok as f64 / TRIALS as f64
    };
    let with_corrections = recover(&models.pick[lstm_mdn]);
    let without = recover(&perfect);
    let elapsed = started.elapsed();
    let checks = [
        report(
            "A5",
            with_corrections >= without && with_corrections - without >= 15.0,
            format!("recovery {with_corrections:.0}% trained with corrections vs {without:.0}% without (lead >= 15 points)"),
        ),
        report("A5", within(elapsed, 1800), format!("runtime {:.0}s (<= 1800s)", elapsed.as_secs_f64())),
    ];
    assert!(checks.iter().all(|&c| c));
}
