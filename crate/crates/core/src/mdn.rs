//! Mixture density head: isotropic Gaussian mixtures parameterized by the raw
//! output layer, their negative log likelihood with analytic gradients, and
//! sampling.
//!
//! Raw activations are laid out as `[m*c centers | m log-widths | m mixing logits]`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower bound applied to every kernel width after the exponential.
pub const SIGMA_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Normalization of the isotropic kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DensityForm {
    /// `(2 pi)^(-c/2) sigma^(-c)`: a proper density in `c` dimensions.
    #[default]
    Normalized,
    /// `(2 pi)^(-c/2) sigma^(-1)`, the single-power normalization.
    SinglePower,
}

impl DensityForm {
    fn sigma_power(self, c: usize) -> f64 {
        match self {
            DensityForm::Normalized => c as f64,
            DensityForm::SinglePower => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureParams {
    pub alphas: Vec<f64>,
    /// `m x c`, row per kernel.
    pub mus: Vec<f64>,
    pub sigmas: Vec<f64>,
    pub m: usize,
    pub c: usize,
    pub form: DensityForm,
    log_alphas: Vec<f64>,
    floored: Vec<bool>,
}

impl MixtureParams {
    /// Validates a hand-built mixture (alphas on the simplex, positive widths).
    pub fn new(alphas: Vec<f64>, mus: Vec<f64>, sigmas: Vec<f64>, c: usize, form: DensityForm) -> Result<Self> {
        let m = alphas.len();
        if m == 0 || c == 0 || mus.len() != m * c || sigmas.len() != m {
            return Err(Error::Shape(format!(
                "mixture with {m} alphas, {} centers, {} widths, c = {c}",
                mus.len(),
                sigmas.len()
            )));
        }
        let total: f64 = alphas.iter().sum();
        if alphas.iter().any(|a| !(*a >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!("mixing coefficients must lie on the simplex (sum {total})")));
        }
        if sigmas.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::Invalid("kernel widths must be positive".into()));
        }
        if mus.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel centers".into()));
        }
        let log_alphas = alphas.iter().map(|a| a.ln()).collect();
        Ok(Self {
            alphas,
            mus,
            sigmas,
            m,
            c,
            form,
            log_alphas,
            floored: vec![false; m],
        })
    }

    pub fn mu(&self, i: usize) -> &[f64] {
        &self.mus[i * self.c..(i + 1) * self.c]
    }

    pub fn raw_len(&self) -> usize {
        (self.c + 2) * self.m
    }

    pub fn strongest_kernel(&self) -> usize {
        let mut best = 0;
        for i in 1..self.m {
            if self.alphas[i] > self.alphas[best] {
                best = i;
            }
        }
        best
    }
}

/// Softmax over the mixing slots, exponential over the width slots, centers
/// copied verbatim.
pub fn split_activations(raw: &[f64], m: usize, c: usize) -> Result<MixtureParams> {
    split_activations_with(raw, m, c, DensityForm::Normalized)
}

pub fn split_activations_with(raw: &[f64], m: usize, c: usize, form: DensityForm) -> Result<MixtureParams> {
    if m == 0 || c == 0 || raw.len() != (c + 2) * m {
        return Err(Error::Shape(format!(
            "raw mixture activations have {} values, expected (c + 2) m = {}",
            raw.len(),
            (c + 2) * m
        )));
    }
    if raw.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("raw mixture activations".into()));
    }
    let mus = raw[..m * c].to_vec();
    let widths = &raw[m * c..m * c + m];
    let logits = &raw[m * c + m..];
    let mut sigmas = Vec::with_capacity(m);
    let mut floored = Vec::with_capacity(m);
    for &w in widths {
        let s = w.exp();
        if s < SIGMA_FLOOR {
            sigmas.push(SIGMA_FLOOR);
            floored.push(true);
        } else {
            sigmas.push(s);
            floored.push(false);
        }
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
    let log_alphas: Vec<f64> = logits.iter().map(|a| a - lse).collect();
    let alphas = log_alphas.iter().map(|l| l.exp()).collect();
    Ok(MixtureParams {
        alphas,
        mus,
        sigmas,
        m,
        c,
        form,
        log_alphas,
        floored,
    })
}

fn log_kernel(sq_dist: f64, sigma: f64, c: usize, form: DensityForm) -> f64 {
    -0.5 * c as f64 * LN_2PI - form.sigma_power(c) * sigma.ln() - sq_dist / (2.0 * sigma * sigma)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Isotropic Gaussian density `(2 pi)^(-c/2) sigma^(-c) exp(-|y - mu|^2 / (2 sigma^2))`.
pub fn kernel_density(y: &[f64], mu: &[f64], sigma: f64, c: usize) -> Result<f64> {
    kernel_density_with(y, mu, sigma, c, DensityForm::Normalized)
}

pub fn kernel_density_with(y: &[f64], mu: &[f64], sigma: f64, c: usize, form: DensityForm) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::Invalid(format!("kernel width {sigma} must be positive")));
    }
    if y.len() != c || mu.len() != c {
        return Err(Error::Shape(format!("kernel of dimension {c} given {} / {} values", y.len(), mu.len())));
    }
    Ok(log_kernel(sq_dist(y, mu), sigma, c, form).exp())
}

/// `E = -ln sum_i alpha_i g_i(y)` evaluated with log-sum-exp, and dE/d(raw
/// activations) through the softmax and exponential reparameterizations.
pub fn nll_loss(params: &MixtureParams, y: &[f64]) -> Result<(f64, Vec<f64>)> {
    let (m, c) = (params.m, params.c);
    if y.len() != c {
        return Err(Error::Shape(format!("target has {} values, mixture dimension is {c}", y.len())));
    }
    let mut logs = Vec::with_capacity(m);
    let mut dists = Vec::with_capacity(m);
    for i in 0..m {
        let d2 = sq_dist(y, params.mu(i));
        dists.push(d2);
        logs.push(params.log_alphas[i] + log_kernel(d2, params.sigmas[i], c, params.form));
    }
    let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical("mixture density underflowed in log space".into()));
    }
    let lse = max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    let power = params.form.sigma_power(c);
    let mut grad = vec![0.0; params.raw_len()];
    for i in 0..m {
        let r = (logs[i] - lse).exp();
        let s2 = params.sigmas[i] * params.sigmas[i];
        let mu = params.mu(i);
        for k in 0..c {
            grad[i * c + k] = -r * (y[k] - mu[k]) / s2;
        }
        if !params.floored[i] {
            grad[m * c + i] = r * (power - dists[i] / s2);
        }
        grad[m * c + m + i] = params.alphas[i] - r;
    }
    let loss = -lse;
    if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical("non-finite mixture likelihood or gradient".into()));
    }
    Ok((loss, grad))
}

/// Draws a kernel from the mixing coefficients, then `mu + sigma z`.
pub fn sample<R: Rng + ?Sized>(params: &MixtureParams, rng: &mut R) -> Vec<f64> {
    let i = pick_kernel(&params.alphas, rng.gen::<f64>());
    let sigma = params.sigmas[i];
    params
        .mu(i)
        .iter()
        .map(|mu| {
            let z: f64 = rng.sample(StandardNormal);
            mu + sigma * z
        })
        .collect()
}

fn pick_kernel(alphas: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, a) in alphas.iter().enumerate() {
        acc += a;
        if u < acc {
            return i;
        }
    }
    // u landed in the rounding gap above the cumulative sum
    alphas.iter().rposition(|a| *a > 0.0).unwrap_or(alphas.len() - 1)
}

/// Center of the kernel with the largest mixing coefficient.
pub fn mode(params: &MixtureParams) -> Vec<f64> {
    params.mu(params.strongest_kernel()).to_vec()
}

/// `sum_i alpha_i mu_i`
pub fn mixture_mean(params: &MixtureParams) -> Vec<f64> {
    let mut mean = vec![0.0; params.c];
    for i in 0..params.m {
        for (acc, mu) in mean.iter_mut().zip(params.mu(i)) {
            *acc += params.alphas[i] * mu;
        }
    }
    mean
}
