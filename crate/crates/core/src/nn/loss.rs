use crate::error::{Error, Result};

/// Mean of squared componentwise differences and its gradient `2 (p - t) / c`.
pub fn mse_loss(prediction: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    if prediction.len() != target.len() || prediction.is_empty() {
        return Err(Error::Shape(format!(
            "prediction has {} values, target {}",
            prediction.len(),
            target.len()
        )));
    }
    let c = prediction.len() as f64;
    let mut loss = 0.0;
    let grad = prediction
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = p - t;
            loss += d * d;
            2.0 * d / c
        })
        .collect();
    Ok((loss / c, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let (l, g) = mse_loss(&[0.2, -1.0], &[0.2, -1.0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        let (l, _) = mse_loss(&[1.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(l, 0.5);
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let p = vec![0.3, -1.2, 2.5, 0.01];
        let t = vec![-0.7, 0.4, 2.0, 1.0];
        let (_, g) = mse_loss(&p, &t).unwrap();
        let eps = 1e-5;
        for i in 0..p.len() {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi[i] += eps;
            lo[i] -= eps;
            let fd = (mse_loss(&hi, &t).unwrap().0 - mse_loss(&lo, &t).unwrap().0) / (2.0 * eps);
            let rel = (fd - g[i]).abs() / g[i].abs().max(1e-12);
            assert!(rel < 1e-8, "component {i}: fd {fd} analytic {}", g[i]);
        }
    }
}
