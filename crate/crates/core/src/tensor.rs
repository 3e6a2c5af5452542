use rand::distributions::{Distribution, Uniform};
use rand::Rng;

use crate::error::{Error, Result};

/// Half-width of the uniform interval every learned parameter is drawn from.
pub const INIT_RANGE: f64 = 0.08;

/// Dense row-major tensor of finite 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected = element_count(&shape)?;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor element {i}")));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let n = element_count(&shape)?;
        Ok(Self {
            shape,
            data: vec![0.0; n],
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the raw values. Callers are responsible for keeping
    /// them finite; the optimizer checks after every update.
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

fn element_count(shape: &[usize]) -> Result<usize> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Shape(format!("zero-sized shape {shape:?}")));
    }
    Ok(shape.iter().product())
}

/// Draws every element i.i.d. from U[-0.08, 0.08].
pub fn init_uniform<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor> {
    let n = element_count(shape)?;
    let dist = Uniform::new_inclusive(-INIT_RANGE, INIT_RANGE);
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Ok(Tensor {
        shape: shape.to_vec(),
        data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rejects_non_finite_and_bad_shapes() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::zeros(vec![]).is_err());
        assert!(Tensor::zeros(vec![3, 0]).is_err());
    }

    #[test]
    fn init_uniform_bounds_mean_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = init_uniform(&[1000, 1000], &mut rng).unwrap();
        let min = t.data().iter().cloned().fold(f64::INFINITY, f64::min);
        let max = t.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert!(min >= -0.08 && max <= 0.08);
        let mean = t.data().iter().sum::<f64>() / t.len() as f64;
        // 4 sigma / sqrt(n) with sigma = 0.08 / sqrt(3)
        let bound = 4.0 * (0.08 / 3f64.sqrt()) / (t.len() as f64).sqrt();
        assert!(bound < 0.001);
        assert!(mean.abs() < bound, "mean {mean}");

        let a = init_uniform(&[4, 5], &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let b = init_uniform(&[4, 5], &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, b);
        assert!(init_uniform(&[0], &mut rng).is_err());
    }
}
