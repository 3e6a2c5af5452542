use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => tanh(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output value.
    #[inline]
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }
}

/// Dense layer `y = act(W x + b)` with `W` stored as `(out, in)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedforwardLayerParams {
    pub weights: Tensor,
    pub biases: Tensor,
    pub activation: Activation,
}

impl FeedforwardLayerParams {
    pub fn new(weights: Tensor, biases: Tensor, activation: Activation) -> Result<Self> {
        if weights.shape().len() != 2 || biases.shape() != [weights.shape()[0]] {
            return Err(Error::Shape(format!(
                "feedforward weights {:?} incompatible with biases {:?}",
                weights.shape(),
                biases.shape()
            )));
        }
        Ok(Self {
            weights,
            biases,
            activation,
        })
    }

    pub fn outputs(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn inputs(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let n_in = self.inputs();
        let w = self.weights.data();
        self.biases
            .data()
            .iter()
            .enumerate()
            .map(|(j, b)| {
                let row = &w[j * n_in..(j + 1) * n_in];
                let z = b + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
                self.activation.apply(z)
            })
            .collect()
    }
}

/// One LSTM layer. Gate rows are stacked as `[input | forget | output | candidate]`,
/// so `input_weights` is `(4H, in)`, `recurrent_weights` is `(4H, H)` and
/// `biases` has length `4H`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayerParams {
    pub input_weights: Tensor,
    pub recurrent_weights: Tensor,
    pub biases: Tensor,
    pub width: usize,
}

impl LstmLayerParams {
    pub fn new(input_weights: Tensor, recurrent_weights: Tensor, biases: Tensor) -> Result<Self> {
        let rw = recurrent_weights.shape();
        if rw.len() != 2 || rw[0] != 4 * rw[1] {
            return Err(Error::Shape(format!("recurrent weights {rw:?} are not (4H, H)")));
        }
        let width = rw[1];
        let iw = input_weights.shape();
        if iw.len() != 2 || iw[0] != 4 * width {
            return Err(Error::Shape(format!("input weights {iw:?} are not (4H, in) for H = {width}")));
        }
        if biases.shape() != [4 * width] {
            return Err(Error::Shape(format!("biases {:?} are not (4H)", biases.shape())));
        }
        Ok(Self {
            input_weights,
            recurrent_weights,
            biases,
            width,
        })
    }

    pub fn inputs(&self) -> usize {
        self.input_weights.shape()[1]
    }
}

/// Per-layer hidden and cell vectors of a stacked LSTM.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub hidden: Vec<Vec<f64>>,
    pub cell: Vec<Vec<f64>>,
}

impl LstmState {
    pub fn zeros(layers: &[LstmLayerParams]) -> Self {
        Self {
            hidden: layers.iter().map(|l| vec![0.0; l.width]).collect(),
            cell: layers.iter().map(|l| vec![0.0; l.width]).collect(),
        }
    }

    /// State with no layers, used by stateless bodies.
    pub fn empty() -> Self {
        Self {
            hidden: Vec::new(),
            cell: Vec::new(),
        }
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `exp`-based tanh; about twice as fast as libm's and within 3e-16 absolute.
#[inline]
pub(crate) fn tanh(z: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * z).exp() + 1.0)
}

/// Advances a stack of LSTM layers by one step.
///
/// Returns the concatenation of every layer's new hidden vector, which is
/// what the output head reads, together with the updated state.
pub fn lstm_step(x: &[f64], state: &LstmState, layers: &[LstmLayerParams]) -> Result<(Vec<f64>, LstmState)> {
    if state.hidden.len() != layers.len() || state.cell.len() != layers.len() {
        return Err(Error::Invalid(format!(
            "state has {} layers, network has {}",
            state.hidden.len(),
            layers.len()
        )));
    }
    let mut next = LstmState {
        hidden: Vec::with_capacity(layers.len()),
        cell: Vec::with_capacity(layers.len()),
    };
    let mut concat = Vec::with_capacity(layers.iter().map(|l| l.width).sum());
    let mut input: Vec<f64> = x.to_vec();
    for (index, layer) in layers.iter().enumerate() {
        let h_dim = layer.width;
        let n_in = layer.inputs();
        if input.len() != n_in {
            return Err(Error::LayerDim {
                layer: index,
                expected: n_in,
                got: input.len(),
            });
        }
        if state.hidden[index].len() != h_dim || state.cell[index].len() != h_dim {
            return Err(Error::LayerDim {
                layer: index,
                expected: h_dim,
                got: state.hidden[index].len(),
            });
        }
        let wx = layer.input_weights.data();
        let wh = layer.recurrent_weights.data();
        let bias = layer.biases.data();
        let h_prev = &state.hidden[index];
        let c_prev = &state.cell[index];
        let pre: Vec<f64> = (0..4 * h_dim)
            .map(|r| {
                let xr = &wx[r * n_in..(r + 1) * n_in];
                let hr = &wh[r * h_dim..(r + 1) * h_dim];
                bias[r]
                    + xr.iter().zip(&input).map(|(w, v)| w * v).sum::<f64>()
                    + hr.iter().zip(h_prev).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect();
        let mut h = vec![0.0; h_dim];
        let mut c = vec![0.0; h_dim];
        for j in 0..h_dim {
            let i_g = sigmoid(pre[j]);
            let f_g = sigmoid(pre[h_dim + j]);
            let o_g = sigmoid(pre[2 * h_dim + j]);
            let g = tanh(pre[3 * h_dim + j]);
            c[j] = f_g * c_prev[j] + i_g * g;
            h[j] = o_g * tanh(c[j]);
        }
        concat.extend_from_slice(&h);
        input = h.clone();
        next.hidden.push(h);
        next.cell.push(c);
    }
    Ok((concat, next))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn layer(n_in: usize, h: usize, fill: impl Fn(usize) -> f64) -> LstmLayerParams {
        let wx = Tensor::new(vec![4 * h, n_in], (0..4 * h * n_in).map(&fill).collect()).unwrap();
        let wh = Tensor::new(vec![4 * h, h], (0..4 * h * h).map(&fill).collect()).unwrap();
        let b = Tensor::new(vec![4 * h], (0..4 * h).map(&fill).collect()).unwrap();
        LstmLayerParams::new(wx, wh, b).unwrap()
    }

    #[test]
    fn zero_parameters_keep_state_zero() {
        let layers = vec![layer(3, 4, |_| 0.0), layer(4, 4, |_| 0.0)];
        let mut state = LstmState::zeros(&layers);
        for t in 0..10 {
            let x = [t as f64, -2.0, 5.0];
            let (out, next) = lstm_step(&x, &state, &layers).unwrap();
            assert!(out.iter().all(|&v| v == 0.0));
            assert!(next.cell.iter().flatten().all(|&v| v == 0.0));
            state = next;
        }
    }

    #[test]
    fn saturated_gates_preserve_the_cell() {
        // forget bias +20, input bias -20: c_t = sigma(20) c_{t-1} + sigma(-20) g
        let mut l = layer(1, 1, |_| 0.0);
        l.biases.data_mut()[0] = -20.0;
        l.biases.data_mut()[1] = 20.0;
        let layers = vec![l];
        let mut state = LstmState::zeros(&layers);
        state.cell[0][0] = 0.7;
        for _ in 0..100 {
            let (_, next) = lstm_step(&[0.3], &state, &layers).unwrap();
            state = next;
        }
        // closed form: 0.7 * sigma(20)^100 (the candidate is tanh(0) = 0)
        let expected = 0.7 * sigmoid(20.0).powi(100);
        assert!((state.cell[0][0] - expected).abs() < 1e-12);
        assert!((state.cell[0][0] - 0.7).abs() < 1e-6);
    }

    #[test]
    fn three_by_fifty_stack_concatenates_to_150() {
        let layers = vec![layer(15, 50, |i| (i as f64 * 0.01).sin() * 0.08), layer(50, 50, |_| 0.01), layer(50, 50, |_| -0.01)];
        let state = LstmState::zeros(&layers);
        let (out, _) = lstm_step(&[0.1; 15], &state, &layers).unwrap();
        assert_eq!(out.len(), 150);
    }

    #[test]
    fn dimension_mismatch_names_the_layer() {
        let layers = vec![layer(3, 2, |_| 0.0)];
        let state = LstmState::zeros(&layers);
        match lstm_step(&[1.0, 2.0], &state, &layers) {
            Err(Error::LayerDim { layer, expected, got }) => {
                assert_eq!((layer, expected, got), (0, 3, 2));
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
