//! Dense feedforward and LSTM layers with hand-derived gradients, RMSProp
//! and elementwise gradient clipping.

mod layers;
pub(crate) mod linalg;
mod loss;
mod network;
mod optim;

pub use layers::{lstm_step, Activation, FeedforwardLayerParams, LstmLayerParams, LstmState};
pub use loss::mse_loss;
pub use network::{
    Architecture, Body, BodyParams, ForwardCache, Head, Network, NetworkSpec, Parameters, SequenceBatch,
    DEFAULT_KERNELS, DEFAULT_UNROLL,
};
pub use optim::{
    clip_gradients, clip_slice, decay_for_waypoints, rmsprop_slice, OptimizerState, DEFAULT_CLIP, DEFAULT_DECAY,
    DEFAULT_LEARNING_RATE, LARGE_DATASET_DECAY, RMSPROP_EPSILON,
};
