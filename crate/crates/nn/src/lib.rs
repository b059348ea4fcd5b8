//! Dense-tensor compute with reverse-mode differentiation.
//!
//! This crate is the numeric substrate for the EEG decoding models: a
//! contiguous [`Tensor`] type, a [`Tape`] that records operations and
//! replays them backwards for exact gradients, the layer set a shallow
//! convolutional decoder needs (valid convolution, batch normalization,
//! square / clamped-log nonlinearities, average pooling, dropout, dense),
//! softmax cross-entropy, and Adam with L2-coupled weight decay.
//!
//! Training runs in `f32`; gradient verification runs the same code paths
//! in `f64` (see [`Scalar`]). Everything is sequential and deterministic:
//! identical seeds produce bit-identical forward, backward, and optimizer
//! results.

mod adam;
mod fir;
mod checkpoint;
mod error;
pub mod gradcheck;
pub mod ops;
pub mod rng;
mod scalar;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{read_checkpoint, write_checkpoint, NamedTensor};
pub use error::NnError;
pub use scalar::Scalar;
pub use tape::{Gradients, Mode, NodeId, Tape};
pub use tensor::Tensor;

/// A named, trainable tensor with its gradient buffer.
#[derive(Clone, Debug)]
pub struct Parameter<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Parameter {
            name: name.into(),
            value,
            grad,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().fill(T::zero());
    }
}
