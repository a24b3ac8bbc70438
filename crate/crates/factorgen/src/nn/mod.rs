//! Minimal dense/convolutional network engine with hand-written backprop.
//!
//! Everything is generic over the element type so the same code runs the
//! f32 training path and the f64 finite-difference checks.

mod conv;
mod layers;
mod linalg;
mod seq;

pub use conv::{conv2d, conv2d_grad_input, conv2d_grad_weights, conv_out_len, same_pad};
pub use layers::{Act, BatchNorm, Conv, Dense, Dropout, TConv};
pub use linalg::{matmul, matmul_into};
pub use seq::{BatchStats, Layer, LayerGrads, NetGrads, SeqCache, SequentialNet};

use crate::error::{Error, Result};
use ndarray::{Array2, Array4};

/// Element type of the network stack: f32 for training, f64 for the
/// numerical gradient checks.
pub trait Scalar: ndarray::NdFloat {
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Scalar for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Whether a forward pass uses batch statistics and dropout (training) or
/// running statistics and identity dropout (inference).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// A value flowing through a network: a matrix `[batch, features]` or an
/// image tensor `[batch, height, width, channels]`.
#[derive(Debug, Clone)]
pub enum Feat<F> {
    M(Array2<F>),
    T(Array4<F>),
}

impl<F: Scalar> Feat<F> {
    pub fn batch_len(&self) -> usize {
        match self {
            Feat::M(a) => a.nrows(),
            Feat::T(a) => a.shape()[0],
        }
    }

    pub fn into_m(self) -> Result<Array2<F>> {
        match self {
            Feat::M(a) => Ok(a),
            Feat::T(_) => Err(Error::invalid("expected a matrix value, found an image")),
        }
    }

    pub fn into_t(self) -> Result<Array4<F>> {
        match self {
            Feat::T(a) => Ok(a),
            Feat::M(_) => Err(Error::invalid("expected an image value, found a matrix")),
        }
    }

    pub fn as_m(&self) -> Result<&Array2<F>> {
        match self {
            Feat::M(a) => Ok(a),
            Feat::T(_) => Err(Error::invalid("expected a matrix value, found an image")),
        }
    }

    pub fn as_t(&self) -> Result<&Array4<F>> {
        match self {
            Feat::T(a) => Ok(a),
            Feat::M(_) => Err(Error::invalid("expected an image value, found a matrix")),
        }
    }

    pub fn iter(&self) -> ndarray::iter::Iter<'_, F, ndarray::IxDyn> {
        match self {
            Feat::M(a) => a.view().into_dyn().into_iter(),
            Feat::T(a) => a.view().into_dyn().into_iter(),
        }
    }

    pub fn all_finite(&self) -> bool {
        match self {
            Feat::M(a) => a.iter().all(|x| x.is_finite()),
            Feat::T(a) => a.iter().all(|x| x.is_finite()),
        }
    }
}
