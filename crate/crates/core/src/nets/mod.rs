//! Trainable components and their forward/backward contracts.
//!
//! Layers implement explicit backward passes; each loss in [`crate::losses`]
//! composes them and decides where gradients stop.

mod bundle;
pub mod checkpoint;
mod layers;
mod optim;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

pub use bundle::{
    argmax, contrast_score, cosine, ema_update, COS_EPS, quantize, softmax_rows, ArchConfig, Component,
    Codebook, LatentAction, LogTemperature, ModelBundle, Quantized,
};
pub use layers::{Conv2d, Encoder, EncoderCache, Linear, Mlp, MlpCache};
pub use optim::{Adam, GroupOptimizer};

/// Floating-point element type: `f32` for training, `f64` for gradient checks.
pub trait Real:
    LinalgScalar
    + ScalarOperand
    + Float
    + FromPrimitive
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + 'static
{
    const NAME: &'static str;
    const BYTES: usize;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";
    const BYTES: usize = 4;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        f32::from_le_bytes([b[0], b[1], b[2], b[3]])
    }
}

impl Real for f64 {
    const NAME: &'static str = "f64";
    const BYTES: usize = 8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(b: &[u8]) -> Self {
        let mut a = [0u8; 8];
        a.copy_from_slice(&b[..8]);
        f64::from_le_bytes(a)
    }
}

/// Flat access to a component's parameter tensors, in a fixed order.
pub trait Params<T> {
    fn tensors(&self) -> Vec<&[T]>;
    fn tensors_mut(&mut self) -> Vec<&mut [T]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

pub fn sq_norm<T: Real>(p: &dyn Params<T>) -> T {
    p.tensors()
        .iter()
        .flat_map(|t| t.iter())
        .fold(T::zero(), |acc, &v| acc + v * v)
}

pub fn all_finite<T: Real>(p: &dyn Params<T>) -> bool {
    p.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
}

pub fn fill_zero<T: Real>(p: &mut dyn Params<T>) {
    for t in p.tensors_mut() {
        t.fill(T::zero());
    }
}

pub fn copy_params<T: Real>(dst: &mut dyn Params<T>, src: &dyn Params<T>) {
    for (d, s) in dst.tensors_mut().into_iter().zip(src.tensors()) {
        d.copy_from_slice(s);
    }
}

pub fn bitwise_eq<T: Real>(a: &dyn Params<T>, b: &dyn Params<T>) -> bool {
    let (ta, tb) = (a.tensors(), b.tensors());
    ta.len() == tb.len()
        && ta.iter().zip(&tb).all(|(x, y)| {
            x.len() == y.len()
                && x.iter().zip(y.iter()).all(|(p, q)| {
                    let (mut bp, mut bq) = (Vec::new(), Vec::new());
                    p.write_le(&mut bp);
                    q.write_le(&mut bq);
                    bp == bq
                })
        })
}

/// `acc += scale * g`, tensor by tensor.
pub fn axpy<T: Real>(acc: &mut dyn Params<T>, scale: T, g: &dyn Params<T>) {
    for (a, b) in acc.tensors_mut().into_iter().zip(g.tensors()) {
        a.iter_mut().zip(b.iter()).for_each(|(x, &y)| *x = *x + scale * y);
    }
}
