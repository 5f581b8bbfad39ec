//! Numeric substrate: dense/normalization/activation kernels, a reverse-mode
//! tape over a static parameter store, AdamW, and checkpoint persistence.
//!
//! Everything is generic over [`Scalar`] so the same graph runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

mod adamw;
pub(crate) mod layers;
mod checkpoint;
mod ops;
mod store;
mod tape;

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use adamw::{AdamWConfig, OptimizerState};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use ops::{dense_forward, dropout, gelu, gelu_grad, layer_norm, sin_time_embed, LAYER_NORM_EPS};
pub use store::{ParamId, ParamStore};
pub use tape::{Mode, NodeId, Tape};

pub trait Scalar:
    LinalgScalar
    + Float
    + FromPrimitive
    + ToPrimitive
    + ScalarOperand
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const DTYPE: &'static str;
    const BYTES: usize;

    fn erf(self) -> Self;
    fn put_le(self, out: &mut Vec<u8>);
    fn get_le(bytes: &[u8]) -> Self;

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";
    const BYTES: usize = 4;

    fn erf(self) -> Self {
        libm::erff(self)
    }
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";
    const BYTES: usize = 8;

    fn erf(self) -> Self {
        libm::erf(self)
    }
    fn put_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn get_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Little-endian flat encoding of a slice of scalars.
pub fn encode_le<T: Scalar>(values: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for v in values {
        v.put_le(&mut out);
    }
    out
}

pub fn decode_le<T: Scalar>(bytes: &[u8]) -> Option<Vec<T>> {
    if bytes.len() % T::BYTES != 0 {
        return None;
    }
    Some(bytes.chunks_exact(T::BYTES).map(T::get_le).collect())
}
