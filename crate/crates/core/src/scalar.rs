// SPDX-License-Identifier: Apache-2.0

//! Numeric kernels shared by the reference backend and the memory model.

use std::fmt::Debug;

use num_traits::{Float, Num};

/// Element type of model weights and activations.
pub trait Scalar: Float + Debug + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self {
        <Self as num_traits::NumCast>::from(v).expect("finite cast")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("float to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// `W·x + b` for a row-major `rows × cols` matrix.
pub fn affine<T: Scalar>(weights: &[T], rows: usize, cols: usize, bias: &[T], x: &[T], out: &mut Vec<T>) {
    debug_assert_eq!(weights.len(), rows * cols);
    debug_assert_eq!(bias.len(), rows);
    debug_assert_eq!(x.len(), cols);
    out.clear();
    out.extend(weights.chunks_exact(cols.max(1)).take(rows).zip(bias).map(|(row, &b)| {
        row.iter().zip(x).fold(b, |acc, (&w, &xi)| w.mul_add(xi, acc))
    }));
}

/// Index of the first maximum; NaNs never win. `None` for an empty slice.
pub fn argmax<T: Scalar>(v: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &x) in v.iter().enumerate() {
        if x.is_nan() {
            continue;
        }
        match best {
            Some((_, b)) if x <= b => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i).or(if v.is_empty() { None } else { Some(0) })
}

/// `k` as an element of `T`, for counts that multiply quantities.
pub fn count<T: Num + Copy>(k: u32) -> T {
    (0..k).fold(T::zero(), |acc, _| acc + T::one())
}
