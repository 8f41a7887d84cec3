//! Small dense-vector helpers shared by the index, retrieval and curation code.
//!
//! All similarity scores in this crate are inner products of unit vectors,
//! accumulated left to right in `f32`. Keeping a single summation order means
//! the flat index, the IVF index and the curation scorers agree bit for bit.

/// Tolerance on `| ‖v‖₂ − 1 |` accepted for stored and query embeddings.
pub const UNIT_NORM_TOLERANCE: f32 = 1e-3;

/// Below this deviation a vector is treated as already normalized and used verbatim.
const RENORMALIZE_EPSILON: f32 = 1e-6;

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

#[inline]
pub fn l2_norm(v: &[f32]) -> f32 {
    dot(v, v).sqrt()
}

pub fn is_unit(v: &[f32]) -> bool {
    (l2_norm(v) - 1.0).abs() <= UNIT_NORM_TOLERANCE
}

/// Outcome of [`unit_or_renormalize`] for a vector that is too far from unit length.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NotUnit {
    pub norm: f32,
}

/// Returns `v` rescaled to unit length if it is within [`UNIT_NORM_TOLERANCE`],
/// untouched if it is already unit to float precision, or an error otherwise.
pub fn unit_or_renormalize(v: &[f32]) -> Result<Vec<f32>, NotUnit> {
    let norm = l2_norm(v);
    let dev = (norm - 1.0).abs();
    if !norm.is_finite() || dev > UNIT_NORM_TOLERANCE {
        return Err(NotUnit { norm });
    }
    if dev <= RENORMALIZE_EPSILON {
        Ok(v.to_vec())
    } else {
        Ok(v.iter().map(|x| x / norm).collect())
    }
}

/// Scales `v` to unit length; zero vectors are returned unchanged.
pub fn normalize(v: &mut [f32]) {
    let norm = l2_norm(v);
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}
