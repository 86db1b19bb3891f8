//! Dense matrix helpers and seeded randomness shared by every module.

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Result, SculptError};

/// Row-major token matrix: one row per patch/voxel/token, one column per channel.
pub type Matrix = Array2<f64>;

/// Deterministic generator for a `(seed, stream)` pair.
///
/// Streams keep independent draws (weights, stage noise, random masks) from
/// shifting when an unrelated consumer draws more numbers.
pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Mixes several integers into one seed (splitmix64 finalizer per word).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut acc: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        let mut z = acc ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        acc = z ^ (z >> 31);
    }
    acc
}

pub fn standard_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

/// Gaussian init scaled by `1/sqrt(fan_in)`.
pub fn scaled_normal(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let scale = 1.0 / (rows.max(1) as f64).sqrt();
    standard_normal(rng, rows, cols) * scale
}

pub fn normal_vector(rng: &mut impl Rng, len: usize, scale: f64) -> Array1<f64> {
    Array1::from_shape_simple_fn(len, || scale * rng.sample::<f64, _>(StandardNormal))
}

pub fn ensure_finite(m: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    match m.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => {
            let cols = m.ncols().max(1);
            Err(SculptError::numeric(format!(
                "{what} has a non-finite value at [{}, {}]",
                i / cols,
                i % cols
            )))
        }
    }
}

pub fn ensure_shape(m: &Matrix, rows: usize, cols: usize, what: &str) -> Result<()> {
    if m.dim() != (rows, cols) {
        return Err(SculptError::contract(format!(
            "{what} has shape {:?}, expected ({rows}, {cols})",
            m.dim()
        )));
    }
    Ok(())
}

/// Parameter-free layer norm over channels.
pub fn layer_norm(x: &Matrix) -> Matrix {
    const EPS: f64 = 1e-6;
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

/// tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Adds `bias` to every row.
pub fn add_row(m: &mut Matrix, bias: &Array1<f64>) {
    for mut row in m.rows_mut() {
        row += bias;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn streams_are_reproducible_and_distinct() {
        let a = standard_normal(&mut seeded_rng(7, 1), 3, 3);
        let b = standard_normal(&mut seeded_rng(7, 1), 3, 3);
        let c = standard_normal(&mut seeded_rng(7, 2), 3, 3);
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn layer_norm_rows_are_standardized() {
        let x = standard_normal(&mut seeded_rng(1, 0), 4, 16) * 3.0 + 2.0;
        let y = layer_norm(&x);
        for row in y.rows() {
            let mean = row.sum() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn ensure_finite_reports_position() {
        let mut m = Matrix::zeros((2, 3));
        m[[1, 2]] = f64::NAN;
        let err = ensure_finite(m.view(), "probe").unwrap_err().to_string();
        assert!(err.contains("[1, 2]"), "{err}");
    }

    #[test]
    fn mix_seed_depends_on_order() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_eq!(mix_seed(&[1, 2]), mix_seed(&[1, 2]));
    }
}
