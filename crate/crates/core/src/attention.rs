//! Multi-head scaled dot-product attention kernels.
//!
//! Every kernel returns the head-concatenated attention output *before* the
//! site's output projection; hosts apply their own projection afterwards.

use ndarray::{s, Axis};

use crate::error::{Result, SculptError};
use crate::tensor::{ensure_finite, Matrix};

/// Query/key/value projection matrices of one self-attention site.
#[derive(Debug, Clone, PartialEq)]
pub struct QkvWeights {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub heads: usize,
}

impl QkvWeights {
    pub fn channels(&self) -> usize {
        self.query.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.query.nrows();
        for (name, w) in [("W_q", &self.query), ("W_k", &self.key), ("W_v", &self.value)] {
            if w.dim() != (c, c) {
                return Err(SculptError::contract(format!(
                    "{name} has shape {:?}, expected ({c}, {c})",
                    w.dim()
                )));
            }
        }
        if self.heads == 0 || !c.is_multiple_of(self.heads) {
            return Err(SculptError::contract(format!(
                "{c} channels are not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Projected queries, keys and values for one branch (or branch pair).
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensors {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub heads: usize,
}

impl AttentionTensors {
    pub fn channels(&self) -> usize {
        self.query.ncols()
    }

    pub fn head_dim(&self) -> usize {
        self.channels() / self.heads
    }
}

pub fn qkv_project(features: &Matrix, weights: &QkvWeights) -> Result<AttentionTensors> {
    weights.validate()?;
    if features.ncols() != weights.channels() {
        return Err(SculptError::contract(format!(
            "features have {} channels but the site projects {}",
            features.ncols(),
            weights.channels()
        )));
    }
    ensure_finite(features.view(), "attention input")?;
    Ok(AttentionTensors {
        query: features.dot(&weights.query),
        key: features.dot(&weights.key),
        value: features.dot(&weights.value),
        heads: weights.heads,
    })
}

/// `softmax(Q Kᵀ / sqrt(d_k)) V` per head with heads concatenated.
pub fn self_attention(t: &AttentionTensors) -> Result<Matrix> {
    if t.query.nrows() != t.key.nrows() {
        return Err(SculptError::contract(format!(
            "self-attention needs as many queries as keys ({} vs {})",
            t.query.nrows(),
            t.key.nrows()
        )));
    }
    multi_head_attention(&t.query, &t.key, &t.value, t.heads)
}

/// Queries from the content branch attend to keys/values of the style branch.
/// Token counts may differ between the two.
pub fn cross_3d_attention(
    content_query: &Matrix,
    style_key: &Matrix,
    style_value: &Matrix,
    heads: usize,
) -> Result<Matrix> {
    if content_query.ncols() != style_key.ncols() {
        return Err(SculptError::contract(format!(
            "content has {} channels but style has {}",
            content_query.ncols(),
            style_key.ncols()
        )));
    }
    multi_head_attention(content_query, style_key, style_value, heads)
}

/// Shared kernel. `key` and `value` must have the same row count.
pub fn multi_head_attention(query: &Matrix, key: &Matrix, value: &Matrix, heads: usize) -> Result<Matrix> {
    let channels = query.ncols();
    if key.ncols() != channels || value.ncols() != channels {
        return Err(SculptError::contract(format!(
            "query/key/value channel mismatch: {}, {}, {}",
            channels,
            key.ncols(),
            value.ncols()
        )));
    }
    if key.nrows() != value.nrows() {
        return Err(SculptError::contract(format!(
            "keys ({}) and values ({}) must share a token count",
            key.nrows(),
            value.nrows()
        )));
    }
    if key.nrows() == 0 {
        return Err(SculptError::contract("attention over zero keys"));
    }
    if heads == 0 || !channels.is_multiple_of(heads) {
        return Err(SculptError::contract(format!(
            "{channels} channels are not divisible by {heads} heads"
        )));
    }

    let head_dim = channels / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut out = Matrix::zeros((query.nrows(), channels));

    for h in 0..heads {
        let cols = s![.., h * head_dim..(h + 1) * head_dim];
        let mut logits = query.slice(cols).dot(&key.slice(cols).t());
        logits *= scale;
        softmax_rows(&mut logits)?;
        out.slice_mut(cols).assign(&logits.dot(&value.slice(cols)));
    }
    Ok(out)
}

/// Row-wise softmax, shifted by the row max.
pub fn softmax_rows(logits: &mut Matrix) -> Result<()> {
    for (r, mut row) in logits.axis_iter_mut(Axis(0)).enumerate() {
        let mut max = f64::NEG_INFINITY;
        for &v in row.iter() {
            if !v.is_finite() {
                return Err(SculptError::numeric(format!("non-finite attention logit in row {r}")));
            }
            max = max.max(v);
        }
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        row.mapv_inplace(|v| v * inv);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_rng, standard_normal};
    use ndarray::Array2;

    fn identity_weights(c: usize, heads: usize) -> QkvWeights {
        let eye = Array2::eye(c);
        QkvWeights {
            query: eye.clone(),
            key: eye.clone(),
            value: eye,
            heads,
        }
    }

    #[test]
    fn identity_projection_copies_features() {
        let f = standard_normal(&mut seeded_rng(3, 0), 6, 8);
        let t = qkv_project(&f, &identity_weights(8, 2)).unwrap();
        assert_eq!(t.query, f);
        assert_eq!(t.key, f);
        assert_eq!(t.value, f);
    }

    #[test]
    fn zero_projection_gives_zeros() {
        let f = standard_normal(&mut seeded_rng(3, 0), 6, 8);
        let w = QkvWeights {
            query: Matrix::zeros((8, 8)),
            key: Matrix::zeros((8, 8)),
            value: Matrix::zeros((8, 8)),
            heads: 1,
        };
        let t = qkv_project(&f, &w).unwrap();
        assert!(t
            .query
            .iter()
            .chain(t.key.iter())
            .chain(t.value.iter())
            .all(|v| *v == 0.0));
    }

    #[test]
    fn projection_rejects_bad_shapes() {
        let f = Matrix::zeros((4, 6));
        assert!(matches!(
            qkv_project(&f, &identity_weights(8, 2)),
            Err(SculptError::Contract(_))
        ));
        let mut w = identity_weights(8, 3);
        w.heads = 3;
        assert!(qkv_project(&Matrix::zeros((4, 8)), &w).is_err());
    }

    #[test]
    fn single_token_returns_value() {
        let mut rng = seeded_rng(5, 0);
        let t = AttentionTensors {
            query: standard_normal(&mut rng, 1, 8),
            key: standard_normal(&mut rng, 1, 8),
            value: standard_normal(&mut rng, 1, 8),
            heads: 2,
        };
        assert_eq!(self_attention(&t).unwrap(), t.value);
    }

    #[test]
    fn zero_queries_average_values() {
        let mut rng = seeded_rng(6, 0);
        let t = AttentionTensors {
            query: Matrix::zeros((5, 8)),
            key: standard_normal(&mut rng, 5, 8),
            value: standard_normal(&mut rng, 5, 8),
            heads: 4,
        };
        let out = self_attention(&t).unwrap();
        let mean = t.value.mean_axis(Axis(0)).unwrap();
        for row in out.rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_attention_with_one_style_token_broadcasts_it() {
        let mut rng = seeded_rng(8, 0);
        let q = standard_normal(&mut rng, 3, 8);
        let k = standard_normal(&mut rng, 1, 8);
        let v = standard_normal(&mut rng, 1, 8);
        let out = cross_3d_attention(&q, &k, &v, 2).unwrap();
        for row in out.rows() {
            assert_eq!(row, v.row(0));
        }
    }

    #[test]
    fn cross_attention_on_own_tokens_is_self_attention() {
        let mut rng = seeded_rng(9, 0);
        let f = standard_normal(&mut rng, 7, 8);
        let w = QkvWeights {
            query: standard_normal(&mut rng, 8, 8),
            key: standard_normal(&mut rng, 8, 8),
            value: standard_normal(&mut rng, 8, 8),
            heads: 2,
        };
        let t = qkv_project(&f, &w).unwrap();
        let cross = cross_3d_attention(&t.query, &t.key, &t.value, 2).unwrap();
        assert_eq!(cross, self_attention(&t).unwrap());
    }

    #[test]
    fn channel_mismatch_is_a_contract_error() {
        let q = Matrix::zeros((2, 8));
        let k = Matrix::zeros((3, 4));
        assert!(matches!(
            cross_3d_attention(&q, &k, &k, 1),
            Err(SculptError::Contract(_))
        ));
    }

    #[test]
    fn non_finite_logits_are_numeric_errors() {
        let mut q = Matrix::zeros((2, 4));
        q[[0, 0]] = f64::INFINITY;
        let k = Matrix::ones((2, 4));
        assert!(matches!(
            multi_head_attention(&q, &k, &k, 1),
            Err(SculptError::Numeric(_))
        ));
    }
}
