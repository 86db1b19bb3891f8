use ndarray::Array1;

use super::{ConditionEmbedding, EmbeddingOrigin, ImageInput};
use crate::error::{Result, SculptError};
use crate::tensor::{ensure_shape, mix_seed, scaled_normal, seeded_rng, Matrix};

/// Maps a preprocessed image to condition tokens. Token count and width
/// depend only on the embedder, never on pixel content.
pub trait ImageEmbedder: Send + Sync {
    fn token_count(&self) -> usize;
    fn dim(&self) -> usize;
    fn embed(&self, image: &ImageInput) -> Result<ConditionEmbedding>;
}

/// Non-overlapping square patches, flattened `(y, x, channel)` within the
/// patch and ordered row-major over the patch grid, then one linear layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbedder {
    resolution: usize,
    patch: usize,
    projection: Matrix,
    bias: Array1<f64>,
}

impl PatchEmbedder {
    pub fn new(resolution: usize, patch: usize, projection: Matrix, bias: Array1<f64>) -> Result<Self> {
        if patch == 0 || resolution == 0 || !resolution.is_multiple_of(patch) {
            return Err(SculptError::contract(format!(
                "resolution {resolution} is not divisible by patch size {patch}"
            )));
        }
        ensure_shape(&projection, patch * patch * 3, projection.ncols(), "patch projection")?;
        if bias.len() != projection.ncols() {
            return Err(SculptError::contract(
                "patch bias length differs from the projection width",
            ));
        }
        Ok(Self {
            resolution,
            patch,
            projection,
            bias,
        })
    }

    /// Gaussian projection, zero bias.
    pub fn seeded(resolution: usize, patch: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = seeded_rng(mix_seed(&[seed, 0x0070_6174_6368]), 0);
        let projection = scaled_normal(&mut rng, patch * patch * 3, dim);
        Self::new(resolution, patch, projection, Array1::zeros(dim))
    }

    pub fn patch_size(&self) -> usize {
        self.patch
    }

    pub fn projection(&self) -> &Matrix {
        &self.projection
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn patchify(&self, image: &ImageInput) -> Result<Matrix> {
        if (image.height(), image.width()) != (self.resolution, self.resolution) {
            return Err(SculptError::contract(format!(
                "embedder expects {r}×{r} images, got {}×{}",
                image.height(),
                image.width(),
                r = self.resolution
            )));
        }
        let grid = self.resolution / self.patch;
        let p = self.patch;
        let px = image.pixels();
        Ok(Matrix::from_shape_fn((grid * grid, p * p * 3), |(t, f)| {
            let (gy, gx) = (t / grid, t % grid);
            let (py, rest) = (f / (p * 3), f % (p * 3));
            let (pxo, ch) = (rest / 3, rest % 3);
            px[[gy * p + py, gx * p + pxo, ch]]
        }))
    }
}

impl ImageEmbedder for PatchEmbedder {
    fn token_count(&self) -> usize {
        let g = self.resolution / self.patch;
        g * g
    }

    fn dim(&self) -> usize {
        self.projection.ncols()
    }

    fn embed(&self, image: &ImageInput) -> Result<ConditionEmbedding> {
        let mut tokens = self.patchify(image)?.dot(&self.projection);
        tokens += &self.bias;
        ConditionEmbedding::new(tokens, EmbeddingOrigin::Content)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    #[test]
    fn indivisible_resolution_is_rejected() {
        assert!(PatchEmbedder::seeded(30, 8, 4, 0).is_err());
    }

    #[test]
    fn zero_image_with_zero_bias_gives_zero_tokens() {
        let e = PatchEmbedder::seeded(16, 4, 5, 1).unwrap();
        let img = ImageInput::new(Array3::zeros((16, 16, 3)), "black").unwrap();
        let out = e.embed(&img).unwrap();
        assert_eq!(out.tokens.dim(), (16, 5));
        assert!(out.tokens.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_images_embed_identically() {
        let e = PatchEmbedder::seeded(16, 8, 6, 2).unwrap();
        let img = ImageInput::new(
            Array3::from_shape_fn((16, 16, 3), |(y, x, c)| ((y + x + c) % 5) as f64 / 4.0),
            "a",
        )
        .unwrap();
        assert_eq!(e.embed(&img).unwrap(), e.embed(&img.clone()).unwrap());
    }
}
