//! Input preparation: preprocessing with a replayable transform record, edge
//! extraction, and image embedding into condition tokens.

mod edges;
mod embed;
mod io;
mod preprocess;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

pub use edges::{extract_edges, EdgeExtractor, EdgeRegistry, SobelEdges};
pub use embed::{ImageEmbedder, PatchEmbedder};
pub use io::{load_png, save_png};
pub use preprocess::{preprocess, replay, resize, CropKind, ReplayTarget, TransformOp, TransformRecord};

use crate::error::{Result, SculptError};
use crate::tensor::{ensure_finite, Matrix};

const MIN_SIDE: usize = 8;

/// RGB image with values in `[0, 1]`, shape `[H, W, 3]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInput {
    pixels: Array3<f64>,
    pub source_id: String,
}

impl ImageInput {
    pub fn new(pixels: Array3<f64>, source_id: impl Into<String>) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if c != 3 {
            return Err(SculptError::contract(format!("expected 3 color channels, got {c}")));
        }
        if h < MIN_SIDE || w < MIN_SIDE {
            return Err(SculptError::contract(format!(
                "image is {h}×{w}; both sides must be at least {MIN_SIDE}"
            )));
        }
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SculptError::contract(format!("pixel value {v} outside [0, 1]")));
        }
        Ok(Self {
            pixels,
            source_id: source_id.into(),
        })
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    /// Rec. 601 luma.
    pub fn luminance(&self) -> Array2<f64> {
        luminance(&self.pixels)
    }
}

pub(crate) fn luminance(pixels: &Array3<f64>) -> Array2<f64> {
    let (h, w, _) = pixels.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        0.299 * pixels[[y, x, 0]] + 0.587 * pixels[[y, x, 1]] + 0.114 * pixels[[y, x, 2]]
    })
}

/// Single-channel edge strength in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMap {
    pixels: Array2<f64>,
}

impl EdgeMap {
    pub fn new(pixels: Array2<f64>) -> Result<Self> {
        if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(SculptError::contract(format!("edge value {v} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Array2<f64> {
        &self.pixels
    }

    pub fn dim(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    /// Gray RGB rendition, the form an image embedder consumes.
    pub fn to_image(&self, source_id: impl Into<String>) -> Result<ImageInput> {
        let (h, w) = self.pixels.dim();
        ImageInput::new(
            Array3::from_shape_fn((h, w, 3), |(y, x, _)| self.pixels[[y, x]]),
            source_id,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingOrigin {
    Content,
    Style,
    Edge,
    Null,
}

/// Condition tokens `[T, condition_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub tokens: Matrix,
    pub origin: EmbeddingOrigin,
}

impl ConditionEmbedding {
    pub fn new(tokens: Matrix, origin: EmbeddingOrigin) -> Result<Self> {
        if tokens.nrows() == 0 {
            return Err(SculptError::contract("a condition needs at least one token"));
        }
        ensure_finite(tokens.view(), "condition tokens")?;
        Ok(Self { tokens, origin })
    }

    /// All-zero tokens standing in for "no condition".
    pub fn null(tokens: usize, dim: usize) -> Self {
        Self {
            tokens: Matrix::zeros((tokens, dim)),
            origin: EmbeddingOrigin::Null,
        }
    }

    /// Token-wise mean of several embeddings of the same shape.
    pub fn mean(items: &[ConditionEmbedding], origin: EmbeddingOrigin) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| SculptError::contract("mean of zero embeddings"))?;
        let mut acc = first.tokens.clone();
        for e in &items[1..] {
            if e.tokens.dim() != acc.dim() {
                return Err(SculptError::contract("embeddings to average differ in shape"));
            }
            acc += &e.tokens;
        }
        acc /= items.len() as f64;
        Self::new(acc, origin)
    }
}

/// Preprocessing and embedding settings shared by every input image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditioningConfig {
    /// Side length of the square model input.
    pub resolution: usize,
    pub patch_size: usize,
    /// Pixels with luma at or above this are background. `None` disables
    /// background removal.
    pub background_threshold: Option<f64>,
    /// Fractional margin added around the foreground box before cropping.
    pub crop_margin: f64,
    pub edge_extractor: String,
    pub embedding_seed: u64,
}

impl Default for ConditioningConfig {
    fn default() -> Self {
        Self {
            resolution: 64,
            patch_size: 8,
            background_threshold: Some(0.95),
            crop_margin: 0.1,
            edge_extractor: SobelEdges::ID.into(),
            embedding_seed: 0,
        }
    }
}

/// Conditions for one generation: content plus optional style and edge.
#[derive(Debug, Clone)]
pub struct PreparedConditions {
    pub content: ConditionEmbedding,
    pub style: Option<ConditionEmbedding>,
    pub edge: Option<ConditionEmbedding>,
}

/// Turns raw images into condition embeddings.
pub struct Conditioner {
    config: ConditioningConfig,
    embedder: Box<dyn ImageEmbedder>,
    edges: EdgeRegistry,
}

impl Conditioner {
    /// Reference patch embedder sized for `condition_dim`.
    pub fn new(config: ConditioningConfig, condition_dim: usize) -> Result<Self> {
        let embedder = PatchEmbedder::seeded(
            config.resolution,
            config.patch_size,
            condition_dim,
            config.embedding_seed,
        )?;
        Self::with_embedder(config, Box::new(embedder), EdgeRegistry::default())
    }

    pub fn with_embedder(
        config: ConditioningConfig,
        embedder: Box<dyn ImageEmbedder>,
        edges: EdgeRegistry,
    ) -> Result<Self> {
        edges.get(&config.edge_extractor)?;
        Ok(Self {
            config,
            embedder,
            edges,
        })
    }

    pub fn config(&self) -> &ConditioningConfig {
        &self.config
    }

    pub fn embed(&self, image: &ImageInput, origin: EmbeddingOrigin) -> Result<ConditionEmbedding> {
        let mut e = self.embedder.embed(image)?;
        e.origin = origin;
        Ok(e)
    }

    /// Preprocessed image and its embedding.
    pub fn prepare_content(&self, raw: &ImageInput) -> Result<(ImageInput, ConditionEmbedding)> {
        let (image, _) = preprocess(raw, &self.config)?;
        let embedding = self.embed(&image, EmbeddingOrigin::Content)?;
        Ok((image, embedding))
    }

    /// Edge map extracted from the raw image, then put through the same
    /// transforms that preprocessing applied to the image itself.
    pub fn aligned_edges(&self, raw: &ImageInput) -> Result<(ImageInput, EdgeMap)> {
        let (image, record) = preprocess(raw, &self.config)?;
        let edges = extract_edges(raw, &self.config.edge_extractor, &self.edges)?;
        let replayed = replay(&record, &edges_as_array(&edges), ReplayTarget::EdgeMap)?;
        let edge_map = EdgeMap::new(replayed.index_axis_move(ndarray::Axis(2), 0))?;
        Ok((image, edge_map))
    }

    /// Style and edge embeddings; several style images are averaged.
    pub fn prepare_style(&self, raws: &[ImageInput]) -> Result<(ConditionEmbedding, ConditionEmbedding)> {
        if raws.is_empty() {
            return Err(SculptError::contract("at least one style image is required"));
        }
        let mut styles = Vec::with_capacity(raws.len());
        let mut edges = Vec::with_capacity(raws.len());
        for raw in raws {
            let (image, edge_map) = self.aligned_edges(raw)?;
            styles.push(self.embed(&image, EmbeddingOrigin::Style)?);
            let edge_image = edge_map.to_image(format!("{}#edges", raw.source_id))?;
            edges.push(self.embed(&edge_image, EmbeddingOrigin::Edge)?);
        }
        Ok((
            ConditionEmbedding::mean(&styles, EmbeddingOrigin::Style)?,
            ConditionEmbedding::mean(&edges, EmbeddingOrigin::Edge)?,
        ))
    }

    pub fn prepare(&self, content: &ImageInput, styles: &[ImageInput]) -> Result<PreparedConditions> {
        let (_, content) = self.prepare_content(content)?;
        let (style, edge) = if styles.is_empty() {
            (None, None)
        } else {
            let (s, e) = self.prepare_style(styles)?;
            (Some(s), Some(e))
        };
        Ok(PreparedConditions { content, style, edge })
    }
}

pub(crate) fn edges_as_array(edges: &EdgeMap) -> Array3<f64> {
    edges.pixels().clone().insert_axis(ndarray::Axis(2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_invariants() {
        assert!(ImageInput::new(Array3::zeros((8, 8, 3)), "ok").is_ok());
        assert!(ImageInput::new(Array3::zeros((7, 8, 3)), "small").is_err());
        assert!(ImageInput::new(Array3::zeros((8, 8, 4)), "rgba").is_err());
        assert!(ImageInput::new(Array3::from_elem((8, 8, 3), 1.5), "bright").is_err());
    }

    #[test]
    fn mean_embedding_averages_tokens() {
        let a = ConditionEmbedding::new(Matrix::ones((2, 3)), EmbeddingOrigin::Style).unwrap();
        let b = ConditionEmbedding::new(Matrix::from_elem((2, 3), 3.0), EmbeddingOrigin::Style).unwrap();
        let m = ConditionEmbedding::mean(&[a, b], EmbeddingOrigin::Style).unwrap();
        assert!(m.tokens.iter().all(|v| *v == 2.0));
    }

    #[test]
    fn unknown_extractor_is_a_config_error() {
        let config = ConditioningConfig {
            edge_extractor: "pidinet".into(),
            ..Default::default()
        };
        let err = Conditioner::new(config, 8).err().unwrap();
        assert!(matches!(err, SculptError::Config(_)));
        assert!(err.to_string().contains("sobel"), "{err}");
    }
}
