use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;

use super::{EdgeMap, ImageInput};
use crate::error::{Result, SculptError};

pub trait EdgeExtractor: Send + Sync {
    fn id(&self) -> &str;
    fn extract(&self, image: &ImageInput) -> Result<EdgeMap>;
}

/// Sobel gradient magnitude of the luma channel with replicated borders,
/// divided by its maximum. A flat image maps to all zeros.
#[derive(Debug, Clone, Copy, Default)]
pub struct SobelEdges;

impl SobelEdges {
    pub const ID: &'static str = "sobel";
}

impl EdgeExtractor for SobelEdges {
    fn id(&self) -> &str {
        Self::ID
    }

    fn extract(&self, image: &ImageInput) -> Result<EdgeMap> {
        let luma = image.luminance();
        let (h, w) = luma.dim();
        let at = |y: isize, x: isize| luma[[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]];
        let mut magnitude = Array2::from_shape_fn((h, w), |(y, x)| {
            let (y, x) = (y as isize, x as isize);
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            gx.hypot(gy)
        });
        let max = magnitude.iter().copied().fold(0.0, f64::max);
        // Below this the image is flat up to rounding in the luma weights.
        if max > 1e-12 {
            magnitude.mapv_inplace(|v| (v / max).min(1.0));
        } else {
            magnitude.fill(0.0);
        }
        EdgeMap::new(magnitude)
    }
}

/// Extractors addressable by string id. Starts with the Sobel fallback.
#[derive(Clone)]
pub struct EdgeRegistry {
    extractors: BTreeMap<String, Arc<dyn EdgeExtractor>>,
}

impl Default for EdgeRegistry {
    fn default() -> Self {
        let mut registry = Self {
            extractors: BTreeMap::new(),
        };
        registry.register(Arc::new(SobelEdges));
        registry
    }
}

impl EdgeRegistry {
    pub fn register(&mut self, extractor: Arc<dyn EdgeExtractor>) {
        self.extractors.insert(extractor.id().to_owned(), extractor);
    }

    pub fn ids(&self) -> Vec<&str> {
        self.extractors.keys().map(String::as_str).collect()
    }

    pub fn get(&self, id: &str) -> Result<&dyn EdgeExtractor> {
        self.extractors.get(id).map(|e| e.as_ref()).ok_or_else(|| {
            SculptError::config(format!(
                "unknown edge extractor {id:?}; registered: {}",
                self.ids().join(", ")
            ))
        })
    }
}

pub fn extract_edges(image: &ImageInput, extractor: &str, registry: &EdgeRegistry) -> Result<EdgeMap> {
    let edges = registry.get(extractor)?.extract(image)?;
    if edges.dim() != (image.height(), image.width()) {
        return Err(SculptError::contract(format!(
            "extractor {extractor} returned {:?} for a {}×{} image",
            edges.dim(),
            image.height(),
            image.width()
        )));
    }
    Ok(edges)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    fn sobel(pixels: Array3<f64>) -> Array2<f64> {
        let img = ImageInput::new(pixels, "t").unwrap();
        extract_edges(&img, SobelEdges::ID, &EdgeRegistry::default())
            .unwrap()
            .pixels()
            .clone()
    }

    #[test]
    fn constant_image_has_no_edges() {
        assert!(sobel(Array3::from_elem((12, 9, 3), 0.4)).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn vertical_step_peaks_on_both_boundary_columns() {
        let step = Array3::from_shape_fn((10, 12, 3), |(_, x, _)| if x < 6 { 0.0 } else { 1.0 });
        let e = sobel(step);
        for ((_, x), v) in e.indexed_iter() {
            let expected = if x == 5 || x == 6 { 1.0 } else { 0.0 };
            assert!((v - expected).abs() < 1e-12, "x={x} v={v}");
        }
    }

    #[test]
    fn brightness_offset_does_not_change_edges() {
        let base = Array3::from_shape_fn((16, 16, 3), |(y, x, c)| 0.3 * ((x * 7 + y * 3 + c) % 11) as f64 / 10.0);
        let shifted = base.mapv(|v| v + 0.25);
        let a = sobel(base);
        let b = sobel(shifted);
        assert!(a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < 1e-12));
    }
}
