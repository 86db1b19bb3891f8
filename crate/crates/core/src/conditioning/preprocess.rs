//! Background removal, square crop and resize, recorded so the identical
//! geometry can be replayed on maps derived from the raw image.

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use super::{luminance, ConditioningConfig, ImageInput};
use crate::error::{Result, SculptError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CropKind {
    /// Square around the foreground bounding box plus margin.
    Foreground,
    /// Centered square; used when nothing was classified as background.
    Center,
    /// Centered square because nothing was classified as foreground.
    CenterFallback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum TransformOp {
    /// Composites the image over white with a matte derived from luma:
    /// opaque at or below `threshold`, fading to fully white at luma 1.
    /// `background_pixels` counts the pixels at or above the threshold.
    BackgroundMask {
        id: String,
        threshold: f64,
        background_pixels: usize,
    },
    /// Square window; may extend past the image, where the fill value is used.
    Crop {
        kind: CropKind,
        y0: i64,
        x0: i64,
        size: usize,
    },
    Resize {
        from: (usize, usize),
        to: (usize, usize),
    },
}

impl TransformOp {
    pub fn name(&self) -> &'static str {
        match self {
            Self::BackgroundMask { .. } => "background_mask",
            Self::Crop { .. } => "crop",
            Self::Resize { .. } => "resize",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformRecord {
    /// `(height, width)` of the image the record was produced from.
    pub input: (usize, usize),
    pub ops: Vec<TransformOp>,
}

/// What a replay operates on; decides fill values and whether the
/// background mask applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReplayTarget {
    Image,
    /// Gradient maps respond on both sides of the object boundary, so the
    /// background mask is not applied to them; padding is zero.
    EdgeMap,
}

impl ReplayTarget {
    fn fill(self) -> f64 {
        match self {
            Self::Image => 1.0,
            Self::EdgeMap => 0.0,
        }
    }
}

pub fn preprocess(image: &ImageInput, config: &ConditioningConfig) -> Result<(ImageInput, TransformRecord)> {
    if config.resolution == 0 {
        return Err(SculptError::config("conditioning resolution must be positive"));
    }
    let (h, w) = (image.height(), image.width());
    let mut ops = Vec::new();

    let background = config.background_threshold.map(|threshold| {
        let luma = luminance(image.pixels());
        (threshold, luma.mapv(|v| v >= threshold))
    });
    let crop = match &background {
        Some((threshold, mask)) => {
            let count = mask.iter().filter(|b| **b).count();
            if count > 0 {
                ops.push(TransformOp::BackgroundMask {
                    id: format!("luma-matte@{threshold}"),
                    threshold: *threshold,
                    background_pixels: count,
                });
            }
            if count == 0 {
                center_square(h, w, CropKind::Center)
            } else if count == h * w {
                center_square(h, w, CropKind::CenterFallback)
            } else {
                foreground_square(mask, config.crop_margin)
            }
        }
        None => center_square(h, w, CropKind::Center),
    };
    if !is_identity_crop(&crop, h, w) {
        ops.push(crop);
    }
    let side = match ops.last() {
        Some(TransformOp::Crop { size, .. }) => (*size, *size),
        _ => (h, w),
    };
    ops.push(TransformOp::Resize {
        from: side,
        to: (config.resolution, config.resolution),
    });

    let record = TransformRecord { input: (h, w), ops };
    let pixels = replay(&record, image.pixels(), ReplayTarget::Image)?;
    let out = ImageInput::new(pixels.mapv(|v| v.clamp(0.0, 1.0)), image.source_id.clone())?;
    Ok((out, record))
}

/// Applies the recorded ops to any `[H, W, channels]` array of the recorded
/// input size.
pub fn replay(record: &TransformRecord, input: &Array3<f64>, target: ReplayTarget) -> Result<Array3<f64>> {
    let (h, w, _) = input.dim();
    if (h, w) != record.input {
        return Err(SculptError::contract(format!(
            "replay input is {h}×{w}, record was made for {}×{}",
            record.input.0, record.input.1
        )));
    }
    let mut current = input.clone();
    for op in &record.ops {
        current = match op {
            TransformOp::BackgroundMask { threshold, .. } => {
                if target == ReplayTarget::Image {
                    composite_over_white(&mut current, *threshold)?;
                }
                current
            }
            TransformOp::Crop { y0, x0, size, .. } => crop(&current, *y0, *x0, *size, target.fill()),
            TransformOp::Resize { from, to } => {
                let (ch, cw, _) = current.dim();
                if (ch, cw) != *from {
                    return Err(SculptError::contract(format!(
                        "resize expected {}×{}, got {ch}×{cw}",
                        from.0, from.1
                    )));
                }
                resize(&current, to.0, to.1)
            }
        };
    }
    Ok(current)
}

/// Continuous in luma, so the matte adds no step of its own at the fringe.
fn composite_over_white(image: &mut Array3<f64>, threshold: f64) -> Result<()> {
    if image.dim().2 != 3 {
        return Err(SculptError::contract("the background matte needs an RGB image"));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(SculptError::config(format!(
            "background threshold {threshold} must lie in (0, 1)"
        )));
    }
    for mut pixel in image.lanes_mut(Axis(2)) {
        let luma = 0.299 * pixel[0] + 0.587 * pixel[1] + 0.114 * pixel[2];
        let alpha = ((1.0 - luma) / (1.0 - threshold)).clamp(0.0, 1.0);
        pixel.mapv_inplace(|v| alpha * v + (1.0 - alpha));
    }
    Ok(())
}

fn center_square(h: usize, w: usize, kind: CropKind) -> TransformOp {
    let size = h.min(w);
    TransformOp::Crop {
        kind,
        y0: ((h - size) / 2) as i64,
        x0: ((w - size) / 2) as i64,
        size,
    }
}

fn foreground_square(background: &Array2<bool>, margin: f64) -> TransformOp {
    let (mut y_min, mut y_max, mut x_min, mut x_max) = (usize::MAX, 0, usize::MAX, 0);
    for ((y, x), bg) in background.indexed_iter() {
        if !bg {
            y_min = y_min.min(y);
            y_max = y_max.max(y);
            x_min = x_min.min(x);
            x_max = x_max.max(x);
        }
    }
    let extent = (y_max - y_min + 1).max(x_max - x_min + 1);
    let size = ((extent as f64) * (1.0 + 2.0 * margin.max(0.0))).ceil() as usize;
    // Integer arithmetic keeps the box centered on the foreground to within half a pixel.
    let cy2 = (y_min + y_max + 1) as i64;
    let cx2 = (x_min + x_max + 1) as i64;
    TransformOp::Crop {
        kind: CropKind::Foreground,
        y0: (cy2 - size as i64).div_euclid(2),
        x0: (cx2 - size as i64).div_euclid(2),
        size,
    }
}

fn is_identity_crop(op: &TransformOp, h: usize, w: usize) -> bool {
    matches!(op, TransformOp::Crop { y0: 0, x0: 0, size, .. } if *size == h && *size == w)
}

fn crop(input: &Array3<f64>, y0: i64, x0: i64, size: usize, fill: f64) -> Array3<f64> {
    let (h, w, c) = input.dim();
    Array3::from_shape_fn((size, size, c), |(y, x, ch)| {
        let sy = y0 + y as i64;
        let sx = x0 + x as i64;
        if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
            fill
        } else {
            input[[sy as usize, sx as usize, ch]]
        }
    })
}

/// Separable triangle-filter resample with pixel-center alignment. When
/// shrinking, the filter widens by the scale factor so every source pixel
/// contributes (antialiasing).
pub fn resize(input: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (h, w, _) = input.dim();
    if (h, w) == (out_h, out_w) {
        return input.clone();
    }
    let rows = filter_taps(h, out_h);
    let cols = filter_taps(w, out_w);
    let (_, _, c) = input.dim();
    let mut tmp = Array3::zeros((h, out_w, c));
    for y in 0..h {
        for (x, taps) in cols.iter().enumerate() {
            for ch in 0..c {
                tmp[[y, x, ch]] = taps.iter().map(|&(j, wt)| wt * input[[y, j, ch]]).sum::<f64>();
            }
        }
    }
    let mut out = Array3::zeros((out_h, out_w, c));
    for (y, taps) in rows.iter().enumerate() {
        for x in 0..out_w {
            for ch in 0..c {
                out[[y, x, ch]] = taps.iter().map(|&(j, wt)| wt * tmp[[j, x, ch]]).sum::<f64>();
            }
        }
    }
    out
}

fn filter_taps(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    let support = scale.max(1.0);
    (0..dst)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = (center - support).floor().max(0.0) as usize;
            let hi = ((center + support).ceil() as usize).min(src);
            let mut taps: Vec<(usize, f64)> = (lo..hi)
                .filter_map(|j| {
                    let d = ((j as f64 + 0.5 - center) / support).abs();
                    (d < 1.0).then_some((j, 1.0 - d))
                })
                .collect();
            if taps.is_empty() {
                taps.push(((center.floor() as usize).min(src - 1), 1.0));
            }
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}
