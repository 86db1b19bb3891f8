//! Seeded object-on-white images for demos, reports and tests.
//!
//! Each image holds one or two soft-edged ellipses with a smooth color
//! gradient, clear of the image border, on a white background.

use ndarray::Array3;
use rand::Rng;

use crate::conditioning::ImageInput;
use crate::error::Result;
use crate::tensor::{mix_seed, seeded_rng};

/// Width in pixels of the anti-aliased fringe around each shape.
const SOFTNESS: f64 = 2.5;

struct Blob {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    base: [f64; 3],
    tint: [f64; 3],
}

fn smoothstep(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// `h × w` image of seeded objects. Objects stay inside the central 80 % of
/// the frame so foreground crops never touch the border.
pub fn object_image(seed: u64, h: usize, w: usize) -> Result<ImageInput> {
    let mut rng = seeded_rng(mix_seed(&[seed, 0x6f626a]), 0);
    let count = rng.random_range(1..=2);
    let short = h.min(w) as f64;
    let blobs: Vec<Blob> = (0..count)
        .map(|_| {
            let ry = rng.random_range(0.12..0.28) * short;
            let rx = rng.random_range(0.12..0.28) * short;
            let r = ry.max(rx) + SOFTNESS;
            let cy = rng.random_range((0.1 * h as f64 + r)..=(0.9 * h as f64 - r).max(0.1 * h as f64 + r));
            let cx = rng.random_range((0.1 * w as f64 + r)..=(0.9 * w as f64 - r).max(0.1 * w as f64 + r));
            let angle = rng.random_range(0.0..std::f64::consts::PI);
            let mut color = || {
                [
                    rng.random_range(0.05..0.8),
                    rng.random_range(0.05..0.8),
                    rng.random_range(0.05..0.8),
                ]
            };
            Blob {
                cy,
                cx,
                ry,
                rx,
                angle,
                base: color(),
                tint: color(),
            }
        })
        .collect();

    let pixels = Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut value = 1.0;
        for b in &blobs {
            let (dy, dx) = (py - b.cy, px - b.cx);
            let (s, co) = b.angle.sin_cos();
            let u = (dx * co + dy * s) / b.rx;
            let v = (-dx * s + dy * co) / b.ry;
            let radial = (u * u + v * v).sqrt();
            // Signed distance approximated in pixels along the shorter axis.
            let inside = smoothstep((1.0 - radial) * b.rx.min(b.ry) / SOFTNESS);
            let shade = 0.5 + 0.5 * v.clamp(-1.0, 1.0);
            let color = b.base[c] * (1.0 - shade) + b.tint[c] * shade;
            value = value * (1.0 - inside) + color * inside;
        }
        value
    });
    ImageInput::new(pixels, format!("synthetic:{seed}"))
}

/// Image sizes cycled through by [`image_set`]: square, landscape, portrait.
const SHAPES: [(usize, usize); 6] = [(96, 96), (80, 160), (150, 90), (64, 64), (120, 100), (72, 200)];

/// `count` images with varied aspect ratios.
pub fn image_set(seed: u64, count: usize) -> Result<Vec<ImageInput>> {
    (0..count)
        .map(|i| {
            let (h, w) = SHAPES[i % SHAPES.len()];
            object_image(mix_seed(&[seed, i as u64]), h, w)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn images_are_deterministic_with_white_borders() {
        let a = object_image(3, 80, 120).unwrap();
        let b = object_image(3, 80, 120).unwrap();
        assert_eq!(a, b);
        let px = a.pixels();
        for x in 0..120 {
            assert_eq!(px[[0, x, 0]], 1.0);
            assert_eq!(px[[79, x, 2]], 1.0);
        }
        assert!(px.iter().any(|v| *v < 0.85), "object missing");
    }
}
