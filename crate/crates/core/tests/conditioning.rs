mod common;

use ndarray::{s, Array2};

use common::*;
use sculpt::conditioning::{extract_edges, preprocess, replay, EdgeRegistry, ReplayTarget, TransformOp};
use sculpt::synthetic::image_set;

#[test]
fn replaying_a_record_on_the_raw_image_reproduces_the_preprocessed_image() {
    let conditioner = conditioner_for(&ci_backbone());
    for raw in image_set(5, 24).unwrap() {
        let (image, record) = preprocess(&raw, conditioner.config()).unwrap();
        assert_eq!(record.input, (raw.height(), raw.width()));
        assert!(matches!(
            record.ops.last(),
            Some(TransformOp::Resize { to: (64, 64), .. })
        ));
        let again = replay(&record, raw.pixels(), ReplayTarget::Image)
            .unwrap()
            .mapv(|v| v.clamp(0.0, 1.0));
        assert_eq!(&again, image.pixels(), "{}", raw.source_id);
    }
}

fn mad(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(f64::abs).mean().unwrap()
}

/// `m` moved by one pixel down and right, zero-filled.
fn shifted(m: &Array2<f64>) -> Array2<f64> {
    let (h, w) = m.dim();
    let mut out = Array2::zeros((h, w));
    out.slice_mut(s![1.., 1..]).assign(&m.slice(s![..h - 1, ..w - 1]));
    out
}

/// The replayed edge map sits where the edges of the preprocessed image are:
/// a one-pixel misregistration is much further away than the replay.
#[test]
fn replayed_edges_are_registered_with_the_preprocessed_image() {
    let conditioner = conditioner_for(&ci_backbone());
    let registry = EdgeRegistry::default();
    let (mut aligned, mut misaligned) = (0.0, 0.0);
    let images = image_set(2024, 24).unwrap();
    for raw in &images {
        let (image, replayed) = conditioner.aligned_edges(raw).unwrap();
        let direct = extract_edges(&image, "sobel", &registry).unwrap();
        aligned += mad(replayed.pixels(), direct.pixels());
        misaligned += mad(&shifted(replayed.pixels()), direct.pixels());
    }
    let n = images.len() as f64;
    let (aligned, misaligned) = (aligned / n, misaligned / n);
    println!("mean MAD aligned {aligned:.4}, shifted by one pixel {misaligned:.4}");
    assert!(aligned < 0.5 * misaligned, "aligned {aligned}, shifted {misaligned}");
}
