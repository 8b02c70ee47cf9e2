//! Saliency heatmap overlay with outlined patch predictions.

use crate::imaging::RgbImage;
use crate::patch::{Label, Region};

/// Blend weight of the red channel at saliency 1.
pub const HEAT_ALPHA: f32 = 0.6;
pub const OUTLINE_WIDTH: usize = 6;

pub fn outline_color(label: Label) -> [f32; 3] {
    match label {
        Label::Benign => [0.0, 1.0, 1.0],
        Label::Malignant => [1.0, 1.0, 0.0],
    }
}

/// Tints each pixel toward red in proportion to `saliency` and draws a
/// border around every listed region, colored by its prediction.
pub fn render_overlay(image: &RgbImage, saliency: &[f64], outlines: &[(Region, Label)]) -> RgbImage {
    assert_eq!(saliency.len(), image.height * image.width, "saliency size");
    let mut out = image.clone();
    for (px, &r) in out.pixels.chunks_exact_mut(3).zip(saliency) {
        let a = HEAT_ALPHA * r.clamp(0.0, 1.0) as f32;
        px[0] = px[0] * (1.0 - a) + a;
        px[1] *= 1.0 - a;
        px[2] *= 1.0 - a;
    }
    let (h, w) = (image.height, image.width);
    for &(region, label) in outlines {
        let reg = region.clipped(h, w);
        if reg.area() == 0 {
            continue;
        }
        let color = outline_color(label);
        for y in reg.top..reg.bottom() {
            for x in reg.left..reg.right() {
                let edge = y < reg.top + OUTLINE_WIDTH
                    || y + OUTLINE_WIDTH >= reg.bottom()
                    || x < reg.left + OUTLINE_WIDTH
                    || x + OUTLINE_WIDTH >= reg.right();
                if edge {
                    let i = (y * w + x) * 3;
                    out.pixels[i..i + 3].copy_from_slice(&color);
                }
            }
        }
    }
    out
}
