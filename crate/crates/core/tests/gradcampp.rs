mod common;

use common::*;
use patchfuse::autograd::Tape;
use patchfuse::patch::Label;
use patchfuse::saliency::{channel_weights, channel_weights_from_tape, hooked_pass, saliency_map};
use patchfuse::imaging::RgbImage;
use patchfuse::Tensor;
use rand::Rng;

#[test]
fn closed_form_matches_nested_differences() {
    for side in 1..=3 {
        for seed in 0..10 {
            let err = gradcam_case(side, 100 * side as u64 + seed).unwrap();
            assert!(err < 1e-4, "{side}x{side} seed {seed}: rel err {err:e}");
        }
    }
}

#[test]
fn nested_differences_of_an_exponential() {
    let (d1, d2, d3) = nested_fd(&|x: f64| (0.7 * x).exp(), 0.3, NESTED_H);
    let y = (0.21f64).exp();
    assert!((d1 / (0.7 * y) - 1.0).abs() < 1e-6);
    assert!((d2 / (0.49 * y) - 1.0).abs() < 1e-6);
    assert!((d3 / (0.343 * y) - 1.0).abs() < 1e-5);
}

#[test]
fn tape_and_hooked_pass_agree() {
    let model = gradcam_model(2, 3);
    let mut r = rng(1);
    let img: Vec<f64> = (0..16 * 16 * 3).map(|_| r.random_range(0.0..1.0)).collect();
    let pass = hooked_pass(&model, &img, Some(Label::Malignant)).unwrap();
    let direct = channel_weights(&pass.features, &pass.grads, pass.logits[1]).unwrap();

    let tape = Tape::new();
    let f = tape.leaf(pass.features.clone(), true);
    let params = model.params().unwrap();
    let b = patchfuse::vit::Bound::bind(&tape, params, false);
    let logits = model.head(&tape, &b, f, false, &mut rng(0)).unwrap();
    let pick = tape.constant(Tensor::new(&[1, 2], vec![0.0, 1.0]).unwrap());
    let sel = tape.mul(logits, pick).unwrap();
    let s = tape.sum(sel);
    tape.backward(s).unwrap();
    let via_tape = channel_weights_from_tape(&tape, f, s).unwrap();
    for (a, b) in direct.unscaled.iter().zip(&via_tape.unscaled) {
        assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
    }
}

#[test]
fn maps_are_nonnegative_and_normalized() {
    for seed in 0..5 {
        let model = gradcam_model(3, seed);
        let mut r = rng(seed);
        let mut img = RgbImage::new(61, 47);
        img.pixels.iter_mut().for_each(|p| *p = r.random_range(0.0..1.0));
        let map = saliency_map(&model, "w", &img, None).unwrap();
        assert_eq!(map.values.len(), 61 * 47);
        assert!(map.values.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let max = map.values.iter().cloned().fold(0.0, f64::max);
        assert!(max == 0.0 || max == 1.0);
    }
}

#[test]
fn criterion_summary() {
    check_gradcampp().unwrap();
}
