//! Grad-CAM++ saliency from the CNN's hooked batch-norm features.
//!
//! With `S` the pre-softmax class score and the exponential-score
//! convention `Y = exp(S)`, the higher-order derivatives reduce to powers of
//! the first-order gradient `g = ∂S/∂F`, giving per-pixel coefficients
//!
//! ```text
//! w = g² / (2g² + Σ_ab F_ab · g³)        (0/0 → 0)
//! λ_q = exp(S) · Σ_ij w_ij · max(g_ij, 0)
//! R = ReLU(Σ_q λ_q F^q)
//! ```
//!
//! `exp(S)` is a positive factor common to every channel and cancels when
//! the map is max-normalized, so it is kept separate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{NormMode, Tape, Var};
use crate::cnn::CnnModel;
use crate::imaging::{resize_bilinear, RgbImage};
use crate::patch::Label;
use crate::vit::{argmax, Bound};
use crate::{Error, Result, Tensor};

/// Channel importance weights for one class score.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelWeights {
    /// The class score `S` the weights were computed for.
    pub score: f64,
    /// `λ_q / exp(S)`.
    pub unscaled: Vec<f64>,
}

impl ChannelWeights {
    /// `λ_q` including the `exp(S)` factor.
    pub fn lambda(&self) -> Vec<f64> {
        let e = self.score.exp();
        self.unscaled.iter().map(|l| l * e).collect()
    }
}

/// Closed-form Grad-CAM++ weights from `Q×H×W` features and `∂S/∂F`.
pub fn channel_weights(features: &Tensor, grads: &Tensor, score: f64) -> Result<ChannelWeights> {
    if features.shape() != grads.shape() {
        return Err(Error::Shape {
            op: "gradcampp",
            lhs: features.shape().to_vec(),
            rhs: grads.shape().to_vec(),
        });
    }
    let q = match *features.shape() {
        [q, _, _] | [1, q, _, _] => q,
        _ => {
            return Err(Error::Rank {
                op: "gradcampp",
                expected: 3,
                got: features.shape().to_vec(),
            })
        }
    };
    let plane = features.len() / q;
    let unscaled = (0..q)
        .map(|c| {
            let f = &features.data()[c * plane..(c + 1) * plane];
            let g = &grads.data()[c * plane..(c + 1) * plane];
            let sum_f: f64 = f.iter().sum();
            g.iter()
                .map(|&g| {
                    let num = g * g;
                    let den = 2.0 * num + sum_f * g * g * g;
                    let w = if den != 0.0 { num / den } else { 0.0 };
                    w * g.max(0.0)
                })
                .sum()
        })
        .collect();
    Ok(ChannelWeights { score, unscaled })
}

/// Weights for the score at `score_var`, reading `∂S/∂F` from the tape.
pub fn channel_weights_from_tape(tape: &Tape, hook: Var, score_var: Var) -> Result<ChannelWeights> {
    let grads = tape.grad(hook).ok_or(Error::MissingGradient)?;
    let features = tape.value(hook).clone();
    let score = tape.value(score_var).item()?;
    channel_weights(&features, &grads, score)
}

/// `ReLU(Σ_q λ_q F^q)` on the feature grid, row-major `H_f×W_f`.
pub fn raw_map(features: &Tensor, lambda: &[f64]) -> Vec<f64> {
    let q = lambda.len();
    let plane = features.len() / q.max(1);
    let mut out = vec![0.0; plane];
    for (c, &l) in lambda.iter().enumerate() {
        for (o, &f) in out.iter_mut().zip(&features.data()[c * plane..(c + 1) * plane]) {
            *o += l * f;
        }
    }
    out.iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Divides by the maximum when it is positive; returns that maximum.
pub fn normalize_max(values: &mut [f64]) -> f64 {
    let max = values.iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        values.iter_mut().for_each(|v| *v /= max);
    }
    max
}

/// Nonnegative per-pixel relevance at WSI resolution, normalized to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct SaliencyMap {
    pub wsi_id: String,
    pub target_class: Label,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Maximum of the unscaled upsampled map before normalization.
    pub raw_max: f64,
}

/// JSON sidecar written next to a saliency PNG.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SaliencySidecar {
    pub wsi_id: String,
    pub class: Label,
    pub raw_max: f64,
    pub height: usize,
    pub width: usize,
}

impl SaliencyMap {
    pub fn sidecar(&self) -> SaliencySidecar {
        SaliencySidecar {
            wsi_id: self.wsi_id.clone(),
            class: self.target_class,
            raw_max: self.raw_max,
            height: self.height,
            width: self.width,
        }
    }
}

/// Builds the full-resolution map from feature-grid values.
pub fn upsample_and_normalize(grid: &[f64], grid_h: usize, grid_w: usize, height: usize, width: usize) -> (Vec<f64>, f64) {
    let mut up = resize_bilinear(grid, grid_h, grid_w, 1, height, width);
    let max = normalize_max(&mut up);
    (up, max)
}

/// Hooked features, their class-score gradients, and the logits.
pub struct HookedPass {
    pub features: Tensor,
    pub grads: Tensor,
    pub logits: Vec<f64>,
    pub target: usize,
}

/// Runs the CNN in inference mode and back-propagates the `target` score
/// (the predicted class when `None`) to the hooked features.
pub fn hooked_pass(model: &CnnModel, image: &[f64], target: Option<Label>) -> Result<HookedPass> {
    let params = model.params()?;
    let tape = Tape::new();
    let bound = Bound::bind(&tape, params, false);
    let x = model.input(&tape, &[image])?;
    let mut trunk = model.clone();
    let f = trunk.features(&tape, &bound, x, NormMode::Inference)?;
    // Re-enter the features as a leaf so the gradient stops here and the
    // head consumes exactly this tensor.
    let fv = tape.value(f).clone();
    let hook = tape.leaf(fv, true);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let logits = model.head(&tape, &bound, hook, false, &mut rng)?;
    let lv = tape.value(logits).data().to_vec();
    let target = target.map(Label::index).unwrap_or_else(|| argmax(&lv));
    let onehot = Tensor::from_fn(&[1, lv.len()], |i| if i == target { 1.0 } else { 0.0 });
    let sel = tape.mul(logits, tape.constant(onehot))?;
    let score = tape.sum(sel);
    tape.backward(score)?;
    let grads = tape.grad(hook).ok_or(Error::MissingGradient)?;
    let features = tape.value(hook).clone();
    Ok(HookedPass {
        features,
        grads,
        logits: lv,
        target,
    })
}

/// Grad-CAM++ saliency for a whole image. `target` defaults to the CNN's
/// own prediction.
pub fn saliency_map(model: &CnnModel, wsi_id: &str, image: &RgbImage, target: Option<Label>) -> Result<SaliencyMap> {
    let s = model.config.input_size;
    let resized = image.resized(s, s);
    saliency_from_input(model, wsi_id, &resized, image.height, image.width, target)
}

/// As [`saliency_map`], from an image already resized to the CNN input.
pub fn saliency_from_input(
    model: &CnnModel,
    wsi_id: &str,
    input: &[f64],
    height: usize,
    width: usize,
    target: Option<Label>,
) -> Result<SaliencyMap> {
    let pass = hooked_pass(model, input, target)?;
    let weights = channel_weights(&pass.features, &pass.grads, pass.logits[pass.target])?;
    let grid = raw_map(&pass.features, &weights.unscaled);
    let fs = model.config.feature_size();
    let (values, raw_max) = upsample_and_normalize(&grid, fs, fs, height, width);
    Ok(SaliencyMap {
        wsi_id: wsi_id.to_string(),
        target_class: Label::from_index(pass.target),
        height,
        width,
        values,
        raw_max,
    })
}
