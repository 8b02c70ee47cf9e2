//! Saliency-weighted majority voting of patch predictions.

use serde::{Deserialize, Serialize};

use crate::patch::{Label, Region};
use crate::saliency::SaliencyMap;
use crate::{Error, Result};

/// Default saliency threshold; only patches scoring strictly above it vote.
pub const DEFAULT_THRESHOLD: f64 = 0.30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub threshold: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl FusionConfig {
    pub fn new(threshold: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&threshold) {
            return Err(Error::InvalidArgument(format!(
                "fusion threshold {threshold} outside [0, 1]"
            )));
        }
        Ok(Self { threshold })
    }
}

/// `0/1` prediction remapped to `−1/+1`.
pub fn to_vote(label: Label) -> i8 {
    2 * label.index() as i8 - 1
}

pub fn from_vote(vote: i8) -> Label {
    if vote > 0 {
        Label::Malignant
    } else {
        Label::Benign
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchVerdict {
    pub patch_id: String,
    pub prediction: Label,
    pub vote: i8,
    pub score: f64,
}

impl PatchVerdict {
    pub fn new(patch_id: impl Into<String>, prediction: Label, score: f64) -> Self {
        Self {
            patch_id: patch_id.into(),
            prediction,
            vote: to_vote(prediction),
            score,
        }
    }
}

/// Mean saliency over `region`.
pub fn patch_saliency_score(map: &SaliencyMap, region: &Region) -> Result<f64> {
    region_mean(&map.values, map.height, map.width, region)
}

pub fn region_mean(values: &[f64], height: usize, width: usize, region: &Region) -> Result<f64> {
    if region.bottom() > height || region.right() > width || region.area() == 0 {
        return Err(Error::OutOfBounds {
            region: region.as_array(),
            height,
            width,
        });
    }
    let mut sum = 0.0;
    for r in region.top..region.bottom() {
        sum += values[r * width + region.left..r * width + region.right()].iter().sum::<f64>();
    }
    Ok(sum / region.area() as f64)
}

/// The intermediate quantities of one fusion.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionOutcome {
    /// `(1/N)·Σ_{r > τ} r·ỹ` over all `N` verdicts; `None` when no patch
    /// clears the threshold.
    pub weighted_mean: Option<f64>,
    pub retained: Vec<bool>,
    pub label: Label,
}

/// Fuses patch verdicts into a WSI label.
///
/// No retained patch means benign. Otherwise the sign of the weighted mean
/// decides: positive is malignant, negative or an exact zero is benign.
pub fn fuse(verdicts: &[PatchVerdict], cfg: &FusionConfig) -> Result<FusionOutcome> {
    if verdicts.is_empty() {
        return Err(Error::EmptyInput("no patch verdicts to fuse"));
    }
    let retained: Vec<bool> = verdicts.iter().map(|v| v.score > cfg.threshold).collect();
    if !retained.iter().any(|&r| r) {
        return Ok(FusionOutcome {
            weighted_mean: None,
            retained,
            label: Label::Benign,
        });
    }
    let sum: f64 = verdicts
        .iter()
        .zip(&retained)
        .filter(|(_, &r)| r)
        .map(|(v, _)| v.score * v.vote as f64)
        .sum();
    let s = sum / verdicts.len() as f64;
    let label = if s > 0.0 { Label::Malignant } else { Label::Benign };
    Ok(FusionOutcome {
        weighted_mean: Some(s),
        retained,
        label,
    })
}

/// Unweighted vote over all patches; ties are benign.
pub fn majority_vote(predictions: &[Label]) -> Result<Label> {
    if predictions.is_empty() {
        return Err(Error::EmptyInput("no patch predictions to vote"));
    }
    let sum: i64 = predictions.iter().map(|&p| to_vote(p) as i64).sum();
    Ok(if sum > 0 { Label::Malignant } else { Label::Benign })
}

/// Per-WSI fusion report as written to disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionReport {
    pub wsi_id: String,
    pub threshold: f64,
    pub patches: Vec<FusionReportEntry>,
    pub weighted_mean: Option<f64>,
    pub fused_label: Label,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FusionReportEntry {
    pub id: String,
    pub region: Region,
    pub prediction: Label,
    pub vote: i8,
    pub score: f64,
    pub retained: bool,
}

impl FusionReport {
    /// `regions[i]` is the image region of `verdicts[i]`.
    pub fn new(
        wsi_id: &str,
        cfg: &FusionConfig,
        verdicts: &[PatchVerdict],
        regions: &[Region],
        outcome: &FusionOutcome,
    ) -> Self {
        Self {
            wsi_id: wsi_id.to_string(),
            threshold: cfg.threshold,
            patches: verdicts
                .iter()
                .zip(&outcome.retained)
                .zip(regions)
                .map(|((v, &r), &region)| FusionReportEntry {
                    id: v.patch_id.clone(),
                    region,
                    prediction: v.prediction,
                    vote: v.vote,
                    score: v.score,
                    retained: r,
                })
                .collect(),
            weighted_mean: outcome.weighted_mean,
            fused_label: outcome.label,
        }
    }
}
