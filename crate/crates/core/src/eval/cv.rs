//! Cross-validated pipeline: tile, train both models, saliency, fuse.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::folds::{make_folds, FoldPlan};
use super::metrics::{csv_row, Confusion, MetricsReport, CSV_HEADER};
use super::train::{train_cnn, train_vit, CnnTrainConfig, Example, TrainLog, VitTrainConfig};
use crate::cnn::CnnModel;
use crate::config::RunConfig;
use crate::fusion::{fuse, majority_vote, region_mean, FusionConfig, FusionOutcome, PatchVerdict};
use crate::patch::{extract_patches, Label, PatchRecord, WsiSample};
use crate::saliency::saliency_from_input;
use crate::synth::DatasetManifest;
use crate::vit::{normalize_input, VitModel};
use crate::{parallel, Error, Result};

/// Everything the pipeline needs from one image, without its pixels.
#[derive(Clone, Debug)]
pub struct PreparedWsi {
    pub id: String,
    pub label: Label,
    pub height: usize,
    pub width: usize,
    /// Retained patches; `input` is already normalized for the ViT.
    pub patches: Vec<PatchRecord>,
    pub tiles_before_filter: usize,
    /// The whole image resized to the CNN input, channel-interleaved.
    pub cnn_input: Vec<f64>,
}

pub fn prepare_wsi(sample: &WsiSample, cfg: &RunConfig) -> Result<PreparedWsi> {
    let mut patches = extract_patches(sample, &cfg.patch)?;
    for p in &mut patches {
        p.input = normalize_input(&p.input);
    }
    let (rows, cols) = sample.grid(cfg.patch.patch_size);
    let s = cfg.cnn.input_size;
    Ok(PreparedWsi {
        id: sample.id.clone(),
        label: sample.label,
        height: sample.height(),
        width: sample.width(),
        patches,
        tiles_before_filter: rows * cols,
        cnn_input: sample.image.resized(s, s),
    })
}

/// Renders and prepares every manifest entry, in parallel.
pub fn prepare_dataset(manifest: &DatasetManifest, cfg: &RunConfig) -> Result<Vec<PreparedWsi>> {
    parallel::map_range(manifest.entries.len(), |i| {
        let g = manifest.materialize(i)?;
        prepare_wsi(&g.sample, cfg)
    })
    .into_iter()
    .collect()
}

/// Forces the `fraction` lowest-scoring predictions (ties by position) to
/// the label opposite `truth`.
pub fn flip_low_saliency(predictions: &[Label], scores: &[f64], truth: Label, fraction: f64) -> Vec<Label> {
    let n_flip = (predictions.len() as f64 * fraction).round() as usize;
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut out = predictions.to_vec();
    for &i in order.iter().take(n_flip) {
        out[i] = truth.opposite();
    }
    out
}

/// Per-image outcome under every compared method.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WsiEvaluation {
    pub id: String,
    pub label: Label,
    pub cnn_prediction: Label,
    pub saliency_class: Label,
    pub patch_ids: Vec<String>,
    pub patch_predictions: Vec<Label>,
    pub patch_labels: Vec<Option<Label>>,
    pub scores: Vec<f64>,
    pub fused: FusionOutcome,
    pub majority: Label,
    pub flipped_fused: Label,
    pub flipped_majority: Label,
}

impl WsiEvaluation {
    pub fn verdicts(&self) -> Vec<PatchVerdict> {
        self.patch_ids
            .iter()
            .zip(&self.patch_predictions)
            .zip(&self.scores)
            .map(|((id, &p), &s)| PatchVerdict::new(id.clone(), p, s))
            .collect()
    }
}

pub fn evaluate_wsi(
    vit: &VitModel,
    cnn: &CnnModel,
    wsi: &PreparedWsi,
    fusion: &FusionConfig,
    flip_fraction: f64,
) -> Result<WsiEvaluation> {
    if wsi.patches.is_empty() {
        return Err(Error::EmptyInput("image has no retained patches"));
    }
    let inputs: Vec<&[f64]> = wsi.patches.iter().map(|p| p.input.as_slice()).collect();
    let preds: Vec<Label> = vit
        .classify_many(&inputs)?
        .into_iter()
        .map(Label::from_index)
        .collect();
    let map = saliency_from_input(cnn, &wsi.id, &wsi.cnn_input, wsi.height, wsi.width, None)?;
    let scores = wsi
        .patches
        .iter()
        .map(|p| region_mean(&map.values, map.height, map.width, &p.region.clipped(wsi.height, wsi.width)))
        .collect::<Result<Vec<_>>>()?;
    let verdict = |preds: &[Label]| -> Vec<PatchVerdict> {
        wsi.patches
            .iter()
            .zip(preds)
            .zip(&scores)
            .map(|((p, &y), &s)| PatchVerdict::new(p.id(), y, s))
            .collect()
    };
    let fused = fuse(&verdict(&preds), fusion)?;
    let flipped = flip_low_saliency(&preds, &scores, wsi.label, flip_fraction);
    Ok(WsiEvaluation {
        id: wsi.id.clone(),
        label: wsi.label,
        cnn_prediction: Label::from_index(cnn.predict(&wsi.cnn_input)?),
        saliency_class: map.target_class,
        patch_ids: wsi.patches.iter().map(PatchRecord::id).collect(),
        majority: majority_vote(&preds)?,
        flipped_fused: fuse(&verdict(&flipped), fusion)?.label,
        flipped_majority: majority_vote(&flipped)?,
        patch_predictions: preds,
        patch_labels: wsi.patches.iter().map(|p| p.label).collect(),
        scores,
        fused,
    })
}

/// Methods reported side by side.
pub const METHODS: [&str; 5] = [
    "patch_fusion",
    "majority_vote",
    "patch_fusion_flipped",
    "majority_vote_flipped",
    "cnn",
];

fn method_label(e: &WsiEvaluation, method: usize) -> Label {
    match method {
        0 => e.fused.label,
        1 => e.majority,
        2 => e.flipped_fused,
        3 => e.flipped_majority,
        _ => e.cnn_prediction,
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub vit_log: TrainLog,
    pub cnn_log: TrainLog,
    pub evaluations: Vec<WsiEvaluation>,
}

impl FoldResult {
    pub fn confusion(&self, method: usize) -> Confusion {
        let mut c = Confusion::default();
        for e in &self.evaluations {
            c.record(method_label(e, method), e.label);
        }
        c
    }

    /// `(correct, labeled)` over held-out patches.
    pub fn patch_counts(&self) -> (usize, usize) {
        let mut correct = 0;
        let mut total = 0;
        for e in &self.evaluations {
            for (p, l) in e.patch_predictions.iter().zip(&e.patch_labels) {
                if let Some(l) = l {
                    total += 1;
                    correct += (p == l) as usize;
                }
            }
        }
        (correct, total)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub per_fold: Vec<MetricsReport>,
    /// Pooled over all test predictions.
    pub aggregate: MetricsReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvReport {
    pub plan: FoldPlan,
    pub folds: Vec<FoldResult>,
    pub methods: Vec<MethodSummary>,
    pub patch_accuracy: Option<f64>,
}

impl CvReport {
    pub fn from_folds(plan: FoldPlan, folds: Vec<FoldResult>) -> Self {
        let methods = METHODS
            .iter()
            .enumerate()
            .map(|(m, name)| {
                let per_fold: Vec<Confusion> = folds.iter().map(|f| f.confusion(m)).collect();
                let mut pooled = Confusion::default();
                per_fold.iter().for_each(|c| pooled.merge(c));
                MethodSummary {
                    method: name.to_string(),
                    per_fold: per_fold.into_iter().map(MetricsReport::from_confusion).collect(),
                    aggregate: MetricsReport::from_confusion(pooled),
                }
            })
            .collect();
        let (c, t) = folds
            .iter()
            .map(FoldResult::patch_counts)
            .fold((0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
        Self {
            plan,
            folds,
            methods,
            patch_accuracy: (t > 0).then(|| c as f64 / t as f64),
        }
    }

    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }

    fn csv_for(&self, methods: &[&MethodSummary]) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for m in methods {
            for (i, r) in m.per_fold.iter().enumerate() {
                out.push_str(&csv_row(&m.method, &i.to_string(), r));
                out.push('\n');
            }
            out.push_str(&csv_row(&m.method, "all", &m.aggregate));
            out.push('\n');
        }
        out
    }

    /// The fused method only: one row per fold plus the pooled row.
    pub fn results_csv(&self) -> String {
        self.csv_for(&[&self.methods[0]])
    }

    pub fn all_methods_csv(&self) -> String {
        self.csv_for(&self.methods.iter().collect::<Vec<_>>())
    }

    /// Writes `results.csv`, `all_methods.csv`, `report.json` and
    /// `config.txt` into `dir`.
    pub fn write(&self, dir: &Path, cfg: &RunConfig) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = [
            ("results.csv", self.results_csv()),
            ("all_methods.csv", self.all_methods_csv()),
            ("report.json", serde_json::to_string_pretty(self)?),
            ("config.txt", cfg.to_kv()),
        ];
        for (name, body) in files {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn mix(seed: u64, fold: usize, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt ^ (fold as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn stage<T>(stage: &'static str, fold: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage,
        fold,
        source: Box::new(e),
    })
}

fn patch_examples<'a>(data: &'a [PreparedWsi], idx: &[usize]) -> Vec<Example<'a>> {
    idx.iter()
        .flat_map(|&i| data[i].patches.iter())
        .filter_map(|p| {
            p.label.map(|label| Example {
                input: &p.input,
                label,
            })
        })
        .collect()
}

fn wsi_examples<'a>(data: &'a [PreparedWsi], idx: &[usize]) -> Vec<Example<'a>> {
    idx.iter()
        .map(|&i| Example {
            input: &data[i].cnn_input,
            label: data[i].label,
        })
        .collect()
}

/// Trains and evaluates one fold.
pub fn run_fold(cfg: &RunConfig, data: &[PreparedWsi], plan: &FoldPlan, fold: usize) -> Result<FoldResult> {
    let f = plan
        .folds
        .get(fold)
        .ok_or_else(|| Error::InvalidArgument(format!("fold {fold} of {}", plan.k)))?;
    let ids = |idx: &[usize]| idx.iter().map(|&i| data[i].id.clone()).collect::<Vec<_>>();
    let vit_tc = VitTrainConfig {
        seed: mix(cfg.seed, fold, cfg.vit_train.seed),
        ..cfg.vit_train.clone()
    };
    let (vit, vit_log) = stage(
        "train-vit",
        fold,
        train_vit(&cfg.vit, &vit_tc, &patch_examples(data, &f.train), &patch_examples(data, &f.val)),
    )?;
    log::info!("fold {fold}: vit best epoch {}", vit_log.best_epoch);
    let cnn_tc = CnnTrainConfig {
        seed: mix(cfg.seed, fold, cfg.cnn_train.seed ^ 0xc),
        ..cfg.cnn_train.clone()
    };
    let (cnn, cnn_log) = stage(
        "train-cnn",
        fold,
        train_cnn(&cfg.cnn, &cnn_tc, &wsi_examples(data, &f.train), &wsi_examples(data, &f.val)),
    )?;
    log::info!("fold {fold}: cnn best epoch {}", cnn_log.best_epoch);
    let evaluations = stage(
        "fuse",
        fold,
        parallel::map(&f.test, |&i| {
            evaluate_wsi(&vit, &cnn, &data[i], &cfg.fusion, cfg.cv.flip_fraction)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>(),
    )?;
    Ok(FoldResult {
        fold,
        train_ids: ids(&f.train),
        val_ids: ids(&f.val),
        test_ids: ids(&f.test),
        vit_log,
        cnn_log,
        evaluations,
    })
}

/// Runs every fold in order and pools the results.
pub fn cross_validate(cfg: &RunConfig, data: &[PreparedWsi]) -> Result<CvReport> {
    cfg.validate()?;
    let labels: Vec<Label> = data.iter().map(|w| w.label).collect();
    let plan = make_folds(&labels, cfg.cv.folds, cfg.cv.val_fraction, cfg.seed)?;
    let mut folds = Vec::with_capacity(plan.k);
    for fold in 0..plan.k {
        folds.push(run_fold(cfg, data, &plan, fold)?);
    }
    Ok(CvReport::from_folds(plan, folds))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flips_lowest_scores_first() {
        let preds = [Label::Malignant; 5];
        let scores = [0.9, 0.1, 0.5, 0.1, 0.7];
        let out = flip_low_saliency(&preds, &scores, Label::Malignant, 0.4);
        assert_eq!(
            out,
            vec![
                Label::Malignant,
                Label::Benign,
                Label::Malignant,
                Label::Benign,
                Label::Malignant
            ]
        );
        assert_eq!(flip_low_saliency(&preds, &scores, Label::Malignant, 0.0), preds.to_vec());
    }
}
