//! Synthetic whole-surface images with known lesion geometry.
//!
//! Tissue fills the image except for a dark background ring. Malignant
//! images carry one or more elliptical lesions rendered with a different
//! color and texture. A patch is labeled malignant iff at least
//! `coverage_threshold` of its pixels lie inside a lesion.

use std::f32::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imaging::RgbImage;
use crate::patch::{Label, WsiSample};
use crate::{parallel, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub lesions_min: usize,
    pub lesions_max: usize,
    pub lesion_radius_min: f64,
    pub lesion_radius_max: f64,
    pub benign_color: [f32; 3],
    pub malignant_color: [f32; 3],
    pub noise_sigma: f32,
    pub texture_amplitude: f32,
    pub background_margin: usize,
    pub background_level: f32,
    /// Lesion share of a patch's pixels at which it is labeled malignant.
    pub coverage_threshold: f64,
    /// Minimum mean-color distance between lesion and normal tissue.
    pub contrast: f64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            height: 1200,
            width: 1600,
            patch_size: 400,
            lesions_min: 1,
            lesions_max: 2,
            lesion_radius_min: 220.0,
            lesion_radius_max: 420.0,
            benign_color: [0.30, 0.55, 0.70],
            malignant_color: [0.62, 0.32, 0.52],
            noise_sigma: 0.05,
            texture_amplitude: 0.05,
            background_margin: 40,
            background_level: 0.03,
            coverage_threshold: 0.30,
            contrast: 0.2,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.height == 0 || self.width == 0 || self.patch_size == 0 {
            return bad("image and patch sizes must be positive".into());
        }
        if !self.height.is_multiple_of(self.patch_size) || !self.width.is_multiple_of(self.patch_size) {
            return bad(format!(
                "{}x{} is not a whole number of {}-pixel patches",
                self.height, self.width, self.patch_size
            ));
        }
        if self.lesions_min == 0 || self.lesions_min > self.lesions_max {
            return bad("need 1 <= lesions_min <= lesions_max".into());
        }
        if self.lesion_radius_min <= 0.0 || self.lesion_radius_min > self.lesion_radius_max {
            return bad("need 0 < lesion_radius_min <= lesion_radius_max".into());
        }
        let limit = self.height.min(self.width) as f64 - 2.0 * self.background_margin as f64;
        if 2.0 * self.lesion_radius_max > limit {
            return bad(format!(
                "lesion diameter {} exceeds the {limit}-pixel tissue area",
                2.0 * self.lesion_radius_max
            ));
        }
        if !(0.0..=1.0).contains(&self.coverage_threshold) {
            return bad("coverage_threshold must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }
}

/// Rotated ellipse in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lesion {
    pub center_row: f64,
    pub center_col: f64,
    pub radius_rows: f64,
    pub radius_cols: f64,
    /// Rotation in radians.
    pub angle: f64,
}

impl Lesion {
    /// Whether the center of pixel `(row, col)` lies inside.
    pub fn contains(&self, row: usize, col: usize) -> bool {
        let dy = row as f64 + 0.5 - self.center_row;
        let dx = col as f64 + 0.5 - self.center_col;
        let (s, c) = self.angle.sin_cos();
        let u = (dy * c + dx * s) / self.radius_rows;
        let v = (-dy * s + dx * c) / self.radius_cols;
        u * u + v * v <= 1.0
    }
}

/// A generated image plus the geometry it was rendered from.
#[derive(Clone, Debug)]
pub struct GeneratedWsi {
    pub sample: WsiSample,
    pub lesions: Vec<Lesion>,
    /// Pixels inside a lesion and inside tissue.
    pub lesion_mask: Vec<bool>,
}

fn in_margin(spec: &GeneratorSpec, row: usize, col: usize) -> bool {
    let m = spec.background_margin;
    row < m || col < m || row + m >= spec.height || col + m >= spec.width
}

fn sample_lesions(spec: &GeneratorSpec, rng: &mut ChaCha8Rng) -> Vec<Lesion> {
    let n = rng.random_range(spec.lesions_min..=spec.lesions_max);
    let inset = spec.background_margin as f64 + spec.lesion_radius_min * 0.5;
    (0..n)
        .map(|_| Lesion {
            center_row: rng.random_range(inset..spec.height as f64 - inset),
            center_col: rng.random_range(inset..spec.width as f64 - inset),
            radius_rows: rng.random_range(spec.lesion_radius_min..=spec.lesion_radius_max),
            radius_cols: rng.random_range(spec.lesion_radius_min..=spec.lesion_radius_max),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        })
        .collect()
}

/// Generates one image of the requested class, deterministic in
/// `(spec, label, seed)`.
pub fn generate_wsi(spec: &GeneratorSpec, id: &str, label: Label, seed: u64) -> Result<GeneratedWsi> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lesions = match label {
        Label::Benign => vec![],
        Label::Malignant => sample_lesions(spec, &mut rng),
    };
    render_wsi(spec, id, label, &lesions, rng.random())
}

/// Renders an image from explicit lesion geometry.
pub fn render_wsi(spec: &GeneratorSpec, id: &str, label: Label, lesions: &[Lesion], seed: u64) -> Result<GeneratedWsi> {
    spec.validate()?;
    if label == Label::Benign && !lesions.is_empty() {
        return Err(Error::Spec("benign images cannot contain lesions".into()));
    }
    if label == Label::Malignant && lesions.is_empty() {
        return Err(Error::Spec("malignant images need at least one lesion".into()));
    }
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0f32, spec.noise_sigma.max(1e-9)).expect("valid sigma");
    let (ph1, ph2): (f32, f32) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
    let mut image = RgbImage::new(h, w);
    let mut background = vec![false; h * w];
    let mut lesion_mask = vec![false; h * w];
    let amp = spec.texture_amplitude;
    for row in 0..h {
        for col in 0..w {
            let i = row * w + col;
            let px = &mut image.pixels[i * 3..i * 3 + 3];
            if in_margin(spec, row, col) {
                background[i] = true;
                for p in px.iter_mut() {
                    *p = spec.background_level + noise.sample(&mut rng).abs() * 0.2;
                }
                continue;
            }
            let inside = lesions.iter().any(|l| l.contains(row, col));
            lesion_mask[i] = inside;
            let (y, x) = (row as f32, col as f32);
            let (base, tex) = if inside {
                // finer, blotchier texture
                (spec.malignant_color, (y * 0.21 + ph1).sin() * (x * 0.17 + ph2).sin())
            } else {
                (spec.benign_color, (y * 0.045 + ph1).sin() * (x * 0.035 + ph2).cos())
            };
            for (p, b) in px.iter_mut().zip(base) {
                *p = b + amp * tex + noise.sample(&mut rng);
            }
        }
    }
    // 8-bit quantization, so PNG round trips are lossless.
    for p in image.pixels.iter_mut() {
        *p = (p.clamp(0.0, 1.0) * 255.0).round() / 255.0;
    }
    let patch_labels = Some(patch_labels_from_mask(spec, &lesion_mask));
    Ok(GeneratedWsi {
        sample: WsiSample {
            id: id.to_string(),
            image,
            label,
            background_mask: background,
            patch_labels,
        },
        lesions: lesions.to_vec(),
        lesion_mask,
    })
}

/// Applies the coverage rule to every grid cell.
pub fn patch_labels_from_mask(spec: &GeneratorSpec, lesion_mask: &[bool]) -> Vec<Label> {
    let (rows, cols) = spec.grid();
    let ps = spec.patch_size;
    let mut out = Vec::with_capacity(rows * cols);
    for gr in 0..rows {
        for gc in 0..cols {
            let count: usize = (gr * ps..(gr + 1) * ps)
                .map(|r| lesion_mask[r * spec.width + gc * ps..r * spec.width + (gc + 1) * ps].iter().filter(|&&b| b).count())
                .sum();
            let frac = count as f64 / (ps * ps) as f64;
            out.push(if frac >= spec.coverage_threshold {
                Label::Malignant
            } else {
                Label::Benign
            });
        }
    }
    out
}

/// Distance between the mean color of lesion pixels and of normal tissue
/// pixels. `None` when either set is empty.
pub fn contrast_separation(g: &GeneratedWsi) -> Option<f64> {
    let mut sums = [[0.0f64; 3]; 2];
    let mut counts = [0usize; 2];
    for (i, (&bg, &les)) in g.sample.background_mask.iter().zip(&g.lesion_mask).enumerate() {
        if bg {
            continue;
        }
        let k = les as usize;
        counts[k] += 1;
        for (s, &p) in sums[k].iter_mut().zip(&g.sample.image.pixels[i * 3..i * 3 + 3]) {
            *s += p as f64;
        }
    }
    if counts.contains(&0) {
        return None;
    }
    let d2: f64 = (0..3)
        .map(|c| (sums[0][c] / counts[0] as f64 - sums[1][c] / counts[1] as f64).powi(2))
        .sum();
    Some(d2.sqrt())
}

/// Dataset sizes. The full preset mirrors 24 benign / 36 malignant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSize {
    pub benign: usize,
    pub malignant: usize,
}

impl DatasetSize {
    pub const FULL: Self = Self {
        benign: 24,
        malignant: 36,
    };
    pub const REDUCED: Self = Self {
        benign: 12,
        malignant: 18,
    };

    pub fn total(&self) -> usize {
        self.benign + self.malignant
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: Label,
    pub seed: u64,
    pub lesions: Vec<Lesion>,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub patch_labels: Vec<Label>,
    pub image_path: Option<String>,
    pub mask_path: Option<String>,
}

impl ManifestEntry {
    pub fn tiles(&self) -> usize {
        self.grid_rows * self.grid_cols
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub generator: GeneratorSpec,
    pub seed: u64,
    pub size: DatasetSize,
    pub patch_rule: String,
    pub total_tiles: usize,
    pub malignant_patches: usize,
    pub benign_patches: usize,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn labels(&self) -> Vec<Label> {
        self.entries.iter().map(|e| e.label).collect()
    }

    /// Re-renders entry `i`; bit-identical to the original generation.
    pub fn materialize(&self, i: usize) -> Result<GeneratedWsi> {
        let e = &self.entries[i];
        generate_wsi(&self.generator, &e.id, e.label, e.seed)
    }
}

/// Per-image seeds are drawn from one stream seeded by `seed`, so the
/// dataset is reproducible regardless of generation order.
pub fn generate_dataset(size: DatasetSize, spec: &GeneratorSpec, seed: u64) -> Result<DatasetManifest> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan: Vec<(String, Label, u64)> = (0..size.total())
        .map(|i| {
            let label = if i < size.benign {
                Label::Benign
            } else {
                Label::Malignant
            };
            (format!("wsi_{i:03}"), label, rng.random())
        })
        .collect();
    let (rows, cols) = spec.grid();
    let entries = parallel::map(&plan, |(id, label, s)| -> Result<ManifestEntry> {
        let g = generate_wsi(spec, id, *label, *s)?;
        Ok(ManifestEntry {
            id: id.clone(),
            label: *label,
            seed: *s,
            lesions: g.lesions,
            grid_rows: rows,
            grid_cols: cols,
            patch_labels: g.sample.patch_labels.unwrap_or_default(),
            image_path: None,
            mask_path: None,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let malignant_patches = entries
        .iter()
        .flat_map(|e| &e.patch_labels)
        .filter(|&&l| l == Label::Malignant)
        .count();
    let total_tiles = entries.iter().map(ManifestEntry::tiles).sum();
    Ok(DatasetManifest {
        generator: spec.clone(),
        seed,
        size,
        patch_rule: format!(
            "patch is malignant iff >= {:.0}% of its pixels lie inside a lesion",
            spec.coverage_threshold * 100.0
        ),
        total_tiles,
        malignant_patches,
        benign_patches: total_tiles - malignant_patches,
        entries,
    })
}
