//! Tiling whole-surface images into non-overlapping patches, background
//! filtering, and downsampling to model input size.

use serde::{Deserialize, Serialize};

use crate::imaging::{resize_bilinear, RgbImage};
use crate::{parallel, Error, Result};

pub const DEFAULT_PATCH_SIZE: usize = 400;
/// Mean channel intensity below which a pixel counts as background.
pub const DEFAULT_BACKGROUND_INTENSITY: f64 = 0.08;
/// Patches with a strictly larger background fraction are dropped.
pub const DEFAULT_MAX_BACKGROUND: f64 = 0.80;

/// Binary tissue label. Serialized as `0` / `1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            Label::Benign
        } else {
            Label::Malignant
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Label::Benign => Label::Malignant,
            Label::Malignant => Label::Benign,
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            0 => Ok(Label::Benign),
            1 => Ok(Label::Malignant),
            _ => Err(format!("label must be 0 or 1, got {v}")),
        }
    }
}

/// One whole-surface image with its labels.
#[derive(Clone, Debug)]
pub struct WsiSample {
    pub id: String,
    pub image: RgbImage,
    pub label: Label,
    /// Explicitly marked background, `height×width`, row-major.
    pub background_mask: Vec<bool>,
    /// Ground truth per grid cell, row-major over the padded grid.
    pub patch_labels: Option<Vec<Label>>,
}

impl WsiSample {
    pub fn height(&self) -> usize {
        self.image.height
    }

    pub fn width(&self) -> usize {
        self.image.width
    }

    /// `(rows, cols)` of the patch grid after padding up to whole patches.
    pub fn grid(&self, patch_size: usize) -> (usize, usize) {
        (
            self.height().div_ceil(patch_size),
            self.width().div_ceil(patch_size),
        )
    }

    /// Rows and columns of zero padding added on the bottom and right edges.
    pub fn padding(&self, patch_size: usize) -> (usize, usize) {
        let (r, c) = self.grid(patch_size);
        (r * patch_size - self.height(), c * patch_size - self.width())
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Region {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn bottom(&self) -> usize {
        self.top + self.height
    }

    pub fn right(&self) -> usize {
        self.left + self.width
    }

    /// Intersection with a `height×width` image anchored at the origin.
    pub fn clipped(&self, height: usize, width: usize) -> Region {
        let bottom = self.bottom().min(height);
        let right = self.right().min(width);
        Region {
            top: self.top.min(bottom),
            left: self.left.min(right),
            height: bottom.saturating_sub(self.top),
            width: right.saturating_sub(self.left),
        }
    }

    pub fn intersects(&self, other: &Region) -> bool {
        self.top < other.bottom()
            && other.top < self.bottom()
            && self.left < other.right()
            && other.left < self.right()
    }

    pub fn as_array(&self) -> [usize; 4] {
        [self.top, self.left, self.height, self.width]
    }
}

/// A full `size×size` tile cut from a WSI, before filtering.
#[derive(Clone, Debug)]
pub struct Tile {
    pub grid_row: usize,
    pub grid_col: usize,
    pub region: Region,
    pub size: usize,
    /// `size×size×3`; padding is zero.
    pub pixels: Vec<f32>,
    /// `size×size`; padding is background.
    pub background: Vec<bool>,
}

/// Cuts `wsi` into `ceil(H/size)·ceil(W/size)` tiles in row-major grid order.
///
/// Pixels beyond the image edge are zero and count as background. A pixel
/// inside the image is background when its mask bit is set or its mean
/// channel intensity is below `intensity_threshold`.
pub fn tile(wsi: &WsiSample, size: usize, intensity_threshold: f64) -> Result<Vec<Tile>> {
    if size == 0 {
        return Err(Error::InvalidArgument("patch size must be >= 1".into()));
    }
    if wsi.height() == 0 || wsi.width() == 0 {
        return Err(Error::EmptyInput("image has no pixels"));
    }
    let (rows, cols) = wsi.grid(size);
    let cells: Vec<(usize, usize)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).collect();
    Ok(parallel::map(&cells, |&(r, c)| cut_tile(wsi, r, c, size, intensity_threshold)))
}

fn cut_tile(wsi: &WsiSample, grid_row: usize, grid_col: usize, size: usize, threshold: f64) -> Tile {
    let (h, w) = (wsi.height(), wsi.width());
    let region = Region {
        top: grid_row * size,
        left: grid_col * size,
        height: size,
        width: size,
    };
    let mut pixels = vec![0.0f32; size * size * 3];
    let mut background = vec![true; size * size];
    let valid = region.clipped(h, w);
    for dy in 0..valid.height {
        let y = region.top + dy;
        for dx in 0..valid.width {
            let x = region.left + dx;
            let src = (y * w + x) * 3;
            let dst = dy * size + dx;
            let px = &wsi.image.pixels[src..src + 3];
            pixels[dst * 3..dst * 3 + 3].copy_from_slice(px);
            let mean = (px[0] as f64 + px[1] as f64 + px[2] as f64) / 3.0;
            background[dst] = wsi.background_mask[y * w + x] || mean < threshold;
        }
    }
    Tile {
        grid_row,
        grid_col,
        region,
        size,
        pixels,
        background,
    }
}

/// Share of a tile's pixels (padding included) that are background.
pub fn background_fraction(tile: &Tile) -> f64 {
    tile.background.iter().filter(|&&b| b).count() as f64 / tile.background.len() as f64
}

/// `true` unless the background fraction is strictly greater than `max`.
pub fn is_retained(fraction: f64, max: f64) -> bool {
    fraction <= max
}

/// Bilinear downsampling of an RGB `size×size` tile to `target×target`.
pub fn downsample(pixels: &[f32], size: usize, target: usize) -> Vec<f64> {
    assert!(target >= 1, "target size must be >= 1");
    let src: Vec<f64> = pixels.iter().map(|&v| v as f64).collect();
    resize_bilinear(&src, size, size, 3, target, target)
}

/// Writes tiles back onto a `height×width` canvas, ignoring padding.
pub fn reassemble(tiles: &[Tile], height: usize, width: usize) -> RgbImage {
    let mut img = RgbImage::new(height, width);
    for t in tiles {
        let valid = t.region.clipped(height, width);
        for dy in 0..valid.height {
            let dst = ((t.region.top + dy) * width + t.region.left) * 3;
            let src = dy * t.size * 3;
            img.pixels[dst..dst + valid.width * 3].copy_from_slice(&t.pixels[src..src + valid.width * 3]);
        }
    }
    img
}

/// A retained patch and the model input derived from it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchRecord {
    pub wsi_id: String,
    pub grid_row: usize,
    pub grid_col: usize,
    pub region: Region,
    pub background_fraction: f64,
    pub label: Option<Label>,
    /// `input_size×input_size×3`, channel-interleaved.
    #[serde(skip)]
    pub input: Vec<f64>,
}

impl PatchRecord {
    pub fn id(&self) -> String {
        format!("{}_r{}c{}", self.wsi_id, self.grid_row, self.grid_col)
    }
}

/// Tiling and filtering parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchConfig {
    pub patch_size: usize,
    pub input_size: usize,
    pub background_intensity: f64,
    pub max_background: f64,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            patch_size: DEFAULT_PATCH_SIZE,
            input_size: 224,
            background_intensity: DEFAULT_BACKGROUND_INTENSITY,
            max_background: DEFAULT_MAX_BACKGROUND,
        }
    }
}

/// Tiles, filters and downsamples one WSI.
pub fn extract_patches(wsi: &WsiSample, cfg: &PatchConfig) -> Result<Vec<PatchRecord>> {
    let tiles = tile(wsi, cfg.patch_size, cfg.background_intensity)?;
    let (_, cols) = wsi.grid(cfg.patch_size);
    let kept: Vec<&Tile> = tiles
        .iter()
        .filter(|t| is_retained(background_fraction(t), cfg.max_background))
        .collect();
    Ok(parallel::map(&kept, |t| PatchRecord {
        wsi_id: wsi.id.clone(),
        grid_row: t.grid_row,
        grid_col: t.grid_col,
        region: t.region,
        background_fraction: background_fraction(t),
        label: wsi
            .patch_labels
            .as_ref()
            .map(|l| l[t.grid_row * cols + t.grid_col]),
        input: downsample(&t.pixels, t.size, cfg.input_size),
    }))
}

/// Per-WSI patch manifest as written to disk.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatchManifest {
    pub wsi_id: String,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub tiles_before_filter: usize,
    pub records: Vec<PatchRecord>,
}
