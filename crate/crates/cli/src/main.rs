use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use patchfuse::cnn::CnnModel;
use patchfuse::config::RunConfig;
use patchfuse::eval::cv::{prepare_dataset, prepare_wsi, PreparedWsi};
use patchfuse::eval::train::{train_cnn, train_vit, CnnTrainConfig, Example, VitTrainConfig};
use patchfuse::eval::{cross_validate, make_folds, FoldPlan};
use patchfuse::fusion::{fuse, region_mean, FusionReport, PatchVerdict};
use patchfuse::imaging::{load_gray16, load_mask, load_rgb, save_gray16, save_mask, save_rgb};
use patchfuse::overlay::render_overlay;
use patchfuse::patch::{extract_patches, Label, PatchManifest, WsiSample};
use patchfuse::saliency::saliency_from_input;
use patchfuse::synth::{generate_dataset, DatasetManifest};
use patchfuse::vit::VitModel;
use patchfuse::weights::ParamSet;
use patchfuse::parallel;

#[derive(Parser)]
#[command(name = "patchfuse", version, about = "Saliency-fused patch classification of whole-surface images")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// key = value run configuration; defaults apply to missing keys
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; all cores when omitted
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Cross-validation fold to train on or evaluate
    #[arg(long, global = true, default_value_t = 0)]
    fold: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset
    Generate,
    /// Tile and filter every image, writing per-image patch manifests
    Tile(Data),
    /// Train the patch classifier on a fold's training images
    TrainVit(Data),
    /// Train the saliency CNN on a fold's training images
    TrainCnn(Data),
    /// Grad-CAM++ maps for the fold's test images
    Saliency(WithModels),
    /// Saliency-weighted fusion for the fold's test images
    Fuse(FuseArgs),
    /// Full cross-validation with CSV and JSON reports
    Evaluate(Evaluate),
    /// Overlay saliency and retained patch predictions on one image
    Render(RenderArgs),
}

#[derive(Args)]
struct Data {
    /// Dataset directory written by `generate`
    #[arg(long)]
    data: PathBuf,
    /// Restrict to one image id
    #[arg(long)]
    wsi: Option<String>,
}

#[derive(Args)]
struct WithModels {
    #[command(flatten)]
    data: Data,
    /// Directory holding vit.pfw and cnn.pfw
    #[arg(long)]
    models: PathBuf,
}

#[derive(Args)]
struct FuseArgs {
    #[command(flatten)]
    inner: WithModels,
    /// Directory written by `saliency`
    #[arg(long)]
    saliency: PathBuf,
}

#[derive(Args)]
struct Evaluate {
    /// Dataset directory; generated in memory from the config when omitted
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    wsi: String,
    #[arg(long)]
    saliency: PathBuf,
    /// Directory written by `fuse`
    #[arg(long)]
    fusion: PathBuf,
}

/// Files and directories created by this run, removed again on failure.
#[derive(Default)]
struct Outputs {
    files: Vec<PathBuf>,
    dirs: Vec<PathBuf>,
}

impl Outputs {
    fn dir(&mut self, path: &Path) -> Result<PathBuf> {
        let mut missing = vec![];
        let mut cur = Some(path);
        while let Some(p) = cur.filter(|p| !p.as_os_str().is_empty() && !p.exists()) {
            missing.push(p.to_path_buf());
            cur = p.parent();
        }
        fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))?;
        if let Some(top) = missing.pop() {
            self.dirs.push(top);
        }
        Ok(path.to_path_buf())
    }

    fn file(&mut self, path: PathBuf) -> PathBuf {
        self.files.push(path.clone());
        path
    }

    fn write(&mut self, path: PathBuf, body: impl AsRef<[u8]>) -> Result<()> {
        let path = self.file(path);
        fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
    }

    fn rollback(&self) {
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        for d in self.dirs.iter().rev() {
            let _ = fs::remove_dir_all(d);
        }
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        bail!("missing {what}: {}", path.display());
    }
    Ok(())
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            require(p, "config file")?;
            RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Dataset {
    dir: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        require(&path, "dataset manifest")?;
        let text = fs::read_to_string(&path)?;
        let manifest = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    fn index_of(&self, id: &str) -> Result<usize> {
        self.manifest
            .entries
            .iter()
            .position(|e| e.id == id)
            .with_context(|| format!("image `{id}` is not in the dataset manifest"))
    }

    fn sample(&self, i: usize) -> Result<WsiSample> {
        let e = &self.manifest.entries[i];
        let image_path = self.dir.join(e.image_path.as_deref().unwrap_or_default());
        let mask_path = self.dir.join(e.mask_path.as_deref().unwrap_or_default());
        require(&image_path, "image")?;
        require(&mask_path, "background mask")?;
        let image = load_rgb(&image_path)?;
        let (h, w, mask) = load_mask(&mask_path)?;
        if (h, w) != (image.height, image.width) {
            bail!("mask {} does not match its image size", mask_path.display());
        }
        Ok(WsiSample {
            id: e.id.clone(),
            image,
            label: e.label,
            background_mask: mask,
            patch_labels: Some(e.patch_labels.clone()),
        })
    }

    fn prepare(&self, idx: &[usize], cfg: &RunConfig) -> Result<Vec<PreparedWsi>> {
        parallel::map(idx, |&i| -> Result<PreparedWsi> { Ok(prepare_wsi(&self.sample(i)?, cfg)?) })
            .into_iter()
            .collect()
    }

    fn plan(&self, cfg: &RunConfig) -> Result<FoldPlan> {
        Ok(make_folds(&self.manifest.labels(), cfg.cv.folds, cfg.cv.val_fraction, cfg.seed)?)
    }

    /// The selected image, or the test images of `fold`.
    fn targets(&self, cfg: &RunConfig, wsi: Option<&str>, fold: usize) -> Result<Vec<usize>> {
        match wsi {
            Some(id) => Ok(vec![self.index_of(id)?]),
            None => {
                let plan = self.plan(cfg)?;
                let f = plan.folds.get(fold).with_context(|| format!("fold {fold} of {}", plan.k))?;
                Ok(f.test.clone())
            }
        }
    }
}

fn generate(cfg: &RunConfig, out: &mut Outputs, dir: &Path) -> Result<()> {
    let mut manifest = generate_dataset(cfg.dataset, &cfg.generator, cfg.seed)?;
    let images = out.dir(&dir.join("images"))?;
    let masks = out.dir(&dir.join("masks"))?;
    let mut written = vec![];
    for e in &mut manifest.entries {
        e.image_path = Some(format!("images/{}.png", e.id));
        e.mask_path = Some(format!("masks/{}.png", e.id));
        written.push(out.file(images.join(format!("{}.png", e.id))));
        written.push(out.file(masks.join(format!("{}.png", e.id))));
    }
    let results = parallel::map_range(manifest.entries.len(), |i| -> patchfuse::Result<()> {
        let g = manifest.materialize(i)?;
        let s = &g.sample;
        save_rgb(&written[2 * i], &s.image)?;
        save_mask(&written[2 * i + 1], s.height(), s.width(), &s.background_mask)
    });
    for r in results {
        r?;
    }
    out.write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    log::info!("generated {} images in {}", manifest.entries.len(), dir.display());
    Ok(())
}

fn tile(cfg: &RunConfig, args: &Data, out: &mut Outputs, dir: &Path) -> Result<()> {
    let ds = Dataset::open(&args.data)?;
    let idx = match &args.wsi {
        Some(id) => vec![ds.index_of(id)?],
        None => (0..ds.manifest.entries.len()).collect(),
    };
    let patches = out.dir(&dir.join("patches"))?;
    for i in idx {
        let s = ds.sample(i)?;
        let records = extract_patches(&s, &cfg.patch)?;
        let (rows, cols) = s.grid(cfg.patch.patch_size);
        let m = PatchManifest {
            wsi_id: s.id.clone(),
            height: s.height(),
            width: s.width(),
            patch_size: cfg.patch.patch_size,
            grid_rows: rows,
            grid_cols: cols,
            tiles_before_filter: rows * cols,
            records,
        };
        out.write(patches.join(format!("{}.json", s.id)), serde_json::to_string_pretty(&m)?)?;
    }
    Ok(())
}

fn patch_examples(data: &[PreparedWsi]) -> Vec<Example<'_>> {
    data.iter()
        .flat_map(|w| &w.patches)
        .filter_map(|p| {
            p.label.map(|label| Example {
                input: &p.input,
                label,
            })
        })
        .collect()
}

fn wsi_examples(data: &[PreparedWsi]) -> Vec<Example<'_>> {
    data.iter()
        .map(|w| Example {
            input: &w.cnn_input,
            label: w.label,
        })
        .collect()
}

fn train(cfg: &RunConfig, args: &Data, fold: usize, cnn: bool, out: &mut Outputs, dir: &Path) -> Result<()> {
    let ds = Dataset::open(&args.data)?;
    let plan = ds.plan(cfg)?;
    let f = plan.folds.get(fold).with_context(|| format!("fold {fold} of {}", plan.k))?;
    let train_set = ds.prepare(&f.train, cfg)?;
    let val_set = ds.prepare(&f.val, cfg)?;
    out.dir(dir)?;
    if cnn {
        let tc = CnnTrainConfig {
            seed: cfg.seed ^ cfg.cnn_train.seed,
            ..cfg.cnn_train.clone()
        };
        let (model, log) = train_cnn(&cfg.cnn, &tc, &wsi_examples(&train_set), &wsi_examples(&val_set))?;
        let path = out.file(dir.join("cnn.pfw"));
        model.to_param_set()?.save(&path)?;
        out.write(dir.join("cnn_log.json"), serde_json::to_string_pretty(&log)?)?;
    } else {
        let tc = VitTrainConfig {
            seed: cfg.seed ^ cfg.vit_train.seed,
            ..cfg.vit_train.clone()
        };
        let (model, log) = train_vit(&cfg.vit, &tc, &patch_examples(&train_set), &patch_examples(&val_set))?;
        let path = out.file(dir.join("vit.pfw"));
        model.params()?.save(&path)?;
        out.write(dir.join("vit_log.json"), serde_json::to_string_pretty(&log)?)?;
    }
    Ok(())
}

fn load_cnn(cfg: &RunConfig, models: &Path) -> Result<CnnModel> {
    let path = models.join("cnn.pfw");
    require(&path, "CNN weights")?;
    Ok(CnnModel::from_param_set(cfg.cnn.clone(), ParamSet::load(&path)?)?)
}

fn load_vit(cfg: &RunConfig, models: &Path) -> Result<VitModel> {
    let path = models.join("vit.pfw");
    require(&path, "ViT weights")?;
    Ok(VitModel::with_params(cfg.vit.clone(), ParamSet::load(&path)?)?)
}

fn saliency(cfg: &RunConfig, args: &WithModels, fold: usize, out: &mut Outputs, dir: &Path) -> Result<()> {
    let ds = Dataset::open(&args.data.data)?;
    let cnn = load_cnn(cfg, &args.models)?;
    let idx = ds.targets(cfg, args.data.wsi.as_deref(), fold)?;
    let maps = out.dir(&dir.join("saliency"))?;
    for i in idx {
        let s = ds.sample(i)?;
        let input = s.image.resized(cfg.cnn.input_size, cfg.cnn.input_size);
        let map = saliency_from_input(&cnn, &s.id, &input, s.height(), s.width(), None)?;
        let png = out.file(maps.join(format!("{}.png", s.id)));
        save_gray16(&png, map.height, map.width, &map.values)?;
        out.write(maps.join(format!("{}.json", s.id)), serde_json::to_string_pretty(&map.sidecar())?)?;
    }
    Ok(())
}

fn load_map(dir: &Path, id: &str) -> Result<(usize, usize, Vec<f64>)> {
    let path = dir.join(format!("{id}.png"));
    require(&path, "saliency map")?;
    Ok(load_gray16(&path)?)
}

fn fuse_cmd(cfg: &RunConfig, args: &FuseArgs, fold: usize, out: &mut Outputs, dir: &Path) -> Result<()> {
    let inner = &args.inner;
    let ds = Dataset::open(&inner.data.data)?;
    let vit = load_vit(cfg, &inner.models)?;
    let idx = ds.targets(cfg, inner.data.wsi.as_deref(), fold)?;
    let reports = out.dir(&dir.join("fusion"))?;
    for i in idx {
        let w = prepare_wsi(&ds.sample(i)?, cfg)?;
        let (h, wd, map) = load_map(&args.saliency, &w.id)?;
        if (h, wd) != (w.height, w.width) {
            bail!("saliency map for `{}` is {h}x{wd}, image is {}x{}", w.id, w.height, w.width);
        }
        let mut verdicts = vec![];
        let mut regions = vec![];
        for p in &w.patches {
            let region = p.region.clipped(h, wd);
            let (_, class) = vit.classify(&p.input)?;
            let score = region_mean(&map, h, wd, &region)?;
            verdicts.push(PatchVerdict::new(p.id(), Label::from_index(class), score));
            regions.push(region);
        }
        let outcome = fuse(&verdicts, &cfg.fusion)?;
        let report = FusionReport::new(&w.id, &cfg.fusion, &verdicts, &regions, &outcome);
        log::info!("{}: fused {:?} (truth {:?})", w.id, outcome.label, w.label);
        out.write(reports.join(format!("{}.json", w.id)), serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn evaluate(cfg: &RunConfig, args: &Evaluate, out: &mut Outputs, dir: &Path) -> Result<()> {
    let data = match &args.data {
        Some(d) => {
            let ds = Dataset::open(d)?;
            ds.prepare(&(0..ds.manifest.entries.len()).collect::<Vec<_>>(), cfg)?
        }
        None => prepare_dataset(&generate_dataset(cfg.dataset, &cfg.generator, cfg.seed)?, cfg)?,
    };
    let report = cross_validate(cfg, &data)?;
    out.dir(dir)?;
    for name in ["results.csv", "all_methods.csv", "report.json", "config.txt"] {
        out.file(dir.join(name));
    }
    report.write(dir, cfg)?;
    if let Some(m) = report.method("patch_fusion") {
        log::info!("pooled fused accuracy {:?}", m.aggregate.accuracy);
    }
    Ok(())
}

fn render(args: &RenderArgs, out: &mut Outputs, dir: &Path) -> Result<()> {
    let ds = Dataset::open(&args.data)?;
    let s = ds.sample(ds.index_of(&args.wsi)?)?;
    let (h, w, map) = load_map(&args.saliency, &s.id)?;
    if (h, w) != (s.height(), s.width()) {
        bail!("saliency map for `{}` does not match the image size", s.id);
    }
    let path = args.fusion.join(format!("{}.json", s.id));
    require(&path, "fusion report")?;
    let report: FusionReport = serde_json::from_str(&fs::read_to_string(&path)?)?;
    let outlines: Vec<_> = report
        .patches
        .iter()
        .filter(|p| p.retained)
        .map(|p| (p.region, p.prediction))
        .collect();
    let img = render_overlay(&s.image, &map, &outlines);
    out.dir(dir)?;
    let png = out.file(dir.join(format!("{}_overlay.png", s.id)));
    save_rgb(&png, &img)?;
    Ok(())
}

fn run(cli: &Cli, out: &mut Outputs) -> Result<()> {
    let c = &cli.common;
    let cfg = load_config(c)?;
    let dir = c.out.as_path();
    out.dir(dir)?;
    match &cli.command {
        Command::Generate => generate(&cfg, out, dir)?,
        Command::Tile(a) => tile(&cfg, a, out, dir)?,
        Command::TrainVit(a) => train(&cfg, a, c.fold, false, out, dir)?,
        Command::TrainCnn(a) => train(&cfg, a, c.fold, true, out, dir)?,
        Command::Saliency(a) => saliency(&cfg, a, c.fold, out, dir)?,
        Command::Fuse(a) => fuse_cmd(&cfg, a, c.fold, out, dir)?,
        Command::Evaluate(a) => evaluate(&cfg, a, out, dir)?,
        Command::Render(a) => render(a, out, dir)?,
    }
    // evaluate echoes its config with the reports
    if !matches!(cli.command, Command::Evaluate(_)) {
        out.write(dir.join("config.txt"), cfg.to_kv())?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PATCHFUSE_LOG", "error")).init();
    let mut out = Outputs::default();
    let result = parallel::with_threads(cli.common.threads, || run(&cli, &mut out));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            out.rollback();
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
