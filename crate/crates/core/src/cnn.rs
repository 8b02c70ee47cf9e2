//! Small convolutional WSI classifier.
//!
//! Three `conv3×3 → batch norm → ReLU → 2×2 average pool` blocks, a final
//! batch norm whose output is the saliency hook, global average pooling,
//! dropout and a linear layer to the class logits.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{NormMode, RunningStats, Tape, Var};
use crate::vit::{argmax, Bound};
use crate::weights::ParamSet;
use crate::{Error, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnConfig {
    /// Side of the square input the WSI is resized to.
    pub input_size: usize,
    pub block_channels: [usize; 3],
    pub dropout: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    pub classes: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            block_channels: [8, 16, 16],
            dropout: 0.4,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            classes: 2,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size < 8 || !self.input_size.is_multiple_of(8) {
            return Err(Error::Config(format!(
                "CNN input size {} must be a positive multiple of 8",
                self.input_size
            )));
        }
        if self.block_channels.contains(&0) || self.classes == 0 {
            return Err(Error::Config("CNN channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Channel count `Q` of the hooked feature maps.
    pub fn feature_channels(&self) -> usize {
        self.block_channels[2]
    }

    /// Side of the hooked feature maps.
    pub fn feature_size(&self) -> usize {
        self.input_size / 8
    }

    fn norms(&self) -> [(&'static str, usize); 4] {
        let c = self.block_channels;
        [("bn1", c[0]), ("bn2", c[1]), ("bn3", c[2]), ("bn_final", c[2])]
    }
}

/// Converts channel-interleaved `H×W×C` to planar `C×H×W`.
pub fn to_planar(hwc: &[f64], h: usize, w: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; hwc.len()];
    for i in 0..h * w {
        for ch in 0..c {
            out[ch * h * w + i] = hwc[i * c + ch];
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct CnnModel {
    pub config: CnnConfig,
    params: Option<ParamSet>,
    /// Running statistics for `bn1`, `bn2`, `bn3`, `bn_final`.
    pub stats: Vec<RunningStats>,
}

impl CnnModel {
    pub fn uninit(config: CnnConfig) -> Result<Self> {
        config.validate()?;
        let stats = config
            .norms()
            .iter()
            .map(|&(_, c)| RunningStats::new(c, config.bn_momentum))
            .collect();
        Ok(Self {
            config,
            params: None,
            stats,
        })
    }

    /// He-normal convolution kernels, unit norm gains, a N(0, 0.01) head.
    pub fn init(config: CnnConfig, seed: u64) -> Result<Self> {
        let mut model = Self::uninit(config)?;
        let cfg = &model.config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut c_in = 3;
        for (b, &c_out) in cfg.block_channels.iter().enumerate() {
            let fan_in = (c_in * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid sigma");
            params.insert(
                format!("conv{}.weight", b + 1),
                Tensor::from_fn(&[c_out, c_in, 3, 3], |_| normal.sample(&mut rng)),
            );
            c_in = c_out;
        }
        for (name, c) in cfg.norms() {
            params.insert(format!("{name}.gamma"), Tensor::ones(&[c]));
            params.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
        }
        let normal = Normal::new(0.0, 0.01).expect("valid sigma");
        params.insert(
            "head.weight",
            Tensor::from_fn(&[cfg.feature_channels(), cfg.classes], |_| normal.sample(&mut rng)),
        );
        params.insert("head.bias", Tensor::zeros(&[cfg.classes]));
        model.params = Some(params);
        Ok(model)
    }

    pub fn params(&self) -> Result<&ParamSet> {
        self.params.as_ref().ok_or(Error::Uninitialized("CNN parameters"))
    }

    pub fn params_mut(&mut self) -> Result<&mut ParamSet> {
        self.params.as_mut().ok_or(Error::Uninitialized("CNN parameters"))
    }

    /// Trainable tensors plus running statistics, for persistence.
    pub fn to_param_set(&self) -> Result<ParamSet> {
        let mut set = self.params()?.clone();
        for ((name, _), s) in self.config.norms().iter().zip(&self.stats) {
            let c = s.channels();
            set.insert(format!("{name}.running_mean"), Tensor::new(&[c], s.mean.clone())?);
            set.insert(format!("{name}.running_var"), Tensor::new(&[c], s.var.clone())?);
            set.insert(format!("{name}.running_updates"), Tensor::scalar(s.updates as f64));
        }
        Ok(set)
    }

    pub fn from_param_set(config: CnnConfig, mut set: ParamSet) -> Result<Self> {
        let mut model = Self::uninit(config)?;
        let mut params = ParamSet::new();
        for (&(name, _), s) in model.config.norms().iter().zip(model.stats.iter_mut()) {
            s.mean = set.require(&format!("{name}.running_mean"))?.data().to_vec();
            s.var = set.require(&format!("{name}.running_var"))?.data().to_vec();
            s.updates = set.require(&format!("{name}.running_updates"))?.item()? as u64;
        }
        for (name, t) in set.iter_mut() {
            if !name.contains(".running_") {
                params.insert(name, std::mem::replace(t, Tensor::scalar(0.0)));
            }
        }
        let reference = Self::init(model.config.clone(), 0)?;
        for (name, t) in reference.params()?.iter() {
            let got = params.require(name)?;
            if got.shape() != t.shape() {
                return Err(Error::Shape {
                    op: "cnn parameter",
                    lhs: t.shape().to_vec(),
                    rhs: got.shape().to_vec(),
                });
            }
        }
        model.params = Some(params);
        Ok(model)
    }

    /// Places a batch of `S×S×3` channel-interleaved images on the tape as
    /// an `N×3×S×S` constant.
    pub fn input(&self, tape: &Tape, images: &[&[f64]]) -> Result<Var> {
        let s = self.config.input_size;
        let mut data = Vec::with_capacity(images.len() * s * s * 3);
        for img in images {
            if img.len() != s * s * 3 {
                return Err(Error::Config(format!(
                    "CNN input has {} values, expected {s}x{s}x3",
                    img.len()
                )));
            }
            data.extend(to_planar(img, s, s, 3));
        }
        Ok(tape.constant(Tensor::new(&[images.len(), 3, s, s], data)?))
    }

    /// Convolutional trunk up to and including the final batch norm.
    /// Returns the hooked feature maps `N×Q×H_f×W_f`.
    pub fn features(&mut self, tape: &Tape, p: &Bound, x: Var, mode: NormMode) -> Result<Var> {
        let eps = self.config.bn_eps;
        let mut h = x;
        for b in 1..=3 {
            h = tape.conv2d(h, p.get(&format!("conv{b}.weight")), 1, 1)?;
            h = tape.batch_norm2d(
                h,
                p.get(&format!("bn{b}.gamma")),
                p.get(&format!("bn{b}.beta")),
                &mut self.stats[b - 1],
                mode,
                eps,
            )?;
            h = tape.relu(h);
            h = tape.avg_pool2(h)?;
        }
        tape.batch_norm2d(
            h,
            p.get("bn_final.gamma"),
            p.get("bn_final.beta"),
            &mut self.stats[3],
            mode,
            eps,
        )
    }

    /// Classifier on top of hooked features: pool, dropout, linear.
    pub fn head(
        &self,
        tape: &Tape,
        p: &Bound,
        features: Var,
        train: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let pooled = tape.global_avg_pool(features)?;
        let dropped = tape.dropout(pooled, self.config.dropout, train, rng)?;
        let logits = tape.matmul(dropped, p.get("head.weight"))?;
        tape.add(logits, p.get("head.bias"))
    }

    /// Inference-mode logits for one resized WSI (`S×S×3`).
    pub fn forward_wsi(&self, image: &[f64]) -> Result<Vec<f64>> {
        let params = self.params()?;
        let tape = Tape::inference();
        let bound = Bound::bind(&tape, params, false);
        let x = self.input(&tape, &[image])?;
        // Inference mode never touches the statistics; work on a copy so
        // `&self` suffices and concurrent callers are fine.
        let mut this = self.clone();
        let f = this.features(&tape, &bound, x, NormMode::Inference)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let logits = self.head(&tape, &bound, f, false, &mut rng)?;
        let out = tape.value(logits).data().to_vec();
        Ok(out)
    }

    pub fn predict(&self, image: &[f64]) -> Result<usize> {
        Ok(argmax(&self.forward_wsi(image)?))
    }
}
