//! Vision-transformer patch classifier.
//!
//! A patch of `H×W×C` is cut into `N = H·W/P²` sub-patches; each is
//! flattened and projected by `E` to dimension `D`, a class token is
//! prepended and positional embeddings added. `L` pre-norm encoder layers
//! follow:
//!
//! ```text
//! z' = MSA(LN(z)) + z
//! z  = MLP(LN(z')) + z'
//! ```
//!
//! and the final class-token row goes through a last layer norm and a single
//! linear head.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::weights::ParamSet;
use crate::{Error, Result, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitConfig {
    pub image_size: usize,
    pub sub_patch: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub classes: usize,
    pub ln_eps: f64,
}

impl Default for VitConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl VitConfig {
    /// Small model trained from scratch in tests and the synthetic experiment.
    pub fn desk() -> Self {
        Self {
            image_size: 32,
            sub_patch: 8,
            channels: 3,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            mlp_hidden: 128,
            classes: 2,
            ln_eps: 1e-6,
        }
    }

    /// ViT-B/16 geometry.
    pub fn base16() -> Self {
        Self {
            image_size: 224,
            sub_patch: 16,
            channels: 3,
            embed_dim: 768,
            depth: 12,
            heads: 12,
            mlp_hidden: 3072,
            classes: 2,
            ln_eps: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.sub_patch == 0 || !self.image_size.is_multiple_of(self.sub_patch) {
            return bad(format!(
                "image size {} is not a multiple of sub-patch size {}",
                self.image_size, self.sub_patch
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.channels == 0 || self.classes == 0 || self.mlp_hidden == 0 || self.embed_dim == 0 {
            return bad("channels, classes, embed dim and MLP width must be positive".into());
        }
        if self.ln_eps <= 0.0 {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }

    /// Number of sub-patches `N = H·W/P²`.
    pub fn num_patches(&self) -> usize {
        (self.image_size / self.sub_patch).pow(2)
    }

    /// Encoder sequence length, `N + 1`.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.sub_patch * self.sub_patch * self.channels
    }

    pub fn input_len(&self) -> usize {
        self.image_size * self.image_size * self.channels
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (k, v) in [
            ("image_size", self.image_size.to_string()),
            ("sub_patch", self.sub_patch.to_string()),
            ("channels", self.channels.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("depth", self.depth.to_string()),
            ("heads", self.heads.to_string()),
            ("mlp_hidden", self.mlp_hidden.to_string()),
            ("classes", self.classes.to_string()),
            ("ln_eps", self.ln_eps.to_string()),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = Self::desk();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |m: &str| Error::ConfigParse {
                line: i + 1,
                message: m.to_string(),
            };
            let (k, v) = line.split_once('=').ok_or_else(|| err("expected key=value"))?;
            let (k, v) = (k.trim(), v.trim());
            let int = || v.parse::<usize>().map_err(|_| err(&format!("`{v}` is not an integer")));
            match k {
                "image_size" => cfg.image_size = int()?,
                "sub_patch" => cfg.sub_patch = int()?,
                "channels" => cfg.channels = int()?,
                "embed_dim" => cfg.embed_dim = int()?,
                "depth" => cfg.depth = int()?,
                "heads" => cfg.heads = int()?,
                "mlp_hidden" => cfg.mlp_hidden = int()?,
                "classes" => cfg.classes = int()?,
                "ln_eps" => cfg.ln_eps = v.parse().map_err(|_| err(&format!("`{v}` is not a number")))?,
                _ => return Err(err(&format!("unknown key `{k}`"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every parameter name with its shape, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (d, h) = (self.embed_dim, self.mlp_hidden);
        let mut v = vec![
            ("patch_embed.weight".to_string(), vec![self.patch_dim(), d]),
            ("cls_token".to_string(), vec![1, d]),
            ("pos_embed".to_string(), vec![self.seq_len(), d]),
        ];
        for l in 0..self.depth {
            let p = |s: &str| format!("blocks.{l}.{s}");
            v.extend([
                (p("ln1.gamma"), vec![d]),
                (p("ln1.beta"), vec![d]),
                (p("attn.qkv.weight"), vec![d, 3 * d]),
                (p("attn.qkv.bias"), vec![3 * d]),
                (p("attn.proj.weight"), vec![d, d]),
                (p("attn.proj.bias"), vec![d]),
                (p("ln2.gamma"), vec![d]),
                (p("ln2.beta"), vec![d]),
                (p("mlp.fc1.weight"), vec![d, h]),
                (p("mlp.fc1.bias"), vec![h]),
                (p("mlp.fc2.weight"), vec![h, d]),
                (p("mlp.fc2.bias"), vec![d]),
            ]);
        }
        v.extend([
            ("norm.gamma".to_string(), vec![d]),
            ("norm.beta".to_string(), vec![d]),
            ("head.weight".to_string(), vec![d, self.classes]),
            ("head.bias".to_string(), vec![self.classes]),
        ]);
        v
    }
}

/// Truncated normal (σ = 0.02, cut at ±2σ) for weights and positional
/// embeddings; zeros for biases and the class token; ones for norm gains.
pub fn init_params(cfg: &VitConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.02).expect("valid sigma");
    let mut set = ParamSet::new();
    for (name, shape) in cfg.param_shapes() {
        let t = if name.ends_with(".gamma") {
            Tensor::ones(&shape)
        } else if name.ends_with(".bias") || name.ends_with(".beta") || name == "cls_token" {
            Tensor::zeros(&shape)
        } else {
            Tensor::from_fn(&shape, |_| loop {
                let v: f64 = normal.sample(&mut rng);
                if v.abs() <= 0.04 {
                    break v;
                }
            })
        };
        set.insert(name, t);
    }
    Ok(set)
}

/// Checks that `params` holds exactly the tensors `cfg` needs, with the
/// right shapes.
pub fn check_params(cfg: &VitConfig, params: &ParamSet) -> Result<()> {
    for (name, shape) in cfg.param_shapes() {
        let t = params.require(&name)?;
        if t.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "vit parameter",
                lhs: shape,
                rhs: t.shape().to_vec(),
            });
        }
    }
    Ok(())
}

/// Parameters placed on a tape, looked up by name.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn bind(tape: &Tape, params: &ParamSet, requires_grad: bool) -> Self {
        let vars = params
            .iter()
            .map(|(n, t)| (n.to_string(), tape.leaf(t.clone(), requires_grad)))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` was not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Rearranges an `H×W×C` input into `N×(P²·C)` flattened sub-patches,
/// row-major over the sub-patch grid.
pub fn flatten_sub_patches(cfg: &VitConfig, input: &[f64]) -> Result<Tensor> {
    if input.len() != cfg.input_len() {
        return Err(Error::Config(format!(
            "input has {} values, expected {}x{}x{}",
            input.len(),
            cfg.image_size,
            cfg.image_size,
            cfg.channels
        )));
    }
    let (s, p, c) = (cfg.image_size, cfg.sub_patch, cfg.channels);
    let g = s / p;
    let mut data = Vec::with_capacity(input.len());
    for gr in 0..g {
        for gc in 0..g {
            for dy in 0..p {
                let row = (gr * p + dy) * s + gc * p;
                data.extend_from_slice(&input[row * c..(row + p) * c]);
            }
        }
    }
    Tensor::new(&[g * g, cfg.patch_dim()], data)
}

/// Builds `z₀ = [class; vec(s_k)·E] + E_pos`, shape `(N+1)×D`.
pub fn embed(tape: &Tape, cfg: &VitConfig, p: &Bound, input: &[f64]) -> Result<Var> {
    let flat = tape.constant(flatten_sub_patches(cfg, input)?);
    let tokens = tape.matmul(flat, p.get("patch_embed.weight"))?;
    let seq = tape.concat(&[p.get("cls_token"), tokens], 0)?;
    tape.add(seq, p.get("pos_embed"))
}

/// One pre-norm encoder layer. When `attention` is given, each head's
/// `(N+1)×(N+1)` attention matrix is appended to it.
pub fn encoder_layer(
    tape: &Tape,
    cfg: &VitConfig,
    p: &Bound,
    layer: usize,
    z: Var,
    mut attention: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let name = |s: &str| format!("blocks.{layer}.{s}");
    let (d, heads) = (cfg.embed_dim, cfg.heads);
    let dh = d / heads;

    let x = tape.layer_norm(z, p.get(&name("ln1.gamma")), p.get(&name("ln1.beta")), cfg.ln_eps)?;
    let qkv = tape.matmul(x, p.get(&name("attn.qkv.weight")))?;
    let qkv = tape.add(qkv, p.get(&name("attn.qkv.bias")))?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.narrow(qkv, 1, h * dh, dh)?;
        let k = tape.narrow(qkv, 1, d + h * dh, dh)?;
        let v = tape.narrow(qkv, 1, 2 * d + h * dh, dh)?;
        let kt = tape.transpose(k)?;
        let scores = tape.scale(tape.matmul(q, kt)?, scale);
        let attn = tape.softmax(scores, 1)?;
        if let Some(a) = attention.as_deref_mut() {
            a.push(attn);
        }
        outs.push(tape.matmul(attn, v)?);
    }
    let merged = if heads == 1 { outs[0] } else { tape.concat(&outs, 1)? };
    let msa = tape.matmul(merged, p.get(&name("attn.proj.weight")))?;
    let msa = tape.add(msa, p.get(&name("attn.proj.bias")))?;
    let z1 = tape.add(msa, z)?;

    let x = tape.layer_norm(z1, p.get(&name("ln2.gamma")), p.get(&name("ln2.beta")), cfg.ln_eps)?;
    let hdn = tape.matmul(x, p.get(&name("mlp.fc1.weight")))?;
    let hdn = tape.gelu(tape.add(hdn, p.get(&name("mlp.fc1.bias")))?);
    let out = tape.matmul(hdn, p.get(&name("mlp.fc2.weight")))?;
    let out = tape.add(out, p.get(&name("mlp.fc2.bias")))?;
    tape.add(out, z1)
}

/// Output of a full forward pass.
pub struct Forward {
    /// `1×classes` logits.
    pub logits: Var,
    /// Encoder output, `(N+1)×D`.
    pub encoded: Var,
    pub attention: Vec<Var>,
}

pub fn forward(tape: &Tape, cfg: &VitConfig, p: &Bound, input: &[f64], capture_attention: bool) -> Result<Forward> {
    let mut attention = Vec::new();
    let mut z = embed(tape, cfg, p, input)?;
    for l in 0..cfg.depth {
        let sink = if capture_attention { Some(&mut attention) } else { None };
        z = encoder_layer(tape, cfg, p, l, z, sink)?;
    }
    let cls = tape.narrow(z, 0, 0, 1)?;
    let cls = tape.layer_norm(cls, p.get("norm.gamma"), p.get("norm.beta"), cfg.ln_eps)?;
    let logits = tape.matmul(cls, p.get("head.weight"))?;
    let logits = tape.add(logits, p.get("head.bias"))?;
    Ok(Forward {
        logits,
        encoded: z,
        attention,
    })
}

/// Maps `[0, 1]` pixel values to `[-1, 1]`.
pub fn normalize_input(x: &[f64]) -> Vec<f64> {
    x.iter().map(|v| (v - 0.5) / 0.5).collect()
}

/// Index of the largest value; ties go to the lower index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// A configured ViT, possibly still without weights.
#[derive(Clone, Debug)]
pub struct VitModel {
    pub config: VitConfig,
    params: Option<ParamSet>,
}

impl VitModel {
    pub fn uninit(config: VitConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, params: None })
    }

    pub fn init(config: VitConfig, seed: u64) -> Result<Self> {
        let params = init_params(&config, seed)?;
        Ok(Self {
            config,
            params: Some(params),
        })
    }

    pub fn with_params(config: VitConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        check_params(&config, &params)?;
        Ok(Self {
            config,
            params: Some(params),
        })
    }

    pub fn params(&self) -> Result<&ParamSet> {
        self.params.as_ref().ok_or(Error::Uninitialized("ViT parameters"))
    }

    pub fn params_mut(&mut self) -> Result<&mut ParamSet> {
        self.params.as_mut().ok_or(Error::Uninitialized("ViT parameters"))
    }

    pub fn logits(&self, input: &[f64]) -> Result<Vec<f64>> {
        let params = self.params()?;
        let tape = Tape::inference();
        let bound = Bound::bind(&tape, params, false);
        let out = forward(&tape, &self.config, &bound, input, false)?;
        let logits = tape.value(out.logits).data().to_vec();
        Ok(logits)
    }

    /// `(logits, predicted class)` for one patch input.
    pub fn classify(&self, input: &[f64]) -> Result<(Vec<f64>, usize)> {
        let logits = self.logits(input)?;
        let class = argmax(&logits);
        Ok((logits, class))
    }

    /// Predicted classes for many inputs, evaluated in parallel.
    pub fn classify_many(&self, inputs: &[&[f64]]) -> Result<Vec<usize>> {
        self.params()?;
        crate::parallel::map(inputs, |x| self.classify(x).map(|(_, c)| c))
            .into_iter()
            .collect()
    }
}
