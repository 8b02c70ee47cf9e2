//! Training loops for the patch ViT and the saliency CNN.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{cosine_lr, Adam, Sgd};
use crate::autograd::{NormMode, Tape};
use crate::cnn::{CnnConfig, CnnModel};
use crate::patch::Label;
use crate::vit::{self, Bound, VitConfig, VitModel};
use crate::weights::ParamSet;
use crate::{parallel, Error, Result, Tensor};

/// One labeled model input.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub input: &'a [f64],
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VitTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for VitTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            lr: 3e-4,
            momentum: 0.9,
            batch_size: 8,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CnnTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
}

impl Default for CnnTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-4,
            batch_size: 4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
        }
    }
}

/// Per-epoch history. `best_epoch` indexes the returned checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub train_loss: Vec<f64>,
    pub val_accuracy: Vec<Option<f64>>,
    pub best_epoch: usize,
}

fn zeros_like(params: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (n, t) in params.iter() {
        out.insert(n, Tensor::zeros(t.shape()));
    }
    out
}

fn read_grads(tape: &Tape, bound: &Bound, params: &ParamSet) -> ParamSet {
    let mut out = ParamSet::new();
    for (n, t) in params.iter() {
        let g = tape.grad(bound.get(n)).unwrap_or_else(|| Tensor::zeros(t.shape()));
        out.insert(n, g);
    }
    out
}

/// Mean cross-entropy gradient over `batch`, one tape per sample, summed in
/// input order.
pub fn vit_gradients(cfg: &VitConfig, params: &ParamSet, batch: &[Example]) -> Result<(ParamSet, f64)> {
    if batch.is_empty() {
        return Err(Error::EmptyInput("ViT batch"));
    }
    let per_sample = parallel::map(batch, |ex| -> Result<(ParamSet, f64)> {
        let tape = Tape::new();
        let bound = Bound::bind(&tape, params, true);
        let out = vit::forward(&tape, cfg, &bound, ex.input, false)?;
        let loss = tape.cross_entropy(out.logits, &[ex.label.index()])?;
        tape.backward(loss)?;
        let value = tape.value(loss).item()?;
        Ok((read_grads(&tape, &bound, params), value))
    });
    let mut total = zeros_like(params);
    let mut loss = 0.0;
    for r in per_sample {
        let (g, l) = r?;
        loss += l;
        for ((_, acc), (_, g)) in total.iter_mut().zip(g.iter()) {
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for (_, t) in total.iter_mut() {
        t.data_mut().iter_mut().for_each(|v| *v *= scale);
    }
    Ok((total, loss * scale))
}

/// Fraction of `examples` the ViT classifies correctly; `None` when empty.
pub fn vit_accuracy(model: &VitModel, examples: &[Example]) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let inputs: Vec<&[f64]> = examples.iter().map(|e| e.input).collect();
    let preds = model.classify_many(&inputs)?;
    let correct = preds
        .iter()
        .zip(examples)
        .filter(|(&p, e)| p == e.label.index())
        .count();
    Ok(Some(correct as f64 / examples.len() as f64))
}

fn better(candidate: Option<f64>, best: Option<f64>) -> bool {
    match (candidate, best) {
        (Some(c), Some(b)) => c >= b,
        (Some(_), None) => true,
        (None, _) => true,
    }
}

/// SGD with momentum and a per-step cosine schedule from `lr` to 0.
/// Returns the epoch with the best validation accuracy (the latest among
/// equals), or the last epoch when `val` is empty.
pub fn train_vit(
    cfg: &VitConfig,
    tc: &VitTrainConfig,
    train: &[Example],
    val: &[Example],
) -> Result<(VitModel, TrainLog)> {
    if train.is_empty() {
        return Err(Error::EmptyInput("ViT training set"));
    }
    if tc.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut model = VitModel::init(cfg.clone(), tc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x5eed);
    let mut opt = Sgd::new(tc.momentum);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let per_epoch = train.len().div_ceil(tc.batch_size);
    let total_steps = tc.epochs * per_epoch;
    let mut log = TrainLog::default();
    let mut best: Option<(Option<f64>, ParamSet)> = None;
    let mut step = 0;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let batch: Vec<Example> = chunk.iter().map(|&i| train[i]).collect();
            let (grads, loss) = vit_gradients(cfg, model.params()?, &batch)?;
            epoch_loss += loss * batch.len() as f64;
            let lr = cosine_lr(tc.lr, step, total_steps);
            opt.step(model.params_mut()?, &grads, lr)?;
            step += 1;
        }
        let acc = vit_accuracy(&model, val)?;
        log.train_loss.push(epoch_loss / train.len() as f64);
        log.val_accuracy.push(acc);
        log::debug!("vit epoch {epoch}: loss {:.4} val {:?}", epoch_loss / train.len() as f64, acc);
        if best.as_ref().is_none_or(|(b, _)| better(acc, *b)) {
            best = Some((acc, model.params()?.clone()));
            log.best_epoch = epoch;
        }
    }
    if let Some((_, params)) = best {
        *model.params_mut()? = params;
    }
    Ok((model, log))
}

/// Splits `order` into batches of `size`, folding a trailing singleton into
/// the previous batch: batch statistics of a single image are degenerate.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size.max(2)).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let n = out.len();
        let start = (n - 1) * size.max(2);
        out[n - 1] = &order[start..];
    }
    out
}

pub fn cnn_accuracy(model: &CnnModel, examples: &[Example]) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let preds = parallel::map(examples, |e| model.predict(e.input));
    let mut correct = 0;
    for (p, e) in preds.into_iter().zip(examples) {
        correct += (p? == e.label.index()) as usize;
    }
    Ok(Some(correct as f64 / examples.len() as f64))
}

/// Adam at a constant learning rate with train-mode batch norm and
/// dropout. Returns the best-validation checkpoint, running statistics
/// included.
pub fn train_cnn(
    cfg: &CnnConfig,
    tc: &CnnTrainConfig,
    train: &[Example],
    val: &[Example],
) -> Result<(CnnModel, TrainLog)> {
    if train.is_empty() {
        return Err(Error::EmptyInput("CNN training set"));
    }
    if train.len() < 2 {
        return Err(Error::InvalidArgument(
            "batch-norm training needs at least two images".into(),
        ));
    }
    let mut model = CnnModel::init(cfg.clone(), tc.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed ^ 0xc22);
    let mut opt = Adam::new(tc.beta1, tc.beta2, tc.eps);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainLog::default();
    let mut best: Option<(Option<f64>, CnnModel)> = None;
    for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in batches(&order, tc.batch_size) {
            let images: Vec<&[f64]> = chunk.iter().map(|&i| train[i].input).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| train[i].label.index()).collect();
            let tape = Tape::new();
            let params = model.params()?.clone();
            let bound = Bound::bind(&tape, &params, true);
            let x = model.input(&tape, &images)?;
            let f = model.features(&tape, &bound, x, NormMode::Train)?;
            let logits = model.head(&tape, &bound, f, true, &mut rng)?;
            let loss = tape.cross_entropy(logits, &targets)?;
            tape.backward(loss)?;
            epoch_loss += tape.value(loss).item()? * chunk.len() as f64;
            let grads = read_grads(&tape, &bound, &params);
            opt.step(model.params_mut()?, &grads, tc.lr)?;
        }
        let acc = cnn_accuracy(&model, val)?;
        log.train_loss.push(epoch_loss / train.len() as f64);
        log.val_accuracy.push(acc);
        log::debug!("cnn epoch {epoch}: loss {:.4} val {:?}", epoch_loss / train.len() as f64, acc);
        if best.as_ref().is_none_or(|(b, _)| better(acc, *b)) {
            best = Some((acc, model.clone()));
            log.best_epoch = epoch;
        }
    }
    Ok((best.map(|(_, m)| m).unwrap_or(model), log))
}
