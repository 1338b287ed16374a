//! Plain SGD training with softmax cross-entropy.
//!
//! Training is noise-free: the baseline model never sees bit errors or
//! crossbar non-idealities. Gradients are accumulated over fixed sub-chunks
//! of each minibatch and merged in index order, so results are bitwise
//! reproducible for a given seed regardless of worker count.

use rayon::prelude::*;

use super::{ForwardOpts, LayerGraph};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Multiplied onto the learning rate after every epoch.
    pub lr_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            lr: 0.05,
            batch_size: 32,
            seed: 0,
            lr_decay: 0.9,
        }
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    /// Mean loss per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Number of independently accumulated gradient chunks per minibatch.
/// Fixed (not tied to the thread count) to keep results machine-independent.
const GRAD_CHUNKS: usize = 8;

type ParamGrads = Vec<Option<(Tensor, Tensor)>>;

/// Trains a copy of `model` and returns it with the per-epoch loss history.
pub fn train(
    model: &LayerGraph,
    images: &[Tensor],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<(LayerGraph, TrainReport)> {
    if images.len() != labels.len() || images.is_empty() {
        return Err(Error::Config(format!(
            "training set has {} images and {} labels",
            images.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= model.num_classes()) {
        return Err(Error::Config(format!(
            "label {bad} out of range for {} classes",
            model.num_classes()
        )));
    }
    let mut model = model.clone();
    let mut report = TrainReport::default();
    let mut lr = cfg.lr;
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..cfg.epochs {
        shuffle(&mut order, cfg.seed, epoch as u64);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let chunk_len = batch.len().div_ceil(GRAD_CHUNKS).max(1);
            let partials: Vec<Result<(f64, ParamGrads)>> = batch
                .par_chunks(chunk_len)
                .map(|chunk| accumulate_chunk(&model, images, labels, chunk))
                .collect();
            let mut total_loss = 0.0;
            let mut grads: Option<ParamGrads> = None;
            for part in partials {
                let (loss, g) = part?;
                total_loss += loss;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => merge_grads(acc, &g),
                }
            }
            let batch_loss = total_loss / batch.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged (non-finite loss) at epoch {epoch}"
                )));
            }
            epoch_loss += total_loss;
            let step = lr / batch.len() as f64;
            apply_sgd(&mut model, &grads.expect("nonempty batch"), step);
        }
        report.epoch_losses.push(epoch_loss / images.len() as f64);
        lr *= cfg.lr_decay;
    }
    Ok((model, report))
}

fn accumulate_chunk(
    model: &LayerGraph,
    images: &[Tensor],
    labels: &[usize],
    chunk: &[usize],
) -> Result<(f64, ParamGrads)> {
    let opts = ForwardOpts::default();
    let mut total_loss = 0.0;
    let mut acc: Option<ParamGrads> = None;
    for &idx in chunk {
        let x = &images[idx];
        let (_, tape) = model.forward(x, &opts)?;
        let (loss, _, grads) = model.backprop(x, labels[idx], tape, true)?;
        total_loss += loss;
        let grads = grads.expect("param grads requested");
        match &mut acc {
            None => acc = Some(grads),
            Some(a) => merge_grads(a, &grads),
        }
    }
    Ok((total_loss, acc.expect("nonempty chunk")))
}

fn merge_grads(acc: &mut ParamGrads, other: &ParamGrads) {
    for (a, o) in acc.iter_mut().zip(other) {
        match (a, o) {
            (Some((aw, ab)), Some((ow, ob))) => {
                for (x, y) in aw.data_mut().iter_mut().zip(ow.data()) {
                    *x += y;
                }
                for (x, y) in ab.data_mut().iter_mut().zip(ob.data()) {
                    *x += y;
                }
            }
            (None, None) => {}
            _ => unreachable!("mismatched gradient structure"),
        }
    }
}

fn apply_sgd(model: &mut LayerGraph, grads: &ParamGrads, step: f64) {
    for (layer, g) in model.layers.iter_mut().zip(grads) {
        let Some((dw, db)) = g else { continue };
        if let Some(w) = &mut layer.weights {
            for (wv, gv) in w.data_mut().iter_mut().zip(dw.data()) {
                *wv -= step * gv;
            }
        }
        if let Some(b) = &mut layer.bias {
            for (bv, gv) in b.data_mut().iter_mut().zip(db.data()) {
                *bv -= step * gv;
            }
        }
    }
}

fn shuffle(order: &mut [usize], seed: u64, epoch: u64) {
    use rand::Rng;
    let mut rng = crate::rng::substream_indexed(seed, &["train", "shuffle"], epoch);
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}
