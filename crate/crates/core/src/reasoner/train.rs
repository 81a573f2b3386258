//! Teacher-forced training over prepared sequences.
//!
//! The caller assembles each sample into a [`TokenSequence`] and the
//! target id list (explanation tokens plus EOS) once; epochs then
//! shuffle deterministically, accumulate per-batch gradients, and step
//! the optimizer. The semantic graph is rebuilt every forward pass
//! because R3 linking depends on the current encoder output.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::assembly::TokenSequence;
use crate::error::{Error, Result};
use crate::graph::GraphMode;
use crate::num::{real, Real};

use super::optim::AdamW;
use super::{backward_sample, forward_sample, ModelParams};

#[derive(Clone, Debug)]
pub struct TrainItem {
    pub id: String,
    pub seq: TokenSequence,
    /// Target token ids with EOS appended.
    pub targets: Vec<usize>,
}

#[derive(Clone, Copy, Debug)]
pub struct TrainSettings {
    pub batch: usize,
    pub epochs: usize,
    pub lr_main: f64,
    pub lr_gcn: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: GraphMode,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Trains in place, returning the per-epoch mean sample loss and
/// invoking `on_epoch` as each epoch completes (for streamed logs).
pub fn train<R: Real>(
    params: &mut ModelParams<R>,
    items: &[TrainItem],
    settings: &TrainSettings,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    if items.is_empty() {
        return Err(Error::Training("no training items".into()));
    }
    if settings.batch == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    let mut optimizer = AdamW::new(
        params,
        real::<R>(settings.lr_main),
        real::<R>(settings.lr_gcn),
        real::<R>(settings.weight_decay),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut logs = Vec::with_capacity(settings.epochs);

    for epoch in 1..=settings.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(settings.batch) {
            let mut grads = ModelParams::zeros(params.dims);
            let mut batch_loss = R::zero();
            for &idx in batch {
                let item = &items[idx];
                let fwd = forward_sample(&item.seq, &item.targets, params, settings.mode)?;
                if !fwd.loss.is_finite() {
                    return Err(Error::Training(format!(
                        "non-finite loss at epoch {epoch} on sample '{}'",
                        item.id
                    )));
                }
                batch_loss += fwd.loss;
                backward_sample(&fwd, &item.seq, &item.targets, params, &mut grads);
            }
            let scale = real::<R>(1.0 / batch.len() as f64);
            for (_, tensor) in grads.tensors_mut() {
                tensor.scale(scale);
            }
            optimizer.step(params, &grads);
            epoch_loss += batch_loss.to_f64();
        }
        if !params.is_finite() {
            return Err(Error::Training(format!(
                "non-finite parameters after epoch {epoch}"
            )));
        }
        let log = EpochLog {
            epoch,
            mean_loss: epoch_loss / items.len() as f64,
        };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}
