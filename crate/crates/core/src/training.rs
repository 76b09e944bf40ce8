//! Epoch loop over a [`Dataset`] with per-epoch validation.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::ParamStore;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::metrics::MetricReport;
use crate::network::SegNet;
use crate::optim::AdamW;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// The last `val_count` samples form the validation split.
    pub val_count: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 1e-4,
            val_count: 16,
            seed: 0,
        }
    }
}

/// Train and validation indices: the validation split is the tail.
pub fn split(n: usize, val_count: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if val_count >= n {
        return Err(Error::BadSpec(format!("validation split {val_count} leaves no training data out of {n}")));
    }
    let cut = n - val_count;
    Ok(((0..cut).collect(), (cut..n).collect()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Mean validation DSC in percent.
    pub dsc: f64,
}

/// Evaluation-mode metrics for `indices`, in batches of `batch_size`.
pub fn evaluate(
    net: &SegNet,
    store: &ParamStore,
    ds: &Dataset,
    indices: &[usize],
    batch_size: usize,
) -> Result<MetricReport> {
    let mut items = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, masks) = ds.batch(chunk, store.dtype())?;
        let pred = net.predict_mask(&net.infer(store, &images)?)?;
        let plane = ds.height * ds.width;
        for (k, &i) in chunk.iter().enumerate() {
            let one = |t: &Tensor| {
                Tensor::new(
                    &[ds.height, ds.width],
                    t.data()[k * plane..(k + 1) * plane].to_vec(),
                    crate::tensor::DType::F64,
                )
            };
            items.push((ds.ids[i].clone(), one(&pred)?, one(&masks)?));
        }
    }
    MetricReport::evaluate(&items)
}

/// Runs `cfg.epochs` epochs. `on_epoch` sees each epoch's log and the
/// current parameters, and whether validation DSC improved on the best so far.
pub fn train(
    net: &SegNet,
    store: &mut ParamStore,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &ParamStore, bool) -> Result<()>,
) -> Result<Vec<EpochLog>> {
    if cfg.batch_size == 0 {
        return Err(Error::BadSpec("batch size must be positive".into()));
    }
    let (mut order, val) = split(ds.len(), cfg.val_count)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut best = f64::NEG_INFINITY;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let (images, masks) = ds.batch(chunk, store.dtype())?;
            total += net.train_step(store, &mut opt, &images, &masks)?;
            batches += 1;
        }
        let dsc = evaluate(net, store, ds, &val, cfg.batch_size)?.mean().dsc;
        let log = EpochLog {
            epoch,
            step: opt.steps(),
            loss: total / batches as f64,
            dsc,
        };
        let improved = dsc > best;
        if improved {
            best = dsc;
        }
        on_epoch(&log, store, improved)?;
        logs.push(log);
    }
    Ok(logs)
}
