//! Adapter training on mined groups: combined loss, gradient-cached large
//! batches, AdamW, dev-loss model selection with early stopping.

mod adapter;
mod optim;
mod step;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingStore;
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::negatives::TrainingGroup;
use crate::rng::SeededStream;

pub use adapter::{apply_adapter, AdapterModel, CheckpointHeader, CHECKPOINT_FORMAT_VERSION};
pub use optim::AdamWConfig;
pub use step::{batch_gradients, BatchInputs, StepOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub queries_per_batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub dev_fraction: f64,
    /// Queries scored per gradient-cache block.
    pub chunk_size: usize,
    pub seed: u64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 2e-4,
            queries_per_batch: 4096,
            max_epochs: 30,
            patience: 2,
            dev_fraction: 0.1,
            chunk_size: 256,
            seed: 0,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return Err(Error::invalid(format!("dev_fraction must be in (0, 1), got {}", self.dev_fraction)));
        }
        if self.queries_per_batch == 0 || self.chunk_size == 0 {
            return Err(Error::invalid("queries_per_batch and chunk_size must be positive"));
        }
        if self.chunk_size > self.queries_per_batch {
            return Err(Error::invalid("chunk_size must not exceed queries_per_batch"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be >= 0"));
        }
        Ok(())
    }
}

/// Shuffles query ids with `seed` and puts the last `floor(n * dev_fraction)`
/// of them on the dev side. Groups sharing a query id stay together.
pub fn split_train_dev(
    groups: &[TrainingGroup],
    dev_fraction: f64,
    seed: u64,
) -> Result<(Vec<TrainingGroup>, Vec<TrainingGroup>)> {
    if groups.len() < 10 {
        return Err(Error::invalid(format!("need at least 10 groups to split, got {}", groups.len())));
    }
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(Error::invalid(format!("dev_fraction must be in (0, 1), got {dev_fraction}")));
    }
    let mut by_query: BTreeMap<&str, Vec<&TrainingGroup>> = BTreeMap::new();
    for g in groups {
        by_query.entry(g.query_id.as_str()).or_default().push(g);
    }
    let mut queries: Vec<&str> = by_query.keys().copied().collect();
    SeededStream::new(seed).shuffle(&mut queries);
    let n_dev = ((queries.len() as f64 * dev_fraction) + 1e-9).floor() as usize;
    if n_dev == 0 || n_dev == queries.len() {
        return Err(Error::invalid("split leaves one side empty"));
    }
    let cut = queries.len() - n_dev;
    let collect = |qs: &[&str]| -> Vec<TrainingGroup> {
        qs.iter().flat_map(|q| by_query[q].iter().map(|g| (*g).clone())).collect()
    };
    Ok((collect(&queries[..cut]), collect(&queries[cut..])))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    EarlyStopped,
    MaxEpochs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Absent for epoch 0, which only evaluates the initial adapter.
    pub train_loss: Option<f64>,
    pub dev_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    pub stopping_reason: StopReason,
    pub train_groups: usize,
    pub dev_groups: usize,
    pub model_path: Option<String>,
}

/// Size-weighted mean combined loss over `groups`, in batches of
/// `batch_size` taken in order.
pub fn evaluate_loss(
    model: &AdapterModel,
    groups: &[TrainingGroup],
    query_embs: &EmbeddingStore,
    passage_embs: &EmbeddingStore,
    batch_size: usize,
    chunk: usize,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for batch in groups.chunks(batch_size) {
        let refs: Vec<&TrainingGroup> = batch.iter().collect();
        let inputs = BatchInputs::gather(&refs, query_embs, passage_embs)?;
        total += batch_gradients(model, &inputs, loss_cfg, Some(chunk))?.loss * batch.len() as f64;
    }
    Ok(total / groups.len() as f64)
}

/// Trains an identity-initialized adapter. Returns the adapter from the
/// epoch with the lowest dev loss (epoch 0 being the untrained adapter).
pub fn train(
    groups: &[TrainingGroup],
    query_embs: &EmbeddingStore,
    passage_embs: &EmbeddingStore,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<(AdapterModel, TrainReport)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if let Some(g) = groups.iter().find(|g| g.k() != loss_cfg.k) {
        return Err(Error::invalid(format!(
            "group `{}` has {} negatives but the loss expects k = {}",
            g.query_id,
            g.k(),
            loss_cfg.k
        )));
    }
    if query_embs.dim() != passage_embs.dim() {
        return Err(Error::DimensionMismatch {
            expected: query_embs.dim(),
            found: passage_embs.dim(),
        });
    }
    let (train_set, dev_set) = split_train_dev(groups, cfg.dev_fraction, cfg.seed)?;
    let dim = query_embs.dim();
    let mut model = AdapterModel::identity(dim);
    let mut opt = optim::AdamW::new(cfg.optimizer, cfg.learning_rate, model.num_params());
    let chunk = cfg.chunk_size;
    let dev_loss = |m: &AdapterModel| {
        evaluate_loss(m, &dev_set, query_embs, passage_embs, cfg.queries_per_batch, chunk, loss_cfg)
    };

    let initial = dev_loss(&model)?;
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        dev_loss: initial,
    }];
    let mut best = (0usize, initial, model.clone());
    let mut stale = 0usize;
    let mut stopping_reason = StopReason::MaxEpochs;
    let mut shuffler = SeededStream::new(cfg.seed ^ 0x0005_eed0_fba7_c4e5);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut batch_id = 0usize;

    for epoch in 1..=cfg.max_epochs {
        shuffler.shuffle(&mut order);
        let mut train_total = 0.0;
        for batch in order.chunks(cfg.queries_per_batch) {
            let refs: Vec<&TrainingGroup> = batch.iter().map(|&i| &train_set[i]).collect();
            let inputs = BatchInputs::gather(&refs, query_embs, passage_embs)?;
            let out = batch_gradients(&model, &inputs, loss_cfg, Some(chunk)).map_err(|e| match e {
                Error::NonFinite(msg) => Error::NonFinite(format!("batch {batch_id} (epoch {epoch}): {msg}")),
                other => other,
            })?;
            train_total += out.loss * batch.len() as f64;
            let AdapterModel { w, b, .. } = &mut model;
            opt.step(&mut [w.as_mut_slice(), b.as_mut_slice()], &[&out.grad_w, &out.grad_b]);
            batch_id += 1;
        }
        let dev = dev_loss(&model)?;
        let train_loss = train_total / train_set.len() as f64;
        tracing::debug!(epoch, train_loss, dev_loss = dev, "epoch done");
        epochs.push(EpochRecord {
            epoch,
            train_loss: Some(train_loss),
            dev_loss: dev,
        });
        if dev < best.1 {
            best = (epoch, dev, model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                stopping_reason = StopReason::EarlyStopped;
                break;
            }
        }
    }

    let (best_epoch, best_dev_loss, best_model) = best;
    Ok((
        best_model,
        TrainReport {
            epochs,
            best_epoch,
            best_dev_loss,
            stopping_reason,
            train_groups: train_set.len(),
            dev_groups: dev_set.len(),
            model_path: None,
        },
    ))
}
