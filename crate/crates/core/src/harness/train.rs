use log::{info, warn};
use rand::seq::SliceRandom;

use super::config::TrainConfig;
use super::data::Dataset;
use crate::audio::AudioClip;
use crate::augment::{make_view_set, ViewParams, ViewRecipe};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::{lr_schedule, Sgd};
use crate::rng::{derive_seed, purpose, stream};
use crate::tta::multiview_step;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Mean per-view training loss over applied steps.
    pub train_loss: f64,
    /// Un-augmented accuracy on the training clips after the epoch.
    pub train_accuracy: f64,
    pub val_accuracy: Option<f64>,
    pub skipped_steps: usize,
}

pub struct TrainOutcome {
    /// Weights from the epoch with the best validation accuracy (training
    /// accuracy when there is no validation set); the initial weights when
    /// no epoch ran.
    pub best: Model<f32>,
    pub best_epoch: Option<usize>,
    pub last: Model<f32>,
    pub history: Vec<EpochStats>,
}

/// Share of positions where `pred` matches `labels`.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}

/// Chunks `order` into batches, folding a trailing single item into the
/// previous batch so batch statistics always see at least two samples.
pub fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let n = order.len();
    let mut out: Vec<&[usize]> = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = (start + size).min(n);
        if n - end == 1 {
            end = n;
        }
        out.push(&order[start..end]);
        start = end;
    }
    out
}

/// Views for the samples `idx`, one batch per view. Sample `i` in `epoch`
/// always draws from the same stream.
pub fn view_batches(
    clips: &[AudioClip],
    idx: &[usize],
    recipe: ViewRecipe,
    params: &ViewParams,
    bank: &[AudioClip],
    seed: u64,
    epoch: u64,
) -> Result<Vec<Vec<AudioClip>>> {
    let mut views = vec![Vec::with_capacity(idx.len()); recipe.n_views()];
    for &i in idx {
        let set = make_view_set(&clips[i], recipe, params, &mut stream(seed, purpose::VIEWS, i as u64, epoch), bank)?;
        for (k, v) in set.views.into_iter().enumerate() {
            views[k].push(v);
        }
    }
    Ok(views)
}

/// Multiview training from scratch. All randomness (initialization, order,
/// views, dropout) derives from `train.seed`.
pub fn train_model(
    config: ModelConfig,
    train: &TrainConfig,
    data: &Dataset,
    val: Option<&Dataset>,
    bank: &[AudioClip],
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome> {
    train.validate()?;
    if data.is_empty() {
        return Err(Error::DegenerateInput("training set is empty".into()));
    }
    if data.n_classes() != config.n_classes {
        return Err(Error::Config(format!("dataset has {} classes, model {}", data.n_classes(), config.n_classes)));
    }
    let val = val.filter(|v| !v.is_empty());
    let seed = train.seed;
    let mut model = Model::<f32>::new(config, seed)?;
    let mut best = model.cast::<f32>()?;
    let mut best_epoch = None;
    let mut best_score = f64::NEG_INFINITY;
    let mut history = Vec::with_capacity(train.epochs);
    let mut opt = Sgd::<f32>::new(train.lr0);
    let n_views = train.recipe.n_views() as f64;

    for epoch in 0..train.epochs {
        opt.lr = lr_schedule(&train.schedule(), epoch);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(seed, purpose::SHUFFLE, 0, epoch as u64));
        let (mut loss_sum, mut applied, mut skipped) = (0.0, 0usize, 0usize);
        for (bi, idx) in batches(&order, train.batch_size).into_iter().enumerate() {
            let views = view_batches(&data.clips, idx, train.recipe, &train.views, bank, seed, epoch as u64)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let dropout = derive_seed(seed, &[purpose::DROPOUT, epoch as u64, bi as u64]);
            let rep = multiview_step(&mut model, &views, &labels, &mut opt, dropout)?;
            if rep.applied {
                loss_sum += rep.loss / n_views;
                applied += 1;
            } else {
                warn!("epoch {epoch} batch {bi}: non-finite loss, step skipped for samples {idx:?}");
                skipped += 1;
            }
        }
        if applied == 0 {
            return Err(Error::Divergence(format!("epoch {epoch}: every step had a non-finite loss")));
        }
        let train_accuracy = accuracy(&model.predict(&data.clips)?, &data.labels);
        let val_accuracy = match val {
            Some(v) => Some(accuracy(&model.predict(&v.clips)?, &v.labels)),
            None => None,
        };
        let stats = EpochStats {
            epoch,
            lr: opt.lr,
            train_loss: loss_sum / applied as f64,
            train_accuracy,
            val_accuracy,
            skipped_steps: skipped,
        };
        info!(
            "epoch {epoch}: loss {:.4} train acc {:.3} val acc {:?}",
            stats.train_loss, stats.train_accuracy, stats.val_accuracy
        );
        let score = val_accuracy.unwrap_or(train_accuracy);
        if score > best_score {
            best_score = score;
            best_epoch = Some(epoch);
            best = model.cast::<f32>()?;
        }
        on_epoch(&stats);
        history.push(stats);
        if train.stop_at_train_accuracy.is_some_and(|t| train_accuracy >= t) {
            break;
        }
    }
    Ok(TrainOutcome { best, best_epoch, last: model, history })
}
