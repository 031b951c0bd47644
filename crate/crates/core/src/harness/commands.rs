use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::Serialize;

use super::config::{DatasetSource, ExperimentConfig};
use super::data::{load_dataset, load_features, noise_bank, split_indices, Dataset};
use super::metrics::{JsonLines, MetricsRecord, TimingRecord};
use super::train::{accuracy, train_model};
use crate::audio::{generate_synth_corpus, write_wav_pcm16, SynthSpec};
use crate::error::{Error, Result};
use crate::model::{argmax, load_checkpoint, save_checkpoint, Model, TrainState};
use crate::rng::seeded;
use crate::tta::{
    agreement_rate, aug_refine, hyb_refine, mlt_refine, ttda_adapt, ConfusionMatrix, RefineMethod, RefinementSpec,
};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const ADAPTED_FILE: &str = "adapted.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const TRACE_FILE: &str = "ttda_trace.jsonl";
pub const EVAL_FILE: &str = "eval.json";
pub const AGREE_FILE: &str = "agree.json";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Maps an error to the process exit code: 2 configuration, 3 data,
/// 4 numeric divergence.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Argument(_)
        | Error::Plan(_)
        | Error::Capacity { .. }
        | Error::Ensemble(_)
        | Error::Shape { .. } => 2,
        Error::NonFinite(_) | Error::Divergence(_) => 4,
        Error::Decode { .. }
        | Error::UnsupportedFormat(_)
        | Error::DegenerateInput(_)
        | Error::DegenerateNoise(_)
        | Error::Manifest { .. }
        | Error::ManifestFormat(_)
        | Error::TooShort { .. }
        | Error::Checkpoint(_)
        | Error::File { .. }
        | Error::Io(_) => 3,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::file(path, e))
}

fn test_source(cfg: &ExperimentConfig) -> &DatasetSource {
    cfg.test_dataset.as_ref().unwrap_or(&cfg.dataset)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub best_epoch: Option<usize>,
    pub final_train_accuracy: Option<f64>,
    pub best_val_accuracy: Option<f64>,
    pub checkpoint: PathBuf,
}

/// Trains on `cfg.dataset`, holding out `train.val_fraction` for
/// validation, and writes the best checkpoint plus metrics to `out`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    create_dir(out)?;
    let seed = cfg.train.seed;
    let run = format!("train-{seed}");
    let data = load_dataset(&cfg.dataset)?;
    let (train_idx, val_idx) = split_indices(data.len(), cfg.train.val_fraction, seed);
    let (train, val) = (data.subset(&train_idx), data.subset(&val_idx));
    let model_cfg = cfg.model.resolve(cfg.mel, data.sample_rate(), data.duration_s(), data.n_classes())?;
    let bank = noise_bank(&cfg.train.noise_bank, data.sample_rate(), data.duration_s(), seed)?;

    let mut metrics = JsonLines::create(out.join(METRICS_FILE))?;
    let mut timings = JsonLines::create(out.join(TIMINGS_FILE))?;
    let started = Instant::now();
    let mut failure = None;
    let outcome = train_model(model_cfg, &cfg.train, &train, Some(&val), &bank, |s| {
        let mut emit = |split: &str, loss, accuracy| {
            let rec = MetricsRecord { run: run.clone(), epoch: Some(s.epoch), split: split.into(), loss, accuracy, seed };
            if let Err(e) = metrics.write(&rec) {
                failure.get_or_insert(e);
            }
        };
        emit("train", Some(s.train_loss), Some(s.train_accuracy));
        if s.val_accuracy.is_some() {
            emit("val", None, s.val_accuracy);
        }
        let t = TimingRecord { run: run.clone(), epoch: Some(s.epoch), wall_clock_s: started.elapsed().as_secs_f64() };
        if let Err(e) = timings.write(&t) {
            failure.get_or_insert(e);
        }
    })?;
    if let Some(e) = failure {
        return Err(e);
    }
    metrics.finish()?;
    timings.finish()?;

    let mut best = outcome.best;
    let state = TrainState { epoch: outcome.best_epoch.map_or(0, |e| e as u64 + 1), rng: seeded(seed) };
    let checkpoint = out.join(CHECKPOINT_FILE);
    save_checkpoint(&checkpoint, &mut best, &state)?;
    let summary = TrainSummary {
        best_epoch: outcome.best_epoch,
        final_train_accuracy: outcome.history.last().map(|s| s.train_accuracy),
        best_val_accuracy: outcome.history.iter().filter_map(|s| s.val_accuracy).reduce(f64::max),
        checkpoint,
    };
    info!("training done: {summary:?}");
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct TraceRecord {
    run: String,
    epoch: usize,
    batch: usize,
    loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptSummary {
    pub batch_losses: usize,
    pub epoch_objective: Vec<f64>,
    pub checkpoint: PathBuf,
}

/// Test-time adaptation of `checkpoint` on the features of the test data.
/// Labels are never loaded.
pub fn cmd_adapt(cfg: &ExperimentConfig, checkpoint: &Path, source: Option<&DatasetSource>, out: &Path) -> Result<AdaptSummary> {
    cfg.validate()?;
    create_dir(out)?;
    let seed = cfg.train.seed;
    let run = format!("adapt-{seed}");
    let (mut model, state) = load_checkpoint(checkpoint)?;
    let features = load_features(source.unwrap_or_else(|| test_source(cfg)))?;
    if features.n_classes != model.n_classes() {
        return Err(Error::Config(format!(
            "test data has {} classes, checkpoint {}",
            features.n_classes,
            model.n_classes()
        )));
    }
    let report = ttda_adapt(&mut model, &features.clips, &cfg.ttda, &cfg.train.views, seed)?;

    let per = features.clips.len().div_ceil(cfg.ttda.batch_size);
    let mut trace = JsonLines::create(out.join(TRACE_FILE))?;
    for (i, &loss) in report.batch_losses.iter().enumerate() {
        trace.write(&TraceRecord { run: run.clone(), epoch: i / per, batch: i % per, loss })?;
    }
    trace.finish()?;
    let mut metrics = JsonLines::create(out.join(METRICS_FILE))?;
    for (e, &obj) in report.epoch_objective.iter().enumerate() {
        // Entry 0 is measured before adaptation.
        let epoch = e.checked_sub(1);
        metrics.write(&MetricsRecord { run: run.clone(), epoch, split: "ttda".into(), loss: Some(obj), accuracy: None, seed })?;
    }
    metrics.finish()?;
    if let Some(why) = report.stopped {
        return Err(Error::Divergence(why));
    }
    let path = out.join(ADAPTED_FILE);
    save_checkpoint(&path, &mut model, &state)?;
    info!("adaptation done after {} batches ({per} per epoch)", report.batch_losses.len());
    Ok(AdaptSummary { batch_losses: report.batch_losses.len(), epoch_objective: report.epoch_objective, checkpoint: path })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: RefineMethod,
    pub n: usize,
    pub accuracy: f64,
    pub recall: Vec<Option<f64>>,
    pub confusion: Vec<Vec<u64>>,
}

/// Accuracy, per-class recall and the confusion matrix (rows are labels)
/// of refined predictions.
pub fn evaluate_probs(probs: &[Vec<f64>], data: &Dataset, method: RefineMethod) -> Result<EvalReport> {
    let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let cm = ConfusionMatrix::new(&data.labels, &pred, data.n_classes())?;
    Ok(EvalReport {
        method,
        n: pred.len(),
        accuracy: accuracy(&pred, &data.labels),
        recall: cm.recall(),
        confusion: cm.rows(),
    })
}

/// Refined class probabilities for `data` under `spec`.
pub fn refined_probs(members: &mut [Model<f32>], data: &Dataset, spec: &RefinementSpec) -> Result<Vec<Vec<f64>>> {
    let first = members.first_mut().ok_or_else(|| Error::Config("no checkpoint given".into()))?;
    match spec.method {
        RefineMethod::None => first.predict_proba(&data.clips),
        RefineMethod::Aug => aug_refine(first, &data.clips, spec.a),
        RefineMethod::Mlt => mlt_refine(&mut members[..spec.m], &data.clips),
        RefineMethod::Hyb => hyb_refine(&mut members[..spec.m], &data.clips, spec.a),
    }
}

fn load_members(paths: &[PathBuf], n_classes: usize) -> Result<Vec<Model<f32>>> {
    paths
        .iter()
        .map(|p| {
            let (m, _) = load_checkpoint(p)?;
            if m.n_classes() != n_classes {
                return Err(Error::Config(format!(
                    "{} has {} classes, data has {n_classes}",
                    p.display(),
                    m.n_classes()
                )));
            }
            Ok(m)
        })
        .collect()
}

/// Evaluates one checkpoint, or an ensemble for `mlt`/`hyb`.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    checkpoints: &[PathBuf],
    source: Option<&DatasetSource>,
    method: RefineMethod,
    out: &Path,
) -> Result<EvalReport> {
    cfg.validate()?;
    let mut spec = cfg.refine.clone();
    spec.method = method;
    spec.checkpoint_paths.splice(0..0, checkpoints.iter().cloned());
    spec.validate()?;
    if spec.checkpoint_paths.is_empty() {
        return Err(Error::Config("eval needs at least one checkpoint".into()));
    }
    let data = load_dataset(source.unwrap_or_else(|| test_source(cfg)))?;
    let mut members = load_members(&spec.checkpoint_paths, data.n_classes())?;
    let probs = refined_probs(&mut members, &data, &spec)?;
    let report = evaluate_probs(&probs, &data, method)?;
    create_dir(out)?;
    write_json(&out.join(EVAL_FILE), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AgreeReport {
    pub n: usize,
    pub agreement: f64,
}

/// Agreement rate of two checkpoints over the test data in file order.
pub fn cmd_agree(cfg: &ExperimentConfig, a: &Path, b: &Path, source: Option<&DatasetSource>, out: &Path) -> Result<AgreeReport> {
    cfg.validate()?;
    let (mut ma, _) = load_checkpoint(a)?;
    let (mut mb, _) = load_checkpoint(b)?;
    if ma.n_classes() != mb.n_classes() {
        return Err(Error::Config(format!("class counts differ: {} vs {}", ma.n_classes(), mb.n_classes())));
    }
    let features = load_features(source.unwrap_or_else(|| test_source(cfg)))?;
    let pa = ma.predict(&features.clips)?;
    let pb = mb.predict(&features.clips)?;
    let report = AgreeReport { n: pa.len(), agreement: agreement_rate(&pa, &pb, ma.n_classes())? };
    create_dir(out)?;
    write_json(&out.join(AGREE_FILE), &report)?;
    Ok(report)
}

/// Writes the synthetic corpus as 16-bit WAV files plus a manifest.
pub fn cmd_synth(spec: &SynthSpec, out: &Path) -> Result<PathBuf> {
    let (manifest, clips) = generate_synth_corpus(spec)?;
    for (entry, clip) in manifest.entries.iter().zip(&clips) {
        let path = out.join(&entry.path);
        if let Some(dir) = path.parent() {
            create_dir(dir)?;
        }
        write_wav_pcm16(&path, clip)?;
    }
    let path = out.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| Error::file(&path, e))?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ModelSection;
    use crate::harness::metrics::read_records;
    use crate::harness::TrainConfig;
    use crate::tta::TTDAConfig;

    fn tiny() -> ExperimentConfig {
        ExperimentConfig {
            dataset: DatasetSource::Synth(SynthSpec::new(2, 4, 0.5, 8000, 5)),
            mel: crate::frontend::MelParams { n_mels: 8, ..Default::default() },
            model: ModelSection { embed_dim: 8, n_heads: 2, target_k: 4, n_transformer_blocks: 1, ..Default::default() },
            train: TrainConfig { epochs: 2, batch_size: 4, val_fraction: 0.25, ..Default::default() },
            ttda: TTDAConfig { epochs: 1, batch_size: 4, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Manifest { line: 1, reason: "x".into() }), 3);
        assert_eq!(exit_code(&Error::Divergence("x".into())), 4);
    }

    #[test]
    fn train_eval_agree_adapt() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny();
        let summary = cmd_train(&cfg, dir.path()).unwrap();
        let recs = read_records(dir.path().join(METRICS_FILE)).unwrap();
        assert_eq!(recs.len(), 4);
        assert!(recs.iter().all(|r| r.accuracy.is_none_or(|a| (0.0..=1.0).contains(&a))));

        let ck = summary.checkpoint;
        let none = cmd_eval(&cfg, std::slice::from_ref(&ck), None, RefineMethod::None, dir.path()).unwrap();
        assert_eq!(none.n, 8);
        let tally: u64 = (0..2).map(|i| none.confusion[i][i]).sum();
        assert_eq!(none.accuracy, tally as f64 / 8.0);
        assert!(matches!(
            cmd_eval(&cfg, std::slice::from_ref(&ck), None, RefineMethod::Mlt, dir.path()),
            Err(Error::Config(_))
        ));
        let three = vec![ck.clone(), ck.clone(), ck.clone()];
        let mlt = cmd_eval(&cfg, &three, None, RefineMethod::Mlt, dir.path()).unwrap();
        assert_eq!(mlt.accuracy, none.accuracy);

        assert_eq!(cmd_agree(&cfg, &ck, &ck, None, dir.path()).unwrap().agreement, 1.0);

        let adapted = dir.path().join("adapt");
        let rep = cmd_adapt(&cfg, &ck, None, &adapted).unwrap();
        assert_eq!(rep.batch_losses, 2);
        assert_eq!(fs::read_to_string(adapted.join(TRACE_FILE)).unwrap().lines().count(), 2);
    }

    #[test]
    fn zero_epoch_adaptation_copies_the_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.train.epochs = 1;
        let ck = cmd_train(&cfg, dir.path()).unwrap().checkpoint;
        cfg.ttda.epochs = 0;
        let rep = cmd_adapt(&cfg, &ck, None, &dir.path().join("a")).unwrap();
        assert_eq!(fs::read(ck).unwrap(), fs::read(rep.checkpoint).unwrap());
    }

    #[test]
    fn synth_writes_a_loadable_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::new(2, 3, 0.5, 8000, 1);
        let path = cmd_synth(&spec, dir.path()).unwrap();
        let ds = load_dataset(&DatasetSource::Manifest(path)).unwrap();
        assert_eq!(ds.len(), 6);
        assert_eq!(ds.labels, vec![0, 1, 0, 1, 0, 1]);
    }
}
