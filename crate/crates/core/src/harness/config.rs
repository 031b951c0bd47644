use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::SynthSpec;
use crate::augment::{ViewParams, ViewRecipe};
use crate::error::{Error, Result};
use crate::frontend::MelParams;
use crate::model::{plan_cnn, ClassifierVariant, ModelConfig};
use crate::numerics::ScheduleParams;
use crate::tta::{Profile, RefineMethod, RefinementSpec, TTDAConfig};

/// Where clips come from: a manifest on disk or the built-in tone corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", deny_unknown_fields)]
pub enum DatasetSource {
    Manifest(PathBuf),
    Synth(SynthSpec),
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synth(SynthSpec::new(3, 20, 1.0, 16000, 0))
    }
}

/// Architecture knobs; the CNN plan itself follows from the input length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub embed_dim: usize,
    pub target_k: usize,
    pub n_transformer_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub token_dropout: f64,
    pub attn_dropout: f64,
    /// CNN trunk width; defaults to `max(embed_dim, 4)`.
    pub cnn_width: Option<usize>,
    pub cnn_mid: Option<usize>,
    pub blocks_per_stage: Option<usize>,
    pub classifier: Option<ClassifierVariant>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            embed_dim: 32,
            target_k: 8,
            n_transformer_blocks: 2,
            n_heads: 4,
            mlp_ratio: 2,
            token_dropout: ModelConfig::TOKEN_DROPOUT,
            attn_dropout: 0.0,
            cnn_width: None,
            cnn_mid: None,
            blocks_per_stage: None,
            classifier: None,
        }
    }
}

impl ModelSection {
    /// Resolves the full model configuration for clips of the given shape.
    pub fn resolve(&self, mel: MelParams, sample_rate: u32, duration_s: f64, n_classes: usize) -> Result<ModelConfig> {
        let mut cfg = ModelConfig::for_input(mel, sample_rate, duration_s, n_classes, self.target_k, self.embed_dim)?;
        cfg.n_transformer_blocks = self.n_transformer_blocks;
        cfg.n_heads = self.n_heads;
        cfg.mlp_ratio = self.mlp_ratio;
        cfg.token_dropout = self.token_dropout;
        cfg.attn_dropout = self.attn_dropout;
        if let Some(v) = self.classifier {
            cfg.classifier = v;
        }
        if self.cnn_width.is_some() || self.cnn_mid.is_some() || self.blocks_per_stage.is_some() {
            let t = cfg.mel.n_frames((duration_s * sample_rate as f64).round() as usize, sample_rate).unwrap_or(0);
            let plan = plan_cnn(t, self.target_k, self.embed_dim)?;
            let width = self.cnn_width.unwrap_or(plan.width);
            let mid = self.cnn_mid.unwrap_or((width / 4).max(1));
            let blocks = self.blocks_per_stage.unwrap_or(plan.stages.first().map_or(1, |s| s.blocks));
            cfg.cnn = plan.with_widths(width, mid, blocks);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lambda: f64,
    pub eta: usize,
    pub recipe: ViewRecipe,
    pub seed: u64,
    pub views: ViewParams,
    /// Held-out share of the dataset used for per-epoch validation.
    pub val_fraction: f64,
    /// Background-noise WAV files; two are synthesized when empty.
    pub noise_bank: Vec<PathBuf>,
    /// Stop once un-augmented training accuracy reaches this value.
    pub stop_at_train_accuracy: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            lr0: 0.01,
            lambda: 10.0,
            eta: 40,
            recipe: ViewRecipe::Train4,
            seed: 0,
            views: ViewParams::default(),
            val_fraction: 0.2,
            noise_bank: Vec::new(),
            stop_at_train_accuracy: None,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> ScheduleParams {
        ScheduleParams { lr0: self.lr0, lambda: self.lambda, eta: self.eta }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("train.val_fraction {} outside [0, 1)", self.val_fraction)));
        }
        if matches!(self.recipe, ViewRecipe::Ttda2 | ViewRecipe::Ttau2) {
            return Err(Error::Config(format!("{:?} is not a training recipe", self.recipe)));
        }
        self.views.validate()?;
        self.schedule().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetSource,
    /// Evaluation and adaptation data; the training dataset when absent.
    pub test_dataset: Option<DatasetSource>,
    pub mel: MelParams,
    pub model: ModelSection,
    pub train: TrainConfig,
    /// Named adaptation preset; overrides the loss weights, schedule and
    /// epoch count of `ttda`.
    pub profile: Option<Profile>,
    pub ttda: TTDAConfig,
    pub refine: RefinementSpec,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: DatasetSource::default(),
            test_dataset: None,
            mel: MelParams { n_mels: 32, ..Default::default() },
            model: ModelSection::default(),
            train: TrainConfig::default(),
            profile: None,
            ttda: TTDAConfig::default(),
            refine: RefinementSpec::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg.with_profile())
    }

    /// Reads a config file; relative paths inside it resolve against its
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        cfg.rebase(&base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for src in [Some(&mut self.dataset), self.test_dataset.as_mut()].into_iter().flatten() {
            if let DatasetSource::Manifest(p) = src {
                fix(p);
            }
        }
        self.train.noise_bank.iter_mut().for_each(fix);
        self.refine.checkpoint_paths.iter_mut().for_each(fix);
    }

    /// Applies `profile` to the adaptation settings, keeping batch size and
    /// update scope.
    pub fn with_profile(mut self) -> Self {
        if let Some(p) = self.profile {
            let preset = TTDAConfig::profile(p);
            self.ttda = TTDAConfig { batch_size: self.ttda.batch_size, update_scope: self.ttda.update_scope, ..preset };
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.train.validate()?;
        self.ttda.validate()?;
        // Checkpoint counts are checked once the command line has added its own.
        RefinementSpec { method: RefineMethod::None, ..self.refine.clone() }.validate()?;
        for src in [Some(&self.dataset), self.test_dataset.as_ref()].into_iter().flatten() {
            match src {
                DatasetSource::Manifest(p) if !p.exists() => {
                    return Err(Error::Config(format!("manifest {} does not exist", p.display())));
                }
                DatasetSource::Synth(s) => s.validate()?,
                _ => {}
            }
        }
        if let Some(missing) = self.train.noise_bank.iter().chain(&self.refine.checkpoint_paths).find(|p| !p.exists()) {
            return Err(Error::Config(format!("{} does not exist", missing.display())));
        }
        Ok(())
    }
}
