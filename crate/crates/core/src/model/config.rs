use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::MelParams;

pub const TAIL_KERNEL: usize = 14;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierVariant {
    /// CLS and TAL read out through a two-tap convolution.
    Long,
    /// Mean-pooled tokens through three fully connected layers.
    Short,
}

impl ClassifierVariant {
    pub fn for_duration(duration_s: f64) -> Self {
        if duration_s > 1.0 {
            ClassifierVariant::Long
        } else {
            ClassifierVariant::Short
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TailPlan {
    pub kernel: usize,
    pub stride: usize,
    /// Zero-padded to preserve length when true.
    pub same_padding: bool,
    pub pool: Option<usize>,
}

impl TailPlan {
    pub fn reducing() -> Self {
        TailPlan { kernel: TAIL_KERNEL, stride: 2, same_padding: false, pool: Some(2) }
    }

    pub fn preserving() -> Self {
        TailPlan { kernel: TAIL_KERNEL, stride: 1, same_padding: true, pool: None }
    }

    /// Output length for `t` input frames, `None` when the input is too short.
    pub fn out_len(&self, t: usize) -> Option<usize> {
        let conv = if self.same_padding {
            t.div_ceil(self.stride)
        } else {
            (t >= self.kernel).then(|| (t - self.kernel) / self.stride + 1)?
        };
        match self.pool {
            Some(p) => (conv >= p).then(|| (conv - p) / p + 1),
            None => Some(conv),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnPlan {
    pub tail: TailPlan,
    /// Channel width between blocks.
    pub width: usize,
    /// Reduced width inside each bottleneck.
    pub mid: usize,
    /// The first stage keeps length; every later stage halves it.
    pub stages: Vec<StagePlan>,
    pub out_channels: usize,
}

impl CnnPlan {
    /// Residual temporal length for `t` input frames.
    pub fn output_len(&self, t: usize) -> Option<usize> {
        let mut len = self.tail.out_len(t)?;
        for s in &self.stages {
            len = len.div_ceil(s.stride);
        }
        (len > 0).then_some(len)
    }

    pub fn n_downsampling_stages(&self) -> usize {
        self.stages.iter().filter(|s| s.stride > 1).count()
    }

    pub fn n_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    /// Tail conv, three convs per bottleneck, and the head conv.
    pub fn conv_depth(&self) -> usize {
        2 + 3 * self.n_blocks()
    }

    pub fn with_widths(mut self, width: usize, mid: usize, blocks_per_stage: usize) -> Self {
        self.width = width;
        self.mid = mid;
        for s in &mut self.stages {
            s.blocks = blocks_per_stage;
        }
        self
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.mid == 0 || self.out_channels == 0 {
            return Err(Error::Config("cnn widths must be positive".into()));
        }
        if self.stages.iter().any(|s| s.blocks == 0 || s.stride == 0) {
            return Err(Error::Config("every cnn stage needs at least one block and a positive stride".into()));
        }
        Ok(())
    }
}

/// Chooses the tail and the number of halving stages so that the residual
/// length `L` of a `t`-frame input lands in `[target_k, 2 * target_k)`.
///
/// The reducing tail (conv14 stride 2, pool 2) is used whenever it leaves at
/// least `target_k` frames; shorter inputs get a length-preserving tail.
pub fn plan_cnn(t: usize, target_k: usize, d: usize) -> Result<CnnPlan> {
    if target_k == 0 {
        return Err(Error::Plan("target_k must be positive".into()));
    }
    if t < target_k {
        return Err(Error::Plan(format!(
            "{t} input frames cannot reach target_k {target_k}; use target_k <= {t}"
        )));
    }
    let tail = match TailPlan::reducing().out_len(t) {
        Some(l) if l >= target_k => TailPlan::reducing(),
        _ => TailPlan::preserving(),
    };
    let mut len = tail.out_len(t).expect("tail length checked above");
    let mut stages = vec![StagePlan { blocks: 1, stride: 1 }];
    while len >= 2 * target_k {
        len = len.div_ceil(2);
        stages.push(StagePlan { blocks: 1, stride: 2 });
    }
    let width = d.max(4);
    Ok(CnnPlan { tail, width, mid: (width / 4).max(1), stages, out_channels: d })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub mel: MelParams,
    pub embed_dim: usize,
    pub cnn: CnnPlan,
    pub n_transformer_blocks: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub token_dropout: f64,
    pub attn_dropout: f64,
    pub n_classes: usize,
    pub classifier: ClassifierVariant,
    pub target_k: usize,
    /// Largest residual length the positional table holds.
    pub max_k: usize,
}

impl ModelConfig {
    pub const TOKEN_DROPOUT: f64 = 0.15;

    /// Plans a model for clips of `duration_s` seconds at `sample_rate`.
    pub fn for_input(
        mel: MelParams,
        sample_rate: u32,
        duration_s: f64,
        n_classes: usize,
        target_k: usize,
        embed_dim: usize,
    ) -> Result<Self> {
        mel.validate()?;
        let n = (duration_s * sample_rate as f64).round() as usize;
        let t = mel.n_frames(n, sample_rate).ok_or(Error::TooShort { got: n, min: mel.win_samples(sample_rate) })?;
        let cnn = plan_cnn(t, target_k, embed_dim)?;
        let cfg = ModelConfig {
            mel,
            embed_dim,
            cnn,
            n_transformer_blocks: 4,
            n_heads: 8.min(embed_dim),
            mlp_ratio: 4,
            token_dropout: Self::TOKEN_DROPOUT,
            attn_dropout: 0.0,
            n_classes,
            classifier: ClassifierVariant::for_duration(duration_s),
            target_k,
            max_k: 2 * target_k,
        };
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.mel.validate()?;
        self.cnn.validate()?;
        if self.embed_dim == 0 || self.n_heads == 0 || !self.embed_dim.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        if self.cnn.out_channels != self.embed_dim {
            return Err(Error::Config("cnn output channels must equal embed_dim".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        if self.mlp_ratio == 0 || self.max_k == 0 {
            return Err(Error::Config("mlp_ratio and max_k must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.token_dropout) || self.attn_dropout != 0.0 {
            return Err(Error::Config("token dropout must be in [0, 1) and attention dropout 0".into()));
        }
        Ok(())
    }

    /// Hidden widths of the short classifier.
    pub fn short_hidden(&self) -> (usize, usize) {
        let h1 = (self.embed_dim / 2).max(self.n_classes);
        let h2 = (self.embed_dim / 4).max(self.n_classes);
        (h1, h2)
    }

    /// Trainable scalar count from the configuration alone.
    pub fn parameter_count(&self) -> usize {
        let f = self.mel.n_mels;
        let d = self.embed_dim;
        let conv = |i: usize, o: usize, k: usize| o * i * k + o;
        let bn = |c: usize| 2 * c;
        let lin = |i: usize, o: usize| i * o + o;
        let p = &self.cnn;
        let mut n = conv(f, p.width, p.tail.kernel) + bn(p.width);
        for s in &p.stages {
            n += s.blocks
                * (conv(p.width, p.mid, 1) + conv(p.mid, p.mid, 7) + conv(p.mid, p.width, 1) + 2 * bn(p.mid) + bn(p.width));
        }
        n += conv(p.width, d, 1);
        n += 2 * d + (self.max_k + 2) * d;
        let block = 2 * bn(d) + 4 * lin(d, d) + lin(d, self.mlp_ratio * d) + lin(self.mlp_ratio * d, d);
        n += self.n_transformer_blocks * block;
        n += match self.classifier {
            ClassifierVariant::Long => conv(d, d, 2) + lin(d, self.n_classes),
            ClassifierVariant::Short => {
                let (h1, h2) = self.short_hidden();
                lin(d, h1) + bn(h1) + lin(h1, h2) + bn(h2) + lin(h2, self.n_classes)
            }
        };
        n
    }
}
