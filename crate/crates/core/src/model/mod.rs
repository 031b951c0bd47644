//! The network: 1D CNN over horizontal tokens, vertical embedding with CLS
//! and TAL tokens, a full-attention encoder and a duration-dependent head.

mod checkpoint;
mod cnn;
mod config;
mod embed;
mod head;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, TrainState, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use cnn::{Bottleneck, Cnn, MIX_KERNEL};
pub use config::{plan_cnn, ClassifierVariant, CnnPlan, ModelConfig, StagePlan, TailPlan, TAIL_KERNEL};
pub use embed::VerticalEmbed;
pub use head::{Classifier, LongClassifier, ShortClassifier};

use crate::audio::{stereo_to_mono, AudioClip};
use crate::error::{Error, Result};
use crate::frontend::{horizontal_tokenize, mel_spectrogram, MelParams, TokenMatrix};
use crate::numerics::{
    softmax_rows, visit_child, visit_child_buffers, Ctx, Layer, Mode, Module, ParamVisitor, Real, Tensor,
    TransformerBlock,
};
use crate::rng::{purpose, seeded, stream};

/// Downmix, log-Mel and tokenize one clip at its own sample rate.
pub fn clip_tokens(clip: &AudioClip, mel: &MelParams) -> Result<TokenMatrix> {
    let mono = if clip.channels() == 1 { clip.clone() } else { stereo_to_mono(clip)? };
    Ok(horizontal_tokenize(mel_spectrogram(&mono, mel)?))
}

/// Stacks equally long token matrices into a `[B, F, T]` tensor.
pub fn stack_tokens<T: Real>(mats: &[TokenMatrix]) -> Result<Tensor<T>> {
    let first = mats.first().ok_or_else(|| Error::Argument("empty batch".into()))?;
    let (f, t) = (first.n_mels(), first.n_frames());
    let mut data = Vec::with_capacity(mats.len() * f * t);
    for m in mats {
        if (m.n_mels(), m.n_frames()) != (f, t) {
            return Err(Error::shape(
                "stack_tokens",
                format!("{}x{} vs {}x{}; fit clips to one length before batching", m.n_mels(), m.n_frames(), f, t),
            ));
        }
        data.extend(m.values().iter().map(|&v| T::of(v)));
    }
    Tensor::from_vec(&[mats.len(), f, t], data)
}

/// Stack of pre-norm transformer blocks.
#[derive(Debug, Clone)]
pub struct Encoder<T> {
    pub blocks: Vec<TransformerBlock<T>>,
}

impl<T: Real> Encoder<T> {
    pub fn new(dim: usize, n_blocks: usize, n_heads: usize, mlp_ratio: usize, rng: &mut crate::rng::Rng) -> Result<Self> {
        let blocks = (0..n_blocks).map(|_| TransformerBlock::new(dim, n_heads, mlp_ratio, 0.0, rng)).collect::<Result<_>>()?;
        Ok(Encoder { blocks })
    }
}

impl<T: Real> Module<T> for Encoder<T> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            visit_child(&format!("block{i}"), b, f);
        }
    }
}

impl<T: Real> Layer<T> for Encoder<T> {
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for b in &mut self.blocks {
            h = b.forward(&h, ctx)?;
        }
        Ok(h)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = grad_out.clone();
        for b in self.blocks.iter_mut().rev() {
            g = b.backward(&g)?;
        }
        Ok(g)
    }
}

crate::single_input_primitive!(Encoder<T>, Model<T>);

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    pub cnn: Cnn<T>,
    pub embed: VerticalEmbed<T>,
    pub encoder: Encoder<T>,
    pub head: Classifier<T>,
}

impl<T: Real> Model<T> {
    /// Initializes all parameters from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, purpose::INIT, 0, 0);
        let d = config.embed_dim;
        Ok(Model {
            cnn: Cnn::new(config.mel.n_mels, &config.cnn, &mut rng),
            embed: VerticalEmbed::new(d, config.max_k, config.token_dropout, &mut rng),
            encoder: Encoder::new(d, config.n_transformer_blocks, config.n_heads, config.mlp_ratio, &mut rng)?,
            head: Classifier::new(&config, &mut rng),
            config,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    /// Analytic parameter count of the configuration.
    pub fn parameter_count(&self) -> usize {
        self.config.parameter_count()
    }

    pub fn tokens(&self, clips: &[AudioClip]) -> Result<Tensor<T>> {
        let mats = clips.iter().map(|c| clip_tokens(c, &self.config.mel)).collect::<Result<Vec<_>>>()?;
        stack_tokens(&mats)
    }

    /// Logits `[B, C]` for a batch of equally long clips.
    pub fn forward_clips(&mut self, clips: &[AudioClip], ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let x = self.tokens(clips)?;
        self.forward(&x, ctx)
    }

    /// Eval-mode class probabilities, one row per clip.
    pub fn predict_proba(&mut self, clips: &[AudioClip]) -> Result<Vec<Vec<f64>>> {
        let mut rng = seeded(0);
        let mut out = Vec::with_capacity(clips.len());
        let mut start = 0;
        while start < clips.len() {
            let frames = clips[start].frames();
            let mut end = start + 1;
            while end < clips.len() && end - start < 32 && clips[end].frames() == frames {
                end += 1;
            }
            let logits = self.forward_clips(&clips[start..end], &mut Ctx::new(Mode::Eval, &mut rng))?;
            let mut p: Vec<f64> = logits.data().iter().map(|v| v.f64()).collect();
            softmax_rows(&mut p, self.config.n_classes);
            out.extend(p.chunks_exact(self.config.n_classes).map(<[f64]>::to_vec));
            start = end;
        }
        Ok(out)
    }

    pub fn predict(&mut self, clips: &[AudioClip]) -> Result<Vec<usize>> {
        Ok(self.predict_proba(clips)?.iter().map(|p| argmax(p)).collect())
    }

    /// Same architecture and values at another precision.
    pub fn cast<U: Real>(&mut self) -> Result<Model<U>> {
        let mut other = Model::<U>::new(self.config.clone(), 0)?;
        let mut values = Vec::new();
        self.visit_params(&mut |_, p| values.push(p.cast::<U>()));
        self.visit_buffers(&mut |_, p| values.push(p.cast::<U>()));
        let mut it = values.into_iter();
        other.visit_params(&mut |_, p| p.data_mut().copy_from_slice(it.next().expect("same layout").data()));
        other.visit_buffers(&mut |_, p| p.data_mut().copy_from_slice(it.next().expect("same layout").data()));
        Ok(other)
    }
}

pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

impl<T: Real> Module<T> for Model<T> {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_, T>) {
        visit_child("cnn", &mut self.cnn, f);
        visit_child("embed", &mut self.embed, f);
        visit_child("encoder", &mut self.encoder, f);
        visit_child("head", &mut self.head, f);
    }

    fn visit_buffers(&mut self, f: &mut ParamVisitor<'_, T>) {
        visit_child_buffers("cnn", &mut self.cnn, f);
        visit_child_buffers("head", &mut self.head, f);
    }
}

impl<T: Real> Layer<T> for Model<T> {
    /// `[B, F, T]` tokens to `[B, C]` logits.
    fn forward(&mut self, x: &Tensor<T>, ctx: &mut Ctx<'_>) -> Result<Tensor<T>> {
        let h = self.cnn.forward(x, ctx)?;
        let h = self.embed.forward(&h, ctx)?;
        let h = self.encoder.forward(&h, ctx)?;
        self.head.forward(&h, ctx)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = self.head.backward(grad_out)?;
        let g = self.encoder.backward(&g)?;
        let g = self.embed.backward(&g)?;
        self.cnn.backward(&g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, GradCheckConfig};

    fn toy(variant: ClassifierVariant, t: usize) -> ModelConfig {
        let mel = MelParams { n_mels: 8, ..Default::default() };
        let mut cfg = ModelConfig::for_input(mel, 8000, 1.0, 3, 4, 8).unwrap();
        cfg.cnn = plan_cnn(t, 4, 8).unwrap().with_widths(6, 3, 1);
        cfg.n_transformer_blocks = 2;
        cfg.n_heads = 2;
        cfg.mlp_ratio = 2;
        cfg.classifier = variant;
        cfg
    }

    fn walk(m: &mut Model<f32>) -> usize {
        let mut n = 0;
        m.visit_params(&mut |_, p| n += p.numel());
        n
    }

    #[test]
    fn parameter_count_matches_walker() {
        for v in [ClassifierVariant::Long, ClassifierVariant::Short] {
            let mut m = Model::<f32>::new(toy(v, 98), 1).unwrap();
            assert_eq!(m.parameter_count(), walk(&mut m));
        }
        let big = ModelConfig::for_input(MelParams::default(), 16000, 5.0, 10, 12, 64).unwrap();
        let mut m = Model::<f32>::new(big, 1).unwrap();
        assert_eq!(m.parameter_count(), walk(&mut m));
    }

    #[test]
    fn parameter_names_are_unique() {
        let mut m = Model::<f32>::new(toy(ClassifierVariant::Short, 98), 1).unwrap();
        let mut names = Vec::new();
        m.visit_params(&mut |n, _| names.push(n.to_string()));
        m.visit_buffers(&mut |n, _| names.push(n.to_string()));
        let before = names.len();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), before);
        assert!(names.contains(&"cnn.block0.mix.weight".to_string()), "{names:?}");
    }

    #[test]
    fn encoder_with_no_blocks_is_identity() {
        let mut r = seeded(1);
        let mut e = Encoder::<f64>::new(8, 0, 2, 2, &mut r).unwrap();
        let x = Tensor::randn(&[2, 5, 8], 1.0, &mut r);
        assert_eq!(e.forward(&x, &mut Ctx::new(Mode::Train, &mut r)).unwrap().data(), x.data());
    }

    #[test]
    fn attention_weights_are_distributions() {
        let mut r = seeded(2);
        let mut e = Encoder::<f64>::new(8, 2, 2, 2, &mut r).unwrap();
        e.forward(&Tensor::randn(&[2, 6, 8], 1.0, &mut r), &mut Ctx::new(Mode::Eval, &mut r)).unwrap();
        for b in &e.blocks {
            for row in b.attn.last_weights().unwrap().chunks_exact(6) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn interior_permutation_equivariance() {
        let mut r = seeded(3);
        let (d, k) = (8, 5);
        let mut embed = VerticalEmbed::<f64>::new(d, k, 0.15, &mut r);
        let mut enc = Encoder::<f64>::new(d, 2, 2, 2, &mut r).unwrap();
        let x = Tensor::randn(&[1, d, k], 1.0, &mut r);
        let perm = [3, 0, 4, 1, 2];

        let mut px = vec![0.0; d * k];
        for c in 0..d {
            for (j, &src) in perm.iter().enumerate() {
                px[c * k + j] = x.data()[c * k + src];
            }
        }
        let mut pembed = embed.clone();
        for (j, &src) in perm.iter().enumerate() {
            let row = embed.positions.data()[(src + 1) * d..(src + 2) * d].to_vec();
            pembed.positions.data_mut()[(j + 1) * d..(j + 2) * d].copy_from_slice(&row);
        }

        let mut run = |e: &mut VerticalEmbed<f64>, x: &Tensor<f64>| {
            let s = e.forward(x, &mut Ctx::new(Mode::Eval, &mut seeded(0))).unwrap();
            enc.forward(&s, &mut Ctx::new(Mode::Eval, &mut seeded(0))).unwrap()
        };
        let y = run(&mut embed, &x);
        let py = run(&mut pembed, &Tensor::from_vec(&[1, d, k], px).unwrap());
        let row = |t: &Tensor<f64>, s: usize| t.data()[s * d..(s + 1) * d].to_vec();
        for s in [0, k + 1] {
            for (a, b) in row(&y, s).iter().zip(row(&py, s)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        for (j, &src) in perm.iter().enumerate() {
            for (a, b) in row(&y, src + 1).iter().zip(row(&py, j + 1)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn clips_at_different_rates_need_no_resampling() {
        let cfg = toy(ClassifierVariant::Short, 98);
        let mut m = Model::<f32>::new(cfg, 4).unwrap();
        for rate in [16000, 48000] {
            let clip = AudioClip::mono((0..rate).map(|i| ((i as f32) * 0.05).sin() * 0.3).collect(), rate).unwrap();
            let p = m.predict_proba(&[clip.clone(), clip]).unwrap();
            assert_eq!(p.len(), 2);
            assert_eq!(p[0], p[1]);
            assert_eq!(p[0].len(), 3);
            assert!(p[0].iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut m = Model::<f32>::new(toy(ClassifierVariant::Long, 98), 5).unwrap();
        let clip = AudioClip::mono((0..8000).map(|i| ((i as f32) * 0.01).cos() * 0.2).collect(), 8000).unwrap();
        let a = m.predict_proba(std::slice::from_ref(&clip)).unwrap();
        let b = m.predict_proba(&[clip]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn whole_model_gradients() {
        for v in [ClassifierVariant::Long, ClassifierVariant::Short] {
            let mut m = Model::<f64>::new(toy(v, 30), 6).unwrap();
            let cfg = GradCheckConfig { trials: 2, max_points: 8, ..Default::default() };
            let rep = grad_check(&mut m, &[&[4, 8, 30]], &cfg).unwrap();
            assert!(rep.passed(), "{v:?}: {rep:?}");
        }
    }
}
