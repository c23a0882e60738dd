//! Second-stage model: speaker-profile based overlap-aware post-processing.
//!
//! A profile extractor (temporal convolutions, global mean+std pooling,
//! embedding layer) is trained with an additive angular margin loss. The
//! post-processor reuses its convolutional frontend with windowed pooling to
//! encode every frame, scores each (profile, frame) pair with a
//! context-independent feed-forward scorer and a context-dependent
//! self-attention scorer, and feeds both score sequences to an LSTM that
//! predicts the power-set class of each frame in profile order.

use std::f64::consts::PI;
use std::fmt::Write as _;

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::activity::ActivityMatrix;
use crate::eend_ola::decode_pse_posteriors;
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::nn::{self, loss, FeedForward, Linear, Lstm, MultiHeadAttention, ParamStore, TemporalConv};
use crate::pse::{PseCodebook, PseSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SoapConfig {
    pub input_dim: usize,
    pub encoder_channels: Vec<usize>,
    pub kernel: usize,
    /// Speaker embedding width; the frame encoder uses the same width.
    pub profile_dim: usize,
    /// Statistics pooling window, in model frames (10 frames = 1 s at the 100 ms grid).
    pub sp_window: usize,
    pub ci_hidden: usize,
    pub cd_layers: usize,
    pub cd_heads: usize,
    pub cd_ff_dim: usize,
    pub lstm_hidden: usize,
    /// Weight of the scorer guidance loss.
    pub lambda: f64,
    pub arc_margin: f64,
    pub arc_scale: f64,
    pub s_max: usize,
    pub k_max: usize,
}

impl Default for SoapConfig {
    fn default() -> Self {
        Self {
            input_dim: 345,
            encoder_channels: vec![32, 64, 128],
            kernel: 3,
            profile_dim: 256,
            sp_window: 10,
            ci_hidden: 256,
            cd_layers: 2,
            cd_heads: 4,
            cd_ff_dim: 1024,
            lstm_hidden: 256,
            lambda: 0.1,
            arc_margin: 0.25,
            arc_scale: 8.0,
            s_max: 8,
            k_max: 3,
        }
    }
}

impl SoapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sp_window == 0 {
            return Err(Error::Config("sp_window must be >= 1".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.encoder_channels.is_empty() || self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder_channels must be non-empty and positive".into()));
        }
        if self.cd_heads == 0 || (2 * self.profile_dim) % self.cd_heads != 0 {
            return Err(Error::Config(format!(
                "CD width {} not divisible by {} heads",
                2 * self.profile_dim,
                self.cd_heads
            )));
        }
        if self.k_max > self.s_max || self.s_max == 0 {
            return Err(Error::Config("need 0 < s_max and k_max <= s_max".into()));
        }
        Ok(())
    }

    pub fn n_classes(&self) -> usize {
        crate::pse::class_count(self.s_max, self.k_max)
    }
}

/// Temporal convolution stack with ReLU activations.
#[derive(Debug, Clone)]
pub struct ConvFrontend {
    convs: Vec<TemporalConv>,
}

impl ConvFrontend {
    pub fn new(store: &mut ParamStore, name: &str, input_dim: usize, channels: &[usize], kernel: usize) -> Result<Self> {
        let mut convs = Vec::with_capacity(channels.len());
        let mut in_dim = input_dim;
        for (i, &c) in channels.iter().enumerate() {
            convs.push(TemporalConv::new(store, &format!("{name}.conv{i}"), in_dim, c, kernel)?);
            in_dim = c;
        }
        Ok(Self { convs })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = conv.forward(&h)?.relu()?;
        }
        Ok(h)
    }
}

/// Weighted mean and standard deviation: `weights` is `(T', T)` (or batched
/// `(B, T', T)`), each row summing to one; `x` is `(B, T, C)`. Returns `(B, T', 2C)`.
pub fn weighted_stats(x: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let mean = weights.broadcast_matmul(x)?;
    let mean_sq = weights.broadcast_matmul(&x.sqr()?)?;
    let var = (mean_sq - mean.sqr()?)?.relu()?;
    let std = (var + 1e-5)?.sqrt()?;
    Ok(Tensor::cat(&[&mean, &std], D::Minus1)?)
}

/// Inclusive frame range `[t - l/2, t + l/2]` clipped to the sequence.
pub fn pooling_window(t: usize, frames: usize, window: usize) -> (usize, usize) {
    let half = window / 2;
    (t.saturating_sub(half), (t + half).min(frames - 1))
}

/// `T×T` row-stochastic matrix averaging each frame's pooling window.
pub fn window_matrix(frames: usize, window: usize) -> Vec<f32> {
    let mut w = vec![0.0f32; frames * frames];
    for t in 0..frames {
        let (lo, hi) = pooling_window(t, frames, window);
        let n = (hi - lo + 1) as f32;
        for j in lo..=hi {
            w[t * frames + j] = 1.0 / n;
        }
    }
    w
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub vector: Vec<f32>,
    pub speaker_id: String,
    pub valid: bool,
}

impl SpeakerProfile {
    pub fn invalid(dim: usize, speaker_id: impl Into<String>) -> Self {
        Self {
            vector: vec![0.0; dim],
            speaker_id: speaker_id.into(),
            valid: false,
        }
    }

    pub fn cosine(&self, other: &SpeakerProfile) -> f32 {
        let dot: f32 = self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum();
        let na: f32 = self.vector.iter().map(|a| a * a).sum::<f32>().sqrt();
        let nb: f32 = other.vector.iter().map(|a| a * a).sum::<f32>().sqrt();
        if na == 0.0 || nb == 0.0 {
            0.0
        } else {
            dot / (na * nb)
        }
    }
}

/// Fixed bank of `s_max` profile slots; invalid slots hold zero vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSet {
    pub profiles: Vec<SpeakerProfile>,
}

/// Fewest selected frames a profile may be pooled from.
pub const DEFAULT_MIN_PROFILE_FRAMES: usize = 25;

const INVALID_ID: &str = "<none>";

impl ProfileSet {
    /// Places `profiles` in the first slots and pads with invalid ones.
    pub fn new(mut profiles: Vec<SpeakerProfile>, s_max: usize, dim: usize) -> Result<Self> {
        if profiles.len() > s_max {
            return Err(Error::InvalidInput(format!(
                "{} profiles exceed s_max={s_max}",
                profiles.len()
            )));
        }
        for p in &mut profiles {
            if p.vector.len() != dim {
                return Err(Error::InvalidInput(format!("profile of dim {} (expected {dim})", p.vector.len())));
            }
            if !p.valid {
                p.vector = vec![0.0; dim];
            }
        }
        while profiles.len() < s_max {
            profiles.push(SpeakerProfile::invalid(dim, INVALID_ID));
        }
        Ok(Self { profiles })
    }

    pub fn count(&self) -> usize {
        self.profiles.iter().filter(|p| p.valid).count()
    }

    pub fn valid_mask(&self) -> Vec<bool> {
        self.profiles.iter().map(|p| p.valid).collect()
    }

    pub fn dim(&self) -> usize {
        self.profiles.first().map(|p| p.vector.len()).unwrap_or(0)
    }

    pub fn to_tensor(&self, like_dtype: DType, device: &candle_core::Device) -> Result<Tensor> {
        let flat: Vec<f32> = self.profiles.iter().flat_map(|p| p.vector.iter().copied()).collect();
        Ok(Tensor::from_vec(flat, (self.profiles.len(), self.dim()), device)?.to_dtype(like_dtype)?)
    }

    /// One row per slot: `speaker_id` followed by the vector; empty slots use `<none>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for p in &self.profiles {
            let id = if p.valid { p.speaker_id.as_str() } else { INVALID_ID };
            let _ = write!(out, "{id}");
            for v in &p.vector {
                let _ = write!(out, " {v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut profiles = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut parts = line.split_whitespace();
            let id = parts.next().unwrap_or_default();
            let vector = parts
                .map(|v| v.parse::<f32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Parse {
                    line: i + 1,
                    msg: "bad profile value".into(),
                })?;
            let valid = id != INVALID_ID;
            profiles.push(SpeakerProfile {
                vector,
                speaker_id: id.to_string(),
                valid,
            });
        }
        let (n, dim) = (profiles.len(), profiles.first().map(|p| p.vector.len()).unwrap_or(0));
        Self::new(profiles, n, dim)
    }
}

/// Additive angular margin softmax loss, averaged over the batch.
///
/// `embeddings` `(B, P)` and `class_weights` `(C, P)` are expected to be
/// L2-normalized. The target logit `cos(theta)` becomes `cos(theta + m)` when
/// `theta + m <= pi`, and `cos(theta) - m sin(m)` beyond that point, keeping the
/// target logit monotone in the angle. All logits are scaled by `s`.
pub fn arcface_loss(embeddings: &Tensor, class_weights: &Tensor, labels: &[usize], margin: f64, scale: f64) -> Result<Tensor> {
    let (b, _) = embeddings.dims2()?;
    let (c, _) = class_weights.dims2()?;
    if labels.len() != b || labels.iter().any(|&l| l >= c) {
        return Err(Error::InvalidInput(format!("{} labels for {b} embeddings over {c} classes", labels.len())));
    }
    let device = embeddings.device();
    let dtype = embeddings.dtype();
    let cosine = embeddings.matmul(&class_weights.t()?)?;
    let idx = Tensor::from_vec(labels.iter().map(|&l| l as u32).collect::<Vec<_>>(), (b, 1), device)?;
    let target = cosine.gather(&idx, 1)?;
    let sine = target.sqr()?.affine(-1.0, 1.0)?.clamp(1e-12, 1.0)?.sqrt()?;
    let with_margin = ((&target * margin.cos())? - (sine * margin.sin())?)?;
    let fallback = (&target - (PI - margin).sin() * margin)?;
    let threshold = (PI - margin).cos();
    let host: Vec<f64> = target.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let use_margin = Tensor::from_vec(
        host.iter().map(|&x| if x > threshold { 1.0f32 } else { 0.0 }).collect::<Vec<_>>(),
        (b, 1),
        device,
    )?
    .to_dtype(dtype)?;
    let adjusted = ((&with_margin * &use_margin)? + (fallback * use_margin.affine(-1.0, 1.0)?)?)?;
    let mut onehot = vec![0.0f32; b * c];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * c + l] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (b, c), device)?.to_dtype(dtype)?;
    let logits = ((cosine + onehot.broadcast_mul(&(adjusted - &target)?)?)? * scale)?;
    let log_probs = nn::log_softmax_last(&logits)?;
    Ok(log_probs.gather(&idx, 1)?.mean_all()?.neg()?)
}

/// Speaker embedding network trained with [`arcface_loss`].
pub struct ProfileExtractor {
    cfg: SoapConfig,
    store: ParamStore,
    frontend: ConvFrontend,
    emb: Linear,
    class_weights: Tensor,
    n_classes: usize,
}

impl ProfileExtractor {
    /// `n_train_speakers` sizes the margin-softmax classifier.
    pub fn new(cfg: SoapConfig, n_train_speakers: usize, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let frontend = ConvFrontend::new(&mut store, "frontend", cfg.input_dim, &cfg.encoder_channels, cfg.kernel)?;
        let pooled = 2 * cfg.encoder_channels.last().copied().unwrap_or(1);
        let emb = Linear::new(&mut store, "emb", pooled, cfg.profile_dim)?;
        let class_weights = store.uniform("arc.weight", &[n_train_speakers.max(1), cfg.profile_dim], 1.0)?;
        Ok(Self {
            cfg,
            store,
            frontend,
            emb,
            class_weights,
            n_classes: n_train_speakers.max(1),
        })
    }

    pub fn config(&self) -> &SoapConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    /// Unit-norm embeddings `(B, P)` of `(B, T, F)` inputs, pooled over all frames.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.dim(1)?;
        let weights = Tensor::from_vec(vec![1.0f32 / t as f32; t], (1, t), x.device())?.to_dtype(x.dtype())?;
        let pooled = weighted_stats(&self.frontend.forward(x)?, &weights)?.squeeze(1)?;
        loss::l2_normalize(&self.emb.forward(&pooled)?)
    }

    /// Margin-softmax loss for a batch of equal-length single-speaker crops.
    pub fn classification_loss(&self, x: &Tensor, labels: &[usize]) -> Result<Tensor> {
        let emb = self.embed(x)?;
        let w = loss::l2_normalize(&self.class_weights)?;
        arcface_loss(&emb, &w, labels, self.cfg.arc_margin, self.cfg.arc_scale)
    }

    /// Predicted training-speaker class for each embedding row.
    pub fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        let emb = self.embed(x)?;
        let w = loss::l2_normalize(&self.class_weights)?;
        Ok(emb.matmul(&w.t()?)?.argmax(D::Minus1)?.to_vec1::<u32>()?.into_iter().map(|c| c as usize).collect())
    }

    /// One profile per mask. Selected frames are gathered into a contiguous
    /// sequence, encoded and pooled; masks selecting fewer than `min_frames`
    /// frames give invalid profiles.
    pub fn extract_profiles(
        &self,
        features: &FeatureSequence,
        masks: &[Vec<bool>],
        ids: &[String],
        min_frames: usize,
    ) -> Result<Vec<SpeakerProfile>> {
        let t = features.frames();
        if masks.iter().any(|m| m.len() != t) || ids.len() != masks.len() {
            return Err(Error::InvalidInput("mask/id lengths do not match the sequence".into()));
        }
        if features.dim() != self.cfg.input_dim {
            return Err(Error::Config(format!(
                "feature dim {} does not match extractor input {}",
                features.dim(),
                self.cfg.input_dim
            )));
        }
        let mut out = Vec::with_capacity(masks.len());
        for (mask, id) in masks.iter().zip(ids) {
            let selected: Vec<usize> = (0..t).filter(|&i| mask[i]).collect();
            if selected.len() < min_frames.max(1) {
                out.push(SpeakerProfile::invalid(self.cfg.profile_dim, id.clone()));
                continue;
            }
            let data: Vec<f32> = selected.iter().flat_map(|&i| features.row(i).iter().copied()).collect();
            let x = Tensor::from_vec(data, (1, selected.len(), features.dim()), self.store.device())?.to_dtype(self.store.dtype())?;
            let v = self.embed(&x)?;
            out.push(SpeakerProfile {
                vector: v.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?,
                speaker_id: id.clone(),
                valid: true,
            });
        }
        Ok(out)
    }

    pub fn extract_profile(&self, features: &FeatureSequence, mask: &[bool], id: &str, min_frames: usize) -> Result<SpeakerProfile> {
        Ok(self.extract_profiles(features, &[mask.to_vec()], &[id.to_string()], min_frames)?.remove(0))
    }
}

/// Scorer outputs, each `(B, T, s_max)`.
#[derive(Debug, Clone)]
pub struct ScorerOutputs {
    pub ci: Tensor,
    pub cd: Tensor,
}

/// Residual self-attention layers of the context-dependent scorer, per layer output.
#[derive(Debug, Clone)]
pub struct CdScorerState {
    pub z_layers: Vec<Tensor>,
}

#[derive(Debug, Clone)]
struct CdLayer {
    attn: MultiHeadAttention,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct Stage2Losses {
    pub l_ce: Tensor,
    pub l_guide: Tensor,
    pub total: Tensor,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage2LossValues {
    pub l_ce: f64,
    pub l_guide: f64,
    pub total: f64,
}

impl Stage2Losses {
    pub fn values(&self) -> Result<Stage2LossValues> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(Stage2LossValues {
            l_ce: v(&self.l_ce)?,
            l_guide: v(&self.l_guide)?,
            total: v(&self.total)?,
        })
    }
}

/// Stage-2 objective for one recording. `labels` is `T×s_max` in profile
/// slot order; invalid slots are masked from the guidance term and cleared
/// from the class targets.
pub fn stage2_loss(
    log_probs: &Tensor,
    ci: &Tensor,
    cd: &Tensor,
    labels: &ActivityMatrix,
    valid: &[bool],
    lambda: f64,
    codebook: &PseCodebook,
) -> Result<Stage2Losses> {
    let (t, s) = ci.dims2()?;
    if labels.frames() != t || labels.speakers() != s || valid.len() != s || s != codebook.s_max() {
        return Err(Error::InvalidInput(format!(
            "labels {}x{} / {} valid flags vs scores {t}x{s}",
            labels.frames(),
            labels.speakers(),
            valid.len()
        )));
    }
    let masked = ActivityMatrix::from_fn(t, s, |ti, si| valid[si] && labels.get(ti, si));
    let targets = codebook.encode_matrix(&masked)?;
    let l_ce = loss::cross_entropy_mean(log_probs, &targets.classes)?;
    let y = Tensor::from_vec(masked.to_f32(), (t, s), ci.device())?.to_dtype(ci.dtype())?;
    let mask_row: Vec<f32> = valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect();
    let mask = Tensor::from_vec(mask_row, (1, s), ci.device())?.to_dtype(ci.dtype())?.broadcast_as((t, s))?.contiguous()?;
    let l_guide = ((loss::bce_sum(ci, &y, &mask)? + loss::bce_sum(cd, &y, &mask)?)? / t as f64)?;
    let total = (&l_ce + (&l_guide * lambda)?)?;
    Ok(Stage2Losses { l_ce, l_guide, total })
}

/// Output of stage-2 inference on one recording.
#[derive(Debug, Clone)]
pub struct SoapOutput {
    /// `T×s_max` activity in profile slot order.
    pub activity: ActivityMatrix,
    pub classes: PseSequence,
}

pub struct SoapModel {
    cfg: SoapConfig,
    store: ParamStore,
    codebook: PseCodebook,
    frontend: ConvFrontend,
    emb: Linear,
    ci_layers: Vec<Linear>,
    ci_out: Linear,
    cd_layers: Vec<CdLayer>,
    cd_out: Linear,
    pse_lstm: Lstm,
    pse_out: Linear,
}

/// Parameter-name prefix of the frame encoder (frontend and embedding layer).
pub const ENCODER_PREFIX: &str = "encoder.";

impl SoapModel {
    pub fn new(cfg: SoapConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let p = cfg.profile_dim;
        let frontend = ConvFrontend::new(&mut store, "encoder.frontend", cfg.input_dim, &cfg.encoder_channels, cfg.kernel)?;
        let pooled = 2 * cfg.encoder_channels.last().copied().unwrap_or(1);
        let emb = Linear::new(&mut store, "encoder.emb", pooled, p)?;
        let ci_layers = vec![
            Linear::new(&mut store, "ci.layer0", 2 * p, cfg.ci_hidden)?,
            Linear::new(&mut store, "ci.layer1", cfg.ci_hidden, cfg.ci_hidden)?,
            Linear::new(&mut store, "ci.layer2", cfg.ci_hidden, cfg.ci_hidden)?,
        ];
        let ci_out = Linear::new(&mut store, "ci.out", cfg.ci_hidden, 1)?;
        let z = 2 * p;
        let cd_layers = (0..cfg.cd_layers)
            .map(|l| {
                Ok(CdLayer {
                    attn: MultiHeadAttention::new(&mut store, &format!("cd.layer{l}.attn"), z, z, cfg.cd_heads)?,
                    ff: FeedForward::new(&mut store, &format!("cd.layer{l}.ff"), z, cfg.cd_ff_dim)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let cd_out = Linear::new(&mut store, "cd.out", z, 1)?;
        let pse_lstm = Lstm::new(&mut store, "pse.lstm", 2 * cfg.s_max, cfg.lstm_hidden)?;
        let pse_out = Linear::new(&mut store, "pse.out", cfg.lstm_hidden, cfg.n_classes())?;
        let codebook = PseCodebook::new(cfg.s_max, cfg.k_max)?;
        Ok(Self {
            cfg,
            store,
            codebook,
            frontend,
            emb,
            ci_layers,
            ci_out,
            cd_layers,
            cd_out,
            pse_lstm,
            pse_out,
        })
    }

    pub fn config(&self) -> &SoapConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn codebook(&self) -> &PseCodebook {
        &self.codebook
    }

    /// Copies the extractor's frontend and embedding layer into the frame encoder.
    pub fn init_encoder_from(&self, extractor: &ProfileExtractor) -> Result<()> {
        self.store.copy_prefix(extractor.store(), "frontend.", "encoder.frontend.")?;
        self.store.copy_prefix(extractor.store(), "emb.", "encoder.emb.")?;
        Ok(())
    }

    pub fn features_tensor(&self, features: &[&FeatureSequence]) -> Result<Tensor> {
        let first = features.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        let (t, f) = (first.frames(), first.dim());
        if f != self.cfg.input_dim {
            return Err(Error::Config(format!("feature dim {f} does not match SOAP input {}", self.cfg.input_dim)));
        }
        let mut data = Vec::with_capacity(features.len() * t * f);
        for x in features {
            if x.frames() != t || x.dim() != f {
                return Err(Error::InvalidInput("batch items must share a shape".into()));
            }
            data.extend_from_slice(x.data());
        }
        Ok(Tensor::from_vec(data, (features.len(), t, f), self.store.device())?.to_dtype(self.store.dtype())?)
    }

    /// `(B, T, F)` features to `(B, T, P)` frame encodings with windowed statistics pooling.
    pub fn encode_windowed(&self, x: &Tensor) -> Result<Tensor> {
        let t = x.dim(1)?;
        let w = Tensor::from_vec(window_matrix(t, self.cfg.sp_window), (t, t), x.device())?.to_dtype(x.dtype())?;
        self.emb.forward(&weighted_stats(&self.frontend.forward(x)?, &w)?)
    }

    /// Context-independent scores `(B, T, S)` from encodings `(B, T, P)` and profiles `(B, S, P)`.
    pub fn ci_score(&self, h: &Tensor, profiles: &Tensor) -> Result<Tensor> {
        let (b, t, p) = h.dims3()?;
        let s = profiles.dim(1)?;
        let v = profiles.unsqueeze(2)?.broadcast_as((b, s, t, p))?;
        let hh = h.unsqueeze(1)?.broadcast_as((b, s, t, p))?;
        let mut z = Tensor::cat(&[&v, &hh], 3)?.contiguous()?;
        for layer in &self.ci_layers {
            z = layer.forward(&z)?.tanh()?;
        }
        let scores = candle_nn::ops::sigmoid(&self.ci_out.forward(&z)?)?.squeeze(3)?;
        Ok(scores.transpose(1, 2)?.contiguous()?)
    }

    /// Context-dependent scores `(B, T, S)` and the per-layer sequences.
    pub fn cd_score(&self, h: &Tensor, profiles: &Tensor) -> Result<(Tensor, CdScorerState)> {
        let (b, t, p) = h.dims3()?;
        let s = profiles.dim(1)?;
        let hh = h.unsqueeze(1)?.broadcast_as((b, s, t, p))?;
        let v = profiles.unsqueeze(2)?.broadcast_as((b, s, t, p))?;
        let mut z = Tensor::cat(&[&hh, &v], 3)?.reshape((b * s, t, 2 * p))?;
        let mut z_layers = vec![z.clone()];
        for layer in &self.cd_layers {
            let z_bar = (&z + layer.attn.forward(&z)?)?;
            z = (&z_bar + layer.ff.forward(&z_bar)?)?;
            z_layers.push(z.clone());
        }
        let scores = candle_nn::ops::sigmoid(&self.cd_out.forward(&z)?)?.reshape((b, s, t))?;
        Ok((scores.transpose(1, 2)?.contiguous()?, CdScorerState { z_layers }))
    }

    /// Class log-probabilities `(B, T, N)` from concatenated CI and CD scores.
    pub fn pse_log_probs(&self, scores: &ScorerOutputs) -> Result<Tensor> {
        let input = Tensor::cat(&[&scores.ci, &scores.cd], D::Minus1)?;
        let (h, _) = self.pse_lstm.forward(&input, None)?;
        nn::log_softmax_last(&self.pse_out.forward(&h)?)
    }

    /// Full forward pass: `(B, T, F)` features and `(B, S, P)` profiles.
    pub fn forward(&self, x: &Tensor, profiles: &Tensor) -> Result<(ScorerOutputs, Tensor)> {
        let h = self.encode_windowed(x)?;
        let ci = self.ci_score(&h, profiles)?;
        let (cd, _) = self.cd_score(&h, profiles)?;
        let scores = ScorerOutputs { ci, cd };
        let log_probs = self.pse_log_probs(&scores)?;
        Ok((scores, log_probs))
    }

    /// Mean stage-2 loss over equal-length recordings; labels are `T×s_max` in profile order.
    pub fn batch_loss(
        &self,
        features: &[&FeatureSequence],
        profiles: &[&ProfileSet],
        labels: &[&ActivityMatrix],
        lambda: f64,
    ) -> Result<(Tensor, Vec<Stage2Losses>)> {
        if features.len() != profiles.len() || features.len() != labels.len() {
            return Err(Error::InvalidInput("batch components differ in length".into()));
        }
        let x = self.features_tensor(features)?;
        let v = Tensor::stack(
            &profiles
                .iter()
                .map(|p| p.to_tensor(self.store.dtype(), self.store.device()))
                .collect::<Result<Vec<_>>>()?,
            0,
        )?;
        let (scores, log_probs) = self.forward(&x, &v)?;
        let mut items = Vec::with_capacity(labels.len());
        let mut total: Option<Tensor> = None;
        for (i, l) in labels.iter().enumerate() {
            let item = stage2_loss(
                &log_probs.get(i)?,
                &scores.ci.get(i)?,
                &scores.cd.get(i)?,
                l,
                &profiles[i].valid_mask(),
                lambda,
                &self.codebook,
            )?;
            total = Some(match total {
                None => item.total.clone(),
                Some(acc) => (acc + &item.total)?,
            });
            items.push(item);
        }
        let total = total.ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        Ok(((total / labels.len() as f64)?, items))
    }

    /// Frame activity in profile slot order; invalid slots are forced silent.
    pub fn infer(&self, features: &FeatureSequence, profiles: &ProfileSet) -> Result<SoapOutput> {
        if profiles.count() == 0 {
            return Err(Error::InvalidInput("no valid speaker profiles".into()));
        }
        if profiles.profiles.len() != self.cfg.s_max {
            return Err(Error::InvalidInput(format!(
                "{} profile slots, model expects {}",
                profiles.profiles.len(),
                self.cfg.s_max
            )));
        }
        let x = self.features_tensor(&[features])?;
        let v = profiles.to_tensor(self.store.dtype(), self.store.device())?.unsqueeze(0)?;
        let (_, log_probs) = self.forward(&x, &v)?;
        let posteriors: Vec<f32> = log_probs.exp()?.squeeze(0)?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let (mut activity, classes) = decode_pse_posteriors(&posteriors, self.cfg.n_classes(), self.cfg.s_max, &self.codebook)?;
        let valid = profiles.valid_mask();
        for t in 0..activity.frames() {
            for (s, &ok) in valid.iter().enumerate() {
                if !ok {
                    activity.set(t, s, false);
                }
            }
        }
        Ok(SoapOutput { activity, classes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn tiny() -> SoapConfig {
        SoapConfig {
            input_dim: 5,
            encoder_channels: vec![4, 6],
            profile_dim: 4,
            sp_window: 4,
            ci_hidden: 6,
            cd_layers: 1,
            cd_heads: 2,
            cd_ff_dim: 8,
            lstm_hidden: 6,
            s_max: 3,
            k_max: 2,
            ..SoapConfig::default()
        }
    }

    #[test]
    fn defaults_echo_margin_settings() {
        let cfg = SoapConfig::default();
        assert_eq!(cfg.arc_margin, 0.25);
        assert_eq!(cfg.arc_scale, 8.0);
        assert_eq!(cfg.lambda, 0.1);
        assert_eq!(cfg.n_classes(), 93);
    }

    #[test]
    fn pooling_windows() {
        assert_eq!(pooling_window(50, 100, 100), (0, 99));
        assert_eq!(pooling_window(0, 10, 4), (0, 2));
        assert_eq!(pooling_window(9, 10, 4), (7, 9));
        let w = window_matrix(6, 2);
        for t in 0..6 {
            let row: f32 = w[t * 6..(t + 1) * 6].iter().sum();
            assert!((row - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn arcface_reduces_to_cross_entropy() {
        let dev = Device::Cpu;
        let e = loss::l2_normalize(&Tensor::new(&[[0.3f64, -0.2, 0.9], [0.1, 0.8, -0.4]], &dev).unwrap()).unwrap();
        let w = loss::l2_normalize(&Tensor::new(&[[1.0f64, 0.0, 0.2], [0.0, 1.0, 0.1], [0.5, 0.5, -1.0]], &dev).unwrap()).unwrap();
        let labels = [2usize, 1];
        let plain = arcface_loss(&e, &w, &labels, 0.0, 1.0).unwrap().to_scalar::<f64>().unwrap();
        let cos: Vec<Vec<f64>> = e.matmul(&w.t().unwrap()).unwrap().to_vec2().unwrap();
        let ce: f64 = cos
            .iter()
            .zip(labels)
            .map(|(row, l)| {
                let lse = row.iter().map(|x| x.exp()).sum::<f64>().ln();
                lse - row[l]
            })
            .sum::<f64>()
            / 2.0;
        assert!((plain - ce).abs() < 1e-12);
        let with_margin = arcface_loss(&e, &w, &labels, 0.25, 1.0).unwrap().to_scalar::<f64>().unwrap();
        assert!(with_margin >= plain);
    }

    #[test]
    fn profile_validity() {
        let ex = ProfileExtractor::new(tiny(), 3, DType::F32, 1).unwrap();
        let f = FeatureSequence::new(10, 5, (0..50).map(|v| (v as f32 * 0.37).sin()).collect(), 0.1, "x").unwrap();
        let p = ex.extract_profile(&f, &[true; 10], "a", DEFAULT_MIN_PROFILE_FRAMES.min(3)).unwrap();
        assert!(p.valid);
        let norm: f32 = p.vector.iter().map(|v| v * v).sum::<f32>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        let empty = ex.extract_profile(&f, &[false; 10], "b", 3).unwrap();
        assert!(!empty.valid);
        assert!(empty.vector.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn profile_text_round_trip() {
        let set = ProfileSet::new(
            vec![SpeakerProfile {
                vector: vec![0.5, -0.25, 1e-3],
                speaker_id: "spk1".into(),
                valid: true,
            }],
            3,
            3,
        )
        .unwrap();
        let back = ProfileSet::from_text(&set.to_text()).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.count(), 1);
    }

    #[test]
    fn infer_requires_profiles_and_masks_slots() {
        let m = SoapModel::new(tiny(), DType::F32, 2).unwrap();
        let f = FeatureSequence::new(8, 5, vec![0.1; 40], 0.1, "x").unwrap();
        let none = ProfileSet::new(vec![], 3, 4).unwrap();
        assert!(m.infer(&f, &none).is_err());
        let one = ProfileSet::new(
            vec![SpeakerProfile {
                vector: vec![0.5; 4],
                speaker_id: "a".into(),
                valid: true,
            }],
            3,
            4,
        )
        .unwrap();
        let out = m.infer(&f, &one).unwrap();
        assert!((0..8).all(|t| !out.activity.get(t, 1) && !out.activity.get(t, 2)));
    }
}
