//! First-stage model: a transformer speech encoder without positional
//! encoding, LSTM encoder-decoder attractors, and an LSTM head that classifies
//! each frame into a power-set class from embedding/attractor similarities.

use candle_core::{DType, Tensor, D};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::activity::ActivityMatrix;
use crate::alignment::{pit_align, PermutationResult};
use crate::error::{Error, Result};
use crate::features::FeatureSequence;
use crate::nn::{self, loss, LayerNorm, Linear, Lstm, LstmState, Mode, ParamStore, TransformerBlock};
use crate::pse::{PseCodebook, PseSequence};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EendOlaConfig {
    pub input_dim: usize,
    pub n_blocks: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub s_max: usize,
    pub k_max: usize,
    /// Hidden size of the power-set classification LSTM.
    pub lstm_hidden: usize,
    /// Weight of the attractor existence loss.
    pub alpha: f64,
    /// Existence probability at or above which an attractor counts as a speaker.
    pub attractor_threshold: f64,
    /// Shuffle embeddings along time before the attractor encoder.
    pub shuffle: bool,
}

impl Default for EendOlaConfig {
    fn default() -> Self {
        Self {
            input_dim: 345,
            n_blocks: 4,
            model_dim: 256,
            n_heads: 4,
            ff_dim: 1024,
            dropout: 0.1,
            s_max: 8,
            k_max: 3,
            lstm_hidden: 256,
            alpha: 1.0,
            attractor_threshold: 0.5,
            shuffle: true,
        }
    }
}

impl EendOlaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.n_heads
            )));
        }
        if self.input_dim == 0 || self.model_dim == 0 || self.lstm_hidden == 0 || self.s_max == 0 {
            return Err(Error::Config("dimensions must be positive".into()));
        }
        if self.k_max > self.s_max {
            return Err(Error::Config("k_max exceeds s_max".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Number of power-set classes `N`.
    pub fn n_classes(&self) -> usize {
        crate::pse::class_count(self.s_max, self.k_max)
    }
}

/// `T×D` speech embeddings of one recording.
#[derive(Debug, Clone)]
pub struct SpeechEmbeddingSeq {
    pub embeddings: Tensor,
}

impl SpeechEmbeddingSeq {
    pub fn frames(&self) -> usize {
        self.embeddings.dims()[0]
    }

    pub fn to_rows(&self) -> Result<Vec<Vec<f32>>> {
        Ok(self.embeddings.to_dtype(DType::F32)?.to_vec2()?)
    }
}

/// How many attractors to decode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EdaMode {
    /// Known speaker count: emit `n + 1` attractors, the last one being the stop attractor.
    Train(usize),
    /// Emit attractors while the existence probability stays at or above the threshold.
    Infer { threshold: f64 },
}

/// Decoded attractors with their existence probabilities and decoder states.
#[derive(Debug, Clone, PartialEq)]
pub struct AttractorSet {
    pub attractors: Vec<Vec<f32>>,
    pub existence_probs: Vec<f32>,
    pub hidden: Vec<Vec<f32>>,
    pub cell: Vec<Vec<f32>>,
}

impl AttractorSet {
    pub fn len(&self) -> usize {
        self.attractors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attractors.is_empty()
    }
}

/// Stage-1 loss components for one recording (scalar tensors).
#[derive(Debug, Clone)]
pub struct Stage1Losses {
    pub l_pse: Tensor,
    pub l_d: Tensor,
    pub l_a: Tensor,
    pub total: Tensor,
    pub perm: PermutationResult,
}

/// Plain-number view of [`Stage1Losses`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1LossValues {
    pub l_pse: f64,
    pub l_d: f64,
    pub l_a: f64,
    pub total: f64,
}

impl Stage1Losses {
    pub fn values(&self) -> Result<Stage1LossValues> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(Stage1LossValues {
            l_pse: v(&self.l_pse)?,
            l_d: v(&self.l_d)?,
            l_a: v(&self.l_a)?,
            total: v(&self.total)?,
        })
    }
}

fn scalar_zero(like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), like.dtype(), like.device())?)
}

/// Existence labels `(1, ..., 1, 0)` of length `n + 1`.
fn existence_targets(n: usize, like: &Tensor) -> Result<Tensor> {
    let mut l = vec![1.0f32; n + 1];
    l[n] = 0.0;
    Ok(Tensor::from_vec(l, n + 1, like.device())?.to_dtype(like.dtype())?)
}

/// Attractor existence loss: mean BCE of `p` (length `S+1`) against `(1, ..., 1, 0)`.
pub fn attractor_existence_loss(existence_probs: &Tensor, n_speakers: usize) -> Result<Tensor> {
    let len = existence_probs.dim(0)?;
    if len != n_speakers + 1 {
        return Err(Error::InvalidInput(format!(
            "{len} existence probabilities for {n_speakers} speakers"
        )));
    }
    let targets = existence_targets(n_speakers, existence_probs)?;
    let ones = existence_probs.ones_like()?;
    Ok((loss::bce_sum(existence_probs, &targets, &ones)? / (n_speakers + 1) as f64)?)
}

fn activity_tensor(labels: &ActivityMatrix, like: &Tensor) -> Result<Tensor> {
    Ok(Tensor::from_vec(labels.to_f32(), (labels.frames(), labels.speakers()), like.device())?.to_dtype(like.dtype())?)
}

/// Stage-1 objective for one recording.
///
/// * `pse_log_probs`: `T×N` log-probabilities from the power-set head.
/// * `existence_probs`: `S+1` attractor existence probabilities.
/// * `raw_posteriors`: `T×S` sigmoid similarities for the first `S` attractors.
/// * `labels`: `T×S` reference activity, in arbitrary speaker order.
///
/// The PIT permutation fixes the speaker order used for the power-set targets.
pub fn stage1_loss(
    pse_log_probs: &Tensor,
    existence_probs: &Tensor,
    raw_posteriors: &Tensor,
    labels: &ActivityMatrix,
    alpha: f64,
    codebook: &PseCodebook,
) -> Result<Stage1Losses> {
    let (t, s) = (labels.frames(), labels.speakers());
    if s > codebook.s_max() {
        return Err(Error::InvalidInput(format!(
            "{s} speakers exceed s_max={}",
            codebook.s_max()
        )));
    }
    let l_a = attractor_existence_loss(existence_probs, s)?;
    let (l_d, perm) = if s == 0 {
        (
            scalar_zero(pse_log_probs)?,
            PermutationResult {
                perm: Vec::new(),
                loss: 0.0,
                ties_broken: false,
            },
        )
    } else {
        let (pt, ps) = raw_posteriors.dims2()?;
        if (pt, ps) != (t, s) {
            return Err(Error::InvalidInput(format!(
                "posteriors {pt}x{ps} vs labels {t}x{s}"
            )));
        }
        let host: Vec<f64> = raw_posteriors.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let perm = pit_align(&host, labels)?;
        let ordered = activity_tensor(&labels.permute_columns(&perm.perm), raw_posteriors)?;
        let ones = ordered.ones_like()?;
        let l_d = (loss::bce_sum(raw_posteriors, &ordered, &ones)? / t as f64)?;
        (l_d, perm)
    };
    let ordered = labels.permute_columns(&perm.perm).with_speakers(codebook.s_max());
    let targets = codebook.encode_matrix(&ordered)?;
    let l_pse = loss::cross_entropy_mean(pse_log_probs, &targets.classes)?;
    let total = ((&l_pse + &l_d)? + (&l_a * alpha)?)?;
    Ok(Stage1Losses {
        l_pse,
        l_d,
        l_a,
        total,
        perm,
    })
}

/// Result of stage-1 inference on one recording.
#[derive(Debug, Clone)]
pub struct Stage1Output {
    /// `T×s_max` activity decoded from the power-set head; slots `>= n_speakers` are silent.
    pub activity: ActivityMatrix,
    pub classes: PseSequence,
    pub n_speakers: usize,
    /// Thresholded sigmoid similarities before the power-set head (`T×s_max`).
    pub before_pse: ActivityMatrix,
    pub attractors: AttractorSet,
    /// `T×N` class posteriors, row-major.
    pub posteriors: Vec<f32>,
}

/// Frame-wise argmax over `T×N` posteriors, decoded through the codebook,
/// with slots at or beyond `n_speakers` cleared.
pub fn decode_pse_posteriors(
    posteriors: &[f32],
    n_classes: usize,
    n_speakers: usize,
    codebook: &PseCodebook,
) -> Result<(ActivityMatrix, PseSequence)> {
    if n_classes != codebook.len() || posteriors.len() % n_classes.max(1) != 0 {
        return Err(Error::InvalidInput(format!(
            "{} posteriors do not form rows of {} classes (codebook {})",
            posteriors.len(),
            n_classes,
            codebook.len()
        )));
    }
    let classes: Vec<usize> = posteriors
        .chunks(n_classes)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f32::NEG_INFINITY), |best, (c, &p)| if p > best.1 { (c, p) } else { best })
                .0
        })
        .collect();
    let seq = PseSequence::new(classes, n_classes)?;
    let mut activity = codebook.decode_sequence(&seq)?;
    for t in 0..activity.frames() {
        for s in n_speakers..activity.speakers() {
            activity.set(t, s, false);
        }
    }
    Ok((activity, seq))
}

pub struct EendOla {
    cfg: EendOlaConfig,
    store: ParamStore,
    codebook: PseCodebook,
    input: Linear,
    blocks: Vec<TransformerBlock>,
    final_norm: LayerNorm,
    eda_encoder: Lstm,
    eda_decoder: Lstm,
    existence: Linear,
    pse_lstm: Lstm,
    pse_out: Linear,
}

impl EendOla {
    pub fn new(cfg: EendOlaConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let d = cfg.model_dim;
        let input = Linear::new(&mut store, "encoder.input", cfg.input_dim, d)?;
        let blocks = (0..cfg.n_blocks)
            .map(|i| TransformerBlock::new(&mut store, &format!("encoder.block{i}"), d, cfg.n_heads, cfg.ff_dim, cfg.dropout))
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(&mut store, "encoder.norm", d)?;
        let eda_encoder = Lstm::new(&mut store, "eda.encoder", d, d)?;
        let eda_decoder = Lstm::new(&mut store, "eda.decoder", d, d)?;
        let existence = Linear::new(&mut store, "eda.existence", d, 1)?;
        let pse_lstm = Lstm::new(&mut store, "pse.lstm", cfg.s_max, cfg.lstm_hidden)?;
        let pse_out = Linear::new(&mut store, "pse.out", cfg.lstm_hidden, cfg.n_classes())?;
        let codebook = PseCodebook::new(cfg.s_max, cfg.k_max)?;
        Ok(Self {
            cfg,
            store,
            codebook,
            input,
            blocks,
            final_norm,
            eda_encoder,
            eda_decoder,
            existence,
            pse_lstm,
            pse_out,
        })
    }

    pub fn config(&self) -> &EendOlaConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn codebook(&self) -> &PseCodebook {
        &self.codebook
    }

    pub fn features_tensor(&self, features: &[&FeatureSequence]) -> Result<Tensor> {
        let first = features.first().ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        let (t, f) = (first.frames(), first.dim());
        if f != self.cfg.input_dim {
            return Err(Error::Config(format!(
                "feature dim {f} does not match model input {}",
                self.cfg.input_dim
            )));
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

    /// `(B, T, F)` features to `(B, T, D)` embeddings.
    pub fn encode(&self, x: &Tensor, mode: &mut Mode) -> Result<Tensor> {
        let mut h = self.input.forward(x)?;
        for block in &self.blocks {
            h = block.forward(&h, mode)?;
        }
        self.final_norm.forward(&h)
    }

    pub fn encode_speech(&self, features: &FeatureSequence) -> Result<SpeechEmbeddingSeq> {
        let x = self.features_tensor(&[features])?;
        Ok(SpeechEmbeddingSeq {
            embeddings: self.encode(&x, &mut Mode::Eval)?.squeeze(0)?,
        })
    }

    /// Decodes `steps` attractors per batch item; item `i` shuffles its frames
    /// with `shuffle_seeds[i]`. Returns attractors `(B, steps, D)`, existence
    /// probabilities `(B, steps)` and the decoder states.
    pub fn attractors(&self, emb: &Tensor, steps: usize, shuffle_seeds: &[u64]) -> Result<(Tensor, Tensor, Vec<LstmState>)> {
        let (b, t, d) = emb.dims3()?;
        if shuffle_seeds.len() != b {
            return Err(Error::InvalidInput(format!("{} shuffle seeds for batch of {b}", shuffle_seeds.len())));
        }
        let encoder_input = if self.cfg.shuffle {
            let mut rows = Vec::with_capacity(b);
            for i in 0..b {
                let mut order: Vec<u32> = (0..t as u32).collect();
                order.shuffle(&mut nn::seeded_rng(shuffle_seeds[i]));
                let idx = Tensor::from_vec(order, t, emb.device())?;
                rows.push(emb.get(i)?.index_select(&idx, 0)?);
            }
            Tensor::stack(&rows, 0)?
        } else {
            emb.clone()
        };
        let (_, state) = self.eda_encoder.forward(&encoder_input, None)?;
        let zeros = Tensor::zeros((b, steps, d), emb.dtype(), emb.device())?;
        let states = self.eda_decoder.forward_states(&zeros, Some(state))?;
        let attractors = Tensor::stack(&states.iter().map(|s| s.h.clone()).collect::<Vec<_>>(), 1)?;
        let probs = candle_nn::ops::sigmoid(&self.existence.forward(&attractors)?)?.squeeze(D::Minus1)?;
        Ok((attractors, probs, states))
    }

    /// Single-recording attractor decoding.
    pub fn eda_generate(&self, emb: &SpeechEmbeddingSeq, mode: EdaMode, shuffle_seed: u64) -> Result<AttractorSet> {
        let steps = match mode {
            EdaMode::Train(n) => n + 1,
            EdaMode::Infer { .. } => self.cfg.s_max,
        };
        let (attr, probs, states) = self.attractors(&emb.embeddings.unsqueeze(0)?, steps, &[shuffle_seed])?;
        let probs: Vec<f32> = probs.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?;
        let keep = match mode {
            EdaMode::Train(_) => steps,
            EdaMode::Infer { threshold } => probs.iter().take_while(|&&p| p as f64 >= threshold).count(),
        };
        let rows = |t: &Tensor| -> Result<Vec<f32>> { Ok(t.squeeze(0)?.to_dtype(DType::F32)?.to_vec1()?) };
        let attractors: Vec<Vec<f32>> = attr.squeeze(0)?.to_dtype(DType::F32)?.to_vec2()?;
        Ok(AttractorSet {
            attractors: attractors[..keep].to_vec(),
            existence_probs: probs[..keep].to_vec(),
            hidden: states[..keep].iter().map(|s| rows(&s.h)).collect::<Result<_>>()?,
            cell: states[..keep].iter().map(|s| rows(&s.c)).collect::<Result<_>>()?,
        })
    }

    /// `(B, T, D)` embeddings against `(B, s_max, D)` attractors: `(B, T, s_max)` inner products.
    pub fn similarities(emb: &Tensor, padded_attractors: &Tensor) -> Result<Tensor> {
        Ok(emb.matmul(&padded_attractors.t()?.contiguous()?)?)
    }

    /// First `n` attractors of a `(steps, D)` tensor, zero-padded to `s_max` rows.
    fn pad_attractors(&self, attractors: &Tensor, n: usize) -> Result<Tensor> {
        let n = n.min(self.cfg.s_max);
        let head = attractors.narrow(0, 0, n)?;
        Ok(head.pad_with_zeros(0, 0, self.cfg.s_max - n)?)
    }

    /// `(B, T, s_max)` similarities to `(B, T, N)` class log-probabilities.
    pub fn pse_log_probs(&self, similarities: &Tensor) -> Result<Tensor> {
        let (h, _) = self.pse_lstm.forward(similarities, None)?;
        nn::log_softmax_last(&self.pse_out.forward(&h)?)
    }

    /// Mean stage-1 loss over a batch of equal-length recordings, plus per-item components.
    /// Each label matrix lists only the speakers present in its recording.
    pub fn batch_loss(
        &self,
        features: &[&FeatureSequence],
        labels: &[&ActivityMatrix],
        alpha: f64,
        mode: &mut Mode,
        shuffle_seed: u64,
    ) -> Result<(Tensor, Vec<Stage1Losses>)> {
        if features.len() != labels.len() {
            return Err(Error::InvalidInput("features/labels batch mismatch".into()));
        }
        let x = self.features_tensor(features)?;
        let emb = self.encode(&x, mode)?;
        let max_s = labels.iter().map(|l| l.speakers()).max().unwrap_or(0);
        let seeds: Vec<u64> = (0..labels.len() as u64).map(|i| shuffle_seed.wrapping_add(i)).collect();
        let (attr, probs, _) = self.attractors(&emb, max_s + 1, &seeds)?;
        let mut padded = Vec::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if l.frames() != features[i].frames() {
                return Err(Error::InvalidInput("label/feature frame counts differ".into()));
            }
            padded.push(self.pad_attractors(&attr.get(i)?, l.speakers())?);
        }
        let sims = Self::similarities(&emb, &Tensor::stack(&padded, 0)?)?;
        let log_probs = self.pse_log_probs(&sims)?;
        let mut items = Vec::with_capacity(labels.len());
        let mut total: Option<Tensor> = None;
        for (i, l) in labels.iter().enumerate() {
            let s = l.speakers();
            let raw = candle_nn::ops::sigmoid(&sims.get(i)?.narrow(1, 0, s)?)?;
            let p = probs.get(i)?.narrow(0, 0, s + 1)?;
            let losses = stage1_loss(&log_probs.get(i)?, &p, &raw, l, alpha, &self.codebook)?;
            total = Some(match total {
                None => losses.total.clone(),
                Some(acc) => (acc + &losses.total)?,
            });
            items.push(losses);
        }
        let total = total.ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
        Ok(((total / labels.len() as f64)?, items))
    }

    pub fn infer(&self, features: &FeatureSequence) -> Result<Stage1Output> {
        Ok(self.infer_batch(&[features])?.remove(0))
    }

    /// Inference on equal-length recordings. Every item shuffles its frames
    /// with seed 0, so results do not depend on batch composition.
    pub fn infer_batch(&self, features: &[&FeatureSequence]) -> Result<Vec<Stage1Output>> {
        let x = self.features_tensor(features)?;
        let emb = self.encode(&x, &mut Mode::Eval)?;
        let b = features.len();
        let s_max = self.cfg.s_max;
        let (attr, probs, states) = self.attractors(&emb, s_max, &vec![0; b])?;
        let probs: Vec<Vec<f32>> = probs.to_dtype(DType::F32)?.to_vec2()?;
        let counts: Vec<usize> = probs
            .iter()
            .map(|p| p.iter().take_while(|&&v| v as f64 >= self.cfg.attractor_threshold).count())
            .collect();
        let padded = (0..b)
            .map(|i| self.pad_attractors(&attr.get(i)?, counts[i]))
            .collect::<Result<Vec<_>>>()?;
        let sims = Self::similarities(&emb, &Tensor::stack(&padded, 0)?)?;
        let log_probs = self.pse_log_probs(&sims)?;
        let raw_all = candle_nn::ops::sigmoid(&sims)?.to_dtype(DType::F32)?;
        let mut out = Vec::with_capacity(b);
        for (i, f) in features.iter().enumerate() {
            let n = counts[i];
            let posteriors: Vec<f32> = log_probs.get(i)?.exp()?.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            let (activity, classes) = decode_pse_posteriors(&posteriors, self.cfg.n_classes(), n, &self.codebook)?;
            let raw: Vec<Vec<f32>> = raw_all.get(i)?.to_vec2()?;
            let before_pse = ActivityMatrix::from_fn(f.frames(), s_max, |t, s| s < n && raw[t][s] >= 0.5);
            let rows = |t: &Tensor| -> Result<Vec<f32>> { Ok(t.get(i)?.to_dtype(DType::F32)?.to_vec1()?) };
            let attractors = AttractorSet {
                attractors: attr.get(i)?.narrow(0, 0, n)?.to_dtype(DType::F32)?.to_vec2()?,
                existence_probs: probs[i][..n].to_vec(),
                hidden: states[..n].iter().map(|s| rows(&s.h)).collect::<Result<_>>()?,
                cell: states[..n].iter().map(|s| rows(&s.c)).collect::<Result<_>>()?,
            };
            out.push(Stage1Output {
                activity,
                classes,
                n_speakers: n,
                before_pse,
                attractors,
                posteriors,
            });
        }
        Ok(out)
    }
}
