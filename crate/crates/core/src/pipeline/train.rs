//! Training loops for the profile extractor and both diarization stages.

use std::collections::{BTreeMap, VecDeque};

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{chunk_spans, Recording};
use super::{speaker_slots, PipelineConfig};
use crate::activity::ActivityMatrix;
use crate::checkpoint::{average_checkpoints, Checkpoint, CheckpointMeta};
use crate::eend_ola::EendOla;
use crate::error::{Error, Result};
use crate::features::{FeatureConfig, FeatureSequence};
use crate::metrics::{activity_to_segments, der, DerResult, DEFAULT_RESOLUTION};
use crate::nn::{Mode, ParamStore};
use crate::simulator::derive_seed;
use crate::soap::{ProfileExtractor, ProfileSet, SoapModel, ENCODER_PREFIX};

/// AdamW with linear warmup and global-norm gradient clipping.
pub struct Trainer {
    opt: AdamW,
    vars: Vec<(String, Var)>,
    base_lr: f64,
    warmup: usize,
    clip: f64,
    step: usize,
}

impl Trainer {
    pub fn new(store: &ParamStore, lr: f64, warmup: usize, weight_decay: f64, clip: f64) -> Result<Self> {
        let vars = store.vars_with_prefix("");
        let opt = AdamW::new(
            vars.iter().map(|(_, v)| v.clone()).collect(),
            ParamsAdamW {
                lr,
                weight_decay,
                ..ParamsAdamW::default()
            },
        )?;
        Ok(Self {
            opt,
            vars,
            base_lr: lr,
            warmup,
            clip,
            step: 0,
        })
    }

    pub fn steps(&self) -> usize {
        self.step
    }

    /// Backpropagates `loss` and updates every parameter not matched by `frozen`.
    /// Returns the pre-clipping gradient norm.
    pub fn step(&mut self, loss: &Tensor, frozen: impl Fn(&str) -> bool) -> Result<f64> {
        let mut grads: GradStore = loss.backward()?;
        for (name, var) in &self.vars {
            if frozen(name) {
                grads.remove(var.as_tensor());
            }
        }
        let mut sq = 0.0f64;
        for (_, var) in &self.vars {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                msg: "non-finite gradient norm".into(),
            });
        }
        if norm > self.clip {
            let scale = self.clip / norm;
            for (_, var) in &self.vars {
                if let Some(g) = grads.remove(var.as_tensor()) {
                    grads.insert(var.as_tensor(), (g * scale)?);
                }
            }
        }
        self.step += 1;
        let warm = if self.warmup == 0 {
            1.0
        } else {
            (self.step as f64 / self.warmup as f64).min(1.0)
        };
        self.opt.set_learning_rate(self.base_lr * warm);
        self.opt.step(&grads)?;
        Ok(norm)
    }
}

fn check_finite(step: usize, named: &[(&str, f64)]) -> Result<()> {
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::Diverged {
                step,
                msg: format!("{name} = {v}"),
            });
        }
    }
    Ok(())
}

/// Groups item indices into batches of equal sequence length, in a seeded order.
fn length_batches(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    let mut buckets: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in order {
        buckets.entry(lengths[i]).or_default().push(i);
    }
    let mut batches: Vec<Vec<usize>> = buckets
        .into_values()
        .flat_map(|items| items.chunks(batch_size).map(<[usize]>::to_vec).collect::<Vec<_>>())
        .collect();
    batches.shuffle(rng);
    batches
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1EpochLog {
    pub epoch: usize,
    pub phase: usize,
    pub alpha: f64,
    pub steps: usize,
    pub l_pse: f64,
    pub l_d: f64,
    pub l_a: f64,
    pub total: f64,
    pub train_der: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Stage1Report {
    /// Train-set DER of the freshly initialized model.
    pub initial_der: Option<f64>,
    pub epochs: Vec<Stage1EpochLog>,
    pub checkpoint: Checkpoint,
}

const EVAL_BATCH: usize = 16;

/// Aggregate DER of stage-1 inference over `recordings`.
pub fn stage1_der(model: &EendOla, recordings: &[Recording], collar: f64) -> Result<DerResult> {
    let lengths: Vec<usize> = recordings.iter().map(|r| r.features.frames()).collect();
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &len) in lengths.iter().enumerate() {
        groups.entry(len).or_default().push(i);
    }
    let mut results = Vec::with_capacity(recordings.len());
    for members in groups.values() {
        for batch in members.chunks(EVAL_BATCH) {
            let feats: Vec<&FeatureSequence> = batch.iter().map(|&i| &recordings[i].features).collect();
            for (&i, out) in batch.iter().zip(model.infer_batch(&feats)?) {
                results.push(score_activity(&recordings[i], &out.activity, collar)?);
            }
        }
    }
    Ok(DerResult::aggregate(&results))
}

/// DER of a `T×s_max` hypothesis against the recording's reference labels.
pub fn score_activity(rec: &Recording, hyp: &ActivityMatrix, collar: f64) -> Result<DerResult> {
    let period = rec.features.frame_period;
    let reference = activity_to_segments(&rec.labels, period, &rec.speaker_ids, &rec.id, 0.0, 0.0)?;
    let hyp = activity_to_segments(hyp, period, &speaker_slots(hyp.speakers()), &rec.id, 0.0, 0.0)?;
    der(&reference, &hyp, collar, DEFAULT_RESOLUTION)
}

pub fn stage1_checkpoint(model: &EendOla, cfg: &PipelineConfig, epoch: usize) -> Result<Checkpoint> {
    Checkpoint::from_stores(
        CheckpointMeta {
            stage: "stage1".into(),
            epoch,
            seed: cfg.trainer.seed,
            config: serde_json::json!({ "eend_ola": model.config(), "features": cfg.features }),
            averaged: 1,
        },
        &[("", model.store())],
    )
}

pub fn load_stage1(ckpt: &Checkpoint) -> Result<EendOla> {
    if ckpt.meta.stage != "stage1" {
        return Err(Error::Checkpoint(format!("expected a stage1 checkpoint, found {}", ckpt.meta.stage)));
    }
    let cfg = serde_json::from_value(ckpt.meta.config["eend_ola"].clone())?;
    let model = EendOla::new(cfg, DType::F32, 0)?;
    ckpt.load_into("", model.store())?;
    Ok(model)
}

/// Feature front-end settings recorded with a stage-1 checkpoint.
pub fn stage1_feature_config(ckpt: &Checkpoint) -> Result<FeatureConfig> {
    Ok(serde_json::from_value(ckpt.meta.config["features"].clone())?)
}

/// Optimizes the stage-1 objective over the configured phases. Each phase cuts
/// recordings into chunks of at most `max_seq_seconds`; a chunk's label matrix
/// keeps only the speakers active in it.
pub fn train_stage1(cfg: &PipelineConfig, recordings: &[Recording]) -> Result<(EendOla, Stage1Report)> {
    cfg.validate()?;
    let t = &cfg.trainer;
    let model = EendOla::new(cfg.eend_ola.clone(), DType::F32, derive_seed(t.seed, 101))?;
    let mut trainer = Trainer::new(model.store(), t.lr, t.warmup_steps, t.weight_decay, t.clip_norm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(t.seed, 102));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(t.seed, 103));
    let collar = cfg.postprocess.collar;
    let initial_der = if t.eval_der {
        let d = stage1_der(&model, recordings, collar)?.der;
        info!("stage1 epoch 0 train DER {:.4}", d);
        Some(d)
    } else {
        None
    };
    let mut epochs = Vec::new();
    let mut recent: VecDeque<Checkpoint> = VecDeque::new();
    let mut epoch = 0;
    for (phase_idx, phase) in t.stage1_phases.iter().enumerate() {
        let mut items: Vec<(FeatureSequence, ActivityMatrix)> = Vec::new();
        for rec in recordings {
            let max_frames = ((phase.max_seq_seconds / rec.features.frame_period) + 1e-9).floor().max(1.0) as usize;
            for (start, len) in chunk_spans(rec.features.frames(), max_frames) {
                let labels = ActivityMatrix::from_fn(len, rec.labels.speakers(), |ti, s| rec.labels.get(start + ti, s));
                let active: Vec<usize> = (0..labels.speakers()).filter(|&s| labels.column_count(s) > 0).collect();
                if active.len() > cfg.eend_ola.s_max {
                    return Err(Error::InvalidInput(format!(
                        "{}: {} active speakers exceed s_max",
                        rec.id,
                        active.len()
                    )));
                }
                let labels = ActivityMatrix::from_fn(len, active.len(), |ti, k| labels.get(ti, active[k]));
                items.push((rec.features.slice(start, len)?, labels));
            }
        }
        let lengths: Vec<usize> = items.iter().map(|(f, _)| f.frames()).collect();
        for _ in 0..phase.epochs {
            epoch += 1;
            let mut sums = [0.0f64; 4];
            let mut count = 0usize;
            for batch in length_batches(&lengths, t.batch_size, &mut rng) {
                let feats: Vec<&FeatureSequence> = batch.iter().map(|&i| &items[i].0).collect();
                let labels: Vec<&ActivityMatrix> = batch.iter().map(|&i| &items[i].1).collect();
                let shuffle_seed = derive_seed(t.seed, 1_000_000 + trainer.steps() as u64);
                let (loss, parts) = model.batch_loss(&feats, &labels, phase.alpha, &mut Mode::Train(&mut dropout_rng), shuffle_seed)?;
                for p in &parts {
                    let v = p.values()?;
                    check_finite(trainer.steps(), &[("l_pse", v.l_pse), ("l_d", v.l_d), ("l_a", v.l_a), ("total", v.total)])?;
                    sums[0] += v.l_pse;
                    sums[1] += v.l_d;
                    sums[2] += v.l_a;
                    sums[3] += v.total;
                    count += 1;
                }
                trainer.step(&loss, |_| false)?;
            }
            let n = count.max(1) as f64;
            let train_der = if t.eval_der {
                Some(stage1_der(&model, recordings, collar)?.der)
            } else {
                None
            };
            let log = Stage1EpochLog {
                epoch,
                phase: phase_idx,
                alpha: phase.alpha,
                steps: trainer.steps(),
                l_pse: sums[0] / n,
                l_d: sums[1] / n,
                l_a: sums[2] / n,
                total: sums[3] / n,
                train_der,
            };
            info!(
                "stage1 epoch {epoch} phase {phase_idx} total {:.4} (pse {:.4}, d {:.4}, a {:.4}) DER {}",
                log.total,
                log.l_pse,
                log.l_d,
                log.l_a,
                train_der.map(|d| format!("{d:.4}")).unwrap_or_else(|| "-".into())
            );
            epochs.push(log);
            recent.push_back(stage1_checkpoint(&model, cfg, epoch)?);
            if recent.len() > t.average_last {
                recent.pop_front();
            }
        }
    }
    let checkpoint = if recent.is_empty() {
        stage1_checkpoint(&model, cfg, 0)?
    } else {
        average_checkpoints(recent.make_contiguous())?
    };
    checkpoint.load_into("", model.store())?;
    Ok((
        model,
        Stage1Report {
            initial_der,
            epochs,
            checkpoint,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileEpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ProfileReport {
    pub speakers: Vec<String>,
    pub epochs: Vec<ProfileEpochLog>,
    /// Classification accuracy on held-out crops of training speakers.
    pub heldout_accuracy: f64,
    pub mean_same_cosine: f64,
    pub mean_diff_cosine: f64,
    pub checkpoint: Checkpoint,
}

/// Single-speaker crops of `crop` frames: `(recording, start, speaker id)`.
pub fn single_speaker_crops(recordings: &[Recording], crop: usize) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    for (r, rec) in recordings.iter().enumerate() {
        for (s, id) in rec.speaker_ids.iter().enumerate() {
            let mask = rec.labels.single_speaker_mask(s);
            let mut t = 0;
            while t < mask.len() {
                if !mask[t] {
                    t += 1;
                    continue;
                }
                let start = t;
                while t < mask.len() && mask[t] {
                    t += 1;
                }
                let mut a = start;
                while a + crop <= t {
                    out.push((r, a, id.clone()));
                    a += crop;
                }
            }
        }
    }
    out
}

pub fn extractor_checkpoint(ex: &ProfileExtractor, speakers: &[String], cfg: &PipelineConfig, epoch: usize) -> Result<Checkpoint> {
    Checkpoint::from_stores(
        CheckpointMeta {
            stage: "profiles".into(),
            epoch,
            seed: cfg.trainer.seed,
            config: serde_json::json!({ "soap": ex.config(), "speakers": speakers, "n_train_speakers": ex.n_classes() }),
            averaged: 1,
        },
        &[("", ex.store())],
    )
}

pub fn load_extractor(ckpt: &Checkpoint) -> Result<ProfileExtractor> {
    let (cfg, n) = extractor_meta(&ckpt.meta.config)?;
    let prefix = if ckpt.meta.stage == "stage2" { "extractor." } else { "" };
    let ex = ProfileExtractor::new(cfg, n, DType::F32, 0)?;
    ckpt.load_into(prefix, ex.store())?;
    Ok(ex)
}

fn extractor_meta(config: &serde_json::Value) -> Result<(crate::soap::SoapConfig, usize)> {
    let cfg = serde_json::from_value(config["soap"].clone())?;
    let n = config["n_train_speakers"]
        .as_u64()
        .ok_or_else(|| Error::Checkpoint("metadata lacks n_train_speakers".into()))? as usize;
    Ok((cfg, n))
}

/// Trains the speaker embedding network with the margin softmax on
/// single-speaker crops of `profile_crop_seconds`.
pub fn train_profile_extractor(cfg: &PipelineConfig, recordings: &[Recording]) -> Result<(ProfileExtractor, ProfileReport)> {
    cfg.validate()?;
    let t = &cfg.trainer;
    let period = recordings
        .first()
        .ok_or_else(|| Error::InvalidInput("no recordings".into()))?
        .features
        .frame_period;
    let crop = ((t.profile_crop_seconds / period) + 1e-9).floor().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(t.seed, 201));
    let mut by_speaker: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
    for (r, start, id) in single_speaker_crops(recordings, crop) {
        by_speaker.entry(id).or_default().push((r, start));
    }
    let mut train = Vec::new();
    let mut heldout = Vec::new();
    let mut speakers = Vec::new();
    for (id, mut crops) in by_speaker {
        crops.shuffle(&mut rng);
        let n_hold = if crops.len() >= 2 {
            ((crops.len() as f64 * t.profile_holdout).round() as usize).min(crops.len() - 1)
        } else {
            0
        };
        let class = speakers.len();
        speakers.push(id);
        heldout.extend(crops[..n_hold].iter().map(|&(r, s)| (r, s, class)));
        train.extend(crops[n_hold..].iter().map(|&(r, s)| (r, s, class)));
    }
    if speakers.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least two speakers with {crop}-frame single-speaker crops, found {}",
            speakers.len()
        )));
    }
    let ex = ProfileExtractor::new(cfg.soap.clone(), speakers.len(), DType::F32, derive_seed(t.seed, 202))?;
    let mut trainer = Trainer::new(ex.store(), t.profile_lr, t.warmup_steps, t.weight_decay, t.clip_norm)?;
    let crop_tensor = |items: &[(usize, usize, usize)]| -> Result<Tensor> {
        let feats: Vec<FeatureSequence> = items
            .iter()
            .map(|&(r, s, _)| recordings[r].features.slice(s, crop))
            .collect::<Result<_>>()?;
        let dim = feats[0].dim();
        let data: Vec<f32> = feats.iter().flat_map(|f| f.data().iter().copied()).collect();
        Ok(Tensor::from_vec(data, (items.len(), crop, dim), ex.store().device())?)
    };
    let mut epochs = Vec::new();
    for epoch in 1..=t.profile_epochs {
        train.shuffle(&mut rng);
        let (mut loss_sum, mut batches, mut correct) = (0.0, 0usize, 0usize);
        for batch in train.chunks(t.batch_size.max(2)) {
            let x = crop_tensor(batch)?;
            let labels: Vec<usize> = batch.iter().map(|b| b.2).collect();
            let loss = ex.classification_loss(&x, &labels)?;
            let v = loss.to_scalar::<f32>()? as f64;
            check_finite(trainer.steps(), &[("arcface", v)])?;
            correct += ex.classify(&x)?.iter().zip(&labels).filter(|(a, b)| a == b).count();
            loss_sum += v;
            batches += 1;
            trainer.step(&loss, |_| false)?;
        }
        let log = ProfileEpochLog {
            epoch,
            loss: loss_sum / batches.max(1) as f64,
            train_accuracy: correct as f64 / train.len().max(1) as f64,
        };
        info!("profiles epoch {epoch} loss {:.4} acc {:.3}", log.loss, log.train_accuracy);
        epochs.push(log);
    }
    let (mut heldout_accuracy, mut same, mut diff) = (f64::NAN, f64::NAN, f64::NAN);
    if !heldout.is_empty() {
        let mut embs: Vec<(usize, Vec<f32>)> = Vec::new();
        let mut correct = 0;
        for batch in heldout.chunks(64) {
            let x = crop_tensor(batch)?;
            let pred = ex.classify(&x)?;
            correct += pred.iter().zip(batch).filter(|(p, b)| **p == b.2).count();
            let e: Vec<Vec<f32>> = ex.embed(&x)?.to_vec2()?;
            embs.extend(batch.iter().map(|b| b.2).zip(e));
        }
        heldout_accuracy = correct as f64 / heldout.len() as f64;
        let (mut s_sum, mut s_n, mut d_sum, mut d_n) = (0.0, 0usize, 0.0, 0usize);
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let c: f32 = embs[i].1.iter().zip(&embs[j].1).map(|(a, b)| a * b).sum();
                if embs[i].0 == embs[j].0 {
                    s_sum += c as f64;
                    s_n += 1;
                } else {
                    d_sum += c as f64;
                    d_n += 1;
                }
            }
        }
        same = s_sum / s_n.max(1) as f64;
        diff = d_sum / d_n.max(1) as f64;
        info!("profiles held-out accuracy {heldout_accuracy:.3}, cosine same {same:.3} / different {diff:.3}");
    }
    let checkpoint = extractor_checkpoint(&ex, &speakers, cfg, t.profile_epochs)?;
    Ok((
        ex,
        ProfileReport {
            speakers,
            epochs,
            heldout_accuracy,
            mean_same_cosine: same,
            mean_diff_cosine: diff,
            checkpoint,
        },
    ))
}

/// Oracle profiles: each reference speaker pooled over the frames where only they speak.
pub fn oracle_profiles(ex: &ProfileExtractor, rec: &Recording, s_max: usize, min_frames: usize) -> Result<ProfileSet> {
    let n = rec.labels.speakers();
    if n > s_max {
        return Err(Error::InvalidInput(format!("{}: {n} speakers exceed s_max", rec.id)));
    }
    let masks: Vec<Vec<bool>> = (0..n).map(|s| rec.labels.single_speaker_mask(s)).collect();
    let profiles = ex.extract_profiles(&rec.features, &masks, &rec.speaker_ids, min_frames)?;
    for p in profiles.iter().filter(|p| !p.valid) {
        warn!("{}: speaker {} has too few non-overlapped frames; slot masked", rec.id, p.speaker_id);
    }
    ProfileSet::new(profiles, s_max, ex.config().profile_dim)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2EpochLog {
    pub epoch: usize,
    pub frozen: bool,
    pub steps: usize,
    pub l_ce: f64,
    pub l_guide: f64,
    pub total: f64,
    /// Checksum of the frame-encoder parameters at the end of the epoch.
    pub encoder_checksum: String,
}

#[derive(Debug, Clone)]
pub struct Stage2Report {
    pub epochs: Vec<Stage2EpochLog>,
    pub checkpoint: Checkpoint,
}

pub fn stage2_checkpoint(model: &SoapModel, ex: &ProfileExtractor, cfg: &PipelineConfig, epoch: usize) -> Result<Checkpoint> {
    Checkpoint::from_stores(
        CheckpointMeta {
            stage: "stage2".into(),
            epoch,
            seed: cfg.trainer.seed,
            config: serde_json::json!({ "soap": model.config(), "n_train_speakers": ex.n_classes() }),
            averaged: 1,
        },
        &[("soap.", model.store()), ("extractor.", ex.store())],
    )
}

/// The SOAP model and the profile extractor bundled in a stage-2 checkpoint.
pub fn load_stage2(ckpt: &Checkpoint) -> Result<(SoapModel, ProfileExtractor)> {
    if ckpt.meta.stage != "stage2" {
        return Err(Error::Checkpoint(format!("expected a stage2 checkpoint, found {}", ckpt.meta.stage)));
    }
    let (cfg, _) = extractor_meta(&ckpt.meta.config)?;
    let model = SoapModel::new(cfg, DType::F32, 0)?;
    ckpt.load_into("soap.", model.store())?;
    Ok((model, load_extractor(ckpt)?))
}

/// Optimizes the stage-2 objective with oracle profiles. The frame encoder
/// starts from the extractor's weights and is frozen for the first
/// `freeze_fraction` of the epochs. Profile slots of each chunk are shuffled
/// among the recording's speakers every epoch.
pub fn train_stage2(cfg: &PipelineConfig, recordings: &[Recording], extractor: &ProfileExtractor) -> Result<(SoapModel, Stage2Report)> {
    cfg.validate()?;
    let t = &cfg.trainer;
    let s_max = cfg.soap.s_max;
    if extractor.config().profile_dim != cfg.soap.profile_dim || extractor.config().encoder_channels != cfg.soap.encoder_channels {
        return Err(Error::Config("profile extractor and SOAP encoder shapes differ".into()));
    }
    let model = SoapModel::new(cfg.soap.clone(), DType::F32, derive_seed(t.seed, 301))?;
    model.init_encoder_from(extractor)?;
    let mut trainer = Trainer::new(model.store(), t.lr, t.warmup_steps, t.weight_decay, t.clip_norm)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(t.seed, 302));
    let mut items: Vec<(FeatureSequence, ActivityMatrix, ProfileSet)> = Vec::new();
    for rec in recordings {
        let profiles = oracle_profiles(extractor, rec, s_max, cfg.profile_min_frames)?;
        if profiles.count() == 0 {
            warn!("{}: no valid oracle profile; recording skipped", rec.id);
            continue;
        }
        let labels = rec.labels.with_speakers(s_max);
        let max_frames = ((t.stage2_max_seq_seconds / rec.features.frame_period) + 1e-9).floor().max(1.0) as usize;
        for (start, len) in chunk_spans(rec.features.frames(), max_frames) {
            let chunk = ActivityMatrix::from_fn(len, s_max, |ti, s| labels.get(start + ti, s));
            items.push((rec.features.slice(start, len)?, chunk, profiles.clone()));
        }
    }
    if items.is_empty() {
        return Err(Error::InvalidInput("no stage-2 training material".into()));
    }
    let lengths: Vec<usize> = items.iter().map(|(f, _, _)| f.frames()).collect();
    let frozen_epochs = (t.freeze_fraction * t.stage2_epochs as f64).floor() as usize;
    let mut epochs = Vec::new();
    let mut recent: VecDeque<Checkpoint> = VecDeque::new();
    for epoch in 1..=t.stage2_epochs {
        let frozen = epoch <= frozen_epochs;
        let mut sums = [0.0f64; 3];
        let mut count = 0usize;
        for batch in length_batches(&lengths, t.batch_size, &mut rng) {
            let mut feats = Vec::with_capacity(batch.len());
            let mut profiles = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &i in &batch {
                let (f, l, p) = &items[i];
                let n = p.profiles.iter().rposition(|p| p.valid).map_or(0, |k| k + 1);
                let mut perm: Vec<usize> = (0..s_max).collect();
                perm[..n].shuffle(&mut rng);
                feats.push(f);
                profiles.push(ProfileSet {
                    profiles: perm.iter().map(|&k| p.profiles[k].clone()).collect(),
                });
                labels.push(l.permute_columns(&perm));
            }
            let profile_refs: Vec<&ProfileSet> = profiles.iter().collect();
            let label_refs: Vec<&ActivityMatrix> = labels.iter().collect();
            let (loss, parts) = model.batch_loss(&feats, &profile_refs, &label_refs, cfg.soap.lambda)?;
            for p in &parts {
                let v = p.values()?;
                check_finite(trainer.steps(), &[("l_ce", v.l_ce), ("l_guide", v.l_guide), ("total", v.total)])?;
                sums[0] += v.l_ce;
                sums[1] += v.l_guide;
                sums[2] += v.total;
                count += 1;
            }
            trainer.step(&loss, |name| frozen && name.starts_with(ENCODER_PREFIX))?;
        }
        let n = count.max(1) as f64;
        let ckpt = stage2_checkpoint(&model, extractor, cfg, epoch)?;
        let log = Stage2EpochLog {
            epoch,
            frozen,
            steps: trainer.steps(),
            l_ce: sums[0] / n,
            l_guide: sums[1] / n,
            total: sums[2] / n,
            encoder_checksum: ckpt.params_checksum(&format!("soap.{ENCODER_PREFIX}")),
        };
        info!(
            "stage2 epoch {epoch}{} total {:.4} (ce {:.4}, guide {:.4})",
            if frozen { " [encoder frozen]" } else { "" },
            log.total,
            log.l_ce,
            log.l_guide
        );
        epochs.push(log);
        recent.push_back(ckpt);
        if recent.len() > t.average_last {
            recent.pop_front();
        }
    }
    let checkpoint = if recent.is_empty() {
        stage2_checkpoint(&model, extractor, cfg, 0)?
    } else {
        average_checkpoints(recent.make_contiguous())?
    };
    checkpoint.load_into("soap.", model.store())?;
    Ok((model, Stage2Report { epochs, checkpoint }))
}
