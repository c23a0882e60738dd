//! Training, two-stage inference and the command-line tool.
//!
//! Inference first runs the end-to-end model. Frames where exactly one
//! speaker is active then seed a profile per speaker, the post-processor
//! rescores the recording against those profiles, and the profile/rescoring
//! step repeats `n_refine_iters` times.

pub mod cli;
mod config;
pub mod data;
pub mod train;

use log::warn;
use serde::{Deserialize, Serialize};

pub use config::{apply_override, InputSource, Phase, PipelineConfig, PostprocessConfig, TrainerConfig};
pub use data::{chunk_spans, load_recordings, model_features, Recording};
pub use train::{
    load_extractor, load_stage1, load_stage2, oracle_profiles, stage1_feature_config, score_activity, stage1_der, train_profile_extractor,
    train_stage1, train_stage2, ProfileReport, Stage1EpochLog, Stage1Report, Stage2EpochLog, Stage2Report, Trainer,
};

pub use crate::checkpoint::average_checkpoints;

use crate::activity::ActivityMatrix;
use crate::eend_ola::EendOla;
use crate::error::Result;
use crate::features::FeatureSequence;
use crate::metrics::{activity_to_segments, SegmentList};
use crate::soap::{ProfileExtractor, ProfileSet, SoapModel};

/// Hypothesis speaker labels for output slot `s`.
pub fn speaker_slots(n: usize) -> Vec<String> {
    (0..n).map(|s| format!("S{s}")).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ToldDiagnostics {
    pub stage1_speakers: usize,
    /// Valid profiles used in each refinement iteration.
    pub profiles_per_iter: Vec<usize>,
    /// Cells whose activity changed in each refinement iteration.
    pub changes_per_iter: Vec<usize>,
    /// Set when no valid profile could be extracted and the stage-1 result was kept.
    pub fell_back: bool,
}

#[derive(Debug, Clone)]
pub struct ToldOutput {
    /// `T×s_max` final activity.
    pub activity: ActivityMatrix,
    pub stage1_activity: ActivityMatrix,
    pub segments: SegmentList,
    pub diagnostics: ToldDiagnostics,
}

/// Stage-2 models used by [`run_told`].
pub struct Refiner<'a> {
    pub soap: &'a SoapModel,
    pub extractor: &'a ProfileExtractor,
}

/// Alternates profile extraction from `initial`'s single-speaker frames and
/// SOAP rescoring for `n_refine_iters` iterations. Speakers are the columns
/// up to the last one with any activity.
pub fn refine(
    features: &FeatureSequence,
    initial: &ActivityMatrix,
    r: &Refiner,
    cfg: &PipelineConfig,
) -> Result<(ActivityMatrix, ToldDiagnostics)> {
    let s_max = r.soap.config().s_max;
    let n = (0..initial.speakers())
        .rposition(|s| initial.column_count(s) > 0)
        .map_or(0, |s| s + 1)
        .min(s_max);
    let mut diagnostics = ToldDiagnostics {
        stage1_speakers: n,
        ..ToldDiagnostics::default()
    };
    let mut activity = initial.clone();
    let ids = speaker_slots(n);
    for _ in 0..cfg.n_refine_iters {
        let masks: Vec<Vec<bool>> = (0..n).map(|s| activity.single_speaker_mask(s)).collect();
        let profiles = r.extractor.extract_profiles(features, &masks, &ids, cfg.profile_min_frames)?;
        let set = ProfileSet::new(profiles, s_max, r.extractor.config().profile_dim)?;
        if set.count() == 0 {
            warn!("{}: no valid speaker profile; keeping the current result", features.origin_id);
            diagnostics.fell_back = true;
            break;
        }
        let refined = r.soap.infer(features, &set)?.activity;
        let changes = refined.cell_disagreement(&activity);
        diagnostics.profiles_per_iter.push(set.count());
        diagnostics.changes_per_iter.push(changes);
        activity = refined;
        if cfg.stop_when_unchanged && changes == 0 {
            break;
        }
    }
    Ok((activity, diagnostics))
}

/// Two-stage diarization of one recording (features on the model grid).
/// Without a refiner, or with `n_refine_iters = 0`, the stage-1 result is returned unchanged.
pub fn run_told(features: &FeatureSequence, stage1: &EendOla, refiner: Option<&Refiner>, cfg: &PipelineConfig) -> Result<ToldOutput> {
    let first = stage1.infer(features)?;
    let (activity, diagnostics) = match refiner {
        Some(r) => {
            let (a, mut d) = refine(features, &first.activity, r, cfg)?;
            d.stage1_speakers = first.n_speakers;
            (a, d)
        }
        None => (
            first.activity.clone(),
            ToldDiagnostics {
                stage1_speakers: first.n_speakers,
                ..ToldDiagnostics::default()
            },
        ),
    };
    let segments = activity_to_segments(
        &activity,
        features.frame_period,
        &speaker_slots(activity.speakers()),
        &features.origin_id,
        cfg.postprocess.min_dur,
        cfg.postprocess.merge_gap,
    )?;
    Ok(ToldOutput {
        activity,
        stage1_activity: first.activity,
        segments,
        diagnostics,
    })
}
