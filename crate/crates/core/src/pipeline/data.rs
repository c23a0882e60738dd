//! Dataset loading at the diarization frame rate.

use crate::activity::ActivityMatrix;
use crate::error::{Error, Result};
use crate::features::{compute_logmel, read_wav, stack_and_subsample, FeatureSequence};
use crate::simulator::Manifest;

use super::{InputSource, PipelineConfig};

/// A recording on the model's frame grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub id: String,
    pub features: FeatureSequence,
    /// `T×S` reference activity over the recording's own speakers.
    pub labels: ActivityMatrix,
    pub speaker_ids: Vec<String>,
}

/// Stacks and subsamples stored 10 ms features into model input.
pub fn model_features(raw: &FeatureSequence, cfg: &PipelineConfig) -> Result<FeatureSequence> {
    stack_and_subsample(raw, cfg.features.stack_context, cfg.features.subsample)
}

pub fn load_recordings(manifest: &Manifest, cfg: &PipelineConfig) -> Result<Vec<Recording>> {
    (0..manifest.len()).map(|i| load_recording(manifest, i, cfg)).collect()
}

pub fn load_recording(manifest: &Manifest, index: usize, cfg: &PipelineConfig) -> Result<Recording> {
    let item = manifest.load_item(index)?;
    let factor = cfg.features.subsample;
    let (features, labels) = match cfg.input {
        InputSource::Features => (model_features(&item.features, cfg)?, item.labels.subsample(factor)),
        InputSource::Audio => {
            let row = &manifest.rows[index];
            let wav = row
                .wav
                .as_ref()
                .ok_or_else(|| Error::InvalidInput(format!("{}: audio input requested but no wav in manifest", row.id)))?;
            let mut feats = compute_logmel(&read_wav(&manifest.dir.join(wav))?, &cfg.features)?;
            feats.origin_id = item.id.clone();
            let labels = item.labels.subsample(factor);
            let t = feats.frames();
            let labels = ActivityMatrix::from_fn(t, labels.speakers(), |ti, s| ti < labels.frames() && labels.get(ti, s));
            (feats, labels)
        }
    };
    Ok(Recording {
        id: item.id,
        features,
        labels,
        speaker_ids: item.speaker_ids,
    })
}

/// Consecutive `(start, len)` spans of at most `max_len` frames covering `0..frames`.
pub fn chunk_spans(frames: usize, max_len: usize) -> Vec<(usize, usize)> {
    let max_len = max_len.max(1);
    (0..frames).step_by(max_len).map(|s| (s, max_len.min(frames - s))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spans_cover_exactly() {
        assert_eq!(chunk_spans(10, 4), vec![(0, 4), (4, 4), (8, 2)]);
        assert_eq!(chunk_spans(3, 10), vec![(0, 3)]);
        assert!(chunk_spans(0, 5).is_empty());
    }
}
