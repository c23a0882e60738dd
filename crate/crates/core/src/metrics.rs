//! Diarization error rate, segment conversion and RTTM interchange.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::activity::ActivityMatrix;
use crate::alignment::map_speakers_for_eval;
use crate::error::{Error, Result};

pub const DEFAULT_COLLAR: f64 = 0.25;
pub const DEFAULT_RESOLUTION: f64 = 0.001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub speaker: String,
    pub onset: f64,
    pub duration: f64,
}

impl Segment {
    pub fn new(speaker: impl Into<String>, onset: f64, duration: f64) -> Self {
        Self {
            speaker: speaker.into(),
            onset,
            duration,
        }
    }

    pub fn end(&self) -> f64 {
        self.onset + self.duration
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SegmentList {
    pub recording_id: String,
    pub segments: Vec<Segment>,
}

impl SegmentList {
    pub fn new(recording_id: impl Into<String>, segments: Vec<Segment>) -> Result<Self> {
        for s in &segments {
            if !(s.duration > 0.0) || !(s.onset >= 0.0) || !s.onset.is_finite() || !s.duration.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "segment {} at {} with duration {} is invalid",
                    s.speaker, s.onset, s.duration
                )));
            }
        }
        Ok(Self {
            recording_id: recording_id.into(),
            segments,
        })
    }

    pub fn speakers(&self) -> Vec<String> {
        self.segments
            .iter()
            .map(|s| s.speaker.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn end(&self) -> f64 {
        self.segments.iter().map(Segment::end).fold(0.0, f64::max)
    }

    /// Total labelled speech (overlapping speakers counted separately).
    pub fn total_speech(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }
}

/// Error components in seconds of speaker time.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DerResult {
    pub der: f64,
    pub miss: f64,
    pub false_alarm: f64,
    pub confusion: f64,
    pub scored_speech: f64,
}

impl DerResult {
    fn finish(mut self) -> Self {
        let errors = self.miss + self.false_alarm + self.confusion;
        self.der = if self.scored_speech > 0.0 {
            errors / self.scored_speech
        } else if errors > 0.0 {
            f64::INFINITY
        } else {
            0.0
        };
        self
    }

    /// Sums components across recordings and recomputes the rate.
    pub fn aggregate<'a>(items: impl IntoIterator<Item = &'a DerResult>) -> DerResult {
        items
            .into_iter()
            .fold(DerResult::default(), |acc, r| DerResult {
                der: 0.0,
                miss: acc.miss + r.miss,
                false_alarm: acc.false_alarm + r.false_alarm,
                confusion: acc.confusion + r.confusion,
                scored_speech: acc.scored_speech + r.scored_speech,
            })
            .finish()
    }
}

fn to_tick(seconds: f64, resolution: f64) -> i64 {
    (seconds / resolution).round() as i64
}

/// Rasterizes segments onto a grid of `n` ticks, one column per entry of `speakers`.
fn rasterize(list: &SegmentList, speakers: &[String], n: usize, resolution: f64) -> ActivityMatrix {
    let mut m = ActivityMatrix::zeros(n, speakers.len());
    for seg in &list.segments {
        let s = speakers.iter().position(|x| *x == seg.speaker).expect("speaker listed");
        let a = to_tick(seg.onset, resolution).clamp(0, n as i64) as usize;
        let b = to_tick(seg.end(), resolution).clamp(0, n as i64) as usize;
        for t in a..b {
            m.set(t, s, true);
        }
    }
    m
}

/// Frame-discretized DER with a no-score collar around reference boundaries.
/// Overlapped speech is scored.
pub fn der(reference: &SegmentList, hyp: &SegmentList, collar: f64, resolution: f64) -> Result<DerResult> {
    if !(resolution > 0.0) || !(collar >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "collar {collar} / resolution {resolution} invalid"
        )));
    }
    let n = to_tick(reference.end().max(hyp.end()), resolution).max(0) as usize;
    let ref_spk = reference.speakers();
    let hyp_spk = hyp.speakers();
    let r = rasterize(reference, &ref_spk, n, resolution);
    let h = rasterize(hyp, &hyp_spk, n, resolution);

    let mut scored = vec![true; n];
    for seg in &reference.segments {
        for boundary in [seg.onset, seg.end()] {
            let a = to_tick(boundary - collar, resolution).clamp(0, n as i64) as usize;
            let b = to_tick(boundary + collar, resolution).clamp(0, n as i64) as usize;
            scored[a..b].iter_mut().for_each(|x| *x = false);
        }
    }
    let keep: Vec<usize> = (0..n).filter(|&t| scored[t]).collect();
    let r_scored = ActivityMatrix::from_fn(keep.len(), ref_spk.len(), |i, s| r.get(keep[i], s));
    let h_scored = ActivityMatrix::from_fn(keep.len(), hyp_spk.len(), |i, s| h.get(keep[i], s));
    let mapping = map_speakers_for_eval(&r_scored, &h_scored)?;

    let (mut miss, mut fa, mut conf, mut speech) = (0u64, 0u64, 0u64, 0u64);
    for t in 0..keep.len() {
        let n_ref = (0..ref_spk.len()).filter(|&s| r_scored.get(t, s)).count() as u64;
        let n_hyp = (0..hyp_spk.len()).filter(|&s| h_scored.get(t, s)).count() as u64;
        let correct = mapping
            .hyp_to_ref
            .iter()
            .enumerate()
            .filter(|(hs, rs)| h_scored.get(t, *hs) && rs.is_some_and(|rs| r_scored.get(t, rs)))
            .count() as u64;
        speech += n_ref;
        miss += n_ref.saturating_sub(n_hyp);
        fa += n_hyp.saturating_sub(n_ref);
        conf += n_ref.min(n_hyp) - correct;
    }
    Ok(DerResult {
        der: 0.0,
        miss: miss as f64 * resolution,
        false_alarm: fa as f64 * resolution,
        confusion: conf as f64 * resolution,
        scored_speech: speech as f64 * resolution,
    }
    .finish())
}

/// Converts frame labels into segments. Gaps shorter than `merge_gap` are
/// filled first, then runs shorter than `min_dur` are dropped.
pub fn activity_to_segments(
    labels: &ActivityMatrix,
    frame_period: f64,
    speaker_ids: &[String],
    recording_id: &str,
    min_dur: f64,
    merge_gap: f64,
) -> Result<SegmentList> {
    if speaker_ids.len() < labels.speakers() {
        return Err(Error::InvalidInput(format!(
            "{} speaker ids for {} columns",
            speaker_ids.len(),
            labels.speakers()
        )));
    }
    let eps = 1e-9;
    let mut segments = Vec::new();
    for (s, id) in speaker_ids.iter().enumerate().take(labels.speakers()) {
        let mut runs: Vec<(usize, usize)> = Vec::new();
        let mut t = 0;
        while t < labels.frames() {
            if labels.get(t, s) {
                let start = t;
                while t < labels.frames() && labels.get(t, s) {
                    t += 1;
                }
                match runs.last_mut() {
                    Some(last) if ((start - last.1) as f64) * frame_period < merge_gap - eps => last.1 = t,
                    _ => runs.push((start, t)),
                }
            } else {
                t += 1;
            }
        }
        for (a, b) in runs {
            let duration = (b - a) as f64 * frame_period;
            if duration + eps >= min_dur && duration > 0.0 {
                segments.push(Segment::new(id.clone(), a as f64 * frame_period, duration));
            }
        }
    }
    segments.sort_by(|x, y| x.onset.total_cmp(&y.onset).then_with(|| x.speaker.cmp(&y.speaker)));
    SegmentList::new(recording_id, segments)
}

/// Inverse of [`activity_to_segments`] on a grid of `frames` frames.
pub fn segments_to_activity(
    segs: &SegmentList,
    frame_period: f64,
    frames: usize,
    speaker_ids: &[String],
) -> Result<ActivityMatrix> {
    let mut m = ActivityMatrix::zeros(frames, speaker_ids.len());
    for seg in &segs.segments {
        let s = speaker_ids
            .iter()
            .position(|x| *x == seg.speaker)
            .ok_or_else(|| Error::InvalidInput(format!("unknown speaker {}", seg.speaker)))?;
        let a = (seg.onset / frame_period).round() as usize;
        let b = ((seg.end() / frame_period).round() as usize).min(frames);
        for t in a..b {
            m.set(t, s, true);
        }
    }
    Ok(m)
}

/// One `SPEAKER` line per segment, times printed with 3 decimals.
pub fn rttm_emit(segs: &SegmentList) -> String {
    let mut out = String::new();
    for s in &segs.segments {
        let _ = writeln!(
            out,
            "SPEAKER {} 1 {:.3} {:.3} <NA> <NA> {} <NA> <NA>",
            segs.recording_id, s.onset, s.duration, s.speaker
        );
    }
    out
}

/// Parses RTTM text, grouping segments by recording in order of appearance.
pub fn rttm_parse_all(text: &str) -> Result<Vec<SegmentList>> {
    let mut lists: Vec<SegmentList> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse { line: i + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 8 {
            return Err(err(format!("expected at least 8 fields, got {}", fields.len())));
        }
        if fields[0] != "SPEAKER" {
            return Err(err(format!("unsupported record type `{}`", fields[0])));
        }
        let num = |s: &str, what: &str| {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad {what} `{s}`")))
        };
        let onset = num(fields[3], "onset")?;
        let duration = num(fields[4], "duration")?;
        if onset < 0.0 || duration <= 0.0 {
            return Err(err(format!("onset {onset} / duration {duration} out of range")));
        }
        let seg = Segment::new(fields[7], onset, duration);
        match lists.iter_mut().find(|l| l.recording_id == fields[1]) {
            Some(l) => l.segments.push(seg),
            None => lists.push(SegmentList {
                recording_id: fields[1].to_string(),
                segments: vec![seg],
            }),
        }
    }
    Ok(lists)
}

/// Parses RTTM text that holds at most one recording.
pub fn rttm_parse(text: &str) -> Result<SegmentList> {
    let mut lists = rttm_parse_all(text)?;
    match lists.len() {
        0 => Ok(SegmentList::default()),
        1 => Ok(lists.remove(0)),
        n => Err(Error::InvalidInput(format!("expected one recording, found {n}"))),
    }
}

/// One row of a score report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub recording_id: String,
    #[serde(flatten)]
    pub result: DerResult,
}

/// Scores every reference recording against the hypothesis with the same id
/// (missing hypotheses count as empty) and appends an aggregate `ALL` row.
pub fn score_recordings(
    references: &[SegmentList],
    hyps: &[SegmentList],
    collar: f64,
    resolution: f64,
) -> Result<Vec<ScoreRow>> {
    let mut rows = Vec::new();
    for r in references {
        let empty = SegmentList {
            recording_id: r.recording_id.clone(),
            segments: Vec::new(),
        };
        let h = hyps.iter().find(|h| h.recording_id == r.recording_id).unwrap_or(&empty);
        rows.push(ScoreRow {
            recording_id: r.recording_id.clone(),
            result: der(r, h, collar, resolution)?,
        });
    }
    let all = DerResult::aggregate(rows.iter().map(|r| &r.result));
    rows.push(ScoreRow {
        recording_id: "ALL".into(),
        result: all,
    });
    Ok(rows)
}

/// Line-delimited JSON, one object per row.
pub fn format_score_report(rows: &[ScoreRow]) -> Result<String> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}
