//! Frame-level speaker activity labels.

use crate::error::{Error, Result};

/// Binary activity of up to `len` speakers in a single frame.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ActivityVector {
    bits: Vec<bool>,
}

impl ActivityVector {
    pub fn zeros(len: usize) -> Self {
        Self {
            bits: vec![false; len],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        Self { bits }
    }

    /// Builds a vector from `0`/`1` integers; any other value is rejected.
    pub fn from_ints(values: &[u8]) -> Result<Self> {
        values
            .iter()
            .map(|&v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::InvalidLabel(format!("non-binary entry {other}"))),
            })
            .collect::<Result<Vec<_>>>()
            .map(Self::from_bits)
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, s: usize) -> bool {
        self.bits[s]
    }

    pub fn set(&mut self, s: usize, on: bool) {
        self.bits[s] = on;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// T×S binary speaker-activity matrix, row-major by frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActivityMatrix {
    frames: usize,
    speakers: usize,
    data: Vec<bool>,
}

impl ActivityMatrix {
    pub fn zeros(frames: usize, speakers: usize) -> Self {
        Self {
            frames,
            speakers,
            data: vec![false; frames * speakers],
        }
    }

    pub fn from_rows(rows: &[ActivityVector]) -> Result<Self> {
        let speakers = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * speakers);
        for (t, row) in rows.iter().enumerate() {
            if row.len() != speakers {
                return Err(Error::InvalidInput(format!(
                    "row {t} has {} speakers, expected {speakers}",
                    row.len()
                )));
            }
            data.extend_from_slice(row.bits());
        }
        Ok(Self {
            frames: rows.len(),
            speakers,
            data,
        })
    }

    pub fn from_fn(frames: usize, speakers: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(frames, speakers);
        for t in 0..frames {
            for s in 0..speakers {
                m.data[t * speakers + s] = f(t, s);
            }
        }
        m
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn speakers(&self) -> usize {
        self.speakers
    }

    pub fn get(&self, t: usize, s: usize) -> bool {
        self.data[t * self.speakers + s]
    }

    pub fn set(&mut self, t: usize, s: usize, on: bool) {
        self.data[t * self.speakers + s] = on;
    }

    pub fn row(&self, t: usize) -> ActivityVector {
        ActivityVector::from_bits(self.data[t * self.speakers..(t + 1) * self.speakers].to_vec())
    }

    pub fn set_row(&mut self, t: usize, row: &ActivityVector) {
        let n = row.len().min(self.speakers);
        for s in 0..self.speakers {
            self.data[t * self.speakers + s] = s < n && row.get(s);
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = ActivityVector> + '_ {
        (0..self.frames).map(|t| self.row(t))
    }

    /// Reorders columns so that output column `i` is input column `perm[i]`.
    pub fn permute_columns(&self, perm: &[usize]) -> Self {
        let speakers = perm.len();
        Self::from_fn(self.frames, speakers, |t, i| {
            perm[i] < self.speakers && self.get(t, perm[i])
        })
    }

    /// Pads with silent speakers or truncates to `speakers` columns.
    pub fn with_speakers(&self, speakers: usize) -> Self {
        Self::from_fn(self.frames, speakers, |t, s| {
            s < self.speakers && self.get(t, s)
        })
    }

    /// Keeps every `factor`-th frame, starting at frame 0.
    pub fn subsample(&self, factor: usize) -> Self {
        let factor = factor.max(1);
        let frames = self.frames.div_ceil(factor);
        Self::from_fn(frames, self.speakers, |t, s| self.get(t * factor, s))
    }

    /// Number of frames where speaker `s` is active.
    pub fn column_count(&self, s: usize) -> usize {
        (0..self.frames).filter(|&t| self.get(t, s)).count()
    }

    /// Frames where exactly one speaker is active, as a per-speaker mask.
    pub fn single_speaker_mask(&self, s: usize) -> Vec<bool> {
        (0..self.frames)
            .map(|t| self.get(t, s) && self.row(t).popcount() == 1)
            .collect()
    }

    /// Row-major copy as 0.0/1.0 values.
    pub fn to_f32(&self) -> Vec<f32> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Number of (frame, speaker) cells that differ; shapes must match.
    pub fn cell_disagreement(&self, other: &Self) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(a, b)| a != b)
            .count()
    }
}
