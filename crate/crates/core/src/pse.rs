//! Power-set encoding of multi-speaker activity.
//!
//! A frame's activity vector `y` over `s_max` speaker slots maps to the raw
//! code `sum_s y_s * 2^s`. Only codes with at most `k_max` active speakers are
//! admissible; those are ranked ascending to give dense class indices, so
//! silence is always class 0.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::activity::{ActivityMatrix, ActivityVector};
use crate::error::{Error, Result};

static CLAMP_EVENTS: AtomicUsize = AtomicUsize::new(0);

/// Number of activity vectors that [`clamp_activity`] had to truncate so far.
pub fn clamp_events() -> usize {
    CLAMP_EVENTS.load(Ordering::Relaxed)
}

/// Raw power-set code of an activity vector (bit `s` for speaker slot `s`).
pub fn encode_raw(v: &ActivityVector) -> u32 {
    v.bits()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .fold(0u32, |acc, (s, _)| acc | (1 << s))
}

/// Keeps at most `k_max` active speakers, preferring the lowest slot indices.
pub fn clamp_activity(v: &ActivityVector, k_max: usize) -> ActivityVector {
    if v.popcount() <= k_max {
        return v.clone();
    }
    CLAMP_EVENTS.fetch_add(1, Ordering::Relaxed);
    log::debug!("clamping activity with {} speakers to {k_max}", v.popcount());
    let mut kept = 0;
    let bits = v
        .bits()
        .iter()
        .map(|&b| {
            if b && kept < k_max {
                kept += 1;
                true
            } else {
                false
            }
        })
        .collect();
    ActivityVector::from_bits(bits)
}

fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1usize, |acc, i| acc * (n - i) / (i + 1))
}

/// Class count for `s_max` slots with at most `k_max` simultaneous speakers.
pub fn class_count(s_max: usize, k_max: usize) -> usize {
    (0..=k_max.min(s_max)).map(|k| binomial(s_max, k)).sum()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseCodebook {
    s_max: usize,
    k_max: usize,
    raw_to_class: HashMap<u32, usize>,
    class_to_raw: Vec<u32>,
}

impl PseCodebook {
    pub fn new(s_max: usize, k_max: usize) -> Result<Self> {
        if k_max > s_max {
            return Err(Error::Config(format!(
                "k_max ({k_max}) must not exceed s_max ({s_max})"
            )));
        }
        if s_max > 16 {
            return Err(Error::Config(format!("s_max {s_max} is larger than 16")));
        }
        let class_to_raw: Vec<u32> = (0u32..(1 << s_max))
            .filter(|raw| raw.count_ones() as usize <= k_max)
            .collect();
        let raw_to_class = class_to_raw
            .iter()
            .enumerate()
            .map(|(class, &raw)| (raw, class))
            .collect();
        Ok(Self {
            s_max,
            k_max,
            raw_to_class,
            class_to_raw,
        })
    }

    pub fn s_max(&self) -> usize {
        self.s_max
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    /// Number of classes `N`.
    pub fn len(&self) -> usize {
        self.class_to_raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_to_raw.is_empty()
    }

    pub fn raw_of(&self, class: usize) -> Result<u32> {
        self.class_to_raw
            .get(class)
            .copied()
            .ok_or(Error::OutOfRange {
                index: class,
                limit: self.len(),
            })
    }

    pub fn class_of_raw(&self, raw: u32) -> Option<usize> {
        self.raw_to_class.get(&raw).copied()
    }

    /// Class index of `v`. Vectors shorter than `s_max` are zero-padded.
    pub fn encode_class(&self, v: &ActivityVector) -> Result<usize> {
        if v.len() > self.s_max {
            if v.bits()[self.s_max..].iter().any(|&b| b) {
                return Err(Error::InvalidLabel(format!(
                    "speaker slot beyond s_max={} is active",
                    self.s_max
                )));
            }
        }
        let raw = encode_raw(v);
        self.class_of_raw(raw).ok_or_else(|| {
            Error::InvalidLabel(format!(
                "{} active speakers exceeds k_max={}",
                v.popcount(),
                self.k_max
            ))
        })
    }

    /// Clamps to `k_max` first, so it never fails on overlap.
    pub fn encode_class_clamped(&self, v: &ActivityVector) -> Result<usize> {
        self.encode_class(&clamp_activity(v, self.k_max))
    }

    pub fn decode_class(&self, class: usize) -> Result<ActivityVector> {
        let raw = self.raw_of(class)?;
        Ok(ActivityVector::from_bits(
            (0..self.s_max).map(|s| raw & (1 << s) != 0).collect(),
        ))
    }

    /// Encodes every frame of `labels` (clamped); columns beyond `s_max` must be silent.
    pub fn encode_matrix(&self, labels: &ActivityMatrix) -> Result<PseSequence> {
        let classes = labels
            .rows()
            .map(|row| self.encode_class_clamped(&row))
            .collect::<Result<Vec<_>>>()?;
        Ok(PseSequence {
            classes,
            n_classes: self.len(),
        })
    }

    /// Decodes a class sequence into an `s_max`-column activity matrix.
    pub fn decode_sequence(&self, seq: &PseSequence) -> Result<ActivityMatrix> {
        let rows = seq
            .classes
            .iter()
            .map(|&c| self.decode_class(c))
            .collect::<Result<Vec<_>>>()?;
        if rows.is_empty() {
            return Ok(ActivityMatrix::zeros(0, self.s_max));
        }
        ActivityMatrix::from_rows(&rows)
    }

    /// Text table with one `class_index raw_code` pair per line.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for (class, raw) in self.class_to_raw.iter().enumerate() {
            let _ = writeln!(out, "{class} {raw}");
        }
        out
    }

    /// Parses a table written by [`PseCodebook::to_table`] and checks it
    /// against the canonical codebook for `(s_max, k_max)`.
    pub fn from_table(text: &str, s_max: usize, k_max: usize) -> Result<Self> {
        let expected = Self::new(s_max, k_max)?;
        let mut seen = 0;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let parse = |p: Option<&str>| -> Result<u64> {
                p.and_then(|s| s.parse().ok()).ok_or(Error::Parse {
                    line: i + 1,
                    msg: format!("expected `class_index raw_code`, got `{line}`"),
                })
            };
            let class = parse(parts.next())? as usize;
            let raw = parse(parts.next())? as u32;
            if expected.class_to_raw.get(class) != Some(&raw) || class != seen {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("entry {class} {raw} does not match the codebook"),
                });
            }
            seen += 1;
        }
        if seen != expected.len() {
            return Err(Error::Parse {
                line: text.lines().count(),
                msg: format!("table has {seen} classes, expected {}", expected.len()),
            });
        }
        Ok(expected)
    }
}

/// Per-frame class indices over a codebook of `n_classes` entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseSequence {
    pub classes: Vec<usize>,
    pub n_classes: usize,
}

impl PseSequence {
    pub fn new(classes: Vec<usize>, n_classes: usize) -> Result<Self> {
        if let Some(&bad) = classes.iter().find(|&&c| c >= n_classes) {
            return Err(Error::OutOfRange {
                index: bad,
                limit: n_classes,
            });
        }
        Ok(Self { classes, n_classes })
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn av(v: &[u8]) -> ActivityVector {
        ActivityVector::from_ints(v).unwrap()
    }

    #[test]
    fn raw_codes() {
        assert_eq!(encode_raw(&av(&[1, 0, 1, 0, 0, 0, 0, 0])), 5);
        assert_eq!(encode_raw(&av(&[0; 8])), 0);
        assert_eq!(encode_raw(&av(&[1; 8])), 255);
    }

    #[test]
    fn codebook_sizes() {
        // brute force over all bitmasks
        let brute = (0u32..256).filter(|m| m.count_ones() <= 3).count();
        assert_eq!(brute, 93);
        let cb = PseCodebook::new(8, 3).unwrap();
        assert_eq!(cb.len(), 93);
        assert_eq!(class_count(8, 3), 93);

        let full = PseCodebook::new(2, 2).unwrap();
        assert_eq!(full.len(), 4);
        for raw in 0..4 {
            assert_eq!(full.class_of_raw(raw), Some(raw as usize));
        }
        for raw in 0..8 {
            assert_eq!(cb.class_of_raw(raw), Some(raw as usize));
        }
        assert!(PseCodebook::new(2, 3).is_err());
    }

    #[test]
    fn encode_decode_examples() {
        let cb = PseCodebook::new(8, 3).unwrap();
        let c = cb.encode_class(&av(&[0, 1, 1, 0, 0, 0, 0, 0])).unwrap();
        assert_eq!(cb.raw_of(c).unwrap(), 6);
        assert_eq!(cb.encode_class(&av(&[0; 8])).unwrap(), 0);
        assert!(matches!(
            cb.encode_class(&av(&[1, 1, 1, 1, 0, 0, 0, 0])),
            Err(Error::InvalidLabel(_))
        ));
        let c5 = cb.class_of_raw(5).unwrap();
        assert_eq!(cb.decode_class(c5).unwrap(), av(&[1, 0, 1, 0, 0, 0, 0, 0]));
        assert_eq!(cb.decode_class(0).unwrap(), av(&[0; 8]));
        assert!(matches!(
            cb.decode_class(93),
            Err(Error::OutOfRange { index: 93, limit: 93 })
        ));
    }

    #[test]
    fn clamp_examples() {
        assert_eq!(
            clamp_activity(&av(&[1, 0, 1, 0, 0, 0, 0, 0]), 3),
            av(&[1, 0, 1, 0, 0, 0, 0, 0])
        );
        assert_eq!(
            clamp_activity(&av(&[1, 1, 1, 1, 0, 0, 0, 0]), 3),
            av(&[1, 1, 1, 0, 0, 0, 0, 0])
        );
        assert_eq!(clamp_activity(&av(&[1; 8]), 0), av(&[0; 8]));
    }

    #[test]
    fn codebook_size_matches_binomial_sum_exhaustively() {
        for s_max in 0..=12usize {
            for k_max in 0..=s_max {
                let brute = (0u32..(1 << s_max))
                    .filter(|m| m.count_ones() as usize <= k_max)
                    .count();
                assert_eq!(PseCodebook::new(s_max, k_max).unwrap().len(), brute);
                assert_eq!(class_count(s_max, k_max), brute);
            }
        }
    }

    #[test]
    fn table_round_trip() {
        let cb = PseCodebook::new(4, 2).unwrap();
        let table = cb.to_table();
        assert!(table.starts_with("0 0\n1 1\n2 2\n3 3\n4 4\n5 5\n6 6\n7 8\n"));
        assert_eq!(PseCodebook::from_table(&table, 4, 2).unwrap(), cb);
        let broken = table.replace("7 8", "7 7");
        assert!(matches!(
            PseCodebook::from_table(&broken, 4, 2),
            Err(Error::Parse { line: 8, .. })
        ));
    }

    proptest! {
        #[test]
        fn bijection(bits in proptest::collection::vec(any::<bool>(), 8)) {
            let cb = PseCodebook::new(8, 3).unwrap();
            let v = ActivityVector::from_bits(bits);
            match cb.encode_class(&v) {
                Ok(c) => prop_assert_eq!(cb.decode_class(c).unwrap(), v),
                Err(_) => prop_assert!(v.popcount() > 3),
            }
        }

        #[test]
        fn clamp_is_idempotent_and_shrinking(bits in proptest::collection::vec(any::<bool>(), 0..12), k in 0usize..6) {
            let v = ActivityVector::from_bits(bits);
            let once = clamp_activity(&v, k);
            prop_assert!(once.popcount() <= v.popcount());
            prop_assert!(once.popcount() <= k);
            prop_assert_eq!(clamp_activity(&once, k), once);
        }

        #[test]
        fn raw_code_is_monotone(a in 0u32..256, b in 0u32..256) {
            let to_vec = |m: u32| ActivityVector::from_bits((0..8).map(|s| m & (1 << s) != 0).collect());
            prop_assert_eq!(a < b, encode_raw(&to_vec(a)) < encode_raw(&to_vec(b)));
        }
    }
}
