//! Simulator statistics against a Monte Carlo reference.

use told::simulator::{dataset_mixture, overlap_counts, voice_pool, OverlapCounts, SimConfig};

/// Pooled overlap ratio at `overlap_prob = 0.3`, from
/// `tests/oracles/overlap_ratio.py 0.3 20000` (continuous-time measurement
/// over an independent re-implementation of the conversation process).
const REFERENCE_RATIO: f64 = 0.1410;

fn pooled_ratio(cfg: &SimConfig, n: usize) -> f64 {
    let pool = voice_pool(cfg);
    let total = (0..n).fold(OverlapCounts::default(), |acc, i| {
        let c = overlap_counts(&dataset_mixture(cfg, &pool, i).unwrap().labels);
        OverlapCounts {
            speech: acc.speech + c.speech,
            overlapped: acc.overlapped + c.overlapped,
        }
    });
    total.ratio()
}

#[test]
fn overlap_ratio_matches_reference_statistics() {
    let cfg = SimConfig {
        overlap_prob: 0.3,
        seed: 4,
        ..SimConfig::default()
    };
    let measured = pooled_ratio(&cfg, 200);
    assert!(
        (measured - REFERENCE_RATIO).abs() <= 0.1,
        "measured {measured:.4}, reference {REFERENCE_RATIO}"
    );
}

#[test]
fn overlap_grows_with_overlap_prob() {
    let at = |p: f64| {
        pooled_ratio(
            &SimConfig {
                overlap_prob: p,
                ..SimConfig::default()
            },
            60,
        )
    };
    let (none, some, many) = (at(0.0), at(0.3), at(0.8));
    assert_eq!(none, 0.0);
    assert!(none < some && some < many, "{none} {some} {many}");
}
