//! Log-mel front end against a naive-DFT reference on a fixed sine sweep.

use std::f64::consts::PI;

use told::features::{compute_logmel, read_wav, write_wav, AudioSignal, FeatureConfig};

const RATE: u32 = 8000;

/// Linear chirp from 100 Hz to 3.5 kHz over two seconds at half scale.
fn sweep() -> AudioSignal {
    let n = 2 * RATE as usize;
    let (f0, f1, dur) = (100.0, 3500.0, 2.0);
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / RATE as f64;
            (0.5 * (2.0 * PI * (f0 * t + (f1 - f0) * t * t / (2.0 * dur))).sin()) as f32
        })
        .collect();
    AudioSignal::new(samples, RATE, "sweep").unwrap()
}

fn mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn inv_mel(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Straight transcription of the front end: 25 ms periodic-Hann frames every
/// 10 ms, zero-padded to a power of two, O(N^2) DFT, triangular mel filters,
/// natural log with a 1e-10 floor, then ±7 frame stacking with edge
/// replication and every 10th frame kept.
fn reference(x: &[f32], n_mels: usize, context: usize, factor: usize) -> Vec<Vec<f64>> {
    let win = (0.025 * RATE as f64).round() as usize;
    let hop = (0.010 * RATE as f64).round() as usize;
    let mut n_fft = 1;
    while n_fft < win {
        n_fft *= 2;
    }
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| inv_mel(mel(RATE as f64 / 2.0) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let frames = (x.len() - win) / hop + 1;
    let mut logmel = Vec::with_capacity(frames);
    for t in 0..frames {
        let seg: Vec<f64> = (0..win)
            .map(|i| x[t * hop + i] as f64 * (0.5 - 0.5 * (2.0 * PI * i as f64 / win as f64).cos()))
            .collect();
        let power: Vec<f64> = (0..=n_fft / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, v) in seg.iter().enumerate() {
                    let a = -2.0 * PI * (k * i) as f64 / n_fft as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                re * re + im * im
            })
            .collect();
        let row: Vec<f64> = (0..n_mels)
            .map(|m| {
                let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
                let e: f64 = power
                    .iter()
                    .enumerate()
                    .map(|(k, p)| {
                        let f = k as f64 * RATE as f64 / n_fft as f64;
                        let w = if f > l && f <= c {
                            (f - l) / (c - l)
                        } else if f > c && f < r {
                            (r - f) / (r - c)
                        } else {
                            0.0
                        };
                        w * p
                    })
                    .sum();
                e.max(1e-10).ln()
            })
            .collect();
        logmel.push(row);
    }
    (0..frames)
        .step_by(factor)
        .map(|t| {
            (0..2 * context + 1)
                .flat_map(|j| {
                    let src = (t as i64 + j as i64 - context as i64).clamp(0, frames as i64 - 1) as usize;
                    logmel[src].clone()
                })
                .collect()
        })
        .collect()
}

#[test]
fn sine_sweep_matches_naive_dft_reference() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sweep.wav");
    write_wav(&path, &sweep()).unwrap();
    let audio = read_wav(&path).unwrap();

    let cfg = FeatureConfig::default();
    let got = compute_logmel(&audio, &cfg).unwrap();
    assert_eq!(got.dim(), 345);
    assert!((got.frame_period - 0.1).abs() < 1e-12);

    let want = reference(&audio.samples, 23, 7, 10);
    assert_eq!(got.frames(), want.len());
    let mut worst = 0.0f64;
    for (t, row) in want.iter().enumerate() {
        for (d, &v) in row.iter().enumerate() {
            worst = worst.max((got.row(t)[d] as f64 - v).abs());
        }
    }
    assert!(worst < 1e-3, "max log-mel discrepancy {worst}");
}
