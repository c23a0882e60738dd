//! Log-mel front end on a synthetic two-tone signal: writes a WAV, reads it
//! back and prints the frame-level and stacked feature shapes.
//!
//! cargo run --example logmel_features

use std::f32::consts::PI;

use told::features::{compute_logmel, compute_logmel_frames, read_wav, write_wav, AudioSignal, FeatureConfig};

fn main() -> told::Result<()> {
    let rate = 8000;
    let samples: Vec<f32> = (0..3 * rate as usize)
        .map(|i| {
            let t = i as f32 / rate as f32;
            let f = if t < 1.5 { 300.0 } else { 1800.0 };
            0.4 * (2.0 * PI * f * t).sin()
        })
        .collect();
    let dir = tempfile::tempdir().expect("temp dir");
    let path = dir.path().join("tones.wav");
    write_wav(&path, &AudioSignal::new(samples, rate, "tones")?)?;
    let audio = read_wav(&path)?;

    let cfg = FeatureConfig::default();
    let frames = compute_logmel_frames(&audio, &cfg)?;
    let model = compute_logmel(&audio, &cfg)?;
    println!("{:.2} s at {} Hz", audio.duration(), audio.sample_rate);
    println!("log-mel frames: {} x {} every {} s", frames.frames(), frames.dim(), frames.frame_period);
    println!("model input:    {} x {} every {} s", model.frames(), model.dim(), model.frame_period);

    // The loudest mel band moves up when the tone changes.
    for t in [20, 120, 200, 280] {
        let row = frames.row(t);
        let band = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        println!("frame {t:3}: loudest band {band}");
    }
    Ok(())
}
