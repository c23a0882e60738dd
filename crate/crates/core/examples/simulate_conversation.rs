//! Simulates one conversation and prints its turns, overlap ratio and a
//! coarse activity picture (one column per second).
//!
//! cargo run --example simulate_conversation -- [overlap_prob]

use told::simulator::{dataset_mixture, voice_pool, SimConfig};

fn main() -> told::Result<()> {
    let overlap_prob = std::env::args().nth(1).map_or(0.3, |a| a.parse().expect("overlap probability"));
    let cfg = SimConfig {
        overlap_prob,
        duration: 40.0,
        seed: 11,
        ..SimConfig::default()
    };
    let pool = voice_pool(&cfg);
    let mix = dataset_mixture(&cfg, &pool, 0)?;
    println!("{}: speakers {:?}, overlap ratio {:.3}", mix.id, mix.speaker_ids, mix.overlap_ratio());
    for turn in &mix.turns {
        println!("  speaker {} {:6.2} - {:6.2}", turn.speaker, turn.start, turn.end);
    }
    let per_second = (1.0 / cfg.frame_shift).round() as usize;
    for s in 0..mix.labels.speakers() {
        let line: String = (0..mix.labels.frames())
            .step_by(per_second)
            .map(|t| if mix.labels.get(t, s) { '#' } else { '.' })
            .collect();
        println!("{:>8} {line}", mix.speaker_ids[s]);
    }
    Ok(())
}
