//! Trains a small stage-1 model on 50 simulated conversations and reports
//! train-set DER per epoch.
//!
//! cargo run --release --example train_stage1_toy -- [key=value ...]
//! e.g. `trainer.batch_size=4 'trainer.stage1_phases=[{epochs=5,alpha=1.0,max_seq_seconds=15.0}]'`

use told::pipeline::{load_recordings, train_stage1, PipelineConfig};
use told::simulator::build_dataset;

const TOY: &[&str] = &[
    "eend_ola.model_dim=64",
    "eend_ola.ff_dim=256",
    "eend_ola.lstm_hidden=64",
    "trainer.stage1_phases=[{epochs=30,alpha=1.0,max_seq_seconds=50.0}]",
];

fn main() -> told::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let overrides: Vec<String> = TOY.iter().map(|s| s.to_string()).chain(std::env::args().skip(1)).collect();
    let cfg = PipelineConfig::from_toml_with_overrides("", &overrides)?;
    let dir = tempfile::tempdir().expect("temp dir");
    let manifest = build_dataset(&cfg.sim, 50, dir.path())?;
    let recordings = load_recordings(&manifest, &cfg)?;
    let (_, report) = train_stage1(&cfg, &recordings)?;
    println!("epoch 0 DER {:.4}", report.initial_der.unwrap_or(f64::NAN));
    for e in &report.epochs {
        println!("epoch {} loss {:.4} DER {:.4}", e.epoch, e.total, e.train_der.unwrap_or(f64::NAN));
    }
    Ok(())
}
