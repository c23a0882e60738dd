//! Saves two stage-1 checkpoints with different initializations, averages
//! them and loads the result back into a model.
//!
//! cargo run --example checkpoint_averaging

use candle_core::DType;
use told::checkpoint::{average_checkpoints, Checkpoint};
use told::eend_ola::EendOla;
use told::pipeline::train::stage1_checkpoint;
use told::pipeline::{load_stage1, PipelineConfig};

fn main() -> told::Result<()> {
    let cfg = PipelineConfig::from_toml_with_overrides("", &["eend_ola.model_dim=32".into(), "eend_ola.ff_dim=64".into()])?;
    let dir = tempfile::tempdir().expect("temp dir");
    let mut saved = Vec::new();
    for epoch in [9, 10] {
        let model = EendOla::new(cfg.eend_ola.clone(), DType::F32, epoch as u64)?;
        let path = dir.path().join(format!("epoch{epoch}.ckpt"));
        stage1_checkpoint(&model, &cfg, epoch)?.save(&path)?;
        let ckpt = Checkpoint::load(&path)?;
        println!("{}: {} tensors, sha256 {}", path.display(), ckpt.params.len(), ckpt.checksum()?);
        saved.push(ckpt);
    }
    let avg = average_checkpoints(&saved)?;
    let name = avg.params.keys().next().expect("parameters").clone();
    let first = |c: &Checkpoint| c.params[&name].data[0];
    println!("{name}[0]: {:.6} and {:.6} average to {:.6}", first(&saved[0]), first(&saved[1]), first(&avg));
    println!("averaged {} checkpoints, epoch {}", avg.meta.averaged, avg.meta.epoch);

    let model = load_stage1(&avg)?;
    println!("reloaded model with {} classes", model.codebook().len());
    Ok(())
}
