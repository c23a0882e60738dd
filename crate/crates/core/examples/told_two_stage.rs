//! Full two-stage flow on 50 simulated conversations: profile extractor,
//! stage-1 model, SOAP post-processor, then train-set DER of stage 1 alone
//! against stage 1 + refinement. Also rescoring of corrupted reference
//! activity with oracle profiles.
//!
//! cargo run --release --example told_two_stage -- [key=value ...]

use told::metrics::DerResult;
use told::pipeline::{
    load_recordings, oracle_profiles, refine, run_told, score_activity, train_profile_extractor, train_stage1, train_stage2,
    PipelineConfig, Refiner,
};
use told::simulator::{build_dataset, derive_seed, flip_frames};

const TOY: &[&str] = &[
    "eend_ola.model_dim=64",
    "eend_ola.ff_dim=256",
    "eend_ola.lstm_hidden=64",
    "soap.encoder_channels=[32,64]",
    "soap.profile_dim=64",
    "soap.ci_hidden=64",
    "soap.cd_ff_dim=128",
    "soap.lstm_hidden=64",
    "trainer.batch_size=1",
    "trainer.warmup_steps=25",
    "trainer.stage1_phases=[{epochs=12,alpha=1.0,max_seq_seconds=15.0}]",
    "trainer.stage2_epochs=20",
    "trainer.profile_epochs=10",
];

fn pooled(results: &[DerResult]) -> f64 {
    DerResult::aggregate(results).der
}

fn main() -> told::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let overrides: Vec<String> = TOY.iter().map(|s| s.to_string()).chain(std::env::args().skip(1)).collect();
    let cfg = PipelineConfig::from_toml_with_overrides("", &overrides)?;
    let dir = tempfile::tempdir().expect("temp dir");
    let manifest = build_dataset(&cfg.sim, 50, dir.path())?;
    let recordings = load_recordings(&manifest, &cfg)?;

    let (extractor, profiles) = train_profile_extractor(&cfg, &recordings)?;
    println!(
        "profiles: {} speakers, held-out accuracy {:.3}, cosine same {:.3} / different {:.3}",
        profiles.speakers.len(),
        profiles.heldout_accuracy,
        profiles.mean_same_cosine,
        profiles.mean_diff_cosine
    );
    let (stage1, _) = train_stage1(&cfg, &recordings)?;
    let (soap, _) = train_stage2(&cfg, &recordings, &extractor)?;
    let refiner = Refiner {
        soap: &soap,
        extractor: &extractor,
    };

    let (mut first, mut told, mut corrupt, mut rescored, mut refined) = (vec![], vec![], vec![], vec![], vec![]);
    let collar = cfg.postprocess.collar;
    for (i, rec) in recordings.iter().enumerate() {
        let out = run_told(&rec.features, &stage1, Some(&refiner), &cfg)?;
        first.push(score_activity(rec, &out.stage1_activity, collar)?);
        told.push(score_activity(rec, &out.activity, collar)?);

        let noisy = flip_frames(&rec.labels, rec.labels.speakers(), 0.2, derive_seed(7, i as u64));
        corrupt.push(score_activity(rec, &noisy, collar)?);
        let set = oracle_profiles(&extractor, rec, cfg.soap.s_max, cfg.profile_min_frames)?;
        rescored.push(score_activity(rec, &soap.infer(&rec.features, &set)?.activity, collar)?);
        refined.push(score_activity(rec, &refine(&rec.features, &noisy, &refiner, &cfg)?.0, collar)?);
    }
    println!("stage 1 DER {:.4}", pooled(&first));
    println!("stage 1 + refinement DER {:.4}", pooled(&told));
    println!("corrupted reference DER {:.4}", pooled(&corrupt));
    println!("SOAP with oracle profiles DER {:.4}", pooled(&rescored));
    println!("refinement of corrupted reference DER {:.4}", pooled(&refined));
    Ok(())
}
