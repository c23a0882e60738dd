//! Two-stage inference, stage-2 training schedule and checkpoint averaging.

mod common;

use candle_core::DType;
use common::*;
use told::checkpoint::Checkpoint;
use told::eend_ola::EendOla;
use told::metrics::activity_to_segments;
use told::pipeline::{
    load_recordings, refine, run_told, speaker_slots, train_profile_extractor, train_stage2, Recording, Refiner,
};
use told::simulator::build_dataset;
use told::soap::{ProfileExtractor, SoapModel, ENCODER_PREFIX};
use told::ActivityMatrix;

struct Models {
    stage1: EendOla,
    soap: SoapModel,
    extractor: ProfileExtractor,
}

fn models() -> Models {
    let cfg = tiny_pipeline(&[]);
    Models {
        stage1: EendOla::new(cfg.eend_ola.clone(), DType::F32, 1).unwrap(),
        soap: SoapModel::new(cfg.soap.clone(), DType::F32, 2).unwrap(),
        extractor: ProfileExtractor::new(cfg.soap.clone(), 4, DType::F32, 3).unwrap(),
    }
}

#[test]
fn zero_refinement_iterations_return_stage1_output() {
    let m = models();
    let refiner = Refiner {
        soap: &m.soap,
        extractor: &m.extractor,
    };
    let x = random_features(60, 6, 4);
    let first = m.stage1.infer(&x).unwrap();
    for (cfg, r) in [
        (tiny_pipeline(&["n_refine_iters=0"]), Some(&refiner)),
        (tiny_pipeline(&[]), None),
    ] {
        let out = run_told(&x, &m.stage1, r, &cfg).unwrap();
        assert_eq!(out.activity, first.activity);
        assert_eq!(out.stage1_activity, first.activity);
        assert!(out.diagnostics.profiles_per_iter.is_empty());
        let segs = activity_to_segments(&first.activity, 0.1, &speaker_slots(3), &x.origin_id, 0.0, 0.0).unwrap();
        assert_eq!(out.segments, segs);
    }
}

#[test]
fn single_speaker_recording_yields_one_profile() {
    let m = models();
    let refiner = Refiner {
        soap: &m.soap,
        extractor: &m.extractor,
    };
    let x = random_features(50, 6, 5);
    let initial = ActivityMatrix::from_fn(50, 3, |t, s| s == 0 && (5..40).contains(&t));
    // One iteration: an untrained scorer may leave no single-speaker frames for a second.
    let cfg = tiny_pipeline(&["n_refine_iters=1"]);
    let (activity, diag) = refine(&x, &initial, &refiner, &cfg).unwrap();
    assert_eq!(diag.stage1_speakers, 1);
    assert!(!diag.fell_back);
    assert_eq!(diag.profiles_per_iter, [1]);
    for s in 1..3 {
        assert_eq!(activity.column_count(s), 0, "slot {s} has no profile and must stay silent");
    }
}

#[test]
fn missing_profiles_fall_back_to_input() {
    let m = models();
    let refiner = Refiner {
        soap: &m.soap,
        extractor: &m.extractor,
    };
    let x = random_features(40, 6, 6);
    let cfg = tiny_pipeline(&[]);
    // Two speakers, but fewer single-speaker frames than `profile_min_frames`.
    let initial = ActivityMatrix::from_fn(40, 3, |t, s| s < 2 && (t < 3 || (10..30).contains(&t)) && (s == 0 || t >= 10));
    let (activity, diag) = refine(&x, &initial, &refiner, &cfg).unwrap();
    assert!(diag.fell_back);
    assert_eq!(activity, initial);
    let silent = ActivityMatrix::zeros(40, 3);
    let (activity, diag) = refine(&x, &silent, &refiner, &cfg).unwrap();
    assert!(diag.fell_back && diag.stage1_speakers == 0);
    assert_eq!(activity, silent);
}

#[test]
fn stop_when_unchanged_ends_refinement_early() {
    let m = models();
    let refiner = Refiner {
        soap: &m.soap,
        extractor: &m.extractor,
    };
    let x = random_features(60, 6, 7);
    let initial = ActivityMatrix::from_fn(60, 3, |t, s| (s == 0 && t < 30) || (s == 1 && t >= 30));
    let cfg = tiny_pipeline(&["n_refine_iters=6", "stop_when_unchanged=true"]);
    let (_, diag) = refine(&x, &initial, &refiner, &cfg).unwrap();
    let n = diag.changes_per_iter.len();
    assert!(n >= 1 && n <= 6);
    if n < 6 {
        assert_eq!(diag.changes_per_iter[n - 1], 0);
    }
    assert!(diag.changes_per_iter[..n - 1].iter().all(|&c| c > 0));
}

fn tiny_recordings(cfg: &told::pipeline::PipelineConfig, n: usize) -> (tempfile::TempDir, Vec<Recording>) {
    let dir = tempfile::tempdir().unwrap();
    let manifest = build_dataset(&cfg.sim, n, dir.path()).unwrap();
    let recs = load_recordings(&manifest, cfg).unwrap();
    (dir, recs)
}

#[test]
fn encoder_stays_frozen_for_the_configured_epochs() {
    let cfg = tiny_pipeline(&["trainer.freeze_fraction=0.5"]);
    let (_dir, recs) = tiny_recordings(&cfg, 6);
    let (extractor, report) = train_profile_extractor(&cfg, &recs).unwrap();
    assert_eq!(report.epochs.len(), 2);
    let (model, s2) = train_stage2(&cfg, &recs, &extractor).unwrap();
    let frozen: Vec<bool> = s2.epochs.iter().map(|e| e.frozen).collect();
    assert_eq!(frozen, [true, true, false, false]);

    // The encoder starts as a copy of the extractor's layers.
    let initial = {
        let fresh = SoapModel::new(cfg.soap.clone(), DType::F32, 99).unwrap();
        fresh.init_encoder_from(&extractor).unwrap();
        let c = Checkpoint::from_stores(s2.checkpoint.meta.clone(), &[("soap.", fresh.store())]).unwrap();
        c.params_checksum(&format!("soap.{ENCODER_PREFIX}"))
    };
    let sums: Vec<&str> = s2.epochs.iter().map(|e| e.encoder_checksum.as_str()).collect();
    assert_eq!(sums[0], initial);
    assert_eq!(sums[1], initial);
    assert_ne!(sums[2], initial);
    assert_ne!(sums[3], sums[2]);
    assert_eq!(s2.checkpoint.params_checksum(&format!("soap.{ENCODER_PREFIX}")), sums[3]);
    assert_eq!(model.config(), &cfg.soap);
}

/// Minimal independent reader for the checkpoint container.
fn read_params(bytes: &[u8]) -> Vec<(String, Vec<f32>)> {
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
    let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap()) as usize;
    assert_eq!(&bytes[..4], b"TCKP");
    let mut o = 8;
    o += 8 + u64_at(o);
    let count = u64_at(o);
    o += 8;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = u32_at(o);
        let name = String::from_utf8(bytes[o + 4..o + 4 + len].to_vec()).unwrap();
        o += 4 + len;
        let rank = u32_at(o);
        o += 4;
        let n: usize = (0..rank).map(|k| u64_at(o + 8 * k)).product();
        o += 8 * rank;
        let data = bytes[o..o + 4 * n].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        o += 4 * n;
        out.push((name, data));
    }
    assert_eq!(o, bytes.len());
    out
}

#[test]
fn averaged_checkpoint_matches_scripted_mean() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_pipeline(&[]);
    let mut paths = Vec::new();
    for seed in [10u64, 11] {
        let m = EendOla::new(cfg.eend_ola.clone(), DType::F32, seed).unwrap();
        let c = told::pipeline::train::stage1_checkpoint(&m, &cfg, seed as usize).unwrap();
        let p = dir.path().join(format!("e{seed}.ckpt"));
        c.save(&p).unwrap();
        paths.push(p);
    }
    let out = dir.path().join("avg.ckpt");
    let argv = [
        "told".to_string(),
        "avg-ckpt".into(),
        "--out".into(),
        out.display().to_string(),
        paths[0].display().to_string(),
        paths[1].display().to_string(),
    ];
    assert_eq!(told::pipeline::cli::run(argv), 0);

    let a = read_params(&std::fs::read(&paths[0]).unwrap());
    let b = read_params(&std::fs::read(&paths[1]).unwrap());
    let avg = read_params(&std::fs::read(&out).unwrap());
    assert_eq!(avg.len(), a.len());
    for ((na, va), ((nb, vb), (nm, vm))) in a.iter().zip(b.iter().zip(&avg)) {
        assert!(na == nb && nb == nm);
        for ((x, y), m) in va.iter().zip(vb).zip(vm) {
            assert_eq!(*m, ((*x as f64 + *y as f64) / 2.0) as f32, "{nm}");
        }
    }
    let meta = Checkpoint::load(&out).unwrap().meta;
    assert_eq!((meta.averaged, meta.epoch), (2, 11));
}
