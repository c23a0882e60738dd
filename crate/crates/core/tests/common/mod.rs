//! Shared fixtures and oracles for the integration tests.

#![allow(dead_code)]

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use told::eend_ola::EendOlaConfig;
use told::features::FeatureSequence;
use told::nn::ParamStore;
use told::soap::{ProfileSet, SoapConfig, SpeakerProfile};
use told::ActivityMatrix;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// D=8 stage-1 model with one block, for gradient and invariant checks.
pub fn tiny_stage1(s_max: usize) -> EendOlaConfig {
    EendOlaConfig {
        input_dim: 6,
        n_blocks: 1,
        model_dim: 8,
        n_heads: 2,
        ff_dim: 16,
        dropout: 0.0,
        s_max,
        k_max: s_max.min(2),
        lstm_hidden: 8,
        ..EendOlaConfig::default()
    }
}

pub fn tiny_soap(s_max: usize) -> SoapConfig {
    SoapConfig {
        input_dim: 6,
        encoder_channels: vec![5],
        kernel: 3,
        profile_dim: 4,
        sp_window: 4,
        ci_hidden: 6,
        cd_layers: 1,
        cd_heads: 2,
        cd_ff_dim: 8,
        lstm_hidden: 6,
        s_max,
        k_max: s_max.min(2),
        ..SoapConfig::default()
    }
}

pub fn random_features(frames: usize, dim: usize, seed: u64) -> FeatureSequence {
    let mut r = rng(seed);
    let data = (0..frames * dim).map(|_| r.random_range(-1.0f32..1.0)).collect();
    FeatureSequence::new(frames, dim, data, 0.1, format!("rand{seed}")).unwrap()
}

/// Random labels in which every speaker is active at least once.
pub fn random_labels(frames: usize, speakers: usize, seed: u64) -> ActivityMatrix {
    let mut r = rng(seed);
    let mut m = ActivityMatrix::from_fn(frames, speakers, |_, _| false);
    for t in 0..frames {
        for s in 0..speakers {
            m.set(t, s, r.random_bool(0.4));
        }
    }
    for s in 0..speakers {
        m.set(s % frames, s, true);
    }
    m
}

pub fn random_profiles(valid: &[bool], s_max: usize, dim: usize, seed: u64) -> ProfileSet {
    let mut r = rng(seed);
    let profiles = valid
        .iter()
        .enumerate()
        .map(|(s, &ok)| {
            if ok {
                let v: Vec<f32> = (0..dim).map(|_| r.random_range(-1.0f32..1.0)).collect();
                let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
                SpeakerProfile {
                    vector: v.iter().map(|x| x / n).collect(),
                    speaker_id: format!("p{s}"),
                    valid: true,
                }
            } else {
                SpeakerProfile::invalid(dim, format!("p{s}"))
            }
        })
        .collect();
    ProfileSet::new(profiles, s_max, dim).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// Largest absolute difference between two equally shaped tensors.
pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    let a: Vec<f64> = a.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    let b: Vec<f64> = b.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap();
    assert_eq!(a.len(), b.len());
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Result of a finite-difference comparison for one parameter tensor.
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub name: String,
    pub checked: usize,
    pub analytic_norm: f64,
    pub rel_error: f64,
}

/// Below this gradient norm a tensor is compared in absolute terms.
pub const GRAD_NORM_FLOOR: f64 = 1e-6;

fn set_entry(var: &candle_core::Var, flat: &[f64], i: usize, value: f64) {
    let mut data = flat.to_vec();
    data[i] = value;
    let t = Tensor::from_vec(data, var.dims(), var.device()).unwrap();
    var.set(&t).unwrap();
}

/// Compares the analytic gradient of `loss` with fourth-order central
/// differences (five-point stencil, step `h`) on up to `per_tensor` random entries of every parameter in
/// `store`. The store must hold f64 parameters. Relative error per tensor is
/// `‖a - n‖ / max(‖a‖, ‖n‖, GRAD_NORM_FLOOR)` over the sampled entries.
pub fn finite_difference_check(
    store: &ParamStore,
    loss: impl Fn() -> Tensor,
    per_tensor: usize,
    h: f64,
    seed: u64,
) -> Vec<GradCheck> {
    assert_eq!(store.dtype(), DType::F64);
    let grads = loss().backward().unwrap();
    let mut r = rng(seed);
    let mut out = Vec::new();
    for name in store.names().map(str::to_string).collect::<Vec<_>>() {
        let var = store.get(&name).unwrap().clone();
        let flat: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
        let analytic: Vec<f64> = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all().unwrap().to_vec1().unwrap(),
            None => vec![0.0; flat.len()],
        };
        let mut idx: Vec<usize> = (0..flat.len()).collect();
        for i in 0..idx.len().min(per_tensor) {
            let j = r.random_range(i..idx.len());
            idx.swap(i, j);
        }
        idx.truncate(per_tensor);
        let (mut diff, mut a_norm, mut n_norm) = (0.0f64, 0.0f64, 0.0f64);
        for &i in &idx {
            let at = |offset: f64| {
                set_entry(&var, &flat, i, flat[i] + offset);
                scalar(&loss())
            };
            let numeric = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
            set_entry(&var, &flat, i, flat[i]);
            diff += (analytic[i] - numeric).powi(2);
            a_norm += analytic[i].powi(2);
            n_norm += numeric.powi(2);
        }
        let (diff, a_norm, n_norm) = (diff.sqrt(), a_norm.sqrt(), n_norm.sqrt());
        out.push(GradCheck {
            name,
            checked: idx.len(),
            analytic_norm: a_norm,
            rel_error: diff / a_norm.max(n_norm).max(GRAD_NORM_FLOOR),
        });
    }
    out
}

pub fn worst(checks: &[GradCheck]) -> &GradCheck {
    checks
        .iter()
        .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
        .expect("at least one parameter")
}

/// Overrides for a pipeline small enough to train in seconds: 6-dim
/// simulated features used unstacked at a 100 ms grid, tiny models.
pub const TINY_PIPELINE: &[&str] = &[
    "features.n_mels=6",
    "features.stack_context=0",
    "sim.feature_dim=6",
    "sim.duration=20.0",
    "sim.s_max=3",
    "eend_ola.input_dim=6",
    "eend_ola.model_dim=8",
    "eend_ola.n_heads=2",
    "eend_ola.ff_dim=16",
    "eend_ola.n_blocks=1",
    "eend_ola.lstm_hidden=8",
    "eend_ola.s_max=3",
    "eend_ola.k_max=2",
    "soap.input_dim=6",
    "soap.encoder_channels=[5]",
    "soap.profile_dim=4",
    "soap.sp_window=4",
    "soap.ci_hidden=6",
    "soap.cd_layers=1",
    "soap.cd_heads=2",
    "soap.cd_ff_dim=8",
    "soap.lstm_hidden=6",
    "soap.s_max=3",
    "soap.k_max=2",
    "trainer.batch_size=2",
    "trainer.warmup_steps=2",
    "trainer.profile_epochs=2",
    "trainer.profile_crop_seconds=1.0",
    "trainer.stage2_epochs=4",
    "trainer.stage2_max_seq_seconds=10.0",
    "trainer.stage1_phases=[{epochs=1,alpha=1.0,max_seq_seconds=10.0}]",
    "trainer.eval_der=false",
    "profile_min_frames=5",
];

pub fn tiny_pipeline(extra: &[&str]) -> told::pipeline::PipelineConfig {
    let overrides: Vec<String> = TINY_PIPELINE.iter().chain(extra).map(|s| s.to_string()).collect();
    told::pipeline::PipelineConfig::from_toml_with_overrides("", &overrides).unwrap()
}
