//! Deterministic synthetic conversations in feature space.
//!
//! Each voice is a random spectral template. A conversation is a chain of
//! turns with exponential durations; a turn either follows a pause or, with
//! probability `overlap_prob`, starts before the previous turn ends. Every
//! frame's feature vector is the sum of the active voices' templates plus
//! per-voice variation and global noise. An optional waveform mode renders a
//! harmonic sinusoid bank per voice instead.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::activity::ActivityMatrix;
use crate::error::{Error, Result};
use crate::features::{AudioSignal, FeatureSequence};
use crate::metrics::{activity_to_segments, rttm_emit};

pub const MIN_DURATION: f64 = 0.2;
pub const MAX_DURATION: f64 = 10.0;
/// Mean offset added to every template so speech carries more energy than silence.
pub const TEMPLATE_OFFSET: f32 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub n_speakers_range: [usize; 2],
    pub utterance_mean: f64,
    pub pause_mean: f64,
    pub overlap_prob: f64,
    pub duration: f64,
    pub noise_std: f64,
    pub seed: u64,
    pub feature_dim: usize,
    pub frame_shift: f64,
    pub variation_scale: f64,
    /// Number of distinct voices mixtures draw from.
    pub voice_pool: usize,
    /// Seed of voice 0 in the pool; voice `k` uses `voice_seed + k`.
    pub voice_seed: u64,
    pub s_max: usize,
    pub waveform: bool,
    pub sample_rate: u32,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n_speakers_range: [2, 3],
            utterance_mean: 2.5,
            pause_mean: 0.5,
            overlap_prob: 0.3,
            duration: 30.0,
            noise_std: 0.3,
            seed: 0,
            feature_dim: 23,
            frame_shift: 0.01,
            variation_scale: 0.5,
            voice_pool: 16,
            voice_seed: 1000,
            s_max: 8,
            waveform: false,
            sample_rate: 8000,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let [lo, hi] = self.n_speakers_range;
        if lo < 1 || lo > hi || hi > self.s_max {
            return Err(Error::Config(format!(
                "n_speakers_range [{lo}, {hi}] must satisfy 1 <= min <= max <= s_max={}",
                self.s_max
            )));
        }
        if hi > self.voice_pool {
            return Err(Error::Config(format!("voice_pool {} smaller than {hi} speakers", self.voice_pool)));
        }
        for (name, v) in [
            ("utterance_mean", self.utterance_mean),
            ("pause_mean", self.pause_mean),
            ("duration", self.duration),
            ("frame_shift", self.frame_shift),
            ("variation_scale", self.variation_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.overlap_prob) {
            return Err(Error::Config("overlap_prob must lie in [0, 1]".into()));
        }
        if !(self.noise_std >= 0.0) || self.feature_dim == 0 {
            return Err(Error::Config("noise_std must be >= 0 and feature_dim >= 1".into()));
        }
        if self.duration < self.frame_shift {
            return Err(Error::Config("duration shorter than one frame".into()));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        (self.duration / self.frame_shift + 1e-9).floor() as usize
    }
}

/// SplitMix64 finalizer over `(master, stream)`; used for per-item seeds.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerVoice {
    pub id: String,
    pub spectral_template: Vec<f32>,
    pub variation_scale: f64,
    pub seed: u64,
}

pub fn sample_voice(seed: u64, dim: usize, variation_scale: f64) -> SpeakerVoice {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spectral_template = (0..dim)
        .map(|_| TEMPLATE_OFFSET + rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    SpeakerVoice {
        id: format!("spk{seed}"),
        spectral_template,
        variation_scale,
        seed,
    }
}

pub fn voice_pool(cfg: &SimConfig) -> Vec<SpeakerVoice> {
    (0..cfg.voice_pool as u64)
        .map(|k| sample_voice(cfg.voice_seed + k, cfg.feature_dim, cfg.variation_scale))
        .collect()
}

/// One utterance: index into the mixture's voices, start and end in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Turn {
    pub speaker: usize,
    pub start: f64,
    pub end: f64,
}

fn truncated_exp(rng: &mut ChaCha8Rng, mean: f64) -> f64 {
    let d = Exp::new(1.0 / mean).expect("positive mean");
    d.sample(rng).clamp(MIN_DURATION, MAX_DURATION)
}

/// Turn sequence for `n` speakers. The first `n` turns visit every speaker
/// once in random order; later turns pick a speaker different from the
/// previous one.
pub fn sample_turns(n: usize, cfg: &SimConfig, rng: &mut ChaCha8Rng) -> Vec<Turn> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut turns = Vec::new();
    let mut start = truncated_exp(rng, cfg.pause_mean);
    let mut prev: Option<usize> = None;
    while start < cfg.duration {
        let speaker = if turns.len() < n {
            order[turns.len()]
        } else if n == 1 {
            0
        } else {
            let mut s = rng.random_range(0..n - 1);
            if Some(s) >= prev {
                s += 1;
            }
            s
        };
        let dur = truncated_exp(rng, cfg.utterance_mean);
        let end = (start + dur).min(cfg.duration);
        turns.push(Turn { speaker, start, end });
        prev = Some(speaker);
        if n > 1 && rng.random::<f64>() < cfg.overlap_prob {
            start = end - rng.random::<f64>() * (end - start);
        } else {
            start = end + truncated_exp(rng, cfg.pause_mean);
        }
    }
    turns
}

/// Frame `t` is active for a turn when its centre lies in `[start, end)`.
pub fn turns_to_labels(turns: &[Turn], n: usize, frames: usize, frame_shift: f64) -> ActivityMatrix {
    let mut labels = ActivityMatrix::zeros(frames, n);
    for turn in turns {
        let first = ((turn.start / frame_shift) - 0.5).ceil().max(0.0) as usize;
        for t in first..frames {
            let centre = (t as f64 + 0.5) * frame_shift;
            if centre >= turn.end {
                break;
            }
            if centre >= turn.start {
                labels.set(t, turn.speaker, true);
            }
        }
    }
    labels
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mixture {
    pub id: String,
    pub features: FeatureSequence,
    pub labels: ActivityMatrix,
    pub speaker_ids: Vec<String>,
    pub turns: Vec<Turn>,
    pub seed: u64,
    pub meta: SimConfig,
}

impl Mixture {
    /// Overlapped speech frames over speech frames (0 when silent).
    pub fn overlap_ratio(&self) -> f64 {
        overlap_counts(&self.labels).ratio()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OverlapCounts {
    pub speech: usize,
    pub overlapped: usize,
}

impl OverlapCounts {
    pub fn ratio(&self) -> f64 {
        if self.speech == 0 {
            0.0
        } else {
            self.overlapped as f64 / self.speech as f64
        }
    }
}

pub fn overlap_counts(labels: &ActivityMatrix) -> OverlapCounts {
    let mut c = OverlapCounts::default();
    for row in labels.rows() {
        match row.popcount() {
            0 => {}
            1 => c.speech += 1,
            _ => {
                c.speech += 1;
                c.overlapped += 1;
            }
        }
    }
    c
}

/// Simulates one conversation among `voices` in feature space.
pub fn simulate_mixture(id: &str, voices: &[SpeakerVoice], cfg: &SimConfig, seed: u64) -> Result<Mixture> {
    cfg.validate()?;
    let [lo, hi] = cfg.n_speakers_range;
    if voices.len() < lo || voices.len() > hi {
        return Err(Error::InvalidInput(format!(
            "{} voices outside the configured range [{lo}, {hi}]",
            voices.len()
        )));
    }
    if voices.iter().any(|v| v.spectral_template.len() != cfg.feature_dim) {
        return Err(Error::InvalidInput("voice template dimension mismatch".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = voices.len();
    let turns = sample_turns(n, cfg, &mut rng);
    let frames = cfg.frames();
    let labels = turns_to_labels(&turns, n, frames, cfg.frame_shift);
    let dim = cfg.feature_dim;
    let mut data = vec![0.0f32; frames * dim];
    for t in 0..frames {
        let row = &mut data[t * dim..(t + 1) * dim];
        for (s, voice) in voices.iter().enumerate() {
            if labels.get(t, s) {
                for (x, &m) in row.iter_mut().zip(&voice.spectral_template) {
                    *x += m + (voice.variation_scale * rng.sample::<f64, _>(StandardNormal)) as f32;
                }
            }
        }
        for x in row.iter_mut() {
            *x += (cfg.noise_std * rng.sample::<f64, _>(StandardNormal)) as f32;
        }
    }
    let features = FeatureSequence::new(frames, dim, data, cfg.frame_shift, id)?;
    Ok(Mixture {
        id: id.to_string(),
        features,
        labels,
        speaker_ids: voices.iter().map(|v| v.id.clone()).collect(),
        turns,
        seed,
        meta: cfg.clone(),
    })
}

/// Harmonic sinusoid bank per voice: fundamental and harmonic amplitudes are
/// drawn from the voice seed.
pub fn render_waveform(mixture: &Mixture, voices: &[SpeakerVoice], sample_rate: u32) -> Result<AudioSignal> {
    let n_samples = (mixture.meta.duration * sample_rate as f64).round() as usize;
    let mut samples = vec![0.0f64; n_samples];
    for turn in &mixture.turns {
        let voice = &voices[turn.speaker];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(voice.seed, 7));
        let f0 = 100.0 + 150.0 * rng.random::<f64>();
        let partials: Vec<(f64, f64, f64)> = (1..=6)
            .map(|h| (h as f64 * f0, rng.random::<f64>() / h as f64, rng.random::<f64>() * std::f64::consts::TAU))
            .filter(|(f, _, _)| *f < sample_rate as f64 / 2.0)
            .collect();
        let a = (turn.start * sample_rate as f64).round() as usize;
        let b = ((turn.end * sample_rate as f64).round() as usize).min(n_samples);
        for (i, x) in samples.iter_mut().enumerate().take(b).skip(a) {
            let t = i as f64 / sample_rate as f64;
            *x += partials.iter().map(|(f, amp, ph)| amp * (std::f64::consts::TAU * f * t + ph).sin()).sum::<f64>() * 0.15;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(mixture.seed, 11));
    let floor = 1e-3;
    let out: Vec<f32> = samples
        .iter()
        .map(|x| (x + floor * rng.sample::<f64, _>(StandardNormal)).clamp(-1.0, 1.0) as f32)
        .collect();
    AudioSignal::new(out, sample_rate, mixture.id.clone())
}

const LABEL_MAGIC: &[u8; 4] = b"TLAB";

/// Simulated first-pass errors: each frame independently, with probability
/// `prob`, has one of the first `speakers` columns flipped (column chosen uniformly).
pub fn flip_frames(labels: &ActivityMatrix, speakers: usize, prob: f64, seed: u64) -> ActivityMatrix {
    let mut out = labels.clone();
    let speakers = speakers.min(labels.speakers());
    if speakers == 0 {
        return out;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in 0..labels.frames() {
        if rng.random_bool(prob.clamp(0.0, 1.0)) {
            let s = rng.random_range(0..speakers);
            out.set(t, s, !labels.get(t, s));
        }
    }
    out
}

/// Frame-level label sidecar: magic, `u64` frames, `u64` speakers, one byte per cell.
pub fn write_labels(labels: &ActivityMatrix, w: &mut impl Write) -> std::io::Result<()> {
    w.write_all(LABEL_MAGIC)?;
    w.write_all(&(labels.frames() as u64).to_le_bytes())?;
    w.write_all(&(labels.speakers() as u64).to_le_bytes())?;
    let bytes: Vec<u8> = (0..labels.frames())
        .flat_map(|t| (0..labels.speakers()).map(move |s| (t, s)))
        .map(|(t, s)| labels.get(t, s) as u8)
        .collect();
    w.write_all(&bytes)
}

pub fn read_labels(r: &mut impl Read) -> Result<ActivityMatrix> {
    let bad = |m: &str| Error::InvalidInput(format!("label sidecar: {m}"));
    let mut head = [0u8; 20];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    if &head[..4] != LABEL_MAGIC {
        return Err(bad("bad magic"));
    }
    let frames = u64::from_le_bytes(head[4..12].try_into().unwrap()) as usize;
    let speakers = u64::from_le_bytes(head[12..20].try_into().unwrap()) as usize;
    let mut body = Vec::new();
    r.read_to_end(&mut body).map_err(|_| bad("unreadable body"))?;
    if body.len() != frames * speakers || body.iter().any(|&b| b > 1) {
        return Err(bad("body size or values invalid"));
    }
    Ok(ActivityMatrix::from_fn(frames, speakers, |t, s| body[t * speakers + s] == 1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub features: String,
    pub rttm: String,
    pub labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wav: Option<String>,
    pub n_speakers: usize,
    pub duration: f64,
    pub seed: u64,
    pub speakers: Vec<String>,
}

/// A dataset directory: `manifest.jsonl`, `sim_config.json` and per-mixture files.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub config: SimConfig,
    pub rows: Vec<ManifestRow>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CONFIG_FILE: &str = "sim_config.json";

/// A mixture read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetItem {
    pub id: String,
    pub features: FeatureSequence,
    pub labels: ActivityMatrix,
    pub speaker_ids: Vec<String>,
}

impl Manifest {
    /// Accepts the dataset directory or the manifest file itself.
    pub fn load(path: &Path) -> Result<Self> {
        let (dir, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (path.parent().map(Path::to_path_buf).unwrap_or_default(), path.to_path_buf())
        };
        let f = fs::File::open(&file).map_err(|e| Error::io(&file, e))?;
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&file, e))?;
            if line.trim().is_empty() {
                continue;
            }
            rows.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?);
        }
        let cfg_path = dir.join(CONFIG_FILE);
        let config = match fs::read_to_string(&cfg_path) {
            Ok(text) => serde_json::from_str(&text)?,
            Err(_) => SimConfig::default(),
        };
        Ok(Self { dir, config, rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn load_item(&self, index: usize) -> Result<DatasetItem> {
        let row = self.rows.get(index).ok_or(Error::OutOfRange {
            index,
            limit: self.rows.len(),
        })?;
        let mut features = FeatureSequence::load(&self.dir.join(&row.features))?;
        features.origin_id = row.id.clone();
        let lab_path = self.dir.join(&row.labels);
        let mut f = fs::File::open(&lab_path).map_err(|e| Error::io(&lab_path, e))?;
        let labels = read_labels(&mut f)?;
        if labels.frames() != features.frames() || labels.speakers() != row.speakers.len() {
            return Err(Error::InvalidInput(format!("{}: labels and features disagree", row.id)));
        }
        Ok(DatasetItem {
            id: row.id.clone(),
            features,
            labels,
            speaker_ids: row.speakers.clone(),
        })
    }

    pub fn load_all(&self) -> Result<Vec<DatasetItem>> {
        (0..self.rows.len()).map(|i| self.load_item(i)).collect()
    }
}

/// Mixture `index` of the dataset defined by `cfg`; a pure function of `(cfg, index)`.
pub fn dataset_mixture(cfg: &SimConfig, pool: &[SpeakerVoice], index: usize) -> Result<Mixture> {
    let seed = derive_seed(cfg.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lo, hi] = cfg.n_speakers_range;
    let n = rng.random_range(lo..=hi);
    let mut chosen = rand::seq::index::sample(&mut rng, pool.len(), n).into_vec();
    chosen.sort_unstable();
    let voices: Vec<SpeakerVoice> = chosen.iter().map(|&k| pool[k].clone()).collect();
    simulate_mixture(&format!("mix{index:05}"), &voices, cfg, derive_seed(seed, 1))
}

/// Writes `n_mixtures` mixtures plus the manifest into `out_dir`.
pub fn build_dataset(cfg: &SimConfig, n_mixtures: usize, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    if n_mixtures == 0 {
        return Err(Error::InvalidInput("n_mixtures must be >= 1".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pool = voice_pool(cfg);
    let mut rows = Vec::with_capacity(n_mixtures);
    for i in 0..n_mixtures {
        let mix = dataset_mixture(cfg, &pool, i)?;
        let feat = format!("{}.feat", mix.id);
        let rttm = format!("{}.rttm", mix.id);
        let lab = format!("{}.lab", mix.id);
        mix.features.save(&out_dir.join(&feat))?;
        let segs = activity_to_segments(&mix.labels, cfg.frame_shift, &mix.speaker_ids, &mix.id, 0.0, 0.0)?;
        write_file(&out_dir.join(&rttm), rttm_emit(&segs).as_bytes())?;
        let mut buf = Vec::new();
        write_labels(&mix.labels, &mut buf).map_err(|e| Error::io(out_dir.join(&lab), e))?;
        write_file(&out_dir.join(&lab), &buf)?;
        let wav = if cfg.waveform {
            let name = format!("{}.wav", mix.id);
            let voices: Vec<SpeakerVoice> = mix
                .speaker_ids
                .iter()
                .map(|id| pool.iter().find(|v| &v.id == id).cloned().expect("voice from pool"))
                .collect();
            crate::features::write_wav(&out_dir.join(&name), &render_waveform(&mix, &voices, cfg.sample_rate)?)?;
            Some(name)
        } else {
            None
        };
        rows.push(ManifestRow {
            id: mix.id.clone(),
            features: feat,
            rttm,
            labels: lab,
            wav,
            n_speakers: mix.speaker_ids.len(),
            duration: cfg.duration,
            seed: mix.seed,
            speakers: mix.speaker_ids.clone(),
        });
    }
    let mut text = String::new();
    for row in &rows {
        text.push_str(&serde_json::to_string(row)?);
        text.push('\n');
    }
    write_file(&out_dir.join(MANIFEST_FILE), text.as_bytes())?;
    write_file(&out_dir.join(CONFIG_FILE), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    Ok(Manifest {
        dir: out_dir.to_path_buf(),
        config: cfg.clone(),
        rows,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SimConfig {
        SimConfig {
            duration: 20.0,
            ..SimConfig::default()
        }
    }

    #[test]
    fn same_seed_same_voice() {
        assert_eq!(sample_voice(3, 23, 0.5), sample_voice(3, 23, 0.5));
        assert_ne!(sample_voice(3, 23, 0.5), sample_voice(4, 23, 0.5));
        assert_eq!(sample_voice(3, 23, 0.7).variation_scale, 0.7);
    }

    #[test]
    fn hundred_voices_distinct() {
        let voices: Vec<_> = (0..100).map(|s| sample_voice(s, 23, 0.5)).collect();
        let mut min = f32::INFINITY;
        for i in 0..100 {
            for j in i + 1..100 {
                let d: f32 = voices[i]
                    .spectral_template
                    .iter()
                    .zip(&voices[j].spectral_template)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f32>()
                    .sqrt();
                min = min.min(d);
            }
        }
        assert!(min > 1.0, "min pairwise distance {min}");
    }

    #[test]
    fn no_overlap_without_overlap_prob() {
        let c = SimConfig { overlap_prob: 0.0, ..cfg() };
        let pool = voice_pool(&c);
        for i in 0..10 {
            let m = dataset_mixture(&c, &pool, i).unwrap();
            assert!(m.labels.rows().all(|r| r.popcount() <= 1));
        }
    }

    #[test]
    fn deterministic_and_grid_aligned() {
        let c = cfg();
        let pool = voice_pool(&c);
        let a = dataset_mixture(&c, &pool, 4).unwrap();
        let b = dataset_mixture(&c, &pool, 4).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.labels.frames(), a.features.frames());
        assert_eq!(a.features.frames(), 2000);
        for s in 0..a.labels.speakers() {
            assert!(a.labels.column_count(s) > 0, "speaker {s} never speaks");
        }
    }

    #[test]
    fn silence_matches_noise_floor() {
        let c = cfg();
        let pool = voice_pool(&c);
        let (mut sum, mut n) = (0.0f64, 0usize);
        for i in 0..5 {
            let m = dataset_mixture(&c, &pool, i).unwrap();
            for t in 0..m.labels.frames() {
                if m.labels.row(t).popcount() == 0 {
                    sum += m.features.row(t).iter().map(|&x| x as f64).sum::<f64>();
                    n += c.feature_dim;
                }
            }
        }
        let mean = sum / n as f64;
        let se = c.noise_std / (n as f64).sqrt();
        assert!(mean.abs() < 5.0 * se, "silence mean {mean}");
    }

    #[test]
    fn labels_sidecar_round_trip() {
        let l = ActivityMatrix::from_fn(7, 3, |t, s| (t + s) % 3 == 0);
        let mut buf = Vec::new();
        write_labels(&l, &mut buf).unwrap();
        assert_eq!(read_labels(&mut buf.as_slice()).unwrap(), l);
        buf[0] = b'X';
        assert!(read_labels(&mut buf.as_slice()).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(SimConfig { n_speakers_range: [0, 2], ..cfg() }.validate().is_err());
        assert!(SimConfig { n_speakers_range: [3, 2], ..cfg() }.validate().is_err());
        assert!(SimConfig { n_speakers_range: [2, 9], ..cfg() }.validate().is_err());
        assert!(SimConfig { overlap_prob: 1.5, ..cfg() }.validate().is_err());
        assert!(SimConfig { duration: -1.0, ..cfg() }.validate().is_err());
    }
}
