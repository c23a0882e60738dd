//! Log-mel filterbank features, frame stacking and feature containers.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to mel energies before the log.
pub const LOG_FLOOR: f64 = 1e-10;

const CONTAINER_MAGIC: &[u8; 4] = b"TFEA";

#[derive(Debug, Clone, PartialEq)]
pub struct AudioSignal {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    pub id: String,
}

impl AudioSignal {
    pub fn new(samples: Vec<f32>, sample_rate: u32, id: impl Into<String>) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::InvalidInput("non-finite audio sample".into()));
        }
        Ok(Self {
            samples,
            sample_rate,
            id: id.into(),
        })
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// Analysis window in seconds.
    pub window_len: f64,
    /// Frame shift in seconds.
    pub hop_len: f64,
    pub n_mels: usize,
    /// Neighbouring frames concatenated on each side.
    pub stack_context: usize,
    pub subsample: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            window_len: 0.025,
            hop_len: 0.010,
            n_mels: 23,
            stack_context: 7,
            subsample: 10,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.hop_len > 0.0) || self.window_len < self.hop_len {
            return Err(Error::Config(format!(
                "need window_len >= hop_len > 0, got {} / {}",
                self.window_len, self.hop_len
            )));
        }
        if self.n_mels == 0 || self.subsample == 0 {
            return Err(Error::Config("n_mels and subsample must be >= 1".into()));
        }
        Ok(())
    }

    /// Feature dimension after stacking.
    pub fn output_dim(&self) -> usize {
        self.n_mels * (2 * self.stack_context + 1)
    }

    /// Seconds per frame after subsampling.
    pub fn output_period(&self) -> f64 {
        self.hop_len * self.subsample as f64
    }
}

/// T×F matrix of frame features, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    frames: usize,
    dim: usize,
    data: Vec<f32>,
    pub frame_period: f64,
    pub origin_id: String,
}

impl FeatureSequence {
    pub fn new(frames: usize, dim: usize, data: Vec<f32>, frame_period: f64, origin_id: impl Into<String>) -> Result<Self> {
        if frames == 0 || dim == 0 {
            return Err(Error::InvalidInput(format!("empty feature matrix {frames}x{dim}")));
        }
        if data.len() != frames * dim {
            return Err(Error::InvalidInput(format!(
                "{} values for a {frames}x{dim} matrix",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        if !(frame_period > 0.0) {
            return Err(Error::InvalidInput(format!("frame period {frame_period}")));
        }
        Ok(Self {
            frames,
            dim,
            data,
            frame_period,
            origin_id: origin_id.into(),
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn duration(&self) -> f64 {
        self.frames as f64 * self.frame_period
    }

    /// Frames `start..start+len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames {
            return Err(Error::OutOfRange {
                index: start + len,
                limit: self.frames,
            });
        }
        Self::new(
            len,
            self.dim,
            self.data[start * self.dim..(start + len) * self.dim].to_vec(),
            self.frame_period,
            self.origin_id.clone(),
        )
    }

    pub fn write_binary(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(CONTAINER_MAGIC)?;
        w.write_all(&(self.frames as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&self.frame_period.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_binary(r: &mut impl Read, origin_id: impl Into<String>) -> Result<Self> {
        let bad = |e: std::io::Error| Error::InvalidInput(format!("feature container: {e}"));
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(bad)?;
        if &magic != CONTAINER_MAGIC {
            return Err(Error::InvalidInput("not a feature container".into()));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word).map_err(bad)?;
        let frames = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word).map_err(bad)?;
        let dim = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word).map_err(bad)?;
        let period = f64::from_le_bytes(word);
        let mut bytes = vec![0u8; frames.checked_mul(dim).and_then(|n| n.checked_mul(4)).ok_or_else(|| Error::InvalidInput("container too large".into()))?];
        r.read_exact(&mut bytes).map_err(bad)?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Self::new(frames, dim, data, period, origin_id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        self.write_binary(&mut f).map_err(|e| Error::io(path, e))?;
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path).map_err(|e| Error::io(path, e))?);
        let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Self::read_binary(&mut f, id)
    }

    /// Text form: a `T F frame_period` header line, then one row per frame.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {} {}\n", self.frames, self.dim, self.frame_period);
        for t in 0..self.frames {
            let row: Vec<String> = self.row(t).iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
        out
    }

    pub fn from_text(text: &str, origin_id: impl Into<String>) -> Result<Self> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or(Error::Parse {
            line: 1,
            msg: "missing header".into(),
        })?;
        let h: Vec<&str> = header.split_whitespace().collect();
        let parse_err = |line: usize, msg: &str| Error::Parse {
            line,
            msg: msg.to_string(),
        };
        if h.len() != 3 {
            return Err(parse_err(1, "header must be `T F frame_period`"));
        }
        let frames: usize = h[0].parse().map_err(|_| parse_err(1, "bad T"))?;
        let dim: usize = h[1].parse().map_err(|_| parse_err(1, "bad F"))?;
        let period: f64 = h[2].parse().map_err(|_| parse_err(1, "bad frame period"))?;
        let mut data = Vec::with_capacity(frames * dim);
        for (i, line) in lines {
            let row = line
                .split_whitespace()
                .map(|v| v.parse::<f32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| parse_err(i + 1, "bad value"))?;
            if row.len() != dim {
                return Err(parse_err(i + 1, "wrong row length"));
            }
            data.extend(row);
        }
        Self::new(frames, dim, data, period, origin_id)
    }
}

fn hz_to_mel(hz: f64) -> f64 {
    1127.0 * (1.0 + hz / 700.0).ln()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * ((mel / 1127.0).exp() - 1.0)
}

/// Triangular mel filters (`n_mels` rows of `n_fft/2 + 1` weights) spanning 0..Nyquist.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(nyquist));
    let centers: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    (0..n_mels)
        .map(|m| {
            let (left, center, right) = (centers[m], centers[m + 1], centers[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * sample_rate as f64 / n_fft as f64;
                    if f <= left || f >= right {
                        0.0
                    } else if f <= center {
                        (f - left) / (center - left)
                    } else {
                        (right - f) / (right - center)
                    }
                })
                .collect()
        })
        .collect()
}

/// Periodic Hann window.
pub fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / len as f64).cos())
        .collect()
}

/// Window and hop sizes in samples.
pub fn frame_geometry(cfg: &FeatureConfig, sample_rate: u32) -> (usize, usize) {
    let win = (cfg.window_len * sample_rate as f64).round() as usize;
    let hop = (cfg.hop_len * sample_rate as f64).round() as usize;
    (win.max(1), hop.max(1))
}

/// Log-mel features at the hop rate, without stacking.
pub fn compute_logmel_frames(signal: &AudioSignal, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    cfg.validate()?;
    if signal.samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidInput("non-finite audio sample".into()));
    }
    let (win, hop) = frame_geometry(cfg, signal.sample_rate);
    let n = signal.samples.len();
    if n < win {
        return Err(Error::InvalidInput(format!(
            "signal of {n} samples is shorter than one {win}-sample window"
        )));
    }
    let frames = (n - win) / hop + 1;
    let n_fft = win.next_power_of_two();
    let window = hann_window(win);
    let bank = mel_filterbank(cfg.n_mels, n_fft, signal.sample_rate);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);

    let mut data = Vec::with_capacity(frames * cfg.n_mels);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut power = vec![0.0; n_fft / 2 + 1];
    for t in 0..frames {
        let start = t * hop;
        buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
        for i in 0..win {
            buf[i].re = signal.samples[start + i] as f64 * window[i];
        }
        fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr();
        }
        for filt in &bank {
            let e: f64 = filt.iter().zip(&power).map(|(w, p)| w * p).sum();
            data.push(e.max(LOG_FLOOR).ln() as f32);
        }
    }
    FeatureSequence::new(frames, cfg.n_mels, data, cfg.hop_len, signal.id.clone())
}

/// Log-mel features followed by stacking and subsampling per `cfg`.
pub fn compute_logmel(signal: &AudioSignal, cfg: &FeatureConfig) -> Result<FeatureSequence> {
    let frames = compute_logmel_frames(signal, cfg)?;
    stack_and_subsample(&frames, cfg.stack_context, cfg.subsample)
}

/// Output frame `t` concatenates input frames `t*factor - context ..= t*factor + context`,
/// replicating edge frames; yields `ceil(T / factor)` frames.
pub fn stack_and_subsample(features: &FeatureSequence, context: usize, factor: usize) -> Result<FeatureSequence> {
    if factor == 0 {
        return Err(Error::InvalidInput("subsampling factor must be >= 1".into()));
    }
    let (t_in, dim) = (features.frames(), features.dim());
    let t_out = t_in.div_ceil(factor);
    let width = 2 * context + 1;
    let mut data = Vec::with_capacity(t_out * dim * width);
    for t in 0..t_out {
        let center = (t * factor) as i64;
        for offset in -(context as i64)..=(context as i64) {
            let src = (center + offset).clamp(0, t_in as i64 - 1) as usize;
            data.extend_from_slice(features.row(src));
        }
    }
    FeatureSequence::new(
        t_out,
        dim * width,
        data,
        features.frame_period * factor as f64,
        features.origin_id.clone(),
    )
}

/// Reads a mono 16-bit PCM WAV at 8 or 16 kHz.
pub fn read_wav(path: &Path) -> Result<AudioSignal> {
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::InvalidInput(format!(
            "{}: expected mono 16-bit PCM, got {} channel(s) {}-bit",
            path.display(),
            spec.channels,
            spec.bits_per_sample
        )));
    }
    if spec.sample_rate != 8000 && spec.sample_rate != 16000 {
        return Err(Error::InvalidInput(format!(
            "{}: unsupported sample rate {}",
            path.display(),
            spec.sample_rate
        )));
    }
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| v as f32 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    AudioSignal::new(samples, spec.sample_rate, id)
}

/// Writes mono 16-bit PCM, clipping to [-1, 1].
pub fn write_wav(path: &Path, signal: &AudioSignal) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &s in &signal.samples {
        w.write_sample((s.clamp(-1.0, 1.0) * 32767.0).round() as i16)?;
    }
    w.finalize()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_stack() -> FeatureConfig {
        FeatureConfig {
            stack_context: 0,
            subsample: 1,
            ..FeatureConfig::default()
        }
    }

    fn sine(len: usize, sr: u32, hz: f64, amp: f32) -> AudioSignal {
        let samples = (0..len)
            .map(|n| amp * (2.0 * PI * hz * n as f64 / sr as f64).sin() as f32)
            .collect();
        AudioSignal::new(samples, sr, "sine").unwrap()
    }

    #[test]
    fn frame_count_ten_seconds() {
        let sig = AudioSignal::new(vec![0.0; 80_000], 8000, "z").unwrap();
        let f = compute_logmel(&sig, &no_stack()).unwrap();
        assert_eq!(f.frames(), 998);
        assert_eq!(f.dim(), 23);
    }

    #[test]
    fn frame_count_formula() {
        let cfg = no_stack();
        for len in [200usize, 201, 279, 280, 281, 1000, 4321] {
            let sig = AudioSignal::new(vec![0.1; len], 8000, "x").unwrap();
            let f = compute_logmel_frames(&sig, &cfg).unwrap();
            assert_eq!(f.frames(), (len - 200) / 80 + 1);
        }
    }

    #[test]
    fn silence_is_log_floor() {
        let sig = AudioSignal::new(vec![0.0; 4000], 8000, "z").unwrap();
        let f = compute_logmel(&sig, &no_stack()).unwrap();
        let floor = LOG_FLOOR.ln() as f32;
        assert!(f.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn rejects_bad_signals() {
        let short = AudioSignal::new(vec![0.0; 100], 8000, "s").unwrap();
        assert!(matches!(compute_logmel(&short, &no_stack()), Err(Error::InvalidInput(_))));
        assert!(AudioSignal::new(vec![f32::NAN], 8000, "n").is_err());
        let sneaky = AudioSignal {
            samples: vec![f32::INFINITY; 400],
            sample_rate: 8000,
            id: "i".into(),
        };
        assert!(compute_logmel(&sneaky, &no_stack()).is_err());
    }

    #[test]
    fn stacked_shape() {
        let sig = sine(16_000, 8000, 440.0, 0.5);
        let f = compute_logmel(&sig, &FeatureConfig::default()).unwrap();
        assert_eq!(f.dim(), 345);
        assert!((f.frame_period - 0.1).abs() < 1e-12);
        assert_eq!(f.frames(), ((16_000 - 200) / 80 + 1usize).div_ceil(10));
    }

    #[test]
    fn stacking_examples() {
        let base = FeatureSequence::new(100, 2, (0..200).map(|v| v as f32).collect(), 0.01, "b").unwrap();
        assert_eq!(stack_and_subsample(&base, 0, 1).unwrap(), base);
        let sub = stack_and_subsample(&base, 0, 10).unwrap();
        assert_eq!(sub.frames(), 10);
        assert_eq!(sub.row(3), base.row(30));

        let constant = FeatureSequence::new(7, 3, vec![1.5; 21], 0.01, "c").unwrap();
        let st = stack_and_subsample(&constant, 2, 3).unwrap();
        assert_eq!(st.dim(), 15);
        assert_eq!(st.frames(), 3);
        assert!(st.data().iter().all(|&v| v == 1.5));

        // edge replication
        let st = stack_and_subsample(&base, 1, 1).unwrap();
        assert_eq!(&st.row(0)[..2], base.row(0));
        assert_eq!(&st.row(0)[2..4], base.row(0));
        assert_eq!(&st.row(99)[4..6], base.row(99));
    }

    #[test]
    fn scaling_never_decreases_energy() {
        let sig = sine(4000, 8000, 700.0, 0.1);
        let louder = AudioSignal::new(sig.samples.iter().map(|s| s * 3.0).collect(), 8000, "l").unwrap();
        let a = compute_logmel(&sig, &no_stack()).unwrap();
        let b = compute_logmel(&louder, &no_stack()).unwrap();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| y >= x));
        assert_eq!(compute_logmel(&sig, &no_stack()).unwrap(), a);
    }

    #[test]
    fn containers_round_trip() {
        let f = FeatureSequence::new(3, 2, vec![0.1, -2.5, 3.25e-7, 1e10, -0.0, 7.0], 0.1, "r").unwrap();
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        let back = FeatureSequence::read_binary(&mut buf.as_slice(), "r").unwrap();
        assert_eq!(back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), f.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        assert_eq!(back.frame_period, 0.1);
        let text = FeatureSequence::from_text(&f.to_text(), "r").unwrap();
        assert_eq!(text, f);
        assert!(FeatureSequence::read_binary(&mut &b"XXXX"[..], "r").is_err());
    }

    #[test]
    fn wav_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let sig = sine(8000, 16000, 300.0, 0.5);
        write_wav(&path, &sig).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate, 16000);
        assert_eq!(back.samples.len(), 8000);
        assert!(back.samples.iter().zip(&sig.samples).all(|(a, b)| (a - b).abs() < 1e-4));
        let bad = AudioSignal::new(vec![0.0; 10], 44100, "x").unwrap();
        let p2 = dir.path().join("b.wav");
        write_wav(&p2, &bad).unwrap();
        assert!(read_wav(&p2).is_err());
    }
}
