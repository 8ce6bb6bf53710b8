//! Waveform IO, log-mel features, Griffin-Lim inversion and the mel cache
//! format.

use std::f64::consts::PI;
use std::fs;
use std::io::{BufReader, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use sttatts_core::Tensor;

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
/// 30 s at 16 kHz.
pub const MAX_SAMPLES: usize = 480_000;

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>) -> Self {
        Self { samples, sample_rate: SAMPLE_RATE }
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadOptions {
    /// Linearly resample other rates to 16 kHz instead of rejecting them.
    pub resample: bool,
    /// Average multi-channel files instead of rejecting them.
    pub downmix: bool,
}

/// Reads a PCM16 or float32 WAV file. PCM16 samples map to `k / 32768`.
pub fn load_wav(path: &Path, opts: LoadOptions) -> Result<Waveform> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let unsupported = |detail: String| Error::UnsupportedFormat { path: path.to_path_buf(), detail };
    let reader = hound::WavReader::open(path).map_err(|e| unsupported(e.to_string()))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels != 1 && !opts.downmix {
        return Err(unsupported(format!("{channels} channels, expected mono")));
    }
    let interleaved: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => {
            reader.into_samples::<i16>().map(|s| s.map(|v| v as f64 / 32768.0)).collect::<Result<_, _>>().map_err(|e| unsupported(e.to_string()))?
        }
        (hound::SampleFormat::Float, 32) => {
            reader.into_samples::<f32>().map(|s| s.map(f64::from)).collect::<Result<_, _>>().map_err(|e| unsupported(e.to_string()))?
        }
        (fmt, bits) => return Err(unsupported(format!("{bits}-bit {fmt:?} samples"))),
    };
    let mut samples: Vec<f64> = interleaved.chunks(channels).map(|c| c.iter().sum::<f64>() / channels as f64).collect();
    if spec.sample_rate != SAMPLE_RATE {
        if !opts.resample {
            return Err(Error::SampleRateMismatch { path: path.to_path_buf(), found: spec.sample_rate, expected: SAMPLE_RATE });
        }
        samples = resample_linear(&samples, spec.sample_rate, SAMPLE_RATE);
    }
    if samples.len() > MAX_SAMPLES {
        return Err(sttatts_core::Error::TooLong { len: samples.len(), max: MAX_SAMPLES }.into());
    }
    Ok(Waveform::new(samples))
}

fn resample_linear(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    let n = (x.len() as u64 * to as u64 / from as u64) as usize;
    (0..n)
        .map(|i| {
            let pos = i as f64 * from as f64 / to as f64;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let a = x[j.min(x.len() - 1)];
            let b = x[(j + 1).min(x.len() - 1)];
            a + (b - a) * frac
        })
        .collect()
}

/// Writes mono PCM16, clamping to the representable range.
pub fn save_wav(path: &Path, wave: &Waveform) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let spec = hound::WavSpec { channels: 1, sample_rate: wave.sample_rate, bits_per_sample: 16, sample_format: hound::SampleFormat::Int };
    let to_io = |e: hound::Error| Error::Io { path: path.to_path_buf(), source: std::io::Error::other(e.to_string()) };
    let mut w = hound::WavWriter::create(path, spec).map_err(to_io)?;
    for &s in &wave.samples {
        let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(v).map_err(to_io)?;
    }
    w.finalize().map_err(to_io)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MelConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub win: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
}

impl Default for MelConfig {
    fn default() -> Self {
        Self { sample_rate: SAMPLE_RATE, n_fft: 1024, win: 400, hop: 160, n_mels: 80, fmin: 0.0, fmax: 8000.0, log_floor: 1e-10 }
    }
}

impl MelConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.hop > 0
            && self.hop <= self.win
            && self.win <= self.n_fft
            && self.n_mels > 0
            && self.fmin >= 0.0
            && self.fmin < self.fmax
            && self.fmax <= self.sample_rate as f64 / 2.0
            && self.log_floor > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid mel configuration {self:?}")))
        }
    }

    /// `1 + floor((len - win) / hop)`, or `None` below one window.
    pub fn frame_count(&self, len: usize) -> Option<usize> {
        (len >= self.win).then(|| 1 + (len - self.win) / self.hop)
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft / 2 + 1
    }
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular filters on the HTK mel scale with unit peak.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `[n_mels, n_bins]`
    pub weights: Tensor,
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &MelConfig) -> Self {
        let n_bins = cfg.n_bins();
        let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
        let edges: Vec<f64> = (0..cfg.n_mels + 2).map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64)).collect();
        let mut weights = Tensor::zeros(cfg.n_mels, n_bins);
        for m in 0..cfg.n_mels {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * cfg.sample_rate as f64 / cfg.n_fft as f64;
                let w = if f > l && f <= c {
                    (f - l) / (c - l)
                } else if f > c && f < r {
                    (r - f) / (r - c)
                } else {
                    0.0
                };
                weights.set(m, k, w);
            }
        }
        Self { weights, centers_hz: edges[1..=cfg.n_mels].to_vec() }
    }

    /// Index of the filter whose center is nearest `hz`.
    pub fn nearest_bin(&self, hz: f64) -> usize {
        (0..self.centers_hz.len()).min_by(|&a, &b| (self.centers_hz[a] - hz).abs().total_cmp(&(self.centers_hz[b] - hz).abs())).unwrap_or(0)
    }
}

/// Short-time Fourier transform with a periodic Hann window, no centering.
pub struct Stft {
    cfg: MelConfig,
    window: Vec<f64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl Stft {
    pub fn new(cfg: &MelConfig) -> Self {
        let mut planner = FftPlanner::new();
        let window = (0..cfg.win).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / cfg.win as f64).cos()).collect();
        Self { cfg: cfg.clone(), window, forward: planner.plan_fft_forward(cfg.n_fft), inverse: planner.plan_fft_inverse(cfg.n_fft) }
    }

    /// One-sided spectra of every full frame.
    pub fn analyze(&self, x: &[f64]) -> Vec<Vec<Complex<f64>>> {
        let Some(frames) = self.cfg.frame_count(x.len()) else {
            return Vec::new();
        };
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        (0..frames)
            .map(|t| {
                buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
                let start = t * self.cfg.hop;
                for (i, w) in self.window.iter().enumerate() {
                    buf[i].re = x[start + i] * w;
                }
                self.forward.process(&mut buf);
                buf[..self.cfg.n_bins()].to_vec()
            })
            .collect()
    }

    /// Weighted overlap-add inverse of [`Stft::analyze`]; output has
    /// `(T - 1)·hop + win` samples.
    pub fn synthesize(&self, spectra: &[Vec<Complex<f64>>]) -> Vec<f64> {
        let (n_fft, hop, win) = (self.cfg.n_fft, self.cfg.hop, self.cfg.win);
        if spectra.is_empty() {
            return Vec::new();
        }
        let len = (spectra.len() - 1) * hop + win;
        let mut out = vec![0.0; len];
        let mut norm = vec![0.0; len];
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        for (t, spec) in spectra.iter().enumerate() {
            for k in 0..n_fft {
                buf[k] = if k < spec.len() { spec[k] } else { spec[n_fft - k].conj() };
            }
            buf[0].im = 0.0;
            if n_fft % 2 == 0 {
                buf[n_fft / 2].im = 0.0;
            }
            self.inverse.process(&mut buf);
            let start = t * hop;
            for (i, w) in self.window.iter().enumerate() {
                out[start + i] += buf[i].re / n_fft as f64 * w;
                norm[start + i] += w * w;
            }
        }
        for (o, n) in out.iter_mut().zip(&norm) {
            if *n > 1e-8 {
                *o /= n;
            }
        }
        out
    }
}

/// Log-mel spectrogram `[T, n_mels]` of magnitude spectra, floored at
/// `log_floor` before the natural log.
pub fn logmel(samples: &[f64], cfg: &MelConfig) -> Result<Tensor> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(sttatts_core::Error::EmptyAudio.into());
    }
    if samples.len() < cfg.win {
        return Err(sttatts_core::Error::TooShort { len: samples.len(), needed: cfg.win }.into());
    }
    let bank = MelFilterbank::new(cfg);
    let spectra = Stft::new(cfg).analyze(samples);
    let mut mags = Tensor::zeros(spectra.len(), cfg.n_bins());
    for (t, s) in spectra.iter().enumerate() {
        for (k, c) in s.iter().enumerate() {
            mags.set(t, k, c.norm());
        }
    }
    let floor = cfg.log_floor;
    Ok(mags.matmul_bt(&bank.weights).map(|e| e.max(floor).ln()))
}

/// Inverts a log-mel spectrogram to audio: a non-negative least-squares
/// estimate of the linear magnitudes followed by `iters` Griffin-Lim phase
/// updates from a seeded random phase.
pub fn griffin_lim(mel: &Tensor, cfg: &MelConfig, iters: usize, seed: u64) -> Result<Vec<f64>> {
    cfg.validate()?;
    if !mel.is_finite() {
        return Err(sttatts_core::Error::NonFinite("mel passed to griffin_lim").into());
    }
    if mel.cols() != cfg.n_mels {
        return Err(sttatts_core::Error::ShapeMismatch { context: "griffin_lim mel", expected: (mel.rows(), cfg.n_mels), found: mel.shape() }.into());
    }
    let bank = MelFilterbank::new(cfg);
    let energies = mel.map(f64::exp);
    // Multiplicative NNLS updates for energies ≈ mags · Wᵀ.
    let target = energies.matmul(&bank.weights);
    let mut mags = target.clone();
    for _ in 0..100 {
        let denom = mags.matmul_bt(&bank.weights).matmul(&bank.weights);
        for (m, (t, d)) in mags.data_mut().iter_mut().zip(target.data().iter().zip(denom.data())) {
            *m *= t / (d + 1e-30);
        }
    }
    let stft = Stft::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut phases: Vec<Vec<Complex<f64>>> = (0..mel.rows()).map(|_| (0..cfg.n_bins()).map(|_| Complex::from_polar(1.0, rng.random::<f64>() * 2.0 * PI)).collect()).collect();
    let apply = |phases: &[Vec<Complex<f64>>]| -> Vec<Vec<Complex<f64>>> {
        phases.iter().enumerate().map(|(t, row)| row.iter().enumerate().map(|(k, p)| p * mags.get(t, k)).collect()).collect()
    };
    for _ in 0..iters {
        let x = stft.synthesize(&apply(&phases));
        for (row, spec) in phases.iter_mut().zip(stft.analyze(&x)) {
            for (p, c) in row.iter_mut().zip(spec) {
                let n = c.norm();
                *p = if n > 1e-30 { c / n } else { Complex::new(1.0, 0.0) };
            }
        }
    }
    Ok(stft.synthesize(&apply(&phases)))
}

const MEL_MAGIC: &[u8; 4] = b"MEL0";

/// Mel cache: `MEL0`, `T` and `n_mels` as little-endian u32, then
/// row-major little-endian f32 values.
pub fn write_mel(path: &Path, mel: &Tensor) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut bytes = Vec::with_capacity(12 + mel.len() * 4);
    bytes.extend_from_slice(MEL_MAGIC);
    bytes.extend_from_slice(&(mel.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(mel.cols() as u32).to_le_bytes());
    for &v in mel.data() {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::File::create(path).and_then(|mut f| f.write_all(&bytes)).map_err(Error::io(path))
}

pub fn read_mel(path: &Path) -> Result<Tensor> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    BufReader::new(fs::File::open(path).map_err(Error::io(path))?).read_to_end(&mut bytes).map_err(Error::io(path))?;
    let bad = |detail: &str| Error::UnsupportedFormat { path: path.to_path_buf(), detail: detail.into() };
    if bytes.len() < 12 || &bytes[..4] != MEL_MAGIC {
        return Err(bad("missing MEL0 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (t, n) = (word(4), word(8));
    if bytes.len() != 12 + t * n * 4 {
        return Err(bad("payload size does not match the header"));
    }
    let data = bytes[12..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect();
    Ok(Tensor::from_vec(t, n, data)?)
}

#[cfg(test)]
mod tests;
