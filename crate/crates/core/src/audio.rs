//! Audio loading and log-mel features.
//!
//! Features follow the torchaudio `MelSpectrogram` defaults at 16 kHz:
//! 400-sample (25 ms) periodic Hann window, 160-sample (10 ms) hop,
//! centered frames with reflect padding, power spectrum, 80 HTK-mel
//! triangles over 50-8000 Hz without area normalization, then
//! `ln(x + 1e-6)`.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::rng::rng_from;
use crate::tensor::Tensor;

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 400;
pub const HOP: usize = 160;
pub const N_MELS: usize = 80;
pub const F_MIN: f64 = 50.0;
pub const F_MAX: f64 = 8000.0;
pub const LOG_FLOOR: f64 = 1e-6;
const STD_FLOOR: f64 = 1e-8;

/// Mono 16 kHz PCM in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(Error::Format {
                field: "sample_rate",
                detail: format!("{sample_rate} Hz, expected {SAMPLE_RATE} Hz"),
            });
        }
        if samples.is_empty() {
            return Err(Error::TooShort { samples: 0, min: 1 });
        }
        Ok(Self { samples })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        SAMPLE_RATE
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / SAMPLE_RATE as f64
    }
}

/// Reads a RIFF/WAVE file that must be 16-bit integer PCM, mono, 16 kHz.
pub fn load_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format {
            field: "channels",
            detail: format!("{} channels, expected mono", spec.channels),
        });
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::Format {
            field: "sample_rate",
            detail: format!("{} Hz, expected {SAMPLE_RATE} Hz", spec.sample_rate),
        });
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format {
            field: "encoding",
            detail: format!(
                "{:?} with {} bits per sample, expected 16-bit PCM",
                spec.sample_format, spec.bits_per_sample
            ),
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes a clip as 16-bit PCM, rounding to the nearest code and clipping.
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Wav(other),
    })?;
    for &s in clip.samples() {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q)?;
    }
    w.finalize()?;
    Ok(())
}

/// Triangular HTK-mel filterbank over the one-sided spectrum.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// `[n_mels, n_fft / 2 + 1]`
    weights: Vec<Vec<f64>>,
    centers: Vec<f64>,
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelFilterbank {
    pub fn new(n_fft: usize, sample_rate: u32, n_mels: usize, f_min: f64, f_max: f64) -> Self {
        let n_freqs = n_fft / 2 + 1;
        let nyquist = sample_rate as f64 / 2.0;
        let bin_hz: Vec<f64> = (0..n_freqs)
            .map(|k| nyquist * k as f64 / (n_freqs - 1) as f64)
            .collect();
        let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
        let pts: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let weights = (0..n_mels)
            .map(|m| {
                let (lo, mid, hi) = (pts[m], pts[m + 1], pts[m + 2]);
                bin_hz
                    .iter()
                    .map(|&f| {
                        let down = (f - lo) / (mid - lo);
                        let up = (hi - f) / (hi - mid);
                        down.min(up).max(0.0)
                    })
                    .collect()
            })
            .collect();
        Self {
            weights,
            centers: pts[1..=n_mels].to_vec(),
        }
    }

    pub fn standard() -> Self {
        Self::new(N_FFT, SAMPLE_RATE, N_MELS, F_MIN, F_MAX)
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    /// Peak frequency (Hz) of each triangle.
    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    pub fn apply(&self, power: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .map(|row| row.iter().zip(power).map(|(w, p)| w * p).sum())
            .collect()
    }
}

/// Log-mel spectrogram, `[frames, 80]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LogMelSpec {
    values: Tensor,
}

impl LogMelSpec {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 2 || values.cols() != N_MELS {
            return Err(Error::Dimension(format!(
                "log-mel spectrogram must be [T, {N_MELS}], got {:?}",
                values.shape()
            )));
        }
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.rows()
    }

    pub fn bins(&self) -> usize {
        N_MELS
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }
}

fn periodic_hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Mirror index into `0..len` without repeating the edge sample.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    if m < len as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Stateful extractor that reuses the FFT plan and filterbank.
pub struct LogMelExtractor {
    fft: Arc<dyn Fft<f64>>,
    window: Vec<f64>,
    bank: MelFilterbank,
}

impl Default for LogMelExtractor {
    fn default() -> Self {
        Self::new()
    }
}

impl LogMelExtractor {
    pub fn new() -> Self {
        Self {
            fft: FftPlanner::new().plan_fft_forward(N_FFT),
            window: periodic_hann(N_FFT),
            bank: MelFilterbank::standard(),
        }
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.bank
    }

    /// Mel power spectrogram before the log, `[frames, 80]`.
    pub fn mel_power(&self, clip: &AudioClip) -> Result<Tensor> {
        let x = clip.samples();
        if x.len() < HOP {
            return Err(Error::TooShort {
                samples: x.len(),
                min: HOP,
            });
        }
        let frames = x.len() / HOP + 1;
        let pad = (N_FFT / 2) as isize;
        let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
        let mut power = vec![0.0; N_FFT / 2 + 1];
        let mut out = Vec::with_capacity(frames * N_MELS);
        for t in 0..frames {
            let start = (t * HOP) as isize - pad;
            for (i, c) in buf.iter_mut().enumerate() {
                let s = x[reflect(start + i as isize, x.len())];
                *c = Complex::new(s * self.window[i], 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf) {
                *p = c.norm_sqr();
            }
            out.extend(self.bank.apply(&power));
        }
        Tensor::new(&[frames, N_MELS], out)
    }

    pub fn logmel(&self, clip: &AudioClip) -> Result<LogMelSpec> {
        let p = self.mel_power(clip)?;
        LogMelSpec::new(p.map(|v| (v + LOG_FLOOR).ln()))
    }
}

/// One-shot log-mel extraction; see [`LogMelExtractor`] for repeated use.
pub fn logmel(clip: &AudioClip) -> Result<LogMelSpec> {
    LogMelExtractor::new().logmel(clip)
}

/// `(x - mean) / max(std, 1e-8)` over all values (population std).
pub fn standardize_values(x: &Tensor) -> Tensor {
    // exact constants would otherwise leave rounding residue of the mean
    if x.data().iter().all(|&v| v == x.data()[0]) {
        return Tensor::zeros(x.shape());
    }
    let n = x.numel() as f64;
    let mean = x.sum() / n;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt().max(STD_FLOOR);
    x.map(|v| (v - mean) / std)
}

pub fn standardize(spec: &LogMelSpec) -> LogMelSpec {
    LogMelSpec {
        values: standardize_values(&spec.values),
    }
}

/// Random crop (seeded) when longer than `target`, zero-pad at the end when
/// shorter. Works on any `[T, F]` tensor.
pub fn crop_or_pad_values(x: &Tensor, target: usize, seed: u64) -> Result<Tensor> {
    if target == 0 {
        return Err(Error::Contract(
            "crop target must be at least one frame".into(),
        ));
    }
    let (t, f) = (x.rows(), x.cols());
    if t == target {
        return Ok(x.clone());
    }
    if t > target {
        let start = rng_from(seed, &[]).random_range(0..=t - target);
        let data = x.data()[start * f..(start + target) * f].to_vec();
        return Tensor::new(&[target, f], data);
    }
    let mut data = x.data().to_vec();
    data.resize(target * f, 0.0);
    Tensor::new(&[target, f], data)
}

/// First `target` frames of `x`, zero-padded at the end when shorter.
pub fn first_frames(x: &Tensor, target: usize) -> Result<Tensor> {
    if target == 0 {
        return Err(Error::Contract(
            "crop target must be at least one frame".into(),
        ));
    }
    let f = x.cols();
    let mut data = vec![0.0; target * f];
    let n = x.rows().min(target);
    data[..n * f].copy_from_slice(&x.data()[..n * f]);
    Tensor::new(&[target, f], data)
}

pub fn crop_or_pad(spec: &LogMelSpec, target: usize, seed: u64) -> Result<LogMelSpec> {
    Ok(LogMelSpec {
        values: crop_or_pad_values(&spec.values, target, seed)?,
    })
}
