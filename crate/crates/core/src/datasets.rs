//! Synthetic corpora and corpus loading.
//!
//! Audio corpora are directories of 16 kHz mono PCM16 WAV files plus a
//! `labels.csv` with columns `filename,split,label`. Labels cycle through
//! the classes (`i mod K`) and every class is split 60/20/20 into
//! train/valid/test by its occurrence index.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, logmel, standardize_values, write_wav, AudioClip, SAMPLE_RATE};
use crate::error::{Error, Result};
use crate::eval::CHUNK_SECS;
use crate::rng::rng_from;
use crate::tensor::{read_container, NamedTensors, Tensor};

pub const LABELS_FILE: &str = "labels.csv";
pub const PITCH_BINS: usize = 8;
pub const PITCH_LO: f64 = 110.0;
pub const PITCH_HI: f64 = 3520.0;
pub const NOISE_BANDS: [(f64, f64); 4] = [
    (100.0, 400.0),
    (500.0, 1200.0),
    (1500.0, 3000.0),
    (3500.0, 7000.0),
];
pub const MAX_TONES: usize = 4;
/// Clip durations are whole multiples of the 2 s embedding chunk, from
/// one to `MAX_CHUNKS` chunks, so no chunk is ever zero-padded.
pub const MAX_CHUNKS: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SynthKind {
    /// Single sinusoid; label is one of eight log-spaced pitch bins.
    Tone,
    /// Exponential sweep; label 0 rises, 1 falls.
    Chirp,
    /// Band-limited noise; label is the band index.
    NoiseBand,
    /// One to four simultaneous tones; label is `count - 1`.
    ToneMixture,
}

impl SynthKind {
    pub fn classes(self) -> usize {
        match self {
            SynthKind::Tone => PITCH_BINS,
            SynthKind::Chirp => 2,
            SynthKind::NoiseBand => NOISE_BANDS.len(),
            SynthKind::ToneMixture => MAX_TONES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SynthKind::Tone => "tone",
            SynthKind::Chirp => "chirp",
            SynthKind::NoiseBand => "noise-band",
            SynthKind::ToneMixture => "tone-mixture",
        }
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tone" => Ok(SynthKind::Tone),
            "chirp" => Ok(SynthKind::Chirp),
            "noise-band" => Ok(SynthKind::NoiseBand),
            "tone-mixture" => Ok(SynthKind::ToneMixture),
            other => Err(Error::Contract(format!(
                "unknown synth kind {other:?}; expected tone, chirp, noise-band or tone-mixture"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    /// 60/20/20 by occurrence index within a class.
    pub fn for_occurrence(j: usize) -> Self {
        match j % 5 {
            0..=2 => Split::Train,
            3 => Split::Valid,
            _ => Split::Test,
        }
    }
}

/// One row of `labels.csv`. Multi-label rows separate labels with `;`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub filename: String,
    pub split: Split,
    pub label: String,
}

/// `[lo, hi)` frequency range of a pitch bin.
pub fn pitch_bin_range(bin: usize) -> (f64, f64) {
    let ratio = (PITCH_HI / PITCH_LO).powf(1.0 / PITCH_BINS as f64);
    let lo = PITCH_LO * ratio.powi(bin as i32);
    (lo, lo * ratio)
}

pub fn pitch_bin(freq: f64) -> Option<usize> {
    (0..PITCH_BINS).find(|&b| {
        let (lo, hi) = pitch_bin_range(b);
        freq >= lo && freq < hi
    })
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

fn sine(out: &mut [f64], freq: f64, amp: f64, phase: f64) {
    let w = 2.0 * PI * freq / SAMPLE_RATE as f64;
    for (i, s) in out.iter_mut().enumerate() {
        *s += amp * (w * i as f64 + phase).sin();
    }
}

/// Waveform of one clip of `kind` with class `label`.
pub fn synth_clip<R: Rng>(kind: SynthKind, label: usize, rng: &mut R) -> Result<AudioClip> {
    if label >= kind.classes() {
        return Err(Error::Contract(format!(
            "label {label} out of range for {} ({} classes)",
            kind.name(),
            kind.classes()
        )));
    }
    let n = rng.random_range(1..=MAX_CHUNKS) * CHUNK_SECS * SAMPLE_RATE as usize;
    let mut x = vec![0.0; n];
    let noise = Normal::new(0.0, 0.005).expect("valid std");
    match kind {
        SynthKind::Tone => {
            let (lo, hi) = pitch_bin_range(label);
            let margin = (hi / lo).powf(0.2);
            let f = log_uniform(rng, lo * margin, hi / margin);
            sine(
                &mut x,
                f,
                rng.random_range(0.3..0.7),
                rng.random_range(0.0..2.0 * PI),
            );
        }
        SynthKind::Chirp => {
            let a = log_uniform(rng, 200.0, 600.0);
            let b = log_uniform(rng, 2000.0, 5000.0);
            let (f0, f1) = if label == 0 { (a, b) } else { (b, a) };
            let amp = rng.random_range(0.3..0.7);
            let k = (f1 / f0).ln() / n as f64;
            let scale = 2.0 * PI * f0 / SAMPLE_RATE as f64;
            for (i, s) in x.iter_mut().enumerate() {
                let phase = if k.abs() < 1e-15 {
                    scale * i as f64
                } else {
                    scale * ((k * i as f64).exp() - 1.0) / k
                };
                *s = amp * phase.sin();
            }
        }
        SynthKind::NoiseBand => {
            let (lo, hi) = NOISE_BANDS[label];
            let parts = 48;
            let amp = rng.random_range(0.3..0.6) / (parts as f64).sqrt();
            for _ in 0..parts {
                let f = rng.random_range(lo..hi);
                sine(&mut x, f, amp, rng.random_range(0.0..2.0 * PI));
            }
        }
        SynthKind::ToneMixture => {
            let count = label + 1;
            let amp = 0.8 / count as f64;
            for _ in 0..count {
                let f = log_uniform(rng, 150.0, 4000.0);
                sine(&mut x, f, amp, rng.random_range(0.0..2.0 * PI));
            }
        }
    }
    for s in &mut x {
        *s = (*s + noise.sample(rng)).clamp(-1.0, 1.0);
    }
    AudioClip::new(x, SAMPLE_RATE)
}

pub fn clip_filename(kind: SynthKind, i: usize) -> String {
    format!("{}_{i:05}.wav", kind.name())
}

/// Label and split of the `i`-th clip of a corpus.
pub fn corpus_entry(kind: SynthKind, i: usize) -> (usize, Split) {
    let k = kind.classes();
    (i % k, Split::for_occurrence(i / k))
}

/// Writes `n` clips and `labels.csv` to `out_dir`; returns the label rows.
pub fn gen_corpus(kind: SynthKind, n: usize, seed: u64, out_dir: &Path) -> Result<Vec<LabelRow>> {
    if n == 0 {
        return Err(Error::Contract("corpus size must be at least 1".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let rows = (0..n)
        .into_par_iter()
        .map(|i| {
            let (label, split) = corpus_entry(kind, i);
            let clip = synth_clip(kind, label, &mut rng_from(seed, &[kind as u64, i as u64]))?;
            let filename = clip_filename(kind, i);
            write_wav(out_dir.join(&filename), &clip)?;
            Ok(LabelRow {
                filename,
                split,
                label: label.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    write_labels(&out_dir.join(LABELS_FILE), &rows)?;
    Ok(rows)
}

pub fn write_labels(path: &Path, rows: &[LabelRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Sorted `.wav` files directly inside `dir`.
pub fn wav_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("wav"))
        {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Standardized log-mel spectrograms of every WAV in `dir`, keyed by
/// file name.
pub fn load_wav_spectrograms(dir: &Path) -> Result<NamedTensors> {
    let files = wav_files(dir)?;
    if files.is_empty() {
        return Err(Error::Contract(format!(
            "no .wav files in {}",
            dir.display()
        )));
    }
    let specs = files
        .par_iter()
        .map(|p| {
            let clip = load_wav(p)?;
            let spec = standardize_values(logmel(&clip)?.values());
            let name = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((name, spec))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(specs.into_iter().collect())
}

/// Spectrograms from either a WAV directory or a named-tensor container.
pub fn load_spectrograms(path: &Path) -> Result<NamedTensors> {
    if path.is_dir() {
        load_wav_spectrograms(path)
    } else {
        read_container(path)
    }
}

/// Toy `[t, f]` spectrograms with a shared smooth background, one
/// per-example bright frequency band constant in time, and small noise;
/// each is standardized.
pub fn toy_spectrograms(count: usize, t: usize, f: usize, seed: u64) -> Result<Vec<Tensor>> {
    if count == 0 || t == 0 || f < 2 {
        return Err(Error::Contract(format!(
            "toy corpus needs count >= 1, t >= 1, f >= 2; got {count}, {t}, {f}"
        )));
    }
    let noise = Normal::new(0.0, 0.1).expect("valid std");
    (0..count)
        .map(|i| {
            let mut rng = rng_from(seed, &[0x70, i as u64]);
            let band = rng.random_range(0..f);
            let gain = rng.random_range(1.5..2.5);
            let mut v = Vec::with_capacity(t * f);
            for ti in 0..t {
                for fi in 0..f {
                    let tilt = 2.0 * fi as f64 / (f - 1) as f64 - 1.0;
                    let ripple = 0.5 * (PI * ti as f64 / t as f64).sin();
                    let b = if fi == band { gain } else { 0.0 };
                    v.push(tilt + ripple + b + noise.sample(&mut rng));
                }
            }
            Ok(standardize_values(&Tensor::new(&[t, f], v)?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pitch_bins_cover_range() {
        assert_eq!(pitch_bin(110.0), Some(0));
        assert_eq!(pitch_bin(3519.0), Some(7));
        assert_eq!(pitch_bin(3520.0), None);
        assert_eq!(pitch_bin(440.0), Some(3));
        let (lo, hi) = pitch_bin_range(3);
        assert!(lo < 440.0 && 440.0 < hi);
    }

    #[test]
    fn tone_frequency_stays_in_bin() {
        for label in 0..PITCH_BINS {
            let clip =
                synth_clip(SynthKind::Tone, label, &mut rng_from(1, &[label as u64])).unwrap();
            let chunk = CHUNK_SECS * SAMPLE_RATE as usize;
            assert_eq!(clip.samples().len() % chunk, 0);
            assert!((1..=MAX_CHUNKS).contains(&(clip.samples().len() / chunk)));
            assert!(clip.samples().iter().all(|s| s.abs() <= 1.0));
        }
    }

    #[test]
    fn labels_are_balanced() {
        for kind in [
            SynthKind::Tone,
            SynthKind::Chirp,
            SynthKind::NoiseBand,
            SynthKind::ToneMixture,
        ] {
            for n in [1, 7, 37, 80] {
                let mut counts = vec![0usize; kind.classes()];
                for i in 0..n {
                    counts[corpus_entry(kind, i).0] += 1;
                }
                let max = *counts.iter().max().unwrap();
                let min = *counts.iter().min().unwrap();
                assert!(max - min <= 1, "{kind:?} n={n}: {counts:?}");
            }
        }
    }

    #[test]
    fn split_proportions() {
        let splits: Vec<Split> = (0..5).map(Split::for_occurrence).collect();
        assert_eq!(
            splits,
            vec![
                Split::Train,
                Split::Train,
                Split::Train,
                Split::Valid,
                Split::Test
            ]
        );
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_corpus(SynthKind::Chirp, 3, 9, a.path()).unwrap();
        gen_corpus(SynthKind::Chirp, 3, 9, b.path()).unwrap();
        for name in ["chirp_00000.wav", "chirp_00002.wav", LABELS_FILE] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap()
            );
        }
        let rows = read_labels(&a.path().join(LABELS_FILE)).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].label, "1");
    }

    #[test]
    fn empty_corpus_is_rejected() {
        let d = tempfile::tempdir().unwrap();
        assert!(matches!(
            gen_corpus(SynthKind::Tone, 0, 0, d.path()),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn kinds_parse() {
        for k in [
            SynthKind::Tone,
            SynthKind::Chirp,
            SynthKind::NoiseBand,
            SynthKind::ToneMixture,
        ] {
            assert_eq!(k.name().parse::<SynthKind>().unwrap(), k);
        }
        assert!("drum".parse::<SynthKind>().is_err());
    }

    #[test]
    fn toy_spectrograms_are_standardized() {
        let specs = toy_spectrograms(4, 8, 8, 1).unwrap();
        for s in specs {
            let mean = s.sum() / 64.0;
            assert!(mean.abs() < 1e-9);
        }
    }
}
