//! Mono audio container and WAV file I/O.
//!
//! Waveforms are fixed-sample-rate mono clips with samples nominally in
//! `[-1, 1]`. Files are written either as 16-bit PCM (the default, good
//! enough for listening checks) or as 32-bit IEEE float (lossless round
//! trips for regression comparisons).

use std::path::Path;

use ndarray::Array1;

use crate::error::{MageError, Result};
use crate::scalar::{c, Scalar};

/// Sample encoding used when writing a WAV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    /// 16-bit signed PCM.
    Pcm16,
    /// 32-bit IEEE float; round-trips `f32` samples exactly.
    Float32,
}

/// A mono audio clip at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T: Scalar> {
    pub samples: Array1<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> Waveform<T> {
    /// Builds a waveform, validating that it is non-empty and finite.
    pub fn new(samples: Array1<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(MageError::InvalidArgument("sample rate must be > 0".into()));
        }
        if samples.is_empty() {
            return Err(MageError::InvalidArgument(
                "waveform must contain at least one sample".into(),
            ));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(MageError::Numeric(
                "waveform contains non-finite samples".into(),
            ));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Duration in seconds.
    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    /// Largest absolute sample value.
    pub fn peak(&self) -> T {
        self.samples
            .iter()
            .fold(T::zero(), |acc, &s| acc.max(s.abs()))
    }

    /// Scales so the peak hits `target` (no-op on all-zero input).
    pub fn peak_normalized(&self, target: T) -> Self {
        let peak = self.peak();
        if peak == T::zero() {
            return self.clone();
        }
        Waveform {
            samples: self.samples.mapv(|s| s / peak * target),
            sample_rate: self.sample_rate,
        }
    }

    /// Clamps every sample into `[-1, 1]`.
    pub fn clipped(&self) -> Self {
        Waveform {
            samples: self.samples.mapv(|s| s.min(T::one()).max(-T::one())),
            sample_rate: self.sample_rate,
        }
    }

    /// Converts the sample type (e.g. `f32` clips into `f64` metric space).
    pub fn cast<U: Scalar>(&self) -> Waveform<U> {
        Waveform {
            samples: self.samples.mapv(|s| c::<U>(s.to_f64c())),
            sample_rate: self.sample_rate,
        }
    }

    /// Writes the clip to a WAV file.
    pub fn write_wav<P: AsRef<Path>>(&self, path: P, encoding: WavEncoding) -> Result<()> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: match encoding {
                WavEncoding::Pcm16 => 16,
                WavEncoding::Float32 => 32,
            },
            sample_format: match encoding {
                WavEncoding::Pcm16 => hound::SampleFormat::Int,
                WavEncoding::Float32 => hound::SampleFormat::Float,
            },
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        match encoding {
            WavEncoding::Pcm16 => {
                for &s in self.samples.iter() {
                    let v = s.to_f64c().clamp(-1.0, 1.0);
                    // Symmetric scaling; 1.0 saturates to i16::MAX.
                    let q = (v * f64::from(i16::MAX)).round() as i32;
                    writer.write_sample(q.clamp(i32::from(i16::MIN), i32::from(i16::MAX)) as i16)?;
                }
            }
            WavEncoding::Float32 => {
                for &s in self.samples.iter() {
                    writer.write_sample(s.to_f64c() as f32)?;
                }
            }
        }
        writer.finalize()?;
        Ok(())
    }

    /// Reads a mono WAV file written by [`Waveform::write_wav`] (or any
    /// single-channel 16-bit PCM / 32-bit float file).
    pub fn read_wav<P: AsRef<Path>>(path: P) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(MageError::Data(format!(
                "expected mono wav, got {} channels",
                spec.channels
            )));
        }
        let samples: Vec<T> = match (spec.sample_format, spec.bits_per_sample) {
            (hound::SampleFormat::Int, 16) => reader
                .samples::<i16>()
                .map(|s| s.map(|v| c::<T>(f64::from(v) / f64::from(i16::MAX))))
                .collect::<std::result::Result<_, _>>()?,
            (hound::SampleFormat::Float, 32) => reader
                .samples::<f32>()
                .map(|s| s.map(|v| c::<T>(f64::from(v))))
                .collect::<std::result::Result<_, _>>()?,
            (fmt, bits) => {
                return Err(MageError::Data(format!(
                    "unsupported wav encoding: {fmt:?} {bits}-bit"
                )))
            }
        };
        Waveform::new(Array1::from(samples), spec.sample_rate)
    }
}

/// Signal-to-noise ratio of `estimate` against `reference`, in dB.
///
/// `10 log10(||ref||^2 / ||ref - est||^2)`, clamped to ±100 dB with a 1e-12
/// energy floor so silent or perfect inputs stay finite.
pub fn snr_db<T: Scalar>(reference: &Waveform<T>, estimate: &Waveform<T>) -> Result<f64> {
    if reference.len() != estimate.len() {
        return Err(MageError::Shape(format!(
            "snr needs equal lengths, got {} vs {}",
            reference.len(),
            estimate.len()
        )));
    }
    let mut sig = 0.0f64;
    let mut err = 0.0f64;
    for (&r, &e) in reference.samples.iter().zip(estimate.samples.iter()) {
        let r = r.to_f64c();
        let e = e.to_f64c();
        sig += r * r;
        err += (r - e) * (r - e);
    }
    const FLOOR: f64 = 1e-12;
    let ratio = sig.max(FLOOR) / err.max(FLOOR);
    Ok((10.0 * ratio.log10()).clamp(-100.0, 100.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn ramp(n: usize) -> Waveform<f32> {
        let samples = Array1::from_iter((0..n).map(|i| (i as f32 / n as f32) * 1.8 - 0.9));
        Waveform::new(samples, 4410).unwrap()
    }

    #[test]
    fn rejects_empty_and_non_finite() {
        assert!(Waveform::<f32>::new(Array1::zeros(0), 4410).is_err());
        assert!(Waveform::new(ndarray::arr1(&[f32::NAN]), 4410).is_err());
        assert!(Waveform::new(ndarray::arr1(&[0.0f32]), 0).is_err());
    }

    #[test]
    fn peak_normalize_hits_target() {
        let w = ramp(100).peak_normalized(0.9);
        assert_relative_eq!(w.peak(), 0.9, epsilon = 1e-6);
    }

    #[test]
    fn float_wav_round_trip_is_exact() {
        let dir = std::env::temp_dir().join("mage_audio_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round_trip_f32.wav");
        let w = ramp(257);
        w.write_wav(&path, WavEncoding::Float32).unwrap();
        let back = Waveform::<f32>::read_wav(&path).unwrap();
        assert_eq!(w.sample_rate, back.sample_rate);
        assert_eq!(w.samples, back.samples);
    }

    #[test]
    fn pcm16_round_trip_is_within_quantization() {
        let dir = std::env::temp_dir().join("mage_audio_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("round_trip_i16.wav");
        let w = ramp(257);
        w.write_wav(&path, WavEncoding::Pcm16).unwrap();
        let back = Waveform::<f32>::read_wav(&path).unwrap();
        for (&a, &b) in w.samples.iter().zip(back.samples.iter()) {
            assert!((a - b).abs() <= 1.0 / f32::from(i16::MAX));
        }
    }

    #[test]
    fn snr_of_identical_signals_clamps_high() {
        let w = ramp(64);
        assert_eq!(snr_db(&w, &w).unwrap(), 100.0);
    }

    #[test]
    fn snr_of_known_noise_level() {
        let w = ramp(4096);
        let noisy = Waveform::new(w.samples.mapv(|s| s + 0.09), w.sample_rate).unwrap();
        // signal power vs constant offset 0.09^2; ramp over [-0.9, 0.9) has
        // mean-square ~0.27.
        let got = snr_db(&w, &noisy).unwrap();
        let sig: f64 = w.samples.iter().map(|&s| (s as f64) * (s as f64)).sum();
        let err = 0.09f64 * 0.09 * w.len() as f64;
        assert_relative_eq!(got, 10.0 * (sig / err).log10(), epsilon = 1e-3);
    }
}
