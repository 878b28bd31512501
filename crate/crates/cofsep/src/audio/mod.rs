//! Deterministic audio signal layer: waveforms, WAV i/o, resampling, STFT,
//! log-frequency warping, mixtures and mask-based reconstruction.

mod stft;
mod warp;

pub use stft::{istft, stft, ComplexSpectrogram};
pub use warp::{
    dominant_mask, log_warp, reconstruct, unwarp, unwarp_nearest, BinaryMask, WarpMap,
    WarpedMagnitude,
};

use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio signal with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::invalid("sample_rate must be positive"));
        }
        if samples.is_empty() {
            return Err(Error::invalid("waveform must contain at least one sample"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::invalid("waveform contains non-finite samples"));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Largest absolute sample value.
    pub fn peak(&self) -> f64 {
        self.samples.iter().fold(0.0, |m, s| m.max(s.abs()))
    }

    /// Scale so the peak is 1. Silent signals are returned unchanged.
    pub fn peak_normalized(mut self) -> Self {
        let peak = self.peak();
        if peak > 1e-12 {
            for s in &mut self.samples {
                *s /= peak;
            }
        }
        self
    }

    /// Slice `[start, start+len)`, zero-padded past the end.
    pub fn crop(&self, start: usize, len: usize) -> Waveform {
        let mut out = vec![0.0; len];
        for (i, o) in out.iter_mut().enumerate() {
            if let Some(&s) = self.samples.get(start + i) {
                *o = s;
            }
        }
        Waveform {
            samples: out,
            sample_rate: self.sample_rate,
        }
    }
}

/// Load an audio file, downmix to mono, resample to `target_rate` and
/// peak-normalize. Silent files skip normalization instead of erroring.
pub fn load_audio(path: &Path, target_rate: u32) -> Result<Waveform> {
    if target_rate == 0 {
        return Err(Error::invalid("target_rate must be positive"));
    }
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| Error::format(path, format!("cannot open wav: {e}")))?;
    let spec = reader.spec();
    let channels = spec.channels as usize;
    if channels == 0 {
        return Err(Error::format(path, "wav has zero channels"));
    }
    let interleaved: Vec<f64> = match spec.sample_format {
        hound::SampleFormat::Int => {
            let scale = (1i64 << (spec.bits_per_sample - 1)) as f64;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f64 / scale))
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format(path, format!("wav decode: {e}")))?
        }
        hound::SampleFormat::Float => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format(path, format!("wav decode: {e}")))?,
    };
    if interleaved.is_empty() {
        return Err(Error::invalid(format!(
            "{}: zero-length audio",
            path.display()
        )));
    }
    let frames = interleaved.len() / channels;
    let mut mono = Vec::with_capacity(frames);
    for f in 0..frames {
        let mut acc = 0.0;
        for c in 0..channels {
            acc += interleaved[f * channels + c];
        }
        mono.push(acc / channels as f64);
    }
    let resampled = if spec.sample_rate == target_rate {
        mono
    } else {
        resample(&mono, spec.sample_rate, target_rate)
    };
    Ok(Waveform::new(resampled, target_rate)?.peak_normalized())
}

/// Write a waveform as 16-bit PCM WAV. Samples are clamped to [-1, 1].
pub fn save_wav(path: &Path, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::format(path, format!("cannot create wav: {e}")))?;
    for &s in &w.samples {
        let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| Error::format(path, format!("wav write: {e}")))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::format(path, format!("wav finalize: {e}")))?;
    Ok(())
}

/// Windowed-sinc resampler (Hann window, 32-tap half-width at the
/// band-limiting rate). Adequate for the 44.1 kHz -> 11.025 kHz path.
pub fn resample(input: &[f64], src_rate: u32, dst_rate: u32) -> Vec<f64> {
    assert!(src_rate > 0 && dst_rate > 0);
    if src_rate == dst_rate || input.is_empty() {
        return input.to_vec();
    }
    let ratio = dst_rate as f64 / src_rate as f64;
    let n_out = ((input.len() as f64) * ratio).round().max(1.0) as usize;
    // When downsampling, stretch the kernel to low-pass at the new Nyquist.
    let scale = ratio.min(1.0);
    let half = 32.0 / scale;
    let sinc = |x: f64| {
        if x.abs() < 1e-12 {
            1.0
        } else {
            (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
        }
    };
    let mut out = Vec::with_capacity(n_out);
    for i in 0..n_out {
        let center = i as f64 / ratio;
        let j0 = (center - half).ceil().max(0.0) as usize;
        let j1 = (center + half).floor().min((input.len() - 1) as f64) as usize;
        let mut acc = 0.0;
        for (j, &x) in input.iter().enumerate().take(j1 + 1).skip(j0) {
            let d = j as f64 - center;
            let win = 0.5 * (1.0 + (std::f64::consts::PI * d / half).cos());
            acc += x * scale * sinc(scale * d) * win;
        }
        out.push(acc);
    }
    out
}

/// Element-wise sum of component waveforms. No renormalization: separation
/// masks are defined against the raw sum.
pub fn mix(sources: &[Waveform]) -> Result<Waveform> {
    if sources.len() < 2 {
        return Err(Error::invalid("mix requires at least 2 sources"));
    }
    let len = sources[0].len();
    let rate = sources[0].sample_rate;
    for (i, s) in sources.iter().enumerate() {
        if s.len() != len || s.sample_rate != rate {
            return Err(Error::invalid(format!(
                "mix source {i} has length {} rate {} (expected {} at {})",
                s.len(),
                s.sample_rate,
                len,
                rate
            )));
        }
    }
    let mut out = vec![0.0; len];
    for s in sources {
        for (o, v) in out.iter_mut().zip(s.samples.iter()) {
            *o += v;
        }
    }
    Waveform::new(out, rate)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, rate: u32, len: usize, amp: f64) -> Waveform {
        let samples = (0..len)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect();
        Waveform::new(samples, rate).unwrap()
    }

    #[test]
    fn load_resamples_stereo_to_mono_target_rate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 44100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut wr = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..44100 {
            let v = (0.5 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 44100.0).sin()
                * 32767.0) as i16;
            wr.write_sample(v).unwrap();
            wr.write_sample(v).unwrap();
        }
        wr.finalize().unwrap();

        let w = load_audio(&path, 11025).unwrap();
        assert_eq!(w.sample_rate(), 11025);
        assert_eq!(w.len(), 11025);
        assert!((w.peak() - 1.0).abs() < 1e-9, "peak-normalized");
    }

    #[test]
    fn load_same_rate_is_identity_up_to_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mono.wav");
        let src = sine(440.0, 11025, 4096, 0.25);
        save_wav(&path, &src).unwrap();
        let w = load_audio(&path, 11025).unwrap();
        assert_eq!(w.len(), src.len());
        // Same shape after normalization: compare against renormalized source.
        let norm = src.clone().peak_normalized();
        let max_err = w
            .samples()
            .iter()
            .zip(norm.samples())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(max_err < 2e-4, "16-bit quantization only, got {max_err}");
    }

    #[test]
    fn silent_file_returned_without_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("silence.wav");
        save_wav(&path, &Waveform::new(vec![0.0; 1000], 11025).unwrap()).unwrap();
        let w = load_audio(&path, 11025).unwrap();
        assert_eq!(w.len(), 1000);
        assert_eq!(w.peak(), 0.0);
    }

    #[test]
    fn mix_identity_and_cancellation() {
        let a = sine(440.0, 11025, 2048, 0.5);
        let zero = Waveform::new(vec![0.0; 2048], 11025).unwrap();
        let m = mix(&[a.clone(), zero]).unwrap();
        assert_eq!(m.samples(), a.samples());

        let neg = Waveform::new(a.samples().iter().map(|s| -s).collect(), 11025).unwrap();
        let c = mix(&[a, neg]).unwrap();
        assert!(c.peak() < 1e-12);
    }

    #[test]
    fn mix_rejects_mismatched_inputs() {
        let a = sine(440.0, 11025, 2048, 0.5);
        let b = sine(440.0, 11025, 1024, 0.5);
        assert!(mix(&[a.clone(), b]).is_err());
        let c = sine(440.0, 22050, 2048, 0.5);
        assert!(mix(&[a, c]).is_err());
    }

    #[test]
    fn resample_preserves_sine_frequency() {
        let w = sine(440.0, 44100, 44100, 1.0);
        let down = resample(w.samples(), 44100, 11025);
        assert_eq!(down.len(), 11025);
        // Count zero crossings in the interior: ~2 * 440 per second.
        let interior = &down[200..down.len() - 200];
        let crossings = interior
            .windows(2)
            .filter(|p| (p[0] >= 0.0) != (p[1] >= 0.0))
            .count();
        let expected = 2.0 * 440.0 * (interior.len() as f64 / 11025.0);
        assert!(
            (crossings as f64 - expected).abs() < 8.0,
            "crossings {crossings} vs expected {expected}"
        );
    }
}
