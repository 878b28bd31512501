//! Short-time Fourier transform and overlap-add inverse.
//!
//! Conventions: periodic Hann window, center reflect-padding, frame count
//! `len/hop + 1`. For the canonical 65,280-sample clip with window 1022 and
//! hop 256 this yields a 512 x 256 complex grid.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Complex time-frequency grid, `freq_bins x time_frames` row-major.
#[derive(Debug, Clone)]
pub struct ComplexSpectrogram {
    bins: Vec<Complex64>,
    freq_bins: usize,
    time_frames: usize,
    window_size: usize,
    hop: usize,
    sample_rate: u32,
}

impl ComplexSpectrogram {
    pub fn freq_bins(&self) -> usize {
        self.freq_bins
    }

    pub fn time_frames(&self) -> usize {
        self.time_frames
    }

    pub fn window_size(&self) -> usize {
        self.window_size
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn bin(&self, f: usize, t: usize) -> Complex64 {
        self.bins[f * self.time_frames + t]
    }

    pub fn bins(&self) -> &[Complex64] {
        &self.bins
    }

    /// Magnitude grid |X| as a `freq_bins x time_frames` tensor.
    pub fn magnitude(&self) -> Tensor {
        let data = self.bins.iter().map(|c| c.norm()).collect();
        Tensor::from_vec(&[self.freq_bins, self.time_frames], data)
    }

    /// Element-wise product with a real-valued mask of matching shape,
    /// keeping the mixture phase.
    pub fn masked(&self, mask: &Tensor) -> Result<ComplexSpectrogram> {
        if mask.shape() != [self.freq_bins, self.time_frames] {
            return Err(Error::ShapeMismatch {
                what: "spectrogram mask".into(),
                expected: vec![self.freq_bins, self.time_frames],
                got: mask.shape().to_vec(),
            });
        }
        let bins = self
            .bins
            .iter()
            .zip(mask.data())
            .map(|(c, m)| c * *m)
            .collect();
        Ok(ComplexSpectrogram {
            bins,
            ..self.clone()
        })
    }

    /// Sum of two grids with identical metadata.
    pub fn add(&self, other: &ComplexSpectrogram) -> Result<ComplexSpectrogram> {
        if self.freq_bins != other.freq_bins
            || self.time_frames != other.time_frames
            || self.window_size != other.window_size
            || self.hop != other.hop
        {
            return Err(Error::invalid("spectrogram metadata mismatch in add"));
        }
        let bins = self
            .bins
            .iter()
            .zip(&other.bins)
            .map(|(a, b)| a + b)
            .collect();
        Ok(ComplexSpectrogram {
            bins,
            ..self.clone()
        })
    }
}

fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Mirror index for reflect padding without edge repetition.
fn reflect_index(i: isize, len: isize) -> usize {
    debug_assert!(len > 0);
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let mut j = i.rem_euclid(period);
    if j >= len {
        j = period - j;
    }
    j as usize
}

/// Short-time Fourier transform with center reflect-padding.
pub fn stft(w: &Waveform, window_size: usize, hop: usize) -> Result<ComplexSpectrogram> {
    if window_size == 0 || window_size % 2 != 0 {
        return Err(Error::invalid("window_size must be positive and even"));
    }
    if hop == 0 {
        return Err(Error::invalid("hop must be positive"));
    }
    let len = w.len();
    if len < window_size / 2 {
        return Err(Error::invalid(format!(
            "waveform of {len} samples is too short for window {window_size}"
        )));
    }
    let freq_bins = window_size / 2 + 1;
    let time_frames = len / hop + 1;
    let pad = window_size / 2;

    let window = hann_periodic(window_size);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(window_size);

    let samples = w.samples();
    let ilen = len as isize;
    let mut bins = vec![Complex64::new(0.0, 0.0); freq_bins * time_frames];
    let mut buf = vec![Complex64::new(0.0, 0.0); window_size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    for t in 0..time_frames {
        let start = t as isize * hop as isize - pad as isize;
        for (m, b) in buf.iter_mut().enumerate() {
            let idx = reflect_index(start + m as isize, ilen);
            *b = Complex64::new(samples[idx] * window[m], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for f in 0..freq_bins {
            bins[f * time_frames + t] = buf[f];
        }
    }
    Ok(ComplexSpectrogram {
        bins,
        freq_bins,
        time_frames,
        window_size,
        hop,
        sample_rate: w.sample_rate(),
    })
}

/// Inverse STFT by windowed overlap-add, truncated or zero-padded to `length`.
pub fn istft(s: &ComplexSpectrogram, length: usize) -> Result<Waveform> {
    if s.freq_bins != s.window_size / 2 + 1 {
        return Err(Error::invalid(format!(
            "inconsistent spectrogram metadata: {} bins for window {}",
            s.freq_bins, s.window_size
        )));
    }
    if length == 0 {
        return Err(Error::invalid("requested length must be positive"));
    }
    let window_size = s.window_size;
    let hop = s.hop;
    let pad = window_size / 2;
    let window = hann_periodic(window_size);

    let mut planner = FftPlanner::<f64>::new();
    let ifft = planner.plan_fft_inverse(window_size);

    let padded_len = (s.time_frames - 1) * hop + window_size;
    let mut num = vec![0.0; padded_len];
    let mut den = vec![0.0; padded_len];
    let mut buf = vec![Complex64::new(0.0, 0.0); window_size];
    let mut scratch = vec![Complex64::new(0.0, 0.0); ifft.get_inplace_scratch_len()];
    for t in 0..s.time_frames {
        for f in 0..s.freq_bins {
            buf[f] = s.bin(f, t);
        }
        // Rebuild the conjugate-symmetric upper half of a real signal's DFT.
        for f in s.freq_bins..window_size {
            buf[f] = s.bin(window_size - f, t).conj();
        }
        ifft.process_with_scratch(&mut buf, &mut scratch);
        let start = t * hop;
        for m in 0..window_size {
            let v = buf[m].re / window_size as f64;
            num[start + m] += window[m] * v;
            den[start + m] += window[m] * window[m];
        }
    }
    let mut out = vec![0.0; length];
    for (i, o) in out.iter_mut().enumerate() {
        let j = i + pad;
        if j < padded_len && den[j] > 1e-10 {
            *o = num[j] / den[j];
        }
    }
    Waveform::new(out, s.sample_rate)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    /// Independent O(n^2) reference: same windowing and padding, naive DFT.
    fn naive_stft(samples: &[f64], window_size: usize, hop: usize) -> Vec<Vec<Complex64>> {
        let len = samples.len() as isize;
        let pad = (window_size / 2) as isize;
        let window = hann_periodic(window_size);
        let freq_bins = window_size / 2 + 1;
        let time_frames = samples.len() / hop + 1;
        let mut frames = Vec::new();
        for t in 0..time_frames {
            let start = t as isize * hop as isize - pad;
            let frame: Vec<f64> = (0..window_size)
                .map(|m| samples[reflect_index(start + m as isize, len)] * window[m])
                .collect();
            let mut spec = Vec::with_capacity(freq_bins);
            for k in 0..freq_bins {
                let mut acc = Complex64::new(0.0, 0.0);
                for (n, &x) in frame.iter().enumerate() {
                    let phase =
                        -2.0 * std::f64::consts::PI * (k * n) as f64 / window_size as f64;
                    acc += Complex64::new(phase.cos(), phase.sin()) * x;
                }
                spec.push(acc);
            }
            frames.push(spec);
        }
        frames
    }

    fn noise(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let samples = (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Waveform::new(samples, 11025).unwrap()
    }

    fn snr_db(reference: &[f64], estimate: &[f64]) -> f64 {
        let sig: f64 = reference.iter().map(|v| v * v).sum();
        let err: f64 = reference
            .iter()
            .zip(estimate)
            .map(|(r, e)| (r - e) * (r - e))
            .sum();
        10.0 * (sig / err.max(1e-300)).log10()
    }

    #[test]
    fn canonical_clip_yields_512_by_256() {
        let w = noise(65_280, 1);
        let s = stft(&w, 1022, 256).unwrap();
        assert_eq!(s.freq_bins(), 512);
        assert_eq!(s.time_frames(), 256);
    }

    #[test]
    fn matches_naive_dft_reference() {
        let w = noise(2048, 2);
        let s = stft(&w, 128, 32).unwrap();
        let reference = naive_stft(w.samples(), 128, 32);
        assert_eq!(reference.len(), s.time_frames());
        let mut max_err = 0.0f64;
        for (t, frame) in reference.iter().enumerate() {
            for (f, want) in frame.iter().enumerate() {
                max_err = max_err.max((s.bin(f, t) - want).norm());
            }
        }
        assert!(max_err < 1e-9, "max |fft - naive dft| = {max_err}");
    }

    #[test]
    fn bin_centered_sine_concentrates_energy() {
        // Frequency exactly on bin 40 of a 1022-point window.
        let rate = 11025u32;
        let k = 40usize;
        let freq = k as f64 * rate as f64 / 1022.0;
        let samples: Vec<f64> = (0..16_384)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect();
        let w = Waveform::new(samples, rate).unwrap();
        let s = stft(&w, 1022, 256).unwrap();
        let mag = s.magnitude();
        // Skip edge frames where reflect padding breaks the pure tone.
        let t0 = 8;
        let t1 = s.time_frames() - 8;
        let mut total = 0.0;
        let mut near = 0.0;
        for f in 0..s.freq_bins() {
            for t in t0..t1 {
                let e = mag.data()[f * s.time_frames() + t].powi(2);
                total += e;
                if (f as isize - k as isize).abs() <= 1 {
                    near += e;
                }
            }
        }
        assert!(near / total >= 0.9, "concentration {}", near / total);
    }

    #[test]
    fn zero_waveform_gives_zero_grid() {
        let w = Waveform::new(vec![0.0; 4096], 11025).unwrap();
        let s = stft(&w, 1022, 256).unwrap();
        assert!(s.bins().iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn too_short_input_rejected() {
        let w = Waveform::new(vec![0.1; 100], 11025).unwrap();
        assert!(stft(&w, 1022, 256).is_err());
    }

    #[test]
    fn roundtrip_snr_exceeds_40_db_interior() {
        let w = noise(65_280, 3);
        let s = stft(&w, 1022, 256).unwrap();
        let back = istft(&s, w.len()).unwrap();
        let lo = 1022;
        let hi = w.len() - 1022;
        let snr = snr_db(&w.samples()[lo..hi], &back.samples()[lo..hi]);
        assert!(snr >= 40.0, "interior SNR {snr} dB");
    }

    #[test]
    fn all_zero_spectrogram_inverts_to_silence() {
        let w = noise(8192, 4);
        let s = stft(&w, 1022, 256).unwrap();
        let zeroed = s
            .masked(&Tensor::zeros(&[s.freq_bins(), s.time_frames()]))
            .unwrap();
        let back = istft(&zeroed, w.len()).unwrap();
        assert!(back.peak() == 0.0);
    }

    #[test]
    fn identity_mask_roundtrips_mixture() {
        let a = noise(16_384, 5);
        let b = noise(16_384, 6);
        let m = crate::audio::mix(&[a, b]).unwrap();
        let s = stft(&m, 1022, 256).unwrap();
        let ones = Tensor::full(&[s.freq_bins(), s.time_frames()], 1.0);
        let back = istft(&s.masked(&ones).unwrap(), m.len()).unwrap();
        let lo = 1022;
        let hi = m.len() - 1022;
        let snr = snr_db(&m.samples()[lo..hi], &back.samples()[lo..hi]);
        assert!(snr >= 40.0, "interior SNR {snr} dB");
    }

    #[test]
    fn stft_is_linear_in_the_mixture() {
        let a = noise(8192, 7);
        let b = noise(8192, 8);
        let m = crate::audio::mix(&[a.clone(), b.clone()]).unwrap();
        let sa = stft(&a, 1022, 256).unwrap();
        let sb = stft(&b, 1022, 256).unwrap();
        let sm = stft(&m, 1022, 256).unwrap();
        let sum = sa.add(&sb).unwrap();
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (x, y) in sm.bins().iter().zip(sum.bins()) {
            num += (x - y).norm_sqr();
            den += x.norm_sqr();
        }
        assert!((num / den).sqrt() < 1e-6);
    }
}
