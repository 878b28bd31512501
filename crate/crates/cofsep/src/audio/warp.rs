//! Log-frequency warping of magnitude spectrograms, ground-truth dominance
//! masks, and masked reconstruction back to the time domain.
//!
//! Warped row `i` of an `R`-row input samples input position
//! `2^(log2(R-1) * i/(rows-1))` (geometric spacing from bin 1 upward); row 0
//! carries the DC bin directly, so the map spans `[0, R-1]` exactly.

use super::stft::{istft, ComplexSpectrogram};
use super::Waveform;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-output-row source positions of a log-frequency warp, kept so masks
/// predicted in the warped domain can be mapped back to linear frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpMap {
    positions: Vec<f64>,
    orig_rows: usize,
}

impl WarpMap {
    pub fn build(orig_rows: usize, rows: usize) -> Result<Self> {
        if orig_rows < 2 || rows < 2 {
            return Err(Error::invalid("warp needs at least 2 rows on both sides"));
        }
        let top = ((orig_rows - 1) as f64).log2();
        let mut positions = Vec::with_capacity(rows);
        positions.push(0.0);
        for i in 1..rows {
            positions.push((top * i as f64 / (rows - 1) as f64).exp2());
        }
        Ok(WarpMap {
            positions,
            orig_rows,
        })
    }

    pub fn rows(&self) -> usize {
        self.positions.len()
    }

    pub fn orig_rows(&self) -> usize {
        self.orig_rows
    }

    pub fn positions(&self) -> &[f64] {
        &self.positions
    }

    /// Warped-domain coordinate of a linear-frequency row (inverse map).
    fn warped_coord(&self, r: usize) -> f64 {
        if r == 0 {
            return 0.0;
        }
        let top = ((self.orig_rows - 1) as f64).log2();
        let q = (self.rows() - 1) as f64 * (r as f64).log2() / top;
        q.clamp(0.0, (self.rows() - 1) as f64)
    }
}

/// Nonnegative magnitude grid on a log-frequency axis, with its warp map.
#[derive(Debug, Clone)]
pub struct WarpedMagnitude {
    mags: Tensor,
    warp: WarpMap,
}

impl WarpedMagnitude {
    pub fn mags(&self) -> &Tensor {
        &self.mags
    }

    pub fn warp(&self) -> &WarpMap {
        &self.warp
    }

    pub fn rows(&self) -> usize {
        self.mags.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.mags.shape()[1]
    }
}

/// Resample a linear-frequency magnitude grid onto `rows` log-spaced rows.
pub fn log_warp(mag: &Tensor, rows: usize) -> Result<WarpedMagnitude> {
    if mag.shape().len() != 2 {
        return Err(Error::invalid("log_warp expects a 2-d magnitude grid"));
    }
    if mag.data().iter().any(|&v| v < 0.0) {
        return Err(Error::invalid("log_warp input must be nonnegative"));
    }
    let (in_rows, frames) = (mag.shape()[0], mag.shape()[1]);
    let warp = WarpMap::build(in_rows, rows)?;
    let mut out = Tensor::zeros(&[rows, frames]);
    for (i, &p) in warp.positions.iter().enumerate() {
        let lo = p.floor() as usize;
        let hi = (lo + 1).min(in_rows - 1);
        let frac = p - lo as f64;
        let src_lo = &mag.data()[lo * frames..(lo + 1) * frames];
        let src_hi = &mag.data()[hi * frames..(hi + 1) * frames];
        let dst = &mut out.data_mut()[i * frames..(i + 1) * frames];
        for t in 0..frames {
            dst[t] = (1.0 - frac) * src_lo[t] + frac * src_hi[t];
        }
    }
    Ok(WarpedMagnitude { mags: out, warp })
}

/// Inverse of [`log_warp`] by linear interpolation over the warped rows.
pub fn unwarp(w: &WarpedMagnitude) -> Tensor {
    unwarp_grid(w.mags(), &w.warp, false)
}

/// Inverse warp with nearest-neighbor sampling; maps {0,1} grids to {0,1}.
pub fn unwarp_nearest(values: &Tensor, warp: &WarpMap) -> Result<Tensor> {
    if values.shape().len() != 2 || values.shape()[0] != warp.rows() {
        return Err(Error::ShapeMismatch {
            what: "warped grid for unwarp".into(),
            expected: vec![warp.rows()],
            got: values.shape().to_vec(),
        });
    }
    Ok(unwarp_grid(values, warp, true))
}

fn unwarp_grid(values: &Tensor, warp: &WarpMap, nearest: bool) -> Tensor {
    let frames = values.shape()[1];
    let rows = warp.rows();
    let mut out = Tensor::zeros(&[warp.orig_rows, frames]);
    for r in 0..warp.orig_rows {
        let q = warp.warped_coord(r);
        let dst = &mut out.data_mut()[r * frames..(r + 1) * frames];
        if nearest {
            let i = q.round() as usize;
            dst.copy_from_slice(&values.data()[i * frames..(i + 1) * frames]);
        } else {
            let lo = q.floor() as usize;
            let hi = (lo + 1).min(rows - 1);
            let frac = q - lo as f64;
            let src_lo = &values.data()[lo * frames..(lo + 1) * frames];
            let src_hi = &values.data()[hi * frames..(hi + 1) * frames];
            for t in 0..frames {
                dst[t] = (1.0 - frac) * src_lo[t] + frac * src_hi[t];
            }
        }
    }
    out
}

/// Binary separation mask over a warped time-frequency grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    values: Tensor,
}

impl BinaryMask {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::invalid("binary mask must be 2-d"));
        }
        if values.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("binary mask entries must be 0 or 1"));
        }
        Ok(BinaryMask { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    /// Fraction of cells set to 1.
    pub fn density(&self) -> f64 {
        self.values.data().iter().sum::<f64>() / self.values.numel() as f64
    }
}

/// Ground-truth mask: cell belongs to source `n` iff its magnitude is the
/// strict maximum there. Ties go to the lowest source index.
pub fn dominant_mask(component_mags: &[&WarpedMagnitude], n: usize) -> Result<BinaryMask> {
    if component_mags.is_empty() {
        return Err(Error::invalid("dominant_mask needs at least one component"));
    }
    if n >= component_mags.len() {
        return Err(Error::invalid(format!(
            "source index {n} out of range for {} components",
            component_mags.len()
        )));
    }
    let shape = component_mags[0].mags().shape().to_vec();
    for (i, c) in component_mags.iter().enumerate() {
        if c.mags().shape() != shape.as_slice() {
            return Err(Error::ShapeMismatch {
                what: format!("component {i} magnitude"),
                expected: shape.clone(),
                got: c.mags().shape().to_vec(),
            });
        }
    }
    let numel = component_mags[0].mags().numel();
    let mut values = Tensor::zeros(&shape);
    for i in 0..numel {
        let mut winner = 0usize;
        let mut best = component_mags[0].mags().data()[i];
        for (s, c) in component_mags.iter().enumerate().skip(1) {
            let v = c.mags().data()[i];
            if v > best {
                best = v;
                winner = s;
            }
        }
        if winner == n {
            values.data_mut()[i] = 1.0;
        }
    }
    BinaryMask::new(values)
}

/// Apply a warped-domain binary mask to the linear-frequency mixture
/// (mixture phase retained) and invert to a waveform of `length` samples.
pub fn reconstruct(
    b: &BinaryMask,
    warp: &WarpMap,
    x_mix: &ComplexSpectrogram,
    length: usize,
) -> Result<Waveform> {
    let linear = unwarp_nearest(b.values(), warp)?;
    if linear.shape() != [x_mix.freq_bins(), x_mix.time_frames()] {
        return Err(Error::Internal(format!(
            "unwarped mask shape {:?} does not match mixture {}x{}",
            linear.shape(),
            x_mix.freq_bins(),
            x_mix.time_frames()
        )));
    }
    istft(&x_mix.masked(&linear)?, length)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::{mix, stft};
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn warp_map_spans_full_range_and_increases() {
        let warp = WarpMap::build(512, 256).unwrap();
        let p = warp.positions();
        assert_eq!(p[0], 0.0);
        assert!((p[255] - 511.0).abs() < 1e-9);
        assert!(p.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn constants_are_preserved_exactly() {
        let mag = Tensor::full(&[512, 16], 1.0);
        let w = log_warp(&mag, 256).unwrap();
        assert!(w.mags().data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn impulse_at_top_row_lands_in_final_output_rows() {
        let mut mag = Tensor::zeros(&[512, 4]);
        for t in 0..4 {
            mag.data_mut()[511 * 4 + t] = 1.0;
        }
        let w = log_warp(&mag, 256).unwrap();
        let rows = w.rows();
        let tail_energy: f64 = w.mags().data()[(rows - 2) * 4..].iter().sum();
        let total: f64 = w.mags().data().iter().sum();
        assert!(total > 0.0);
        assert!((tail_energy / total) > 0.99);
    }

    #[test]
    fn negative_magnitudes_rejected() {
        let mut mag = Tensor::zeros(&[512, 4]);
        mag.data_mut()[0] = -0.1;
        assert!(log_warp(&mag, 256).is_err());
    }

    #[test]
    fn unwarp_of_warp_is_near_identity_on_smooth_grids() {
        // Gaussian-blurred noise along the frequency axis.
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let frames = 8;
        let mut raw = vec![0.0f64; 512 * frames];
        for v in raw.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let mut smooth = vec![0.0f64; 512 * frames];
        let radius = 12i64;
        let sigma = 5.0f64;
        for r in 0..512i64 {
            for t in 0..frames {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for d in -radius..=radius {
                    let rr = (r + d).clamp(0, 511) as usize;
                    let wgt = (-(d as f64).powi(2) / (2.0 * sigma * sigma)).exp();
                    acc += wgt * raw[rr * frames + t];
                    norm += wgt;
                }
                smooth[r as usize * frames + t] = acc / norm;
            }
        }
        let mag = Tensor::from_vec(&[512, frames], smooth);
        let w = log_warp(&mag, 256).unwrap();
        let back = unwarp(&w);
        let mut num = 0.0;
        let mut den = 0.0;
        for (a, b) in back.data().iter().zip(mag.data()) {
            num += (a - b) * (a - b);
            den += b * b;
        }
        let rel = (num / den).sqrt();
        assert!(rel <= 0.05, "relative L2 error {rel}");
    }

    #[test]
    fn all_ones_mask_unwarps_to_all_ones() {
        let warp = WarpMap::build(512, 256).unwrap();
        let mask = Tensor::full(&[256, 4], 1.0);
        let out = unwarp_nearest(&mask, &warp).unwrap();
        assert_eq!(out.shape(), &[512, 4]);
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn checkerboard_mask_stays_binary() {
        let warp = WarpMap::build(512, 64).unwrap();
        let mut mask = Tensor::zeros(&[64, 6]);
        for r in 0..64 {
            for t in 0..6 {
                if (r + t) % 2 == 0 {
                    mask.data_mut()[r * 6 + t] = 1.0;
                }
            }
        }
        let out = unwarp_nearest(&mask, &warp).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    fn warped_from(data: Vec<f64>, rows: usize, frames: usize) -> WarpedMagnitude {
        WarpedMagnitude {
            mags: Tensor::from_vec(&[rows, frames], data),
            warp: WarpMap::build(512, rows).unwrap(),
        }
    }

    #[test]
    fn disjoint_supports_give_complementary_masks() {
        let frames = 4;
        let mut a = vec![0.0; 8 * frames];
        let mut b = vec![0.0; 8 * frames];
        for t in 0..frames {
            a[t] = 1.0; // row 0 active for source 0
            b[5 * frames + t] = 1.0; // row 5 active for source 1
        }
        let wa = warped_from(a, 8, frames);
        let wb = warped_from(b, 8, frames);
        let m0 = dominant_mask(&[&wa, &wb], 0).unwrap();
        let m1 = dominant_mask(&[&wa, &wb], 1).unwrap();
        for i in 0..8 * frames {
            let row = i / frames;
            // Outside both supports every magnitude is 0, so the tie rule
            // assigns the cell to source 0.
            let want0 = if row == 5 { 0.0 } else { 1.0 };
            assert_eq!(m0.values().data()[i], want0);
            assert_eq!(m1.values().data()[i], 1.0 - want0);
        }
    }

    #[test]
    fn identical_components_tie_break_to_source_zero() {
        let w1 = warped_from(vec![0.3; 32], 8, 4);
        let w2 = warped_from(vec![0.3; 32], 8, 4);
        let m0 = dominant_mask(&[&w1, &w2], 0).unwrap();
        let m1 = dominant_mask(&[&w1, &w2], 1).unwrap();
        assert!(m0.values().data().iter().all(|&v| v == 1.0));
        assert!(m1.values().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dominant_masks_partition_the_grid() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        for _ in 0..50 {
            let n_src = rng.gen_range(2..=4);
            let comps: Vec<WarpedMagnitude> = (0..n_src)
                .map(|_| {
                    let data = (0..16 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
                    warped_from(data, 16, 3)
                })
                .collect();
            let refs: Vec<&WarpedMagnitude> = comps.iter().collect();
            let mut sum = Tensor::zeros(&[16, 3]);
            for n in 0..n_src {
                let m = dominant_mask(&refs, n).unwrap();
                for (s, v) in sum.data_mut().iter_mut().zip(m.values().data()) {
                    *s += v;
                }
            }
            assert!(sum.data().iter().all(|&v| v == 1.0));
        }
    }

    fn sine(freq: f64, rate: u32, len: usize) -> Waveform {
        let samples = (0..len)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
            .collect();
        Waveform::new(samples, rate).unwrap()
    }

    #[test]
    fn ones_mask_reconstructs_mixture_and_zeros_gives_silence() {
        let a = sine(440.0, 11025, 16_384);
        let b = sine(660.0, 11025, 16_384);
        let m = mix(&[a, b]).unwrap();
        let spec = stft(&m, 1022, 256).unwrap();
        let warped = log_warp(&spec.magnitude(), 256).unwrap();

        let ones = BinaryMask::new(Tensor::full(&[256, spec.time_frames()], 1.0)).unwrap();
        let back = reconstruct(&ones, warped.warp(), &spec, m.len()).unwrap();
        let lo = 1022;
        let hi = m.len() - 1022;
        let sig: f64 = m.samples()[lo..hi].iter().map(|v| v * v).sum();
        let err: f64 = m.samples()[lo..hi]
            .iter()
            .zip(&back.samples()[lo..hi])
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        assert!(10.0 * (sig / err.max(1e-300)).log10() >= 40.0);

        let zeros = BinaryMask::new(Tensor::zeros(&[256, spec.time_frames()])).unwrap();
        let silent = reconstruct(&zeros, warped.warp(), &spec, m.len()).unwrap();
        assert_eq!(silent.peak(), 0.0);
    }

    #[test]
    fn ideal_masks_separate_a_two_sine_mixture() {
        let rate = 11025;
        let len = 16_384;
        let sources = [sine(440.0, rate, len), sine(1485.0, rate, len)];
        let m = mix(&sources).unwrap();
        let spec = stft(&m, 1022, 256).unwrap();
        let comp_warped: Vec<WarpedMagnitude> = sources
            .iter()
            .map(|s| log_warp(&stft(s, 1022, 256).unwrap().magnitude(), 256).unwrap())
            .collect();
        let refs: Vec<&WarpedMagnitude> = comp_warped.iter().collect();
        for (n, src) in sources.iter().enumerate() {
            let mask = dominant_mask(&refs, n).unwrap();
            let est = reconstruct(&mask, comp_warped[0].warp(), &spec, len).unwrap();
            let lo = 1022;
            let hi = len - 1022;
            let sig: f64 = src.samples()[lo..hi].iter().map(|v| v * v).sum();
            let err: f64 = src.samples()[lo..hi]
                .iter()
                .zip(&est.samples()[lo..hi])
                .map(|(x, y)| (x - y) * (x - y))
                .sum();
            let sdr = 10.0 * (sig / err.max(1e-300)).log10();
            assert!(sdr >= 20.0, "source {n}: {sdr} dB");
        }
    }
}
