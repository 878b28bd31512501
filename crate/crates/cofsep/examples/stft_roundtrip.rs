//! The audio frontend end to end: mix two tones, mask the mixture with each
//! source's ideal dominance mask in the warped domain, and reconstruct.
//!
//!     cargo run --example stft_roundtrip

use anyhow::Result;
use cofsep::audio::{dominant_mask, log_warp, mix, reconstruct, stft, Waveform};

fn tone(freq: f64, amp: f64, rate: u32, len: usize) -> Waveform {
    let samples = (0..len)
        .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin())
        .collect();
    Waveform::new(samples, rate).unwrap()
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

fn main() -> Result<()> {
    let rate = 11_025;
    let len = 65_280;
    let sources = [tone(440.0, 0.6, rate, len), tone(1485.0, 0.5, rate, len)];
    let mixture = mix(&sources)?;

    let spec = stft(&mixture, 1022, 256)?;
    println!(
        "mixture spectrogram: {} x {} (freq x time)",
        spec.freq_bins(),
        spec.time_frames()
    );
    let warped: Vec<_> = sources
        .iter()
        .map(|s| log_warp(&stft(s, 1022, 256).unwrap().magnitude(), 256).unwrap())
        .collect();
    let refs: Vec<_> = warped.iter().collect();

    for (i, src) in sources.iter().enumerate() {
        let mask = dominant_mask(&refs, i)?;
        let est = reconstruct(&mask, warped[0].warp(), &spec, len)?;
        let lo = 1022;
        let hi = len - 1022;
        println!(
            "source {i}: mask density {:.3}, interior SNR {:.1} dB",
            mask.density(),
            snr_db(&src.samples()[lo..hi], &est.samples()[lo..hi])
        );
    }
    Ok(())
}
