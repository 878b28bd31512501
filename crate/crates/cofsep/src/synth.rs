//! Synthetic audio-visual corpus: colored shapes oscillating with
//! category-specific periods, each emitting a category-specific carrier tone
//! amplitude-modulated by the shape's instantaneous speed. Audio-visual
//! correlation holds by construction, and ground-truth flows are analytic.
//!
//! Category constants: carrier `440 * 1.5^k` Hz (440, 660, 990, ...),
//! oscillation period from a fixed table, one shape/color pair per category.
//! An optional trailing "static" category renders a motionless shape with a
//! constant envelope as a negative control.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::audio::{save_wav, Waveform};
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestEntry, Split};
use crate::tensor::{write_tensor, DType, Tensor, TensorMeta};

pub const VIDEO_SECONDS: f64 = 6.0;
pub const VIDEO_FPS: u32 = 8;
pub const VIDEO_SIZE: usize = 224;
pub const AUDIO_RATE: u32 = 11_025;
/// Carrier of tone category `k` in Hz.
pub fn carrier_hz(category: usize) -> f64 {
    440.0 * 1.5f64.powi(category as i32)
}
/// Carrier used by the static control category.
pub const STATIC_CARRIER_HZ: f64 = 370.0;
const PERIODS: [f64; 6] = [0.8, 1.1, 1.4, 1.7, 2.0, 2.3];
const COLORS: [[f64; 3]; 7] = [
    [0.92, 0.20, 0.16], // red
    [0.18, 0.80, 0.25], // green
    [0.22, 0.35, 0.95], // blue
    [0.95, 0.85, 0.15], // yellow
    [0.90, 0.25, 0.85], // magenta
    [0.20, 0.85, 0.90], // cyan
    [0.85, 0.55, 0.20], // orange (static control)
];
const MAX_TONE_CATEGORIES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

/// Everything needed to re-render one video deterministically.
#[derive(Debug, Clone)]
pub struct VideoParams {
    pub id: String,
    pub category: usize,
    pub category_name: String,
    pub is_static: bool,
    pub carrier_hz: f64,
    pub period_secs: f64,
    pub shape: ShapeKind,
    pub color: [f64; 3],
    pub center: (f64, f64),
    pub amplitude: f64,
    pub direction: (f64, f64),
    pub phase: f64,
    pub audio_phase: f64,
    pub radius: f64,
}

impl VideoParams {
    /// Shape center at time `t` seconds.
    pub fn position(&self, t: f64) -> (f64, f64) {
        let s = self.amplitude * (2.0 * PI * t / self.period_secs + self.phase).sin();
        (
            self.center.0 + s * self.direction.0,
            self.center.1 + s * self.direction.1,
        )
    }

    /// Instantaneous speed |d pos / dt| in pixels/second.
    pub fn speed(&self, t: f64) -> f64 {
        let omega = 2.0 * PI / self.period_secs;
        (self.amplitude * omega * (omega * t + self.phase).cos()).abs()
    }

    pub fn max_speed(&self) -> f64 {
        self.amplitude * 2.0 * PI / self.period_secs
    }

    /// Amplitude envelope of the emitted tone at time `t`.
    pub fn envelope(&self, t: f64) -> f64 {
        let norm = if self.max_speed() > 0.0 {
            self.speed(t) / self.max_speed()
        } else {
            0.5
        };
        0.35 + 0.65 * norm
    }
}

/// Generator parameters.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_videos: usize,
    pub categories: usize,
    pub seed: u64,
    pub with_flows: bool,
    /// Append a motionless negative-control category after the tone
    /// categories.
    pub include_static: bool,
}

impl SynthSpec {
    pub fn total_categories(&self) -> usize {
        self.categories + usize::from(self.include_static)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_videos < 2 {
            return Err(Error::invalid("need at least 2 videos"));
        }
        if self.categories < 2 {
            return Err(Error::invalid("need at least 2 tone categories"));
        }
        if self.categories > MAX_TONE_CATEGORIES {
            return Err(Error::invalid(format!(
                "at most {MAX_TONE_CATEGORIES} tone categories (carriers stay below Nyquist)"
            )));
        }
        Ok(())
    }

    pub fn category_name(&self, cat: usize) -> String {
        if self.include_static && cat == self.categories {
            "static".to_string()
        } else {
            format!("tone{cat}")
        }
    }

    /// Deterministic per-video parameters; categories rotate round-robin so
    /// counts stay balanced.
    pub fn video_params(&self, index: usize) -> VideoParams {
        let total = self.total_categories();
        let category = index % total;
        let is_static = self.include_static && category == self.categories;
        let mut rng = ChaCha20Rng::seed_from_u64(mix_seed(self.seed, 0x5eed_0001, index as u64));
        let margin = 60.0;
        let center = (
            rng.gen_range(margin..(VIDEO_SIZE as f64 - margin)),
            rng.gen_range(margin..(VIDEO_SIZE as f64 - margin)),
        );
        let angle: f64 = rng.gen_range(0.0..(2.0 * PI));
        let amplitude = if is_static {
            0.0
        } else {
            rng.gen_range(24.0..40.0)
        };
        let phase = rng.gen_range(0.0..(2.0 * PI));
        let audio_phase = rng.gen_range(0.0..(2.0 * PI));
        let radius = rng.gen_range(18.0..28.0);
        let brightness = rng.gen_range(0.8..1.0);
        let base_color = COLORS[category.min(COLORS.len() - 1)];
        let color = [
            base_color[0] * brightness,
            base_color[1] * brightness,
            base_color[2] * brightness,
        ];
        let shape = match category % 3 {
            0 => ShapeKind::Circle,
            1 => ShapeKind::Square,
            _ => ShapeKind::Triangle,
        };
        VideoParams {
            id: format!("vid_{index:03}"),
            category,
            category_name: self.category_name(category),
            is_static,
            carrier_hz: if is_static {
                STATIC_CARRIER_HZ
            } else {
                carrier_hz(category)
            },
            period_secs: PERIODS[category % PERIODS.len()],
            shape,
            color,
            center,
            amplitude,
            direction: (angle.cos(), angle.sin()),
            phase,
            audio_phase,
            radius,
        }
    }

    /// Render the corpus under `out_dir` and write `manifest.jsonl`.
    pub fn generate(&self, out_dir: &Path) -> Result<Manifest> {
        self.validate()?;
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let total_cats = self.total_categories();
        let mut per_category: Vec<Vec<usize>> = vec![Vec::new(); total_cats];
        for i in 0..self.n_videos {
            per_category[i % total_cats].push(i);
        }
        // Per-category split: ~20% test, one val entry, rest train.
        let mut splits = vec![Split::Train; self.n_videos];
        for members in &per_category {
            let n = members.len();
            if n == 0 {
                continue;
            }
            let n_test = ((n as f64 * 0.2).round() as usize).max(1).min(n);
            let n_val = usize::from(n >= 3);
            for (pos, &idx) in members.iter().enumerate() {
                splits[idx] = if pos >= n - n_test {
                    Split::Test
                } else if n_val == 1 && pos == n - n_test - 1 {
                    Split::Val
                } else {
                    Split::Train
                };
            }
        }

        let mut entries = Vec::with_capacity(self.n_videos);
        for i in 0..self.n_videos {
            let vp = self.video_params(i);
            let vid_dir = out_dir.join(&vp.id);
            let frames_dir = vid_dir.join("frames");
            std::fs::create_dir_all(&frames_dir).map_err(|e| Error::io(&frames_dir, e))?;

            render_frames(&vp, &frames_dir)?;
            let audio = render_audio(&vp);
            let audio_path = vid_dir.join("audio.wav");
            save_wav(&audio_path, &audio)?;
            let flows_path = if self.with_flows {
                let p = vid_dir.join("flows.cot");
                write_flows(&vp, &p)?;
                Some(p)
            } else {
                None
            };

            entries.push(ManifestEntry {
                id: vp.id.clone(),
                frames: PathBuf::from(&vp.id).join("frames"),
                audio: PathBuf::from(&vp.id).join("audio.wav"),
                flows: flows_path.map(|_| PathBuf::from(&vp.id).join("flows.cot")),
                category: vp.category_name.clone(),
                split: splits[i],
            });
        }
        let manifest = Manifest::new(entries)?;
        manifest.save(&out_dir.join("manifest.jsonl"))?;
        // Re-load so returned paths are resolved absolute, as consumers expect.
        Manifest::load(&out_dir.join("manifest.jsonl"))
    }
}

fn mix_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut x = seed
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

fn inside(shape: ShapeKind, dx: f64, dy: f64, r: f64) -> bool {
    match shape {
        ShapeKind::Circle => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
        ShapeKind::Triangle => dy >= -r && dy <= r && dx.abs() <= (dy + r) / 2.0,
    }
}

fn render_frames(vp: &VideoParams, frames_dir: &Path) -> Result<()> {
    let n_frames = (VIDEO_SECONDS * VIDEO_FPS as f64).round() as usize;
    let bg = 0.08f64;
    for f in 0..n_frames {
        let t = f as f64 / VIDEO_FPS as f64;
        let (cx, cy) = vp.position(t);
        let mut img = image::RgbImage::new(VIDEO_SIZE as u32, VIDEO_SIZE as u32);
        for (x, y, px) in img.enumerate_pixels_mut() {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let c = if inside(vp.shape, dx, dy, vp.radius) {
                vp.color
            } else {
                [bg, bg, bg]
            };
            px.0 = [
                (c[0] * 255.0).round() as u8,
                (c[1] * 255.0).round() as u8,
                (c[2] * 255.0).round() as u8,
            ];
        }
        let path = frames_dir.join(format!("frame_{f:03}.png"));
        img.save(&path)
            .map_err(|e| Error::format(&path, format!("png encode: {e}")))?;
    }
    Ok(())
}

/// Relative harmonic amplitudes of each tone (fundamental, 2f, 3f).
/// Harmonics above 0.45 x sample rate are dropped.
pub const HARMONIC_AMPS: [f64; 3] = [1.0, 0.5, 0.25];

fn render_audio(vp: &VideoParams) -> Waveform {
    let n = (VIDEO_SECONDS * AUDIO_RATE as f64).round() as usize;
    let limit = 0.45 * AUDIO_RATE as f64;
    let harmonics: Vec<(f64, f64)> = HARMONIC_AMPS
        .iter()
        .enumerate()
        .map(|(k, &a)| ((k + 1) as f64 * vp.carrier_hz, a))
        .filter(|&(f, _)| f < limit)
        .collect();
    let norm: f64 = harmonics.iter().map(|&(_, a)| a).sum();
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / AUDIO_RATE as f64;
            let tone: f64 = harmonics
                .iter()
                .map(|&(f, a)| a * (2.0 * PI * f * t + vp.audio_phase).sin())
                .sum();
            0.8 * vp.envelope(t) * tone / norm
        })
        .collect();
    Waveform::new(samples, AUDIO_RATE).expect("nonempty synthetic audio")
}

fn write_flows(vp: &VideoParams, path: &Path) -> Result<()> {
    let n_frames = (VIDEO_SECONDS * VIDEO_FPS as f64).round() as usize;
    let s = VIDEO_SIZE;
    let mut flows = Tensor::zeros(&[n_frames - 1, 2, s, s]);
    for f in 0..n_frames - 1 {
        let t0 = f as f64 / VIDEO_FPS as f64;
        let t1 = (f + 1) as f64 / VIDEO_FPS as f64;
        let (x0, y0) = vp.position(t0);
        let (x1, y1) = vp.position(t1);
        let (ux, uy) = (x1 - x0, y1 - y0);
        let plane = s * s;
        let base = f * 2 * plane;
        for y in 0..s {
            for x in 0..s {
                if inside(vp.shape, x as f64 - x0, y as f64 - y0, vp.radius) {
                    flows.data_mut()[base + y * s + x] = ux;
                    flows.data_mut()[base + plane + y * s + x] = uy;
                }
            }
        }
    }
    let mut meta = TensorMeta::new();
    meta.insert("kind".into(), "flow".into());
    meta.insert("fps".into(), VIDEO_FPS.to_string());
    write_tensor(path, &flows, DType::F32, &meta)
}

/// Coefficient of determination of regressing windowed audio RMS on the
/// window-mean shape speed; near 1 for tone categories by construction.
/// Returns `None` for static clips (zero speed variance).
pub fn envelope_speed_r2(audio: &Waveform, vp: &VideoParams) -> Option<f64> {
    let window = 512usize;
    let rate = audio.sample_rate() as f64;
    let n_win = audio.len() / window;
    let mut xs = Vec::with_capacity(n_win);
    let mut ys = Vec::with_capacity(n_win);
    for w in 0..n_win {
        let seg = &audio.samples()[w * window..(w + 1) * window];
        let rms = (seg.iter().map(|v| v * v).sum::<f64>() / window as f64).sqrt();
        let mid = (w * window + window / 2) as f64 / rate;
        xs.push(vp.speed(mid));
        ys.push(rms);
    }
    let n = xs.len() as f64;
    let mean_x = xs.iter().sum::<f64>() / n;
    let mean_y = ys.iter().sum::<f64>() / n;
    let var_x: f64 = xs.iter().map(|x| (x - mean_x).powi(2)).sum();
    if var_x < 1e-12 {
        return None;
    }
    let cov: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mean_x) * (y - mean_y))
        .sum();
    let slope = cov / var_x;
    let intercept = mean_y - slope * mean_x;
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - (slope * x + intercept)).powi(2))
        .sum();
    let ss_tot: f64 = ys.iter().map(|y| (y - mean_y).powi(2)).sum();
    if ss_tot < 1e-18 {
        return None;
    }
    Some(1.0 - ss_res / ss_tot)
}
