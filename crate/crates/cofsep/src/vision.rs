//! Video-side processing: clip loading, frame augmentation, rank-pooled
//! dynamic images, the per-stage vision encoders, and pooling of feature
//! maps into the K-element visual vectors.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::NodeId;
use crate::config::{Config, VisionKind};
use crate::error::{Error, Result};
use crate::nn::{MutualAttention, ParamStore, ResNet2d, ResNet3d, Session, TrunkStride};
use crate::tensor::{read_tensor, Tensor};

/// Fixed input normalization applied to RGB frames before any backbone:
/// `(x - MEAN) / STD` maps [0,1] pixels to [-2,2].
pub const FRAME_NORM_MEAN: f64 = 0.5;
pub const FRAME_NORM_STD: f64 = 0.25;
/// Flow values are divided by this many pixels/frame before the backbone.
pub const FLOW_NORM_SCALE: f64 = 8.0;

// ---- domain types --------------------------------------------------------------

/// A decoded video clip: `[T, 3, S, S]` with values in [0,1].
#[derive(Debug, Clone)]
pub struct FrameSequence {
    frames: Tensor,
    fps: u32,
}

impl FrameSequence {
    pub fn new(frames: Tensor, fps: u32) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::invalid(format!(
                "frame sequence must be [T,3,H,W], got {s:?}"
            )));
        }
        if s[0] == 0 {
            return Err(Error::invalid("frame sequence must have at least 1 frame"));
        }
        if s[2] % 16 != 0 || s[3] % 16 != 0 {
            return Err(Error::invalid(format!(
                "frame spatial dims {}x{} must be divisible by 16",
                s[2], s[3]
            )));
        }
        if !frames.is_finite() {
            return Err(Error::invalid("frame sequence has non-finite values"));
        }
        Ok(FrameSequence { frames, fps })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn fps(&self) -> u32 {
        self.fps
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    /// Center keyframe used by the appearance path.
    pub fn keyframe(&self) -> Tensor {
        let t = self.len() / 2;
        let plane = 3 * self.height() * self.width();
        Tensor::from_vec(
            &[3, self.height(), self.width()],
            self.frames.data()[t * plane..(t + 1) * plane].to_vec(),
        )
    }
}

/// Optical-flow stack `[T-1, 2, S, S]` in pixels/frame, supplied externally.
#[derive(Debug, Clone)]
pub struct FlowSequence {
    flows: Tensor,
}

impl FlowSequence {
    pub fn new(flows: Tensor) -> Result<Self> {
        let s = flows.shape();
        if s.len() != 4 || s[1] != 2 {
            return Err(Error::invalid(format!(
                "flow sequence must be [T-1,2,H,W], got {s:?}"
            )));
        }
        if !flows.is_finite() {
            return Err(Error::invalid("flow sequence has non-finite values"));
        }
        Ok(FlowSequence { flows })
    }

    pub fn flows(&self) -> &Tensor {
        &self.flows
    }

    pub fn len(&self) -> usize {
        self.flows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Pad to `t` entries by repeating the last flow, matching the frame
    /// count expected by the spatio-temporal backbones.
    pub fn padded_to(&self, t: usize) -> Tensor {
        let s = self.flows.shape();
        let (n, plane) = (s[0], s[1] * s[2] * s[3]);
        assert!(t >= n);
        let mut out = Tensor::zeros(&[t, s[1], s[2], s[3]]);
        for i in 0..t {
            let src = i.min(n - 1);
            let from = &self.flows.data()[src * plane..(src + 1) * plane];
            out.data_mut()[i * plane..(i + 1) * plane].copy_from_slice(from);
        }
        out
    }
}

/// K-channel encoder output, in the `K x H x W` or `T' x K x H x W` layout.
#[derive(Debug, Clone)]
pub struct VisualFeatureMap {
    data: Tensor,
}

impl VisualFeatureMap {
    pub fn new(data: Tensor) -> Result<Self> {
        let rank = data.shape().len();
        if rank != 3 && rank != 4 {
            return Err(Error::invalid(format!(
                "feature map must be rank 3 or 4, got {:?}",
                data.shape()
            )));
        }
        if !data.is_finite() {
            return Err(Error::invalid("feature map has non-finite values"));
        }
        Ok(VisualFeatureMap { data })
    }

    /// From engine layout (`[K,H,W]` or `[K,T',H,W]`).
    pub fn from_engine(t: &Tensor) -> Self {
        match t.shape().len() {
            3 => VisualFeatureMap { data: t.clone() },
            4 => VisualFeatureMap {
                data: t.transposed01(),
            },
            r => panic!("unsupported feature rank {r}"),
        }
    }

    /// To engine layout (channels first).
    pub fn to_engine(&self) -> Tensor {
        match self.data.shape().len() {
            3 => self.data.clone(),
            _ => self.data.transposed01(),
        }
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    /// Feature channel count K.
    pub fn channels(&self) -> usize {
        match self.data.shape().len() {
            3 => self.data.shape()[0],
            _ => self.data.shape()[1],
        }
    }

    pub fn spatial(&self) -> (usize, usize) {
        let s = self.data.shape();
        (s[s.len() - 2], s[s.len() - 1])
    }

    pub fn temporal(&self) -> Option<usize> {
        match self.data.shape().len() {
            4 => Some(self.data.shape()[0]),
            _ => None,
        }
    }
}

/// Pooled K-element visual vector.
#[derive(Debug, Clone, PartialEq)]
pub struct VisualVector {
    z: Vec<f64>,
}

impl VisualVector {
    pub fn new(z: Vec<f64>) -> Self {
        VisualVector { z }
    }

    pub fn values(&self) -> &[f64] {
        &self.z
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }
}

/// Global max pooling over spatial (and, when present, temporal) dims.
pub fn pool_to_vector(f: &VisualFeatureMap) -> VisualVector {
    let engine = f.to_engine();
    let k = engine.shape()[0];
    let per: usize = engine.shape()[1..].iter().product();
    let mut z = Vec::with_capacity(k);
    for c in 0..k {
        let xs = &engine.data()[c * per..(c + 1) * per];
        z.push(xs.iter().copied().fold(f64::NEG_INFINITY, f64::max));
    }
    VisualVector { z }
}

// ---- rank pooling ---------------------------------------------------------------

/// Approximate-rank-pooling frame coefficients
/// `a_t = 2(T - t + 1) - (T + 1)(H_T - H_{t-1})` with harmonic numbers
/// `H_t = sum_{i<=t} 1/i`, for 1-based `t`. They always sum to zero, so a
/// static clip pools to an all-zero image.
pub fn rank_pool_coeffs(t: usize) -> Result<Vec<f64>> {
    if t < 2 {
        return Err(Error::invalid(
            "rank pooling needs at least 2 frames (coefficients vanish at T=1)",
        ));
    }
    let tf = t as f64;
    let mut harmonics = vec![0.0f64; t + 1];
    for i in 1..=t {
        harmonics[i] = harmonics[i - 1] + 1.0 / i as f64;
    }
    Ok((1..=t)
        .map(|tt| 2.0 * (tf - tt as f64 + 1.0) - (tf + 1.0) * (harmonics[t] - harmonics[tt - 1]))
        .collect())
}

/// Rank-pooled dynamic image of a clip, min-max normalized per channel.
pub fn dynamic_image(frames: &FrameSequence) -> Result<Tensor> {
    let coeffs = rank_pool_coeffs(frames.len())?;
    let mut tape = crate::autodiff::Tape::new();
    let f = tape.constant(frames.frames().clone());
    let d = tape.dynamic_image(f, &coeffs);
    Ok(tape.value(d).clone())
}

// ---- mutual attention (public-layout wrapper) --------------------------------------

/// Fuse appearance (`K x H x W`) and motion (`T' x K x H x W`) features.
pub fn apply_mutual_attention(
    ma: &MutualAttention,
    store: &ParamStore,
    a2d: &VisualFeatureMap,
    a3d: &VisualFeatureMap,
) -> Result<VisualFeatureMap> {
    if a3d.temporal().is_none() || a2d.temporal().is_some() {
        return Err(Error::invalid(
            "mutual attention expects a 2-d appearance map and a 3-d motion map",
        ));
    }
    if a2d.channels() != a3d.channels() || a2d.spatial() != a3d.spatial() {
        return Err(Error::ShapeMismatch {
            what: "mutual attention inputs".into(),
            expected: a2d.data().shape().to_vec(),
            got: a3d.data().shape().to_vec(),
        });
    }
    let mut s = Session::new(store, crate::nn::Trainability::None);
    let a2 = s.tape.constant(a2d.to_engine());
    let a3 = s.tape.constant(a3d.to_engine());
    let out = ma.forward(&mut s, a2, a3);
    Ok(VisualFeatureMap::from_engine(s.tape.value(out)))
}

// ---- clip i/o -------------------------------------------------------------------

fn list_sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == ext).unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(Error::invalid(format!(
            "no .{ext} files in {}",
            dir.display()
        )));
    }
    Ok(files)
}

fn decode_png_frame(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path)
        .map_err(|e| Error::format(path, format!("png decode: {e}")))?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0.0f64; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[c * h * w + y as usize * w + x as usize] = px.0[c] as f64 / 255.0;
        }
    }
    Ok((out, h, w))
}

/// Load a clip from a directory of zero-padded numbered PNG frames or from a
/// packed rank-4 tensor file.
pub fn load_clip(path: &Path, fps: u32) -> Result<FrameSequence> {
    let frames = if path.is_dir() {
        let files = list_sorted_files(path, "png")?;
        let (first, h, w) = decode_png_frame(&files[0])?;
        let plane = 3 * h * w;
        let mut data = Vec::with_capacity(files.len() * plane);
        data.extend_from_slice(&first);
        for f in &files[1..] {
            let (px, fh, fw) = decode_png_frame(f)?;
            if fh != h || fw != w {
                return Err(Error::format(f, "frame size differs within clip"));
            }
            data.extend_from_slice(&px);
        }
        Tensor::from_vec(&[files.len(), 3, h, w], data)
    } else {
        let (t, _) = read_tensor(path)?;
        t
    };
    FrameSequence::new(frames, fps)
}

/// Load flows from a packed rank-4 tensor file.
pub fn load_flows(path: &Path) -> Result<FlowSequence> {
    let (t, _) = read_tensor(path)?;
    FlowSequence::new(t)
}

// ---- resizing and augmentation --------------------------------------------------------

/// Bilinear resize of one `[C,H,W]` plane stack.
pub fn resize_chw(src: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; c * oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for y in 0..oh {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let wy = fy - y0 as f64;
            for x in 0..ow {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let wx = fx - x0 as f64;
                let v = (1.0 - wy) * ((1.0 - wx) * plane[y0 * w + x0] + wx * plane[y0 * w + x1])
                    + wy * ((1.0 - wx) * plane[y1 * w + x0] + wx * plane[y1 * w + x1]);
                dst[y * ow + x] = v;
            }
        }
    }
    out
}

/// Resize every frame of a `[T,C,H,W]` stack.
pub fn resize_frames(frames: &Tensor, oh: usize, ow: usize) -> Tensor {
    let s = frames.shape();
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = Tensor::zeros(&[t, c, oh, ow]);
    for i in 0..t {
        let src = &frames.data()[i * c * h * w..(i + 1) * c * h * w];
        let resized = resize_chw(src, c, h, w, oh, ow);
        out.data_mut()[i * c * oh * ow..(i + 1) * c * oh * ow].copy_from_slice(&resized);
    }
    out
}

/// One clip-level augmentation draw: random scale into [out, 1.25*out],
/// random crop back to `out`, random horizontal flip. Applied identically to
/// every frame of the clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub resized: usize,
    pub crop_y: usize,
    pub crop_x: usize,
    pub flip: bool,
}

pub fn sample_augment(rng: &mut ChaCha20Rng, out: usize) -> AugmentParams {
    let scale: f64 = rng.gen_range(1.0..1.25);
    let resized = ((out as f64 * scale).round() as usize).max(out);
    let crop_y = rng.gen_range(0..=resized - out);
    let crop_x = rng.gen_range(0..=resized - out);
    let flip = rng.gen_bool(0.5);
    AugmentParams {
        resized,
        crop_y,
        crop_x,
        flip,
    }
}

/// Deterministic evaluation path: plain resize to `out`.
pub fn eval_params(out: usize) -> AugmentParams {
    AugmentParams {
        resized: out,
        crop_y: 0,
        crop_x: 0,
        flip: false,
    }
}

fn crop_flip(frames: &Tensor, p: &AugmentParams, out: usize, negate_channel0_on_flip: bool) -> Tensor {
    let s = frames.shape();
    let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
    debug_assert!(h >= p.crop_y + out && w >= p.crop_x + out);
    let mut res = Tensor::zeros(&[t, c, out, out]);
    for i in 0..t {
        for ch in 0..c {
            let plane = &frames.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
            let dst = &mut res.data_mut()[(i * c + ch) * out * out..(i * c + ch + 1) * out * out];
            let negate = negate_channel0_on_flip && p.flip && ch == 0;
            for y in 0..out {
                let row = &plane[(p.crop_y + y) * w + p.crop_x..(p.crop_y + y) * w + p.crop_x + out];
                for x in 0..out {
                    let sx = if p.flip { out - 1 - x } else { x };
                    dst[y * out + x] = if negate { -row[sx] } else { row[sx] };
                }
            }
        }
    }
    res
}

/// Apply an augmentation draw to RGB frames `[T,3,H,W]` -> `[T,3,out,out]`.
pub fn augment_frames(frames: &Tensor, p: &AugmentParams, out: usize) -> Tensor {
    let resized = resize_frames(frames, p.resized, p.resized);
    crop_flip(&resized, p, out, false)
}

/// Apply the same geometric transform to flows. Displacements are rescaled
/// by the resize ratio and the x-component flips sign under mirroring.
pub fn augment_flows(flows: &Tensor, p: &AugmentParams, out: usize) -> Tensor {
    let s = flows.shape();
    let ratio = p.resized as f64 / s[2] as f64;
    let mut resized = resize_frames(flows, p.resized, p.resized);
    for v in resized.data_mut() {
        *v *= ratio;
    }
    crop_flip(&resized, p, out, true)
}

// ---- clip preparation ------------------------------------------------------------------

/// A clip cropped and resized to the model's input geometry.
#[derive(Debug, Clone)]
pub struct PreparedClip {
    /// `[T, 3, S, S]` in [0,1].
    pub frames: Tensor,
    /// `[T, 2, S, S]`, flows padded to the frame count.
    pub flows: Option<Tensor>,
}

impl PreparedClip {
    pub fn keyframe(&self) -> Tensor {
        let s = self.frames.shape();
        let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
        let plane = c * h * w;
        let k = t / 2;
        Tensor::from_vec(
            &[c, h, w],
            self.frames.data()[k * plane..(k + 1) * plane].to_vec(),
        )
    }
}

/// Crop `t_frames` frames starting at `start_frame`, apply one augmentation
/// draw to frames and (if present) flows, and pad flows to the frame count.
pub fn prepare_clip(
    frames: &FrameSequence,
    flows: Option<&FlowSequence>,
    t_frames: usize,
    start_frame: usize,
    out_size: usize,
    aug: &AugmentParams,
) -> Result<PreparedClip> {
    if start_frame + t_frames > frames.len() {
        return Err(Error::invalid(format!(
            "clip of {} frames cannot supply {t_frames} frames from index {start_frame}",
            frames.len()
        )));
    }
    let s = frames.frames().shape();
    let plane = s[1] * s[2] * s[3];
    let window = Tensor::from_vec(
        &[t_frames, s[1], s[2], s[3]],
        frames.frames().data()[start_frame * plane..(start_frame + t_frames) * plane].to_vec(),
    );
    let mut out_frames = augment_frames(&window, aug, out_size);
    for v in out_frames.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    let out_flows = match flows {
        Some(fl) => {
            if fl.len() + 1 < start_frame + t_frames {
                return Err(Error::invalid(format!(
                    "flow stack of {} entries too short for frames [{start_frame}, {})",
                    fl.len(),
                    start_frame + t_frames
                )));
            }
            let fs = fl.flows().shape();
            let fplane = fs[1] * fs[2] * fs[3];
            let take = (t_frames - 1).min(fl.len() - start_frame);
            let window = Tensor::from_vec(
                &[take, fs[1], fs[2], fs[3]],
                fl.flows().data()[start_frame * fplane..(start_frame + take) * fplane].to_vec(),
            );
            let cropped = augment_flows(&window, aug, out_size);
            Some(FlowSequence::new(cropped)?.padded_to(t_frames))
        }
        None => None,
    };
    Ok(PreparedClip {
        frames: out_frames,
        flows: out_flows,
    })
}

/// Bind a prepared clip as constant tape inputs.
pub fn bind_clip_nodes(s: &mut Session, clip: &PreparedClip) -> ClipNodes {
    let frames = s.tape.constant(clip.frames.clone());
    let keyframe = s.tape.constant(clip.keyframe());
    let flows = clip.flows.as_ref().map(|f| s.tape.constant(f.clone()));
    ClipNodes {
        frames,
        keyframe,
        flows,
    }
}

// ---- per-stage encoder ----------------------------------------------------------------

/// Clip tensors bound on a tape for one source. `frames` is `[T,3,S,S]`,
/// `keyframe` is `[3,S,S]`, `flows` (optional) is `[T,2,S,S]` after padding.
#[derive(Debug, Clone, Copy)]
pub struct ClipNodes {
    pub frames: NodeId,
    pub keyframe: NodeId,
    pub flows: Option<NodeId>,
}

/// Vision network for one cascade stage.
#[derive(Debug, Clone)]
pub struct VisionNet {
    pub kind: VisionKind,
    r2d: Option<ResNet2d>,
    r3d: Option<ResNet3d>,
    ma: Option<MutualAttention>,
}

impl VisionNet {
    pub fn new(ns: &str, kind: VisionKind, cfg: &Config) -> Self {
        let k = cfg.feature_channels();
        let r2d = |name: &str| {
            ResNet2d::new(
                name,
                3,
                cfg.backbone_widths(),
                Some(k),
                TrunkStride::S16,
            )
        };
        let r3d = |name: &str, in_ch: usize| ResNet3d::new(name, in_ch, cfg.c3d_widths(), k);
        match kind {
            VisionKind::C2dRgb | VisionKind::C2dDyn => VisionNet {
                kind,
                r2d: Some(r2d(&format!("{ns}.c2d"))),
                r3d: None,
                ma: None,
            },
            VisionKind::C3dRgb => VisionNet {
                kind,
                r2d: None,
                r3d: Some(r3d(&format!("{ns}.c3d"), 3)),
                ma: None,
            },
            VisionKind::C3dFlo => VisionNet {
                kind,
                r2d: None,
                r3d: Some(r3d(&format!("{ns}.c3d"), 2)),
                ma: None,
            },
            VisionKind::MaRgb => VisionNet {
                kind,
                r2d: Some(r2d(&format!("{ns}.c2d"))),
                r3d: Some(r3d(&format!("{ns}.c3d"), 3)),
                ma: Some(MutualAttention::new(&format!("{ns}.ma"), k)),
            },
            VisionKind::MaFlo => VisionNet {
                kind,
                r2d: Some(r2d(&format!("{ns}.c2d"))),
                r3d: Some(r3d(&format!("{ns}.c3d"), 2)),
                ma: Some(MutualAttention::new(&format!("{ns}.ma"), k)),
            },
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut ChaCha20Rng) {
        if let Some(n) = &self.r2d {
            n.init(store, rng);
        }
        if let Some(n) = &self.r3d {
            n.init(store, rng);
        }
        if let Some(m) = &self.ma {
            m.init(store, rng);
        }
    }

    fn normalize_rgb(s: &mut Session, x: NodeId) -> NodeId {
        let scaled = s.tape.scale(x, 1.0 / FRAME_NORM_STD);
        s.tape.add_scalar(scaled, -FRAME_NORM_MEAN / FRAME_NORM_STD)
    }

    fn flows_node(&self, clip: &ClipNodes) -> Result<NodeId> {
        clip.flows.ok_or_else(|| {
            Error::invalid(format!("vision kind {} requires flow input", self.kind))
        })
    }

    /// Encode one source clip, returning the stage feature map (engine
    /// layout) and the pooled K-vector node.
    pub fn forward(&self, s: &mut Session, clip: &ClipNodes) -> Result<(NodeId, NodeId)> {
        let feat = match self.kind {
            VisionKind::C2dRgb => {
                let x = Self::normalize_rgb(s, clip.keyframe);
                self.r2d.as_ref().unwrap().forward(s, x)
            }
            VisionKind::C2dDyn => {
                let t = s.tape.value(clip.frames).shape()[0];
                let coeffs = rank_pool_coeffs(t)?;
                let d = s.tape.dynamic_image(clip.frames, &coeffs);
                let x = Self::normalize_rgb(s, d);
                self.r2d.as_ref().unwrap().forward(s, x)
            }
            VisionKind::C3dRgb => {
                let x = s.tape.transpose01(clip.frames);
                let x = Self::normalize_rgb(s, x);
                self.r3d.as_ref().unwrap().forward(s, x)
            }
            VisionKind::C3dFlo => {
                let f = self.flows_node(clip)?;
                let x = s.tape.transpose01(f);
                let x = s.tape.scale(x, 1.0 / FLOW_NORM_SCALE);
                self.r3d.as_ref().unwrap().forward(s, x)
            }
            VisionKind::MaRgb | VisionKind::MaFlo => {
                let key = Self::normalize_rgb(s, clip.keyframe);
                let a2d = self.r2d.as_ref().unwrap().forward(s, key);
                let a3d = match self.kind {
                    VisionKind::MaRgb => {
                        let x = s.tape.transpose01(clip.frames);
                        let x = Self::normalize_rgb(s, x);
                        self.r3d.as_ref().unwrap().forward(s, x)
                    }
                    _ => {
                        let f = self.flows_node(clip)?;
                        let x = s.tape.transpose01(f);
                        let x = s.tape.scale(x, 1.0 / FLOW_NORM_SCALE);
                        self.r3d.as_ref().unwrap().forward(s, x)
                    }
                };
                self.ma.as_ref().unwrap().forward(s, a2d, a3d)
            }
        };
        let z = s.tape.global_max_pool(feat);
        Ok((feat, z))
    }
}
