//! The separation core: spectrum-mask prediction from pooled visual vectors
//! and sound feature maps, mask binarization against the warped mixture, the
//! opponent filter that moves spectrum mass between sources, and the staged
//! cascade that ties them together.

use rand_chacha::ChaCha20Rng;

use crate::audio::{BinaryMask, ComplexSpectrogram, WarpMap, WarpedMagnitude};
use crate::autodiff::NodeId;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session, SslmNet, Trainability, UNet};
use crate::tensor::Tensor;
use crate::vision::{ClipNodes, VisionNet, VisualVector};

/// Real-valued pre-sigmoid spectrum mask over the warped grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumMask {
    g: Tensor,
}

impl SpectrumMask {
    pub fn new(g: Tensor) -> Result<Self> {
        if g.shape().len() != 2 {
            return Err(Error::invalid("spectrum mask must be 2-d"));
        }
        if !g.is_finite() {
            return Err(Error::invalid("spectrum mask has non-finite values"));
        }
        Ok(SpectrumMask { g })
    }

    pub fn logits(&self) -> &Tensor {
        &self.g
    }

    pub fn probabilities(&self) -> Tensor {
        let mut p = self.g.clone();
        for v in p.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        p
    }
}

/// K feature maps produced by a sound network, channels-first `[K, HS, WS]`.
#[derive(Debug, Clone)]
pub struct SoundFeatureMaps {
    data: Tensor,
}

impl SoundFeatureMaps {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.shape().len() != 3 {
            return Err(Error::invalid("sound feature maps must be [K,HS,WS]"));
        }
        Ok(SoundFeatureMaps { data })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn rows(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn cols(&self) -> usize {
        self.data.shape()[2]
    }
}

/// The K+1 learnable scalars of a mask combiner (17 for K = 16).
#[derive(Debug, Clone, PartialEq)]
pub struct AffineCombiner {
    pub alpha: Vec<f64>,
    pub beta: f64,
}

impl AffineCombiner {
    pub fn new(alpha: Vec<f64>, beta: f64) -> Self {
        AffineCombiner { alpha, beta }
    }

    /// Trainable scalar count: K + 1.
    pub fn param_count(&self) -> usize {
        self.alpha.len() + 1
    }
}

/// `log(1 + x)` compression applied to magnitudes before a sound network.
pub fn log_compress(mag: &Tensor) -> Tensor {
    let mut out = mag.clone();
    for v in out.data_mut() {
        *v = v.ln_1p();
    }
    out
}

// ---- Stand-alone operations (single code path via a local tape) ------------------

/// Predict a spectrum mask from a pooled visual vector and sound feature
/// maps: `g = sum_k alpha_k z_k S_k + beta`.
pub fn sound_separator(
    z: &VisualVector,
    maps: &SoundFeatureMaps,
    w: &AffineCombiner,
) -> Result<SpectrumMask> {
    let k = maps.channels();
    if z.len() != k || w.alpha.len() != k {
        return Err(Error::invalid(format!(
            "channel mismatch: z has {}, maps have {k}, combiner has {}",
            z.len(),
            w.alpha.len()
        )));
    }
    let mut tape = crate::autodiff::Tape::new();
    let zi = tape.constant(Tensor::from_vec(&[k], z.values().to_vec()));
    let mi = tape.constant(maps.data.clone());
    let ai = tape.constant(Tensor::from_vec(&[k], w.alpha.clone()));
    let bi = tape.constant(Tensor::scalar(w.beta));
    let g = tape.affine_combine(zi, mi, ai, bi);
    SpectrumMask::new(tape.value(g).clone())
}

/// Threshold a spectrum mask at probability 0.5 (logit 0, strict) and apply
/// it to the warped mixture magnitude.
pub fn binarize(g: &SpectrumMask, x_mix_warped: &WarpedMagnitude) -> Result<(BinaryMask, Tensor)> {
    if g.logits().shape() != x_mix_warped.mags().shape() {
        return Err(Error::ShapeMismatch {
            what: "spectrum mask vs warped mixture".into(),
            expected: x_mix_warped.mags().shape().to_vec(),
            got: g.logits().shape().to_vec(),
        });
    }
    let mut b = Tensor::zeros(g.logits().shape());
    let mut y = Tensor::zeros(g.logits().shape());
    for i in 0..b.numel() {
        if g.logits().data()[i] > 0.0 {
            b.data_mut()[i] = 1.0;
            y.data_mut()[i] = x_mix_warped.mags().data()[i];
        }
    }
    Ok((BinaryMask::new(b)?, y))
}

/// One opponent-filter pass over all ordered source pairs, with a shared
/// combiner. For each pair `(n, m)`, `r = sum_k alpha_k z_{n,k} F_{m,k} +
/// beta` is subtracted from `g_m` and added to `g_n`; the feature maps stay
/// fixed at their stage-entry values throughout.
pub fn opponent_filter(
    z_all: &[VisualVector],
    g_prev: &[SpectrumMask],
    f_all: &[SoundFeatureMaps],
    w: &AffineCombiner,
) -> Result<Vec<SpectrumMask>> {
    let n = z_all.len();
    if n < 2 {
        return Err(Error::invalid("opponent filter requires at least 2 sources"));
    }
    if g_prev.len() != n || f_all.len() != n {
        return Err(Error::invalid(format!(
            "inconsistent source counts: {} visual vectors, {} masks, {} feature maps",
            n,
            g_prev.len(),
            f_all.len()
        )));
    }
    let mut tape = crate::autodiff::Tape::new();
    let k = f_all[0].channels();
    let zs: Vec<NodeId> = z_all
        .iter()
        .map(|z| tape.constant(Tensor::from_vec(&[k], z.values().to_vec())))
        .collect();
    let fs: Vec<NodeId> = f_all
        .iter()
        .map(|f| tape.constant(f.data.clone()))
        .collect();
    let mut gs: Vec<NodeId> = g_prev
        .iter()
        .map(|g| tape.constant(g.logits().clone()))
        .collect();
    let alpha = tape.constant(Tensor::from_vec(&[k], w.alpha.clone()));
    let beta = tape.constant(Tensor::scalar(w.beta));
    let combiner = |_: usize, _: usize| (alpha, beta);
    opponent_filter_graph(&mut tape, &zs, &mut gs, &fs, combiner);
    gs.into_iter()
        .map(|id| SpectrumMask::new(tape.value(id).clone()))
        .collect()
}

/// In-graph opponent filter used by both the stand-alone op and the cascade.
/// Loop order is the ordered-pair sweep (outer n, inner m); it is part of the
/// contract and must not be reordered or parallelized.
pub(crate) fn opponent_filter_graph(
    tape: &mut crate::autodiff::Tape,
    z_all: &[NodeId],
    g_work: &mut [NodeId],
    f_all: &[NodeId],
    combiner: impl Fn(usize, usize) -> (NodeId, NodeId),
) {
    let n = z_all.len();
    for src_n in 0..n {
        for src_m in 0..n {
            if src_n == src_m {
                continue;
            }
            let (alpha, beta) = combiner(src_n, src_m);
            let r = tape.affine_combine(z_all[src_n], f_all[src_m], alpha, beta);
            g_work[src_m] = tape.sub(g_work[src_m], r);
            g_work[src_n] = tape.add(g_work[src_n], r);
        }
    }
}

// ---- model assembly -----------------------------------------------------------------

/// Parameter namespaces for the per-stage combiners.
fn sep_ns() -> &'static str {
    "stage1.sep"
}

fn of_ns(stage: usize, pair: Option<(usize, usize)>) -> String {
    match pair {
        None => format!("stage{stage}.of"),
        Some((n, m)) => format!("stage{stage}.of.{n}_{m}"),
    }
}

/// The full cascade: per-stage vision and sound networks, the stage-1
/// separator combiner, per-stage opponent-filter combiners, and the
/// localization network (trained separately).
#[derive(Debug)]
pub struct CofModel {
    pub cfg: Config,
    pub vision: Vec<VisionNet>,
    pub sound: Vec<UNet>,
    pub sslm: SslmNet,
    pub store: ParamStore,
}

/// Per-stage, per-source logits plus everything needed to derive outputs.
pub struct GraphForward {
    /// `[stage][source]` spectrum-mask logit nodes.
    pub stage_logits: Vec<Vec<NodeId>>,
}

/// One cascade stage's concrete outputs.
#[derive(Debug, Clone)]
pub struct StageOutput {
    /// 1-based stage index.
    pub stage: usize,
    pub masks: Vec<SpectrumMask>,
    pub binary: Vec<BinaryMask>,
    /// Masked warped magnitudes, one per source.
    pub spectrograms: Vec<Tensor>,
}

/// Full forward result on concrete inputs.
pub struct CofOutput {
    pub stages: Vec<StageOutput>,
    pub warp: WarpMap,
}

impl CofModel {
    /// Build and randomly initialize a model for `cfg`. Initialization order
    /// is fixed, so a given seed always produces identical parameters.
    pub fn new(cfg: Config, rng: &mut ChaCha20Rng) -> Result<Self> {
        cfg.validate()?;
        let k = cfg.feature_channels();
        let mut store = ParamStore::new();
        let mut vision = Vec::new();
        let mut sound = Vec::new();
        let levels = crate::nn::unet_levels_for(cfg.spec_rows());
        for j in 0..cfg.stages {
            let v = VisionNet::new(&format!("stage{}.vision", j + 1), cfg.stage_visions[j], &cfg);
            v.init(&mut store, rng);
            let u = UNet::new(
                &format!("stage{}.sound", j + 1),
                1,
                cfg.unet_base(),
                levels,
                k,
            );
            u.check_input(cfg.spec_rows(), cfg.spec_cols())?;
            u.init(&mut store, rng);
            vision.push(v);
            sound.push(u);

            if j == 0 {
                // Stage-1 separator combiner: alpha = 1/sqrt(K) keeps the
                // summed logits near unit scale at initialization.
                store.insert(
                    format!("{}.alpha", sep_ns()),
                    Tensor::full(&[k], 1.0 / (k as f64).sqrt()),
                );
                store.insert(format!("{}.beta", sep_ns()), Tensor::zeros(&[1]));
            } else {
                // Opponent-filter combiners start at zero: the filter is the
                // identity at initialization and learns its transfers.
                let mut insert = |ns: String| {
                    store.insert(format!("{ns}.alpha"), Tensor::zeros(&[k]));
                    store.insert(format!("{ns}.beta"), Tensor::zeros(&[1]));
                };
                if cfg.combiner_per_pair {
                    for n in 0..cfg.sources {
                        for m in 0..cfg.sources {
                            if n != m {
                                insert(of_ns(j + 1, Some((n, m))));
                            }
                        }
                    }
                } else {
                    insert(of_ns(j + 1, None));
                }
            }
        }
        let sslm = SslmNet::new("sslm", 3, cfg.backbone_widths());
        sslm.init(&mut store, rng);
        Ok(CofModel {
            cfg,
            vision,
            sound,
            sslm,
            store,
        })
    }

    /// Scalar count of one opponent-filter combiner (K + 1).
    pub fn of_combiner_scalars(&self, stage: usize) -> usize {
        self.store.scalar_count(&format!("{}.", of_ns(stage, None)))
    }

    /// Sound network features for a warped magnitude at a given stage
    /// (applies the log(1+x) compression).
    pub fn sound_features(&self, stage: usize, x: &WarpedMagnitude) -> Result<SoundFeatureMaps> {
        let unet = self
            .sound
            .get(stage)
            .ok_or_else(|| Error::invalid(format!("stage {stage} out of range")))?;
        unet.check_input(x.rows(), x.frames())?;
        let mut s = Session::new(&self.store, Trainability::None);
        let id = self.sound_features_graph(&mut s, stage, x.mags())?;
        SoundFeatureMaps::new(s.tape.value(id).clone())
    }

    fn sound_features_graph(
        &self,
        s: &mut Session,
        stage: usize,
        mags: &Tensor,
    ) -> Result<NodeId> {
        let (rows, cols) = (mags.shape()[0], mags.shape()[1]);
        self.sound[stage].check_input(rows, cols)?;
        let compressed = log_compress(mags).reshaped(&[1, rows, cols]);
        let x = s.tape.constant(compressed);
        Ok(self.sound[stage].forward(s, x))
    }

    fn combiner_nodes(&self, s: &mut Session, ns: &str) -> (NodeId, NodeId) {
        let alpha = s.param(&format!("{ns}.alpha"));
        let beta = s.param(&format!("{ns}.beta"));
        (alpha, beta)
    }

    /// Build the cascade graph over already-bound clip nodes. The warped
    /// mixture magnitude is a constant; later-stage sound networks consume
    /// thresholded (detached) spectrogram estimates, so gradients reach
    /// earlier stages only through the additive mask updates.
    pub fn forward_graph(
        &self,
        s: &mut Session,
        mix_warped: &Tensor,
        clips: &[ClipNodes],
    ) -> Result<GraphForward> {
        if clips.len() != self.cfg.sources {
            return Err(Error::invalid(format!(
                "expected {} source clips, got {}",
                self.cfg.sources,
                clips.len()
            )));
        }
        let n = clips.len();
        let mut stage_logits: Vec<Vec<NodeId>> = Vec::with_capacity(self.cfg.stages);

        // Stage 1: plain separator on the mixture.
        let smaps = self.sound_features_graph(s, 0, mix_warped)?;
        let mut g: Vec<NodeId> = Vec::with_capacity(n);
        let (alpha, beta) = self.combiner_nodes(s, sep_ns());
        for clip in clips {
            let (_, z) = self.vision[0].forward(s, clip)?;
            g.push(s.tape.affine_combine(z, smaps, alpha, beta));
        }
        stage_logits.push(g.clone());

        // Later stages: opponent filter over the current estimates.
        for j in 1..self.cfg.stages {
            let mut f_nodes = Vec::with_capacity(n);
            for &gn in &g {
                // Detach: threshold the current logits, mask the mixture,
                // and feed the result as constant data.
                let logits = s.tape.value(gn);
                let mut y = mix_warped.clone();
                for (yv, &gv) in y.data_mut().iter_mut().zip(logits.data()) {
                    if gv <= 0.0 {
                        *yv = 0.0;
                    }
                }
                f_nodes.push(self.sound_features_graph(s, j, &y)?);
            }
            let mut z_nodes = Vec::with_capacity(n);
            for clip in clips {
                let (_, z) = self.vision[j].forward(s, clip)?;
                z_nodes.push(z);
            }
            let per_pair = self.cfg.combiner_per_pair;
            let shared = if per_pair {
                None
            } else {
                Some(self.combiner_nodes(s, &of_ns(j + 1, None)))
            };
            let mut pair_nodes = std::collections::HashMap::new();
            if per_pair {
                for a in 0..n {
                    for b in 0..n {
                        if a != b {
                            let nodes = self.combiner_nodes(s, &of_ns(j + 1, Some((a, b))));
                            pair_nodes.insert((a, b), nodes);
                        }
                    }
                }
            }
            opponent_filter_graph(&mut s.tape, &z_nodes, &mut g, &f_nodes, |a, b| {
                if let Some(nodes) = shared {
                    nodes
                } else {
                    pair_nodes[&(a, b)]
                }
            });
            stage_logits.push(g.clone());
        }
        Ok(GraphForward { stage_logits })
    }

    /// Concrete staged outputs from logit values.
    pub fn stage_outputs(
        &self,
        s: &Session,
        forward: &GraphForward,
        mix_warped: &WarpedMagnitude,
    ) -> Result<CofOutput> {
        let mut stages = Vec::new();
        for (j, logit_row) in forward.stage_logits.iter().enumerate() {
            let mut masks = Vec::new();
            let mut binary = Vec::new();
            let mut spectrograms = Vec::new();
            for &id in logit_row {
                let g = SpectrumMask::new(s.tape.value(id).clone())?;
                let (b, y) = binarize(&g, mix_warped)?;
                masks.push(g);
                binary.push(b);
                spectrograms.push(y);
            }
            stages.push(StageOutput {
                stage: j + 1,
                masks,
                binary,
                spectrograms,
            });
        }
        Ok(CofOutput {
            stages,
            warp: mix_warped.warp().clone(),
        })
    }
}

/// Run the full cascade on one mixture: warp the mixture magnitude, encode
/// each source clip (deterministic eval path: frames from the clip start,
/// plain resize), and emit every stage's masks and spectrograms.
pub fn cof_forward(
    model: &CofModel,
    x_mix: &ComplexSpectrogram,
    clips: &[(crate::vision::FrameSequence, Option<crate::vision::FlowSequence>)],
) -> Result<CofOutput> {
    let cfg = &model.cfg;
    if clips.len() != cfg.sources {
        return Err(Error::invalid(format!(
            "model expects {} sources, got {} clips",
            cfg.sources,
            clips.len()
        )));
    }
    if x_mix.time_frames() != cfg.spec_cols() {
        return Err(Error::invalid(format!(
            "mixture has {} frames, expected {} (crop audio to {} samples)",
            x_mix.time_frames(),
            cfg.spec_cols(),
            cfg.clip_samples()
        )));
    }
    let warped = crate::audio::log_warp(&x_mix.magnitude(), cfg.spec_rows())?;
    let mut prepared = Vec::with_capacity(clips.len());
    for (frames, flows) in clips {
        prepared.push(crate::vision::prepare_clip(
            frames,
            flows.as_ref(),
            cfg.frames_per_clip(),
            0,
            cfg.frame_size(),
            &crate::vision::eval_params(cfg.frame_size()),
        )?);
    }
    model.infer(&warped, &prepared)
}

impl CofModel {
    /// Inference over already-prepared clips: one read-only forward pass.
    pub fn infer(
        &self,
        mix_warped: &WarpedMagnitude,
        clips: &[crate::vision::PreparedClip],
    ) -> Result<CofOutput> {
        let mut s = Session::new(&self.store, Trainability::None);
        let nodes: Vec<crate::vision::ClipNodes> = clips
            .iter()
            .map(|c| crate::vision::bind_clip_nodes(&mut s, c))
            .collect();
        let fwd = self.forward_graph(&mut s, mix_warped.mags(), &nodes)?;
        self.stage_outputs(&s, &fwd, mix_warped)
    }

    /// Per-stage training losses on one example: mean BCE of `sigmoid(g)`
    /// against the ground-truth masks, averaged over sources and pixels.
    /// Returns the weighted total and the per-stage loss nodes.
    pub fn training_loss_graph(
        &self,
        s: &mut Session,
        forward: &GraphForward,
        gt: &[BinaryMask],
    ) -> Result<(NodeId, Vec<NodeId>)> {
        if gt.len() != self.cfg.sources {
            return Err(Error::invalid(format!(
                "expected {} ground-truth masks, got {}",
                self.cfg.sources,
                gt.len()
            )));
        }
        let n = gt.len();
        let mut stage_nodes = Vec::with_capacity(forward.stage_logits.len());
        for logits in &forward.stage_logits {
            let per_source: Vec<(NodeId, f64)> = logits
                .iter()
                .zip(gt)
                .map(|(&g, mask)| {
                    let bce = s.tape.sigmoid_bce(g, mask.values().clone());
                    (bce, 1.0 / n as f64)
                })
                .collect();
            stage_nodes.push(s.tape.weighted_sum(&per_source));
        }
        let weighted: Vec<(NodeId, f64)> = stage_nodes
            .iter()
            .zip(&self.cfg.stage_weights)
            .map(|(&id, &w)| (id, w))
            .collect();
        let total = s.tape.weighted_sum(&weighted);
        Ok((total, stage_nodes))
    }
}

impl CofOutput {
    /// Reconstruct per-source waveforms for one stage (1-based).
    pub fn waveforms(
        &self,
        stage: usize,
        x_mix: &ComplexSpectrogram,
        length: usize,
    ) -> Result<Vec<crate::audio::Waveform>> {
        let st = self
            .stages
            .iter()
            .find(|s| s.stage == stage)
            .ok_or_else(|| Error::invalid(format!("no stage {stage} in output")))?;
        st.binary
            .iter()
            .map(|b| crate::audio::reconstruct(b, &self.warp, x_mix, length))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::audio::log_warp;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn rand_vec(n: usize, rng: &mut ChaCha20Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn rand_maps(k: usize, h: usize, w: usize, rng: &mut ChaCha20Rng) -> SoundFeatureMaps {
        SoundFeatureMaps::new(Tensor::from_vec(&[k, h, w], rand_vec(k * h * w, rng))).unwrap()
    }

    #[test]
    fn separator_constant_and_one_hot_cases() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let maps = rand_maps(4, 3, 5, &mut rng);
        // alpha = 0, beta = c -> g == c everywhere.
        let z = VisualVector::new(vec![0.3; 4]);
        let w = AffineCombiner::new(vec![0.0; 4], 2.5);
        let g = sound_separator(&z, &maps, &w).unwrap();
        assert!(g.logits().data().iter().all(|&v| v == 2.5));

        // z = e_0, alpha = e_0, beta = 0 -> g = S_0.
        let mut z1 = vec![0.0; 4];
        z1[0] = 1.0;
        let mut a1 = vec![0.0; 4];
        a1[0] = 1.0;
        let g = sound_separator(
            &VisualVector::new(z1),
            &maps,
            &AffineCombiner::new(a1, 0.0),
        )
        .unwrap();
        assert_eq!(g.logits().data(), &maps.data().data()[..15]);
    }

    #[test]
    fn separator_matches_naive_double_loop() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let k = 16;
        let maps = rand_maps(k, 6, 7, &mut rng);
        let z = VisualVector::new(rand_vec(k, &mut rng));
        let w = AffineCombiner::new(rand_vec(k, &mut rng), 0.37);
        let g = sound_separator(&z, &maps, &w).unwrap();
        for y in 0..6 {
            for x in 0..7 {
                let mut want = w.beta;
                for c in 0..k {
                    want +=
                        w.alpha[c] * z.values()[c] * maps.data().data()[(c * 6 + y) * 7 + x];
                }
                let got = g.logits().data()[y * 7 + x];
                assert!((got - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn separator_rejects_k_mismatch() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let maps = rand_maps(4, 3, 3, &mut rng);
        let z = VisualVector::new(vec![0.0; 5]);
        let w = AffineCombiner::new(vec![0.0; 4], 0.0);
        assert!(sound_separator(&z, &maps, &w).is_err());
    }

    fn warped(rows: usize, cols: usize, rng: &mut ChaCha20Rng) -> WarpedMagnitude {
        let data: Vec<f64> = (0..512 * cols).map(|_| rng.gen_range(0.0..1.0)).collect();
        log_warp(&Tensor::from_vec(&[512, cols], data), rows).unwrap()
    }

    #[test]
    fn binarize_threshold_cases() {
        let mut rng = ChaCha20Rng::seed_from_u64(4);
        let x = warped(8, 6, &mut rng);

        let g = SpectrumMask::new(Tensor::full(&[8, 6], 10.0)).unwrap();
        let (b, y) = binarize(&g, &x).unwrap();
        assert!(b.values().data().iter().all(|&v| v == 1.0));
        assert_eq!(&y, x.mags());

        // Boundary: g = 0 maps through sigmoid to exactly 0.5, which the
        // strict threshold sends to 0.
        let g = SpectrumMask::new(Tensor::zeros(&[8, 6])).unwrap();
        let (b, y) = binarize(&g, &x).unwrap();
        assert!(b.values().data().iter().all(|&v| v == 0.0));
        assert!(y.data().iter().all(|&v| v == 0.0));

        let mut mixed = Tensor::zeros(&[8, 6]);
        for (i, v) in mixed.data_mut().iter_mut().enumerate() {
            *v = if i % 3 == 0 { 1.0 } else { -1.0 };
        }
        let g = SpectrumMask::new(mixed).unwrap();
        let (b, y) = binarize(&g, &x).unwrap();
        for i in 0..48 {
            if i % 3 == 0 {
                assert_eq!(b.values().data()[i], 1.0);
                assert_eq!(y.data()[i], x.mags().data()[i]);
            } else {
                assert_eq!(b.values().data()[i], 0.0);
                assert_eq!(y.data()[i], 0.0);
            }
        }
    }

    fn random_of_inputs(
        n: usize,
        k: usize,
        h: usize,
        w: usize,
        rng: &mut ChaCha20Rng,
    ) -> (Vec<VisualVector>, Vec<SpectrumMask>, Vec<SoundFeatureMaps>) {
        let zs = (0..n)
            .map(|_| VisualVector::new(rand_vec(k, rng)))
            .collect();
        let gs = (0..n)
            .map(|_| SpectrumMask::new(Tensor::from_vec(&[h, w], rand_vec(h * w, rng))).unwrap())
            .collect();
        let fs = (0..n).map(|_| rand_maps(k, h, w, rng)).collect();
        (zs, gs, fs)
    }

    #[test]
    fn zero_combiner_leaves_masks_unchanged() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let (zs, gs, fs) = random_of_inputs(3, 4, 5, 5, &mut rng);
        let w = AffineCombiner::new(vec![0.0; 4], 0.0);
        let out = opponent_filter(&zs, &gs, &fs, &w).unwrap();
        for (a, b) in out.iter().zip(&gs) {
            assert_eq!(a.logits(), b.logits());
        }
    }

    #[test]
    fn opponent_filter_conserves_mask_sum() {
        let mut rng = ChaCha20Rng::seed_from_u64(6);
        for n in 2..=4 {
            let (zs, gs, fs) = random_of_inputs(n, 8, 6, 6, &mut rng);
            let w = AffineCombiner::new(rand_vec(8, &mut rng), rng.gen_range(-0.5..0.5));
            let out = opponent_filter(&zs, &gs, &fs, &w).unwrap();
            for i in 0..36 {
                let before: f64 = gs.iter().map(|g| g.logits().data()[i]).sum();
                let after: f64 = out.iter().map(|g| g.logits().data()[i]).sum();
                assert!(
                    (after - before).abs() <= 1e-5 * before.abs().max(1.0),
                    "n={n} cell {i}: {before} -> {after}"
                );
            }
        }
    }

    #[test]
    fn symmetric_two_source_filter_is_identity() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let z = VisualVector::new(rand_vec(4, &mut rng));
        let f = rand_maps(4, 5, 5, &mut rng);
        let g1 = SpectrumMask::new(Tensor::from_vec(&[5, 5], rand_vec(25, &mut rng))).unwrap();
        let g2 = SpectrumMask::new(Tensor::from_vec(&[5, 5], rand_vec(25, &mut rng))).unwrap();
        let w = AffineCombiner::new(rand_vec(4, &mut rng), 0.1);
        let out = opponent_filter(
            &[z.clone(), z],
            &[g1.clone(), g2.clone()],
            &[f.clone(), f],
            &w,
        )
        .unwrap();
        for (a, b) in out[0].logits().data().iter().zip(g1.logits().data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in out[1].logits().data().iter().zip(g2.logits().data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn opponent_filter_rejects_single_source() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let (zs, gs, fs) = random_of_inputs(1, 4, 3, 3, &mut rng);
        let w = AffineCombiner::new(vec![0.0; 4], 0.0);
        assert!(opponent_filter(&zs, &gs, &fs, &w).is_err());
    }

    #[test]
    fn combiner_parameter_count_is_k_plus_one() {
        let w = AffineCombiner::new(vec![0.0; 16], 0.0);
        assert_eq!(w.param_count(), 17);
    }

    // ---- cascade tests -----------------------------------------------------

    use crate::audio::{stft, Waveform};
    use crate::config::Profile;
    use crate::vision::{FlowSequence, FrameSequence};

    fn toy_model(stages: usize, seed: u64) -> CofModel {
        let cfg = Config::for_profile(Profile::Toy).with_stages(stages);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        CofModel::new(cfg, &mut rng).unwrap()
    }

    fn toy_clip(seed: u64) -> (FrameSequence, Option<FlowSequence>) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let n = 16 * 3 * 64 * 64;
        let frames = Tensor::from_vec(
            &[16, 3, 64, 64],
            (0..n).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        (FrameSequence::new(frames, 8).unwrap(), None)
    }

    fn toy_mixture(seed: u64) -> crate::audio::ComplexSpectrogram {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let cfg = Config::for_profile(Profile::Toy);
        let samples = (0..cfg.clip_samples())
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect();
        let w = Waveform::new(samples, cfg.sample_rate()).unwrap();
        stft(&w, cfg.window_size(), cfg.hop()).unwrap()
    }

    #[test]
    fn cascade_emits_one_output_per_stage_with_canonical_shapes() {
        let model = toy_model(2, 11);
        let spec = toy_mixture(1);
        let clips = vec![toy_clip(2), toy_clip(3)];
        let out = cof_forward(&model, &spec, &clips).unwrap();
        assert_eq!(out.stages.len(), 2);
        for (j, st) in out.stages.iter().enumerate() {
            assert_eq!(st.stage, j + 1);
            assert_eq!(st.masks.len(), 2);
            assert_eq!(st.binary.len(), 2);
            for g in &st.masks {
                assert_eq!(g.logits().shape(), &[64, 64]);
            }
            for y in &st.spectrograms {
                assert_eq!(y.shape(), &[64, 64]);
            }
        }
        // Waveform reconstruction produces clips of the requested length.
        let cfg = &model.cfg;
        let w = out.waveforms(2, &spec, cfg.clip_samples()).unwrap();
        assert_eq!(w.len(), 2);
        assert_eq!(w[0].len(), cfg.clip_samples());
    }

    #[test]
    fn single_stage_cascade_is_the_plain_separator() {
        let model = toy_model(1, 12);
        let spec = toy_mixture(4);
        let clips = vec![toy_clip(5), toy_clip(6)];
        let out = cof_forward(&model, &spec, &clips).unwrap();
        assert_eq!(out.stages.len(), 1);

        // Recompute stage 1 via the stand-alone ops: sound features of the
        // mixture plus the separator combiner.
        let warped = log_warp(&spec.magnitude(), 64).unwrap();
        let maps = model.sound_features(0, &warped).unwrap();
        let alpha = model.store.get("stage1.sep.alpha").unwrap();
        let beta = model.store.get("stage1.sep.beta").unwrap();
        let w = AffineCombiner::new(alpha.data().to_vec(), beta.data()[0]);
        for (i, clip) in clips.iter().enumerate() {
            let prepared = crate::vision::prepare_clip(
                &clip.0,
                None,
                16,
                0,
                64,
                &crate::vision::eval_params(64),
            )
            .unwrap();
            let mut s = Session::new(&model.store, Trainability::None);
            let nodes = crate::vision::bind_clip_nodes(&mut s, &prepared);
            let (_, z) = model.vision[0].forward(&mut s, &nodes).unwrap();
            let zv = VisualVector::new(s.tape.value(z).data().to_vec());
            let g = sound_separator(&zv, &maps, &w).unwrap();
            for (a, b) in g
                .logits()
                .data()
                .iter()
                .zip(out.stages[0].masks[i].logits().data())
            {
                assert!((a - b).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn cascade_conserves_mask_sum_across_stages() {
        let mut model = toy_model(3, 13);
        // Give the opponent filters non-trivial weights so the test is not
        // vacuous at the zero initialization.
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        for stage in 2..=3 {
            for suffix in ["alpha", "beta"] {
                let name = format!("stage{stage}.of.{suffix}");
                let t = model.store.get_mut(&name).unwrap();
                for v in t.data_mut() {
                    *v = rng.gen_range(-0.5..0.5);
                }
            }
        }
        let spec = toy_mixture(7);
        let clips = vec![toy_clip(8), toy_clip(9)];
        let out = cof_forward(&model, &spec, &clips).unwrap();
        for j in 1..out.stages.len() {
            let prev = &out.stages[j - 1];
            let cur = &out.stages[j];
            for i in 0..prev.masks[0].logits().numel() {
                let a: f64 = prev.masks.iter().map(|m| m.logits().data()[i]).sum();
                let b: f64 = cur.masks.iter().map(|m| m.logits().data()[i]).sum();
                assert!(
                    (a - b).abs() <= 1e-5 * a.abs().max(1.0),
                    "stage {} -> {}: {a} vs {b}",
                    j,
                    j + 1
                );
            }
        }
    }

    #[test]
    fn swapping_clips_swaps_stage_one_streams() {
        let model = toy_model(1, 14);
        let spec = toy_mixture(10);
        let a = toy_clip(11);
        let b = toy_clip(12);
        let out1 = cof_forward(&model, &spec, &[a.clone(), b.clone()]).unwrap();
        let out2 = cof_forward(&model, &spec, &[b, a]).unwrap();
        assert_eq!(
            out1.stages[0].masks[0].logits(),
            out2.stages[0].masks[1].logits()
        );
        assert_eq!(
            out1.stages[0].masks[1].logits(),
            out2.stages[0].masks[0].logits()
        );
    }

    #[test]
    fn of_combiner_namespace_exposes_17_scalars() {
        let model = toy_model(2, 15);
        assert_eq!(model.of_combiner_scalars(2), 17);
    }
}
