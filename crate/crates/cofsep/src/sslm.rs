//! Sound-source location masking: a full-resolution [0,1] pixel mask that,
//! applied to the input frames, should preserve the cascade's separation
//! while staying sparse.

use crate::autodiff::NodeId;
use crate::error::{Error, Result};
use crate::nn::{Session, Trainability};
use crate::separation::CofModel;
use crate::tensor::Tensor;
use crate::vision::{ClipNodes, PreparedClip};

/// Full-resolution location mask, same spatial size as the input frame.
#[derive(Debug, Clone)]
pub struct LocationMask {
    mask: Tensor,
}

impl LocationMask {
    pub fn new(mut mask: Tensor) -> Result<Self> {
        if mask.shape().len() != 2 {
            return Err(Error::invalid("location mask must be 2-d"));
        }
        if !mask.is_finite() {
            return Err(Error::invalid("location mask has non-finite values"));
        }
        for v in mask.data_mut() {
            *v = v.clamp(0.0, 1.0);
        }
        Ok(LocationMask { mask })
    }

    pub fn values(&self) -> &Tensor {
        &self.mask
    }

    pub fn mean_activation(&self) -> f64 {
        self.mask.data().iter().sum::<f64>() / self.mask.numel() as f64
    }
}

/// Predict the location mask for a single frame `[3, S, S]`.
pub fn sslm_forward(model: &CofModel, frame: &Tensor) -> Result<LocationMask> {
    let s = frame.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::invalid(format!(
            "sslm input must be [3,S,S], got {s:?}"
        )));
    }
    if s[1] % 16 != 0 || s[2] % 16 != 0 {
        return Err(Error::invalid(
            "sslm input spatial dims must be divisible by 16",
        ));
    }
    let mut sess = Session::new(&model.store, Trainability::None);
    let x = sess.tape.constant(frame.clone());
    let m = model.sslm.forward(&mut sess, x);
    let (h, w) = (s[1], s[2]);
    LocationMask::new(sess.tape.value(m).clone().reshaped(&[h, w]))
}

/// Element-wise product of a frame with a location mask, per channel.
pub fn apply_location_mask(frame: &Tensor, mask: &LocationMask) -> Result<Tensor> {
    let fs = frame.shape();
    if fs.len() != 3 {
        return Err(Error::invalid("frame must be [C,S,S]"));
    }
    if mask.values().shape() != &fs[1..] {
        return Err(Error::ShapeMismatch {
            what: "location mask vs frame".into(),
            expected: fs[1..].to_vec(),
            got: mask.values().shape().to_vec(),
        });
    }
    let plane = fs[1] * fs[2];
    let mut out = frame.clone();
    for c in 0..fs[0] {
        for (v, m) in out.data_mut()[c * plane..(c + 1) * plane]
            .iter_mut()
            .zip(mask.values().data())
        {
            *v *= m;
        }
    }
    Ok(out)
}

/// Localization loss: per-stage mean |b_sslm - b_full| over sources and
/// pixels, weighted by `r`, plus `lambda` times the mean mask activation.
/// `b_full` is a constant target; gradients flow only through `b_sslm`.
pub fn sslm_loss(
    b_sslm: &[Vec<Tensor>],
    b_full: &[Vec<Tensor>],
    mask: &LocationMask,
    r: &[f64],
    lambda: f64,
) -> Result<f64> {
    if b_sslm.len() != b_full.len() || b_sslm.len() != r.len() {
        return Err(Error::invalid(format!(
            "stage counts differ: {} masked, {} full, {} weights",
            b_sslm.len(),
            b_full.len(),
            r.len()
        )));
    }
    let mut total = 0.0;
    for (j, (ms, fs)) in b_sslm.iter().zip(b_full).enumerate() {
        if ms.len() != fs.len() {
            return Err(Error::invalid(format!(
                "stage {}: {} masked sources vs {} full",
                j + 1,
                ms.len(),
                fs.len()
            )));
        }
        let mut stage = 0.0;
        for (a, b) in ms.iter().zip(fs) {
            if a.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    what: format!("stage {} mask probabilities", j + 1),
                    expected: b.shape().to_vec(),
                    got: a.shape().to_vec(),
                });
            }
            let n = a.numel() as f64;
            stage += a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (x - y).abs())
                .sum::<f64>()
                / n;
        }
        total += r[j] * stage / ms.len() as f64;
    }
    total += lambda * mask.mean_activation();
    Ok(total)
}

/// Everything the localization training step needs from one graph build.
pub struct SslmGraph {
    pub loss: NodeId,
    pub diff_value: f64,
    pub sparsity_value: f64,
    /// Mean activation over all per-source masks.
    pub mask_mean: f64,
}

/// Constant per-stage, per-source sigmoid probabilities of the unmasked
/// cascade, used as the localization target.
pub fn full_pass_probabilities(
    model: &CofModel,
    mix_warped: &Tensor,
    clips: &[PreparedClip],
) -> Result<Vec<Vec<Tensor>>> {
    let mut s = Session::new(&model.store, Trainability::None);
    let nodes: Vec<ClipNodes> = clips
        .iter()
        .map(|c| crate::vision::bind_clip_nodes(&mut s, c))
        .collect();
    let fwd = model.forward_graph(&mut s, mix_warped, &nodes)?;
    Ok(fwd
        .stage_logits
        .iter()
        .map(|row| {
            row.iter()
                .map(|&id| {
                    let mut p = s.tape.value(id).clone();
                    for v in p.data_mut() {
                        *v = 1.0 / (1.0 + (-*v).exp());
                    }
                    p
                })
                .collect()
        })
        .collect())
}

/// Build the masked-input pass and its loss. For each source the keyframe is
/// passed through the localization network; the resulting mask multiplies
/// every frame (and flow stack) of that source before the frozen cascade.
pub fn sslm_training_graph(
    model: &CofModel,
    s: &mut Session,
    mix_warped: &Tensor,
    clips: &[PreparedClip],
    b_full: &[Vec<Tensor>],
    lambda: f64,
) -> Result<SslmGraph> {
    let n = clips.len();
    let mut masked_nodes = Vec::with_capacity(n);
    let mut mask_nodes = Vec::with_capacity(n);
    for clip in clips {
        let keyframe = s.tape.constant(clip.keyframe());
        let mask = model.sslm.forward(s, keyframe);
        let frames = s.tape.constant(clip.frames.clone());
        let masked_frames = s.tape.mul_broadcast_hw(frames, mask);
        let masked_key = s.tape.mul_broadcast_hw(keyframe, mask);
        let masked_flows = match &clip.flows {
            Some(f) => {
                let fl = s.tape.constant(f.clone());
                Some(s.tape.mul_broadcast_hw(fl, mask))
            }
            None => None,
        };
        masked_nodes.push(ClipNodes {
            frames: masked_frames,
            keyframe: masked_key,
            flows: masked_flows,
        });
        mask_nodes.push(mask);
    }
    let fwd = model.forward_graph(s, mix_warped, &masked_nodes)?;
    if fwd.stage_logits.len() != b_full.len() {
        return Err(Error::invalid("stage count mismatch against full pass"));
    }

    // Per-stage L1 between masked-pass probabilities and the constant
    // unmasked targets, averaged over sources.
    let mut stage_terms = Vec::new();
    for (logits, targets) in fwd.stage_logits.iter().zip(b_full) {
        let mut per_source = Vec::new();
        for (&g, target) in logits.iter().zip(targets) {
            let p = s.tape.sigmoid(g);
            let t = s.tape.constant(target.clone());
            let d = s.tape.l1_mean(p, t);
            per_source.push((d, 1.0 / logits.len() as f64));
        }
        stage_terms.push(s.tape.weighted_sum(&per_source));
    }
    let diff_terms: Vec<(NodeId, f64)> = stage_terms
        .iter()
        .zip(&model.cfg.stage_weights)
        .map(|(&id, &w)| (id, w))
        .collect();
    let diff = s.tape.weighted_sum(&diff_terms);

    let sparsity_terms: Vec<(NodeId, f64)> = mask_nodes
        .iter()
        .map(|&m| {
            let ma = s.tape.mean_abs(m);
            (ma, 1.0 / n as f64)
        })
        .collect();
    let sparsity = s.tape.weighted_sum(&sparsity_terms);
    let loss = s.tape.weighted_sum(&[(diff, 1.0), (sparsity, lambda)]);

    let mask_mean = s.tape.value(sparsity).data()[0];
    Ok(SslmGraph {
        loss,
        diff_value: s.tape.value(diff).data()[0],
        sparsity_value: lambda * mask_mean,
        mask_mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Config, Profile};
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn toy_model() -> CofModel {
        let cfg = Config::for_profile(Profile::Toy);
        let mut rng = ChaCha20Rng::seed_from_u64(31);
        CofModel::new(cfg, &mut rng).unwrap()
    }

    fn rand_frame(seed: u64, s: usize) -> Tensor {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        Tensor::from_vec(
            &[3, s, s],
            (0..3 * s * s).map(|_| rng.gen_range(0.0..1.0)).collect(),
        )
    }

    #[test]
    fn forward_emits_unit_interval_full_resolution_mask() {
        let model = toy_model();
        let mask = sslm_forward(&model, &rand_frame(1, 64)).unwrap();
        assert_eq!(mask.values().shape(), &[64, 64]);
        assert!(mask
            .values()
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
        // Deterministic inference.
        let again = sslm_forward(&model, &rand_frame(1, 64)).unwrap();
        assert_eq!(mask.values(), again.values());
    }

    #[test]
    fn saturated_head_bias_drives_mask_to_zero() {
        let mut model = toy_model();
        let bias = model.store.get_mut("sslm.head.bias").unwrap();
        bias.data_mut()[0] = -40.0;
        let mask = sslm_forward(&model, &rand_frame(2, 64)).unwrap();
        assert!(mask.values().data().iter().all(|&v| v < 1e-12));
    }

    #[test]
    fn apply_mask_identity_zero_and_box() {
        let frame = rand_frame(3, 32);
        let ones = LocationMask::new(Tensor::full(&[32, 32], 1.0)).unwrap();
        assert_eq!(apply_location_mask(&frame, &ones).unwrap(), frame);

        let zeros = LocationMask::new(Tensor::zeros(&[32, 32])).unwrap();
        let black = apply_location_mask(&frame, &zeros).unwrap();
        assert!(black.data().iter().all(|&v| v == 0.0));

        let mut boxed = Tensor::zeros(&[32, 32]);
        for y in 8..16 {
            for x in 8..16 {
                boxed.data_mut()[y * 32 + x] = 1.0;
            }
        }
        let bm = LocationMask::new(boxed).unwrap();
        let out = apply_location_mask(&frame, &bm).unwrap();
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let v = out.data()[(c * 32 + y) * 32 + x];
                    if (8..16).contains(&y) && (8..16).contains(&x) {
                        assert_eq!(v, frame.data()[(c * 32 + y) * 32 + x]);
                    } else {
                        assert_eq!(v, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn apply_mask_rejects_mismatched_shapes() {
        let frame = rand_frame(4, 32);
        let mask = LocationMask::new(Tensor::zeros(&[16, 16])).unwrap();
        assert!(apply_location_mask(&frame, &mask).is_err());
    }

    #[test]
    fn loss_zero_and_pure_sparsity_cases() {
        let b: Vec<Vec<Tensor>> = vec![vec![Tensor::full(&[8, 8], 0.3); 2]];
        let zero_mask = LocationMask::new(Tensor::zeros(&[16, 16])).unwrap();
        let loss = sslm_loss(&b, &b, &zero_mask, &[1.0], 0.05).unwrap();
        assert_eq!(loss, 0.0);

        let ones_mask = LocationMask::new(Tensor::full(&[16, 16], 1.0)).unwrap();
        let loss = sslm_loss(&b, &b, &ones_mask, &[1.0], 0.05).unwrap();
        assert!((loss - 0.05).abs() < 1e-12, "sparsity term equals lambda");
    }

    #[test]
    fn loss_matches_hand_computed_half_grid_difference() {
        // Single stage, one source; probabilities differ by 0.5 on half the
        // grid -> mean |diff| = 0.25.
        let mut a = Tensor::full(&[4, 4], 0.5);
        for i in 0..8 {
            a.data_mut()[i] = 1.0;
        }
        let b = Tensor::full(&[4, 4], 0.5);
        let mask = LocationMask::new(Tensor::zeros(&[8, 8])).unwrap();
        let loss = sslm_loss(&[vec![a]], &[vec![b]], &mask, &[1.0], 0.0).unwrap();
        assert!((loss - 0.25).abs() < 1e-12);
    }

    #[test]
    fn loss_is_nonnegative_and_zero_only_at_match_with_empty_mask() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        for _ in 0..20 {
            let a = Tensor::from_vec(
                &[4, 4],
                (0..16).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>(),
            );
            let b = Tensor::from_vec(
                &[4, 4],
                (0..16).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>(),
            );
            let mask = LocationMask::new(Tensor::from_vec(
                &[4, 4],
                (0..16).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<_>>(),
            ))
            .unwrap();
            let loss = sslm_loss(&[vec![a]], &[vec![b]], &mask, &[1.0], 0.1).unwrap();
            assert!(loss >= 0.0);
        }
    }

    #[test]
    fn gradients_reach_only_the_localization_weights() {
        let model = toy_model();
        let cfg = &model.cfg;
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let frames = Tensor::from_vec(
            &[16, 3, 64, 64],
            (0..16 * 3 * 64 * 64)
                .map(|_| rng.gen_range(0.0..1.0))
                .collect(),
        );
        let clip = PreparedClip {
            frames,
            flows: None,
        };
        let clips = vec![clip.clone(), clip];
        let mix_warped = Tensor::from_vec(
            &[64, 64],
            (0..64 * 64).map(|_| rng.gen_range(0.0..1.0)).collect(),
        );
        let b_full = full_pass_probabilities(&model, &mix_warped, &clips).unwrap();

        let mut s = Session::new(&model.store, Trainability::Prefixes(vec!["sslm.".into()]));
        let graph =
            sslm_training_graph(&model, &mut s, &mix_warped, &clips, &b_full, 0.05).unwrap();
        let grads = s.param_grads(graph.loss);
        assert!(!grads.is_empty(), "localization weights receive gradients");
        for name in grads.keys() {
            assert!(
                name.starts_with("sslm."),
                "gradient leaked into frozen parameter {name}"
            );
        }
        // The loss is finite and the sparsity value matches lambda * mean.
        assert!(s.tape.value(graph.loss).data()[0].is_finite());
        assert!((graph.sparsity_value - 0.05 * graph.mask_mean).abs() < 1e-12);
        assert!(cfg.stages >= 2);
    }
}
