//! Self-supervised mix-and-separate training: deterministic example
//! sampling, the multi-stage mask loss, SGD with momentum and the Adam
//! optimizer for the localization network, plus both training loops with
//! CSV loss logs and checkpointing.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;

use crate::audio::{load_audio, log_warp, mix, stft, BinaryMask, ComplexSpectrogram, Waveform, WarpedMagnitude};
use crate::checkpoint::{load_checkpoint, model_from_checkpoint, save_checkpoint, Checkpoint, OptState};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::manifest::{Manifest, ManifestEntry, Split};
use crate::nn::{accumulate_grads, ParamStore, Session, Trainability};
use crate::separation::CofModel;
use crate::sslm::{full_pass_probabilities, sslm_training_graph};
use crate::tensor::{write_tensor, DType, Tensor, TensorMeta};
use crate::vision::{
    eval_params, load_clip, load_flows, prepare_clip, sample_augment, bind_clip_nodes,
    FlowSequence, FrameSequence, PreparedClip,
};

/// Stable per-(seed, iteration, slot) stream derivation (splitmix64 finish).
pub fn derive_seed(seed: u64, tag: u64, index: u64) -> u64 {
    let mut x = seed
        ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

// ---- data access ------------------------------------------------------------------

/// One decoded video held in memory.
pub struct CachedVideo {
    pub frames: FrameSequence,
    pub audio: Waveform,
    pub flows: Option<FlowSequence>,
}

/// Thread-safe decode cache so repeated sampling never re-reads PNG streams.
#[derive(Default)]
pub struct ClipCache {
    map: RwLock<HashMap<String, Arc<CachedVideo>>>,
}

impl ClipCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(
        &self,
        entry: &ManifestEntry,
        sample_rate: u32,
        fps: u32,
        want_flows: bool,
    ) -> Result<Arc<CachedVideo>> {
        if let Some(v) = self.map.read().unwrap().get(&entry.id) {
            if !want_flows || v.flows.is_some() {
                return Ok(v.clone());
            }
        }
        let frames = load_clip(&entry.frames, fps)?;
        let audio = load_audio(&entry.audio, sample_rate)?;
        let flows = match (&entry.flows, want_flows) {
            (Some(p), true) => Some(load_flows(p)?),
            (None, true) => {
                return Err(Error::invalid(format!(
                    "entry '{}' has no flow data but the configured vision nets need flows",
                    entry.id
                )))
            }
            _ => None,
        };
        let video = Arc::new(CachedVideo {
            frames,
            audio,
            flows,
        });
        self.map
            .write()
            .unwrap()
            .insert(entry.id.clone(), video.clone());
        Ok(video)
    }
}

/// One mix-and-separate example.
pub struct TrainingExample {
    pub mix_spec: ComplexSpectrogram,
    pub mix_warped: WarpedMagnitude,
    pub sources: Vec<Waveform>,
    pub gt_masks: Vec<BinaryMask>,
    pub clips: Vec<PreparedClip>,
    pub source_ids: Vec<String>,
    pub categories: Vec<String>,
}

/// Draw `n` distinct indices from `0..len` (order of draws is part of the
/// deterministic contract).
pub fn choose_sources(rng: &mut ChaCha20Rng, len: usize, n: usize) -> Vec<usize> {
    let mut picked: Vec<usize> = Vec::with_capacity(n);
    while picked.len() < n {
        let idx = rng.gen_range(0..len);
        if !picked.contains(&idx) {
            picked.push(idx);
        }
    }
    picked
}

/// Sample one training example: `n` distinct videos, a random temporal crop
/// of each, mixed audio, and warped-domain dominance masks recomputed for
/// exactly this crop. Byte-identical for a fixed `rng_seed`.
pub fn sample_example(
    entries: &[&ManifestEntry],
    cfg: &Config,
    cache: &ClipCache,
    rng_seed: u64,
    augment: bool,
) -> Result<TrainingExample> {
    let n = cfg.sources;
    if entries.len() < n {
        return Err(Error::invalid(format!(
            "manifest split has {} entries, need at least {n}",
            entries.len()
        )));
    }
    let want_flows = cfg.stage_visions.iter().any(|v| v.needs_flows());
    let mut rng = ChaCha20Rng::seed_from_u64(rng_seed);
    let picked = choose_sources(&mut rng, entries.len(), n);

    let clip_samples = cfg.clip_samples();
    let t_frames = cfg.frames_per_clip();
    let mut sources = Vec::with_capacity(n);
    let mut clips = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    let mut categories = Vec::with_capacity(n);
    for &idx in &picked {
        let entry = entries[idx];
        let video = cache.get(entry, cfg.sample_rate(), cfg.fps(), want_flows)?;
        let max_start_audio = video.audio.len().saturating_sub(clip_samples);
        let max_start_frames = video.frames.len().saturating_sub(t_frames) * cfg.sample_rate() as usize
            / cfg.fps() as usize;
        let max_start = max_start_audio.min(max_start_frames);
        let start = if max_start > 0 {
            rng.gen_range(0..=max_start)
        } else {
            0
        };
        let start_frame = ((start as f64 / cfg.sample_rate() as f64) * cfg.fps() as f64).floor()
            as usize;
        let start_frame = start_frame.min(video.frames.len() - t_frames);
        let aug = if augment {
            sample_augment(&mut rng, cfg.frame_size())
        } else {
            eval_params(cfg.frame_size())
        };
        let clip = prepare_clip(
            &video.frames,
            video.flows.as_ref(),
            t_frames,
            start_frame,
            cfg.frame_size(),
            &aug,
        )?;
        sources.push(video.audio.crop(start, clip_samples));
        clips.push(clip);
        ids.push(entry.id.clone());
        categories.push(entry.category.clone());
    }

    let mixture = mix(&sources)?;
    let mix_spec = stft(&mixture, cfg.window_size(), cfg.hop())?;
    let mix_warped = log_warp(&mix_spec.magnitude(), cfg.spec_rows())?;
    let comp_warped: Vec<WarpedMagnitude> = sources
        .iter()
        .map(|s| {
            let spec = stft(s, cfg.window_size(), cfg.hop())?;
            log_warp(&spec.magnitude(), cfg.spec_rows())
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&WarpedMagnitude> = comp_warped.iter().collect();
    let gt_masks = (0..n)
        .map(|i| crate::audio::dominant_mask(&refs, i))
        .collect::<Result<_>>()?;

    Ok(TrainingExample {
        mix_spec,
        mix_warped,
        sources,
        gt_masks,
        clips,
        source_ids: ids,
        categories,
    })
}

// ---- losses ------------------------------------------------------------------------

/// Multi-stage separation loss on sigmoid probabilities: per stage, the mean
/// binary cross entropy over sources and pixels (probabilities clamped at
/// 1e-7), weighted by `r` and summed.
pub fn separation_loss(
    stage_probs: &[Vec<Tensor>],
    gt: &[BinaryMask],
    r: &[f64],
) -> Result<f64> {
    if stage_probs.len() != r.len() {
        return Err(Error::invalid(format!(
            "{} stages of probabilities vs {} weights",
            stage_probs.len(),
            r.len()
        )));
    }
    const CLAMP: f64 = 1e-7;
    let mut total = 0.0;
    for (stage, weight) in stage_probs.iter().zip(r) {
        if stage.len() != gt.len() {
            return Err(Error::invalid(format!(
                "{} sources of probabilities vs {} masks",
                stage.len(),
                gt.len()
            )));
        }
        let mut stage_loss = 0.0;
        for (probs, mask) in stage.iter().zip(gt) {
            if probs.shape() != mask.values().shape() {
                return Err(Error::ShapeMismatch {
                    what: "probabilities vs ground truth".into(),
                    expected: mask.values().shape().to_vec(),
                    got: probs.shape().to_vec(),
                });
            }
            let n = probs.numel() as f64;
            let mut acc = 0.0;
            for (&p, &t) in probs.data().iter().zip(mask.values().data()) {
                let p = p.clamp(CLAMP, 1.0 - CLAMP);
                acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
            }
            stage_loss += acc / n;
        }
        total += weight * stage_loss / gt.len() as f64;
    }
    Ok(total)
}

// ---- optimizers -----------------------------------------------------------------------

/// SGD with momentum and weight decay:
/// `v <- momentum*v + grad + weight_decay*theta; theta <- theta - lr*v`.
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    pub velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    /// Apply one step; `lr_for` maps a parameter name to its learning rate.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
        lr_for: impl Fn(&str) -> f64,
    ) {
        for (name, grad) in grads {
            let theta = store
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let vel = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let lr = lr_for(name);
            for ((t, v), g) in theta
                .data_mut()
                .iter_mut()
                .zip(vel.data_mut())
                .zip(grad.data())
            {
                *v = self.momentum * *v + g + self.weight_decay * *t;
                *t -= lr * *v;
            }
        }
    }
}

/// Adam with bias correction (beta1 0.9, beta2 0.999, eps 1e-8).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &BTreeMap<String, Tensor>) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, grad) in grads {
            let theta = store
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.shape()));
            for (((t, m), v), g) in theta
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(grad.data())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *t -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ---- training loops ----------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Resume from this checkpoint (its config snapshot wins).
    pub resume: Option<PathBuf>,
    /// Load matching vision/localization weights before training and train
    /// them at the pretrained learning rate.
    pub init_weights: Option<PathBuf>,
}

/// Step-decay schedule: divide by `decay_factor` every `decay_every` iters.
fn lr_at(base: f64, cfg: &Config, iter: u64) -> f64 {
    let k = if cfg.lr_decay_every > 0 {
        (iter / cfg.lr_decay_every) as i32
    } else {
        0
    };
    base / cfg.lr_decay_factor.powi(k)
}

fn append_line(path: &Path, line: &str) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

fn dump_batch(
    out_dir: &Path,
    iter: u64,
    batch: &[TrainingExample],
) -> Result<PathBuf> {
    let dir = out_dir.join(format!("diagnostics/iter_{iter:06}"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (slot, ex) in batch.iter().enumerate() {
        let meta = TensorMeta::new();
        write_tensor(
            &dir.join(format!("slot{slot}_mix_warped.cot")),
            ex.mix_warped.mags(),
            DType::F64,
            &meta,
        )?;
        for (i, m) in ex.gt_masks.iter().enumerate() {
            write_tensor(
                &dir.join(format!("slot{slot}_gt{i}.cot")),
                m.values(),
                DType::U8,
                &meta,
            )?;
        }
        for (i, c) in ex.clips.iter().enumerate() {
            write_tensor(
                &dir.join(format!("slot{slot}_clip{i}.cot")),
                &c.frames,
                DType::F32,
                &meta,
            )?;
        }
    }
    Ok(dir)
}

/// Learning rates per parameter: namespaces listed in `pretrained` use the
/// pretrained rate, everything else the scratch rate.
fn lr_selector<'a>(
    cfg: &'a Config,
    pretrained: &'a [String],
    iter: u64,
) -> impl Fn(&str) -> f64 + 'a {
    move |name: &str| {
        let base = if pretrained.iter().any(|p| name.starts_with(p.as_str())) {
            cfg.lr_pretrained
        } else {
            cfg.lr_scratch
        };
        lr_at(base, cfg, iter)
    }
}

fn matched_pretrained_prefixes(matched: &[String]) -> Vec<String> {
    let mut prefixes: Vec<String> = matched
        .iter()
        .filter_map(|name| {
            if name.starts_with("sslm.") {
                Some("sslm.".to_string())
            } else {
                name.split_once(".vision.")
                    .map(|(head, _)| format!("{head}.vision."))
            }
        })
        .collect();
    prefixes.sort();
    prefixes.dedup();
    prefixes
}

/// Train the cascade with SGD per the configured schedule. Writes
/// `loss_log.csv`, periodic checkpoints, and `final.ckpt` under `out_dir`;
/// returns the final checkpoint path.
pub fn train_cof(
    cfg: &Config,
    manifest: &Manifest,
    out_dir: &Path,
    opts: &TrainOptions,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (mut model, mut sgd, mut pretrained, start_iter) = match &opts.resume {
        Some(path) => {
            let ckpt = load_checkpoint(path)?;
            let model = model_from_checkpoint(&ckpt)?;
            let mut sgd = Sgd::new(ckpt.config.momentum, ckpt.config.weight_decay);
            if let OptState::Sgd(vel) = ckpt.opt {
                sgd.velocity = vel;
            }
            (model, sgd, ckpt.pretrained.clone(), ckpt.iteration)
        }
        None => {
            cfg.validate()?;
            let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
            let mut model = CofModel::new(cfg.clone(), &mut rng)?;
            let mut pretrained = Vec::new();
            if let Some(path) = &opts.init_weights {
                let donor = load_checkpoint(path)?;
                let matched = model.store.load_matching(&donor.params)?;
                pretrained = matched_pretrained_prefixes(&matched);
            }
            let sgd = Sgd::new(cfg.momentum, cfg.weight_decay);
            (model, sgd, pretrained, 0)
        }
    };
    let cfg = model.cfg.clone();
    let entries = manifest.require_split(Split::Train)?;
    if entries.len() < cfg.sources {
        return Err(Error::invalid(format!(
            "train split has {} entries, need at least {}",
            entries.len(),
            cfg.sources
        )));
    }

    let log_path = out_dir.join("loss_log.csv");
    if !log_path.exists() {
        let stages: Vec<String> = (1..=cfg.stages).map(|j| format!("stage{j}_loss")).collect();
        append_line(
            &log_path,
            &format!("iter,loss,{},lr\n", stages.join(",")),
        )?;
    }

    let cache = ClipCache::new();
    for iter in start_iter..cfg.total_iters {
        let batch: Vec<Result<(TrainingExample, BTreeMap<String, Tensor>, f64, Vec<f64>)>> = (0
            ..cfg.batch_size)
            .into_par_iter()
            .map(|slot| {
                let ex_seed = derive_seed(cfg.seed, iter.wrapping_add(1), slot as u64);
                let ex = sample_example(&entries, &cfg, &cache, ex_seed, true)?;
                let mut s = Session::new(&model.store, Trainability::All);
                let nodes: Vec<_> = ex
                    .clips
                    .iter()
                    .map(|c| bind_clip_nodes(&mut s, c))
                    .collect();
                let fwd = model.forward_graph(&mut s, ex.mix_warped.mags(), &nodes)?;
                let (total, stage_nodes) = model.training_loss_graph(&mut s, &fwd, &ex.gt_masks)?;
                let loss = s.tape.value(total).data()[0];
                let stage_losses = stage_nodes
                    .iter()
                    .map(|&id| s.tape.value(id).data()[0])
                    .collect();
                let grads = s.param_grads(total);
                Ok((ex, grads, loss, stage_losses))
            })
            .collect();

        let mut examples = Vec::with_capacity(cfg.batch_size);
        let mut grads_total: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut stage_sums = vec![0.0; cfg.stages];
        for item in batch {
            let (ex, grads, loss, stage_losses) = item?;
            accumulate_grads(&mut grads_total, grads);
            loss_sum += loss;
            for (a, b) in stage_sums.iter_mut().zip(&stage_losses) {
                *a += b;
            }
            examples.push(ex);
        }
        let inv_b = 1.0 / cfg.batch_size as f64;
        let loss_mean = loss_sum * inv_b;
        if !loss_mean.is_finite() {
            let dump_dir = dump_batch(out_dir, iter, &examples)?;
            return Err(Error::NonFiniteLoss { iter, dump_dir });
        }
        for g in grads_total.values_mut() {
            for v in g.data_mut() {
                *v *= inv_b;
            }
        }
        let lr_fn = lr_selector(&cfg, &pretrained, iter);
        sgd.step(&mut model.store, &grads_total, lr_fn);

        let stage_cols: Vec<String> = stage_sums
            .iter()
            .map(|s| format!("{:.6}", s * inv_b))
            .collect();
        append_line(
            &log_path,
            &format!(
                "{},{:.6},{},{:.8}\n",
                iter,
                loss_mean,
                stage_cols.join(","),
                lr_at(cfg.lr_scratch, &cfg, iter)
            ),
        )?;

        let done = iter + 1;
        if done % cfg.checkpoint_every == 0 || done == cfg.total_iters {
            let ckpt = Checkpoint {
                config: cfg.clone(),
                iteration: done,
                pretrained: std::mem::take(&mut pretrained),
                opt: OptState::Sgd(sgd.velocity.clone()),
                params: model.store.clone(),
            };
            let name = if done == cfg.total_iters {
                "final.ckpt".to_string()
            } else {
                format!("ckpt_{done:06}.ckpt")
            };
            save_checkpoint(&out_dir.join(name), &ckpt)?;
            pretrained = ckpt.pretrained;
        }
    }
    Ok(out_dir.join("final.ckpt"))
}

/// Train the localization network with Adam against a frozen cascade
/// checkpoint. Returns the path of the combined checkpoint.
pub fn train_sslm(
    cfg: &Config,
    cof_checkpoint: &Path,
    manifest: &Manifest,
    out_dir: &Path,
) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt = load_checkpoint(cof_checkpoint)?;
    let mut model = model_from_checkpoint(&ckpt)?;
    // The cascade geometry comes from the checkpoint; localization
    // hyperparameters and seed come from the caller's config.
    let mut run_cfg = ckpt.config.clone();
    run_cfg.sslm_lambda = cfg.sslm_lambda;
    run_cfg.sslm_iters = cfg.sslm_iters;
    run_cfg.sslm_lr = cfg.sslm_lr;
    run_cfg.seed = cfg.seed;
    run_cfg.batch_size = cfg.batch_size;
    let cfg = run_cfg;

    let entries = manifest.require_split(Split::Train)?;
    let mut adam = Adam::new(cfg.sslm_lr);
    let cache = ClipCache::new();
    let log_path = out_dir.join("sslm_loss_log.csv");
    append_line(&log_path, "iter,loss,diff,sparsity,mask_mean,lr\n")?;

    for iter in 0..cfg.sslm_iters {
        let batch: Vec<Result<(BTreeMap<String, Tensor>, f64, f64, f64, f64)>> = (0..cfg
            .batch_size)
            .into_par_iter()
            .map(|slot| {
                let ex_seed = derive_seed(cfg.seed, 0x55_1100 + iter, slot as u64);
                let ex = sample_example(&entries, &cfg, &cache, ex_seed, true)?;
                let b_full =
                    full_pass_probabilities(&model, ex.mix_warped.mags(), &ex.clips)?;
                let mut s = Session::new(
                    &model.store,
                    Trainability::Prefixes(vec!["sslm.".into()]),
                );
                let graph = sslm_training_graph(
                    &model,
                    &mut s,
                    ex.mix_warped.mags(),
                    &ex.clips,
                    &b_full,
                    cfg.sslm_lambda,
                )?;
                let loss = s.tape.value(graph.loss).data()[0];
                let grads = s.param_grads(graph.loss);
                Ok((
                    grads,
                    loss,
                    graph.diff_value,
                    graph.sparsity_value,
                    graph.mask_mean,
                ))
            })
            .collect();

        let mut grads_total: BTreeMap<String, Tensor> = BTreeMap::new();
        let (mut loss_sum, mut diff_sum, mut sp_sum, mut mm_sum) = (0.0, 0.0, 0.0, 0.0);
        for item in batch {
            let (grads, loss, diff, sp, mm) = item?;
            accumulate_grads(&mut grads_total, grads);
            loss_sum += loss;
            diff_sum += diff;
            sp_sum += sp;
            mm_sum += mm;
        }
        let inv_b = 1.0 / cfg.batch_size as f64;
        let loss_mean = loss_sum * inv_b;
        if !loss_mean.is_finite() {
            return Err(Error::NonFiniteLoss {
                iter,
                dump_dir: out_dir.to_path_buf(),
            });
        }
        for g in grads_total.values_mut() {
            for v in g.data_mut() {
                *v *= inv_b;
            }
        }
        adam.step(&mut model.store, &grads_total);
        append_line(
            &log_path,
            &format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.8}\n",
                iter,
                loss_mean,
                diff_sum * inv_b,
                sp_sum * inv_b,
                mm_sum * inv_b,
                cfg.sslm_lr
            ),
        )?;
    }

    let out = Checkpoint {
        config: cfg.clone(),
        iteration: cfg.sslm_iters,
        pretrained: ckpt.pretrained.clone(),
        opt: OptState::Adam {
            step: adam.step,
            m: adam.m.clone(),
            v: adam.v.clone(),
        },
        params: model.store.clone(),
    };
    let path = out_dir.join("sslm_final.ckpt");
    save_checkpoint(&path, &out)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Profile;

    #[test]
    fn sgd_matches_the_hand_written_update_rule() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(2.0));
        let mut sgd = Sgd::new(0.9, 1e-4);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(0.5));

        // Hand-tracked reference.
        let (mut theta, mut vel) = (2.0f64, 0.0f64);
        let lr = 1e-2;
        for _ in 0..5 {
            sgd.step(&mut store, &grads, |_| lr);
            vel = 0.9 * vel + 0.5 + 1e-4 * theta;
            theta -= lr * vel;
            let got = store.get("w").unwrap().data()[0];
            assert!((got - theta).abs() < 1e-8, "{got} vs {theta}");
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(3.0));
        let mut adam = Adam::new(0.1);
        for _ in 0..200 {
            let x = store.get("x").unwrap().data()[0];
            let mut grads = BTreeMap::new();
            grads.insert("x".to_string(), Tensor::scalar(2.0 * x));
            adam.step(&mut store, &grads);
        }
        assert!(store.get("x").unwrap().data()[0].abs() < 0.05);
    }

    #[test]
    fn lr_schedule_divides_by_factor_on_time() {
        let cfg = Config::for_profile(Profile::Paper);
        assert_eq!(lr_at(1e-3, &cfg, 0), 1e-3);
        assert_eq!(lr_at(1e-3, &cfg, 1599), 1e-3);
        let at_1700 = lr_at(1e-3, &cfg, 1700);
        assert!((at_1700 - 1e-4).abs() < 1e-12, "{at_1700}");
        assert!((lr_at(1e-3, &cfg, 3300) - 1e-5).abs() < 1e-13);
    }

    #[test]
    fn separation_loss_analytic_cases() {
        // prob = 0.5 everywhere -> ln 2 per unit stage weight.
        let probs = vec![vec![Tensor::full(&[4, 4], 0.5)]];
        let gt = vec![BinaryMask::new(Tensor::zeros(&[4, 4])).unwrap()];
        let loss = separation_loss(&probs, &gt, &[1.0]).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);

        // Two stages with weights summing: 0.693 * (r1 + r2).
        let probs2 = vec![
            vec![Tensor::full(&[4, 4], 0.5)],
            vec![Tensor::full(&[4, 4], 0.5)],
        ];
        let loss2 = separation_loss(&probs2, &gt, &[1.0, 0.5]).unwrap();
        assert!((loss2 - 1.5 * std::f64::consts::LN_2).abs() < 1e-12);

        // Single pixel, gt = 1, prob = 0.25 -> -ln 0.25.
        let probs3 = vec![vec![Tensor::scalar(0.25).reshaped(&[1, 1])]];
        let gt3 = vec![BinaryMask::new(Tensor::scalar(1.0).reshaped(&[1, 1])).unwrap()];
        let loss3 = separation_loss(&probs3, &gt3, &[1.0]).unwrap();
        assert!((loss3 + (0.25f64).ln()).abs() < 1e-12);

        // Perfect prediction floors near the clamp scale.
        let probs4 = vec![vec![Tensor::full(&[8, 8], 1.0)]];
        let gt4 = vec![BinaryMask::new(Tensor::full(&[8, 8], 1.0)).unwrap()];
        let loss4 = separation_loss(&probs4, &gt4, &[1.0]).unwrap();
        assert!(loss4 > 0.0 && loss4 < 1e-6, "{loss4}");
    }

    #[test]
    fn separation_loss_matches_scalar_reference_on_random_grids() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        for _ in 0..20 {
            let h = rng.gen_range(2..6);
            let w = rng.gen_range(2..6);
            let stages = rng.gen_range(1..4);
            let sources = rng.gen_range(1..4);
            let mut probs = Vec::new();
            for _ in 0..stages {
                let row: Vec<Tensor> = (0..sources)
                    .map(|_| {
                        Tensor::from_vec(
                            &[h, w],
                            (0..h * w).map(|_| rng.gen_range(0.001..0.999)).collect(),
                        )
                    })
                    .collect();
                probs.push(row);
            }
            let gt: Vec<BinaryMask> = (0..sources)
                .map(|_| {
                    BinaryMask::new(Tensor::from_vec(
                        &[h, w],
                        (0..h * w)
                            .map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 })
                            .collect(),
                    ))
                    .unwrap()
                })
                .collect();
            let r: Vec<f64> = (0..stages).map(|_| rng.gen_range(0.1..2.0)).collect();

            // Independent plain-loop implementation.
            let mut want = 0.0;
            for (j, row) in probs.iter().enumerate() {
                let mut stage = 0.0;
                for (p, m) in row.iter().zip(&gt) {
                    let mut acc = 0.0;
                    for (x, t) in p.data().iter().zip(m.values().data()) {
                        let x = x.clamp(1e-7, 1.0 - 1e-7);
                        acc += -(t * x.ln() + (1.0 - t) * (1.0 - x).ln());
                    }
                    stage += acc / (h * w) as f64;
                }
                want += r[j] * stage / sources as f64;
            }
            let got = separation_loss(&probs, &gt, &r).unwrap();
            assert!((got - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn choose_sources_is_deterministic_and_covers_entries() {
        let mut r1 = ChaCha20Rng::seed_from_u64(5);
        let mut r2 = ChaCha20Rng::seed_from_u64(5);
        assert_eq!(choose_sources(&mut r1, 10, 2), choose_sources(&mut r2, 10, 2));

        let mut seen = vec![false; 10];
        for draw in 0..1000 {
            let mut rng = ChaCha20Rng::seed_from_u64(derive_seed(9, draw, 0));
            for idx in choose_sources(&mut rng, 10, 2) {
                seen[idx] = true;
            }
        }
        assert!(seen.iter().all(|&s| s), "all entries drawn at least once");
    }

    #[test]
    fn derive_seed_separates_streams() {
        let a = derive_seed(7, 1, 0);
        let b = derive_seed(7, 1, 1);
        let c = derive_seed(7, 2, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, derive_seed(7, 1, 0));
    }
}
