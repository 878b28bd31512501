//! Separation quality metrics (SDR / SIR / SAR via least-squares projection
//! onto time-shifted references), test-set evaluation reports, and the
//! pairwise category matrix.

use std::collections::BTreeMap;
use std::path::Path;

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::audio::{reconstruct, Waveform};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::manifest::{Manifest, Split};
use crate::separation::CofModel;
use crate::training::{derive_seed, sample_example, ClipCache, TrainingExample};

/// Metric sentinel for mathematically infinite ratios, keeping CSVs numeric.
pub const DB_CAP: f64 = 1e9;

/// One estimate's scores in dB. Higher is better for all three.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BssScores {
    pub sdr: f64,
    pub sir: f64,
    pub sar: f64,
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if num <= 1e-300 {
        return -DB_CAP;
    }
    if den <= 1e-20 * num {
        return DB_CAP;
    }
    10.0 * (num / den).log10()
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// Full cross-correlation `r[d] = sum_u a[u] * b[u + d]` for
/// `d in -(l-1) ..= l-1`, returned as a lookup closure input. Index `d`
/// through [`Correlations::get`].
struct Correlations {
    values: Vec<f64>,
    max_lag: isize,
}

impl Correlations {
    fn get(&self, d: isize) -> f64 {
        debug_assert!(d.abs() <= self.max_lag);
        self.values[(d + self.max_lag) as usize]
    }
}

fn cross_correlation(a: &[f64], b: &[f64], max_lag: usize, planner: &mut FftPlanner<f64>) -> Correlations {
    let n = a.len() + max_lag + 1;
    let m = n.next_power_of_two();
    let fft = planner.plan_fft_forward(m);
    let ifft = planner.plan_fft_inverse(m);
    let mut fa: Vec<Complex64> = a
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(m)
        .collect();
    let mut fb: Vec<Complex64> = b
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(m)
        .collect();
    fft.process(&mut fa);
    fft.process(&mut fb);
    for (x, y) in fa.iter_mut().zip(&fb) {
        *x = x.conj() * y;
    }
    ifft.process(&mut fa);
    let scale = 1.0 / m as f64;
    let max_lag = max_lag as isize;
    let values = (-max_lag..=max_lag)
        .map(|d| {
            let idx = if d >= 0 { d as usize } else { m - (-d) as usize };
            fa[idx].re * scale
        })
        .collect();
    Correlations { values, max_lag }
}

/// Dense lower Cholesky with escalating ridge jitter. Emits a warning when
/// the baseline conditioning is insufficient (rank-deficient references).
fn cholesky_with_jitter(g: &[f64], n: usize) -> Vec<f64> {
    let mean_diag = (0..n).map(|i| g[i * n + i]).sum::<f64>() / n as f64;
    let mut jitter = 1e-12 * mean_diag.max(1e-300);
    for attempt in 0..8 {
        if attempt > 0 {
            eprintln!(
                "warning: reference Gram matrix is rank-deficient; regularizing with jitter {jitter:.3e}"
            );
        }
        let mut l = vec![0.0f64; n * n];
        let mut ok = true;
        'outer: for i in 0..n {
            for j in 0..=i {
                let mut sum = g[i * n + j];
                if i == j {
                    sum += jitter;
                }
                for k in 0..j {
                    sum -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if sum <= 0.0 {
                        ok = false;
                        break 'outer;
                    }
                    l[i * n + i] = sum.sqrt();
                } else {
                    l[i * n + j] = sum / l[j * n + j];
                }
            }
        }
        if ok {
            return l;
        }
        jitter *= 1e3;
    }
    panic!("could not factor Gram matrix even with jitter");
}

fn chol_solve(l: &[f64], n: usize, rhs: &[f64]) -> Vec<f64> {
    let mut y = rhs.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[i * n + k] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    for i in (0..n).rev() {
        for k in i + 1..n {
            y[i] -= l[k * n + i] * y[k];
        }
        y[i] /= l[i * n + i];
    }
    y
}

/// Precomputed projection machinery for one set of references.
pub struct BssEvaluator {
    refs: Vec<Vec<f64>>,
    filter_len: usize,
    padded_len: usize,
    chol_all: Vec<f64>,
    chol_own: Vec<Vec<f64>>,
    planner: FftPlanner<f64>,
}

impl BssEvaluator {
    pub fn new(references: &[Waveform], filter_len: usize) -> Result<Self> {
        if references.is_empty() {
            return Err(Error::invalid("need at least one reference"));
        }
        if filter_len == 0 {
            return Err(Error::invalid("filter_len must be >= 1"));
        }
        let len = references[0].len();
        let rate = references[0].sample_rate();
        for r in references {
            if r.len() != len || r.sample_rate() != rate {
                return Err(Error::invalid("references must share length and rate"));
            }
        }
        let n = references.len();
        let l = filter_len;
        let refs: Vec<Vec<f64>> = references.iter().map(|r| r.samples().to_vec()).collect();
        let mut planner = FftPlanner::new();

        // Gram of all shifted references: block (j,k) is Toeplitz in the lag
        // difference, taken from one cross-correlation per pair.
        let dim = n * l;
        let mut gram = vec![0.0f64; dim * dim];
        for j in 0..n {
            for k in 0..n {
                let corr = cross_correlation(&refs[j], &refs[k], l, &mut planner);
                for a in 0..l {
                    for b in 0..l {
                        // <s_j shifted by a, s_k shifted by b> = r_jk[a - b]
                        gram[(j * l + a) * dim + (k * l + b)] = corr.get(a as isize - b as isize);
                    }
                }
            }
        }
        let chol_all = cholesky_with_jitter(&gram, dim);
        let mut chol_own = Vec::with_capacity(n);
        for j in 0..n {
            let mut block = vec![0.0f64; l * l];
            for a in 0..l {
                for b in 0..l {
                    block[a * l + b] = gram[(j * l + a) * dim + (j * l + b)];
                }
            }
            chol_own.push(cholesky_with_jitter(&block, l));
        }
        Ok(BssEvaluator {
            refs,
            filter_len,
            padded_len: len + l - 1,
            chol_all,
            chol_own,
            planner,
        })
    }

    fn filter_sum(&self, coeffs: &[f64], sources: &[usize]) -> Vec<f64> {
        let l = self.filter_len;
        let mut out = vec![0.0f64; self.padded_len];
        for (slot, &j) in sources.iter().enumerate() {
            let x = &coeffs[slot * l..(slot + 1) * l];
            let s = &self.refs[j];
            for (tau, &c) in x.iter().enumerate() {
                if c == 0.0 {
                    continue;
                }
                for (t, &sv) in s.iter().enumerate() {
                    out[t + tau] += c * sv;
                }
            }
        }
        out
    }

    /// Decompose one estimate matched to reference `target`.
    pub fn decompose(&mut self, estimate: &Waveform, target: usize) -> BssDecomposition {
        let n = self.refs.len();
        let l = self.filter_len;
        let est = estimate.samples();
        // Correlation of each reference with the estimate at lags 0..l-1.
        let mut rhs_all = vec![0.0f64; n * l];
        for j in 0..n {
            let corr = cross_correlation(&self.refs[j], est, l, &mut self.planner);
            for a in 0..l {
                // <est, s_j shifted by a> = sum_u s_j[u] est[u + a]
                rhs_all[j * l + a] = corr.get(a as isize);
            }
        }
        let coeff_all = chol_solve(&self.chol_all, n * l, &rhs_all);
        let p_all = self.filter_sum(&coeff_all, &(0..n).collect::<Vec<_>>());

        let rhs_own = &rhs_all[target * l..(target + 1) * l];
        let coeff_own = chol_solve(&self.chol_own[target], l, rhs_own);
        let s_target = self.filter_sum(&coeff_own, &[target]);

        let mut padded_est = vec![0.0f64; self.padded_len];
        padded_est[..est.len()].copy_from_slice(est);
        let e_interf: Vec<f64> = p_all
            .iter()
            .zip(&s_target)
            .map(|(a, b)| a - b)
            .collect();
        let e_artif: Vec<f64> = padded_est
            .iter()
            .zip(&p_all)
            .map(|(a, b)| a - b)
            .collect();
        BssDecomposition {
            s_target,
            e_interf,
            e_artif,
            estimate_padded: padded_est,
        }
    }
}

/// Exact decomposition `estimate = s_target + e_interf + e_artif` over the
/// padded support.
pub struct BssDecomposition {
    pub s_target: Vec<f64>,
    pub e_interf: Vec<f64>,
    pub e_artif: Vec<f64>,
    pub estimate_padded: Vec<f64>,
}

impl BssDecomposition {
    pub fn scores(&self) -> BssScores {
        let target = energy(&self.s_target);
        let interf = energy(&self.e_interf);
        let artif = energy(&self.e_artif);
        let distortion: f64 = self
            .e_interf
            .iter()
            .zip(&self.e_artif)
            .map(|(a, b)| (a + b) * (a + b))
            .sum();
        let kept: f64 = self
            .s_target
            .iter()
            .zip(&self.e_interf)
            .map(|(a, b)| (a + b) * (a + b))
            .sum();
        BssScores {
            sdr: ratio_db(target, distortion),
            sir: ratio_db(target, interf),
            sar: ratio_db(kept, artif),
        }
    }
}

/// Score each estimate against its same-indexed reference (sources are
/// assigned by video identity, so no permutation search).
pub fn bss_eval(
    estimates: &[Waveform],
    references: &[Waveform],
    filter_len: usize,
) -> Result<Vec<BssScores>> {
    if estimates.len() != references.len() {
        return Err(Error::invalid(format!(
            "{} estimates vs {} references",
            estimates.len(),
            references.len()
        )));
    }
    for (e, r) in estimates.iter().zip(references) {
        if e.len() != r.len() || e.sample_rate() != r.sample_rate() {
            return Err(Error::invalid(
                "estimates and references must share length and rate",
            ));
        }
    }
    let mut evaluator = BssEvaluator::new(references, filter_len)?;
    Ok(estimates
        .iter()
        .enumerate()
        .map(|(i, e)| evaluator.decompose(e, i).scores())
        .collect())
}

// ---- evaluation reports ----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalRow {
    pub mixture_id: String,
    pub source_id: String,
    /// `"1"`, `"2"`, ... for cascade stages; `"oracle"` for the ideal binary
    /// mask; `"mix"` for the mixture-as-estimate baseline.
    pub stage: String,
    pub scores: BssScores,
}

#[derive(Debug, Clone, Copy)]
pub struct StageSummary {
    pub mean_sdr: f64,
    pub mean_sir: f64,
    pub mean_sar: f64,
    pub count: usize,
}

#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn summary(&self) -> BTreeMap<String, StageSummary> {
        let mut acc: BTreeMap<String, (f64, f64, f64, usize)> = BTreeMap::new();
        for row in &self.rows {
            let e = acc.entry(row.stage.clone()).or_insert((0.0, 0.0, 0.0, 0));
            e.0 += row.scores.sdr;
            e.1 += row.scores.sir;
            e.2 += row.scores.sar;
            e.3 += 1;
        }
        acc.into_iter()
            .map(|(k, (sdr, sir, sar, n))| {
                (
                    k,
                    StageSummary {
                        mean_sdr: sdr / n as f64,
                        mean_sir: sir / n as f64,
                        mean_sar: sar / n as f64,
                        count: n,
                    },
                )
            })
            .collect()
    }

    pub fn mean_sdr(&self, stage: &str) -> Option<f64> {
        self.summary().get(stage).map(|s| s.mean_sdr)
    }

    /// CSV schema: mixture_id, source_id, stage, sdr, sir, sar.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("mixture_id,source_id,stage,sdr,sir,sar\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.4},{:.4},{:.4}\n",
                r.mixture_id, r.source_id, r.stage, r.scores.sdr, r.scores.sir, r.scores.sar
            ));
        }
        out
    }

    pub fn summary_json(&self) -> String {
        let summary = self.summary();
        let mut obj = serde_json::Map::new();
        for (stage, s) in summary {
            let mut inner = serde_json::Map::new();
            inner.insert("mean_sdr".into(), rounded(s.mean_sdr));
            inner.insert("mean_sir".into(), rounded(s.mean_sir));
            inner.insert("mean_sar".into(), rounded(s.mean_sar));
            inner.insert("count".into(), serde_json::json!(s.count));
            obj.insert(stage, serde_json::Value::Object(inner));
        }
        serde_json::to_string_pretty(&serde_json::Value::Object(obj)).expect("serializes")
    }

    /// Aligned text table of per-stage means.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>10} {:>10} {:>10} {:>8}\n",
            "stage", "SDR", "SIR", "SAR", "count"
        ));
        for (stage, s) in self.summary() {
            out.push_str(&format!(
                "{:<10} {:>10.2} {:>10.2} {:>10.2} {:>8}\n",
                stage, s.mean_sdr, s.mean_sir, s.mean_sar, s.count
            ));
        }
        out
    }
}

fn rounded(v: f64) -> serde_json::Value {
    serde_json::json!((v * 1e4).round() / 1e4)
}

/// Build one deterministic evaluation example from the test split.
pub fn eval_example(
    manifest: &Manifest,
    cfg: &Config,
    cache: &ClipCache,
    seed: u64,
    index: u64,
) -> Result<TrainingExample> {
    let entries = manifest.require_split(Split::Test)?;
    sample_example(
        &entries,
        cfg,
        cache,
        derive_seed(seed, 0xE7A1 + index, 0),
        false,
    )
}

/// Evaluate a model over fixed-seed test mixtures. Every mixture produces
/// per-source rows for each cascade stage, the ideal-mask oracle, and the
/// mixture-as-estimate baseline.
pub fn evaluate_model(
    model: &CofModel,
    manifest: &Manifest,
    seed: u64,
    mixtures: usize,
) -> Result<EvalReport> {
    evaluate_model_opts(model, manifest, seed, mixtures, false)
}

/// As [`evaluate_model`]; when `mask_inputs` is set, every clip is first
/// passed through the localization network and its frames (and flows) are
/// multiplied by the predicted keyframe mask, measuring how much separation
/// quality the masked pixels preserve.
pub fn evaluate_model_opts(
    model: &CofModel,
    manifest: &Manifest,
    seed: u64,
    mixtures: usize,
    mask_inputs: bool,
) -> Result<EvalReport> {
    let cfg = &model.cfg;
    let cache = ClipCache::new();
    let mut rows = Vec::new();
    for mix_idx in 0..mixtures {
        let mut ex = eval_example(manifest, cfg, &cache, seed, mix_idx as u64)?;
        if mask_inputs {
            for clip in &mut ex.clips {
                let mask = crate::sslm::sslm_forward(model, &clip.keyframe())?;
                let s = clip.frames.shape().to_vec();
                let plane = s[2] * s[3];
                for tc in 0..s[0] * s[1] {
                    for (v, m) in clip.frames.data_mut()[tc * plane..(tc + 1) * plane]
                        .iter_mut()
                        .zip(mask.values().data())
                    {
                        *v *= m;
                    }
                }
                if let Some(flows) = &mut clip.flows {
                    let fs = flows.shape().to_vec();
                    for tc in 0..fs[0] * fs[1] {
                        for (v, m) in flows.data_mut()[tc * plane..(tc + 1) * plane]
                            .iter_mut()
                            .zip(mask.values().data())
                        {
                            *v *= m;
                        }
                    }
                }
            }
        }
        rows.extend(evaluate_example(model, &ex, &format!("mix_{mix_idx:03}"))?);
    }
    Ok(EvalReport { rows })
}

/// Rows for one already-sampled example.
pub fn evaluate_example(
    model: &CofModel,
    ex: &TrainingExample,
    mixture_id: &str,
) -> Result<Vec<EvalRow>> {
    let cfg = &model.cfg;
    let n = cfg.sources;
    let length = cfg.clip_samples();
    let filter_len = cfg.bss_filter_len;
    let mut evaluator = BssEvaluator::new(&ex.sources, filter_len)?;
    let mut rows = Vec::new();
    let mut push = |stage: &str, estimates: &[Waveform], rows: &mut Vec<EvalRow>| {
        for (i, est) in estimates.iter().enumerate() {
            let scores = evaluator.decompose(est, i).scores();
            rows.push(EvalRow {
                mixture_id: mixture_id.to_string(),
                source_id: ex.source_ids[i].clone(),
                stage: stage.to_string(),
                scores,
            });
        }
    };

    let out = model.infer(&ex.mix_warped, &ex.clips)?;
    for stage in 1..=cfg.stages {
        let estimates = out.waveforms(stage, &ex.mix_spec, length)?;
        push(&stage.to_string(), &estimates, &mut rows);
    }

    // Ideal-binary-mask oracle on this crop.
    let oracle: Vec<Waveform> = ex
        .gt_masks
        .iter()
        .map(|m| reconstruct(m, ex.mix_warped.warp(), &ex.mix_spec, length))
        .collect::<Result<_>>()?;
    push("oracle", &oracle, &mut rows);

    // Mixture as the estimate for every source.
    let mixture = crate::audio::mix(&ex.sources)?;
    let mix_estimates = vec![mixture; n];
    push("mix", &mix_estimates, &mut rows);

    Ok(rows)
}

// ---- pairwise category matrix ----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PairwiseMatrix {
    pub categories: Vec<String>,
    /// Row-major `categories x categories` mean final-stage SDR; `None`
    /// marks pairs with no evaluable mixtures.
    pub cells: Vec<Option<f64>>,
}

impl PairwiseMatrix {
    pub fn cell(&self, i: usize, j: usize) -> Option<f64> {
        self.cells[i * self.categories.len() + j]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("category");
        for c in &self.categories {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (i, c) in self.categories.iter().enumerate() {
            out.push_str(c);
            for j in 0..self.categories.len() {
                out.push(',');
                match self.cell(i, j) {
                    Some(v) => out.push_str(&format!("{v:.4}")),
                    None => out.push_str("missing"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Mean final-stage SDR for mixtures of one source from category `i` and one
/// from category `j`, over the test split.
pub fn pairwise_matrix(
    model: &CofModel,
    manifest: &Manifest,
    seed: u64,
    mixtures_per_pair: usize,
) -> Result<PairwiseMatrix> {
    let cfg = &model.cfg;
    if cfg.sources != 2 {
        return Err(Error::invalid(
            "pairwise matrix is defined for two-source models",
        ));
    }
    let categories = manifest.categories();
    let test = manifest.require_split(Split::Test)?;
    let cache = ClipCache::new();
    let c = categories.len();
    let mut cells = vec![None; c * c];
    let final_stage = cfg.stages.to_string();
    for i in 0..c {
        for j in i..c {
            let from_i: Vec<_> = test
                .iter()
                .filter(|e| e.category == categories[i])
                .collect();
            let from_j: Vec<_> = test
                .iter()
                .filter(|e| e.category == categories[j])
                .collect();
            let mut pairs = Vec::new();
            for a in &from_i {
                for b in &from_j {
                    if a.id != b.id {
                        pairs.push(((**a).clone(), (**b).clone()));
                    }
                }
            }
            if pairs.is_empty() {
                continue;
            }
            let take = pairs.len().min(mixtures_per_pair.max(1));
            let mut sdrs = Vec::new();
            for (p_idx, (a, b)) in pairs.into_iter().take(take).enumerate() {
                let pair_entries: Vec<&crate::manifest::ManifestEntry> = vec![&a, &b];
                let ex = sample_example(
                    &pair_entries,
                    cfg,
                    &cache,
                    derive_seed(seed, 0xFA17 + (i * c + j) as u64, p_idx as u64),
                    false,
                )?;
                let rows = evaluate_example(model, &ex, "pair")?;
                for row in rows.iter().filter(|r| r.stage == final_stage) {
                    sdrs.push(row.scores.sdr);
                }
            }
            if !sdrs.is_empty() {
                let mean = sdrs.iter().sum::<f64>() / sdrs.len() as f64;
                cells[i * c + j] = Some(mean);
                cells[j * c + i] = Some(mean);
            }
        }
    }
    Ok(PairwiseMatrix { categories, cells })
}

/// Write the three report artifacts under `out_dir`.
pub fn write_report(report: &EvalReport, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv = out_dir.join("eval_rows.csv");
    std::fs::write(&csv, report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    let json = out_dir.join("eval_summary.json");
    std::fs::write(&json, report.summary_json()).map_err(|e| Error::io(&json, e))?;
    let table = out_dir.join("eval_table.txt");
    std::fs::write(&table, report.table()).map_err(|e| Error::io(&table, e))?;
    Ok(())
}
