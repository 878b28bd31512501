//! Command-line interface. The binary is a thin shell over the library: it
//! parses arguments, assembles a `Config` (profile defaults, then config
//! file, then flags), dispatches, and maps errors to exit codes
//! (0 success, 1 runtime failure with a one-line machine-parsable message,
//! 2 usage errors).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::audio::{load_audio, save_wav, stft};
use crate::checkpoint::{load_checkpoint, model_from_checkpoint};
use crate::config::{Config, Profile};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, pairwise_matrix, write_report};
use crate::manifest::Manifest;
use crate::separation::{cof_forward, CofModel};
use crate::sslm::{apply_location_mask, sslm_forward};
use crate::synth::SynthSpec;
use crate::tensor::{write_tensor, DType, Tensor, TensorMeta};
use crate::training::{train_cof, train_sslm, TrainOptions};
use crate::vision::{load_clip, load_flows, resize_frames};

#[derive(Parser)]
#[command(
    name = "cofsep",
    about = "Visually guided sound source separation with a cascaded opponent-filter network",
    version
)]
struct Cli {
    /// Key-value config file (CLI flags override file values).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed for parameter init, sampling and evaluation.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Geometry/width profile.
    #[arg(long, global = true, value_parser = ["toy", "paper"])]
    profile: Option<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic moving-shapes corpus and its manifest.
    GenerateSynth(GenerateArgs),
    /// Train the separation cascade.
    Train(TrainArgs),
    /// Train the localization network against a frozen cascade checkpoint.
    TrainSslm(TrainSslmArgs),
    /// Evaluate a checkpoint over fixed-seed test mixtures.
    Evaluate(EvaluateArgs),
    /// Separate one mixture given its source clips.
    Separate(SeparateArgs),
    /// Predict a pixel-level source-location mask for a frame.
    Localize(LocalizeArgs),
    /// Render an evaluation CSV as a table and a bar chart.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 12)]
    videos: usize,
    #[arg(long, default_value_t = 2)]
    categories: usize,
    /// Also emit analytic ground-truth flow stacks.
    #[arg(long)]
    flows: bool,
    /// Append a motionless negative-control category.
    #[arg(long)]
    static_control: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    sources: Option<usize>,
    #[arg(long)]
    iters: Option<u64>,
    /// Resume from a checkpoint (its config snapshot wins).
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Load matching vision/localization weights before training.
    #[arg(long)]
    init_weights: Option<PathBuf>,
}

#[derive(Args)]
struct TrainSslmArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    iters: Option<u64>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    mixtures: Option<usize>,
    /// Keep only rows for stages up to this index (oracle/mix rows stay).
    #[arg(long)]
    stages: Option<usize>,
    /// Also write the pairwise category SDR matrix.
    #[arg(long)]
    pairwise: bool,
}

#[derive(Args)]
struct SeparateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Mixture WAV (cropped/padded to the profile clip length).
    #[arg(long)]
    mixture: PathBuf,
    /// One clip per source: a PNG frame directory or a packed tensor file.
    #[arg(long, num_args = 1.., required = true)]
    clips: Vec<PathBuf>,
    /// Optional per-clip flow tensors (same order as --clips).
    #[arg(long, num_args = 0..)]
    flows: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A single PNG frame, a frame directory, or a packed clip (keyframe used).
    #[arg(long)]
    frame: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Evaluation rows CSV produced by `evaluate`.
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Entry point used by the binary; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help/version are successful exits; everything else is usage.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: kind={} msg={}", e.kind(), e);
            1
        }
    }
}

fn build_config(cli: &Cli) -> Result<Config> {
    let mut cfg = Config::for_profile(Profile::Toy);
    if let Some(file) = &cli.config {
        cfg = Config::load_file(file, cfg)?;
    }
    if let Some(p) = &cli.profile {
        let profile: Profile = p.parse()?;
        let text = format!("profile = {profile}\n");
        cfg.apply_kv(&text, "<cli>")?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_model(path: &Path) -> Result<CofModel> {
    let ckpt = load_checkpoint(path)?;
    model_from_checkpoint(&ckpt)
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli)?;
    match &cli.cmd {
        Cmd::GenerateSynth(a) => {
            let spec = SynthSpec {
                n_videos: a.videos,
                categories: a.categories,
                seed: cfg.seed,
                with_flows: a.flows,
                include_static: a.static_control,
            };
            let manifest = spec.generate(&a.out)?;
            println!(
                "wrote {} videos ({} categories) under {}",
                manifest.len(),
                spec.total_categories(),
                a.out.display()
            );
            println!("manifest: {}", a.out.join("manifest.jsonl").display());
            Ok(())
        }
        Cmd::Train(a) => {
            let mut cfg = cfg;
            if let Some(stages) = a.stages {
                cfg = cfg.with_stages(stages);
            }
            if let Some(sources) = a.sources {
                cfg.sources = sources;
            }
            if let Some(iters) = a.iters {
                cfg.total_iters = iters;
            }
            cfg.validate()?;
            let manifest = Manifest::load(&a.manifest)?;
            let opts = TrainOptions {
                resume: a.resume.clone(),
                init_weights: a.init_weights.clone(),
            };
            let path = train_cof(&cfg, &manifest, &a.out, &opts)?;
            println!("final checkpoint: {}", path.display());
            Ok(())
        }
        Cmd::TrainSslm(a) => {
            let mut cfg = cfg;
            if let Some(lambda) = a.lambda {
                cfg.sslm_lambda = lambda;
            }
            if let Some(iters) = a.iters {
                cfg.sslm_iters = iters;
            }
            let manifest = Manifest::load(&a.manifest)?;
            let path = train_sslm(&cfg, &a.checkpoint, &manifest, &a.out)?;
            println!("final checkpoint: {}", path.display());
            Ok(())
        }
        Cmd::Evaluate(a) => {
            let model = load_model(&a.checkpoint)?;
            let manifest = Manifest::load(&a.manifest)?;
            let mixtures = a.mixtures.unwrap_or(cfg.eval_mixtures);
            let mut report = evaluate_model(&model, &manifest, cfg.seed, mixtures)?;
            if let Some(max_stage) = a.stages {
                report.rows.retain(|r| match r.stage.parse::<usize>() {
                    Ok(j) => j <= max_stage,
                    Err(_) => true,
                });
            }
            write_report(&report, &a.out)?;
            print!("{}", report.table());
            if a.pairwise {
                let pm = pairwise_matrix(&model, &manifest, cfg.seed, 4)?;
                let path = a.out.join("pairwise_sdr.csv");
                std::fs::write(&path, pm.to_csv()).map_err(|e| Error::io(&path, e))?;
                println!("pairwise matrix: {}", path.display());
            }
            println!("report written under {}", a.out.display());
            Ok(())
        }
        Cmd::Separate(a) => separate(&cfg, a),
        Cmd::Localize(a) => localize(a),
        Cmd::Report(a) => report(a),
    }
}

fn separate(_cfg: &Config, a: &SeparateArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let cfg = model.cfg.clone();
    if !a.flows.is_empty() && a.flows.len() != a.clips.len() {
        return Err(Error::invalid(format!(
            "{} flow paths for {} clips",
            a.flows.len(),
            a.clips.len()
        )));
    }
    let audio = load_audio(&a.mixture, cfg.sample_rate())?;
    let clip_samples = cfg.clip_samples();
    let cropped = audio.crop(0, clip_samples);
    let spec = stft(&cropped, cfg.window_size(), cfg.hop())?;

    let mut clips = Vec::with_capacity(a.clips.len());
    for (i, path) in a.clips.iter().enumerate() {
        let frames = load_clip(path, cfg.fps())?;
        let flows = match a.flows.get(i) {
            Some(p) => Some(load_flows(p)?),
            None => None,
        };
        clips.push((frames, flows));
    }
    let out = cof_forward(&model, &spec, &clips)?;

    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    for stage in &out.stages {
        let dir = a.out.join(format!("stage{}", stage.stage));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let waves = out.waveforms(stage.stage, &spec, clip_samples)?;
        for (i, w) in waves.iter().enumerate() {
            save_wav(&dir.join(format!("source{i}.wav")), w)?;
            save_mask_png(
                &dir.join(format!("source{i}_mask.png")),
                stage.binary[i].values(),
            )?;
            let mut meta = TensorMeta::new();
            meta.insert("sample_rate".into(), cfg.sample_rate().to_string());
            meta.insert("window_size".into(), cfg.window_size().to_string());
            meta.insert("hop".into(), cfg.hop().to_string());
            write_tensor(
                &dir.join(format!("source{i}_mask.cot")),
                stage.binary[i].values(),
                DType::U8,
                &meta,
            )?;
            write_tensor(
                &dir.join(format!("source{i}_spectrogram.cot")),
                &stage.spectrograms[i],
                DType::F32,
                &meta,
            )?;
        }
    }
    println!(
        "wrote {} stages x {} sources under {}",
        out.stages.len(),
        cfg.sources,
        a.out.display()
    );
    Ok(())
}

fn save_mask_png(path: &Path, values: &Tensor) -> Result<()> {
    let (h, w) = (values.shape()[0], values.shape()[1]);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        let v = values.data()[y as usize * w + x as usize];
        px.0 = [(v.clamp(0.0, 1.0) * 255.0).round() as u8];
    }
    img.save(path)
        .map_err(|e| Error::format(path, format!("png encode: {e}")))
}

fn save_rgb_png(path: &Path, frame: &Tensor) -> Result<()> {
    let (h, w) = (frame.shape()[1], frame.shape()[2]);
    let plane = h * w;
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for c in 0..3 {
            let v = frame.data()[c * plane + y as usize * w + x as usize];
            px.0[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    img.save(path)
        .map_err(|e| Error::format(path, format!("png encode: {e}")))
}

fn localize(a: &LocalizeArgs) -> Result<()> {
    let model = load_model(&a.checkpoint)?;
    let size = model.cfg.frame_size();
    let frame = if a.frame.is_dir() || a.frame.extension().map(|e| e == "cot").unwrap_or(false) {
        let clip = load_clip(&a.frame, model.cfg.fps())?;
        clip.keyframe()
    } else {
        // Single PNG.
        let img = image::open(&a.frame)
            .map_err(|e| Error::format(&a.frame, format!("decode: {e}")))?
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0f64; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[c * h * w + y as usize * w + x as usize] = px.0[c] as f64 / 255.0;
            }
        }
        Tensor::from_vec(&[3, h, w], data)
    };
    let resized = resize_frames(
        &frame.clone().reshaped(&[1, 3, frame.shape()[1], frame.shape()[2]]),
        size,
        size,
    )
    .reshaped(&[3, size, size]);
    let mask = sslm_forward(&model, &resized)?;
    let masked = apply_location_mask(&resized, &mask)?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    save_mask_png(&a.out.join("location_mask.png"), mask.values())?;
    save_rgb_png(&a.out.join("masked_frame.png"), &masked)?;
    println!(
        "mask mean activation {:.4}; wrote location_mask.png and masked_frame.png under {}",
        mask.mean_activation(),
        a.out.display()
    );
    Ok(())
}

fn report(a: &ReportArgs) -> Result<()> {
    let text = std::fs::read_to_string(&a.csv).map_err(|e| Error::io(&a.csv, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format(&a.csv, "empty csv"))?;
    let cols: Vec<&str> = header.split(',').collect();
    let stage_col = cols
        .iter()
        .position(|c| *c == "stage")
        .ok_or_else(|| Error::format(&a.csv, "missing 'stage' column"))?;
    let sdr_col = cols
        .iter()
        .position(|c| *c == "sdr")
        .ok_or_else(|| Error::format(&a.csv, "missing 'sdr' column"))?;
    let mut acc: std::collections::BTreeMap<String, (f64, usize)> = Default::default();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::format(
                &a.csv,
                format!("line {}: expected {} fields", lineno + 2, cols.len()),
            ));
        }
        let sdr: f64 = fields[sdr_col]
            .parse()
            .map_err(|_| Error::format(&a.csv, format!("line {}: bad sdr", lineno + 2)))?;
        let e = acc.entry(fields[stage_col].to_string()).or_insert((0.0, 0));
        e.0 += sdr;
        e.1 += 1;
    }
    println!("{:<10} {:>10} {:>8}", "stage", "mean SDR", "rows");
    for (stage, (sum, n)) in &acc {
        println!("{:<10} {:>10.2} {:>8}", stage, sum / *n as f64, n);
    }
    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let chart = out.join("sdr_chart.png");
        let means: Vec<(String, f64)> = acc
            .iter()
            .map(|(k, (sum, n))| (k.clone(), sum / *n as f64))
            .collect();
        bar_chart(&chart, &means)?;
        println!("chart: {}", chart.display());
    }
    Ok(())
}

/// Minimal bar chart: per-stage mean SDR, zero line marked.
fn bar_chart(path: &Path, means: &[(String, f64)]) -> Result<()> {
    let (w, h) = (80 * means.len().max(1) as u32 + 40, 240u32);
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([250, 250, 250]));
    let lo = means.iter().map(|(_, v)| *v).fold(0.0f64, f64::min) - 1.0;
    let hi = means.iter().map(|(_, v)| *v).fold(0.0f64, f64::max) + 1.0;
    let to_y = |v: f64| -> u32 {
        let f = (v - lo) / (hi - lo);
        ((1.0 - f) * (h as f64 - 20.0) + 10.0) as u32
    };
    let zero_y = to_y(0.0);
    for x in 0..w {
        img.put_pixel(x, zero_y.min(h - 1), image::Rgb([120, 120, 120]));
    }
    for (i, (_, v)) in means.iter().enumerate() {
        let x0 = 30 + i as u32 * 80;
        let y = to_y(*v);
        let (top, bottom) = if y < zero_y { (y, zero_y) } else { (zero_y, y) };
        for x in x0..x0 + 50 {
            for yy in top..=bottom {
                img.put_pixel(x.min(w - 1), yy.min(h - 1), image::Rgb([66, 110, 180]));
            }
        }
    }
    img.save(path)
        .map_err(|e| Error::format(path, format!("png encode: {e}")))
}
