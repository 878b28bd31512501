//! End-to-end desk-scale training: generate a corpus if needed, train the
//! two-stage cascade, and print where the loss log and checkpoint landed.
//!
//!     cargo run --release --example train_toy -- <work_dir> [iters]

use anyhow::Result;
use cofsep::config::{Config, Profile};
use cofsep::manifest::Manifest;
use cofsep::synth::SynthSpec;
use cofsep::training::{train_cof, TrainOptions};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let work = std::path::PathBuf::from(args.next().unwrap_or_else(|| "toy_run".into()));
    let iters: u64 = args.next().map(|v| v.parse()).transpose()?.unwrap_or(150);

    let corpus = work.join("corpus");
    let manifest_path = corpus.join("manifest.jsonl");
    let manifest = if manifest_path.exists() {
        Manifest::load(&manifest_path)?
    } else {
        SynthSpec {
            n_videos: 24,
            categories: 4,
            seed: 5,
            with_flows: false,
            include_static: false,
        }
        .generate(&corpus)?
    };

    let mut cfg = Config::for_profile(Profile::Toy);
    cfg.seed = 7;
    cfg.total_iters = iters;
    let ckpt = train_cof(&cfg, &manifest, &work.join("train"), &TrainOptions::default())?;
    println!("loss log: {}", work.join("train/loss_log.csv").display());
    println!("checkpoint: {}", ckpt.display());
    Ok(())
}
