//! Generate the synthetic audio-visual corpus: oscillating colored shapes,
//! each emitting a speed-modulated tone, with train/val/test splits.
//!
//!     cargo run --example generate_corpus -- <out_dir> [n_videos] [categories] [seed]

use anyhow::Result;
use cofsep::synth::SynthSpec;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let out = std::path::PathBuf::from(args.next().unwrap_or_else(|| "corpus".into()));
    let n_videos: usize = args.next().map(|v| v.parse()).transpose()?.unwrap_or(24);
    let categories: usize = args.next().map(|v| v.parse()).transpose()?.unwrap_or(4);
    let seed: u64 = args.next().map(|v| v.parse()).transpose()?.unwrap_or(5);

    let spec = SynthSpec {
        n_videos,
        categories,
        seed,
        with_flows: true,
        include_static: false,
    };
    let manifest = spec.generate(&out)?;
    println!(
        "wrote {} videos across {} categories under {}",
        manifest.len(),
        manifest.categories().len(),
        out.display()
    );
    for split in [
        cofsep::manifest::Split::Train,
        cofsep::manifest::Split::Val,
        cofsep::manifest::Split::Test,
    ] {
        println!("  {split}: {} clips", manifest.split(split).len());
    }
    Ok(())
}
