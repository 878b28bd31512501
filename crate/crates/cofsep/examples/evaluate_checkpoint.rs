//! Score a checkpoint on the test split: per-stage SDR/SIR/SAR against the
//! ideal-mask oracle and the mixture baseline.
//!
//!     cargo run --release --example evaluate_checkpoint -- <checkpoint> <manifest> [mixtures]

use anyhow::{bail, Result};
use cofsep::checkpoint::{load_checkpoint, model_from_checkpoint};
use cofsep::evaluation::evaluate_model;
use cofsep::manifest::Manifest;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let (Some(ckpt), Some(manifest_path)) = (args.next(), args.next()) else {
        bail!("usage: evaluate_checkpoint <checkpoint> <manifest> [mixtures]");
    };
    let mixtures: usize = args.next().map(|v| v.parse()).transpose()?.unwrap_or(10);

    let model = model_from_checkpoint(&load_checkpoint(ckpt.as_ref())?)?;
    let manifest = Manifest::load(manifest_path.as_ref())?;
    let report = evaluate_model(&model, &manifest, 3, mixtures)?;
    print!("{}", report.table());
    Ok(())
}
