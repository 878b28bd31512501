//! Mix two corpus clips and separate them with a trained checkpoint,
//! writing per-stage estimates and masks.
//!
//!     cargo run --release --example separate_mixture -- <checkpoint> <corpus_manifest> <out_dir>

use anyhow::{bail, Result};
use cofsep::audio::{load_audio, mix, save_wav, stft};
use cofsep::checkpoint::{load_checkpoint, model_from_checkpoint};
use cofsep::manifest::{Manifest, Split};
use cofsep::separation::cof_forward;
use cofsep::vision::load_clip;

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let (Some(ckpt), Some(manifest_path), Some(out)) = (args.next(), args.next(), args.next())
    else {
        bail!("usage: separate_mixture <checkpoint> <manifest> <out_dir>");
    };
    let out = std::path::PathBuf::from(out);

    let model = model_from_checkpoint(&load_checkpoint(ckpt.as_ref())?)?;
    let cfg = &model.cfg;
    let manifest = Manifest::load(manifest_path.as_ref())?;
    let test = manifest.require_split(Split::Test)?;
    if test.len() < 2 {
        bail!("need at least two test clips");
    }

    let sources: Vec<_> = test[..2]
        .iter()
        .map(|e| load_audio(&e.audio, cfg.sample_rate()).map(|w| w.crop(0, cfg.clip_samples())))
        .collect::<cofsep::error::Result<_>>()?;
    let mixture = mix(&sources)?;
    let spec = stft(&mixture, cfg.window_size(), cfg.hop())?;
    let clips: Vec<_> = test[..2]
        .iter()
        .map(|e| load_clip(&e.frames, cfg.fps()).map(|f| (f, None)))
        .collect::<cofsep::error::Result<_>>()?;

    let result = cof_forward(&model, &spec, &clips)?;
    std::fs::create_dir_all(&out)?;
    save_wav(&out.join("mixture.wav"), &mixture)?;
    for stage in &result.stages {
        let waves = result.waveforms(stage.stage, &spec, cfg.clip_samples())?;
        for (i, w) in waves.iter().enumerate() {
            let path = out.join(format!("stage{}_source{}.wav", stage.stage, i));
            save_wav(&path, w)?;
            println!(
                "stage {} source {} ({}): mask density {:.3}",
                stage.stage,
                i,
                test[i].id,
                stage.binary[i].density()
            );
        }
    }
    println!("estimates under {}", out.display());
    Ok(())
}
