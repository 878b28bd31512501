//! Predict pixel-level source-location masks for test clips and write the
//! mask / masked-frame panels.
//!
//!     cargo run --release --example localize_sources -- <checkpoint> <manifest> <out_dir>

use anyhow::{bail, Result};
use cofsep::checkpoint::{load_checkpoint, model_from_checkpoint};
use cofsep::manifest::{Manifest, Split};
use cofsep::sslm::{apply_location_mask, sslm_forward};
use cofsep::tensor::Tensor;
use cofsep::vision::{load_clip, resize_frames};

fn save_gray(path: &std::path::Path, t: &Tensor) -> Result<()> {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        px.0 = [(t.data()[y as usize * w + x as usize].clamp(0.0, 1.0) * 255.0) as u8];
    }
    img.save(path)?;
    Ok(())
}

fn save_rgb(path: &std::path::Path, t: &Tensor) -> Result<()> {
    let (h, w) = (t.shape()[1], t.shape()[2]);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for (x, y, px) in img.enumerate_pixels_mut() {
        for c in 0..3 {
            px.0[c] =
                (t.data()[(c * h + y as usize) * w + x as usize].clamp(0.0, 1.0) * 255.0) as u8;
        }
    }
    img.save(path)?;
    Ok(())
}

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let (Some(ckpt), Some(manifest_path), Some(out)) = (args.next(), args.next(), args.next())
    else {
        bail!("usage: localize_sources <checkpoint> <manifest> <out_dir>");
    };
    let out = std::path::PathBuf::from(out);
    std::fs::create_dir_all(&out)?;

    let model = model_from_checkpoint(&load_checkpoint(ckpt.as_ref())?)?;
    let size = model.cfg.frame_size();
    let manifest = Manifest::load(manifest_path.as_ref())?;
    for entry in manifest.require_split(Split::Test)?.iter().take(4) {
        let clip = load_clip(&entry.frames, model.cfg.fps())?;
        let key = clip.keyframe();
        let frame = resize_frames(
            &key.clone().reshaped(&[1, 3, clip.height(), clip.width()]),
            size,
            size,
        )
        .reshaped(&[3, size, size]);
        let mask = sslm_forward(&model, &frame)?;
        let masked = apply_location_mask(&frame, &mask)?;
        save_gray(&out.join(format!("{}_mask.png", entry.id)), mask.values())?;
        save_rgb(&out.join(format!("{}_masked.png", entry.id)), &masked)?;
        println!(
            "{}: mean mask activation {:.4}",
            entry.id,
            mask.mean_activation()
        );
    }
    println!("panels under {}", out.display());
    Ok(())
}
