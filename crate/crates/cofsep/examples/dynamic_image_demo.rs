//! Rank-pool a clip into a dynamic image and save it next to the keyframe,
//! to visualize how motion is summarized into one RGB image.
//!
//!     cargo run --example dynamic_image_demo -- <frame_dir_or_packed_clip> <out_dir>

use anyhow::{bail, Result};
use cofsep::tensor::Tensor;
use cofsep::vision::{dynamic_image, load_clip};

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
    let (Some(clip_path), Some(out)) = (args.next(), args.next()) else {
        bail!("usage: dynamic_image_demo <frame_dir> <out_dir>");
    };
    let out = std::path::PathBuf::from(out);
    std::fs::create_dir_all(&out)?;

    let clip = load_clip(clip_path.as_ref(), 8)?;
    let dyn_img = dynamic_image(&clip)?;
    save_rgb(&out.join("dynamic_image.png"), &dyn_img)?;
    save_rgb(&out.join("keyframe.png"), &clip.keyframe())?;
    println!(
        "{} frames -> dynamic image written under {}",
        clip.len(),
        out.display()
    );
    Ok(())
}
