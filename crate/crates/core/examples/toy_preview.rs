//! Writes the toy scene and a few style images to a directory for inspection.

use std::path::PathBuf;

use conrf_core::synthetic::{toy_scene, write_toy_scene, write_toy_styles, ToySceneConfig};

fn main() -> conrf_core::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "toy_preview".into()));
    let scene = toy_scene(&ToySceneConfig::default())?;
    write_toy_scene(&out.join("scene"), &scene)?;
    write_toy_styles(&out.join("styles"), 8, 64, 0)?;
    println!("wrote {}", out.display());
    Ok(())
}
