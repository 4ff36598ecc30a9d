use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

use super::llff::is_image;

/// Style images under a directory tree, in a seed-determined order, each center-cropped and
/// resized to `resolution x resolution` when read.
#[derive(Clone, Debug)]
pub struct StyleCorpus {
    root: PathBuf,
    resolution: usize,
    seed: u64,
    paths: Vec<PathBuf>,
}

pub fn load_style_corpus(root: &Path, resolution: usize, seed: u64) -> Result<StyleCorpus> {
    if resolution == 0 {
        return Err(Error::Config("style resolution must be positive".into()));
    }
    if !root.is_dir() {
        return Err(Error::format(root, "style corpus root is not a directory"));
    }
    let mut paths: Vec<PathBuf> = walkdir::WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && is_image(e.path()))
        .map(|e| e.into_path())
        .collect();
    if paths.is_empty() {
        return Err(Error::Empty(format!("no style images under {}", root.display())));
    }
    paths.sort();
    paths.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(StyleCorpus {
        root: root.to_path_buf(),
        resolution,
        seed,
        paths,
    })
}

impl StyleCorpus {
    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.paths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.paths.is_empty()
    }

    pub fn paths(&self) -> &[PathBuf] {
        &self.paths
    }

    pub fn get(&self, index: usize) -> Result<Image> {
        let path = self.paths.get(index).ok_or(Error::OutOfRange {
            index,
            len: self.paths.len(),
        })?;
        Ok(Image::load(path, false)?.square_resize(self.resolution))
    }

    /// Yields images in corpus order. Single consumer.
    pub fn iter(&self) -> impl Iterator<Item = Result<Image>> + '_ {
        (0..self.paths.len()).map(move |i| self.get(i))
    }
}
