//! Image collections: a directory read lazily in lexicographic order, or
//! the synthetic generator.

use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use fmdiff_core::synth::synth_image;
use fmdiff_core::{ImageBuffer, SeededRng};
use image::imageops::FilterType;

use crate::io;

#[derive(Debug, Clone)]
pub enum Corpus {
    Files { paths: Vec<PathBuf>, size: Option<usize> },
    Synth { seed: u64, count: usize, size: usize, channels: usize },
}

/// Directory corpus. With `size`, every image is center-cropped to a square
/// and bilinearly resized to `size×size`.
pub fn ingest_corpus(dir: &Path, size: Option<usize>) -> Result<Corpus> {
    if size == Some(0) {
        bail!("corpus size must be positive");
    }
    Ok(Corpus::Files { paths: io::list_images(dir)?, size })
}

impl Corpus {
    pub fn synth(seed: u64, count: usize, size: usize, channels: usize) -> Result<Self> {
        if count == 0 || size == 0 || !(channels == 1 || channels == 3) {
            bail!("synthetic corpus needs count, size > 0 and 1 or 3 channels");
        }
        Ok(Corpus::Synth { seed, count, size, channels })
    }

    pub fn len(&self) -> usize {
        match self {
            Corpus::Files { paths, .. } => paths.len(),
            Corpus::Synth { count, .. } => *count,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Display name of entry `i`, used for output files.
    pub fn name(&self, i: usize) -> String {
        match self {
            Corpus::Files { paths, .. } => paths[i].file_name().unwrap().to_string_lossy().into_owned(),
            Corpus::Synth { .. } => format!("synth_{i:05}.png"),
        }
    }

    pub fn load(&self, i: usize) -> Result<ImageBuffer> {
        match self {
            Corpus::Files { paths, size: None } => io::load_image(&paths[i]),
            Corpus::Files { paths, size: Some(s) } => {
                let img = io::load_dynamic(&paths[i])?;
                io::dynamic_to_buffer(&center_square(&img).resize_exact(*s as u32, *s as u32, FilterType::Triangle))
            }
            Corpus::Synth { seed, size, channels, .. } => {
                let mut rng = SeededRng::new(*seed).fork(i as u64);
                Ok(synth_image(&mut rng, *size, *size, *channels).quantized())
            }
        }
    }

    pub fn load_all(&self) -> Result<Vec<ImageBuffer>> {
        (0..self.len()).map(|i| self.load(i)).collect()
    }
}

fn center_square(img: &image::DynamicImage) -> image::DynamicImage {
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    img.crop_imm((w - side) / 2, (h - side) / 2, side, side)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_order_and_resize() {
        let dir = tempfile::tempdir().unwrap();
        for (name, h, w) in [("c.png", 20, 30), ("a.png", 16, 16), ("b.ppm", 30, 20)] {
            let img = ImageBuffer::from_fn(h, w, 3, |c, y, x| ((c + y + 2 * x) % 255) as f64 / 255.0);
            io::save_image(&dir.path().join(name), &img).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "x").unwrap();
        let corpus = ingest_corpus(dir.path(), Some(8)).unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!((0..3).map(|i| corpus.name(i)).collect::<Vec<_>>(), ["a.png", "b.ppm", "c.png"]);
        for i in 0..3 {
            let img = corpus.load(i).unwrap();
            assert_eq!(img.shape(), (8, 8, 3));
            assert_eq!(img, ingest_corpus(dir.path(), Some(8)).unwrap().load(i).unwrap());
        }
        let raw = ingest_corpus(dir.path(), None).unwrap();
        assert_eq!(raw.load(2).unwrap().shape(), (20, 30, 3));
    }

    #[test]
    fn center_crop_keeps_the_middle() {
        let img = image::DynamicImage::ImageLuma8(image::GrayImage::from_fn(30, 20, |x, _| image::Luma([x as u8])));
        let sq = center_square(&img);
        assert_eq!((sq.width(), sq.height()), (20, 20));
        assert_eq!(sq.to_luma8().get_pixel(0, 0).0[0], 5);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ingest_corpus(dir.path(), None).is_err());
    }

    #[test]
    fn synth_is_deterministic_and_8bit() {
        let c = Corpus::synth(3, 4, 32, 3).unwrap();
        let a = c.load(2).unwrap();
        assert_eq!(a, c.load(2).unwrap());
        assert_eq!(a, a.quantized());
        assert_ne!(a, c.load(1).unwrap());
    }
}
