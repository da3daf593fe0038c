//! Image, watermark and checkpoint files.
//!
//! PNG goes through the `image` crate. PGM/PPM are written by hand so the
//! header is always the canonical `P5\n<w> <h>\n255\n` (or `P6`), which keeps
//! exported bytes stable across library versions.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fmdiff_core::codecs::{WatermarkBits, WATERMARK_SIDE};
use fmdiff_core::nn::{checkpoint, Checkpoint};
use fmdiff_core::ImageBuffer;
use image::DynamicImage;

pub const IMAGE_EXTENSIONS: [&str; 3] = ["png", "pgm", "ppm"];

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default()
}

pub fn is_image_path(path: &Path) -> bool {
    IMAGE_EXTENSIONS.contains(&extension(path).as_str())
}

/// Gray images stay single-channel; anything with colour becomes RGB.
/// Alpha is dropped.
pub fn dynamic_to_buffer(img: &DynamicImage) -> Result<ImageBuffer> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let out = if img.color().has_color() {
        ImageBuffer::from_bytes_interleaved(h, w, 3, img.to_rgb8().as_raw())
    } else {
        ImageBuffer::from_bytes_interleaved(h, w, 1, img.to_luma8().as_raw())
    };
    Ok(out?)
}

pub fn load_dynamic(path: &Path) -> Result<DynamicImage> {
    image::open(path).with_context(|| format!("reading {}", path.display()))
}

pub fn load_image(path: &Path) -> Result<ImageBuffer> {
    dynamic_to_buffer(&load_dynamic(path)?)
}

/// Binary PGM (1 channel) or PPM (3 channels) with a canonical header.
pub fn encode_pnm(img: &ImageBuffer) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => bail!("cannot write {c}-channel image as PNM"),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(&img.to_bytes_interleaved());
    Ok(out)
}

/// Writes by extension: `.pgm`/`.ppm` by hand, everything else as PNG.
/// Values are clamped and rounded to 8 bits.
pub fn save_image(path: &Path, img: &ImageBuffer) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let bytes = match extension(path).as_str() {
        "pgm" | "ppm" => encode_pnm(img)?,
        _ => {
            let (w, h) = (img.width() as u32, img.height() as u32);
            let color = match img.channels() {
                1 => image::ExtendedColorType::L8,
                3 => image::ExtendedColorType::Rgb8,
                c => bail!("cannot write {c}-channel image as PNG"),
            };
            let mut buf = Vec::new();
            image::ImageEncoder::write_image(
                image::codecs::png::PngEncoder::new(&mut buf),
                &img.to_bytes_interleaved(),
                w,
                h,
                color,
            )?;
            buf
        }
    };
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Supported images directly inside `dir`, in lexicographic order.
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_path(p))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no readable images in {}", dir.display());
    }
    Ok(paths)
}

/// Output path mirroring `src` inside `out_dir`; PNM stays PNM.
pub fn mirror_path(src: &Path, out_dir: &Path) -> PathBuf {
    out_dir.join(src.file_name().expect("listed files have names"))
}

/// A watermark is either the 32-line hex text format or a 16×16 PGM/PNG
/// thresholded at mid-gray.
pub fn read_watermark(path: &Path) -> Result<WatermarkBits> {
    if is_image_path(path) {
        let img = load_image(path)?;
        if img.height() != WATERMARK_SIDE || img.width() != WATERMARK_SIDE {
            bail!("watermark image must be {WATERMARK_SIDE}x{WATERMARK_SIDE}, got {}x{}", img.height(), img.width());
        }
        let bits = (0..WATERMARK_SIDE * WATERMARK_SIDE).map(|i| img.plane(0)[i] >= 0.5).collect();
        return Ok(WatermarkBits::from_bits(bits)?);
    }
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(WatermarkBits::from_text(&text)?)
}

pub fn write_watermark(path: &Path, wm: &WatermarkBits) -> Result<()> {
    if is_image_path(path) {
        let img = ImageBuffer::new(
            WATERMARK_SIDE,
            WATERMARK_SIDE,
            1,
            wm.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        )?;
        return save_image(path, &img);
    }
    fs::write(path, wm.to_text()).with_context(|| format!("writing {}", path.display()))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    checkpoint::decode(&bytes).with_context(|| format!("decoding checkpoint {}", path.display()))
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    fs::write(path, checkpoint::encode(ck)).with_context(|| format!("writing checkpoint {}", path.display()))
}
