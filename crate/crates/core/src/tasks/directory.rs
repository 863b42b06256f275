//! `root/{train,val,test}/<class>/<image>.{pgm,ppm}` datasets.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use crate::autodiff::Array;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::imageops::FilterType;
use image::{ExtendedColorType, ImageEncoder, ImageReader};

use super::{Split, TaskSource};
use crate::error::{Error, Result};

fn image_error(path: &Path, reason: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn sorted_entries(dir: &Path, want_dirs: bool) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        if path.is_dir() == want_dirs {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

fn is_pnm(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "ppm" | "pnm")
    )
}

/// Decodes one PGM/PPM file, center-crops it to a square, resizes to
/// `size × size` and scales pixels to [0, 1]. Returns `[channels, size, size]`.
pub fn read_image(path: &Path, channels: usize, size: usize) -> Result<Array> {
    let img = ImageReader::open(path)
        .map_err(|e| image_error(path, e))?
        .with_guessed_format()
        .map_err(|e| image_error(path, e))?
        .decode()
        .map_err(|e| image_error(path, e))?;
    let (w, h) = (img.width(), img.height());
    let side = w.min(h);
    let mut img = img.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    if side as usize != size {
        img = img.resize_exact(size as u32, size as u32, FilterType::Triangle);
    }
    let data: Vec<f64> = match channels {
        1 => img.to_luma8().into_raw().into_iter().map(|p| f64::from(p) / 255.0).collect(),
        3 => {
            // channel-major
            let rgb = img.to_rgb8().into_raw();
            let px = size * size;
            (0..3)
                .flat_map(|c| (0..px).map(move |i| (c, i)))
                .map(|(c, i)| f64::from(rgb[i * 3 + c]) / 255.0)
                .collect()
        }
        n => return Err(Error::config("tasks.channels", format!("must be 1 or 3, got {n}"))),
    };
    Ok(Array::new(vec![channels, size, size], data)?)
}

/// Writes a `[1, h, w]` (or `[h, w]`) image with values in [0, 1] as a
/// binary PGM, rounding to 8 bits.
pub fn write_pgm(path: &Path, image: &Array) -> Result<()> {
    let s = image.shape();
    let (h, w) = match s {
        [1, h, w] | [h, w] => (*h, *w),
        _ => return Err(Error::InvalidInput(format!("write_pgm expects [1, h, w], got {s:?}"))),
    };
    let bytes: Vec<u8> = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let file = fs::File::create(path).map_err(Error::io(path))?;
    PnmEncoder::new(BufWriter::new(file))
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, w as u32, h as u32, ExtendedColorType::L8)
        .map_err(|e| image_error(path, e))
}

/// Loads every split. Class ids are assigned in split order (train, val,
/// test), classes sorted by directory name, images by file name.
pub fn load_directory_dataset(root: &Path, channels: usize, size: usize) -> Result<TaskSource> {
    let mut images = Vec::new();
    let mut names = Vec::new();
    let mut pools: [Vec<usize>; 3] = Default::default();
    for (si, split) in Split::ALL.iter().enumerate() {
        let dir = root.join(split.to_string());
        if !dir.is_dir() {
            return Err(Error::InvalidInput(format!("missing split directory {}", dir.display())));
        }
        for class_dir in sorted_entries(&dir, true)? {
            let mut class_images = Vec::new();
            for file in sorted_entries(&class_dir, false)? {
                if is_pnm(&file) {
                    class_images.push(read_image(&file, channels, size)?);
                }
            }
            pools[si].push(images.len());
            names.push(format!("{split}/{}", class_dir.file_name().unwrap_or_default().to_string_lossy()));
            images.push(class_images);
        }
    }
    Ok(TaskSource::stored(images, pools, channels, size, names))
}
