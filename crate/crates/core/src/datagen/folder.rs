use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::{ColorType, DynamicImage, RgbImage};

use crate::error::{Error, Result};
use crate::raster::{Dataset, Image};

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = fs::read_dir(dir)
        .map_err(Error::io(dir))?
        .map(|e| e.map(|e| e.path()).map_err(Error::io(dir)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

fn bad_image(path: &Path) -> impl Fn(String) -> Error + '_ {
    move |reason| Error::BadImage {
        path: path.to_path_buf(),
        reason,
    }
}

fn decode_rgb(path: &Path) -> Result<DynamicImage> {
    let bad = bad_image(path);
    let decoded = image::open(path).map_err(|e| bad(e.to_string()))?;
    if !matches!(
        decoded.color(),
        ColorType::Rgb8 | ColorType::Rgba8 | ColorType::Rgb16 | ColorType::Rgba16 | ColorType::Rgb32F | ColorType::Rgba32F
    ) {
        return Err(bad(format!("expected an RGB image, decoded {:?}", decoded.color())));
    }
    Ok(decoded)
}

fn to_image(decoded: &DynamicImage, path: &Path) -> Result<Image> {
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    Image::new(h, w, 3, decoded.to_rgb32f().into_raw()).ok_or_else(|| bad_image(path)("empty image".into()))
}

/// Decodes one PNG at its native size. Alpha is dropped.
pub fn read_png(path: &Path) -> Result<Image> {
    to_image(&decode_rgb(path)?, path)
}

/// Decodes one PNG, center-crops it to a square and resizes to `size`.
pub fn load_png(path: &Path, size: usize) -> Result<Image> {
    let decoded = decode_rgb(path)?;
    let (w, h) = (decoded.width(), decoded.height());
    let side = w.min(h);
    let cropped = decoded.crop_imm((w - side) / 2, (h - side) / 2, side, side);
    let resized = if side as usize == size {
        cropped
    } else {
        cropped.resize_exact(size as u32, size as u32, FilterType::Triangle)
    };
    to_image(&resized, path)
}

/// Every `.png` under `root`, recursively, in sorted order.
pub fn find_pngs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in sorted_entries(root)? {
        if entry.is_dir() {
            out.extend(find_pngs(&entry)?);
        } else if entry.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
            out.push(entry);
        }
    }
    Ok(out)
}

/// Reads `root/<class>/*.png`. Classes are the sorted subdirectory names and
/// labels are their indices; files are visited in sorted order.
pub fn ingest_folder(root: &Path, size: usize) -> Result<(Dataset, Vec<String>)> {
    let classes: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if classes.is_empty() {
        return Err(Error::Empty(format!("class directory list of {}", root.display())));
    }
    let mut data = Dataset::default();
    let mut names = Vec::with_capacity(classes.len());
    for (label, dir) in classes.iter().enumerate() {
        names.push(dir.file_name().unwrap_or_default().to_string_lossy().into_owned());
        for file in sorted_entries(dir)? {
            let is_png = file
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("png"));
            if is_png {
                data.push(load_png(&file, size)?, label);
            }
        }
    }
    if data.is_empty() {
        return Err(Error::Empty(format!("PNG set under {}", root.display())));
    }
    Ok((data, names))
}

pub fn to_rgb8(image: &Image) -> Result<RgbImage> {
    let (h, w, c) = image.dims();
    if c != 3 {
        return Err(Error::Data(format!("PNG export needs 3 channels, got {c}")));
    }
    let bytes = image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, bytes).expect("buffer matches dims"))
}

pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    DynamicImage::ImageRgb8(to_rgb8(image)?)
        .save(path)
        .map_err(|e| Error::BadImage {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
}

/// Writes `root/class<label>/<index>.png` for inspection.
pub fn export_png_tree(data: &Dataset, root: &Path) -> Result<()> {
    for (i, (img, label)) in data.iter().enumerate() {
        let dir = root.join(format!("class{label}"));
        fs::create_dir_all(&dir).map_err(Error::io(&dir))?;
        save_png(img, &dir.join(format!("{i:05}.png")))?;
    }
    Ok(())
}
