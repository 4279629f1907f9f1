//! Class-per-directory image trees (Omniglot-style layout).

use std::path::{Path, PathBuf};

use image::imageops::FilterType;

use crate::error::{Error, Result};
use crate::tasks::dataset::{Dataset, Normalization};
use crate::tensor::Real;

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

/// Loads `root/<class>/<image>` trees. Every subdirectory is one class
/// (numbered in sorted name order); images are resized to
/// `image_size × image_size`, replicated to three channels when grayscale,
/// scaled to `[0, 1]` and standardised.
pub fn load_image_dir(root: &Path, image_size: u32) -> Result<Dataset> {
    load_image_dir_with(root, image_size, Normalization::Global)
}

pub fn load_image_dir_with(root: &Path, image_size: u32, norm: Normalization) -> Result<Dataset> {
    if image_size == 0 {
        return Err(Error::config("image_size must be positive"));
    }
    let mut items = Vec::new();
    let mut labels = Vec::new();
    let class_dirs: Vec<PathBuf> = sorted_entries(root)?.into_iter().filter(|p| p.is_dir()).collect();
    if class_dirs.is_empty() {
        return Err(Error::format(root, "no class directories"));
    }
    for (class, dir) in class_dirs.iter().enumerate() {
        let files: Vec<PathBuf> = sorted_entries(dir)?.into_iter().filter(|p| p.is_file()).collect();
        if files.is_empty() {
            return Err(Error::format(dir, "empty class directory"));
        }
        for f in files {
            let img = image::open(&f).map_err(|e| Error::format(&f, e.to_string()))?;
            let rgb = img.resize_exact(image_size, image_size, FilterType::Triangle).to_rgb8();
            items.push(rgb.as_raw().iter().map(|&p| p as Real / 255.0).collect::<Vec<Real>>());
            labels.push(class as u32);
        }
    }
    let name = root.file_name().and_then(|s| s.to_str()).unwrap_or("images").to_string();
    Ok(Dataset::new(name, items, labels)?.normalized(norm))
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{GrayImage, Luma, Rgb, RgbImage};

    #[test]
    fn enumerates_classes_and_items() {
        let dir = tempfile::tempdir().unwrap();
        for c in 0..3 {
            let cd = dir.path().join(format!("class{c}"));
            std::fs::create_dir(&cd).unwrap();
            for i in 0..20 {
                GrayImage::from_pixel(5, 7, Luma([(c * 40 + i) as u8])).save(cd.join(format!("{i:02}.png"))).unwrap();
            }
        }
        let d = load_image_dir(dir.path(), 8).unwrap();
        assert_eq!(d.classes(), vec![0, 1, 2]);
        assert!(d.histogram().values().all(|&n| n == 20));
        assert_eq!(d.dim(), 8 * 8 * 3);
    }

    #[test]
    fn duplicates_are_kept() {
        let dir = tempfile::tempdir().unwrap();
        let cd = dir.path().join("a");
        std::fs::create_dir(&cd).unwrap();
        let img = RgbImage::from_pixel(4, 4, Rgb([10, 20, 30]));
        img.save(cd.join("x.png")).unwrap();
        img.save(cd.join("y.png")).unwrap();
        let d = load_image_dir_with(dir.path(), 4, Normalization::None).unwrap();
        assert_eq!(d.len(), 2);
    }

    #[test]
    fn constant_image_resizes_to_constant_vector() {
        let dir = tempfile::tempdir().unwrap();
        let cd = dir.path().join("a");
        std::fs::create_dir(&cd).unwrap();
        GrayImage::from_pixel(13, 9, Luma([51])).save(cd.join("x.png")).unwrap();
        let d = load_image_dir_with(dir.path(), 6, Normalization::None).unwrap();
        assert_eq!(d.dim(), 108);
        assert!(d.item(0).iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn empty_class_directory_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("a")).unwrap();
        assert!(matches!(load_image_dir(dir.path(), 4), Err(Error::Format { .. })));
    }
}
