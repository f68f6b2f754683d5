//! The index ↔ image bijection and its CSV manifest (`image_id,filename,index`).

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::Image;

const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub image_id: String,
    pub filename: String,
    pub index: u64,
}

#[derive(Debug, Clone)]
pub struct IndexImageDataset {
    /// Rows in file-name order, parallel to `images`.
    pub rows: Vec<ManifestRow>,
    pub images: Vec<Image>,
    pub assignment_seed: u64,
}

/// A seeded uniform permutation of `0..count`.
pub fn assign_indices(count: usize, seed: u64) -> Vec<u64> {
    let mut indices: Vec<u64> = (0..count as u64).collect();
    indices.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    indices
}

fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn check_shapes(images: &[Image], names: &[String]) -> Result<()> {
    let first = &images[0];
    if first.height != first.width {
        return Err(invalid(format!("{} is {}x{}; images must be square", names[0], first.width, first.height)));
    }
    for (img, name) in images.iter().zip(names) {
        if img.shape() != first.shape() {
            return Err(invalid(format!(
                "{name} is {}x{} but {} is {}x{}; all images must have the same size",
                img.width, img.height, names[0], first.width, first.height
            )));
        }
    }
    Ok(())
}

/// Loads every image in `dir` (sorted by file name) and assigns indices by a
/// seeded shuffle.
pub fn prepare_dataset(dir: &Path, seed: u64) -> Result<IndexImageDataset> {
    let files = image_files(dir)?;
    if files.is_empty() {
        return Err(invalid(format!("no images (png/jpg) in {}", dir.display())));
    }
    let images = files.iter().map(|f| Image::load(f)).collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = files.iter().map(|f| f.display().to_string()).collect();
    check_shapes(&images, &names)?;
    let indices = assign_indices(files.len(), seed);
    let rows = files
        .iter()
        .zip(indices)
        .map(|(f, index)| {
            let abs = std::path::absolute(f).unwrap_or_else(|_| f.clone());
            ManifestRow {
                image_id: f.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(),
                filename: abs.display().to_string(),
                index,
            }
        })
        .collect();
    Ok(IndexImageDataset { rows, images, assignment_seed: seed })
}

impl IndexImageDataset {
    /// A dataset over in-memory images, e.g. synthetic ones.
    pub fn from_images(images: Vec<Image>, ids: Vec<String>, seed: u64) -> Result<Self> {
        if images.is_empty() || images.len() != ids.len() {
            return Err(invalid("need one id per image and at least one image"));
        }
        check_shapes(&images, &ids)?;
        let rows = ids
            .into_iter()
            .zip(assign_indices(images.len(), seed))
            .map(|(id, index)| ManifestRow { filename: format!("{id}.png"), image_id: id, index })
            .collect();
        Ok(IndexImageDataset { rows, images, assignment_seed: seed })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_side(&self) -> usize {
        self.images[0].height
    }

    pub fn pixels_per_image(&self) -> u64 {
        self.images[0].pixels() as u64
    }

    pub fn indices(&self) -> Vec<u64> {
        self.rows.iter().map(|r| r.index).collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.image_id.clone()).collect()
    }

    /// Position in `images` of the image assigned to index `y`.
    pub fn position_of(&self, y: u64) -> Option<usize> {
        self.rows.iter().position(|r| r.index == y)
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(file);
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a manifest and the images it names. Relative file names resolve
    /// against the manifest's directory.
    pub fn load(manifest: &Path) -> Result<Self> {
        let file = std::fs::File::open(manifest).map_err(|e| Error::io(manifest, e))?;
        let rows: Vec<ManifestRow> = csv::Reader::from_reader(file).deserialize().collect::<std::result::Result<_, _>>()?;
        if rows.is_empty() {
            return Err(Error::CorruptArchive(format!("{} has no rows", manifest.display())));
        }
        let mut seen = vec![false; rows.len()];
        for r in &rows {
            match seen.get_mut(r.index as usize) {
                Some(s) if !*s => *s = true,
                _ => {
                    return Err(Error::CorruptArchive(format!(
                        "manifest indices are not a permutation of 0..{} (index {})",
                        rows.len(),
                        r.index
                    )))
                }
            }
        }
        let base = manifest.parent().unwrap_or(Path::new("."));
        let images = rows
            .iter()
            .map(|r| Image::load(&base.join(&r.filename)))
            .collect::<Result<Vec<_>>>()?;
        let names: Vec<String> = rows.iter().map(|r| r.filename.clone()).collect();
        check_shapes(&images, &names)?;
        Ok(IndexImageDataset { rows, images, assignment_seed: 0 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::synthetic_images;

    #[test]
    fn permutation_properties() {
        assert_eq!(assign_indices(1, 9), vec![0]);
        for seed in 0..20 {
            let mut p = assign_indices(16, seed);
            assert_eq!(p, assign_indices(16, seed));
            p.sort();
            assert_eq!(p, (0..16).collect::<Vec<_>>());
        }
        assert_ne!(assign_indices(16, 0), assign_indices(16, 1));
    }

    #[test]
    fn prepare_and_reload() {
        let dir = tempfile::tempdir().unwrap();
        for (i, img) in synthetic_images(5, 8, 1).iter().enumerate() {
            img.save_png(&dir.path().join(format!("img{i}.png"))).unwrap();
        }
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let ds = prepare_dataset(dir.path(), 7).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.rows[0].image_id, "img0");
        let manifest = dir.path().join("manifest.csv");
        ds.write_manifest(&manifest).unwrap();
        let back = IndexImageDataset::load(&manifest).unwrap();
        assert_eq!(back.rows, ds.rows);
        assert_eq!(back.images, ds.images);
        let y = ds.rows[3].index;
        assert_eq!(ds.position_of(y), Some(3));
    }

    #[test]
    fn prepare_rejects_bad_dirs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(prepare_dataset(dir.path(), 0).is_err());
        synthetic_images(1, 8, 1)[0].save_png(&dir.path().join("a.png")).unwrap();
        synthetic_images(1, 6, 1)[0].save_png(&dir.path().join("b.png")).unwrap();
        let err = prepare_dataset(dir.path(), 0).unwrap_err();
        assert!(err.to_string().contains("same size"), "{err}");
    }
}
