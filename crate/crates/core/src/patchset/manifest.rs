use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::Array2;

use super::{check_patch, Labeled, LesionType, Patch, PatchMeta, PatchRecord, PathologyTag, PATCH_SIZE};
use crate::error::{Error, Result};

/// Header of a patch manifest, in order.
pub const MANIFEST_COLUMNS: [&str; 5] = ["id", "image_path", "lesion_type", "pathology_tag", "birads"];

/// One manifest row. `image_path` is kept exactly as written; relative paths
/// resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub meta: PatchMeta,
    pub image_path: PathBuf,
}

impl Labeled for ManifestEntry {
    fn meta(&self) -> &PatchMeta {
        &self.meta
    }
}

impl ManifestEntry {
    pub fn resolve_image_path(&self, manifest_dir: &Path) -> PathBuf {
        if self.image_path.is_absolute() {
            self.image_path.clone()
        } else {
            manifest_dir.join(&self.image_path)
        }
    }
}

fn ingestion(record: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        record: record.into(),
        reason: reason.into(),
    }
}

/// Reads and validates manifest metadata without touching image files.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| ingestion("<manifest>", format!("{}: {e}", path.display())))?;
    let headers = reader.headers()?.clone();
    let mut index = [0usize; 5];
    for (slot, column) in index.iter_mut().zip(MANIFEST_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| ingestion("<header>", format!("missing column `{column}`")))?;
    }

    let mut entries = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (row, record) in reader.records().enumerate() {
        let record = record?;
        let field = |i: usize| record.get(index[i]).unwrap_or("");
        let id = field(0).to_string();
        let name = if id.is_empty() { format!("<row {}>", row + 2) } else { id.clone() };
        let lesion_type: LesionType = field(2)
            .parse()
            .map_err(|e: Error| ingestion(&name, e.to_string()))?;
        let pathology_tag: PathologyTag = field(3)
            .parse()
            .map_err(|e: Error| ingestion(&name, e.to_string()))?;
        let birads = match field(4) {
            "" => None,
            s => Some(
                s.parse::<u8>()
                    .map_err(|_| ingestion(&name, format!("BI-RADS `{s}` is not an integer")))?,
            ),
        };
        let meta = PatchMeta::new(id.clone(), lesion_type, pathology_tag, birads)
            .map_err(|e| ingestion(&name, e.to_string()))?;
        if !seen.insert(id.clone()) {
            return Err(ingestion(&name, "duplicate record id"));
        }
        entries.push(ManifestEntry {
            meta,
            image_path: PathBuf::from(field(1)),
        });
    }
    Ok(entries)
}

/// Reads the manifest and loads every referenced image.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<PatchRecord>> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    read_manifest(path)?
        .into_iter()
        .map(|entry| {
            let image = load_patch_image(entry.resolve_image_path(dir))
                .map_err(|e| ingestion(&entry.meta.id, e.to_string()))?;
            check_patch(&entry.meta.id, &image)?;
            Ok(PatchRecord {
                meta: entry.meta,
                image,
            })
        })
        .collect()
}

/// Loads an 8- or 16-bit grayscale PNG rescaled to `[0, 1]`.
pub fn load_patch_image(path: impl AsRef<Path>) -> Result<Patch> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let pixels: Vec<f32> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 255.0).collect(),
        DynamicImage::ImageLuma16(buf) => buf.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect(),
        other => {
            return Err(Error::Input(format!(
                "{}: expected grayscale PNG, found {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    if (h, w) != (PATCH_SIZE, PATCH_SIZE) {
        return Err(Error::Input(format!(
            "{}: image is {h}x{w}, expected {PATCH_SIZE}x{PATCH_SIZE}",
            path.display()
        )));
    }
    Ok(Array2::from_shape_vec((h, w), pixels).expect("pixel count matches dimensions"))
}

/// Writes a patch as a 16-bit grayscale PNG.
pub fn save_patch_image(image: &Patch, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = image.dim();
    let raw: Vec<u16> = image
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect();
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer matches dimensions");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

fn check_file_stem(id: &str) -> Result<()> {
    let ok = id
        .chars()
        .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(Error::Input(format!("record id `{id}` is not usable as a file name")))
    }
}

/// Writes each image to `images/<id>.png` next to the manifest, then the
/// manifest itself with relative image paths.
pub fn save_manifest(records: &[PatchRecord], path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(format!("creating {}", images.display()), e))?;
    let mut entries = Vec::with_capacity(records.len());
    for record in records {
        check_file_stem(&record.meta.id)?;
        let relative = PathBuf::from("images").join(format!("{}.png", record.meta.id));
        save_patch_image(&record.image, dir.join(&relative))?;
        entries.push(ManifestEntry {
            meta: record.meta.clone(),
            image_path: relative,
        });
    }
    write_manifest_entries(&entries, path)?;
    Ok(entries)
}

pub fn write_manifest_entries(entries: &[ManifestEntry], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path)
        .map_err(|e| Error::Input(format!("cannot write {}: {e}", path.display())))?;
    writer.write_record(MANIFEST_COLUMNS)?;
    for entry in entries {
        let birads = entry.meta.birads.map(|b| b.to_string()).unwrap_or_default();
        writer.write_record([
            entry.meta.id.as_str(),
            &entry.image_path.to_string_lossy(),
            entry.meta.lesion_type.as_str(),
            entry.meta.pathology_tag.as_str(),
            &birads,
        ])?;
    }
    writer.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn record(id: &str, lesion: LesionType, tag: PathologyTag, birads: Option<u8>, fill: f32) -> PatchRecord {
        let meta = PatchMeta::new(id, lesion, tag, birads).unwrap();
        let mut image = Array2::from_elem((PATCH_SIZE, PATCH_SIZE), fill);
        image[[3, 7]] = 1.0;
        PatchRecord::new(meta, image).unwrap()
    }

    fn five_records() -> Vec<PatchRecord> {
        vec![
            record("m-1", LesionType::Mass, PathologyTag::Malignant, Some(5), 0.2),
            record("m-2", LesionType::Mass, PathologyTag::BenignWithoutCallback, Some(3), 0.3),
            record("c-1", LesionType::Calcification, PathologyTag::Unproven, None, 0.4),
            record("c-2", LesionType::Calcification, PathologyTag::Benign, Some(2), 0.5),
            record("n-1", LesionType::Normal, PathologyTag::None, None, 0.0),
        ]
    }

    #[test]
    fn save_then_load_preserves_metadata() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let records = five_records();
        save_manifest(&records, &path).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.len(), 5);
        for (a, b) in records.iter().zip(&loaded) {
            assert_eq!(a.meta, b.meta);
            let max_err = a
                .image
                .iter()
                .zip(b.image.iter())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0f32, f32::max);
            assert!(max_err <= 0.5 / 65535.0 + 1e-7, "quantization error {max_err}");
        }
    }

    fn write_csv(dir: &Path, body: &str) -> PathBuf {
        let path = dir.join("m.csv");
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(body.as_bytes()).unwrap();
        path
    }

    #[test]
    fn bad_lesion_type_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(
            dir.path(),
            "id,image_path,lesion_type,pathology_tag,birads\nr1,a.png,mass,benign,3\nr2,b.png,masses,benign,3\n",
        );
        let err = read_manifest(&path).unwrap_err();
        assert!(matches!(err, Error::Ingestion { ref record, .. } if record == "r2"), "{err}");
    }

    #[test]
    fn missing_column_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(dir.path(), "id,image_path,lesion_type,birads\nr1,a.png,mass,3\n");
        let err = read_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("pathology_tag"), "{err}");
    }

    #[test]
    fn unreadable_image_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(
            dir.path(),
            "id,image_path,lesion_type,pathology_tag,birads\nghost,nowhere.png,normal,none,\n",
        );
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, Error::Ingestion { ref record, .. } if record == "ghost"), "{err}");
    }

    #[test]
    fn wrong_dimensions_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let small: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_pixel(64, 64, Luma([10]));
        small.save(dir.path().join("small.png")).unwrap();
        let path = write_csv(
            dir.path(),
            "id,image_path,lesion_type,pathology_tag,birads\ntiny,small.png,normal,none,\n",
        );
        let err = load_manifest(&path).unwrap_err();
        assert!(matches!(err, Error::Ingestion { ref record, .. } if record == "tiny"), "{err}");
    }

    #[test]
    fn eight_bit_images_rescale_to_unit_range() {
        let dir = tempfile::tempdir().unwrap();
        let img: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_pixel(PATCH_SIZE as u32, PATCH_SIZE as u32, Luma([255]));
        img.save(dir.path().join("white.png")).unwrap();
        let patch = load_patch_image(dir.path().join("white.png")).unwrap();
        assert!(patch.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_csv(
            dir.path(),
            "id,image_path,lesion_type,pathology_tag,birads\na,x.png,normal,none,\na,y.png,normal,none,\n",
        );
        assert!(read_manifest(&path).is_err());
    }
}
