//! Geotagged image records: manifest I/O, the synthetic city generator and
//! the augmentation pipeline.

mod augment;
mod image;
mod synth;

pub use augment::{augment, AugmentationPolicy, SeedTuple};
pub use image::Image;
pub use synth::{
    category_name, generate_city, render_image, RenderedImage, SyntheticCity, SyntheticCitySpec,
    LAND_USE_NAMES,
};

use std::collections::{BTreeSet, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geo::{project, GeoPoint, ProjectedPoint};

/// Where a record's pixels come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ImageRef {
    /// Image file, relative to the manifest directory unless absolute.
    Path(PathBuf),
    /// Rendered on demand by [`render_image`].
    Synthetic {
        category: usize,
        categories: usize,
        seed: u64,
        distractor_prob: f64,
        size: usize,
    },
}

/// One geotagged image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoImageRecord {
    pub id: String,
    pub image: ImageRef,
    pub geo: GeoPoint,
    pub proj: ProjectedPoint,
    /// Ground-truth category name, when known.
    pub label: Option<String>,
}

impl GeoImageRecord {
    /// Loads (or renders) the image and resizes it to `size x size`.
    pub fn load_image(&self, base_dir: &Path, size: usize) -> Result<Image> {
        let img = match &self.image {
            ImageRef::Path(p) => {
                let path = if p.is_absolute() { p.clone() } else { base_dir.join(p) };
                Image::load_png(&path)?
            }
            ImageRef::Synthetic {
                category,
                categories,
                seed,
                distractor_prob,
                size: s,
            } => render_image(*category, *categories, *seed, *distractor_prob, *s).image,
        };
        if img.width == size && img.height == size {
            Ok(img)
        } else {
            Ok(img.resize(size, size))
        }
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    pub lon: f64,
    pub lat: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

/// Reads a JSON Lines manifest. Blank lines are skipped.
pub fn load_manifest(path: &Path) -> Result<Vec<GeoImageRecord>> {
    let file = File::open(path)?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| Error::Parse {
            path: path.to_owned(),
            line: line_no,
            message,
        };
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        let geo = GeoPoint {
            lon: entry.lon,
            lat: entry.lat,
        };
        let proj = project(geo).map_err(|e| parse_err(e.to_string()))?;
        if !seen.insert(entry.id.clone()) {
            return Err(Error::DuplicateId {
                id: entry.id,
                line: line_no,
            });
        }
        records.push(GeoImageRecord {
            id: entry.id,
            image: ImageRef::Path(PathBuf::from(entry.image_path)),
            geo,
            proj,
            label: entry.label,
        });
    }
    Ok(records)
}

pub fn manifest_entry(record: &GeoImageRecord) -> ManifestEntry {
    let image_path = match &record.image {
        ImageRef::Path(p) => p.to_string_lossy().into_owned(),
        ImageRef::Synthetic { .. } => format!("images/{}.png", record.id),
    };
    ManifestEntry {
        id: record.id.clone(),
        image_path,
        lon: record.geo.lon,
        lat: record.geo.lat,
        label: record.label.clone(),
    }
}

pub fn write_manifest(path: &Path, records: &[GeoImageRecord]) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, &manifest_entry(r))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `manifest.jsonl` and `images/<id>.png` for every record into `dir`.
pub fn materialize(dir: &Path, records: &[GeoImageRecord], size: usize) -> Result<PathBuf> {
    fs::create_dir_all(dir.join("images"))?;
    for r in records {
        let img = r.load_image(dir, size)?;
        img.save_png(&dir.join("images").join(format!("{}.png", r.id)))?;
    }
    let manifest = dir.join("manifest.jsonl");
    let entries: Vec<GeoImageRecord> = records
        .iter()
        .map(|r| GeoImageRecord {
            image: ImageRef::Path(PathBuf::from(manifest_entry(r).image_path)),
            ..r.clone()
        })
        .collect();
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Category names in id order (sorted) and each record's category id.
pub fn truth_labels(records: &[GeoImageRecord]) -> (Vec<String>, Vec<Option<usize>>) {
    let names: Vec<String> = records
        .iter()
        .filter_map(|r| r.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let ids = records
        .iter()
        .map(|r| {
            r.label
                .as_ref()
                .map(|l| names.binary_search(l).expect("name collected above"))
        })
        .collect();
    (names, ids)
}

/// Content hash over ids, coordinates and image references.
pub fn dataset_hash(records: &[GeoImageRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.id.as_bytes());
        h.update(r.geo.lon.to_le_bytes());
        h.update(r.geo.lat.to_le_bytes());
        match &r.image {
            ImageRef::Path(p) => h.update(p.to_string_lossy().as_bytes()),
            ImageRef::Synthetic { category, seed, .. } => {
                h.update((*category as u64).to_le_bytes());
                h.update(seed.to_le_bytes());
            }
        }
        h.update([0u8]);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("m.jsonl");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn empty_manifest_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_manifest(&write(dir.path(), "")).unwrap().is_empty());
    }

    #[test]
    fn coordinates_are_projected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "{\"id\":\"a\",\"image_path\":\"a.png\",\"lon\":0,\"lat\":0}\n\
             {\"id\":\"b\",\"image_path\":\"b.png\",\"lon\":1.0,\"lat\":0,\"label\":\"x\"}\n",
        );
        let recs = load_manifest(&p).unwrap();
        assert_eq!(recs[0].proj.x, 0.0);
        assert_abs_diff_eq!(recs[1].proj.x, 111_319.490_793, epsilon = 1e-3);
        assert_eq!(recs[1].label.as_deref(), Some("x"));
    }

    #[test]
    fn missing_field_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "{\"id\":\"a\",\"image_path\":\"a.png\",\"lon\":0,\"lat\":0}\n\
             {\"id\":\"b\",\"image_path\":\"b.png\",\"lon\":1.0}\n",
        );
        match load_manifest(&p) {
            Err(Error::Parse { line, message, .. }) => {
                assert_eq!(line, 2);
                assert!(message.contains("lat"), "{message}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "{\"id\":\"a\",\"image_path\":\"a.png\",\"lon\":0,\"lat\":0}\n\
             {\"id\":\"a\",\"image_path\":\"b.png\",\"lon\":1.0,\"lat\":0}\n",
        );
        assert!(matches!(load_manifest(&p), Err(Error::DuplicateId { line: 2, .. })));
    }

    #[test]
    fn materialized_city_round_trips() {
        let spec = SyntheticCitySpec {
            samples_per_zone: 6,
            ..Default::default()
        };
        let city = generate_city(&spec).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = materialize(dir.path(), &city.records, 32).unwrap();
        let loaded = load_manifest(&manifest).unwrap();
        assert_eq!(loaded.len(), city.records.len());
        for (a, b) in loaded.iter().zip(&city.records) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.proj, b.proj);
            assert_eq!(a.label, b.label);
            assert_eq!(
                a.load_image(dir.path(), 32).unwrap(),
                b.load_image(dir.path(), 32).unwrap()
            );
        }
    }
}
