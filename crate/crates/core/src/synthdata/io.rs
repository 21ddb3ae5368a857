//! On-disk dataset layout.
//!
//! One directory per split holding `manifest.json` and, per image,
//! `NNNNNN.ppm` (binary P6, 8-bit) plus `NNNNNN.json`, an array of
//! `{x_min, y_min, x_max, y_max, class}` records.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataSet, ImageSample, LabeledBox, Manifest, Split};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnnotationRecord {
    x_min: f64,
    y_min: f64,
    x_max: f64,
    y_max: f64,
    class: String,
}

pub(crate) fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", img.width(), img.height());
    let mut out = Vec::with_capacity(header.len() + img.as_raw().len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(img.as_raw());
    out
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<RgbImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Pnm)
        .map(|img| img.to_rgb8())
        .map_err(|e| Error::format(path.display().to_string(), e.to_string()))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

/// Writes one split into `dir`, creating it if needed.
pub fn save_dataset(ds: &DataSet, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = serde_json::to_vec_pretty(&ds.manifest)?;
    manifest.push(b'\n');
    write(&dir.join("manifest.json"), &manifest)?;
    for (i, sample) in ds.samples.iter().enumerate() {
        write(&dir.join(format!("{i:06}.ppm")), &encode_ppm(&sample.image))?;
        let records: Vec<AnnotationRecord> = sample
            .annotations
            .iter()
            .map(|a| AnnotationRecord {
                x_min: a.bbox.x_min,
                y_min: a.bbox.y_min,
                x_max: a.bbox.x_max,
                y_max: a.bbox.y_max,
                class: ds.catalog.merged_classes[a.class].clone(),
            })
            .collect();
        let mut json = serde_json::to_vec(&records)?;
        json.push(b'\n');
        write(&dir.join(format!("{i:06}.json")), &json)?;
    }
    Ok(())
}

/// Reads a split directory written by [`save_dataset`].
pub fn load_split(dir: &Path) -> Result<DataSet> {
    let manifest: Manifest = serde_json::from_slice(&read(&dir.join("manifest.json"))?)
        .map_err(|e| Error::format(dir.join("manifest.json").display().to_string(), e.to_string()))?;
    let catalog = manifest.catalog.clone();
    let mut samples = Vec::with_capacity(manifest.image_count);
    for i in 0..manifest.image_count {
        let ppm = dir.join(format!("{i:06}.ppm"));
        let image = decode_ppm(&read(&ppm)?, &ppm)?;
        let ann_path = dir.join(format!("{i:06}.json"));
        let records: Vec<AnnotationRecord> = serde_json::from_slice(&read(&ann_path)?)
            .map_err(|e| Error::format(ann_path.display().to_string(), e.to_string()))?;
        let annotations = records
            .into_iter()
            .map(|r| {
                let class = catalog.merged_index(&r.class).ok_or_else(|| Error::UnknownClass {
                    name: r.class.clone(),
                    context: ann_path.display().to_string(),
                })?;
                Ok(LabeledBox { bbox: BBox::new(r.x_min, r.y_min, r.x_max, r.y_max)?, class })
            })
            .collect::<Result<Vec<_>>>()?;
        samples.push(ImageSample {
            image,
            annotations,
            source_id: format!("{}/{}/{i:06}", manifest.corpus.name(), manifest.split),
        });
    }
    Ok(DataSet {
        name: format!("{}-{}", manifest.corpus.name(), manifest.split),
        samples,
        catalog,
        split: manifest.split,
        manifest,
    })
}

/// Loads every split subdirectory (`train`, `val`, `test`) present under `root`.
pub fn load_dataset(root: &Path) -> Result<BTreeMap<Split, DataSet>> {
    let mut out = BTreeMap::new();
    for split in Split::ALL {
        let dir = root.join(split.name());
        if dir.join("manifest.json").is_file() {
            out.insert(split, load_split(&dir)?);
        }
    }
    if out.is_empty() {
        return Err(Error::format(root.display().to_string(), "no split directories with a manifest.json"));
    }
    Ok(out)
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else {
            out.push(path);
        }
    }
    Ok(())
}

/// SHA-256 over every file under `root` (relative path and contents, sorted by path).
pub fn tree_digest(root: &Path) -> Result<String> {
    let mut files = Vec::new();
    collect_files(root, &mut files)?;
    files.sort();
    let mut hasher = Sha256::new();
    for f in files {
        let rel = f.strip_prefix(root).unwrap_or(&f);
        hasher.update(rel.to_string_lossy().as_bytes());
        hasher.update([0u8]);
        hasher.update(read(&f)?);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_split, polyp_proxy_plan, CorpusKind, RenderParams, SplitPlan};

    fn small() -> DataSet {
        let plan = SplitPlan { images: 5, instances: [0, 0, 6], ..polyp_proxy_plan()[1].clone() };
        generate_split(CorpusKind::PolypProxy, &plan, 3, &RenderParams::default())
    }

    #[test]
    fn ppm_payload_is_exact() {
        let ds = small();
        let bytes = encode_ppm(&ds.samples[0].image);
        let header = b"P6\n225 225\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len() - header.len(), 225 * 225 * 3);
    }

    #[test]
    fn save_load_roundtrip() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_split(dir.path()).unwrap();
        assert_eq!(back, ds);

        let ann = fs::read_to_string(dir.path().join("000000.json")).unwrap();
        assert!(ann.starts_with("[{\"x_min\":"));
        assert!(ann.contains("\"class\":\"polyp\""));
    }

    #[test]
    fn unknown_class_is_reported() {
        let ds = small();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        fs::write(
            dir.path().join("000001.json"),
            r#"[{"x_min":1,"y_min":1,"x_max":20,"y_max":20,"class":"adenoma"}]"#,
        )
        .unwrap();
        let err = load_split(dir.path()).unwrap_err();
        assert!(matches!(err, Error::UnknownClass { ref name, .. } if name == "adenoma"));
    }
}
