//! Dataset directory layout: `manifest.jsonl` plus one sub-directory of PNGs
//! per record.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::record::{DatasetRecord, Split};
use crate::corrosion::{CorrosionForm, Fill};
use crate::error::{Error, Result};
use crate::imgcore::{read_mask_png, read_png, read_seg_png, write_mask_png, write_png, write_seg_png};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub label: String,
    pub form: CorrosionForm,
    pub ratio: f64,
    pub seed: u64,
    pub split: Split,
    pub fill: Fill,
    pub intact: String,
    pub corrupted: String,
    pub mask: String,
    pub seg: String,
    pub seg_corrupted: String,
}

impl ManifestEntry {
    pub fn for_record(rec: &DatasetRecord) -> Self {
        let file = |name: &str| format!("{}/{name}", rec.id);
        ManifestEntry {
            id: rec.id.clone(),
            label: rec.text_label.clone(),
            form: rec.corrosion_form,
            ratio: rec.corrosion_ratio,
            seed: rec.seed,
            split: rec.split,
            fill: rec.fill,
            intact: file("intact.png"),
            corrupted: file("corrupted.png"),
            mask: file("mask.png"),
            seg: file("seg.png"),
            seg_corrupted: file("seg_corrupted.png"),
        }
    }
}

pub fn write_manifest(records: &[DatasetRecord], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(MANIFEST_FILE);
    let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BufWriter::new(file);
    for rec in records {
        let entry = ManifestEntry::for_record(rec);
        let rec_dir = dir.join(&rec.id);
        fs::create_dir_all(&rec_dir).map_err(|e| Error::io(&rec_dir, e))?;
        write_png(dir.join(&entry.intact), &rec.intact_image)?;
        write_png(dir.join(&entry.corrupted), &rec.corrupted_image)?;
        write_mask_png(dir.join(&entry.mask), &rec.corruption_mask)?;
        write_seg_png(dir.join(&entry.seg), &rec.intact_segmask)?;
        write_seg_png(dir.join(&entry.seg_corrupted), &rec.corrupted_segmask)?;
        let line = serde_json::to_string(&entry).map_err(|e| Error::Manifest(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    out.flush().map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn read_manifest_entries(dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut entries = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), lineno + 1)))?;
        entries.push(entry);
    }
    Ok(entries)
}

fn load<T>(dir: &Path, id: &str, rel: &str, f: impl Fn(&Path) -> Result<T>) -> Result<T> {
    let path = dir.join(rel);
    f(&path).map_err(|e| Error::Manifest(format!("record {id}: cannot load {}: {e}", path.display())))
}

pub fn load_record(dir: impl AsRef<Path>, entry: &ManifestEntry) -> Result<DatasetRecord> {
    let dir = dir.as_ref();
    let id = entry.id.as_str();
    let rec = DatasetRecord {
        id: entry.id.clone(),
        corrupted_image: load(dir, id, &entry.corrupted, |p| read_png(p))?,
        corruption_mask: load(dir, id, &entry.mask, |p| read_mask_png(p))?,
        intact_image: load(dir, id, &entry.intact, |p| read_png(p))?,
        corrupted_segmask: load(dir, id, &entry.seg_corrupted, |p| read_seg_png(p))?,
        intact_segmask: load(dir, id, &entry.seg, |p| read_seg_png(p))?,
        text_label: entry.label.clone(),
        corrosion_form: entry.form,
        corrosion_ratio: entry.ratio,
        fill: entry.fill,
        seed: entry.seed,
        split: entry.split,
    };
    let (h, w) = rec.shape();
    let mask_ok = rec.corruption_mask.height() == h && rec.corruption_mask.width() == w;
    let seg_ok = [&rec.corrupted_segmask, &rec.intact_segmask]
        .iter()
        .all(|s| s.height() == h && s.width() == w);
    if !mask_ok || !seg_ok || rec.corrupted_image.shape() != rec.intact_image.shape() {
        return Err(Error::Manifest(format!("record {id}: rasters disagree in shape")));
    }
    Ok(rec)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Vec<DatasetRecord>> {
    let dir = dir.as_ref();
    read_manifest_entries(dir)?
        .iter()
        .map(|e| load_record(dir, e))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::record::{generate_dataset, DatasetConfig};

    fn small_config(n: usize) -> DatasetConfig {
        DatasetConfig {
            records: n,
            height: 32,
            width: 128,
            data_seed: 11,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn round_trip_ten_records() {
        let records = generate_dataset(&small_config(10)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_manifest(&records, dir.path()).unwrap();
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back.len(), 10);
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.text_label, b.text_label);
            assert_eq!(a.corrosion_form, b.corrosion_form);
            assert_eq!(a.corrosion_ratio, b.corrosion_ratio);
            assert_eq!(a.seed, b.seed);
            assert_eq!(a.split, b.split);
            assert_eq!(a.corruption_mask, b.corruption_mask);
            for (x, y) in [
                (a.intact_image.data(), b.intact_image.data()),
                (a.corrupted_image.data(), b.corrupted_image.data()),
                (a.intact_segmask.values(), b.intact_segmask.values()),
                (a.corrupted_segmask.values(), b.corrupted_segmask.values()),
            ] {
                assert!(x.iter().zip(y).all(|(p, q)| (p - q).abs() <= 1.0 / 255.0 + 1e-6));
            }
        }
    }

    #[test]
    fn empty_manifest_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        write_manifest(&[], dir.path()).unwrap();
        assert!(read_manifest(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn missing_png_is_named() {
        let records = generate_dataset(&small_config(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_manifest(&records, dir.path()).unwrap();
        let victim = dir.path().join(&records[1].id).join("seg.png");
        fs::remove_file(&victim).unwrap();
        let msg = read_manifest(dir.path()).unwrap_err().to_string();
        assert!(msg.contains(&victim.display().to_string()), "{msg}");
    }

    #[test]
    fn schema_violation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{\"id\": \"x\", \"bogus\": 1}\n").unwrap();
        assert!(matches!(read_manifest(dir.path()), Err(Error::Manifest(_))));
    }
}
