//! JSONL dataset manifests: one `{"id","path","split","boxes"}` record per image.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::phantom::make_phantom;
use super::{read_pgm, write_atomic, write_pgm, ImageSample, PhantomConfig, Split};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Rng;

/// Integer pixel box as stored in annotation files.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl From<AnnotationBox> for BBox {
    fn from(b: AnnotationBox) -> Self {
        BBox::new(b.x as f64, b.y as f64, b.w as f64, b.h as f64)
    }
}

impl From<&BBox> for AnnotationBox {
    fn from(b: &BBox) -> Self {
        AnnotationBox {
            x: b.x.round() as i64,
            y: b.y.round() as i64,
            w: b.w.round() as i64,
            h: b.h.round() as i64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub split: Split,
    pub boxes: Vec<AnnotationBox>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub n_normal: usize,
    pub n_tumor: usize,
    /// Fractions for (train, val, test).
    pub splits: (f64, f64, f64),
    /// Template for every image; `tumor` and `seed` are overridden per sample.
    pub phantom: PhantomConfig,
    pub seed: u64,
}

/// `val = floor(n * f_val)`, `test = floor(n * f_test)`, remainder to train.
pub fn split_counts(n: usize, splits: (f64, f64, f64)) -> (usize, usize, usize) {
    let floor = |f: f64| ((n as f64 * f) + 1e-9).floor() as usize;
    let val = floor(splits.1).min(n);
    let test = floor(splits.2).min(n - val);
    (n - val - test, val, test)
}

fn split_for(index: usize, counts: (usize, usize, usize)) -> Split {
    if index < counts.0 {
        Split::Train
    } else if index < counts.0 + counts.1 {
        Split::Val
    } else {
        Split::Test
    }
}

/// Generates the phantom images in memory. Each sample's seed is split from `spec.seed`,
/// so the result does not depend on generation order.
pub fn generate_samples(spec: &DatasetSpec) -> Result<Vec<ImageSample>> {
    let (a, b, c) = spec.splits;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "split fractions {:?} must be in [0, 1] and sum to 1",
            spec.splits
        )));
    }
    let root = Rng::new(spec.seed);
    let mut out = Vec::with_capacity(spec.n_normal + spec.n_tumor);
    for (tumor, n, prefix, stream) in [
        (true, spec.n_tumor, "tumor", 1u64 << 32),
        (false, spec.n_normal, "normal", 0),
    ] {
        let counts = split_counts(n, spec.splits);
        for i in 0..n {
            let cfg = PhantomConfig {
                tumor,
                seed: root.split(stream + i as u64).next_u64(),
                ..spec.phantom.clone()
            };
            let mut s = make_phantom(&cfg)?;
            s.id = format!("{prefix}_{i:04}");
            s.split = split_for(i, counts);
            out.push(s);
        }
    }
    Ok(out)
}

/// Writes images under `dir/images/` and the manifest to `dir/manifest.jsonl`.
pub fn make_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<ManifestRecord>> {
    let samples = generate_samples(spec)?;
    let mut records = Vec::with_capacity(samples.len());
    for s in &samples {
        let rel = format!("images/{}.pgm", s.id);
        write_pgm(&dir.join(&rel), &s.pixels)?;
        records.push(ManifestRecord {
            id: s.id.clone(),
            path: rel,
            split: s.split,
            boxes: s.boxes.iter().map(AnnotationBox::from).collect(),
        });
    }
    write_manifest(&dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}

pub fn write_manifest_lines<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    write_atomic(path, &buf)
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    write_manifest_lines(path, records)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.to_path_buf(),
            detail: format!("line {}: {e}", n + 1),
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Reads a manifest and checks ids are unique.
pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let records = read_manifest(path)?;
    let mut seen = std::collections::HashSet::new();
    for r in &records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Format {
                path: path.to_path_buf(),
                detail: format!("duplicate id `{}`", r.id),
            });
        }
    }
    Ok(records)
}

/// Loads every image of a manifest, resolving paths against the manifest's directory.
pub fn load_samples(manifest: &Path) -> Result<Vec<ImageSample>> {
    let dir = manifest.parent().unwrap_or_else(|| Path::new("."));
    load_manifest(manifest)?
        .into_iter()
        .map(|r| {
            let pixels = read_pgm(&dir.join(&r.path))?;
            ImageSample::new(
                r.id,
                pixels,
                r.boxes.into_iter().map(BBox::from).collect(),
                r.split,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_rounding() {
        assert_eq!(split_counts(10, (0.6, 0.2, 0.2)), (6, 2, 2));
        assert_eq!(split_counts(7, (0.6, 0.2, 0.2)), (5, 1, 1));
        assert_eq!(split_counts(0, (0.6, 0.2, 0.2)), (0, 0, 0));
        assert_eq!(split_counts(3, (1.0, 0.0, 0.0)), (3, 0, 0));
    }

    #[test]
    fn dataset_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            n_normal: 4,
            n_tumor: 10,
            splits: (0.6, 0.2, 0.2),
            phantom: PhantomConfig::default(),
            seed: 5,
        };
        let records = make_dataset(&spec, dir.path()).unwrap();
        assert_eq!(records.len(), 14);
        let tumors: Vec<_> = records
            .iter()
            .filter(|r| r.id.starts_with("tumor"))
            .collect();
        let count = |s: Split| tumors.iter().filter(|r| r.split == s).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (6, 2, 2)
        );
        assert!(records
            .iter()
            .filter(|r| r.id.starts_with("normal"))
            .all(|r| r.boxes.is_empty()));
        assert!(tumors.iter().all(|r| r.boxes.len() == 1));

        let manifest = dir.path().join("manifest.jsonl");
        let back = load_manifest(&manifest).unwrap();
        assert_eq!(back, records);
        let samples = load_samples(&manifest).unwrap();
        assert_eq!(samples.len(), 14);
        for s in &samples {
            assert!(s.boxes.iter().all(|b| b.within(s.width(), s.height())));
        }

        let dir2 = tempfile::tempdir().unwrap();
        make_dataset(&spec, dir2.path()).unwrap();
        let a = fs::read(manifest).unwrap();
        let b = fs::read(dir2.path().join("manifest.jsonl")).unwrap();
        assert_eq!(a, b);
        let img = "images/tumor_0003.pgm";
        assert_eq!(
            fs::read(dir.path().join(img)).unwrap(),
            fs::read(dir2.path().join(img)).unwrap()
        );
    }

    #[test]
    fn schema_is_strict() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        fs::write(
            &p,
            "{\"id\":\"a\",\"path\":\"a.pgm\",\"split\":\"train\",\"boxes\":[],\"extra\":1}\n",
        )
        .unwrap();
        assert!(read_manifest(&p).is_err());
        fs::write(
            &p,
            "{\"id\":\"a\",\"path\":\"a.pgm\",\"split\":\"train\",\"boxes\":[{\"x\":1,\"y\":2,\"w\":3,\"h\":4}]}\n\
             {\"id\":\"a\",\"path\":\"b.pgm\",\"split\":\"val\",\"boxes\":[]}\n",
        )
        .unwrap();
        assert_eq!(read_manifest(&p).unwrap().len(), 2);
        assert!(load_manifest(&p).is_err());
    }
}
