//! On-disk cohorts: a CSV manifest per cohort plus one binary feature file and
//! one binary truth file per slide.
//!
//! Feature files start with an 8-byte header `b"WF"`, `u32` tile count and
//! `u16` dimension (little-endian), followed by row-major `f32` values. Truth
//! files use the magic `b"WT"` and the same header with dimension 1, followed
//! by one byte per tile.

use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::bag::SlideBag;
use crate::error::{Error, Result};

const FEATURE_MAGIC: &[u8; 2] = b"WF";
const TRUTH_MAGIC: &[u8; 2] = b"WT";
const HEADER_LEN: usize = 8;

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub id: String,
    pub percent: f64,
    pub true_percent: Option<f64>,
    pub slide_label: Option<u8>,
    pub features: String,
    pub truth: Option<String>,
    pub image: Option<String>,
    pub mask: Option<String>,
}

/// A slide together with the raster files it was tiled from, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct CohortEntry {
    pub bag: SlideBag,
    pub image: Option<PathBuf>,
    pub mask: Option<PathBuf>,
}

impl From<SlideBag> for CohortEntry {
    fn from(bag: SlideBag) -> Self {
        CohortEntry {
            bag,
            image: None,
            mask: None,
        }
    }
}

fn header(magic: &[u8; 2], n: usize, dim: usize) -> Result<Vec<u8>> {
    let n = u32::try_from(n).map_err(|_| Error::invalid(format!("{n} tiles do not fit the header")))?;
    let dim = u16::try_from(dim).map_err(|_| Error::invalid(format!("dimension {dim} does not fit the header")))?;
    let mut out = Vec::with_capacity(HEADER_LEN);
    out.extend_from_slice(magic);
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(&dim.to_le_bytes());
    Ok(out)
}

fn parse_header(bytes: &[u8], magic: &[u8; 2], context: &str) -> Result<(usize, usize)> {
    if bytes.len() < HEADER_LEN || &bytes[..2] != magic {
        return Err(Error::format(context, "bad magic or truncated header"));
    }
    let n = u32::from_le_bytes(bytes[2..6].try_into().unwrap()) as usize;
    let dim = u16::from_le_bytes(bytes[6..8].try_into().unwrap()) as usize;
    Ok((n, dim))
}

/// Features are narrowed to `f32`.
pub fn encode_features(features: &Array2<f64>) -> Result<Vec<u8>> {
    let mut out = header(FEATURE_MAGIC, features.nrows(), features.ncols())?;
    out.reserve(4 * features.len());
    for &v in features.iter() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Array2<f64>> {
    let (n, dim) = parse_header(bytes, FEATURE_MAGIC, "feature file")?;
    let body = &bytes[HEADER_LEN..];
    if body.len() != 4 * n * dim {
        return Err(Error::format(
            "feature file",
            format!("expected {} bytes of values for {n}x{dim}, found {}", 4 * n * dim, body.len()),
        ));
    }
    let values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Ok(Array2::from_shape_vec((n, dim), values).expect("length checked"))
}

pub fn encode_truth(truth: &[u8]) -> Result<Vec<u8>> {
    let mut out = header(TRUTH_MAGIC, truth.len(), 1)?;
    out.extend_from_slice(truth);
    Ok(out)
}

pub fn decode_truth(bytes: &[u8]) -> Result<Vec<u8>> {
    let (n, dim) = parse_header(bytes, TRUTH_MAGIC, "truth file")?;
    let body = &bytes[HEADER_LEN..];
    if dim != 1 || body.len() != n {
        return Err(Error::format("truth file", format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body.to_vec())
}

fn relative(path: &Path) -> String {
    path.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Slide ids become file names, so they must be plain.
fn check_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c));
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("slide id {id:?} is not a safe file name")))
    }
}

/// Writes `<dir>/<name>.csv` and the per-slide files under `<dir>/<name>/`.
/// Raster paths in the entries are stored relative to `dir` when they lie
/// inside it. Returns the manifest path.
pub fn write_cohort(dir: &Path, name: &str, entries: &[CohortEntry]) -> Result<PathBuf> {
    check_id(name)?;
    let data_dir = dir.join(name);
    std::fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    let manifest = dir.join(format!("{name}.csv"));
    let mut writer = csv::Writer::from_path(&manifest)?;
    let mut seen = std::collections::HashSet::new();
    for entry in entries {
        let bag = &entry.bag;
        bag.validate()?;
        check_id(&bag.id)?;
        if !seen.insert(bag.id.as_str()) {
            return Err(Error::invalid(format!("duplicate slide id {}", bag.id)));
        }
        let feature_rel = Path::new(name).join(format!("{}.f32", bag.id));
        let path = dir.join(&feature_rel);
        std::fs::write(&path, encode_features(&bag.features)?).map_err(|e| Error::io(&path, e))?;
        let truth_rel = match &bag.truth {
            Some(truth) => {
                let rel = Path::new(name).join(format!("{}.truth", bag.id));
                let path = dir.join(&rel);
                std::fs::write(&path, encode_truth(truth)?).map_err(|e| Error::io(&path, e))?;
                Some(relative(&rel))
            }
            None => None,
        };
        let raster_rel = |p: &Option<PathBuf>| p.as_ref().map(|p| relative(p.strip_prefix(dir).unwrap_or(p)));
        writer.serialize(ManifestRow {
            id: bag.id.clone(),
            percent: bag.percent,
            true_percent: bag.true_percent,
            slide_label: bag.slide_label,
            features: relative(&feature_rel),
            truth: truth_rel,
            image: raster_rel(&entry.image),
            mask: raster_rel(&entry.mask),
        })?;
    }
    writer.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn read_manifest(manifest: &Path) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::Reader::from_path(manifest)?;
    let rows = reader.deserialize().collect::<std::result::Result<Vec<ManifestRow>, _>>()?;
    Ok(rows)
}

/// Loads every slide of a manifest, resolving paths against its directory.
pub fn read_cohort_entries(manifest: &Path) -> Result<Vec<CohortEntry>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|row| {
            let path = base.join(&row.features);
            let features = decode_features(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?)?;
            let truth = match &row.truth {
                Some(rel) => {
                    let path = base.join(rel);
                    Some(decode_truth(&std::fs::read(&path).map_err(|e| Error::io(&path, e))?)?)
                }
                None => None,
            };
            let mut bag = SlideBag::new(row.id, features, row.percent, row.slide_label, truth)?;
            bag.true_percent = row.true_percent;
            Ok(CohortEntry {
                bag,
                image: row.image.map(|p| base.join(p)),
                mask: row.mask.map(|p| base.join(p)),
            })
        })
        .collect()
}

pub fn read_cohort(manifest: &Path) -> Result<Vec<SlideBag>> {
    Ok(read_cohort_entries(manifest)?.into_iter().map(|e| e.bag).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn bag(id: &str, percent: f64) -> SlideBag {
        let mut b = SlideBag::new(
            id,
            array![[0.5, -1.25, 3.0], [0.125, 2.0, -0.0]],
            percent,
            Some(u8::from(percent > 0.0)),
            Some(vec![1, 0]),
        )
        .unwrap();
        b.true_percent = Some(percent + 1.0);
        b
    }

    #[test]
    fn feature_header_layout() {
        let bytes = encode_features(&array![[1.0, 2.0]]).unwrap();
        assert_eq!(&bytes[..8], &[b'W', b'F', 1, 0, 0, 0, 2, 0]);
        assert_eq!(bytes.len(), 16);
        assert_eq!(decode_features(&bytes).unwrap(), array![[1.0, 2.0]]);
        assert!(decode_features(&bytes[..15]).is_err());
        assert!(decode_truth(&bytes).is_err());
    }

    #[test]
    fn features_narrow_to_f32() {
        let f = array![[0.1]];
        let back = decode_features(&encode_features(&f).unwrap()).unwrap();
        assert_eq!(back[[0, 0]], 0.1f32 as f64);
    }

    #[test]
    fn cohort_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut bags = [bag("s-1", 40.0), bag("s-2", 0.0)];
        bags[1].truth = None;
        bags[1].true_percent = None;
        let mut entries: Vec<CohortEntry> = bags.iter().cloned().map(Into::into).collect();
        entries[0].image = Some(dir.path().join("rasters/s-1.ppm"));
        let manifest = write_cohort(dir.path(), "train", &entries).unwrap();
        let text = std::fs::read_to_string(&manifest).unwrap();
        assert!(text.starts_with("id,percent,true_percent,slide_label,features,truth,image,mask\n"));
        assert!(text.contains("rasters/s-1.ppm"));

        let back = read_cohort_entries(&manifest).unwrap();
        assert_eq!(back[0].bag, bags[0]);
        assert_eq!(back[1].bag, bags[1]);
        assert_eq!(back[0].image.as_deref(), Some(dir.path().join("rasters/s-1.ppm").as_path()));
        assert_eq!(back[1].image, None);
    }

    #[test]
    fn rejects_unsafe_or_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        assert!(write_cohort(dir.path(), "t", &[bag("../x", 1.0).into()]).is_err());
        assert!(write_cohort(dir.path(), "t", &[bag("a", 1.0).into(), bag("a", 2.0).into()]).is_err());
        assert!(write_cohort(dir.path(), "../t", &[]).is_err());
    }
}
