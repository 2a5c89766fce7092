use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One scan in a study manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub patient_id: String,
    pub scan_id: String,
    /// Path of the `.meta.json` volume header; relative paths resolve against
    /// the manifest's directory.
    pub volume_path: PathBuf,
    pub label: u8,
    #[serde(default)]
    pub nodule_size_cm: Option<f64>,
    #[serde(default)]
    pub months_post_sbrt: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
    /// Directory relative volume paths are resolved against.
    pub base_dir: PathBuf,
}

pub const MANIFEST_COLUMNS: [&str; 6] =
    ["patient_id", "scan_id", "volume_path", "label", "nodule_size_cm", "months_post_sbrt"];

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let m = Self { rows, base_dir: base_dir.into() };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.rows {
            if !seen.insert(r.scan_id.as_str()) {
                return Err(Error::validation(format!("duplicate scan_id {}", r.scan_id)));
            }
            if r.label > 1 {
                return Err(Error::validation(format!("scan {} has label {}", r.scan_id, r.label)));
            }
        }
        Ok(())
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        if row.volume_path.is_absolute() {
            row.volume_path.clone()
        } else {
            self.base_dir.join(&row.volume_path)
        }
    }

    /// Errors on the first volume header that does not exist.
    pub fn check_paths(&self) -> Result<()> {
        for r in &self.rows {
            let p = self.resolve(r);
            if !p.is_file() {
                return Err(Error::io(
                    &p,
                    std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!("volume of scan {} not found", r.scan_id),
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn row(&self, scan_id: &str) -> Option<&ManifestRow> {
        self.rows.iter().find(|r| r.scan_id == scan_id)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
        for required in &MANIFEST_COLUMNS[..4] {
            if !headers.iter().any(|h| h == *required) {
                return Err(Error::format(format!("{}: missing column {required}", path.display())));
            }
        }
        let mut rows = Vec::new();
        for rec in reader.deserialize() {
            rows.push(rec.map_err(|e| csv_error(path, e))?);
        }
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::new(rows, base)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::format(format!("{}: {e}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(p: &str, s: &str, label: u8) -> ManifestRow {
        ManifestRow {
            patient_id: p.into(),
            scan_id: s.into(),
            volume_path: format!("{s}.meta.json").into(),
            label,
            nodule_size_cm: Some(2.0),
            months_post_sbrt: None,
        }
    }

    #[test]
    fn csv_roundtrip_and_optional_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.csv");
        let m = Manifest::new(vec![row("p1", "a", 1), row("p1", "b", 0)], dir.path()).unwrap();
        m.save(&path).unwrap();
        assert_eq!(Manifest::load(&path).unwrap(), m);

        let short = dir.path().join("short.csv");
        std::fs::write(&short, "patient_id,scan_id,volume_path,label\np,s,s.meta.json,1\n").unwrap();
        let m = Manifest::load(&short).unwrap();
        assert_eq!(m.rows[0].nodule_size_cm, None);
        assert_eq!(m.resolve(&m.rows[0]), dir.path().join("s.meta.json"));
        assert!(m.check_paths().is_err());
    }

    #[test]
    fn invalid_manifests() {
        assert!(Manifest::new(vec![row("p", "a", 1), row("q", "a", 0)], "").is_err());
        assert!(Manifest::new(vec![row("p", "a", 2)], "").is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "patient_id,scan_id\np,s\n").unwrap();
        assert!(Manifest::load(&path).unwrap_err().to_string().contains("volume_path"));
        assert_eq!(Manifest::load(&dir.path().join("none.csv")).unwrap_err().exit_code(), 3);
    }
}
