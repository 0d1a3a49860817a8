//! MOS-labelled dataset tables.
//!
//! The canonical CSV schema is `path,mos[,reference_path]`. Published
//! metadata layouts are mapped onto it with a small [`DatasetAdapter`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetAdapter {
    /// Dataset name; the CSV file stem when empty.
    pub name: String,
    pub path_column: String,
    pub mos_column: String,
    pub reference_column: Option<String>,
    pub delimiter: char,
    /// Prepended to every image path.
    pub path_prefix: String,
    pub mos_range: Option<(f64, f64)>,
    /// Evaluated with a single split.
    pub large: bool,
}

impl Default for DatasetAdapter {
    fn default() -> Self {
        Self {
            name: String::new(),
            path_column: "path".into(),
            mos_column: "mos".into(),
            reference_column: Some("reference_path".into()),
            delimiter: ',',
            path_prefix: String::new(),
            mos_range: None,
            large: false,
        }
    }
}

impl DatasetAdapter {
    /// Reads an adapter from TOML.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Layout of full-reference tables: `reference_path,distorted_path,mos`.
    pub fn full_reference() -> Self {
        Self {
            path_column: "distorted_path".into(),
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRow {
    pub path: String,
    pub mos: f64,
    pub reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetTable {
    pub name: String,
    pub rows: Vec<DatasetRow>,
    pub mos_range: (f64, f64),
    pub large: bool,
}

impl DatasetTable {
    pub fn new(name: impl Into<String>, rows: Vec<DatasetRow>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::InvalidInput("dataset has no rows".into()));
        }
        if let Some(r) = rows.iter().find(|r| !r.mos.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite MOS for `{}`", r.path)));
        }
        let lo = rows.iter().map(|r| r.mos).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r.mos).fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            name: name.into(),
            rows,
            mos_range: (lo, hi),
            large: false,
        })
    }

    pub fn load(path: &Path, adapter: &DatasetAdapter) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .delimiter(adapter.delimiter as u8)
            .trim(csv::Trim::All)
            .from_path(path)
            .map_err(|e| Error::format(path, e.to_string()))?;
        let headers = reader.headers()?.clone();
        let column = |name: &str| headers.iter().position(|h| h == name);
        let path_col = column(&adapter.path_column)
            .ok_or_else(|| Error::format(path, format!("missing column `{}`", adapter.path_column)))?;
        let mos_col = column(&adapter.mos_column)
            .ok_or_else(|| Error::format(path, format!("missing column `{}`", adapter.mos_column)))?;
        let ref_col = adapter.reference_column.as_deref().and_then(column);
        let mut rows = Vec::new();
        for (line, record) in reader.records().enumerate() {
            let record = record?;
            let field = |i: usize| record.get(i).unwrap_or("");
            let mos: f64 = field(mos_col)
                .parse()
                .map_err(|_| Error::format(path, format!("row {}: bad MOS `{}`", line + 2, field(mos_col))))?;
            rows.push(DatasetRow {
                path: format!("{}{}", adapter.path_prefix, field(path_col)),
                mos,
                reference: ref_col
                    .map(field)
                    .filter(|s| !s.is_empty())
                    .map(|s| format!("{}{}", adapter.path_prefix, s)),
            });
        }
        let name = if adapter.name.is_empty() {
            path.file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or("dataset")
                .to_string()
        } else {
            adapter.name.clone()
        };
        let mut table = Self::new(name, rows)?;
        if let Some(range) = adapter.mos_range {
            table.mos_range = range;
        }
        table.large = adapter.large;
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
        let with_ref = self.rows.iter().any(|r| r.reference.is_some());
        if with_ref {
            w.write_record(["path", "mos", "reference_path"])?;
        } else {
            w.write_record(["path", "mos"])?;
        }
        for r in &self.rows {
            let mos = r.mos.to_string();
            if with_ref {
                w.write_record([r.path.as_str(), &mos, r.reference.as_deref().unwrap_or("")])?;
            } else {
                w.write_record([r.path.as_str(), &mos])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn mos(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mos).collect()
    }

    pub fn paths(&self) -> Vec<String> {
        self.rows.iter().map(|r| r.path.clone()).collect()
    }
}

/// Resolves a table path against an image root (absolute paths pass through).
pub fn resolve(root: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        root.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_adapters() {
        let dir = tempfile::tempdir().unwrap();
        let table = DatasetTable::new(
            "toy",
            vec![
                DatasetRow {
                    path: "a.png".into(),
                    mos: 3.25,
                    reference: Some("r.png".into()),
                },
                DatasetRow {
                    path: "b.png".into(),
                    mos: 1.0 / 3.0,
                    reference: None,
                },
            ],
        )
        .unwrap();
        let path = dir.path().join("toy.csv");
        table.save(&path).unwrap();
        assert_eq!(DatasetTable::load(&path, &DatasetAdapter::default()).unwrap(), table);

        let other = dir.path().join("koniq.csv");
        std::fs::write(&other, "image_name;MOS\nx.jpg;70.5\ny.jpg;12\n").unwrap();
        let adapter = DatasetAdapter {
            name: "KonIQ".into(),
            path_column: "image_name".into(),
            mos_column: "MOS".into(),
            reference_column: None,
            delimiter: ';',
            path_prefix: "1024x768/".into(),
            mos_range: Some((1.0, 100.0)),
            large: false,
        };
        let t = DatasetTable::load(&other, &adapter).unwrap();
        assert_eq!(t.name, "KonIQ");
        assert_eq!(t.rows[0].path, "1024x768/x.jpg");
        assert_eq!(t.mos(), vec![70.5, 12.0]);
        assert_eq!(t.mos_range, (1.0, 100.0));
    }

    #[test]
    fn bad_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        std::fs::write(&path, "path,mos\na.png,good\n").unwrap();
        assert!(DatasetTable::load(&path, &DatasetAdapter::default()).is_err());
        std::fs::write(&path, "file,mos\na.png,1\n").unwrap();
        assert!(DatasetTable::load(&path, &DatasetAdapter::default()).is_err());
        assert!(DatasetTable::new("x", vec![]).is_err());
    }
}
