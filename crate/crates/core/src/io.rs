//! Point-cloud files: one point per line, coordinates separated by commas
//! (`csv`) or whitespace (`xyz`). Blank lines and lines starting with `#` are
//! ignored, as is a non-numeric first line in csv files (a header).

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::fmt_f64;
use crate::model::DistributionSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Xyz,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "xyz" => Ok(Format::Xyz),
            other => Err(Error::InvalidParameter(format!("unknown format {other:?}"))),
        }
    }
}

impl Format {
    /// `xyz` for `.xyz` and `.txt` files, `csv` otherwise.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("xyz") | Some("txt") => Format::Xyz,
            _ => Format::Csv,
        }
    }
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|f| !f.is_empty())
        .collect()
}

/// Parses a point cloud. Commas and whitespace are both accepted as
/// separators; every row must have the same number of coordinates.
pub fn parse_points(text: &str) -> Result<Vec<DVector<f64>>> {
    let mut points = Vec::new();
    let mut dim = None;
    let mut first_content = true;
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields = split_fields(line);
        let parsed: std::result::Result<Vec<f64>, _> = fields.iter().map(|f| f.parse::<f64>()).collect();
        let values = match parsed {
            Ok(v) => v,
            Err(_) if first_content && fields.iter().all(|f| f.parse::<f64>().is_err()) => {
                first_content = false;
                continue;
            }
            Err(e) => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("{e} in {line:?}"),
                })
            }
        };
        first_content = false;
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Parse {
                line: line_no,
                message: format!("non-finite coordinate {v}"),
            });
        }
        match dim {
            None if values.len() < 2 => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("need at least 2 coordinates, got {}", values.len()),
                })
            }
            None => dim = Some(values.len()),
            Some(d) if d != values.len() => {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {d} coordinates, got {}", values.len()),
                })
            }
            Some(_) => {}
        }
        points.push(DVector::from_vec(values));
    }
    Ok(points)
}

pub fn read_points(path: &Path) -> Result<Vec<DVector<f64>>> {
    parse_points(&std::fs::read_to_string(path)?)
}

pub fn format_points(points: &[DVector<f64>], format: Format) -> String {
    let sep = match format {
        Format::Csv => ",",
        Format::Xyz => " ",
    };
    let mut out = String::new();
    for p in points {
        let row: Vec<String> = p.iter().map(|v| fmt_f64(*v)).collect();
        let _ = writeln!(out, "{}", row.join(sep));
    }
    out
}

pub fn write_points(path: &Path, points: &[DVector<f64>], format: Format) -> Result<()> {
    std::fs::write(path, format_points(points, format))?;
    Ok(())
}

/// Metadata written next to a generated point cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub spec: DistributionSpec,
    pub n: usize,
    pub seed: u64,
    pub format: Format,
}

/// `points.csv` → `points.csv.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_both_separators() {
        let pts = parse_points("1,2,3\n4 5 6\n  7,\t8 ,9\n").unwrap();
        assert_eq!(pts.len(), 3);
        assert_eq!(pts[2].as_slice(), &[7.0, 8.0, 9.0]);
    }

    #[test]
    fn skips_header_comments_and_blanks() {
        let pts = parse_points("x,y,z\n# note\n\n1,2,3\n").unwrap();
        assert_eq!(pts.len(), 1);
    }

    #[test]
    fn bad_row_names_its_line() {
        let err = parse_points("1,2,3\n4,5,6\n7,oops,9\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(err.to_string().contains('3'));
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let err = parse_points("1,2,3\n1,2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(matches!(parse_points("1\n").unwrap_err(), Error::Parse { line: 1, .. }));
        assert!(matches!(parse_points("1,2,nan\n").unwrap_err(), Error::Parse { line: 1, .. }));
    }

    #[test]
    fn round_trip_is_exact() {
        let pts = vec![
            DVector::from_vec(vec![0.1, -1.0 / 3.0, 1e-300]),
            DVector::from_vec(vec![12345.678901234567, f64::MAX, -0.0]),
        ];
        for fmt in [Format::Csv, Format::Xyz] {
            let back = parse_points(&format_points(&pts, fmt)).unwrap();
            assert_eq!(back, pts);
        }
    }

    #[test]
    fn sidecar_name() {
        assert_eq!(sidecar_path(Path::new("a/b.xyz")), PathBuf::from("a/b.xyz.json"));
        assert_eq!(Format::from_path(Path::new("p.xyz")), Format::Xyz);
        assert_eq!(Format::from_path(Path::new("p.csv")), Format::Csv);
    }
}
