//! On-disk formats: `score,label` data files, JSON-lines result streams and
//! TOML sweep configs.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::harness::{DataSource, SweepConfig, SweepResultRow};
use crate::types::{Label, LabeledScore};

/// Version tag written in the header object of every result stream.
pub const SCHEMA_VERSION: &str = "fedeval.sweep_result/1";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("cannot read {}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("invalid config: {0}")]
    Config(String),
}

impl FormatError {
    /// Whether the failure is in the user's config rather than in I/O or data.
    pub fn is_config(&self) -> bool {
        matches!(self, FormatError::Config(_))
    }
}

fn parse_error(line: u64, message: impl Into<String>) -> FormatError {
    FormatError::Parse {
        line,
        message: message.into(),
    }
}

/// Parses a data file: header `score,label`, then one `score,label` row per
/// example with the label `1` or `0`. Any malformed row rejects the file.
pub fn parse_data<R: Read>(reader: R) -> Result<Vec<LabeledScore>, FormatError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(reader);
    let mut records = rdr.records();
    match records.next() {
        Some(Ok(h)) if h.iter().map(str::trim).eq(["score", "label"]) => {}
        Some(Ok(h)) => {
            return Err(parse_error(
                1,
                format!(
                    "expected header `score,label`, found `{}`",
                    h.iter().collect::<Vec<_>>().join(",")
                ),
            ))
        }
        Some(Err(e)) => return Err(parse_error(1, e.to_string())),
        None => return Err(parse_error(1, "empty file, expected header `score,label`")),
    }
    let mut out = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_error(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(parse_error(
                line,
                format!("expected 2 fields, found {}", rec.len()),
            ));
        }
        let score: f64 = rec[0]
            .trim()
            .parse()
            .map_err(|_| parse_error(line, format!("score `{}` is not a number", &rec[0])))?;
        let label = match rec[1].trim() {
            "1" => Label::Positive,
            "0" => Label::Negative,
            other => return Err(parse_error(line, format!("label `{other}` is not 1 or 0"))),
        };
        let ex = LabeledScore::new(score, label).map_err(|e| parse_error(line, e.to_string()))?;
        out.push(ex);
    }
    Ok(out)
}

pub fn read_data_file(path: &Path) -> Result<Vec<LabeledScore>, FormatError> {
    let file = std::fs::File::open(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_data(std::io::BufReader::new(file))
}

/// Writes examples in the data-file format. Scores use the shortest
/// representation that parses back to the same value.
pub fn write_data<W: Write>(mut out: W, examples: &[LabeledScore]) -> std::io::Result<()> {
    writeln!(out, "score,label")?;
    for e in examples {
        writeln!(out, "{},{}", e.score(), u8::from(e.label().is_positive()))?;
    }
    out.flush()
}

/// Header object opening a result stream.
pub fn schema_header() -> serde_json::Value {
    serde_json::json!({ "schema": SCHEMA_VERSION })
}

/// Writes the header object as one JSON line.
pub fn write_header<W: Write>(mut out: W) -> std::io::Result<()> {
    writeln!(out, "{}", schema_header())
}

/// Writes one result row as one JSON line.
pub fn write_row<W: Write>(mut out: W, row: &SweepResultRow) -> std::io::Result<()> {
    let line = serde_json::to_string(row).map_err(std::io::Error::other)?;
    writeln!(out, "{line}")
}

/// Parses and validates a TOML sweep config. A relative data path is
/// resolved against `base_dir`.
pub fn parse_sweep_config(text: &str, base_dir: Option<&Path>) -> Result<SweepConfig, FormatError> {
    let mut cfg: SweepConfig = toml::from_str(text)
        .map_err(|e| FormatError::Config(e.to_string().trim_end().to_string()))?;
    if let (DataSource::Path(p), Some(dir)) = (&mut cfg.data, base_dir) {
        if p.is_relative() {
            *p = dir.join(&*p);
        }
    }
    cfg.validate()
        .map_err(|e| FormatError::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn read_sweep_config(path: &Path) -> Result<SweepConfig, FormatError> {
    let text = std::fs::read_to_string(path).map_err(|source| FormatError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_sweep_config(&text, path.parent())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn data_round_trip() {
        let ex = vec![
            LabeledScore::positive(0.1).unwrap(),
            LabeledScore::negative(1.0).unwrap(),
            LabeledScore::negative(0.0).unwrap(),
            LabeledScore::positive(1.0 / 3.0).unwrap(),
        ];
        let mut buf = Vec::new();
        write_data(&mut buf, &ex).unwrap();
        assert_eq!(parse_data(buf.as_slice()).unwrap(), ex);
    }

    #[test]
    fn malformed_rows_carry_line_numbers() {
        let err = |s: &str| match parse_data(s.as_bytes()) {
            Err(FormatError::Parse { line, message }) => (line, message),
            other => panic!("expected parse error, got {other:?}"),
        };
        assert_eq!(err("score,label\n0.5,1\n1.5,0\n").0, 3);
        assert_eq!(err("score,label\n0.5,1\n0.2,2\n").0, 3);
        assert_eq!(err("score,label\nabc,1\n").0, 2);
        assert_eq!(err("score,label\n0.3\n").0, 2);
        assert_eq!(err("label,score\n0.3,1\n").0, 1);
        assert_eq!(err("").0, 1);
    }

    #[test]
    fn header_only_file_is_empty_data() {
        assert!(parse_data("score,label\n".as_bytes()).unwrap().is_empty());
    }

    #[test]
    fn config_errors_name_the_key() {
        let e = parse_sweep_config("seed = 1\nbuckets = \"ten\"\n[data.synthetic]\n", None)
            .unwrap_err();
        assert!(e.is_config() && e.to_string().contains("buckets"), "{e}");
        let e = parse_sweep_config("seed = 1\nbukets = [3]\n[data.synthetic]\n", None).unwrap_err();
        assert!(e.to_string().contains("bukets"), "{e}");
        let e =
            parse_sweep_config("seed = 1\nrepetitions = 0\n[data.synthetic]\n", None).unwrap_err();
        assert!(e.to_string().contains("repetitions"), "{e}");
        let e = parse_sweep_config("[data.synthetic]\n", None).unwrap_err();
        assert!(e.to_string().contains("seed"), "{e}");
    }

    #[test]
    fn config_defaults_and_relative_paths() {
        let cfg = parse_sweep_config(
            "seed = 7\n[data]\npath = \"d.csv\"\n",
            Some(Path::new("/tmp/x")),
        )
        .unwrap();
        assert_eq!(cfg.data, DataSource::Path(PathBuf::from("/tmp/x/d.csv")));
        assert_eq!(cfg.repetitions, 1);
        assert_eq!(cfg.buckets, vec![100]);
    }
}
