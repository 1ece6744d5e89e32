//! CSV and summary-text serialization with exact float round-tripping.
//!
//! Every float is written with 17 significant digits (`{:.16e}`), which
//! is enough for `f64` to round-trip bit-exactly through text. Artifact
//! writers are deterministic: the same in-memory value sequence always
//! produces the same bytes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Render a float with 17 significant digits so parsing it back yields
/// the identical bit pattern (NaN excepted).
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// One CSV cell: either a verbatim string (names, integers) or a float
/// rendered through [`format_f64`].
#[derive(Debug, Clone)]
pub enum Cell {
    Str(String),
    Int(i64),
    Float(f64),
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Str(v.to_string())
    }
}

fn push_cell(out: &mut String, cell: &Cell) {
    match cell {
        Cell::Str(s) => {
            debug_assert!(
                !s.contains(',') && !s.contains('\n') && !s.contains('"'),
                "cell strings are registry names and never need quoting"
            );
            out.push_str(s);
        }
        Cell::Int(v) => {
            let _ = write!(out, "{v}");
        }
        Cell::Float(v) => {
            let _ = write!(out, "{v:.16e}");
        }
    }
}

/// Serialize a header plus rows to CSV text (Unix newlines, trailing
/// newline, no quoting — all cells are numeric or registry names).
pub fn csv_text(header: &[&str], rows: &[Vec<Cell>]) -> String {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        for (k, cell) in row.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            push_cell(&mut out, cell);
        }
        out.push('\n');
    }
    out
}

/// Write text to a file, creating parent directories as needed.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)
            .map_err(|e| Error::Io(format!("creating {}: {e}", parent.display())))?;
    }
    fs::write(path, text).map_err(|e| Error::Io(format!("writing {}: {e}", path.display())))
}

/// Parse CSV text written by [`csv_text`] back into float rows, skipping
/// the header. Non-numeric columns are rejected; this reader exists for
/// the round-trip contract of numeric artifacts.
pub fn read_float_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::Io("empty CSV".into()))?
        .split(',')
        .map(|s| s.to_string())
        .collect();
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|tok| {
                tok.parse::<f64>()
                    .map_err(|e| Error::Io(format!("CSV row {}: `{tok}`: {e}", idx + 2)))
            })
            .collect::<Result<Vec<f64>>>()?;
        if row.len() != header.len() {
            return Err(Error::Io(format!(
                "CSV row {}: {} fields (header has {})",
                idx + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// A `key: value` summary block. Keys appear in insertion order so the
/// rendered text is deterministic.
#[derive(Debug, Clone, Default)]
pub struct Summary {
    lines: Vec<(String, String)>,
}

impl Summary {
    pub fn new() -> Self {
        Summary::default()
    }

    pub fn push_str(&mut self, key: &str, value: &str) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    pub fn push_f64(&mut self, key: &str, value: f64) {
        self.lines.push((key.to_string(), format_f64(value)));
    }

    pub fn push_int(&mut self, key: &str, value: i64) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    pub fn push_bool(&mut self, key: &str, value: bool) {
        self.lines.push((key.to_string(), value.to_string()));
    }

    pub fn push_vec(&mut self, key: &str, values: &[f64]) {
        let body = values.iter().map(|&v| format_f64(v)).collect::<Vec<_>>().join(", ");
        self.lines.push((key.to_string(), body));
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.lines {
            let _ = writeln!(out, "{k}: {v}");
        }
        out
    }
}
