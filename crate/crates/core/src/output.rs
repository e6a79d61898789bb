//! Writers for averaged results.
//!
//! CSV: header `time,e0,e1,...`, one row per grid point, every number in
//! `{:.16e}` (17 significant digits, so values round-trip exactly).
//! Text: the same table with a `#` comment header and space-separated
//! columns.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::trajectory::{OutputTarget, TrajectoryResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputFormat {
    #[default]
    Csv,
    Text,
}

impl FromStr for OutputFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "text" => Ok(OutputFormat::Text),
            _ => Err(format!("unknown format '{s}' (expected csv or text)")),
        }
    }
}

#[derive(Debug, Error)]
#[error("cannot write {}: {source}", .path.as_ref().map_or("standard output".into(), |p| p.display().to_string()))]
pub struct OutputError {
    pub path: Option<PathBuf>,
    #[source]
    pub source: io::Error,
}

pub fn write_table<W: Write>(w: &mut W, result: &TrajectoryResult, format: OutputFormat) -> io::Result<()> {
    let sep = match format {
        OutputFormat::Csv => ",",
        OutputFormat::Text => " ",
    };
    if format == OutputFormat::Text {
        write!(w, "# ")?;
    }
    write!(w, "time")?;
    for k in 0..result.values.len() {
        write!(w, "{sep}e{k}")?;
    }
    writeln!(w)?;
    for (i, t) in result.times.iter().enumerate() {
        write!(w, "{t:.16e}")?;
        for row in &result.values {
            write!(w, "{sep}{:.16e}", row[i])?;
        }
        writeln!(w)?;
    }
    w.flush()
}

pub fn write_output(result: &TrajectoryResult, target: &OutputTarget, format: OutputFormat) -> Result<(), OutputError> {
    match target {
        OutputTarget::Stdout => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write_table(&mut lock, result, format).map_err(|source| OutputError { path: None, source })
        }
        OutputTarget::File(path) => write_file(path, result, format),
    }
}

fn write_file(path: &Path, result: &TrajectoryResult, format: OutputFormat) -> Result<(), OutputError> {
    let err = |source| OutputError {
        path: Some(path.to_path_buf()),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(err)?);
    write_table(&mut w, result, format).map_err(err)
}
