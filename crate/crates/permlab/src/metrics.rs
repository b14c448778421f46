//! Evaluation log: CSV with header `step,mse`, one row per evaluation,
//! flushed as it is written so an interrupted run keeps its history.

use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

pub const HEADER: &str = "step,mse";

pub struct MetricsWriter {
    path: PathBuf,
    file: File,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> CliResult<Self> {
        let mut file = File::create(path).map_err(|e| CliError::io(path, e))?;
        writeln!(file, "{HEADER}").map_err(|e| CliError::io(path, e))?;
        file.sync_data().map_err(|e| CliError::io(path, e))?;
        Ok(MetricsWriter {
            path: path.to_path_buf(),
            file,
        })
    }

    pub fn append(&mut self, step: u64, mse: f64) -> CliResult<()> {
        writeln!(self.file, "{step},{mse:.16e}").map_err(|e| CliError::io(&self.path, e))?;
        self.file.sync_data().map_err(|e| CliError::io(&self.path, e))
    }
}

pub fn read(path: &Path) -> CliResult<Vec<(u64, f64)>> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let bad = |line: usize, msg: String| CliError::Format {
        path: path.display().to_string(),
        msg: format!("line {line}: {msg}"),
    };
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if i == 0 {
            if line != HEADER {
                return Err(bad(1, format!("expected header `{HEADER}`")));
            }
            continue;
        }
        let (s, m) = line.split_once(',').ok_or_else(|| bad(i + 1, "expected step,mse".into()))?;
        let step = s.parse().map_err(|_| bad(i + 1, format!("bad step `{s}`")))?;
        let mse = m.parse().map_err(|_| bad(i + 1, format!("bad mse `{m}`")))?;
        rows.push((step, mse));
    }
    Ok(rows)
}
