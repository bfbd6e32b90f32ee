use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use super::model::StepMetrics;
use crate::error::{MocaError, Result};

pub const METRICS_HEADER: &str = "step,epoch,lr,loss_total,loss_img,loss_loc,tau_T,secs_per_step";

pub fn metrics_row(m: &StepMetrics) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        m.step, m.epoch, m.lr, m.loss_total, m.loss_img, m.loss_loc, m.tau_t, m.secs
    )
}

/// Append-only metrics CSV; the header is written when the file is new.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| MocaError::io(path, e))?;
        let mut w = MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        if fresh {
            w.line(METRICS_HEADER)?;
        }
        Ok(w)
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.out, "{s}").map_err(|e| MocaError::io(&self.path, e))
    }

    pub fn write(&mut self, m: &StepMetrics) -> Result<()> {
        self.line(&metrics_row(m))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush().map_err(|e| MocaError::io(&self.path, e))
    }
}

pub const RESULTS_HEADER: &str = "protocol,config,seed,accuracy";

/// Appends one `protocol,config,seed,accuracy` row, writing the header for a
/// new file.
pub fn append_result(path: &Path, protocol: &str, config: &str, seed: u64, accuracy: &str) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| MocaError::io(path, e))?;
    let mut s = String::new();
    if fresh {
        s.push_str(RESULTS_HEADER);
        s.push('\n');
    }
    s.push_str(&format!("{protocol},{config},{seed},{accuracy}\n"));
    f.write_all(s.as_bytes()).map_err(|e| MocaError::io(path, e))
}
