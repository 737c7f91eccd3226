//! Per-epoch CSV telemetry: `losses.csv`, `ssam.csv` and `masks.csv`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::trainer::EpochRecord;

pub const LOSSES_CSV: &str = "losses.csv";
pub const SSAM_CSV: &str = "ssam.csv";
pub const MASKS_CSV: &str = "masks.csv";

fn writer(dir: &Path, name: &str) -> Result<csv::Writer<std::fs::File>> {
    let path = dir.join(name);
    let file = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn join_indices(idx: &[usize]) -> String {
    idx.iter().map(usize::to_string).collect::<Vec<_>>().join(";")
}

/// Writes all three telemetry files into `dir`.
pub fn write_telemetry(history: &[EpochRecord], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let mut w = writer(dir, LOSSES_CSV)?;
    w.write_record(["epoch", "cls", "ortho", "dom", "total"])?;
    for r in history {
        let l = &r.losses;
        w.write_record([
            r.epoch.to_string(),
            l.cls.to_string(),
            l.ortho.to_string(),
            l.dom.to_string(),
            l.total.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir.join(LOSSES_CSV), e))?;

    // K is the budget the monitor hands to the following epoch
    let mut w = writer(dir, SSAM_CSV)?;
    w.write_record(["epoch", "mu", "r_prime", "r", "K"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            r.mu.to_string(),
            r.r_prime.to_string(),
            r.r.to_string(),
            r.k_next.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(dir.join(SSAM_CSV), e))?;

    let mut w = writer(dir, MASKS_CSV)?;
    w.write_record(["epoch", "branch", "K", "suppressed"])?;
    for r in history {
        for (branch, idx) in [("di", &r.di_suppressed), ("ds", &r.ds_suppressed)] {
            w.write_record([r.epoch.to_string(), branch.to_string(), r.k.to_string(), join_indices(idx)])?;
        }
    }
    w.flush().map_err(|e| Error::io(dir.join(MASKS_CSV), e))?;
    Ok(())
}
