//! CSV metric reports: one row per frame plus a summary row.

use std::path::Path;

use sdpc_core::metrics::RdPoint;

use crate::error::{CliError, CliResult};

pub const HEADER: [&str; 5] = ["frame", "type", "bytes", "bpp", "d1_psnr"];
pub const SUMMARY: &str = "all";

#[derive(Clone, Debug, PartialEq)]
pub struct Row {
    pub frame: String,
    pub kind: String,
    pub bytes: u64,
    pub bpp: f64,
    pub d1_psnr: f64,
}

pub fn write(path: &Path, rows: &[Row]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(HEADER)?;
    for r in rows {
        w.write_record([
            r.frame.clone(),
            r.kind.clone(),
            r.bytes.to_string(),
            format!("{:.6}", r.bpp),
            format!("{:.6}", r.d1_psnr),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read(path: &Path) -> CliResult<Vec<Row>> {
    let mut r = csv::Reader::from_path(path)?;
    if r.headers()?.iter().ne(HEADER) {
        return Err(CliError::Usage(format!("{}: not a metric report", path.display())));
    }
    let bad = |what: &str| CliError::Usage(format!("{}: bad {what} value", path.display()));
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(Row {
            frame: rec[0].to_string(),
            kind: rec[1].to_string(),
            bytes: rec[2].parse().map_err(|_| bad("bytes"))?,
            bpp: rec[3].parse().map_err(|_| bad("bpp"))?,
            d1_psnr: rec[4].parse().map_err(|_| bad("d1_psnr"))?,
        });
    }
    Ok(rows)
}

/// Rate-distortion point of a report's summary row.
pub fn summary_point(path: &Path) -> CliResult<RdPoint> {
    let rows = read(path)?;
    let s = rows
        .iter()
        .find(|r| r.frame == SUMMARY)
        .ok_or_else(|| CliError::Usage(format!("{}: no summary row", path.display())))?;
    Ok(RdPoint { rate: s.bpp, quality: s.d1_psnr })
}
