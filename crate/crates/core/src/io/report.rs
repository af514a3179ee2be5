//! Calibration reports as CSV.
//!
//! One row per structure with the columns of [`REPORT_COLUMNS`]. Probabilities
//! and DSC are fractions, fold columns are fractions of voxels, entropies are
//! in nats. `spearman_r` is empty when fewer than two pairs contain the
//! structure.

use std::fs;
use std::path::Path;

use crate::eval::CalibrationRow;
use crate::{Error, Result};

pub const REPORT_COLUMNS: [&str; 13] = [
    "structure",
    "dsc_mu",
    "dsc_zbar",
    "dsc_oracle",
    "fold_mu",
    "fold_zbar",
    "fold_oracle",
    "ece",
    "ause_label",
    "ause_disp",
    "label_entropy",
    "disp_entropy",
    "spearman_r",
];

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidConfig(format!("csv: {e}"))
}

pub fn report_csv(rows: &[CalibrationRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    // serde derives the header from the field names, which match REPORT_COLUMNS
    for r in rows {
        w.serialize(r).expect("writing to memory");
    }
    if rows.is_empty() {
        w.write_record(REPORT_COLUMNS).expect("writing to memory");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv is utf-8")
}

pub fn write_report(path: impl AsRef<Path>, rows: &[CalibrationRow]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, report_csv(rows)).map_err(|e| Error::io(path, e))
}

pub fn read_report(path: impl AsRef<Path>) -> Result<Vec<CalibrationRow>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_owned).collect();
    if header != REPORT_COLUMNS {
        return Err(Error::InvalidConfig(format!(
            "{}: unexpected report columns {header:?}",
            path.display()
        )));
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}
