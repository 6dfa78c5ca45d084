//! Header-row, comma-separated series files.

use std::path::Path;

use super::{Provenance, SeriesDataset, SplitRatios};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const TIME_COLUMNS: [&str; 4] = ["t", "date", "time", "timestamp"];

/// Which columns become variates.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum ColumnSpec {
    /// Every column except a leading time/date column.
    #[default]
    All,
    Named(Vec<String>),
}

pub fn load_csv(path: impl AsRef<Path>, spec: &ColumnSpec, ratios: SplitRatios) -> Result<SeriesDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let header: Vec<String> = reader.headers()?.iter().map(|h| h.trim().to_string()).collect();
    if header.is_empty() || header.iter().all(String::is_empty) {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    let selected: Vec<(usize, String)> = match spec {
        ColumnSpec::All => header
            .iter()
            .enumerate()
            .filter(|(_, h)| !TIME_COLUMNS.contains(&h.to_ascii_lowercase().as_str()))
            .map(|(i, h)| (i, h.clone()))
            .collect(),
        ColumnSpec::Named(names) => names
            .iter()
            .map(|n| {
                header
                    .iter()
                    .position(|h| h == n)
                    .map(|i| (i, n.clone()))
                    .ok_or_else(|| Error::Data(format!("column `{n}` not found in {}", path.display())))
            })
            .collect::<Result<_>>()?,
    };
    if selected.is_empty() {
        return Err(Error::Data(format!("no value columns selected in {}", path.display())));
    }

    let mut data = Vec::new();
    let mut rows = 0;
    for (r, record) in reader.records().enumerate() {
        let record = record?;
        for (i, name) in &selected {
            let cell = record.get(*i).unwrap_or("").trim();
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!("row {}, column `{name}`: cannot parse `{cell}` as a number", r + 1))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("row {}, column `{name}`: value is {cell}", r + 1)));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::Data(format!("{} has no data rows", path.display())));
    }
    let columns: Vec<String> = selected.into_iter().map(|(_, n)| n).collect();
    let values = Tensor::new(vec![rows, columns.len()], data)?;
    let (train_end, val_end) = ratios.boundaries(rows)?;
    SeriesDataset::new(
        values,
        columns.clone(),
        train_end,
        val_end,
        Provenance::Csv {
            path: path.display().to_string(),
            columns,
        },
    )
}

/// Write `t,<columns...>` with one-based timestamps. Floats use the shortest
/// round-trip representation, so reloading gives identical values.
pub fn write_csv(ds: &SeriesDataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut writer = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend(ds.columns.iter().cloned());
    writer.write_record(&header)?;
    for t in 0..ds.len() {
        let mut rec = vec![(t + 1).to_string()];
        rec.extend(ds.row(t).iter().map(|v| v.to_string()));
        writer.write_record(&rec)?;
    }
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
