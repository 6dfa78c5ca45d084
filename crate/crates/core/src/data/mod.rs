//! Series datasets: synthetic generation, CSV ingestion, windowing, scaling.

mod csv_io;
mod synthetic;
mod windows;
mod zscore;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use csv_io::{load_csv, write_csv, ColumnSpec};
pub use synthetic::{
    generate_sinusoids, generate_synthetic, segment_params, Preset, SegmentParams, SinusoidConfig,
    SyntheticConfig,
};
pub use windows::{make_windows, region_windows, Batch, Split, WindowOptions, WindowPair, WindowSet};
pub use zscore::{zscore_fit_apply, ZScoreStats};

/// Integer train:validation:test proportions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitRatios(pub [u32; 3]);

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios([6, 2, 2])
    }
}

impl SplitRatios {
    pub const WEATHER: SplitRatios = SplitRatios([7, 1, 2]);

    /// `(train_end, val_end)` for a series of `len` steps.
    pub fn boundaries(&self, len: usize) -> Result<(usize, usize)> {
        let [a, b, c] = self.0.map(|v| v as usize);
        let total = a + b + c;
        if a == 0 || b == 0 || total == 0 {
            return Err(Error::Config(format!("invalid split ratios {:?}", self.0)));
        }
        let train_end = len * a / total;
        let val_end = len * (a + b) / total;
        if train_end == 0 || val_end <= train_end || val_end > len {
            return Err(Error::Data(format!(
                "series of {len} steps is too short for split ratios {:?}",
                self.0
            )));
        }
        Ok((train_end, val_end))
    }
}

/// Where a dataset came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Synthetic(SyntheticConfig),
    Sinusoid(SinusoidConfig),
    Csv { path: String, columns: Vec<String> },
    Memory,
}

/// A `[T, D]` series with train/validation/test boundaries.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    pub values: Tensor,
    pub columns: Vec<String>,
    pub train_end: usize,
    pub val_end: usize,
    pub provenance: Provenance,
}

impl SeriesDataset {
    pub fn new(
        values: Tensor,
        columns: Vec<String>,
        train_end: usize,
        val_end: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::Data(format!(
                "series must be [T, D], got {:?}",
                values.shape()
            )));
        }
        let (t, d) = (values.shape()[0], values.shape()[1]);
        if columns.len() != d {
            return Err(Error::Data(format!("{d} variates but {} column names", columns.len())));
        }
        if !(0 < train_end && train_end < val_end && val_end <= t) {
            return Err(Error::Data(format!(
                "invalid split boundaries {train_end}/{val_end} for length {t}"
            )));
        }
        Ok(Self {
            values,
            columns,
            train_end,
            val_end,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn variates(&self) -> usize {
        self.values.shape()[1]
    }

    /// Row `t` as a slice of `D` values.
    pub fn row(&self, t: usize) -> &[f64] {
        let d = self.variates();
        &self.values.data()[t * d..(t + 1) * d]
    }

    /// `(name, start, end)` of the three regions.
    pub fn regions(&self) -> [(&'static str, usize, usize); 3] {
        [
            ("train", 0, self.train_end),
            ("validation", self.train_end, self.val_end),
            ("test", self.val_end, self.len()),
        ]
    }
}

/// JSON record written next to exported series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub provenance: Provenance,
    pub length: usize,
    pub variates: usize,
    pub columns: Vec<String>,
    pub train_end: usize,
    pub val_end: usize,
    pub content_hash: String,
}

impl DatasetManifest {
    pub fn describe(ds: &SeriesDataset) -> Self {
        Self {
            provenance: ds.provenance.clone(),
            length: ds.len(),
            variates: ds.variates(),
            columns: ds.columns.clone(),
            train_end: ds.train_end,
            val_end: ds.val_end,
            content_hash: crate::hash::hash_f64s(ds.values.data()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_boundaries_floor() {
        assert_eq!(SplitRatios::default().boundaries(10).unwrap(), (6, 8));
        assert_eq!(SplitRatios::default().boundaries(10000).unwrap(), (6000, 8000));
        assert_eq!(SplitRatios::WEATHER.boundaries(100).unwrap(), (70, 80));
        assert!(SplitRatios::default().boundaries(1).is_err());
    }
}
