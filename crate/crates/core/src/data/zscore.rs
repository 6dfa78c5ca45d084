use serde::{Deserialize, Serialize};

use super::SeriesDataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Per-variate mean and population standard deviation of the training region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScoreStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ZScoreStats {
    pub fn fit(ds: &SeriesDataset) -> Result<Self> {
        let d = ds.variates();
        let n = ds.train_end as f64;
        let mut mean = vec![0.0; d];
        for t in 0..ds.train_end {
            for (m, v) in mean.iter_mut().zip(ds.row(t)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for t in 0..ds.train_end {
            for ((s, v), m) in var.iter_mut().zip(ds.row(t)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std: Vec<f64> = var.iter().map(|s| (s / n).sqrt()).collect();
        if let Some(i) = std.iter().position(|&s| s == 0.0) {
            return Err(Error::Data(format!(
                "variate `{}` is constant over the training region; exclude it",
                ds.columns[i]
            )));
        }
        Ok(Self { mean, std })
    }

    pub fn variates(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.shape().last() != Some(&self.variates()) {
            return Err(Error::dim("zscore", x.shape(), &[self.variates()]));
        }
        Ok(())
    }

    /// Standardize any tensor whose trailing axis is the variate axis.
    pub fn apply(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let d = self.variates();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| (v - self.mean[i % d]) / self.std[i % d])
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    pub fn invert(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let d = self.variates();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * self.std[i % d] + self.mean[i % d])
            .collect();
        Tensor::new(x.shape().to_vec(), data)
    }
}

/// Standardize every region with statistics of the training region.
pub fn zscore_fit_apply(ds: &SeriesDataset) -> Result<(SeriesDataset, ZScoreStats)> {
    let stats = ZScoreStats::fit(ds)?;
    let values = stats.apply(&ds.values)?;
    Ok((
        SeriesDataset {
            values,
            ..ds.clone()
        },
        stats,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;

    fn dataset(values: Vec<f64>, d: usize, train_end: usize) -> SeriesDataset {
        let t = values.len() / d;
        SeriesDataset::new(
            Tensor::new(vec![t, d], values).unwrap(),
            (0..d).map(|i| format!("v{i}")).collect(),
            train_end,
            train_end + 1,
            Provenance::Memory,
        )
        .unwrap()
    }

    #[test]
    fn endpoints_map_to_unit() {
        let ds = dataset(vec![0.0, 10.0, 99.0], 1, 2);
        let (z, stats) = zscore_fit_apply(&ds).unwrap();
        assert_eq!(stats.mean, vec![5.0]);
        assert_eq!(stats.std, vec![5.0]);
        assert_eq!(&z.values.data()[..2], &[-1.0, 1.0]);
    }

    #[test]
    fn roundtrip_and_test_region_does_not_leak() {
        let vals: Vec<f64> = (0..40).map(|i| ((i * 37) % 11) as f64 * 1.7 - 3.0).collect();
        let ds = dataset(vals.clone(), 2, 12);
        let (z, stats) = zscore_fit_apply(&ds).unwrap();
        let back = stats.invert(&z.values).unwrap();
        assert!(back.max_abs_diff(&ds.values).unwrap() < 1e-9);

        let mut changed = vals;
        changed[39] = 1e6;
        let (_, stats2) = zscore_fit_apply(&dataset(changed, 2, 12)).unwrap();
        assert_eq!(stats, stats2);
    }

    #[test]
    fn constant_variate_is_rejected() {
        let ds = dataset(vec![1.0, 2.0, 1.0, 3.0, 1.0, 4.0], 2, 2);
        let err = zscore_fit_apply(&ds).unwrap_err();
        assert!(err.to_string().contains("`v0`"));
    }
}
