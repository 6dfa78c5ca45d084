//! Piecewise-stationary cosine series whose distribution jumps every `tau` steps.
//!
//! Segment `u` follows `A_u cos(2 pi t / T_u + B_u) + C_u` with its own
//! amplitude, period, phase, and level. The level range widens and drifts
//! downward with the timestamp, so later segments sit outside anything seen
//! earlier.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Provenance, SeriesDataset, SplitRatios};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    #[serde(rename = "synthetic-1")]
    Synthetic1,
    #[serde(rename = "synthetic-2")]
    Synthetic2,
    #[serde(rename = "synthetic-3")]
    Synthetic3,
}

impl Preset {
    pub fn tau(self) -> usize {
        match self {
            Preset::Synthetic1 => 24,
            Preset::Synthetic2 => 12,
            Preset::Synthetic3 => 48,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Synthetic1 => "synthetic-1",
            Preset::Synthetic2 => "synthetic-2",
            Preset::Synthetic3 => "synthetic-3",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic-1" => Ok(Preset::Synthetic1),
            "synthetic-2" => Ok(Preset::Synthetic2),
            "synthetic-3" => Ok(Preset::Synthetic3),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub tau: usize,
    pub total_length: usize,
    pub num_series: usize,
    pub seed: u64,
    /// Periods drawn below this are raised to it; `None` keeps raw draws.
    pub min_period: Option<f64>,
    pub split: SplitRatios,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self::preset(Preset::Synthetic1, 0)
    }
}

impl SyntheticConfig {
    pub fn preset(preset: Preset, seed: u64) -> Self {
        Self {
            tau: preset.tau(),
            total_length: 10_000,
            num_series: 5,
            seed,
            min_period: Some(2.0),
            split: SplitRatios::default(),
        }
    }

    pub fn num_segments(&self) -> usize {
        self.total_length.div_ceil(self.tau)
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau == 0 {
            return Err(Error::Config("tau must be at least 1".into()));
        }
        if self.tau > self.total_length {
            return Err(Error::Config(format!(
                "tau {} exceeds total length {}",
                self.tau, self.total_length
            )));
        }
        if self.num_series == 0 {
            return Err(Error::Config("num_series must be positive".into()));
        }
        Ok(())
    }
}

/// Generating parameters of one segment. `start` is a zero-based row index.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentParams {
    pub start: usize,
    pub len: usize,
    pub amplitude: f64,
    pub period: f64,
    pub phase: f64,
    pub level: f64,
}

impl SegmentParams {
    /// Value at one-based timestamp `t`.
    pub fn value(&self, t: usize) -> f64 {
        self.amplitude * (2.0 * PI * t as f64 / self.period + self.phase).cos() + self.level
    }
}

fn series_rng(seed: u64, series: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(series as u64 + 1);
    rng
}

/// Per-series segment parameters, in time order.
pub fn segment_params(cfg: &SyntheticConfig) -> Result<Vec<Vec<SegmentParams>>> {
    cfg.validate()?;
    let segments = cfg.num_segments();
    Ok((0..cfg.num_series)
        .map(|i| {
            let mut rng = series_rng(cfg.seed, i);
            (0..segments)
                .map(|u| {
                    let start = u * cfg.tau;
                    let len = cfg.tau.min(cfg.total_length - start);
                    let amplitude = rng.gen_range(-1000.0..1000.0);
                    let mut period: f64 = rng.gen_range(0.0..100.0);
                    if let Some(min) = cfg.min_period {
                        period = period.max(min);
                    }
                    // a zero period would divide by zero; the open interval excludes it
                    if period == 0.0 {
                        period = f64::MIN_POSITIVE;
                    }
                    let phase = rng.gen_range(0.0..100.0);
                    // level range uses the segment's first one-based timestamp
                    let k = (start + 1).div_ceil(100) as f64;
                    let level = rng.gen_range(-100.0 * k..-50.0 * k);
                    SegmentParams {
                        start,
                        len,
                        amplitude,
                        period,
                        phase,
                        level,
                    }
                })
                .collect()
        })
        .collect())
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SeriesDataset> {
    let params = segment_params(cfg)?;
    let (t_len, d) = (cfg.total_length, cfg.num_series);
    let mut data = vec![0.0; t_len * d];
    for (i, segments) in params.iter().enumerate() {
        for seg in segments {
            for row in seg.start..seg.start + seg.len {
                data[row * d + i] = seg.value(row + 1);
            }
        }
    }
    let values = Tensor::new(vec![t_len, d], data)?;
    let (train_end, val_end) = cfg.split.boundaries(t_len)?;
    SeriesDataset::new(
        values,
        (0..d).map(|i| format!("series_{i}")).collect(),
        train_end,
        val_end,
        Provenance::Synthetic(cfg.clone()),
    )
}

/// Noiseless sums of sinusoids. Every window of such a series is an exact
/// linear function of the preceding lookback, so a linear backbone can fit
/// it to zero error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SinusoidConfig {
    pub total_length: usize,
    pub num_series: usize,
    /// Periods of the components; series `i` shifts every phase by `i`.
    pub periods: Vec<f64>,
    pub split: SplitRatios,
}

impl Default for SinusoidConfig {
    fn default() -> Self {
        Self {
            total_length: 1000,
            num_series: 2,
            periods: vec![24.0, 7.0],
            split: SplitRatios::default(),
        }
    }
}

pub fn generate_sinusoids(cfg: &SinusoidConfig) -> Result<SeriesDataset> {
    if cfg.total_length == 0 || cfg.num_series == 0 || cfg.periods.is_empty() {
        return Err(Error::Config("sinusoid dataset needs length, series and periods".into()));
    }
    let d = cfg.num_series;
    let mut data = Vec::with_capacity(cfg.total_length * d);
    for t in 0..cfg.total_length {
        for i in 0..d {
            let v: f64 = cfg
                .periods
                .iter()
                .enumerate()
                .map(|(k, p)| (2.0 * PI * t as f64 / p + i as f64).sin() / (k + 1) as f64)
                .sum();
            data.push(v);
        }
    }
    let values = Tensor::new(vec![cfg.total_length, d], data)?;
    let (train_end, val_end) = cfg.split.boundaries(cfg.total_length)?;
    SeriesDataset::new(
        values,
        (0..d).map(|i| format!("series_{i}")).collect(),
        train_end,
        val_end,
        Provenance::Sinusoid(cfg.clone()),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_1_segment_count_and_tail() {
        let cfg = SyntheticConfig::preset(Preset::Synthetic1, 7);
        assert_eq!(cfg.num_segments(), 417);
        let segs = segment_params(&cfg).unwrap();
        assert_eq!(segs.len(), 5);
        let last = segs[0].last().unwrap();
        assert_eq!(last.start, 416 * 24);
        assert_eq!(last.len, 16);
    }

    #[test]
    fn presets_set_tau() {
        assert_eq!(SyntheticConfig::preset(Preset::Synthetic1, 0).tau, 24);
        assert_eq!(SyntheticConfig::preset(Preset::Synthetic2, 0).tau, 12);
        assert_eq!(SyntheticConfig::preset(Preset::Synthetic3, 0).tau, 48);
    }

    #[test]
    fn tau_longer_than_series_is_rejected() {
        let cfg = SyntheticConfig {
            tau: 50,
            total_length: 40,
            ..SyntheticConfig::default()
        };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn fixed_seed_is_deterministic_and_seeds_differ() {
        let cfg = SyntheticConfig {
            total_length: 500,
            ..SyntheticConfig::preset(Preset::Synthetic2, 11)
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.values, b.values);
        let c = generate_synthetic(&SyntheticConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.values, c.values);
    }

    #[test]
    fn series_use_distinct_streams() {
        let cfg = SyntheticConfig {
            total_length: 200,
            ..SyntheticConfig::default()
        };
        let segs = segment_params(&cfg).unwrap();
        assert_ne!(segs[0][0].amplitude, segs[1][0].amplitude);
    }

    #[test]
    fn values_follow_segment_law_and_ranges() {
        let cfg = SyntheticConfig {
            total_length: 1000,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let segs = segment_params(&cfg).unwrap();
        for (i, series) in segs.iter().enumerate() {
            for seg in series {
                assert!(seg.amplitude > -1000.0 && seg.amplitude < 1000.0);
                assert!(seg.period >= 2.0 && seg.period < 100.0);
                assert!(seg.phase >= 0.0 && seg.phase < 100.0);
                let k = (seg.start + 1).div_ceil(100) as f64;
                assert!(seg.level >= -100.0 * k && seg.level < -50.0 * k);
                for row in seg.start..seg.start + seg.len {
                    assert_eq!(ds.row(row)[i], seg.value(row + 1));
                }
            }
        }
    }

    #[test]
    fn cosine_repeats_after_whole_period() {
        let seg = SegmentParams {
            start: 0,
            len: 24,
            amplitude: 300.0,
            period: 12.0,
            phase: 1.3,
            level: -80.0,
        };
        for t in 1..=12 {
            assert!((seg.value(t) - seg.value(t + 12)).abs() < 1e-9);
        }
    }

    #[test]
    fn default_split_is_6000_2000_2000() {
        let ds = generate_synthetic(&SyntheticConfig::preset(Preset::Synthetic3, 0)).unwrap();
        assert_eq!((ds.train_end, ds.val_end, ds.len()), (6000, 8000, 10000));
    }
}
