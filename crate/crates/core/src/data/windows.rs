//! Lookback/horizon window extraction and batch assembly.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::SeriesDataset;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Role a window plays. Every window carries its role so training code can
/// assert it only ever differentiates the split it is supposed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    InnerTrain,
    OuterVal,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::InnerTrain => "inner_train",
            Split::OuterVal => "outer_val",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

/// `x = s[anchor-L..anchor]`, `y = s[anchor..anchor+H]` with zero-based rows.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPair {
    pub x: Tensor,
    pub y: Tensor,
    pub anchor: usize,
    pub split: Split,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowOptions {
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
    /// Cut the training anchors into inner_train and outer_val.
    pub use_bilevel: bool,
}

impl Default for WindowOptions {
    fn default() -> Self {
        Self {
            lookback: 48,
            horizon: 48,
            stride: 1,
            use_bilevel: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WindowSet {
    /// Training-region windows in time order: inner_train first, then outer_val.
    pub train: Vec<WindowPair>,
    pub validation: Vec<WindowPair>,
    pub test: Vec<WindowPair>,
    pub options: WindowOptions,
}

impl WindowSet {
    pub fn inner(&self) -> impl Iterator<Item = &WindowPair> {
        self.train.iter().filter(|w| w.split == Split::InnerTrain)
    }

    pub fn outer(&self) -> impl Iterator<Item = &WindowPair> {
        self.train.iter().filter(|w| w.split == Split::OuterVal)
    }

    pub fn split(&self, split: Split) -> Vec<&WindowPair> {
        match split {
            Split::InnerTrain => self.inner().collect(),
            Split::OuterVal => self.outer().collect(),
            Split::Validation => self.validation.iter().collect(),
            Split::Test => self.test.iter().collect(),
        }
    }

    /// Digest of every (split, anchor) pair; equal digests mean equal window sets.
    pub fn anchor_hash(&self) -> String {
        let mut h = Sha256::new();
        for w in self.train.iter().chain(&self.validation).chain(&self.test) {
            h.update(w.split.as_str().as_bytes());
            h.update((w.anchor as u64).to_le_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Windows whose lookback and horizon both lie inside `[start, end)`.
pub fn region_windows(
    ds: &SeriesDataset,
    region: &str,
    start: usize,
    end: usize,
    opts: &WindowOptions,
    split: Split,
) -> Result<Vec<WindowPair>> {
    let (l, h) = (opts.lookback, opts.horizon);
    if l == 0 || h == 0 || opts.stride == 0 {
        return Err(Error::Config("lookback, horizon and stride must be positive".into()));
    }
    let len = end.saturating_sub(start);
    if len < l + h {
        return Err(Error::Sizing {
            region: region.to_string(),
            len,
            needed: l + h,
        });
    }
    let d = ds.variates();
    let data = ds.values.data();
    let take = |from: usize, to: usize| Tensor::new(vec![to - from, d], data[from * d..to * d].to_vec());
    (start + l..=end - h)
        .step_by(opts.stride)
        .map(|anchor| {
            Ok(WindowPair {
                x: take(anchor - l, anchor)?,
                y: take(anchor, anchor + h)?,
                anchor,
                split,
            })
        })
        .collect()
}

pub fn make_windows(ds: &SeriesDataset, opts: &WindowOptions) -> Result<WindowSet> {
    let [train, val, test] = ds.regions();
    let mut train_w = region_windows(ds, train.0, train.1, train.2, opts, Split::InnerTrain)?;
    if opts.use_bilevel {
        let n = train_w.len();
        let n_inner = n * 9 / 10;
        if n_inner == 0 || n_inner == n {
            return Err(Error::Sizing {
                region: "train (inner/outer cut)".into(),
                len: n,
                needed: 10,
            });
        }
        for w in &mut train_w[n_inner..] {
            w.split = Split::OuterVal;
        }
    }
    Ok(WindowSet {
        train: train_w,
        validation: region_windows(ds, val.0, val.1, val.2, opts, Split::Validation)?,
        test: region_windows(ds, test.0, test.1, test.2, opts, Split::Test)?,
        options: *opts,
    })
}

/// Stacked windows: `x [B, L, D]`, `y [B, H, D]`.
#[derive(Clone, Debug)]
pub struct Batch {
    pub x: Tensor,
    pub y: Tensor,
    pub anchors: Vec<usize>,
    pub splits: Vec<Split>,
}

impl Batch {
    pub fn from_windows(windows: &[&WindowPair]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::Contract("cannot build an empty batch".into()))?;
        let (xs, ys) = (first.x.shape().to_vec(), first.y.shape().to_vec());
        let b = windows.len();
        let mut x = Vec::with_capacity(b * first.x.numel());
        let mut y = Vec::with_capacity(b * first.y.numel());
        for w in windows {
            if w.x.shape() != xs.as_slice() || w.y.shape() != ys.as_slice() {
                return Err(Error::dim("batch", w.x.shape(), &xs));
            }
            x.extend_from_slice(w.x.data());
            y.extend_from_slice(w.y.data());
        }
        Ok(Self {
            x: Tensor::new(vec![b, xs[0], xs[1]], x)?,
            y: Tensor::new(vec![b, ys[0], ys[1]], y)?,
            anchors: windows.iter().map(|w| w.anchor).collect(),
            splits: windows.iter().map(|w| w.split).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    /// Error unless every window came from `split`.
    pub fn assert_split(&self, split: Split, step: &str) -> Result<()> {
        match self.splits.iter().zip(&self.anchors).find(|(s, _)| **s != split) {
            None => Ok(()),
            Some((s, a)) => Err(Error::Contract(format!(
                "{step} step received a {} window (anchor {a}); only {} windows are allowed",
                s.as_str(),
                split.as_str()
            ))),
        }
    }

    pub fn anchor_range(&self) -> (usize, usize) {
        let lo = self.anchors.iter().copied().min().unwrap_or(0);
        let hi = self.anchors.iter().copied().max().unwrap_or(0);
        (lo, hi)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Provenance;

    fn ramp(t: usize, d: usize, train_end: usize, val_end: usize) -> SeriesDataset {
        let data = (0..t * d).map(|i| i as f64).collect();
        SeriesDataset::new(
            Tensor::new(vec![t, d], data).unwrap(),
            (0..d).map(|i| format!("v{i}")).collect(),
            train_end,
            val_end,
            Provenance::Memory,
        )
        .unwrap()
    }

    fn opts(l: usize, h: usize) -> WindowOptions {
        WindowOptions {
            lookback: l,
            horizon: h,
            stride: 1,
            use_bilevel: false,
        }
    }

    #[test]
    fn ten_steps_three_two_gives_six_windows() {
        let ds = ramp(10, 1, 5, 8);
        let w = region_windows(&ds, "all", 0, 10, &opts(3, 2), Split::Test).unwrap();
        assert_eq!(w.iter().map(|w| w.anchor).collect::<Vec<_>>(), vec![3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn exact_fit_gives_one_window_and_short_region_names_itself() {
        let ds = ramp(10, 1, 5, 8);
        assert_eq!(region_windows(&ds, "r", 0, 5, &opts(3, 2), Split::Test).unwrap().len(), 1);
        let err = region_windows(&ds, "validation", 5, 8, &opts(3, 2), Split::Test).unwrap_err();
        assert!(matches!(err, Error::Sizing { ref region, len: 3, needed: 5 } if region == "validation"));
    }

    #[test]
    fn window_concatenation_reproduces_series() {
        let ds = ramp(30, 2, 20, 25);
        let w = region_windows(&ds, "r", 0, 20, &opts(4, 3), Split::Test).unwrap();
        for win in &w {
            let mut joined = win.x.data().to_vec();
            joined.extend_from_slice(win.y.data());
            assert_eq!(joined.as_slice(), &ds.values.data()[(win.anchor - 4) * 2..(win.anchor + 3) * 2]);
        }
    }

    #[test]
    fn bilevel_cut_is_ninety_ten_in_time_order() {
        // 104 training steps with L+H=5 give exactly 100 anchors
        let ds = ramp(140, 1, 104, 120);
        let set = make_windows(
            &ds,
            &WindowOptions {
                use_bilevel: true,
                ..opts(3, 2)
            },
        )
        .unwrap();
        let inner: Vec<_> = set.inner().map(|w| w.anchor).collect();
        let outer: Vec<_> = set.outer().map(|w| w.anchor).collect();
        assert_eq!((inner.len(), outer.len()), (90, 10));
        assert_eq!(inner, (3..93).collect::<Vec<_>>());
        assert_eq!(outer, (93..103).collect::<Vec<_>>());
    }

    #[test]
    fn batch_provenance_is_checked() {
        let ds = ramp(140, 1, 104, 120);
        let set = make_windows(&ds, &WindowOptions { use_bilevel: true, ..opts(3, 2) }).unwrap();
        let mixed: Vec<&WindowPair> = set.train[88..92].iter().collect();
        let b = Batch::from_windows(&mixed).unwrap();
        assert_eq!(b.x.shape(), &[4, 3, 1]);
        assert!(b.assert_split(Split::InnerTrain, "theta").is_err());
        let pure: Vec<&WindowPair> = set.train[..4].iter().collect();
        Batch::from_windows(&pure).unwrap().assert_split(Split::InnerTrain, "theta").unwrap();
    }

    #[test]
    fn anchor_hash_tracks_windows() {
        let ds = ramp(140, 1, 104, 120);
        let a = make_windows(&ds, &WindowOptions { use_bilevel: true, ..opts(3, 2) }).unwrap();
        let b = make_windows(&ds, &WindowOptions { use_bilevel: true, ..opts(3, 2) }).unwrap();
        let c = make_windows(&ds, &WindowOptions { use_bilevel: true, ..opts(4, 2) }).unwrap();
        assert_eq!(a.anchor_hash(), b.anchor_hash());
        assert_ne!(a.anchor_hash(), c.anchor_hash());
    }
}
