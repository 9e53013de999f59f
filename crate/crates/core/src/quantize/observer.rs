//! Range observers used during calibration.

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::numcore::Tensor;

/// Percentile used for activation clipping unless configured otherwise.
pub const DEFAULT_PERCENTILE: f64 = 99.99;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverKind {
    MinMax,
    Percentile(f64),
}

impl ObserverKind {
    pub fn validate(&self) -> Result<()> {
        if let ObserverKind::Percentile(p) = *self {
            if !(p > 0.0 && p <= 100.0) {
                return Err(QuantError::Config(format!("percentile {p} outside (0, 100]")));
            }
        }
        Ok(())
    }
}

/// 1-based nearest-rank index `ceil(p/100 * n)`, clamped to `[1, n]`.
///
/// Products that land within rounding noise of an integer are treated as that
/// integer, so `99.99% of 10000` is rank 9999 rather than 10000.
pub fn nearest_rank(p: f64, n: usize) -> usize {
    let v = p / 100.0 * n as f64;
    let r = v.round();
    let rank = if (v - r).abs() <= 1e-9 * v.abs().max(1.0) { r } else { v.ceil() };
    (rank as usize).clamp(1, n.max(1))
}

fn kth_smallest(values: &mut [f64], rank: usize) -> f64 {
    let (_, v, _) = values.select_nth_unstable_by(rank - 1, f64::total_cmp);
    *v
}

/// Accumulates range statistics over calibration batches.
///
/// `MinMax` keeps running extrema; `Percentile` pools every observed value
/// (desk-scale calibration sets fit in memory) and evaluates nearest-rank
/// order statistics at the end.
#[derive(Debug, Clone)]
pub struct Observer {
    kind: ObserverKind,
    axis: Option<usize>,
    mins: Vec<f64>,
    maxs: Vec<f64>,
    samples: Vec<Vec<f64>>,
    batches: usize,
}

impl Observer {
    pub fn new(kind: ObserverKind, axis: Option<usize>) -> Result<Self> {
        kind.validate()?;
        Ok(Observer {
            kind,
            axis,
            mins: Vec::new(),
            maxs: Vec::new(),
            samples: Vec::new(),
            batches: 0,
        })
    }

    pub fn kind(&self) -> ObserverKind {
        self.kind
    }

    pub fn batches(&self) -> usize {
        self.batches
    }

    pub fn observe(&mut self, t: &Tensor) -> Result<()> {
        if t.numel() == 0 {
            return Err(QuantError::Calibration("empty batch".into()));
        }
        if let Some(v) = t.data().iter().find(|v| !v.is_finite()) {
            return Err(QuantError::Calibration(format!("non-finite value {v} observed")));
        }
        let channels = match self.axis {
            None => 1,
            Some(axis) => *t.shape().get(axis).ok_or_else(|| QuantError::Dimension {
                op: "observe",
                lhs: t.shape().to_vec(),
                rhs: vec![axis],
            })?,
        };
        if self.batches == 0 {
            self.mins = vec![f64::INFINITY; channels];
            self.maxs = vec![f64::NEG_INFINITY; channels];
            self.samples = vec![Vec::new(); channels];
        } else if channels != self.mins.len() {
            return Err(QuantError::Dimension {
                op: "observe",
                lhs: t.shape().to_vec(),
                rhs: vec![self.mins.len()],
            });
        }
        let pool = matches!(self.kind, ObserverKind::Percentile(_));
        for (i, &v) in t.data().iter().enumerate() {
            let c = match self.axis {
                None => 0,
                Some(axis) => Tensor::channel_of(t.shape(), axis, i),
            };
            self.mins[c] = self.mins[c].min(v);
            self.maxs[c] = self.maxs[c].max(v);
            if pool {
                self.samples[c].push(v);
            }
        }
        self.batches += 1;
        Ok(())
    }

    /// Raw `(x_min, x_max)`: scalars per-tensor, vectors per-channel.
    pub fn range(&self) -> Result<(Tensor, Tensor)> {
        if self.batches == 0 {
            return Err(QuantError::Calibration("no data observed".into()));
        }
        let (lo, hi): (Vec<f64>, Vec<f64>) = match self.kind {
            ObserverKind::MinMax => (self.mins.clone(), self.maxs.clone()),
            ObserverKind::Percentile(p) => self
                .samples
                .iter()
                .zip(&self.mins)
                .map(|(s, &min)| percentile_range(s, p, min >= 0.0))
                .unzip(),
        };
        Ok(match self.axis {
            None => (Tensor::scalar(lo[0]), Tensor::scalar(hi[0])),
            Some(_) => (Tensor::vector(lo), Tensor::vector(hi)),
        })
    }
}

/// Nearest-rank clipping range of `values`. Nonnegative data only clips the
/// upper tail; signed data clips both tails at ranks `p` and `100 - p`.
pub fn percentile_range(values: &[f64], p: f64, nonnegative: bool) -> (f64, f64) {
    let mut buf = values.to_vec();
    let n = buf.len();
    let hi = kth_smallest(&mut buf, nearest_rank(p, n));
    let lo = if nonnegative {
        kth_smallest(&mut buf, 1)
    } else {
        kth_smallest(&mut buf, nearest_rank(100.0 - p, n))
    };
    if lo > hi {
        (hi, lo)
    } else {
        (lo, hi)
    }
}

/// Runs an observer over every batch and returns the raw range.
pub fn calibrate(kind: ObserverKind, axis: Option<usize>, batches: &[Tensor]) -> Result<(Tensor, Tensor)> {
    if batches.is_empty() {
        return Err(QuantError::Calibration("no calibration batches".into()));
    }
    let mut obs = Observer::new(kind, axis)?;
    for b in batches {
        obs.observe(b)?;
    }
    obs.range()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minmax_exact_extrema() {
        let (lo, hi) = calibrate(ObserverKind::MinMax, None, &[Tensor::vector(vec![-1.0, 0.5, 2.0])]).unwrap();
        assert_eq!((lo.item(), hi.item()), (-1.0, 2.0));
    }

    #[test]
    fn minmax_pools_batches() {
        let (lo, hi) = calibrate(
            ObserverKind::MinMax,
            None,
            &[Tensor::vector(vec![0.1, 0.5]), Tensor::vector(vec![-0.7, 0.2])],
        )
        .unwrap();
        assert_eq!((lo.item(), hi.item()), (-0.7, 0.5));
    }

    #[test]
    fn per_channel_minmax() {
        let t = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 10.0]).unwrap();
        let (lo, hi) = calibrate(ObserverKind::MinMax, Some(0), &[t]).unwrap();
        assert_eq!(lo.data(), &[0.0, 0.0]);
        assert_eq!(hi.data(), &[1.0, 10.0]);
    }

    #[test]
    fn percentile_of_one_to_ten_thousand() {
        let values: Vec<f64> = (1..=10000).map(|v| v as f64).collect();
        assert_eq!(nearest_rank(99.99, 10000), 9999);
        let (lo, hi) = calibrate(ObserverKind::Percentile(99.99), None, &[Tensor::vector(values)]).unwrap();
        assert_eq!(hi.item(), 9999.0);
        assert_eq!(lo.item(), 1.0);
    }

    #[test]
    fn percentile_signed_clips_both_tails() {
        let values: Vec<f64> = (-50..=49).map(|v| v as f64).collect();
        let (lo, hi) = percentile_range(&values, 99.0, false);
        assert_eq!(hi, 48.0);
        assert_eq!(lo, -50.0);
        let (lo, hi) = percentile_range(&values, 95.0, false);
        assert_eq!((lo, hi), (-46.0, 44.0));
    }

    #[test]
    fn empty_and_invalid_inputs() {
        assert!(matches!(
            calibrate(ObserverKind::MinMax, None, &[]),
            Err(QuantError::Calibration(_))
        ));
        assert!(Observer::new(ObserverKind::Percentile(0.0), None).is_err());
        assert!(Observer::new(ObserverKind::Percentile(100.5), None).is_err());
        assert!(Observer::new(ObserverKind::MinMax, None).unwrap().range().is_err());
    }
}
