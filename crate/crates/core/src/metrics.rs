//! Confusion-matrix accumulation and per-class / mean accuracy and IoU.

use std::fmt::Write as _;

use crate::data::LabelMap;
use crate::error::{Error, Result};

/// `counts[gt * classes + pred]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Shape(format!("{} counts for {classes} classes", counts.len())));
        }
        Ok(Self { classes, counts })
    }

    #[inline]
    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        pred.check_range(self.classes)?;
        gt.check_range(self.classes)?;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            self.counts[g as usize * self.classes + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape(format!("merging {} classes into {}", other.classes, self.classes)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class accuracy (recall) and IoU. A class with no ground-truth
    /// pixels has no accuracy; one absent from both ground truth and
    /// prediction has no IoU. Undefined entries are left out of the means, as
    /// is class 0 when `exclude_background` is set.
    pub fn summarize(&self, exclude_background: bool) -> MetricsSummary {
        let c = self.classes;
        let mut acc = Vec::with_capacity(c);
        let mut iou = Vec::with_capacity(c);
        let (mut acc_ratios, mut iou_ratios) = (Vec::new(), Vec::new());
        for k in 0..c {
            let tp = self.get(k, k);
            let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
            let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
            let union = row + col - tp;
            acc.push((row > 0).then(|| tp as f64 / row as f64));
            iou.push((union > 0).then(|| tp as f64 / union as f64));
            if exclude_background && k == 0 {
                continue;
            }
            if row > 0 {
                acc_ratios.push((tp, row));
            }
            if union > 0 {
                iou_ratios.push((tp, union));
            }
        }
        MetricsSummary {
            macc: mean_of_ratios(&acc_ratios),
            miou: mean_of_ratios(&iou_ratios),
            acc,
            iou,
            pixels: self.total(),
            exclude_background,
        }
    }
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// Mean of `num / den` ratios. The sum is kept as a reduced fraction so the
/// result is correctly rounded whenever numerator and denominator fit in 53
/// bits; larger fractions fall back to summing the `f64` ratios in order.
pub fn mean_of_ratios(ratios: &[(u64, u64)]) -> Option<f64> {
    if ratios.is_empty() {
        return None;
    }
    let exact = || -> Option<f64> {
        let (mut num, mut den) = (0u128, 1u128);
        for &(a, b) in ratios {
            let (a, b) = (a as u128, b as u128);
            num = num.checked_mul(b)?.checked_add(a.checked_mul(den)?)?;
            den = den.checked_mul(b)?;
            let g = gcd(num, den).max(1);
            (num, den) = (num / g, den / g);
        }
        den = den.checked_mul(ratios.len() as u128)?;
        let g = gcd(num, den).max(1);
        (num, den) = (num / g, den / g);
        const LIMIT: u128 = 1 << 53;
        (num <= LIMIT && den <= LIMIT).then(|| num as f64 / den as f64)
    };
    exact().or_else(|| Some(ratios.iter().map(|&(a, b)| a as f64 / b as f64).sum::<f64>() / ratios.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsSummary {
    pub acc: Vec<Option<f64>>,
    pub iou: Vec<Option<f64>>,
    pub macc: Option<f64>,
    pub miou: Option<f64>,
    pub pixels: u64,
    pub exclude_background: bool,
}

/// Shortest representation that parses back to the same `f64`.
fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "absent".to_string(), |x| format!("{x}"))
}

impl MetricsSummary {
    /// Flat `key=value` lines; keys are prefixed with `prefix` when non-empty.
    pub fn to_key_values(&self, prefix: &str, class_names: &[String]) -> String {
        let key = |k: &str| if prefix.is_empty() { k.to_string() } else { format!("{prefix}.{k}") };
        let mut out = String::new();
        let _ = writeln!(out, "{}={}", key("pixels"), self.pixels);
        let _ = writeln!(out, "{}={}", key("mAcc"), fmt_opt(self.macc));
        let _ = writeln!(out, "{}={}", key("mIoU"), fmt_opt(self.miou));
        for (c, (a, i)) in self.acc.iter().zip(&self.iou).enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
            let _ = writeln!(out, "{}={}", key(&format!("acc.{name}")), fmt_opt(*a));
            let _ = writeln!(out, "{}={}", key(&format!("iou.{name}")), fmt_opt(*i));
        }
        out
    }

    /// One row per class: `split,class_id,class_name,acc,iou`, then a `mean` row.
    pub fn to_csv_rows(&self, split: &str, class_names: &[String]) -> String {
        let mut out = String::new();
        for (c, (a, i)) in self.acc.iter().zip(&self.iou).enumerate() {
            let name = class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}"));
            let _ = writeln!(out, "{split},{c},{name},{},{}", fmt_opt(*a), fmt_opt(*i));
        }
        let _ = writeln!(out, "{split},,mean,{},{}", fmt_opt(self.macc), fmt_opt(self.miou));
        out
    }
}

pub const CSV_HEADER: &str = "split,class_id,class_name,acc,iou\n";

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::brute_force_metrics;

    fn map(v: &[u8]) -> LabelMap {
        LabelMap::new(1, v.len(), v.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_case() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&map(&[0, 1, 1, 0]), &map(&[0, 1, 0, 0])).unwrap();
        assert_eq!(cm.counts, vec![2, 1, 0, 1]);
        let s = cm.summarize(false);
        assert_eq!(s.iou, vec![Some(2.0 / 3.0), Some(0.5)]);
        assert_eq!(s.miou, Some(7.0 / 12.0));
        assert_eq!(s.acc, vec![Some(2.0 / 3.0), Some(1.0)]);
        assert_eq!(s.macc, Some(5.0 / 6.0));
    }

    #[test]
    fn empty_maps_leave_matrix_unchanged() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&LabelMap::filled(0, 0, 0), &LabelMap::filled(0, 0, 0)).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(cm.summarize(false).miou, None);
    }

    #[test]
    fn rejects_bad_inputs() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&map(&[0, 1]), &map(&[0])).is_err());
        assert!(matches!(cm.accumulate(&map(&[2]), &map(&[0])), Err(Error::LabelOutOfRange { .. })));
    }

    #[test]
    fn agrees_with_brute_force_including_background_exclusion() {
        let p = [0u8, 2, 2, 1, 0, 3];
        let g = [0u8, 2, 1, 1, 3, 3];
        let mut cm = ConfusionMatrix::new(5);
        cm.accumulate(&map(&p), &map(&g)).unwrap();
        for ex in [false, true] {
            let s = cm.summarize(ex);
            let b = brute_force_metrics(&[&p], &[&g], 5, ex);
            assert_eq!((s.acc, s.iou, s.macc, s.miou), (b.acc, b.iou, b.macc, b.miou));
        }
    }

    #[test]
    fn mean_is_correctly_rounded() {
        // 2/3 and 1/2 averaged in f64 land one ulp below 7/12
        assert_ne!((2.0 / 3.0 + 0.5) / 2.0, 7.0 / 12.0);
        assert_eq!(mean_of_ratios(&[(2, 3), (1, 2)]), Some(7.0 / 12.0));
        assert_eq!(mean_of_ratios(&[(1, 3), (1, 3), (1, 3)]), Some(1.0 / 3.0));
        assert_eq!(mean_of_ratios(&[]), None);
        let big = [(u64::MAX - 1, u64::MAX), (u64::MAX - 3, u64::MAX - 2)];
        assert!((mean_of_ratios(&big).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn reports_list_every_class() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&map(&[0, 1]), &map(&[0, 1])).unwrap();
        let names = vec!["background".to_string(), "thing".to_string()];
        let kv = cm.summarize(false).to_key_values("test", &names);
        assert!(kv.contains("test.mIoU=1\n"));
        assert!(kv.contains("test.iou.thing=1\n"));
        assert_eq!(cm.summarize(false).to_csv_rows("test", &names).lines().count(), 3);
    }
}
