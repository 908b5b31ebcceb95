//! Mean IoU and the boundary error rate across window seams.

use std::fmt;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::grid::{boundary_pairs, WindowGrid};
use crate::segmenter::LabelMap;

/// `counts[gt][pred]` over non-ignored pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    /// Pixels whose prediction is the ignore label, per ground-truth class.
    unpredicted: Vec<u64>,
    ignore_label: u16,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore_label: u16) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
            unpredicted: vec![0; classes],
            ignore_label,
        }
    }

    /// Adds every pixel of a prediction / ground-truth pair. Ground-truth
    /// ignore pixels are skipped; an ignore prediction counts as a miss.
    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        same_shape(pred, gt)?;
        let c = self.classes;
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            if g == self.ignore_label {
                continue;
            }
            let g = usize::from(g);
            if g >= c {
                return Err(Error::Label(format!(
                    "ground-truth label {g} >= {c} classes"
                )));
            }
            if p == self.ignore_label {
                self.unpredicted[g] += 1;
                continue;
            }
            let p = usize::from(p);
            if p >= c {
                return Err(Error::Label(format!("predicted label {p} >= {c} classes")));
            }
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        for (a, b) in self.unpredicted.iter_mut().zip(&other.unpredicted) {
            *a += b;
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.unpredicted.iter().sum::<u64>()
    }

    /// IoU per class; `None` where the class appears in neither map.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let c = self.classes;
        (0..c)
            .map(|k| {
                let tp = self.get(k, k);
                let gt_total: u64 =
                    (0..c).map(|p| self.get(k, p)).sum::<u64>() + self.unpredicted[k];
                let pred_total: u64 = (0..c).map(|g| self.get(g, k)).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

fn same_shape(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::Shape(format!(
            "label maps differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MiouReport {
    pub per_class_iou: Vec<Option<f64>>,
    /// Percent, over classes present in either map.
    pub miou: f64,
}

/// Mean IoU in percent. Pixels with the ground-truth ignore label are skipped.
pub fn miou(pred: &LabelMap, gt: &LabelMap, classes: usize) -> Result<MiouReport> {
    let mut cm = ConfusionMatrix::new(classes, gt.ignore_label());
    cm.accumulate(pred, gt)?;
    Ok(report_from(&cm))
}

pub fn report_from(cm: &ConfusionMatrix) -> MiouReport {
    let per_class_iou = cm.per_class_iou();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = if present.is_empty() {
        0.0
    } else {
        100.0 * present.iter().sum::<f64>() / present.len() as f64
    };
    MiouReport {
        per_class_iou,
        miou,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BerReport {
    /// Boundary pairs whose ground-truth labels agree.
    pub same_gt_pairs: u64,
    /// Of those, pairs with differing predictions.
    pub disagreeing_pairs: u64,
    /// Percent; 0 when `same_gt_pairs` is 0.
    pub ber: f64,
    pub zero_denominator: bool,
}

/// Boundary error rate over adjacent pixel pairs straddling window edges.
pub fn ber(pred: &LabelMap, gt: &LabelMap, grid: &WindowGrid) -> Result<BerReport> {
    same_shape(pred, gt)?;
    let spec = grid.spec();
    if (gt.height(), gt.width()) != (spec.image_h, spec.image_w) {
        return Err(Error::Shape(format!(
            "label maps are {}x{}, grid image is {}x{}",
            gt.height(),
            gt.width(),
            spec.image_h,
            spec.image_w
        )));
    }
    let ignore = gt.ignore_label();
    let (mut same, mut disagree) = (0u64, 0u64);
    for ((py, px), (qy, qx)) in boundary_pairs(grid) {
        let (gp, gq) = (gt.get(py, px), gt.get(qy, qx));
        if gp == ignore || gq == ignore || gp != gq {
            continue;
        }
        same += 1;
        if pred.get(py, px) != pred.get(qy, qx) {
            disagree += 1;
        }
    }
    let zero_denominator = same == 0;
    let ber = if zero_denominator {
        0.0
    } else {
        100.0 * disagree as f64 / same as f64
    };
    Ok(BerReport {
        same_gt_pairs: same,
        disagreeing_pairs: disagree,
        ber,
        zero_denominator,
    })
}

/// Combined evaluation output.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub miou: MiouReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ber: Option<BerReport>,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<8} {:>8}", "class", "IoU")?;
        for (c, iou) in self.miou.per_class_iou.iter().enumerate() {
            match iou {
                Some(v) => writeln!(f, "{:<8} {:>8.2}", c, 100.0 * v)?,
                None => writeln!(f, "{:<8} {:>8}", c, "-")?,
            }
        }
        writeln!(f, "mIoU={:.2}", self.miou.miou)?;
        if let Some(b) = &self.ber {
            write!(
                f,
                "BER={:.2} ({}/{} boundary pairs)",
                b.ber, b.disagreeing_pairs, b.same_gt_pairs
            )?;
            if b.zero_denominator {
                write!(f, " [no equal-label boundary pairs]")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_window_grid, GridSpec};

    fn map(h: usize, w: usize, l: &[u16]) -> LabelMap {
        LabelMap::new(h, w, l.to_vec()).unwrap()
    }

    #[test]
    fn perfect_and_inverted() {
        let gt = map(2, 2, &[0, 1, 1, 0]);
        assert_eq!(miou(&gt, &gt, 2).unwrap().miou, 100.0);
        let inv = map(2, 2, &[1, 0, 0, 1]);
        assert_eq!(miou(&inv, &gt, 2).unwrap().miou, 0.0);
    }

    #[test]
    fn hand_fixture() {
        let gt = map(2, 2, &[0, 0, 1, 1]);
        let pred = map(2, 2, &[0, 1, 1, 1]);
        let r = miou(&pred, &gt, 2).unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.miou - 58.333333333).abs() < 1e-6);
    }

    #[test]
    fn absent_classes_and_ignore() {
        let gt = map(1, 4, &[0, 0, 255, 1]);
        let pred = map(1, 4, &[0, 0, 2, 1]);
        let r = miou(&pred, &gt, 3).unwrap();
        assert_eq!(r.per_class_iou[2], None);
        assert_eq!(r.miou, 100.0);

        let pred_ignored = map(1, 4, &[0, 255, 0, 1]);
        let r = miou(&pred_ignored, &gt, 3).unwrap();
        assert_eq!(r.per_class_iou[0], Some(0.5));

        assert!(miou(&map(1, 2, &[0, 0]), &gt, 3).is_err());
        assert!(miou(&map(1, 4, &[0, 0, 0, 9]), &gt, 3).is_err());
    }

    #[test]
    fn ber_basic_cases() {
        let grid = build_window_grid(GridSpec::new(4, 4, 2, 2, 1)).unwrap();
        let gt = map(4, 4, &[0; 16]);
        let r = ber(&gt, &gt, &grid).unwrap();
        assert_eq!((r.same_gt_pairs, r.disagreeing_pairs, r.ber), (8, 0, 0.0));

        // quadrant prediction differs across every seam
        let quad = map(4, 4, &[0, 0, 1, 1, 0, 0, 1, 1, 2, 2, 3, 3, 2, 2, 3, 3]);
        assert_eq!(ber(&quad, &gt, &grid).unwrap().ber, 100.0);

        let all_ignore = map(4, 4, &[255; 16]);
        let r = ber(&gt, &all_ignore, &grid).unwrap();
        assert!(r.zero_denominator);
        assert_eq!(r.ber, 0.0);
    }

    #[test]
    fn ber_hand_fixture() {
        let grid = build_window_grid(GridSpec::new(4, 4, 2, 2, 1)).unwrap();
        // Seams: x=2 gives pairs (y,1)-(y,2), y=2 gives pairs (1,x)-(2,x).
        // GT agrees on rows 0..3 of the vertical seam and columns 0..3 of the
        // horizontal seam: 6 of the 8 pairs.
        #[rustfmt::skip]
        let gt = map(4, 4, &[
            0, 0, 0, 0,
            0, 0, 0, 1,
            0, 0, 0, 4,
            0, 2, 3, 1,
        ]);
        // (0,2) breaks the row-0 pair, (1,1) breaks row 1 and column 1.
        #[rustfmt::skip]
        let pred = map(4, 4, &[
            0, 0, 1, 0,
            0, 7, 0, 0,
            0, 0, 0, 0,
            0, 0, 0, 0,
        ]);
        let r = ber(&pred, &gt, &grid).unwrap();
        assert_eq!((r.same_gt_pairs, r.disagreeing_pairs), (6, 3));
        assert_eq!(r.ber, 50.0);
    }
}
