//! mIoU and boundary error rate on small hand-made label maps.
//!
//!     cargo run --example evaluate_metrics

use glaclip::grid::{build_window_grid, GridSpec};
use glaclip::metrics::{ber, miou, EvalReport};
use glaclip::segmenter::LabelMap;

fn main() -> glaclip::Result<()> {
    let gt = LabelMap::new(2, 2, vec![0, 0, 1, 1])?;
    let pred = LabelMap::new(2, 2, vec![0, 1, 1, 1])?;
    let r = miou(&pred, &gt, 2)?;
    println!("2x2: per-class {:?} -> mIoU {:.2}", r.per_class_iou, r.miou);

    // 255 marks unlabeled pixels; they never count.
    #[rustfmt::skip]
    let gt = LabelMap::new(4, 4, vec![
        0, 0, 0, 0,
        0, 0, 0, 1,
        0, 0, 0, 4,
        0, 2, 3, 1,
    ])?;
    #[rustfmt::skip]
    let pred = LabelMap::new(4, 4, vec![
        0, 0, 1, 0,
        0, 7, 0, 0,
        0, 0, 0, 0,
        0, 0, 0, 0,
    ])?;
    let grid = build_window_grid(GridSpec::new(4, 4, 2, 2, 1))?;
    let report = EvalReport {
        miou: miou(&pred, &gt, 8)?,
        ber: Some(ber(&pred, &gt, &grid)?),
    };
    print!("{report}");
    Ok(())
}
