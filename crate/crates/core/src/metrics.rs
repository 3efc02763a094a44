//! Precision, recall, mIoU and dice over the three nested tumor regions.

use std::fmt::Write as _;

use crate::error::{invalid, shape_err, Error, Result};
use crate::losses::region_membership;
use crate::NUM_CLASSES;

pub const REGION_NAMES: [&str; 3] = ["complete", "core", "enhancing"];
pub const CSV_HEADER: &str = "region,precision,recall,miou,dice";

/// (complete, core, enhancing) masks for a label map.
pub fn region_masks(labels: &[u8]) -> Result<[Vec<bool>; 3]> {
    if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
        return invalid(format!("label {bad} out of range 0..{NUM_CLASSES}"));
    }
    let mut m: [Vec<bool>; 3] = Default::default();
    for &l in labels {
        for (k, v) in region_membership(l).into_iter().enumerate() {
            m[k].push(v);
        }
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl Confusion {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

pub fn binary_confusion(pred: &[bool], truth: &[bool]) -> Result<Confusion> {
    if pred.len() != truth.len() {
        return shape_err(format!("prediction has {} pixels, truth {}", pred.len(), truth.len()));
    }
    let mut c = Confusion::default();
    for (&p, &t) in pred.iter().zip(truth) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub miou: f64,
    pub dice: f64,
}

impl Scores {
    pub fn as_array(&self) -> [f64; 4] {
        [self.precision, self.recall, self.miou, self.dice]
    }
}

/// Standard binary scores. A zero denominator scores 1.0 when truth and
/// prediction are both empty, 0.0 otherwise.
pub fn region_scores(c: &Confusion) -> Scores {
    let both_empty = c.tp + c.fp + c.fn_ == 0;
    let ratio = |num: u64, den: u64| {
        if den > 0 {
            num as f64 / den as f64
        } else if both_empty {
            1.0
        } else {
            0.0
        }
    };
    Scores {
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
        miou: ratio(c.tp, c.tp + c.fp + c.fn_),
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    }
}

/// Scores per region, rows in [`REGION_NAMES`] order.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RegionTable(pub [Scores; 3]);

impl RegionTable {
    pub fn complete(&self) -> &Scores {
        &self.0[0]
    }

    pub fn core(&self) -> &Scores {
        &self.0[1]
    }

    pub fn enhancing(&self) -> &Scores {
        &self.0[2]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(CSV_HEADER);
        s.push('\n');
        for (name, sc) in REGION_NAMES.iter().zip(&self.0) {
            let _ = writeln!(s, "{name},{:.6},{:.6},{:.6},{:.6}", sc.precision, sc.recall, sc.miou, sc.dice);
        }
        s
    }
}

/// Scores one volume from predicted region masks against truth labels.
pub fn volume_table(pred: &[Vec<bool>; 3], truth_labels: &[u8]) -> Result<RegionTable> {
    let truth = region_masks(truth_labels)?;
    let mut t = RegionTable::default();
    for k in 0..3 {
        t.0[k] = region_scores(&binary_confusion(&pred[k], &truth[k])?);
    }
    Ok(t)
}

/// Arithmetic mean of per-volume tables.
pub fn eval_table(volumes: &[RegionTable]) -> Result<RegionTable> {
    if volumes.is_empty() {
        return Err(Error::EmptyData("no volumes to evaluate".into()));
    }
    let n = volumes.len() as f64;
    let mut out = RegionTable::default();
    for k in 0..3 {
        let mean = |f: fn(&Scores) -> f64| volumes.iter().map(|v| f(&v.0[k])).sum::<f64>() / n;
        out.0[k] = Scores {
            precision: mean(|s| s.precision),
            recall: mean(|s| s.recall),
            miou: mean(|s| s.miou),
            dice: mean(|s| s.dice),
        };
    }
    Ok(out)
}
