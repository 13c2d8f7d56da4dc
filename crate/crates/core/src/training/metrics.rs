use serde::Serialize;

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

/// Confusion matrix (rows: truth, columns: prediction) and derived scores.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub num_classes: usize,
    pub confusion: Vec<u64>,
    pub oa: f64,
    pub macc: f64,
    pub miou: f64,
}

impl Metrics {
    /// Scores from a row-major `K × K` confusion matrix. Class means run over
    /// classes with at least one true point.
    pub fn from_confusion(num_classes: usize, confusion: Vec<u64>) -> Result<Self> {
        let k = num_classes;
        if confusion.len() != k * k {
            return Err(Error::invalid(format!("confusion has {} cells, expected {k}²", confusion.len())));
        }
        let total: u64 = confusion.iter().sum();
        let trace: u64 = (0..k).map(|c| confusion[c * k + c]).sum();
        let (mut acc_sum, mut iou_sum, mut present) = (0.0, 0.0, 0usize);
        for c in 0..k {
            let tp = confusion[c * k + c];
            let support: u64 = confusion[c * k..(c + 1) * k].iter().sum();
            if support == 0 {
                continue;
            }
            let predicted: u64 = (0..k).map(|r| confusion[r * k + c]).sum();
            present += 1;
            acc_sum += tp as f64 / support as f64;
            iou_sum += tp as f64 / (support + predicted - tp) as f64;
        }
        let mean = |s: f64| if present == 0 { 0.0 } else { s / present as f64 };
        Ok(Metrics {
            num_classes: k,
            oa: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
            macc: mean(acc_sum),
            miou: mean(iou_sum),
            confusion,
        })
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().sum()
    }
}

/// Row-wise argmax, lowest class on ties.
pub fn argmax_rows<T: Real>(logits: &Tensor<T>) -> Vec<u32> {
    let c = logits.cols();
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u32
        })
        .take(if c == 0 { 0 } else { logits.rows() })
        .collect()
}

/// Metrics of argmax predictions; labels outside `[0, K)` are skipped.
pub fn evaluate<T: Real>(logits: &Tensor<T>, labels: &[u32]) -> Result<Metrics> {
    if logits.rows() != labels.len() {
        return Err(Error::invalid(format!("{} logit rows for {} labels", logits.rows(), labels.len())));
    }
    let k = logits.cols();
    evaluate_predictions(&argmax_rows(logits), labels, k)
}

pub fn evaluate_predictions(pred: &[u32], labels: &[u32], num_classes: usize) -> Result<Metrics> {
    if pred.len() != labels.len() {
        return Err(Error::invalid(format!("{} predictions for {} labels", pred.len(), labels.len())));
    }
    let k = num_classes;
    let mut confusion = vec![0u64; k * k];
    for (&p, &l) in pred.iter().zip(labels) {
        if (l as usize) < k && (p as usize) < k {
            confusion[l as usize * k + p as usize] += 1;
        }
    }
    Metrics::from_confusion(k, confusion)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_confusion() {
        let m = Metrics::from_confusion(2, vec![3, 1, 2, 4]).unwrap();
        assert!((m.oa - 0.7).abs() < 1e-15);
        // IoU0 = 3/6, IoU1 = 4/7
        assert!((m.miou - (0.5 + 4.0 / 7.0) / 2.0).abs() < 1e-15);
        assert!((m.miou - 0.5357).abs() < 1e-4);
        assert!((m.macc - (0.75 + 4.0 / 6.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_all_wrong() {
        let m = evaluate_predictions(&[0, 1, 1], &[0, 1, 1], 2).unwrap();
        assert_eq!((m.oa, m.macc, m.miou), (1.0, 1.0, 1.0));
        let m = evaluate_predictions(&[1, 0, 0], &[0, 1, 1], 2).unwrap();
        assert_eq!(m.miou, 0.0);
    }

    #[test]
    fn argmax_ties_take_lowest() {
        let t = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!(argmax_rows(&t), vec![0, 1]);
    }
}
