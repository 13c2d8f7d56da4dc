use std::fmt::Write as _;

use rayon::prelude::*;

use super::metrics::{evaluate, Metrics};
use crate::diffcore::Real;
use crate::error::{Error, Result};
use crate::geometry::{perturb, Perturbation, PointCloud};
use crate::network::Model;

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessRow {
    pub label: String,
    pub perturbation: Perturbation,
    pub metrics: Metrics,
}

/// Evaluates `model` on `cloud` under each perturbation. Rows are computed in
/// parallel and returned in input order.
pub fn robustness_eval<T: Real>(model: &Model<T>, cloud: &PointCloud, perturbations: &[Perturbation]) -> Result<Vec<RobustnessRow>> {
    let labels = cloud
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("robustness evaluation needs a labelled cloud"))?;
    perturbations
        .par_iter()
        .map(|p| {
            let moved = perturb(cloud, p);
            let moved_labels = match p {
                Perturbation::Permute { .. } => moved.labels.clone().expect("labels are carried"),
                _ => labels.clone(),
            };
            let logits = model.predict(&moved)?;
            Ok(RobustnessRow {
                label: p.label(),
                perturbation: p.clone(),
                metrics: evaluate(&logits, &moved_labels)?,
            })
        })
        .collect()
}

/// Two-line table: perturbation labels, then mIoU in percent.
pub fn format_row(rows: &[RobustnessRow]) -> String {
    let mut head = String::from("metric");
    let mut vals = String::from("mIoU");
    for r in rows {
        let _ = write!(head, "\t{}", r.label);
        let _ = write!(vals, "\t{:.2}", 100.0 * r.metrics.miou);
    }
    format!("{head}\n{vals}\n")
}
