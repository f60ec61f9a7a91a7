//! Metrics between rendered frames: symmetric Chamfer distance, range MAE
//! over scan-index-matched rays, and drop confusion rates.

use crate::geom::Vec3;
use crate::render::RenderedFrame;
use crate::spatial::KdTree;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cannot evaluate empty point clouds")]
    EmptyInput,
    #[error("scan patterns differ: {0} vs {1} rays")]
    PatternMismatch(usize, usize),
}

/// Metrics report; pattern-aligned fields are present only when both frames
/// share a scan pattern.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Symmetric Chamfer distance, meters.
    pub chamfer: f64,
    /// Mean absolute range error over rays where both frames hit, meters.
    pub range_mae: Option<f64>,
    pub drop_accuracy: Option<f64>,
    pub drop_precision: Option<f64>,
    pub drop_recall: Option<f64>,
    pub rendered_points: usize,
    pub reference_points: usize,
    /// Rays where both frames produced a return.
    pub matched_rays: Option<usize>,
}

/// Mean nearest-neighbor distance from `from` into `to`.
fn one_sided_chamfer(from: &[Vec3], to_tree: &KdTree) -> f64 {
    let total: f64 = from
        .iter()
        .map(|p| to_tree.nearest(*p).expect("non-empty tree").1)
        .sum();
    total / from.len() as f64
}

/// Symmetric Chamfer distance: the mean of both one-sided means.
pub fn chamfer_distance(a: &[Vec3], b: &[Vec3]) -> Result<f64, EvalError> {
    if a.is_empty() || b.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let tree_a = KdTree::build(a);
    let tree_b = KdTree::build(b);
    Ok(0.5 * (one_sided_chamfer(a, &tree_b) + one_sided_chamfer(b, &tree_a)))
}

/// Compares a rendered frame against a reference frame.
///
/// Chamfer uses the two point clouds. Range MAE matches rays by scan index
/// (points are stored in ray order, so the drop masks recover each point's
/// ray); the drop confusion treats the reference mask as ground truth, drop
/// as the positive class.
pub fn evaluate(rendered: &RenderedFrame, reference: &RenderedFrame) -> Result<MetricsReport, EvalError> {
    let chamfer = chamfer_distance(&rendered.points, &reference.points)?;
    if rendered.drop_mask.len() != reference.drop_mask.len() {
        return Err(EvalError::PatternMismatch(
            rendered.drop_mask.len(),
            reference.drop_mask.len(),
        ));
    }

    let ranges_by_ray = |frame: &RenderedFrame| -> Vec<Option<f64>> {
        let mut out = Vec::with_capacity(frame.drop_mask.len());
        let mut next_point = 0usize;
        for &dropped in &frame.drop_mask {
            if dropped {
                out.push(None);
            } else {
                out.push(Some(frame.points[next_point].norm()));
                next_point += 1;
            }
        }
        out
    };
    let rendered_ranges = ranges_by_ray(rendered);
    let reference_ranges = ranges_by_ray(reference);

    let mut abs_err = 0.0;
    let mut matched = 0usize;
    let (mut tp, mut tn, mut fp, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (r, gt) in rendered_ranges.iter().zip(reference_ranges.iter()) {
        match (r, gt) {
            (Some(a), Some(b)) => {
                abs_err += (a - b).abs();
                matched += 1;
                tn += 1;
            }
            (None, None) => tp += 1,
            (None, Some(_)) => fp += 1,
            (Some(_), None) => fn_ += 1,
        }
    }
    let total = (tp + tn + fp + fn_) as f64;
    let report = MetricsReport {
        chamfer,
        range_mae: (matched > 0).then(|| abs_err / matched as f64),
        drop_accuracy: (total > 0.0).then(|| (tp + tn) as f64 / total),
        drop_precision: (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64),
        drop_recall: (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64),
        rendered_points: rendered.points.len(),
        reference_points: reference.points.len(),
        matched_rays: Some(matched),
    };
    Ok(report)
}
