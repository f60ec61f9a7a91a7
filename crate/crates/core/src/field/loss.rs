//! Four-term field loss and its hand-derived gradient.
//!
//! Terms, per batch:
//! - range: mean L1 between the sphere-traced range and the measured range
//!   over hit rays. Its gradient uses the implicit relation at the traced
//!   root: d(range)/d(theta) = -w(theta, hit) / (grad_s . d), treating the
//!   march itself as constant.
//! - surface: mean |s| at measured hit endpoints.
//! - eikonal: mean (|grad s| - 1)^2 at uniform points in bounds.
//! - drop: mean binary cross-entropy plus the Lovasz hinge over per-ray drop
//!   predictions. Hit rays are supervised at their traced hit point; rays
//!   that fail to trace predict drop with probability 1 and contribute no
//!   gradient; drop-labeled rays are supervised at the point of minimum |s|
//!   along the ray (64 uniform samples inside bounds). Supervision points
//!   are held fixed when differentiating, like the march.

use super::{
    sigmoid, FieldError, LossWeights, RaySample, SdfGridField, TraceOutcome, TraceParams,
    LOGIT_CLAMP,
};
use crate::geom::Vec3;
use rand::Rng;

/// Samples along a drop ray when searching for the minimum-|s| point.
const DROP_SUPERVISION_SAMPLES: usize = 64;
/// Floor on |grad_s . d| in the implicit range gradient.
const MIN_RAY_SLOPE: f64 = 1e-2;
/// Probability clamp keeping BCE finite for saturated constant predictions.
const PROB_EPS: f64 = 1e-7;

/// Dense gradient over all node parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub sdf: Vec<f64>,
    pub drop_logits: Vec<f64>,
}

impl ParamGradient {
    fn zeros(n: usize) -> Self {
        ParamGradient {
            sdf: vec![0.0; n],
            drop_logits: vec![0.0; n],
        }
    }
}

/// Loss value split by term; `total` is the weighted sum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub range: f64,
    pub surface: f64,
    pub eikonal: f64,
    pub drop: f64,
}

/// One ray's drop supervision: label, prediction logit, and where the logit
/// was read (absent for constant predictions).
struct DropTerm {
    is_drop: bool,
    logit: f64,
    point: Option<Vec3>,
}

/// Loss and gradient with eikonal points drawn from `rng`.
pub fn loss_total(
    field: &SdfGridField,
    batch: &[RaySample],
    weights: &LossWeights,
    trace: &TraceParams,
    eikonal_samples: usize,
    rng: &mut impl Rng,
) -> Result<(LossBreakdown, ParamGradient), FieldError> {
    let points: Vec<Vec3> = (0..eikonal_samples)
        .map(|_| {
            Vec3::new(
                rng.gen_range(field.bounds.min.x..field.bounds.max.x),
                rng.gen_range(field.bounds.min.y..field.bounds.max.y),
                rng.gen_range(field.bounds.min.z..field.bounds.max.z),
            )
        })
        .collect();
    loss_total_at(field, batch, weights, trace, &points)
}

/// Loss and gradient at explicit eikonal sample points. Deterministic; the
/// entry point for tests that need to re-evaluate the same batch.
pub fn loss_total_at(
    field: &SdfGridField,
    batch: &[RaySample],
    weights: &LossWeights,
    trace: &TraceParams,
    eikonal_points: &[Vec3],
) -> Result<(LossBreakdown, ParamGradient), FieldError> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(FieldError::EmptyBatch);
    }
    let n = field.node_count();
    let mut grad = ParamGradient::zeros(n);
    let mut drop_terms: Vec<DropTerm> = Vec::with_capacity(batch.len());

    // --- range + surface terms over hit rays -----------------------------
    let mut hit_rays = 0usize;
    let mut converged = 0usize;
    let mut range_loss_sum = 0.0;
    let mut surface_loss_sum = 0.0;
    struct RangeContribution {
        residual_sign: f64,
        point: Vec3,
        inv_slope: f64,
    }
    let mut range_contribs: Vec<RangeContribution> = Vec::new();
    let mut surface_points: Vec<(f64, Vec3)> = Vec::new();

    for sample in batch {
        let Some(gt_range) = sample.range else {
            continue;
        };
        hit_rays += 1;

        let endpoint = sample.origin + sample.direction * gt_range;
        let s_end = field.query_sdf(endpoint);
        surface_loss_sum += s_end.abs();
        surface_points.push((s_end.signum(), endpoint));

        let ray = sample.as_ray();
        if let TraceOutcome::Hit { range } = field.trace(&ray, None, trace) {
            converged += 1;
            let residual = range - gt_range;
            range_loss_sum += residual.abs();
            let p_hit = ray.point_at(range);
            let slope = field.query_sdf_gradient(p_hit).dot(sample.direction);
            let clamped = slope.signum() * slope.abs().max(MIN_RAY_SLOPE);
            range_contribs.push(RangeContribution {
                residual_sign: residual.signum(),
                point: p_hit,
                inv_slope: 1.0 / clamped,
            });
            drop_terms.push(DropTerm {
                is_drop: false,
                logit: field.query_drop_logit(p_hit),
                point: Some(p_hit),
            });
        } else {
            // No traced surface: the model predicts drop deterministically.
            drop_terms.push(DropTerm {
                is_drop: false,
                logit: LOGIT_CLAMP,
                point: None,
            });
        }
    }
    if hit_rays > 0 && converged == 0 {
        return Err(FieldError::NoConvergedRays);
    }

    let range_loss = if converged > 0 {
        range_loss_sum / converged as f64
    } else {
        0.0
    };
    let surface_loss = if hit_rays > 0 {
        surface_loss_sum / hit_rays as f64
    } else {
        0.0
    };

    if converged > 0 {
        let scale = weights.range / converged as f64;
        for c in &range_contribs {
            let cell = field.locate(c.point);
            field.for_each_node_weight(&cell, |idx, w| {
                grad.sdf[idx] -= scale * c.residual_sign * w * c.inv_slope;
            });
        }
    }
    if hit_rays > 0 {
        let scale = weights.surface / hit_rays as f64;
        for (sign, p) in &surface_points {
            let cell = field.locate(*p);
            field.for_each_node_weight(&cell, |idx, w| {
                grad.sdf[idx] += scale * sign * w;
            });
        }
    }

    // --- drop supervision for drop-labeled rays ---------------------------
    for sample in batch {
        if !sample.is_drop() {
            continue;
        }
        let ray = sample.as_ray();
        let Some((t0, t1)) = field.bounds.ray_interval(&ray) else {
            continue; // no in-bounds segment: nothing to supervise
        };
        let mut best = (f64::INFINITY, Vec3::ZERO);
        for j in 0..DROP_SUPERVISION_SAMPLES {
            let t = t0 + (t1 - t0) * (j as f64 + 0.5) / DROP_SUPERVISION_SAMPLES as f64;
            let p = ray.point_at(t);
            let s = field.query_sdf(p).abs();
            if s < best.0 {
                best = (s, p);
            }
        }
        drop_terms.push(DropTerm {
            is_drop: true,
            logit: field.query_drop_logit(best.1),
            point: Some(best.1),
        });
    }

    // --- drop loss: BCE + Lovasz hinge ------------------------------------
    let mut drop_loss = 0.0;
    if !drop_terms.is_empty() {
        let m = drop_terms.len() as f64;
        let mut per_ray_dlogit = vec![0.0f64; drop_terms.len()];

        let mut bce = 0.0;
        for (i, term) in drop_terms.iter().enumerate() {
            let p = sigmoid(term.logit).clamp(PROB_EPS, 1.0 - PROB_EPS);
            let y = if term.is_drop { 1.0 } else { 0.0 };
            bce += -(y * p.ln() + (1.0 - y) * (1.0 - p).ln());
            per_ray_dlogit[i] += (sigmoid(term.logit) - y) / m;
        }
        bce /= m;

        let (lovasz, lovasz_dlogit) = lovasz_hinge(&drop_terms);
        for (d, l) in per_ray_dlogit.iter_mut().zip(lovasz_dlogit.iter()) {
            *d += *l;
        }

        drop_loss = bce + lovasz;
        for (term, dlogit) in drop_terms.iter().zip(per_ray_dlogit.iter()) {
            let Some(p) = term.point else { continue };
            let cell = field.locate(p);
            field.for_each_node_weight(&cell, |idx, w| {
                grad.drop_logits[idx] += weights.drop * dlogit * w;
            });
        }
    }

    // --- eikonal term ------------------------------------------------------
    // Points are drawn uniformly in bounds, but samples in the truncated
    // flat zone are masked out: values clamp to +-truncation there, so a
    // unit gradient is unrepresentable and the penalty would only churn the
    // band edges.
    let mut eikonal_loss = 0.0;
    if !eikonal_points.is_empty() {
        let band = 0.95 * field.truncation;
        struct EikTerm {
            cell: crate::field::Cell,
            g: Vec3,
            norm: f64,
        }
        let mut terms = Vec::with_capacity(eikonal_points.len());
        for q in eikonal_points {
            let cell = field.locate(*q);
            let mut s = 0.0;
            let mut g = Vec3::ZERO;
            field.for_each_node_weight(&cell, |idx, w| s += w * field.sdf_values()[idx]);
            if s.abs() >= band {
                continue;
            }
            field.for_each_node_weight_gradient(&cell, |idx, wg| {
                g = g + wg * field.sdf_values()[idx];
            });
            let norm = g.norm();
            terms.push(EikTerm { cell, g, norm });
        }
        if !terms.is_empty() {
            let m = terms.len() as f64;
            for term in &terms {
                eikonal_loss += (term.norm - 1.0).powi(2) / m;
                if term.norm > 1e-12 {
                    let coef = weights.eikonal * 2.0 * (term.norm - 1.0) / (term.norm * m);
                    field.for_each_node_weight_gradient(&term.cell, |idx, wg| {
                        grad.sdf[idx] += coef * term.g.dot(wg);
                    });
                }
            }
        }
    }

    let total = weights.range * range_loss
        + weights.surface * surface_loss
        + weights.eikonal * eikonal_loss
        + weights.drop * drop_loss;
    Ok((
        LossBreakdown {
            total,
            range: range_loss,
            surface: surface_loss,
            eikonal: eikonal_loss,
            drop: drop_loss,
        },
        grad,
    ))
}

/// Binary Lovasz hinge: the tight convex surrogate of the Jaccard loss,
/// built from hinge errors sorted in decreasing order. Returns the loss and
/// its subgradient w.r.t. each ray's logit (sorting treated as constant).
fn lovasz_hinge(terms: &[DropTerm]) -> (f64, Vec<f64>) {
    let n = terms.len();
    let signs: Vec<f64> = terms
        .iter()
        .map(|t| if t.is_drop { 1.0 } else { -1.0 })
        .collect();
    let errors: Vec<f64> = terms
        .iter()
        .zip(&signs)
        .map(|(t, s)| 1.0 - t.logit * s)
        .collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| errors[b].total_cmp(&errors[a]).then(a.cmp(&b)));

    // Gradient of the Jaccard extension along the sorted ground truth.
    let gts: f64 = terms.iter().filter(|t| t.is_drop).count() as f64;
    let mut cum_pos = 0.0;
    let mut cum_neg = 0.0;
    let mut jaccard = Vec::with_capacity(n);
    for &i in &order {
        if terms[i].is_drop {
            cum_pos += 1.0;
        } else {
            cum_neg += 1.0;
        }
        let intersection = gts - cum_pos;
        let union = gts + cum_neg;
        jaccard.push(1.0 - intersection / union.max(1.0));
    }
    let mut g = jaccard.clone();
    for i in (1..n).rev() {
        g[i] -= jaccard[i - 1];
    }

    let mut loss = 0.0;
    let mut dlogit = vec![0.0f64; n];
    for (rank, &i) in order.iter().enumerate() {
        let hinge = errors[i].max(0.0);
        loss += hinge * g[rank];
        if errors[i] > 0.0 {
            dlogit[i] = -signs[i] * g[rank];
        }
    }
    (loss, dlogit)
}
