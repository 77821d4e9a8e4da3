//! Scene camera-distribution analysis and the curation filter rules.
//!
//! A scene's cameras are summarized by a [`PrincipalFrame`]: the mean camera
//! position, the principal axes of the centered position matrix and the
//! extent of the cameras along each axis. Three rules then decide whether a
//! scene is usable for a spatial-variant dataset:
//!
//! 1. how the cameras are distributed around the scene ([`classify_distribution`]),
//! 2. whether the dominant bounding-box aspect ratio is moderate ([`aspect_ratio_check`]),
//! 3. how close the cameras sit to the bounding-box faces ([`distance_score`]).

use std::cmp::Ordering;
use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::CameraPose;

#[derive(Error, Debug, Clone, PartialEq)]
pub enum GeometryError {
    #[error("scene has no cameras")]
    EmptyScene,
    #[error("degenerate principal frame: {0}")]
    DegenerateFrame(&'static str),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub scene_id: String,
    pub poses: Vec<CameraPose>,
    pub source: String,
}

impl SceneBundle {
    pub fn new(
        scene_id: impl Into<String>,
        source: impl Into<String>,
        poses: Vec<CameraPose>,
    ) -> Self {
        Self {
            scene_id: scene_id.into(),
            poses,
            source: source.into(),
        }
    }

    pub fn positions(&self) -> Vec<Vector3<f64>> {
        self.poses.iter().map(|p| p.position).collect()
    }
}

/// Center, principal axes and per-axis extents of a camera set.
///
/// `axes` holds one principal axis per row. `lower`/`upper` are the min/max
/// projections of the centered positions on each axis, so
/// `extents = upper - lower` and the oriented bounding box is
/// `{center + Σ s_k · axes[k] : lower_k ≤ s_k ≤ upper_k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrincipalFrame {
    pub center: Vector3<f64>,
    pub axes: Matrix3<f64>,
    pub extents: Vector3<f64>,
    pub lower: Vector3<f64>,
    pub upper: Vector3<f64>,
    pub singular_values: Vector3<f64>,
}

impl PrincipalFrame {
    pub fn axis(&self, k: usize) -> Vector3<f64> {
        self.axes.row(k).transpose()
    }

    /// Coordinates of a world point along the principal axes, relative to `center`.
    pub fn project(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.axes * (p - self.center)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DistributionClass {
    #[serde(rename = "SURROUND_360")]
    Surround360,
    #[serde(rename = "ARC")]
    Arc,
    #[serde(rename = "LINEAR")]
    Linear,
}

impl std::fmt::Display for DistributionClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DistributionClass::Surround360 => "SURROUND_360",
            DistributionClass::Arc => "ARC",
            DistributionClass::Linear => "LINEAR",
        })
    }
}

impl std::str::FromStr for DistributionClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_uppercase().as_str() {
            "SURROUND_360" | "SURROUND" => Ok(DistributionClass::Surround360),
            "ARC" => Ok(DistributionClass::Arc),
            "LINEAR" => Ok(DistributionClass::Linear),
            other => Err(format!("unknown distribution class `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterPolicy {
    /// Upper bound on `L0 / L1` of the two dominant extents.
    pub max_xy_aspect_ratio: f64,
    /// Azimuthal span (degrees) needed for the surround class.
    pub min_angular_span_deg: f64,
    /// Azimuthal span (degrees) needed for the arc class.
    pub min_arc_span_deg: f64,
    /// Multiplier applied to the summed camera-to-face distance in reports.
    pub distance_weight: f64,
    /// Director family the accepted scenes must match; `None` accepts any class.
    pub target_class: Option<DistributionClass>,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            max_xy_aspect_ratio: 2.0,
            min_angular_span_deg: 300.0,
            min_arc_span_deg: 90.0,
            distance_weight: 1.0,
            target_class: None,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<(), String> {
        let finite_pos = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(format!("{name} must be finite and positive, got {v}"))
            }
        };
        finite_pos("max_xy_aspect_ratio", self.max_xy_aspect_ratio)?;
        finite_pos("min_angular_span_deg", self.min_angular_span_deg)?;
        finite_pos("min_arc_span_deg", self.min_arc_span_deg)?;
        if !(self.distance_weight.is_finite() && self.distance_weight >= 0.0) {
            return Err(format!(
                "distance_weight must be finite and >= 0, got {}",
                self.distance_weight
            ));
        }
        if self.max_xy_aspect_ratio < 1.0 {
            return Err("max_xy_aspect_ratio must be >= 1".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterReport {
    pub scene_id: String,
    pub distribution_class: Option<DistributionClass>,
    pub aspect_ok: bool,
    pub distance_score: Option<f64>,
    pub accepted: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

pub fn compute_center(poses: &[CameraPose]) -> Result<Vector3<f64>, GeometryError> {
    if poses.is_empty() {
        return Err(GeometryError::EmptyScene);
    }
    let sum = poses
        .iter()
        .fold(Vector3::zeros(), |acc, p| acc + p.position);
    Ok(sum / poses.len() as f64)
}

// Singular values closer than this (relative to the largest) span one subspace.
const SUBSPACE_TOLERANCE: f64 = 1e-9;

pub fn compute_principal_frame(poses: &[CameraPose]) -> Result<PrincipalFrame, GeometryError> {
    let center = compute_center(poses)?;
    let rows = poses.len().max(3);
    // Zero rows leave the right singular vectors unchanged.
    let mut centered = DMatrix::<f64>::zeros(rows, 3);
    for (i, p) in poses.iter().enumerate() {
        let d = p.position - center;
        for k in 0..3 {
            centered[(i, k)] = d[k];
        }
    }
    let svd = centered.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut pairs: Vec<(f64, Vector3<f64>)> = (0..3)
        .map(|k| {
            (
                svd.singular_values[k],
                Vector3::new(v_t[(k, 0)], v_t[(k, 1)], v_t[(k, 2)]),
            )
        })
        .collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));

    let sigma_max = pairs[0].0;
    let scale = sigma_max.max(f64::MIN_POSITIVE);
    let mut axes: Vec<Vector3<f64>> = Vec::with_capacity(3);
    let mut start = 0;
    while start < 3 {
        let mut end = start + 1;
        let zero_cluster = pairs[start].0 <= SUBSPACE_TOLERANCE * scale;
        while end < 3 {
            let close = if zero_cluster {
                pairs[end].0 <= SUBSPACE_TOLERANCE * scale
            } else {
                (pairs[start].0 - pairs[end].0).abs() <= SUBSPACE_TOLERANCE * scale
            };
            if !close {
                break;
            }
            end += 1;
        }
        if end - start == 1 && !zero_cluster {
            axes.push(pairs[start].1.normalize());
        } else {
            let basis: Vec<Vector3<f64>> = pairs[start..end].iter().map(|p| p.1).collect();
            axes.extend(canonical_subspace_basis(&basis, &axes, end - start));
        }
        start = end;
    }
    for a in &mut axes {
        *a = sign_normalized(*a);
    }

    let mut lower = [f64::INFINITY; 3];
    let mut upper = [f64::NEG_INFINITY; 3];
    for p in poses {
        let d = p.position - center;
        for k in 0..3 {
            let s = d.dot(&axes[k]);
            lower[k] = lower[k].min(s);
            upper[k] = upper[k].max(s);
        }
    }

    // Order by extent (descending); singular-value order breaks ties.
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ea = upper[a] - lower[a];
        let eb = upper[b] - lower[b];
        eb.partial_cmp(&ea)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let axes_m = Matrix3::from_rows(&[
        axes[order[0]].transpose(),
        axes[order[1]].transpose(),
        axes[order[2]].transpose(),
    ]);
    let lower_v = Vector3::new(lower[order[0]], lower[order[1]], lower[order[2]]);
    let upper_v = Vector3::new(upper[order[0]], upper[order[1]], upper[order[2]]);
    let sv = Vector3::new(pairs[order[0]].0, pairs[order[1]].0, pairs[order[2]].0);
    Ok(PrincipalFrame {
        center,
        axes: axes_m,
        extents: upper_v - lower_v,
        lower: lower_v,
        upper: upper_v,
        singular_values: sv,
    })
}

/// Deterministic orthonormal basis of `count` vectors for an ambiguous
/// subspace: canonical axes projected onto the subspace, Gram-Schmidt'ed in
/// x, y, z order. For the null cluster the subspace is the orthogonal
/// complement of `fixed`.
fn canonical_subspace_basis(
    span: &[Vector3<f64>],
    fixed: &[Vector3<f64>],
    count: usize,
) -> Vec<Vector3<f64>> {
    let project = |v: Vector3<f64>| -> Vector3<f64> {
        if fixed.is_empty() && span.len() == 3 {
            return v;
        }
        if span.len() + fixed.len() == 3 {
            // complement of the fixed axes
            let mut w = v;
            for f in fixed {
                w -= f * f.dot(&w);
            }
            return w;
        }
        let mut w = Vector3::zeros();
        for s in span {
            let s = s.normalize();
            w += s * s.dot(&v);
        }
        w
    };
    let mut out: Vec<Vector3<f64>> = Vec::with_capacity(count);
    let candidates: Vec<(f64, Vector3<f64>)> = [Vector3::x(), Vector3::y(), Vector3::z()]
        .into_iter()
        .map(|e| {
            let w = project(e);
            (w.norm(), w)
        })
        .collect();
    // Largest projection first; index order breaks ties.
    let mut idx: Vec<usize> = (0..3).collect();
    idx.sort_by(|&a, &b| {
        candidates[b]
            .0
            .partial_cmp(&candidates[a].0)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    for i in idx {
        if out.len() == count {
            break;
        }
        let mut w = candidates[i].1;
        for o in out.iter().chain(fixed.iter()) {
            w -= o * o.dot(&w);
        }
        if w.norm() > 1e-6 {
            out.push(w.normalize());
        }
    }
    // Complete with cross products when the projections ran out.
    while out.len() < count {
        let all: Vec<Vector3<f64>> = fixed.iter().chain(out.iter()).copied().collect();
        let next = match all.len() {
            2 => all[0].cross(&all[1]).normalize(),
            _ => unreachable!("canonical axes always span at least 2 of 3 dimensions"),
        };
        out.push(next);
    }
    out
}

/// Flips `v` so its largest-magnitude component is positive.
fn sign_normalized(v: Vector3<f64>) -> Vector3<f64> {
    let mut best = 0;
    for k in 1..3 {
        if v[k].abs() > v[best].abs() {
            best = k;
        }
    }
    if v[best] < 0.0 {
        -v
    } else {
        v
    }
}

/// Point the optical axes converge on, if they do.
///
/// Least-squares point closest to every optical-axis line. Returns `None` when
/// the axes are (near) parallel or the point lies behind the cameras on average.
pub fn convergence_point(poses: &[CameraPose]) -> Option<Vector3<f64>> {
    if poses.len() < 2 {
        return None;
    }
    let mut m = Matrix3::zeros();
    let mut b = Vector3::zeros();
    for p in poses {
        let d = p.forward();
        let proj = Matrix3::identity() - d * d.transpose();
        m += proj;
        b += proj * p.position;
    }
    let n = poses.len() as f64;
    let eig = m.symmetric_eigen();
    let min_eig = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if min_eig / n < 1e-6 {
        return None;
    }
    let point = m.try_inverse()? * b;
    let ahead = poses
        .iter()
        .map(|p| (point - p.position).dot(&p.forward()))
        .sum::<f64>()
        / n;
    if ahead > 0.0 {
        Some(point)
    } else {
        None
    }
}

/// Angular span (radians) covered by a set of azimuths: `2π` minus the largest
/// circular gap between consecutive sorted values.
pub fn angular_span(azimuths: &[f64]) -> f64 {
    if azimuths.len() < 2 {
        return 0.0;
    }
    let mut a: Vec<f64> = azimuths.iter().map(|v| v.rem_euclid(2.0 * PI)).collect();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap_or(Ordering::Equal));
    let mut max_gap = a[0] + 2.0 * PI - a[a.len() - 1];
    for w in a.windows(2) {
        max_gap = max_gap.max(w[1] - w[0]);
    }
    2.0 * PI - max_gap
}

/// Camera azimuths about the capture pivot, measured in the plane of the two
/// dominant principal axes. The pivot is the optical-axis convergence point
/// when one exists, otherwise the camera centroid.
pub fn capture_azimuths(bundle: &SceneBundle, frame: &PrincipalFrame) -> (Vec<f64>, bool) {
    let pivot = convergence_point(&bundle.poses);
    let converged = pivot.is_some();
    let pivot = pivot.unwrap_or(frame.center);
    let a0 = frame.axis(0);
    let a1 = frame.axis(1);
    let az = bundle
        .poses
        .iter()
        .map(|p| {
            let d = p.position - pivot;
            d.dot(&a1).atan2(d.dot(&a0))
        })
        .collect();
    (az, converged)
}

pub fn classify_distribution(
    bundle: &SceneBundle,
    frame: &PrincipalFrame,
    policy: &FilterPolicy,
) -> Result<DistributionClass, GeometryError> {
    let tiny = 1e-12 * (1.0 + frame.center.norm());
    if frame.extents[0] <= tiny && frame.extents[1] <= tiny {
        return Err(GeometryError::DegenerateFrame(
            "both dominant extents are zero",
        ));
    }
    let (azimuths, converged) = capture_azimuths(bundle, frame);
    // Collinear cameras that do not look at a common point form a line.
    if !converged && frame.extents[1] <= 1e-9 * frame.extents[0] {
        return Ok(DistributionClass::Linear);
    }
    let span_deg = angular_span(&azimuths).to_degrees();
    Ok(if span_deg >= policy.min_angular_span_deg {
        DistributionClass::Surround360
    } else if span_deg >= policy.min_arc_span_deg {
        DistributionClass::Arc
    } else {
        DistributionClass::Linear
    })
}

pub fn aspect_ratio_check(frame: &PrincipalFrame, policy: &FilterPolicy) -> bool {
    let lx = frame.extents[0];
    let ly = frame.extents[1];
    if !(lx > 0.0 && ly > 0.0) {
        return false;
    }
    (lx / ly).max(ly / lx) <= policy.max_xy_aspect_ratio
}

/// Sum over cameras of the distance to the nearest face plane of the
/// oriented bounding box. Lower is better.
pub fn distance_score(bundle: &SceneBundle, frame: &PrincipalFrame) -> Result<f64, GeometryError> {
    if !frame
        .extents
        .iter()
        .chain(frame.center.iter())
        .all(|v| v.is_finite())
    {
        return Err(GeometryError::DegenerateFrame("non-finite frame"));
    }
    if frame.extents.iter().all(|&e| e <= 0.0) {
        return Err(GeometryError::DegenerateFrame("bounding box has no faces"));
    }
    Ok(bundle
        .poses
        .iter()
        .map(|p| {
            let q = frame.project(&p.position);
            (0..3)
                .map(|k| {
                    (q[k] - frame.lower[k])
                        .abs()
                        .min((q[k] - frame.upper[k]).abs())
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum())
}

fn report_for(bundle: &SceneBundle, policy: &FilterPolicy) -> FilterReport {
    let failed = |e: GeometryError| FilterReport {
        scene_id: bundle.scene_id.clone(),
        distribution_class: None,
        aspect_ok: false,
        distance_score: None,
        accepted: false,
        error: Some(e.to_string()),
    };
    let frame = match compute_principal_frame(&bundle.poses) {
        Ok(f) => f,
        Err(e) => return failed(e),
    };
    let class = match classify_distribution(bundle, &frame, policy) {
        Ok(c) => c,
        Err(e) => return failed(e),
    };
    let score = match distance_score(bundle, &frame) {
        Ok(s) => s * policy.distance_weight,
        Err(e) => return failed(e),
    };
    let aspect_ok = aspect_ratio_check(&frame, policy);
    let class_ok = policy.target_class.is_none_or(|t| t == class);
    FilterReport {
        scene_id: bundle.scene_id.clone(),
        distribution_class: Some(class),
        aspect_ok,
        distance_score: Some(score),
        accepted: aspect_ok && class_ok,
        error: None,
    }
}

/// Scores every scene and returns the reports ranked: accepted scenes first,
/// ascending by distance score, then rejected scenes in the same order, then
/// scenes whose analysis failed. `scene_id` breaks ties.
pub fn filter_scenes(bundles: &[SceneBundle], policy: &FilterPolicy) -> Vec<FilterReport> {
    #[cfg(feature = "parallel")]
    let mut reports: Vec<(FilterReport, &str)> = {
        use rayon::prelude::*;
        bundles
            .par_iter()
            .map(|b| (report_for(b, policy), b.source.as_str()))
            .collect()
    };
    #[cfg(not(feature = "parallel"))]
    let mut reports: Vec<(FilterReport, &str)> = bundles
        .iter()
        .map(|b| (report_for(b, policy), b.source.as_str()))
        .collect();

    reports.sort_by(|(a, sa), (b, sb)| rank_key_cmp(a, b).then_with(|| sa.cmp(sb)));
    reports.into_iter().map(|(r, _)| r).collect()
}

fn rank_key_cmp(a: &FilterReport, b: &FilterReport) -> Ordering {
    let tier = |r: &FilterReport| match (r.accepted, r.distance_score) {
        (true, _) => 0,
        (false, Some(_)) => 1,
        (false, None) => 2,
    };
    tier(a)
        .cmp(&tier(b))
        .then_with(|| {
            let sa = a.distance_score.unwrap_or(f64::INFINITY);
            let sb = b.distance_score.unwrap_or(f64::INFINITY);
            sa.total_cmp(&sb)
        })
        .then_with(|| a.scene_id.cmp(&b.scene_id))
}
