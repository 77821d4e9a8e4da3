//! Camera trajectory synthesis for the spatial directors.
//!
//! Twelve signed 6-DoF moves plus an orbit are the motion primitives.
//! Translations and rotations act in the camera frame of the pose where
//! the primitive starts (`x` right, `y` down, `z` forward; yaw about `y`,
//! pitch about `x`, roll about `z`). An orbit rotates the pose rigidly about
//! the vertical (world `+z`) line through the orbit center.

use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use nalgebra::{Matrix3, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::fusion::OccupancyGrid;
use crate::pose::{look_at, CameraPose};

#[derive(Error, Debug, Clone, PartialEq)]
pub enum PlanError {
    #[error("invalid trajectory spec: {0}")]
    InvalidSpec(String),
    #[error("orbit is degenerate: camera coincides with the orbit center")]
    DegenerateOrbit,
    #[error("poses are identical; no relative motion to classify")]
    IdenticalPoses,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MotionKind {
    TransXPos,
    TransXNeg,
    TransYPos,
    TransYNeg,
    TransZPos,
    TransZNeg,
    RotYawPos,
    RotYawNeg,
    RotPitchPos,
    RotPitchNeg,
    RotRollPos,
    RotRollNeg,
    Orbit,
}

impl MotionKind {
    pub const ALL: [MotionKind; 13] = [
        MotionKind::TransXPos,
        MotionKind::TransXNeg,
        MotionKind::TransYPos,
        MotionKind::TransYNeg,
        MotionKind::TransZPos,
        MotionKind::TransZNeg,
        MotionKind::RotYawPos,
        MotionKind::RotYawNeg,
        MotionKind::RotPitchPos,
        MotionKind::RotPitchNeg,
        MotionKind::RotRollPos,
        MotionKind::RotRollNeg,
        MotionKind::Orbit,
    ];

    pub fn token(self) -> &'static str {
        match self {
            MotionKind::TransXPos => "trans_x_pos",
            MotionKind::TransXNeg => "trans_x_neg",
            MotionKind::TransYPos => "trans_y_pos",
            MotionKind::TransYNeg => "trans_y_neg",
            MotionKind::TransZPos => "trans_z_pos",
            MotionKind::TransZNeg => "trans_z_neg",
            MotionKind::RotYawPos => "rot_yaw_pos",
            MotionKind::RotYawNeg => "rot_yaw_neg",
            MotionKind::RotPitchPos => "rot_pitch_pos",
            MotionKind::RotPitchNeg => "rot_pitch_neg",
            MotionKind::RotRollPos => "rot_roll_pos",
            MotionKind::RotRollNeg => "rot_roll_neg",
            MotionKind::Orbit => "orbit",
        }
    }

    /// Camera-frame axis index and sign for the 12 DoF moves.
    fn axis_sign(self) -> Option<(usize, f64)> {
        use MotionKind::*;
        Some(match self {
            TransXPos | RotPitchPos => (0, 1.0),
            TransXNeg | RotPitchNeg => (0, -1.0),
            TransYPos | RotYawPos => (1, 1.0),
            TransYNeg | RotYawNeg => (1, -1.0),
            TransZPos | RotRollPos => (2, 1.0),
            TransZNeg | RotRollNeg => (2, -1.0),
            Orbit => return None,
        })
    }

    pub fn is_translation(self) -> bool {
        (self as u8) < 6
    }

    pub fn is_rotation(self) -> bool {
        (6..12).contains(&(self as u8))
    }
}

impl fmt::Display for MotionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.token())
    }
}

impl FromStr for MotionKind {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, PlanError> {
        let lower = s.trim().to_ascii_lowercase();
        MotionKind::ALL
            .into_iter()
            .find(|k| k.token() == lower)
            .ok_or_else(|| PlanError::InvalidSpec(format!("unknown motion primitive `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionPrimitive {
    pub kind: MotionKind,
    /// Meters for translations, radians for rotations and the orbit sweep.
    pub magnitude: f64,
}

impl MotionPrimitive {
    pub fn new(kind: MotionKind, magnitude: f64) -> Self {
        Self { kind, magnitude }
    }
}

/// Tokens parsed from a primitive list such as `trans_x_pos:1.0,orbit:3.14,frames=49`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrimitiveList {
    pub primitives: Vec<MotionPrimitive>,
    pub frames: Option<usize>,
    pub radius: Option<f64>,
}

impl FromStr for PrimitiveList {
    type Err = PlanError;

    fn from_str(s: &str) -> Result<Self, PlanError> {
        let mut out = PrimitiveList::default();
        for tok in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            if let Some((key, value)) = tok.split_once('=') {
                let bad = || PlanError::InvalidSpec(format!("bad value in `{tok}`"));
                match key.trim() {
                    "frames" => out.frames = Some(value.trim().parse().map_err(|_| bad())?),
                    "radius" => out.radius = Some(value.trim().parse().map_err(|_| bad())?),
                    other => {
                        return Err(PlanError::InvalidSpec(format!("unknown option `{other}`")))
                    }
                }
            } else {
                let (kind, mag) = tok.split_once(':').ok_or_else(|| {
                    PlanError::InvalidSpec(format!("expected kind:magnitude, got `{tok}`"))
                })?;
                let magnitude: f64 = mag
                    .trim()
                    .parse()
                    .map_err(|_| PlanError::InvalidSpec(format!("bad magnitude in `{tok}`")))?;
                out.primitives
                    .push(MotionPrimitive::new(kind.parse()?, magnitude));
            }
        }
        if out.primitives.is_empty() {
            return Err(PlanError::InvalidSpec("no motion primitives given".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub primitives: Vec<MotionPrimitive>,
    pub n_frames: usize,
    pub start: CameraPose,
    #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_vec3")]
    pub orbit_center: Option<Vector3<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orbit_radius: Option<f64>,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.n_frames < 2 {
            return Err(PlanError::InvalidSpec(format!(
                "n_frames must be >= 2, got {}",
                self.n_frames
            )));
        }
        if self.primitives.is_empty() {
            return Err(PlanError::InvalidSpec("no motion primitives".into()));
        }
        if self.n_frames - 1 < self.primitives.len() {
            return Err(PlanError::InvalidSpec(format!(
                "{} frames cannot hold {} primitives",
                self.n_frames,
                self.primitives.len()
            )));
        }
        for p in &self.primitives {
            if !(p.magnitude.is_finite() && p.magnitude > 0.0) {
                return Err(PlanError::InvalidSpec(format!(
                    "{} magnitude must be > 0",
                    p.kind
                )));
            }
        }
        let has_orbit = self.primitives.iter().any(|p| p.kind == MotionKind::Orbit);
        let has_fields = self.orbit_center.is_some() && self.orbit_radius.is_some();
        if has_orbit && !has_fields {
            return Err(PlanError::InvalidSpec(
                "orbit primitive needs orbit_center and orbit_radius".into(),
            ));
        }
        if !has_orbit && (self.orbit_center.is_some() || self.orbit_radius.is_some()) {
            return Err(PlanError::InvalidSpec(
                "orbit fields given without an orbit primitive".into(),
            ));
        }
        if let Some(r) = self.orbit_radius {
            if !(r.is_finite() && r > 0.0) {
                return Err(PlanError::InvalidSpec("orbit_radius must be > 0".into()));
            }
        }
        self.start
            .validate()
            .map_err(|e| PlanError::InvalidSpec(format!("start pose: {e}")))
    }
}

/// Parameters of a standalone orbit (see [`synthesize_orbit`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrbitSpec {
    #[serde(with = "vec3")]
    pub center: Vector3<f64>,
    pub radius: f64,
    pub sweep: f64,
    pub start_azimuth: f64,
    pub n_frames: usize,
}

/// How a trajectory was produced; enough to regenerate it bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrajectoryRecipe {
    Composite(TrajectorySpec),
    Orbit(OrbitSpec),
    Resampled {
        base: Box<TrajectoryRecipe>,
        n_frames: usize,
    },
}

impl TrajectoryRecipe {
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("recipe serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn build(&self) -> Result<Trajectory, PlanError> {
        match self {
            TrajectoryRecipe::Composite(spec) => synthesize_trajectory(spec),
            TrajectoryRecipe::Orbit(o) => {
                synthesize_orbit(&o.center, o.radius, o.sweep, o.start_azimuth, o.n_frames)
            }
            TrajectoryRecipe::Resampled { base, n_frames } => {
                resample_trajectory(&base.build()?, *n_frames)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub poses: Vec<CameraPose>,
    pub recipe: TrajectoryRecipe,
    pub spec_hash: String,
}

impl Trajectory {
    fn from_recipe(poses: Vec<CameraPose>, recipe: TrajectoryRecipe) -> Self {
        let spec_hash = recipe.hash();
        Self {
            poses,
            recipe,
            spec_hash,
        }
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }
}

/// Splits `intervals` as evenly as possible over `parts`, earliest parts first.
fn split_intervals(intervals: usize, parts: usize) -> Vec<usize> {
    let base = intervals / parts;
    let extra = intervals % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

fn axis_vector(axis: usize) -> Vector3<f64> {
    let mut v = Vector3::zeros();
    v[axis] = 1.0;
    v
}

/// Pose reached after applying `fraction` of `prim` from `origin`.
fn apply_primitive(
    origin: &CameraPose,
    prim: &MotionPrimitive,
    fraction: f64,
    orbit_center: Option<&Vector3<f64>>,
) -> CameraPose {
    let mut pose = origin.clone();
    let amount = prim.magnitude * fraction;
    match prim.kind.axis_sign() {
        Some((axis, sign)) if prim.kind.is_translation() => {
            pose.position = origin.position + origin.rotation * axis_vector(axis) * (sign * amount);
        }
        Some((axis, sign)) => {
            let local =
                Rotation3::from_axis_angle(&Unit::new_unchecked(axis_vector(axis)), sign * amount);
            pose.rotation = origin.rotation * local.into_inner();
        }
        None => {
            let center = orbit_center.expect("validated orbit center");
            let spin = Rotation3::from_axis_angle(&Vector3::z_axis(), amount).into_inner();
            pose.position = center + spin * (origin.position - center);
            pose.rotation = spin * origin.rotation;
        }
    }
    pose
}

/// Applies the primitives in order. The `n_frames - 1` intervals are split
/// evenly across primitives; within a primitive, translation is linear and
/// rotation has constant angular velocity. Frame 0 is `spec.start`.
pub fn synthesize_trajectory(spec: &TrajectorySpec) -> Result<Trajectory, PlanError> {
    spec.validate()?;
    let counts = split_intervals(spec.n_frames - 1, spec.primitives.len());
    let mut poses = Vec::with_capacity(spec.n_frames);
    poses.push(spec.start.clone());
    let mut origin = spec.start.clone();
    for (prim, &steps) in spec.primitives.iter().zip(&counts) {
        if prim.kind == MotionKind::Orbit {
            let center = spec.orbit_center.expect("validated");
            let radius = spec.orbit_radius.expect("validated");
            let horizontal = (origin.position - center).xy().norm();
            if horizontal < 1e-12 {
                return Err(PlanError::DegenerateOrbit);
            }
            if (horizontal - radius).abs() > 1e-6 * radius.max(1.0) {
                return Err(PlanError::InvalidSpec(format!(
                    "orbit starts {horizontal} from its axis but orbit_radius is {radius}"
                )));
            }
        }
        for s in 1..=steps {
            let f = s as f64 / steps as f64;
            poses.push(apply_primitive(
                &origin,
                prim,
                f,
                spec.orbit_center.as_ref(),
            ));
        }
        origin = poses.last().expect("non-empty").clone();
    }
    Ok(Trajectory::from_recipe(
        poses,
        TrajectoryRecipe::Composite(spec.clone()),
    ))
}

/// Start pose on an orbit: on the circle at `azimuth`, looking at `center`.
pub fn orbit_start_pose(
    center: &Vector3<f64>,
    radius: f64,
    azimuth: f64,
) -> Result<CameraPose, PlanError> {
    let eye = center + Vector3::new(radius * azimuth.cos(), radius * azimuth.sin(), 0.0);
    let rotation = look_at(&eye, center, &Vector3::z()).ok_or(PlanError::DegenerateOrbit)?;
    let mut pose = CameraPose::at(eye);
    pose.rotation = rotation;
    Ok(pose)
}

/// Circle in the horizontal plane through `center`, uniform azimuth steps,
/// every camera looking at `center` with world `+z` as up.
pub fn synthesize_orbit(
    center: &Vector3<f64>,
    radius: f64,
    sweep: f64,
    start_azimuth: f64,
    n_frames: usize,
) -> Result<Trajectory, PlanError> {
    if n_frames < 2 {
        return Err(PlanError::InvalidSpec(format!(
            "n_frames must be >= 2, got {n_frames}"
        )));
    }
    if !(radius.is_finite() && radius > 0.0) {
        return Err(PlanError::InvalidSpec(format!(
            "radius must be > 0, got {radius}"
        )));
    }
    if !(sweep.is_finite() && start_azimuth.is_finite()) {
        return Err(PlanError::InvalidSpec(
            "sweep and start azimuth must be finite".into(),
        ));
    }
    let poses = (0..n_frames)
        .map(|k| {
            let az = start_azimuth + sweep * k as f64 / (n_frames - 1) as f64;
            orbit_start_pose(center, radius, az)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Trajectory::from_recipe(
        poses,
        TrajectoryRecipe::Orbit(OrbitSpec {
            center: *center,
            radius,
            sweep,
            start_azimuth,
            n_frames,
        }),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DirectorPolicy {
    /// Translations are divided by this length before comparison.
    pub scene_diagonal: f64,
    /// Largest relative gap between the two optical axes at their closest
    /// approach for the pair to count as looking at a common point.
    pub orbit_convergence_tolerance: f64,
    /// Largest relative distance mismatch to the common point for an orbit.
    pub orbit_equidistance_tolerance: f64,
}

impl Default for DirectorPolicy {
    fn default() -> Self {
        Self {
            scene_diagonal: 1.0,
            orbit_convergence_tolerance: 1e-3,
            orbit_equidistance_tolerance: 0.1,
        }
    }
}

/// Normalized score of every primitive for the motion from `a` to `b`.
/// Non-orbit pairs get an orbit score of 0.
pub fn director_scores(
    a: &CameraPose,
    b: &CameraPose,
    policy: &DirectorPolicy,
) -> Result<[(MotionKind, f64); 13], PlanError> {
    let t = a.rotation.transpose() * (b.position - a.position);
    let rel = a.rotation.transpose() * b.rotation;
    let omega = Rotation3::from_matrix_unchecked(rel).scaled_axis();
    if t.norm() < 1e-9 && omega.norm() < 1e-9 {
        return Err(PlanError::IdenticalPoses);
    }
    let mut scores = [(MotionKind::TransXPos, 0.0); 13];
    for (slot, kind) in scores.iter_mut().zip(MotionKind::ALL) {
        slot.0 = kind;
        slot.1 = match kind.axis_sign() {
            Some((axis, sign)) if kind.is_translation() => {
                (sign * t[axis]).max(0.0) / policy.scene_diagonal
            }
            Some((axis, sign)) => (sign * omega[axis]).max(0.0) / PI,
            None => orbit_fit(a, b, policy).map_or(0.0, |fit| 1.0 - fit.residual),
        };
    }
    Ok(scores)
}

struct OrbitFit {
    residual: f64,
    sweep: f64,
}

fn orbit_fit(a: &CameraPose, b: &CameraPose, policy: &DirectorPolicy) -> Option<OrbitFit> {
    let (da, db) = (a.forward(), b.forward());
    let w = a.position - b.position;
    let dd = da.dot(&db);
    let denom = 1.0 - dd * dd;
    if denom < 1e-12 {
        return None;
    }
    let s = (dd * db.dot(&w) - da.dot(&w)) / denom;
    let u = (db.dot(&w) - dd * da.dot(&w)) / denom;
    if !(s > 1e-9 && u > 1e-9) {
        return None;
    }
    let pa = a.position + da * s;
    let pb = b.position + db * u;
    let gap = (pa - pb).norm();
    if gap > policy.orbit_convergence_tolerance * s.max(u) {
        return None;
    }
    let m = (pa + pb) * 0.5;
    let (ra, rb) = ((a.position - m).norm(), (b.position - m).norm());
    let residual = (ra - rb).abs() / ra.max(rb);
    if residual > policy.orbit_equidistance_tolerance {
        return None;
    }
    let (va, vb) = (a.position - m, b.position - m);
    let sweep = va.cross(&vb).norm().atan2(va.dot(&vb));
    Some(OrbitFit { residual, sweep })
}

/// Picks the director whose primitive best explains the motion from `a` to
/// `b`. The returned magnitude is the matching component (distance, angle or
/// orbit sweep). Exact score ties go to the earlier primitive.
pub fn select_director(
    a: &CameraPose,
    b: &CameraPose,
    policy: &DirectorPolicy,
) -> Result<MotionPrimitive, PlanError> {
    let scores = director_scores(a, b, policy)?;
    let mut best = scores[0];
    for s in &scores[1..] {
        if s.1 > best.1 {
            best = *s;
        }
    }
    let kind = best.0;
    let magnitude = match kind.axis_sign() {
        Some((axis, sign)) if kind.is_translation() => {
            sign * (a.rotation.transpose() * (b.position - a.position))[axis]
        }
        Some((axis, sign)) => {
            let rel = a.rotation.transpose() * b.rotation;
            sign * Rotation3::from_matrix_unchecked(rel).scaled_axis()[axis]
        }
        None => orbit_fit(a, b, policy).map_or(0.0, |f| f.sweep),
    };
    Ok(MotionPrimitive::new(kind, magnitude))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub feasible: bool,
    pub first_violation_frame: Option<usize>,
    /// Smallest distance from any sample to an occupied voxel center;
    /// `f64::MAX` when nothing is occupied.
    pub min_clearance: f64,
}

/// Checks every frame position and samples spaced at most one voxel apart
/// along each inter-frame segment. A sample violates when its voxel is
/// occupied or its clearance is below `margin`. Samples between frames `i`
/// and `i + 1` count towards frame `i`.
pub fn check_feasible(
    traj: &Trajectory,
    occupancy: &OccupancyGrid,
    margin: f64,
) -> FeasibilityReport {
    let mut min_clearance = f64::MAX;
    let mut first_violation = None;
    let has_occupied = occupancy.occupied_count() > 0;
    let mut visit = |p: &Vector3<f64>, frame: usize| {
        if !has_occupied {
            return;
        }
        let clearance = occupancy.clearance(p);
        min_clearance = min_clearance.min(clearance);
        let hit = occupancy.is_occupied_at(p) || clearance < margin;
        if hit && first_violation.is_none() {
            first_violation = Some(frame);
        }
    };
    for (i, pose) in traj.poses.iter().enumerate() {
        visit(&pose.position, i);
        if let Some(next) = traj.poses.get(i + 1) {
            let delta = next.position - pose.position;
            let count = (delta.norm() / occupancy.voxel_size).ceil() as usize;
            for k in 1..count {
                visit(&(pose.position + delta * (k as f64 / count as f64)), i);
            }
        }
    }
    FeasibilityReport {
        feasible: first_violation.is_none(),
        first_violation_frame: first_violation,
        min_clearance,
    }
}

#[derive(Debug, Clone, Copy)]
enum Segment {
    Line {
        a: Vector3<f64>,
        b: Vector3<f64>,
    },
    Arc {
        center: Vector3<f64>,
        from: Vector3<f64>,
        axis: Unit<Vector3<f64>>,
        angle: f64,
        radius: f64,
    },
}

impl Segment {
    fn length(&self) -> f64 {
        match self {
            Segment::Line { a, b } => (b - a).norm(),
            Segment::Arc { angle, radius, .. } => angle * radius,
        }
    }

    fn point(&self, f: f64) -> Vector3<f64> {
        match self {
            Segment::Line { a, b } => a + (b - a) * f,
            Segment::Arc {
                center,
                from,
                axis,
                angle,
                ..
            } => center + Rotation3::from_axis_angle(axis, angle * f) * from,
        }
    }
}

/// Circumcenter and radius of a triangle, or `None` when (near) collinear.
fn circumcircle(
    a: &Vector3<f64>,
    b: &Vector3<f64>,
    c: &Vector3<f64>,
) -> Option<(Vector3<f64>, f64)> {
    let ab = b - a;
    let ac = c - a;
    let n = ab.cross(&ac);
    let n2 = n.norm_squared();
    let scale = ab.norm_squared().max(ac.norm_squared());
    if n2 <= 1e-18 * scale * scale {
        return None;
    }
    let offset = (n.cross(&ab) * ac.norm_squared() + ac.cross(&n) * ab.norm_squared()) / (2.0 * n2);
    let radius = offset.norm();
    if radius > 1e6 * scale.sqrt() {
        return None;
    }
    Some((a + offset, radius))
}

fn segment_between(points: &[Vector3<f64>], i: usize) -> Segment {
    let (a, b) = (points[i], points[i + 1]);
    let mut best: Option<(Vector3<f64>, f64)> = None;
    let mut straight = false;
    let neighbors = [i.checked_sub(1), (i + 2 < points.len()).then_some(i + 2)];
    for n in neighbors.into_iter().flatten() {
        match circumcircle(&a, &b, &points[n]) {
            None => straight = true,
            Some(c) => {
                if best.is_none_or(|bst| c.1 > bst.1) {
                    best = Some(c);
                }
            }
        }
    }
    match best {
        Some((center, radius)) if !straight => {
            let (u, v) = (a - center, b - center);
            let cross = u.cross(&v);
            if cross.norm() < 1e-15 * radius * radius {
                return Segment::Line { a, b };
            }
            Segment::Arc {
                center,
                from: u,
                axis: Unit::new_normalize(cross),
                angle: cross.norm().atan2(u.dot(&v)),
                radius,
            }
        }
        _ => Segment::Line { a, b },
    }
}

/// Resamples to `n` poses spaced uniformly in arc length. Each segment is
/// followed along the circle through its endpoints and the flatter of its
/// two neighbors (straight when either neighbor is collinear), so circular
/// paths stay on their circle. Rotations are slerped. Endpoints are kept.
pub fn resample_trajectory(traj: &Trajectory, n: usize) -> Result<Trajectory, PlanError> {
    if n < 2 {
        return Err(PlanError::InvalidSpec(format!("n must be >= 2, got {n}")));
    }
    if traj.poses.len() < 2 {
        return Err(PlanError::InvalidSpec(
            "trajectory needs at least 2 poses".into(),
        ));
    }
    let src = &traj.poses;
    let points: Vec<Vector3<f64>> = src.iter().map(|p| p.position).collect();
    let segments: Vec<Segment> = (0..points.len() - 1)
        .map(|i| segment_between(&points, i))
        .collect();
    let mut cumulative = Vec::with_capacity(segments.len() + 1);
    cumulative.push(0.0);
    for s in &segments {
        cumulative.push(cumulative.last().copied().unwrap_or(0.0) + s.length());
    }
    let total = *cumulative.last().expect("non-empty");
    let quats: Vec<UnitQuaternion<f64>> = src.iter().map(|p| p.quaternion()).collect();

    let mut poses = Vec::with_capacity(n);
    poses.push(src[0].clone());
    for k in 1..n - 1 {
        let (seg, f) = if total > 1e-12 {
            let s = total * k as f64 / (n - 1) as f64;
            let idx = cumulative
                .partition_point(|&c| c <= s)
                .saturating_sub(1)
                .min(segments.len() - 1);
            let len = segments[idx].length();
            let f = if len > 0.0 {
                ((s - cumulative[idx]) / len).clamp(0.0, 1.0)
            } else {
                0.0
            };
            (idx, f)
        } else {
            let x = (src.len() - 1) as f64 * k as f64 / (n - 1) as f64;
            let idx = (x.floor() as usize).min(segments.len() - 1);
            (idx, x - idx as f64)
        };
        let mut pose = src[seg].clone();
        pose.position = segments[seg].point(f);
        pose.rotation = quats[seg]
            .slerp(&quats[seg + 1], f)
            .to_rotation_matrix()
            .into_inner();
        poses.push(pose);
    }
    poses.push(src[src.len() - 1].clone());
    Ok(Trajectory::from_recipe(
        poses,
        TrajectoryRecipe::Resampled {
            base: Box::new(traj.recipe.clone()),
            n_frames: n,
        },
    ))
}

#[derive(Debug, Serialize, Deserialize)]
struct TrajectoryHeader {
    spec: TrajectoryRecipe,
    n_frames: usize,
    spec_hash: String,
}

#[derive(Error, Debug)]
pub enum TrajectoryFileError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("missing header line")]
    MissingHeader,
    #[error("header declares {expected} frames, found {found}")]
    FrameCount { expected: usize, found: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Header line followed by one pose record per line.
pub fn write_trajectory<W: Write>(mut w: W, traj: &Trajectory) -> std::io::Result<()> {
    let header = TrajectoryHeader {
        spec: traj.recipe.clone(),
        n_frames: traj.poses.len(),
        spec_hash: traj.spec_hash.clone(),
    };
    writeln!(
        w,
        "{}",
        serde_json::to_string(&header).map_err(std::io::Error::other)?
    )?;
    for p in &traj.poses {
        writeln!(
            w,
            "{}",
            serde_json::to_string(p).map_err(std::io::Error::other)?
        )?;
    }
    Ok(())
}

pub fn read_trajectory<R: BufRead>(r: R) -> Result<Trajectory, TrajectoryFileError> {
    let mut lines = r.lines().enumerate();
    let header: TrajectoryHeader = loop {
        match lines.next() {
            None => return Err(TrajectoryFileError::MissingHeader),
            Some((i, line)) => {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                break serde_json::from_str(&line).map_err(|e| TrajectoryFileError::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })?;
            }
        }
    };
    let mut poses = Vec::with_capacity(header.n_frames);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        poses.push(
            serde_json::from_str(&line).map_err(|e| TrajectoryFileError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?,
        );
    }
    if poses.len() != header.n_frames {
        return Err(TrajectoryFileError::FrameCount {
            expected: header.n_frames,
            found: poses.len(),
        });
    }
    Ok(Trajectory {
        poses,
        recipe: header.spec,
        spec_hash: header.spec_hash,
    })
}

/// Rotation angle of `b` relative to `a`.
pub fn relative_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    Rotation3::from_matrix_unchecked(a.transpose() * b).angle()
}

mod vec3 {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Vector3<f64>, s: S) -> Result<S::Ok, S::Error> {
        [v.x, v.y, v.z].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vector3<f64>, D::Error> {
        let a = <[f64; 3]>::deserialize(d)?;
        Ok(Vector3::new(a[0], a[1], a[2]))
    }
}

mod opt_vec3 {
    use nalgebra::Vector3;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &Option<Vector3<f64>>, s: S) -> Result<S::Ok, S::Error> {
        v.map(|v| [v.x, v.y, v.z]).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Vector3<f64>>, D::Error> {
        Ok(Option::<[f64; 3]>::deserialize(d)?.map(|a| Vector3::new(a[0], a[1], a[2])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(primitives: Vec<MotionPrimitive>, n_frames: usize) -> TrajectorySpec {
        TrajectorySpec {
            primitives,
            n_frames,
            start: CameraPose::identity(),
            orbit_center: None,
            orbit_radius: None,
        }
    }

    #[test]
    fn translation_is_linear() {
        let t = synthesize_trajectory(&spec(
            vec![MotionPrimitive::new(MotionKind::TransXPos, 1.0)],
            5,
        ))
        .unwrap();
        let xs: Vec<f64> = t.poses.iter().map(|p| p.position.x).collect();
        assert_eq!(xs, [0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(t.poses[0], CameraPose::identity());
    }

    #[test]
    fn yaw_has_constant_angular_velocity() {
        let t = synthesize_trajectory(&spec(
            vec![MotionPrimitive::new(MotionKind::RotYawPos, PI / 2.0)],
            3,
        ))
        .unwrap();
        for (k, p) in t.poses.iter().enumerate() {
            assert_eq!(p.position, Vector3::zeros());
            let heading = relative_angle(&Matrix3::identity(), &p.rotation);
            assert!((heading - k as f64 * PI / 4.0).abs() < 1e-12);
            // rotation about camera y keeps y fixed
            assert!((p.down() - Vector3::y()).norm() < 1e-12);
        }
    }

    #[test]
    fn composition_makes_an_l() {
        let t = synthesize_trajectory(&spec(
            vec![
                MotionPrimitive::new(MotionKind::TransXPos, 1.0),
                MotionPrimitive::new(MotionKind::TransYPos, 1.0),
            ],
            9,
        ))
        .unwrap();
        assert!((t.poses[8].position - Vector3::new(1.0, 1.0, 0.0)).norm() < 1e-12);
        assert!((t.poses[4].position - Vector3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn spec_validation() {
        let mut s = spec(vec![MotionPrimitive::new(MotionKind::TransXPos, 1.0)], 1);
        assert!(matches!(
            synthesize_trajectory(&s),
            Err(PlanError::InvalidSpec(_))
        ));
        s.n_frames = 3;
        s.primitives = vec![MotionPrimitive::new(MotionKind::Orbit, 1.0)];
        assert!(matches!(
            synthesize_trajectory(&s),
            Err(PlanError::InvalidSpec(_))
        ));
        s.primitives = vec![MotionPrimitive::new(MotionKind::TransXPos, -1.0)];
        assert!(synthesize_trajectory(&s).is_err());
        s.primitives = vec![MotionPrimitive::new(MotionKind::TransXPos, 1.0)];
        s.orbit_radius = Some(1.0);
        assert!(synthesize_trajectory(&s).is_err());
    }

    #[test]
    fn orbit_steps_and_look_at() {
        let c = Vector3::new(0.5, -1.0, 2.0);
        let t = synthesize_orbit(&c, 1.0, 2.0 * PI, 0.0, 4).unwrap();
        for (k, p) in t.poses.iter().enumerate() {
            let d = p.position - c;
            assert!((d.norm() - 1.0).abs() < 1e-12);
            let az = d.y.atan2(d.x).rem_euclid(2.0 * PI);
            let expected = (2.0 * PI * k as f64 / 3.0).rem_euclid(2.0 * PI);
            let diff = (az - expected).abs();
            assert!(diff < 1e-9 || (diff - 2.0 * PI).abs() < 1e-9);
            let axis_err = p.forward().angle(&(c - p.position));
            assert!(axis_err < 1e-9);
        }
        assert!(matches!(
            synthesize_orbit(&c, 0.0, 1.0, 0.0, 4),
            Err(PlanError::InvalidSpec(_))
        ));
        assert!(matches!(
            synthesize_orbit(&c, 1.0, 1.0, 0.0, 1),
            Err(PlanError::InvalidSpec(_))
        ));
    }

    #[test]
    fn orbit_chords_are_equal() {
        let r = 2.5;
        let t = synthesize_orbit(&Vector3::zeros(), r, PI, 0.3, 49).unwrap();
        let expected = 2.0 * r * (PI / 48.0 / 2.0).sin();
        for w in t.poses.windows(2) {
            assert!(((w[1].position - w[0].position).norm() - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn director_examples() {
        let policy = DirectorPolicy::default();
        let a = CameraPose::identity();
        let mut b = a.clone();
        b.position = Vector3::new(1.0, 0.0, 0.0);
        assert_eq!(
            select_director(&a, &b, &policy).unwrap().kind,
            MotionKind::TransXPos
        );
        let mut b = a.clone();
        b.rotation = Rotation3::from_axis_angle(&Vector3::y_axis(), -0.4).into_inner();
        let sel = select_director(&a, &b, &policy).unwrap();
        assert_eq!(sel.kind, MotionKind::RotYawNeg);
        assert!((sel.magnitude - 0.4).abs() < 1e-12);
        assert_eq!(
            select_director(&a, &a, &policy),
            Err(PlanError::IdenticalPoses)
        );
    }

    #[test]
    fn orbit_pair_selects_orbit() {
        let policy = DirectorPolicy {
            scene_diagonal: 4.0,
            ..DirectorPolicy::default()
        };
        let a = orbit_start_pose(&Vector3::zeros(), 1.0, 0.0).unwrap();
        let b = orbit_start_pose(&Vector3::zeros(), 1.0, PI / 3.0).unwrap();
        let sel = select_director(&a, &b, &policy).unwrap();
        assert_eq!(sel.kind, MotionKind::Orbit);
        assert!((sel.magnitude - PI / 3.0).abs() < 1e-9);
    }

    #[test]
    fn primitive_list_parses() {
        let list: PrimitiveList = "trans_x_pos:1.0, orbit:3.14,frames=49".parse().unwrap();
        assert_eq!(list.primitives.len(), 2);
        assert_eq!(list.primitives[1].kind, MotionKind::Orbit);
        assert_eq!(list.frames, Some(49));
        assert!("spin:1".parse::<PrimitiveList>().is_err());
        assert!("frames=3".parse::<PrimitiveList>().is_err());
    }

    #[test]
    fn resample_line_and_identity() {
        let t = synthesize_trajectory(&spec(
            vec![MotionPrimitive::new(MotionKind::TransZPos, 2.0)],
            2,
        ))
        .unwrap();
        let r = resample_trajectory(&t, 5).unwrap();
        for (k, p) in r.poses.iter().enumerate() {
            assert!((p.position.z - 0.5 * k as f64).abs() < 1e-12);
        }
        let same = resample_trajectory(&r, 5).unwrap();
        for (a, b) in r.poses.iter().zip(&same.poses) {
            assert!((a.position - b.position).norm() < 1e-12);
            assert!((a.rotation - b.rotation).norm() < 1e-12);
        }
        assert!(resample_trajectory(&t, 1).is_err());
    }

    #[test]
    fn trajectory_file_round_trip() {
        let t = synthesize_orbit(&Vector3::new(1.0, 2.0, 0.5), 1.5, 1.0, 0.2, 7).unwrap();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &t).unwrap();
        let back = read_trajectory(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        let mut again = Vec::new();
        write_trajectory(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }
}
