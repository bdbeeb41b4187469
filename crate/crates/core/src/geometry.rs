//! Planar geometry kernels: poses, oriented boxes, polylines and Bezier curves.
//!
//! Everything here is a pure function over immutable values. Collision tests use
//! the separating-axis theorem over the four edge normals of two rectangles, and
//! boxes that merely touch are reported as overlapping.

use std::f64::consts::PI;
use std::ops::{Add, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("trajectory horizons are misaligned: {left} vs {right} steps")]
    HorizonMismatch { left: usize, right: usize },
    #[error("polyline needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("polyline points {0} and {1} coincide")]
    CoincidentPoints(usize, usize),
    #[error("polyline point {0} is not finite")]
    NonFinitePoint(usize),
    #[error("bezier curve needs at least 2 control points, got {0}")]
    TooFewControlPoints(usize),
    #[error("bezier curve needs at least 2 samples, got {0}")]
    TooFewSamples(usize),
    #[error("invalid box extents: length {length}, width {width}")]
    InvalidExtents { length: f64, width: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn from_angle(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self { x: c, y: s }
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// z component of the 3D cross product; positive when `other` is to the left.
    pub fn cross(self, other: Vec2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn distance(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    /// Counter-clockwise perpendicular.
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn lerp(self, other: Vec2, t: f64) -> Vec2 {
        Vec2::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

impl From<[f64; 2]> for Vec2 {
    fn from(p: [f64; 2]) -> Self {
        Vec2::new(p[0], p[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(p: Vec2) -> Self {
        [p.x, p.y]
    }
}

/// Wraps an angle into (-pi, pi].
pub fn normalize_angle(angle: f64) -> f64 {
    if !angle.is_finite() {
        return angle;
    }
    let mut a = angle % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, heading: f64) -> Self {
        Self {
            x,
            y,
            heading: normalize_angle(heading),
        }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    pub fn direction(&self) -> Vec2 {
        Vec2::from_angle(self.heading)
    }

    /// Expresses a world point in this pose's frame (x forward, y left).
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        (p - self.position()).rotate(-self.heading)
    }
}

/// Footprint extents of a vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Dims {
    pub length: f64,
    pub width: f64,
}

impl Dims {
    pub fn new(length: f64, width: f64) -> Self {
        Self { length, width }
    }

    pub fn half_diagonal(&self) -> f64 {
        0.5 * self.length.hypot(self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrientedBox {
    pub center: Pose2,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(center: Pose2, length: f64, width: f64) -> Result<Self, GeometryError> {
        if !(width > 0.0 && length >= width && length.is_finite()) {
            return Err(GeometryError::InvalidExtents { length, width });
        }
        Ok(Self {
            center,
            length,
            width,
        })
    }

    /// Builds a box without checking `length >= width`; extents must be positive.
    pub fn from_dims(center: Pose2, dims: Dims) -> Self {
        Self {
            center,
            length: dims.length,
            width: dims.width,
        }
    }

    /// Unit vectors along the box length and width.
    pub fn axes(&self) -> (Vec2, Vec2) {
        let u = self.center.direction();
        (u, u.perp())
    }

    /// Corners in counter-clockwise order starting front-left.
    pub fn corners(&self) -> [Vec2; 4] {
        let (u, v) = self.axes();
        let c = self.center.position();
        let hl = 0.5 * self.length;
        let hw = 0.5 * self.width;
        [
            c + u * hl + v * hw,
            c - u * hl + v * hw,
            c - u * hl - v * hw,
            c + u * hl - v * hw,
        ]
    }

    pub fn contains(&self, p: Vec2) -> bool {
        let (u, v) = self.axes();
        let d = p - self.center.position();
        d.dot(u).abs() <= 0.5 * self.length && d.dot(v).abs() <= 0.5 * self.width
    }

    pub fn edges(&self) -> [(Vec2, Vec2); 4] {
        let c = self.corners();
        [(c[0], c[1]), (c[1], c[2]), (c[2], c[3]), (c[3], c[0])]
    }
}

fn project_interval(corners: &[Vec2; 4], axis: Vec2) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for c in corners {
        let p = c.dot(axis);
        lo = lo.min(p);
        hi = hi.max(p);
    }
    (lo, hi)
}

/// True iff the closed rectangles intersect. Touching counts as overlap.
pub fn obb_overlap(a: &OrientedBox, b: &OrientedBox) -> bool {
    // Quick reject on bounding circles.
    let reach = 0.5 * (a.length.hypot(a.width) + b.length.hypot(b.width));
    if (a.center.position() - b.center.position()).norm_sq() > reach * reach {
        return false;
    }
    let ca = a.corners();
    let cb = b.corners();
    let (au, av) = a.axes();
    let (bu, bv) = b.axes();
    for axis in [au, av, bu, bv] {
        let (a_lo, a_hi) = project_interval(&ca, axis);
        let (b_lo, b_hi) = project_interval(&cb, axis);
        if a_hi < b_lo || b_hi < a_lo {
            return false;
        }
    }
    true
}

fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len_sq = ab.norm_sq();
    if len_sq == 0.0 {
        return p.distance(a);
    }
    let t = ((p - a).dot(ab) / len_sq).clamp(0.0, 1.0);
    p.distance(a + ab * t)
}

/// Euclidean distance between separated boxes, or minus the penetration depth
/// (minimum overlap over the separating-axis candidates) when they intersect.
pub fn signed_gap(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let ca = a.corners();
    let cb = b.corners();
    if obb_overlap(a, b) {
        let (au, av) = a.axes();
        let (bu, bv) = b.axes();
        let mut depth = f64::INFINITY;
        for axis in [au, av, bu, bv] {
            let (a_lo, a_hi) = project_interval(&ca, axis);
            let (b_lo, b_hi) = project_interval(&cb, axis);
            depth = depth.min(a_hi.min(b_hi) - a_lo.max(b_lo));
        }
        return -depth;
    }
    let mut best = f64::INFINITY;
    for (p, q) in b.edges() {
        for c in &ca {
            best = best.min(point_segment_distance(*c, p, q));
        }
    }
    for (p, q) in a.edges() {
        for c in &cb {
            best = best.min(point_segment_distance(*c, p, q));
        }
    }
    best
}

/// A timestamped state that may be missing (occluded) at some steps.
pub trait PoseSample {
    /// `None` when the sample is invalid and must be skipped.
    fn sample_pose(&self) -> Option<Pose2>;
}

impl PoseSample for Pose2 {
    fn sample_pose(&self) -> Option<Pose2> {
        Some(*self)
    }
}

/// Smallest step at which the two footprints overlap. Steps where either
/// sample is invalid are skipped.
pub fn earliest_collision_step<A: PoseSample, B: PoseSample>(
    traj_a: &[A],
    dims_a: Dims,
    traj_b: &[B],
    dims_b: Dims,
) -> Result<Option<usize>, GeometryError> {
    if traj_a.len() != traj_b.len() {
        return Err(GeometryError::HorizonMismatch {
            left: traj_a.len(),
            right: traj_b.len(),
        });
    }
    for (k, (sa, sb)) in traj_a.iter().zip(traj_b).enumerate() {
        let (Some(pa), Some(pb)) = (sa.sample_pose(), sb.sample_pose()) else {
            continue;
        };
        if obb_overlap(
            &OrientedBox::from_dims(pa, dims_a),
            &OrientedBox::from_dims(pb, dims_b),
        ) {
            return Ok(Some(k));
        }
    }
    Ok(None)
}

/// Smallest footprint gap over all aligned valid steps (`INFINITY` if none).
pub fn closest_approach<A: PoseSample, B: PoseSample>(
    traj_a: &[A],
    dims_a: Dims,
    traj_b: &[B],
    dims_b: Dims,
) -> f64 {
    let reach = dims_a.half_diagonal() + dims_b.half_diagonal();
    let mut best = f64::INFINITY;
    for (sa, sb) in traj_a.iter().zip(traj_b) {
        let (Some(pa), Some(pb)) = (sa.sample_pose(), sb.sample_pose()) else {
            continue;
        };
        // Separated boxes are at least this far apart.
        let bound = pa.position().distance(pb.position()) - reach;
        if bound >= 0.0 && bound >= best {
            continue;
        }
        best = best.min(signed_gap(
            &OrientedBox::from_dims(pa, dims_a),
            &OrientedBox::from_dims(pb, dims_b),
        ));
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub arc_length: f64,
    /// Signed distance to the polyline, left of travel positive.
    pub lateral_offset: f64,
    pub segment: usize,
}

/// An open polyline with strictly increasing cumulative arc length.
#[derive(Debug, Clone, PartialEq)]
pub struct Polyline {
    points: Vec<Vec2>,
    cumulative: Vec<f64>,
}

const MIN_SEGMENT: f64 = 1e-9;

impl Polyline {
    pub fn new(points: Vec<Vec2>) -> Result<Self, GeometryError> {
        if points.len() < 2 {
            return Err(GeometryError::TooFewPoints(points.len()));
        }
        let mut cumulative = Vec::with_capacity(points.len());
        cumulative.push(0.0);
        for i in 0..points.len() {
            if !points[i].is_finite() {
                return Err(GeometryError::NonFinitePoint(i));
            }
            if i > 0 {
                let d = points[i].distance(points[i - 1]);
                if d <= MIN_SEGMENT {
                    return Err(GeometryError::CoincidentPoints(i - 1, i));
                }
                cumulative.push(cumulative[i - 1] + d);
            }
        }
        Ok(Self { points, cumulative })
    }

    /// Builds a polyline after dropping points that coincide with their predecessor.
    pub fn new_dedup(points: Vec<Vec2>) -> Result<Self, GeometryError> {
        let mut kept: Vec<Vec2> = Vec::with_capacity(points.len());
        for p in points {
            if kept.last().is_none_or(|q| q.distance(p) > 1e-6) {
                kept.push(p);
            }
        }
        Self::new(kept)
    }

    pub fn points(&self) -> &[Vec2] {
        &self.points
    }

    pub fn total_length(&self) -> f64 {
        *self.cumulative.last().expect("polyline has points")
    }

    pub fn first(&self) -> Vec2 {
        self.points[0]
    }

    pub fn last(&self) -> Vec2 {
        *self.points.last().expect("polyline has points")
    }

    fn segment_direction(&self, i: usize) -> Vec2 {
        let d = self.points[i + 1] - self.points[i];
        d * (1.0 / d.norm())
    }

    fn segment_at(&self, s: f64) -> usize {
        let n = self.points.len() - 1;
        match self
            .cumulative
            .binary_search_by(|c| c.partial_cmp(&s).unwrap_or(std::cmp::Ordering::Less))
        {
            Ok(i) => i.min(n - 1),
            Err(i) => i.saturating_sub(1).min(n - 1),
        }
    }

    /// Point at arc length `s`, clamped to the polyline.
    pub fn point_at(&self, s: f64) -> Vec2 {
        let s = s.clamp(0.0, self.total_length());
        let i = self.segment_at(s);
        let seg = self.cumulative[i + 1] - self.cumulative[i];
        let t = ((s - self.cumulative[i]) / seg).clamp(0.0, 1.0);
        self.points[i].lerp(self.points[i + 1], t)
    }

    /// Tangent heading at arc length `s`, clamped to the polyline.
    pub fn heading_at(&self, s: f64) -> f64 {
        let s = s.clamp(0.0, self.total_length());
        self.segment_direction(self.segment_at(s)).angle()
    }

    pub fn project(&self, p: Vec2) -> Projection {
        let n = self.points.len() - 1;
        let mut best = (f64::INFINITY, 0usize, 0.0f64);
        for i in 0..n {
            let a = self.points[i];
            let ab = self.points[i + 1] - a;
            let t = ((p - a).dot(ab) / ab.norm_sq()).clamp(0.0, 1.0);
            let d = (p - (a + ab * t)).norm_sq();
            if d < best.0 {
                best = (d, i, t);
            }
        }
        let (_, i, t) = best;
        let seg_len = self.cumulative[i + 1] - self.cumulative[i];
        let dir = self.segment_direction(i);
        let a = self.points[i];
        let raw_t = (p - a).dot(dir) / seg_len;
        let lateral = dir.cross(p - a);
        if (i == 0 && raw_t < 0.0) || (i == n - 1 && raw_t > 1.0) {
            // Beyond an endpoint: clamp arc length, offset against the end segment's extension.
            return Projection {
                arc_length: if i == 0 && raw_t < 0.0 {
                    0.0
                } else {
                    self.total_length()
                },
                lateral_offset: lateral,
                segment: i,
            };
        }
        let foot = a + dir * (t * seg_len);
        let dist = p.distance(foot);
        Projection {
            arc_length: self.cumulative[i] + t * seg_len,
            lateral_offset: if lateral < 0.0 { -dist } else { dist },
            segment: i,
        }
    }

    /// Sub-polyline between two arc lengths, inclusive of the cut points.
    pub fn slice(&self, from: f64, to: f64) -> Result<Polyline, GeometryError> {
        let from = from.clamp(0.0, self.total_length());
        let to = to.clamp(from, self.total_length());
        let mut pts = vec![self.point_at(from)];
        for (p, c) in self.points.iter().zip(&self.cumulative) {
            if *c > from && *c < to {
                pts.push(*p);
            }
        }
        pts.push(self.point_at(to));
        Polyline::new_dedup(pts)
    }

    pub fn segments(&self) -> impl Iterator<Item = (Vec2, Vec2)> + '_ {
        self.points.windows(2).map(|w| (w[0], w[1]))
    }
}

/// Evaluates the Bezier curve with control points `ctrl` at `t` by de Casteljau.
pub fn bezier_point(ctrl: &[Vec2], t: f64) -> Vec2 {
    let mut work = ctrl.to_vec();
    let n = work.len();
    for level in 1..n {
        for i in 0..n - level {
            work[i] = work[i].lerp(work[i + 1], t);
        }
    }
    work[0]
}

/// Samples the single Bezier curve whose control points are `waypoints`
/// at `samples` uniformly spaced parameter values.
pub fn bezier_fit(waypoints: &[Vec2], samples: usize) -> Result<Polyline, GeometryError> {
    if waypoints.len() < 2 {
        return Err(GeometryError::TooFewControlPoints(waypoints.len()));
    }
    if samples < 2 {
        return Err(GeometryError::TooFewSamples(samples));
    }
    let last = samples - 1;
    let pts = (0..samples)
        .map(|i| match i {
            0 => waypoints[0],
            i if i == last => waypoints[waypoints.len() - 1],
            i => bezier_point(waypoints, i as f64 / last as f64),
        })
        .collect();
    Polyline::new(pts)
}

/// Distance along a ray to a segment, if hit. `dir` must be unit length.
pub fn ray_segment_distance(origin: Vec2, dir: Vec2, a: Vec2, b: Vec2) -> Option<f64> {
    let e = b - a;
    let denom = dir.cross(e);
    if denom.abs() < 1e-12 {
        return None;
    }
    let w = a - origin;
    let t = w.cross(e) / denom;
    let u = w.cross(dir) / denom;
    (t >= 0.0 && (0.0..=1.0).contains(&u)).then_some(t)
}

/// Proper or touching intersection of segments `p0p1` and `q0q1`.
pub fn segments_intersect(p0: Vec2, p1: Vec2, q0: Vec2, q1: Vec2) -> bool {
    let d1 = (q1 - q0).cross(p0 - q0);
    let d2 = (q1 - q0).cross(p1 - q0);
    let d3 = (p1 - p0).cross(q0 - p0);
    let d4 = (p1 - p0).cross(q1 - p0);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let on = |a: Vec2, b: Vec2, p: Vec2, d: f64| {
        d == 0.0
            && p.x >= a.x.min(b.x)
            && p.x <= a.x.max(b.x)
            && p.y >= a.y.min(b.y)
            && p.y <= a.y.max(b.y)
    };
    on(q0, q1, p0, d1) || on(q0, q1, p1, d2) || on(p0, p1, q0, d3) || on(p0, p1, q1, d4)
}
