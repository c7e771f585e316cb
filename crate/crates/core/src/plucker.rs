//! Plücker line algebra.
//!
//! A line is stored as a unit direction `v` on the half-sphere plus its moment
//! `m = p × v`. Rigid motions act on the stacked `(m; v)` coordinates through
//! the 6×6 line motion matrix
//!
//! ```text
//! T = | R   [t]x R |
//!     | 0      R   |
//! ```

use nalgebra::{Matrix3, Matrix6, Rotation3, Unit, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Numeric tolerances shared by the geometry routines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Components with magnitude at or below this are skipped by the hemisphere rule.
    pub hemisphere: f64,
    /// Allowed `|v.m|` (after scaling `v` to unit length) for raw inputs.
    pub orthogonality: f64,
    /// Directions shorter than this are rejected.
    pub zero_direction: f64,
}

pub const HEMISPHERE_EPS: f64 = 1e-9;
pub const ORTHOGONALITY_TOL: f64 = 1e-6;
pub const ZERO_DIRECTION_EPS: f64 = 1e-12;
pub const SEGMENT_EPS: f64 = 1e-9;

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            hemisphere: HEMISPHERE_EPS,
            orthogonality: ORTHOGONALITY_TOL,
            zero_direction: ZERO_DIRECTION_EPS,
        }
    }
}

/// A canonical 3D line in Plücker coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PluckerLine {
    v: Vector3<f64>,
    m: Vector3<f64>,
}

impl PluckerLine {
    /// Canonicalizes raw `(v, m)` with default tolerances.
    pub fn new(v: Vector3<f64>, m: Vector3<f64>) -> Result<Self> {
        canonicalize(v, m)
    }

    pub fn direction(&self) -> Vector3<f64> {
        self.v
    }

    pub fn moment(&self) -> Vector3<f64> {
        self.m
    }

    /// Stacked `(m; v)`, the ordering the motion matrix acts on.
    pub fn to_mv(&self) -> Vector6<f64> {
        Vector6::new(self.m.x, self.m.y, self.m.z, self.v.x, self.v.y, self.v.z)
    }

    /// `[vx, vy, vz, mx, my, mz]`, the on-disk ordering.
    pub fn to_array(&self) -> [f64; 6] {
        [self.v.x, self.v.y, self.v.z, self.m.x, self.m.y, self.m.z]
    }

    pub fn from_array(a: [f64; 6]) -> Result<Self> {
        canonicalize(Vector3::new(a[0], a[1], a[2]), Vector3::new(a[3], a[4], a[5]))
    }

    /// Like [`from_array`](Self::from_array), but values that already satisfy the canonical
    /// invariants are kept bit-for-bit, so stored lines read back unchanged.
    pub fn from_stored(a: [f64; 6]) -> Result<Self> {
        let v = Vector3::new(a[0], a[1], a[2]);
        let m = Vector3::new(a[3], a[4], a[5]);
        let finite = a.iter().all(|x| x.is_finite());
        if finite
            && (v.norm() - 1.0).abs() <= 4.0 * f64::EPSILON
            && v.dot(&m).abs() <= 8.0 * f64::EPSILON * m.norm().max(1.0)
            && hemisphere_sign(&v, HEMISPHERE_EPS) > 0.0
        {
            return Ok(Self { v, m });
        }
        Self::from_array(a)
    }

    /// Distance from the origin to the line.
    pub fn origin_distance(&self) -> f64 {
        self.m.norm()
    }

    /// Footprint of the perpendicular dropped from the origin.
    pub fn footprint(&self) -> Vector3<f64> {
        self.v.cross(&self.m)
    }

    /// Skips the orthogonality check; `v` must be nonzero.
    pub(crate) fn canonical_unchecked(v: Vector3<f64>, m: Vector3<f64>) -> Self {
        let n = v.norm();
        let (mut v, mut m) = (v / n, m / n);
        m -= v * v.dot(&m);
        if hemisphere_sign(&v, HEMISPHERE_EPS) < 0.0 {
            v = -v;
            m = -m;
        }
        Self { v, m }
    }
}

fn hemisphere_sign(v: &Vector3<f64>, eps: f64) -> f64 {
    for c in v.iter() {
        if c.abs() > eps {
            return c.signum();
        }
    }
    1.0
}

pub fn canonicalize(v_raw: Vector3<f64>, m_raw: Vector3<f64>) -> Result<PluckerLine> {
    canonicalize_with(v_raw, m_raw, &Tolerances::default())
}

/// Normalizes the direction, fixes the sign on the half-sphere whose first
/// significant component is positive, and rescales the moment by the same
/// factor so the geometric line is unchanged.
pub fn canonicalize_with(
    v_raw: Vector3<f64>,
    m_raw: Vector3<f64>,
    tol: &Tolerances,
) -> Result<PluckerLine> {
    if !(v_raw.iter().chain(m_raw.iter()).all(|x| x.is_finite())) {
        return Err(Error::NonLineInput(f64::NAN));
    }
    let n = v_raw.norm();
    if n < tol.zero_direction {
        return Err(Error::ZeroDirection);
    }
    let v = v_raw / n;
    let m = m_raw / n;
    let dot = v.dot(&m);
    if dot.abs() > tol.orthogonality * m.norm().max(1.0) {
        return Err(Error::NonLineInput(dot));
    }
    // project out the residual so that v.m == 0 holds to rounding
    let mut m = m - v * dot;
    let mut v = v;
    if hemisphere_sign(&v, tol.hemisphere) < 0.0 {
        v = -v;
        m = -m;
    }
    Ok(PluckerLine { v, m })
}

pub fn from_endpoints(p: &Vector3<f64>, q: &Vector3<f64>) -> Result<PluckerLine> {
    let d = q - p;
    if d.norm() <= SEGMENT_EPS {
        return Err(Error::DegenerateSegment);
    }
    let v = d.normalize();
    Ok(PluckerLine::canonical_unchecked(v, p.cross(&v)))
}

pub fn from_point_direction(p: &Vector3<f64>, v: &Vector3<f64>) -> Result<PluckerLine> {
    let n = v.norm();
    if n < ZERO_DIRECTION_EPS {
        return Err(Error::ZeroDirection);
    }
    let v = v / n;
    Ok(PluckerLine::canonical_unchecked(v, p.cross(&v)))
}

/// Returns `(footprint, direction)`.
pub fn to_point_direction(l: &PluckerLine) -> (Vector3<f64>, Vector3<f64>) {
    (l.footprint(), l.v)
}

pub fn skew(t: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -t.z, t.y, t.z, 0.0, -t.x, -t.y, t.x, 0.0)
}

/// Rotation plus translation, acting on points as `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Self {
        let r = Rotation3::from_axis_angle(&Unit::new_normalize(*axis), angle);
        Self::new(*r.matrix(), translation)
    }

    /// `q = [w, x, y, z]`, need not be normalized.
    pub fn from_quaternion(q: [f64; 4], translation: Vector3<f64>) -> Self {
        let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
        Self::new(*uq.to_rotation_matrix().matrix(), translation)
    }

    /// Unit quaternion `[w, x, y, z]` with `w >= 0`.
    pub fn quaternion(&self) -> [f64; 4] {
        let rot = Rotation3::from_matrix_unchecked(self.rotation);
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let c = q.quaternion().coords; // [x, y, z, w]
        let s = if c[3] < 0.0 { -1.0 } else { 1.0 };
        [s * c[3], s * c[0], s * c[1], s * c[2]]
    }

    /// `self ∘ first`: apply `first`, then `self`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform::new(
            self.rotation * first.rotation,
            self.rotation * first.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform::new(rt, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// Checks `RᵀR = I` and `det R = 1` to within `tol`.
    pub fn is_valid(&self, tol: f64) -> bool {
        let rtr = self.rotation.transpose() * self.rotation;
        (rtr - Matrix3::identity()).amax() <= tol
            && (self.rotation.determinant() - 1.0).abs() <= tol
            && self.translation.iter().all(|x| x.is_finite())
    }

    pub fn rotation_angle_deg(&self) -> f64 {
        rotation_error(&Matrix3::identity(), &self.rotation)
    }
}

/// The 6×6 line motion matrix acting on `(m; v)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineMotionMatrix(pub Matrix6<f64>);

impl LineMotionMatrix {
    pub fn apply(&self, l: &PluckerLine) -> Vector6<f64> {
        self.0 * l.to_mv()
    }
}

pub fn motion_matrix(g: &RigidTransform) -> LineMotionMatrix {
    let r = g.rotation;
    let tr = skew(&g.translation) * r;
    let mut t = Matrix6::zeros();
    t.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
    t.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
    t.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
    LineMotionMatrix(t)
}

/// `v' = R v`, `m' = R m + t × R v`, re-canonicalized.
pub fn transform_line(g: &RigidTransform, l: &PluckerLine) -> PluckerLine {
    let rv = g.rotation * l.v;
    let m = g.rotation * l.m + g.translation.cross(&rv);
    PluckerLine::canonical_unchecked(rv, m)
}

/// Euclidean distance between the stacked 6-vectors of two canonical lines.
pub fn line_distance(a: &PluckerLine, b: &PluckerLine) -> f64 {
    ((a.m - b.m).norm_squared() + (a.v - b.v).norm_squared()).sqrt()
}

/// Line distance modulo the homogeneous sign: `min(|a - b|, |a + b|)`.
///
/// Equals [`line_distance`] away from the hemisphere boundary and stays
/// continuous across it, where the canonical sign of nearly identical lines
/// can disagree.
pub fn line_distance_unsigned(a: &PluckerLine, b: &PluckerLine) -> f64 {
    let minus = (a.m - b.m).norm_squared() + (a.v - b.v).norm_squared();
    let plus = (a.m + b.m).norm_squared() + (a.v + b.v).norm_squared();
    minus.min(plus).sqrt()
}

/// Angle of `R_gtᵀ R` in degrees, in `[0, 180]`.
///
/// Same value as `acos((tr - 1) / 2)`, evaluated through `atan2` so that
/// tiny angles are not lost to rounding near `acos(1)`.
pub fn rotation_error(r_gt: &Matrix3<f64>, r: &Matrix3<f64>) -> f64 {
    let q = r_gt.transpose() * r;
    let axial = Vector3::new(q[(2, 1)] - q[(1, 2)], q[(0, 2)] - q[(2, 0)], q[(1, 0)] - q[(0, 1)]);
    axial.norm().atan2(q.trace() - 1.0).to_degrees()
}

pub fn translation_error(t_gt: &Vector3<f64>, t: &Vector3<f64>) -> f64 {
    (t_gt - t).norm()
}
