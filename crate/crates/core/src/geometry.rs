//! Pinhole camera, rigid poses, the relative-dimension cuboid model and 2D boxes.
//!
//! Object frame convention: origin at the cuboid centroid, `y` is up. Cuboid
//! vertex `i` has sign bits `bit0 -> x`, `bit1 -> y`, `bit2 -> z` (bit set means
//! the positive half-extent).

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub type Point2 = nalgebra::Point2<f64>;
pub type Point3 = nalgebra::Point3<f64>;

/// Minimum camera-frame depth accepted by [`project`].
pub const DEPTH_EPS: f64 = 1e-9;

/// Number of cuboid vertices.
pub const NUM_VERTICES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self> {
        let k = Self { fx, fy, cx, cy, width, height };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy].iter().all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(invalid(format!("bad focal lengths ({}, {})", self.fx, self.fy)));
        }
        if !(0.0..self.width as f64).contains(&self.cx) || !(0.0..self.height as f64).contains(&self.cy)
        {
            return Err(invalid(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Image diagonal in pixels.
    pub fn diagonal(&self) -> f64 {
        (self.width as f64).hypot(self.height as f64)
    }

    /// Projects a camera-frame point.
    pub fn project_point(&self, p: &Vector3<f64>) -> Option<Point2> {
        if p.z <= DEPTH_EPS {
            return None;
        }
        Some(Point2::new(self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }

    /// Normalized image coordinates `K^-1 (u, v, 1)`.
    pub fn normalize(&self, p: &Point2) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }
}

/// Rigid transform from object frame to camera frame.
///
/// The rotation is kept sign-canonical (scalar part `>= 0`).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "PoseRepr", try_from = "PoseRepr")]
pub struct Pose {
    rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

#[derive(Serialize, Deserialize)]
struct PoseRepr {
    rotation_wxyz: [f64; 4],
    translation: [f64; 3],
}

impl From<Pose> for PoseRepr {
    fn from(p: Pose) -> Self {
        let q = p.rotation.quaternion();
        PoseRepr {
            rotation_wxyz: [q.w, q.i, q.j, q.k],
            translation: [p.translation.x, p.translation.y, p.translation.z],
        }
    }
}

impl TryFrom<PoseRepr> for Pose {
    type Error = Error;

    fn try_from(r: PoseRepr) -> Result<Self> {
        let [w, x, y, z] = r.rotation_wxyz;
        Pose::from_wxyz([w, x, y, z], Vector3::from(r.translation))
    }
}

fn canonical(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

impl Pose {
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation: canonical(rotation), translation }
    }

    pub fn identity() -> Self {
        Self::new(UnitQuaternion::identity(), Vector3::zeros())
    }

    /// Builds a pose from a `(w, x, y, z)` quaternion, normalizing it.
    pub fn from_wxyz(wxyz: [f64; 4], translation: Vector3<f64>) -> Result<Self> {
        let [w, x, y, z] = wxyz;
        let q = nalgebra::Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 || !translation.iter().all(|v| v.is_finite()) {
            return Err(invalid("pose must have a finite non-zero quaternion and finite translation"));
        }
        // Already-unit input is kept bit-exact so JSON round trips are lossless.
        let unit = if (n - 1.0).abs() <= 4.0 * f64::EPSILON {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        Ok(Self::new(unit, translation))
    }

    /// Builds a pose from a rotation matrix that is assumed orthonormal.
    pub fn from_matrix(r: &Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let rot = Rotation3::from_matrix_unchecked(*r);
        Self::new(UnitQuaternion::from_rotation_matrix(&rot), translation)
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn set_rotation(&mut self, q: UnitQuaternion<f64>) {
        self.rotation = canonical(q);
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn transform(&self, p: &Point3) -> Vector3<f64> {
        self.rotation * p.coords + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let inv = self.rotation.inverse();
        Pose::new(inv, -(inv * self.translation))
    }

    /// Same rotation, translation multiplied by `s`.
    pub fn with_scaled_translation(&self, s: f64) -> Pose {
        Pose { rotation: self.rotation, translation: self.translation * s }
    }

    /// Rotation about the object's own `y` axis, applied before this pose.
    pub fn rotated_about_object_y(&self, angle: f64) -> Pose {
        self.compose(&Pose::new(
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), angle),
            Vector3::zeros(),
        ))
    }
}

pub fn pose_compose(a: &Pose, b: &Pose) -> Pose {
    a.compose(b)
}

pub fn pose_invert(p: &Pose) -> Pose {
    p.inverse()
}

/// Geodesic angle between two rotations, in radians.
pub fn rotation_error(a: &Pose, b: &Pose) -> f64 {
    a.rotation().angle_to(b.rotation())
}

/// `|t_a - t_b| / |t_b|`.
pub fn relative_translation_error(pred: &Pose, truth: &Pose) -> f64 {
    (pred.translation - truth.translation).norm() / truth.translation.norm()
}

/// Cuboid extents normalized so that the `y` extent is one: `(x/y, 1, z/y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeDims {
    pub rx: f64,
    pub rz: f64,
}

impl RelativeDims {
    pub fn new(rx: f64, rz: f64) -> Result<Self> {
        let d = Self { rx, rz };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rx.is_finite() && self.rz.is_finite() && self.rx > 0.0 && self.rz > 0.0 {
            Ok(())
        } else {
            Err(invalid(format!("relative dims must be finite and positive, got ({}, {})", self.rx, self.rz)))
        }
    }

    pub fn unit() -> Self {
        Self { rx: 1.0, rz: 1.0 }
    }

    /// Extents along object `x`, `y`, `z`.
    pub fn extents(&self) -> Vector3<f64> {
        Vector3::new(self.rx, 1.0, self.rz)
    }

    /// Normalizes absolute extents by their `y` component.
    pub fn from_extents(e: &Vector3<f64>) -> Result<Self> {
        if !(e.y > 0.0) {
            return Err(invalid("y extent must be positive"));
        }
        Self::new(e.x / e.y, e.z / e.y)
    }
}

/// Relative-dimension cuboid with an optional metric height.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub dims: RelativeDims,
    pub height: Option<f64>,
}

impl Cuboid {
    /// Vertices in model units (`y` extent 1), or meters if the height is known.
    pub fn vertices(&self) -> Result<[Point3; NUM_VERTICES]> {
        let s = self.height.unwrap_or(1.0);
        let mut v = cuboid_vertices(&self.dims)?;
        for p in v.iter_mut() {
            *p = Point3::from(p.coords * s);
        }
        Ok(v)
    }
}

/// Sign (`-1` or `+1`) of vertex `i` along each axis.
pub fn vertex_signs(i: usize) -> [f64; 3] {
    let s = |bit: usize| if i >> bit & 1 == 1 { 1.0 } else { -1.0 };
    [s(0), s(1), s(2)]
}

/// Inverse of [`vertex_signs`] on a point.
pub fn vertex_index(p: &Point3) -> usize {
    (p.x > 0.0) as usize | ((p.y > 0.0) as usize) << 1 | ((p.z > 0.0) as usize) << 2
}

pub fn cuboid_vertices(dims: &RelativeDims) -> Result<[Point3; NUM_VERTICES]> {
    dims.validate()?;
    Ok(box_vertices(&dims.extents()))
}

/// Vertices of a centered box with the given full extents.
pub fn box_vertices(extents: &Vector3<f64>) -> [Point3; NUM_VERTICES] {
    std::array::from_fn(|i| {
        let s = vertex_signs(i);
        Point3::new(s[0] * extents.x / 2.0, s[1] * extents.y / 2.0, s[2] * extents.z / 2.0)
    })
}

pub fn project(points: &[Point3], pose: &Pose, k: &CameraIntrinsics) -> Result<Vec<Point2>> {
    points
        .iter()
        .enumerate()
        .map(|(index, p)| {
            let c = pose.transform(p);
            k.project_point(&c).ok_or(Error::BehindCamera { index, depth: c.z })
        })
        .collect()
}

/// Axis-aligned rectangle in pixel coordinates. Not clamped to the image.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub u_min: f64,
    pub v_min: f64,
    pub u_max: f64,
    pub v_max: f64,
}

impl Rect {
    pub fn width(&self) -> f64 {
        self.u_max - self.u_min
    }

    pub fn height(&self) -> f64 {
        self.v_max - self.v_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn diagonal(&self) -> f64 {
        self.width().hypot(self.height())
    }

    pub fn center(&self) -> Point2 {
        Point2::new((self.u_min + self.u_max) / 2.0, (self.v_min + self.v_max) / 2.0)
    }

    pub fn from_center_size(center: &Point2, w: f64, h: f64) -> Self {
        Rect {
            u_min: center.x - w / 2.0,
            v_min: center.y - h / 2.0,
            u_max: center.x + w / 2.0,
            v_max: center.y + h / 2.0,
        }
    }

    /// Grows every side by `margin`.
    pub fn expanded(&self, margin: f64) -> Self {
        Rect {
            u_min: self.u_min - margin,
            v_min: self.v_min - margin,
            u_max: self.u_max + margin,
            v_max: self.v_max + margin,
        }
    }

    pub fn contains(&self, p: &Point2) -> bool {
        p.x >= self.u_min && p.x <= self.u_max && p.y >= self.v_min && p.y <= self.v_max
    }
}

/// Projected cuboid vertices with per-point validity and confidence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoints2D {
    pub points: [Point2; NUM_VERTICES],
    pub valid: [bool; NUM_VERTICES],
    pub confidence: [f64; NUM_VERTICES],
}

impl Keypoints2D {
    /// All points valid with confidence 1.
    pub fn from_points(points: [Point2; NUM_VERTICES]) -> Self {
        Self { points, valid: [true; NUM_VERTICES], confidence: [1.0; NUM_VERTICES] }
    }

    pub fn invalid() -> Self {
        Self {
            points: [Point2::origin(); NUM_VERTICES],
            valid: [false; NUM_VERTICES],
            confidence: [0.0; NUM_VERTICES],
        }
    }

    pub fn num_valid(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn iter_valid(&self) -> impl Iterator<Item = (usize, &Point2)> {
        self.points.iter().enumerate().filter(|(i, _)| self.valid[*i])
    }
}

pub fn bbox2d_from_keypoints(kps: &Keypoints2D) -> Result<Rect> {
    bbox_of_points(kps.iter_valid().map(|(_, p)| p))
}

pub fn bbox_of_points<'a>(points: impl IntoIterator<Item = &'a Point2>) -> Result<Rect> {
    let mut it = points.into_iter();
    let first = it.next().ok_or(Error::EmptyDetection)?;
    let init = Rect { u_min: first.x, v_min: first.y, u_max: first.x, v_max: first.y };
    Ok(it.fold(init, |r, p| Rect {
        u_min: r.u_min.min(p.x),
        v_min: r.v_min.min(p.y),
        u_max: r.u_max.max(p.x),
        v_max: r.v_max.max(p.y),
    }))
}
