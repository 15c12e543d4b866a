use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use super::GeomError;

pub type Point3 = Vector3<f64>;

/// A set of world-frame points, in meters.
///
/// `colors` and `scan_indices` are either absent or exactly as long as `points`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub colors: Option<Vec<[u8; 3]>>,
    pub scan_indices: Option<Vec<u32>>,
}

impl PointCloud {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_points(points: Vec<Point3>) -> Self {
        Self {
            points,
            colors: None,
            scan_indices: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.points
            .iter()
            .all(|p| p.x.is_finite() && p.y.is_finite() && p.z.is_finite())
    }

    /// Arithmetic mean of all points, `None` when empty.
    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Point3::zeros(), |acc, p| acc + p);
        Some(sum / self.points.len() as f64)
    }

    pub fn aabb(&self) -> Option<Aabb3> {
        Aabb3::from_points(&self.points)
    }

    /// Keeps the points whose index is in `keep` (ascending order required).
    pub fn select(&self, keep: &[usize]) -> PointCloud {
        PointCloud {
            points: keep.iter().map(|&i| self.points[i]).collect(),
            colors: self
                .colors
                .as_ref()
                .map(|c| keep.iter().map(|&i| c[i]).collect()),
            scan_indices: self
                .scan_indices
                .as_ref()
                .map(|s| keep.iter().map(|&i| s[i]).collect()),
        }
    }

    /// Appends `other`. Optional channels survive only if both clouds carry them.
    pub fn extend(&mut self, other: &PointCloud) {
        let was_empty = self.points.is_empty();
        self.colors = match (self.colors.take(), other.colors.as_ref()) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            (None, Some(b)) if was_empty => Some(b.clone()),
            _ => None,
        };
        self.scan_indices = match (self.scan_indices.take(), other.scan_indices.as_ref()) {
            (Some(mut a), Some(b)) => {
                a.extend_from_slice(b);
                Some(a)
            }
            (None, Some(b)) if was_empty => Some(b.clone()),
            _ => None,
        };
        self.points.extend_from_slice(&other.points);
    }
}

/// Camera-to-world rigid transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

const POSE_TOL: f64 = 1e-9;

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeomError> {
        let pose = Self {
            rotation,
            translation,
        };
        pose.validate()?;
        Ok(pose)
    }

    /// Builds a pose from a row-major 4x4 camera-to-world matrix.
    pub fn from_row_major(m: &[f64; 16]) -> Result<Self, GeomError> {
        let rotation = Matrix3::new(m[0], m[1], m[2], m[4], m[5], m[6], m[8], m[9], m[10]);
        let translation = Vector3::new(m[3], m[7], m[11]);
        Self::new(rotation, translation)
    }

    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Camera looking from `eye` toward `target`, with world `up` mapped to image-up.
    ///
    /// Camera axes follow the usual optical convention: x right, y down, z forward.
    pub fn look_at(eye: Point3, target: Point3, up: Vector3<f64>) -> Result<Self, GeomError> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or(GeomError::InvalidParameter("look_at: eye equals target"))?;
        let right = forward
            .cross(&up)
            .try_normalize(1e-12)
            .ok_or(GeomError::InvalidParameter(
                "look_at: up parallel to view direction",
            ))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_columns(&[right, down, forward]);
        Self::new(rotation, eye)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let r = &self.rotation;
        let finite = r
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(GeomError::InvalidPose("non-finite entries".into()));
        }
        let det = r.determinant();
        if (det - 1.0).abs() > POSE_TOL {
            return Err(GeomError::InvalidPose(format!("det(R) = {det}")));
        }
        let err = (r.transpose() * r - Matrix3::identity()).abs().max();
        if err > POSE_TOL {
            return Err(GeomError::InvalidPose(format!("|RᵀR - I| = {err:e}")));
        }
        Ok(())
    }

    pub fn camera_to_world(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    pub fn world_to_camera(&self, p: &Point3) -> Point3 {
        self.rotation.transpose() * (p - self.translation)
    }
}

/// Pinhole intrinsics. Pixel `(i, j)` covers `[i, i+1) × [j, j+1)`, so its
/// center sits at `(i + 0.5, j + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeomError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// Intrinsics with the principal point at the image center and the given
    /// horizontal field of view (radians).
    pub fn from_hfov(width: u32, height: u32, hfov: f64) -> Result<Self, GeomError> {
        let f = width as f64 / 2.0 / (hfov / 2.0).tan();
        Self::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
    }

    pub fn validate(&self) -> Result<(), GeomError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx > 0.0
            && self.cx < self.width as f64
            && self.cy > 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeomError::InvalidIntrinsics(*self))
        }
    }

    pub fn image_area(&self) -> f64 {
        self.width as f64 * self.height as f64
    }
}

/// Axis-aligned image rectangle in continuous pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox2D {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox2D {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    /// Tight box around whole pixels `[x0, x1] × [y0, y1]` (inclusive indices).
    pub fn from_pixel_span(x0: u32, y0: u32, x1: u32, y1: u32) -> Self {
        Self::new(x0 as f64, y0 as f64, x1 as f64 + 1.0, y1 as f64 + 1.0)
    }

    pub fn width(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y_max - self.y_min).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn is_valid(&self) -> bool {
        self.x_min <= self.x_max && self.y_min <= self.y_max
    }

    pub fn intersection(&self, other: &BBox2D) -> Option<BBox2D> {
        let b = BBox2D::new(
            self.x_min.max(other.x_min),
            self.y_min.max(other.y_min),
            self.x_max.min(other.x_max),
            self.y_max.min(other.y_max),
        );
        (b.x_min < b.x_max && b.y_min < b.y_max).then_some(b)
    }

    pub fn intersection_area(&self, other: &BBox2D) -> f64 {
        self.intersection(other).map_or(0.0, |b| b.area())
    }

    pub fn translate(&self, dx: f64, dy: f64) -> BBox2D {
        BBox2D::new(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb3 {
    pub min: Point3,
    pub max: Point3,
}

impl Aabb3 {
    pub fn new(min: Point3, max: Point3) -> Self {
        Self { min, max }
    }

    pub fn from_points(points: &[Point3]) -> Option<Self> {
        let first = points.first()?;
        let mut b = Self::new(*first, *first);
        for p in &points[1..] {
            b.min = b.min.inf(p);
            b.max = b.max.sup(p);
        }
        Some(b)
    }

    pub fn center(&self) -> Point3 {
        (self.min + self.max) / 2.0
    }

    pub fn extents(&self) -> Vector3<f64> {
        self.max - self.min
    }

    pub fn inflate(&self, margin: f64) -> Aabb3 {
        let m = Vector3::repeat(margin);
        Aabb3::new(self.min - m, self.max + m)
    }

    pub fn contains_point(&self, p: &Point3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn contains(&self, other: &Aabb3) -> bool {
        (0..3).all(|i| other.min[i] >= self.min[i] && other.max[i] <= self.max[i])
    }

    pub fn intersects(&self, other: &Aabb3) -> bool {
        (0..3).all(|i| self.min[i] <= other.max[i] && other.min[i] <= self.max[i])
    }

    pub fn union(&self, other: &Aabb3) -> Aabb3 {
        Aabb3::new(self.min.inf(&other.min), self.max.sup(&other.max))
    }

    /// Euclidean separation between the boxes, zero when they touch or overlap.
    pub fn distance(&self, other: &Aabb3) -> f64 {
        let mut sq = 0.0;
        for i in 0..3 {
            let gap = (other.min[i] - self.max[i])
                .max(self.min[i] - other.max[i])
                .max(0.0);
            sq += gap * gap;
        }
        sq.sqrt()
    }
}
