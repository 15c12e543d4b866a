use std::path::PathBuf;

use super::types::{Intrinsics, Point3, PointCloud, Pose};
use super::GeomError;

/// 16-bit depth image in millimeters, row-major, 0 = no measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: u32,
    pub height: u32,
    pub data: Vec<u16>,
}

impl DepthMap {
    pub fn new(width: u32, height: u32, data: Vec<u16>) -> Result<Self, GeomError> {
        if data.len() != width as usize * height as usize {
            return Err(GeomError::InvalidParameter("depth buffer size mismatch"));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0; width as usize * height as usize],
        }
    }

    pub fn get(&self, x: u32, y: u32) -> u16 {
        self.data[y as usize * self.width as usize + x as usize]
    }

    /// Depth in meters, `None` for invalid pixels.
    pub fn meters(&self, x: u32, y: u32) -> Option<f64> {
        match self.get(x, y) {
            0 => None,
            mm => Some(mm as f64 / 1000.0),
        }
    }
}

/// A registered RGB-D observation.
#[derive(Debug, Clone)]
pub struct Frame {
    pub index: usize,
    pub rgb_path: Option<PathBuf>,
    pub depth: DepthMap,
    pub pose: Pose,
    pub intrinsics: Intrinsics,
}

/// Set of pixels of one image, stored as sorted, unique row-major offsets.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct PixelMask {
    pub width: u32,
    pub height: u32,
    offsets: Vec<u32>,
}

impl PixelMask {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            offsets: Vec::new(),
        }
    }

    pub fn from_offsets(width: u32, height: u32, mut offsets: Vec<u32>) -> Result<Self, GeomError> {
        offsets.sort_unstable();
        offsets.dedup();
        if let Some(&last) = offsets.last() {
            if last as u64 >= width as u64 * height as u64 {
                return Err(GeomError::InvalidParameter("mask pixel outside image"));
            }
        }
        Ok(Self {
            width,
            height,
            offsets,
        })
    }

    pub fn from_pixels(
        width: u32,
        height: u32,
        pixels: impl IntoIterator<Item = (u32, u32)>,
    ) -> Result<Self, GeomError> {
        let mut offsets = Vec::new();
        for (x, y) in pixels {
            if x >= width || y >= height {
                return Err(GeomError::InvalidParameter("mask pixel outside image"));
            }
            offsets.push(y * width + x);
        }
        Self::from_offsets(width, height, offsets)
    }

    pub fn len(&self) -> usize {
        self.offsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.offsets.is_empty()
    }

    pub fn offsets(&self) -> &[u32] {
        &self.offsets
    }

    pub fn pixels(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        let w = self.width;
        self.offsets.iter().map(move |&o| (o % w, o / w))
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        x < self.width
            && y < self.height
            && self.offsets.binary_search(&(y * self.width + x)).is_ok()
    }

    /// Tight pixel-edge bounding box, `None` for empty masks.
    pub fn bbox(&self) -> Option<super::BBox2D> {
        let mut it = self.pixels();
        let (x, y) = it.next()?;
        let (mut x0, mut y0, mut x1, mut y1) = (x, y, x, y);
        for (x, y) in it {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(y);
            y1 = y1.max(y);
        }
        Some(super::BBox2D::from_pixel_span(x0, y0, x1, y1))
    }

    /// Row-major run lengths, starting with a (possibly zero) run of unset pixels.
    pub fn to_rle(&self) -> Vec<u32> {
        let total = self.width as u64 * self.height as u64;
        let mut counts = Vec::new();
        let mut cursor: u64 = 0;
        let mut i = 0;
        while i < self.offsets.len() {
            let start = self.offsets[i] as u64;
            let mut end = start + 1;
            i += 1;
            while i < self.offsets.len() && self.offsets[i] as u64 == end {
                end += 1;
                i += 1;
            }
            counts.push((start - cursor) as u32);
            counts.push((end - start) as u32);
            cursor = end;
        }
        if cursor < total || counts.is_empty() {
            counts.push((total - cursor) as u32);
        }
        counts
    }

    pub fn from_rle(width: u32, height: u32, counts: &[u32]) -> Result<Self, GeomError> {
        let total = width as u64 * height as u64;
        let mut offsets = Vec::new();
        let mut cursor: u64 = 0;
        for (k, &run) in counts.iter().enumerate() {
            if k % 2 == 1 {
                offsets.extend((cursor..cursor + run as u64).map(|o| o as u32));
            }
            cursor += run as u64;
        }
        if cursor != total {
            return Err(GeomError::InvalidParameter(
                "RLE counts do not cover the image",
            ));
        }
        Ok(Self {
            width,
            height,
            offsets,
        })
    }
}

/// Where a projected point landed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visibility {
    InImage,
    OutOfFrustum,
    OutOfImage,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
    pub visibility: Visibility,
}

impl Projection {
    /// Pixel containing `(u, v)`; only meaningful for in-image projections.
    pub fn pixel(&self) -> (u32, u32) {
        (self.u.floor() as u32, self.v.floor() as u32)
    }
}

/// Maps world points to pixel coordinates and camera-frame depth.
pub fn project_points(
    intrinsics: &Intrinsics,
    pose: &Pose,
    points: &PointCloud,
) -> Result<Vec<Projection>, GeomError> {
    pose.validate()?;
    let rt = pose.rotation.transpose();
    let (w, h) = (intrinsics.width as f64, intrinsics.height as f64);
    Ok(points
        .points
        .iter()
        .map(|p| {
            let c = rt * (p - pose.translation);
            let z = c.z;
            if z <= 0.0 {
                return Projection {
                    u: f64::NAN,
                    v: f64::NAN,
                    z,
                    visibility: Visibility::OutOfFrustum,
                };
            }
            let u = intrinsics.fx * c.x / z + intrinsics.cx;
            let v = intrinsics.fy * c.y / z + intrinsics.cy;
            let inside = u >= 0.0 && u < w && v >= 0.0 && v < h;
            Projection {
                u,
                v,
                z,
                visibility: if inside {
                    Visibility::InImage
                } else {
                    Visibility::OutOfImage
                },
            }
        })
        .collect())
}

/// Camera-frame ray point for the center of pixel `(x, y)` at depth `z`.
pub fn unproject_pixel(intrinsics: &Intrinsics, x: u32, y: u32, z: f64) -> Point3 {
    let u = x as f64 + 0.5;
    let v = y as f64 + 0.5;
    Point3::new(
        (u - intrinsics.cx) * z / intrinsics.fx,
        (v - intrinsics.cy) * z / intrinsics.fy,
        z,
    )
}

/// Lifts masked pixels with valid depth into world coordinates.
pub fn back_project(frame: &Frame, mask: &PixelMask) -> PointCloud {
    let mut points = Vec::with_capacity(mask.len());
    for (x, y) in mask.pixels() {
        if x >= frame.depth.width || y >= frame.depth.height {
            continue;
        }
        if let Some(z) = frame.depth.meters(x, y) {
            let c = unproject_pixel(&frame.intrinsics, x, y, z);
            points.push(frame.pose.camera_to_world(&c));
        }
    }
    PointCloud::from_points(points)
}
