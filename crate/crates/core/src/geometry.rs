//! Camera model, BEV grid, SE(2) pose algebra, and the ground-plane
//! projection that produces bird's-eye-view feature maps.
//!
//! Conventions fixed here and relied on everywhere else:
//!
//! - Points are `(x, y)` with `x` along columns and `y` along rows, in
//!   pixel-center coordinates.
//! - An [`Se2Pose`] maps BEV pixels to satellite pixels as
//!   `p_hat = R(theta) * p + t`, with `R = [[cos, -sin], [sin, cos]]`.
//! - The BEV frame puts the camera at the grid `anchor`; the camera's
//!   forward axis points toward decreasing row index, so heading at
//!   `theta = 0` is the unit vector `(0, -1)`.
//! - The BEV grid and the satellite map share one meters-per-pixel scale,
//!   which keeps the BEV-to-satellite transform rigid.
//! - The world frame used by camera extrinsics is camera-centered with
//!   `x` to the right (increasing BEV column), `y` forward (decreasing
//!   BEV row), and `z` up; the ground plane sits at `z = height_m`.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::tensor::{bilinear_sample, CoordGrid, FeatureMap};
use crate::{Error, Result};

/// Normalizes an angle to `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut a = angle.rem_euclid(two_pi);
    if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}

/// Planar rigid transform: rotation `theta` (radians, normalized to
/// `(-pi, pi]`) plus translation in satellite pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Se2Pose {
    pub theta: f64,
    pub t: [f64; 2],
}

impl Se2Pose {
    pub fn new(theta: f64, tu: f64, tv: f64) -> Self {
        Se2Pose {
            theta: wrap_angle(theta),
            t: [tu, tv],
        }
    }

    pub fn identity() -> Self {
        Se2Pose {
            theta: 0.0,
            t: [0.0, 0.0],
        }
    }

    /// Rotation matrix rows `[[cos, -sin], [sin, cos]]`.
    pub fn rotation(&self) -> [[f64; 2]; 2] {
        let (s, c) = self.theta.sin_cos();
        [[c, -s], [s, c]]
    }

    /// Applies `R p + t` to one point.
    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [
            c * p[0] - s * p[1] + self.t[0],
            s * p[0] + c * p[1] + self.t[1],
        ]
    }

    /// Applies the pose to every point.
    pub fn apply_all(&self, points: &[[f64; 2]]) -> Vec<[f64; 2]> {
        points.iter().map(|&p| self.apply(p)).collect()
    }

    /// Inverse transform: `p = R^T (p_hat - t)`.
    pub fn inverse(&self) -> Se2Pose {
        let (s, c) = self.theta.sin_cos();
        Se2Pose {
            theta: wrap_angle(-self.theta),
            t: [-(c * self.t[0] + s * self.t[1]), -(-s * self.t[0] + c * self.t[1])],
        }
    }

    /// Composition `self ∘ other`: apply `other` first, then `self`.
    pub fn compose(&self, other: &Se2Pose) -> Se2Pose {
        let t = self.apply(other.t);
        Se2Pose {
            theta: wrap_angle(self.theta + other.theta),
            t,
        }
    }

    /// Unit heading vector of the camera under this pose
    /// (forward axis `(0, -1)` rotated by `theta`).
    pub fn heading(&self) -> [f64; 2] {
        let (s, c) = self.theta.sin_cos();
        [s, -c]
    }
}

/// Pinhole camera with extrinsics mapping world points (camera-centered
/// ground frame) into the camera frame.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub image_h: usize,
    pub image_w: usize,
    /// Row-major 3×3 rotation, world → camera.
    pub rotation: [f64; 9],
    /// Translation, world → camera.
    pub translation: [f64; 3],
}

impl CameraModel {
    /// Checks focal lengths and that the rotation is orthonormal with
    /// determinant +1 (to 1e-9).
    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0) || !(self.fy > 0.0) {
            return Err(Error::Invalid(format!(
                "focal lengths must be positive, got fx={}, fy={}",
                self.fx, self.fy
            )));
        }
        if self.image_h < 1 || self.image_w < 1 {
            return Err(Error::Invalid("image size must be at least 1x1".into()));
        }
        let r = &self.rotation;
        // R R^T == I and det == +1.
        let mut max_dev = 0.0f64;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[3 * i + k] * r[3 * j + k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                max_dev = max_dev.max((dot - want).abs());
            }
        }
        let det = r[0] * (r[4] * r[8] - r[5] * r[7]) - r[1] * (r[3] * r[8] - r[5] * r[6])
            + r[2] * (r[3] * r[7] - r[4] * r[6]);
        if max_dev > 1e-9 || (det - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!(
                "extrinsic rotation is not orthonormal with det +1 (deviation {max_dev:.3e}, det {det:.12})"
            )));
        }
        Ok(())
    }

    /// World point → camera frame.
    fn to_camera(&self, w: [f64; 3]) -> [f64; 3] {
        let r = &self.rotation;
        [
            r[0] * w[0] + r[1] * w[1] + r[2] * w[2] + self.translation[0],
            r[3] * w[0] + r[4] * w[1] + r[5] * w[2] + self.translation[1],
            r[6] * w[0] + r[7] * w[1] + r[8] * w[2] + self.translation[2],
        ]
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let json = CameraJson::from(self);
        std::fs::write(path, serde_json::to_string_pretty(&json).unwrap())?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let json: CameraJson = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            reason: e.to_string(),
        })?;
        Ok(json.into())
    }
}

#[derive(Serialize, Deserialize)]
struct CameraJson {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    image_h: usize,
    image_w: usize,
    #[serde(rename = "R")]
    r: [f64; 9],
    t: [f64; 3],
}

impl From<&CameraModel> for CameraJson {
    fn from(c: &CameraModel) -> Self {
        CameraJson {
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            image_h: c.image_h,
            image_w: c.image_w,
            r: c.rotation,
            t: c.translation,
        }
    }
}

impl From<CameraJson> for CameraModel {
    fn from(j: CameraJson) -> Self {
        CameraModel {
            fx: j.fx,
            fy: j.fy,
            cx: j.cx,
            cy: j.cy,
            image_h: j.image_h,
            image_w: j.image_w,
            rotation: j.r,
            translation: j.t,
        }
    }
}

/// Square BEV grid: `size` × `size` cells at `meters_per_pixel`, ground
/// plane height, and the cell where the camera sits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BevGrid {
    pub size: usize,
    pub meters_per_pixel: f64,
    pub height_m: f64,
    /// (x, y) BEV pixel of the camera.
    pub anchor: [f64; 2],
}

impl BevGrid {
    pub fn validate(&self) -> Result<()> {
        if self.size < 1 {
            return Err(Error::Invalid("grid size must be >= 1".into()));
        }
        if !(self.meters_per_pixel > 0.0) {
            return Err(Error::Invalid(format!(
                "meters_per_pixel must be positive, got {}",
                self.meters_per_pixel
            )));
        }
        let max = (self.size - 1) as f64;
        if !(self.anchor[0] >= 0.0
            && self.anchor[0] <= max
            && self.anchor[1] >= 0.0
            && self.anchor[1] <= max)
        {
            return Err(Error::Invalid(format!(
                "anchor {:?} lies outside the {}x{} grid",
                self.anchor, self.size, self.size
            )));
        }
        Ok(())
    }

    /// World point (camera-centered ground frame) of BEV cell (row, col).
    pub fn cell_world(&self, row: f64, col: f64) -> [f64; 3] {
        [
            (col - self.anchor[0]) * self.meters_per_pixel,
            (self.anchor[1] - row) * self.meters_per_pixel,
            self.height_m,
        ]
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self).unwrap())?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let grid: BevGrid = serde_json::from_str(&text).map_err(|e| Error::Parse {
            line: e.line(),
            reason: e.to_string(),
        })?;
        grid.validate()?;
        Ok(grid)
    }
}

/// Ground-resolution presets for the supported satellite sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetPreset {
    Kitti,
    FordAv,
    VigorNewYork,
    VigorSanFrancisco,
    VigorChicago,
    VigorSeattle,
    OxfordRobotCar,
}

impl DatasetPreset {
    /// Satellite ground resolution in meters per pixel.
    pub fn meters_per_pixel(&self) -> f64 {
        match self {
            DatasetPreset::Kitti | DatasetPreset::FordAv => 0.2,
            DatasetPreset::VigorNewYork => 0.113,
            DatasetPreset::VigorSanFrancisco => 0.118,
            DatasetPreset::VigorChicago => 0.111,
            DatasetPreset::VigorSeattle => 0.101,
            DatasetPreset::OxfordRobotCar => 0.0924,
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "kitti" => Some(DatasetPreset::Kitti),
            "ford" => Some(DatasetPreset::FordAv),
            "vigor-newyork" => Some(DatasetPreset::VigorNewYork),
            "vigor-sanfrancisco" => Some(DatasetPreset::VigorSanFrancisco),
            "vigor-chicago" => Some(DatasetPreset::VigorChicago),
            "vigor-seattle" => Some(DatasetPreset::VigorSeattle),
            "oxford" => Some(DatasetPreset::OxfordRobotCar),
            _ => None,
        }
    }
}

/// Guard below which a homogeneous coordinate counts as at infinity.
const HOMOGENEOUS_EPS: f64 = 1e-12;

/// For every BEV cell, the ground-image pixel it projects from, plus a
/// per-cell visibility flag.
///
/// A cell is visible when its ground-plane world point projects with
/// positive depth into the image rectangle `[0, W-1] x [0, H-1]`.
pub fn ground_to_bev_lookup(camera: &CameraModel, grid: &BevGrid) -> Result<(CoordGrid, Vec<u8>)> {
    camera.validate()?;
    grid.validate()?;
    let n = grid.size;
    let mut coords = vec![[f64::NAN, f64::NAN]; n * n];
    let mut visibility = vec![0u8; n * n];
    for row in 0..n {
        for col in 0..n {
            let world = grid.cell_world(row as f64, col as f64);
            let cam = camera.to_camera(world);
            let depth = cam[2];
            if !(depth > 0.0) || depth.abs() < HOMOGENEOUS_EPS {
                continue;
            }
            let u = camera.fx * (cam[0] / depth) + camera.cx;
            let v = camera.fy * (cam[1] / depth) + camera.cy;
            let i = row * n + col;
            coords[i] = [u, v];
            let in_image = u >= 0.0
                && v >= 0.0
                && u <= (camera.image_w - 1) as f64
                && v <= (camera.image_h - 1) as f64;
            if in_image {
                visibility[i] = 1;
            }
        }
    }
    Ok((CoordGrid::from_vec(n, n, coords)?, visibility))
}

/// Projects a ground-view feature map onto the BEV grid.
///
/// `f_g` lives at `1/stride` of the camera image resolution; image-pixel
/// lookup coordinates are divided by `stride` before bilinear sampling.
/// Output visibility is the AND of projection visibility and sampling
/// validity; invisible cells hold zero.
pub fn project_ground_features(
    f_g: &FeatureMap,
    camera: &CameraModel,
    grid: &BevGrid,
    stride: usize,
) -> Result<(FeatureMap, Vec<u8>)> {
    if stride < 1 {
        return Err(Error::Shape("feature stride must be >= 1".into()));
    }
    if f_g.height() * stride != camera.image_h || f_g.width() * stride != camera.image_w {
        return Err(Error::Shape(format!(
            "feature map {}x{} at stride {stride} does not cover image {}x{}",
            f_g.height(),
            f_g.width(),
            camera.image_h,
            camera.image_w
        )));
    }
    let (image_coords, proj_vis) = ground_to_bev_lookup(camera, grid)?;
    let inv = 1.0 / stride as f64;
    let feat_coords: Vec<[f64; 2]> = image_coords
        .coords()
        .iter()
        .map(|&[x, y]| [x * inv, y * inv])
        .collect();
    let feat_grid = CoordGrid::from_vec(grid.size, grid.size, feat_coords)?;
    let (sampled, sample_valid) = bilinear_sample(f_g, &feat_grid);

    let mut visibility = vec![0u8; proj_vis.len()];
    let mut out = sampled;
    for i in 0..visibility.len() {
        visibility[i] = proj_vis[i] & sample_valid[i];
        if visibility[i] == 0 {
            let (r, c) = (i / grid.size, i % grid.size);
            for ch in 0..out.channels() {
                out.set(r, c, ch, 0.0);
            }
        }
    }
    Ok((out, visibility))
}
