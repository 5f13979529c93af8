//! Orbit cameras looking at the origin, and the four-view azimuth rig.
//!
//! World is y-up. Azimuth 0 places the camera on +x; azimuth 90 on +z.
//! Camera space is x right, y up, z forward (depth); pixel rows grow
//! downward and pixel `(i, j)` has its center at integer coordinates.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RESOLUTION: usize = 256;
pub const DEFAULT_FOV_Y: f64 = 50.0;
pub const DEFAULT_DISTANCE: f64 = 2.6;
pub const DEFAULT_BACKGROUND: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub azimuth: f64,
    pub elevation: f64,
    pub distance: f64,
    pub fov_y: f64,
    pub resolution: usize,
}

impl Camera {
    pub fn new(azimuth: f64, elevation: f64, distance: f64, fov_y: f64, resolution: usize) -> Result<Self> {
        let cam = Self {
            azimuth: azimuth.rem_euclid(360.0),
            elevation,
            distance,
            fov_y,
            resolution,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..360.0).contains(&self.azimuth)
            && self.elevation.abs() < 90.0
            && self.distance > 0.0
            && self.fov_y > 0.0
            && self.fov_y < 180.0
            && self.resolution > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("invalid camera {self:?}")))
        }
    }

    pub fn position(&self) -> Vector3<f64> {
        let (a, e) = (self.azimuth.to_radians(), self.elevation.to_radians());
        self.distance * Vector3::new(e.cos() * a.cos(), e.sin(), e.cos() * a.sin())
    }

    /// World-to-camera rotation; rows are the camera right, up and forward axes.
    pub fn rotation(&self) -> Matrix3<f64> {
        let forward = -self.position().normalize();
        let right = forward.cross(&Vector3::y()).normalize();
        let up = right.cross(&forward);
        Matrix3::from_rows(&[right.transpose(), up.transpose(), forward.transpose()])
    }

    /// Focal length in pixels (square pixels).
    pub fn focal(&self) -> f64 {
        0.5 * self.resolution as f64 / (0.5 * self.fov_y.to_radians()).tan()
    }

    pub fn principal_point(&self) -> f64 {
        0.5 * self.resolution as f64
    }

    pub fn to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * (p - self.position())
    }

    /// Pixel coordinates `(u, v)` and camera depth of a world point. `None`
    /// when the point is not in front of the camera.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let t = self.to_camera(p);
        if t.z <= 1e-9 {
            return None;
        }
        let (f, c) = (self.focal(), self.principal_point());
        Some((c + f * t.x / t.z, c - f * t.y / t.z, t.z))
    }

    /// Inverse of [`Camera::project`].
    pub fn unproject(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        let (f, c) = (self.focal(), self.principal_point());
        let t = Vector3::new((u - c) * depth / f, -(v - c) * depth / f, depth);
        self.rotation().transpose() * t + self.position()
    }

    /// World-space width of one pixel at the given depth.
    pub fn pixel_footprint(&self, depth: f64) -> f64 {
        depth / self.focal()
    }
}

/// Four cameras at azimuths 0/90/180/270 (optionally phase-shifted), shared
/// elevation, distance and intrinsics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RigConfig {
    pub azimuths: [f64; 4],
    pub elevation: f64,
    pub distance: f64,
    pub fov_y: f64,
    pub resolution: usize,
    pub background: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            azimuths: [0.0, 90.0, 180.0, 270.0],
            elevation: 0.0,
            distance: DEFAULT_DISTANCE,
            fov_y: DEFAULT_FOV_Y,
            resolution: DEFAULT_RESOLUTION,
            background: DEFAULT_BACKGROUND,
        }
    }
}

impl RigConfig {
    pub fn with_resolution(mut self, resolution: usize) -> Self {
        self.resolution = resolution;
        self
    }

    /// The same rig rotated by `phase` degrees of azimuth.
    pub fn with_phase(mut self, phase: f64) -> Self {
        for (k, a) in self.azimuths.iter_mut().enumerate() {
            *a = (phase + 90.0 * k as f64).rem_euclid(360.0);
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        for k in 0..4 {
            let gap = (self.azimuths[(k + 1) % 4] - self.azimuths[k]).rem_euclid(360.0);
            if (gap - 90.0).abs() > 1e-9 {
                return Err(Error::Validation(format!("rig azimuths {:?} are not 90 degrees apart", self.azimuths)));
            }
        }
        if !(0.0..=1.0).contains(&self.background) {
            return Err(Error::Validation(format!("background {} outside [0,1]", self.background)));
        }
        self.camera(0).map(|_| ())
    }

    pub fn camera(&self, view: usize) -> Result<Camera> {
        Camera::new(self.azimuths[view], self.elevation, self.distance, self.fov_y, self.resolution)
    }

    pub fn cameras(&self) -> Result<[Camera; 4]> {
        Ok([self.camera(0)?, self.camera(1)?, self.camera(2)?, self.camera(3)?])
    }
}
