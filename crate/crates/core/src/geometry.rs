//! Cone-beam projection geometry and the pose representations built on it.
//!
//! Image coordinates are continuous pixels: the center of pixel `(0, 0)` is
//! at `(0.0, 0.0)`, `u` grows along `detector_u` and `v` along `detector_v`
//! (raster convention, `+v` points down in the displayed image). Forward
//! angles are measured from image `+u` toward image `+v`, so they are
//! clockwise-positive on screen.

use nalgebra::{Isometry3, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type RigidTransform = Isometry3<f64>;

/// Offset used to trace the instrument axis onto the detector.
pub const AXIS_TRACE_MM: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Pixel { u, v }
    }

    pub fn dist(self, other: Pixel) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

/// Wraps an angle in degrees to `(-180, 180]`.
pub fn wrap_deg(a: f64) -> f64 {
    let mut r = a % 360.0;
    if r <= -180.0 {
        r += 360.0;
    } else if r > 180.0 {
        r -= 360.0;
    }
    r
}

/// Wraps an angle in degrees to `[-180, 180)`.
fn wrap_roll(a: f64) -> f64 {
    let r = wrap_deg(a);
    if r == 180.0 {
        -180.0
    } else {
        r
    }
}

/// 5-DOF instrument pose: screw-head position and unit axis (head toward tip).
/// `roll` is carried for display only and never enters a metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldPose {
    pub origin: Vec3,
    pub axis: Vec3,
    #[serde(default)]
    pub roll: f64,
}

impl WorldPose {
    /// Normalizes `axis` and wraps `roll`.
    pub fn new(origin: Vec3, axis: Vec3, roll: f64) -> Result<Self> {
        let n = axis.norm();
        if !(n.is_finite() && n > 1e-12) || !origin.iter().all(|c| c.is_finite()) {
            return Err(Error::Format("pose must be finite with a non-zero axis".into()));
        }
        Ok(WorldPose {
            origin,
            axis: axis / n,
            roll: wrap_roll(roll),
        })
    }

    pub fn is_valid(&self) -> bool {
        self.origin.iter().all(|c| c.is_finite())
            && (self.axis.norm() - 1.0).abs() < 1e-9
            && (-180.0..180.0).contains(&self.roll)
    }

    /// Rigid transform from the screw's local frame (axis = local +x) to world.
    /// Roll rotates the local frame about the axis.
    pub fn local_to_world(&self) -> RigidTransform {
        let x = self.axis;
        let helper = if x.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
        let y0 = x.cross(&helper).normalize();
        let z0 = x.cross(&y0);
        let (s, c) = self.roll.to_radians().sin_cos();
        let y = y0 * c + z0 * s;
        let z = x.cross(&y);
        let rot = Mat3::from_columns(&[x, y, z]);
        let rot = nalgebra::Rotation3::from_matrix_unchecked(rot);
        Isometry3::from_parts(self.origin.into(), rot.into())
    }
}

/// Cone-beam camera: point source plus a flat detector with square pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionGeometry {
    pub source: Vec3,
    /// World position of the center of pixel (0, 0).
    pub detector_origin: Vec3,
    pub detector_u: Vec3,
    pub detector_v: Vec3,
    /// Millimeters per pixel on the detector.
    pub pixel_spacing: f64,
    pub image_width: usize,
    pub image_height: usize,
}

/// Parameters of a C-arm view rotating about the world `z` axis through the
/// isocenter at the world origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CArm {
    pub angle_deg: f64,
    pub source_to_detector: f64,
    pub source_to_isocenter: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub pixel_spacing: f64,
}

impl Default for CArm {
    fn default() -> Self {
        CArm {
            angle_deg: 0.0,
            source_to_detector: 1000.0,
            source_to_isocenter: 500.0,
            image_width: 256,
            image_height: 256,
            pixel_spacing: 1.0,
        }
    }
}

impl CArm {
    pub fn at_angle(self, angle_deg: f64) -> Self {
        CArm { angle_deg, ..self }
    }
}

impl ProjectionGeometry {
    /// Builds a view whose principal point sits at pixel `(width/2, height/2)`.
    /// At angle 0 the beam travels along world `+x`; image `+v` is world `-z`.
    pub fn c_arm(c: CArm) -> Self {
        let (s, co) = c.angle_deg.to_radians().sin_cos();
        let beam = Vec3::new(co, s, 0.0);
        let source = -beam * c.source_to_isocenter;
        let foot = source + beam * c.source_to_detector;
        let du = Vec3::new(-s, co, 0.0);
        let dv = Vec3::new(0.0, 0.0, -1.0);
        let half_w = c.image_width as f64 / 2.0 * c.pixel_spacing;
        let half_h = c.image_height as f64 / 2.0 * c.pixel_spacing;
        ProjectionGeometry {
            source,
            detector_origin: foot - du * half_w - dv * half_h,
            detector_u: du,
            detector_v: dv,
            pixel_spacing: c.pixel_spacing,
            image_width: c.image_width,
            image_height: c.image_height,
        }
    }

    /// Detector normal, oriented from the source toward the detector.
    pub fn normal(&self) -> Vec3 {
        let n = self.detector_u.cross(&self.detector_v).normalize();
        if (self.detector_origin - self.source).dot(&n) < 0.0 {
            -n
        } else {
            n
        }
    }

    /// Perpendicular distance from the source to the detector plane.
    pub fn source_to_detector(&self) -> f64 {
        (self.detector_origin - self.source).dot(&self.normal())
    }

    /// Detector magnification of a point: SDD / (distance of `p` along the normal).
    pub fn magnification_at(&self, p: &Vec3) -> f64 {
        self.source_to_detector() / (p - self.source).dot(&self.normal())
    }

    /// Pixel coordinates of the foot of the perpendicular from the source.
    pub fn principal_point(&self) -> Pixel {
        let n = self.normal();
        let foot = self.source + n * self.source_to_detector();
        self.detector_coords(&foot)
    }

    fn detector_coords(&self, on_plane: &Vec3) -> Pixel {
        let d = on_plane - self.detector_origin;
        Pixel::new(
            d.dot(&self.detector_u) / self.pixel_spacing,
            d.dot(&self.detector_v) / self.pixel_spacing,
        )
    }

    /// World position of a (sub-)pixel on the detector.
    pub fn pixel_to_world(&self, px: Pixel) -> Vec3 {
        self.detector_origin
            + self.detector_u * (px.u * self.pixel_spacing)
            + self.detector_v * (px.v * self.pixel_spacing)
    }

    /// Unit direction of the ray from the source through a pixel.
    pub fn ray_direction(&self, px: Pixel) -> Vec3 {
        (self.pixel_to_world(px) - self.source).normalize()
    }

    pub fn contains(&self, px: Pixel) -> bool {
        px.u >= -0.5
            && px.v >= -0.5
            && px.u < self.image_width as f64 - 0.5
            && px.v < self.image_height as f64 - 0.5
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidGeometry(m.to_string()));
        if !(self.pixel_spacing > 0.0) || self.image_width == 0 || self.image_height == 0 {
            return bad("pixel spacing and image dimensions must be positive");
        }
        if (self.detector_u.norm() - 1.0).abs() > 1e-9 || (self.detector_v.norm() - 1.0).abs() > 1e-9 {
            return bad("detector axes must be unit vectors");
        }
        if self.detector_u.dot(&self.detector_v).abs() > 1e-9 {
            return bad("detector axes must be orthogonal");
        }
        if self.source_to_detector() < 1e-9 {
            return bad("source lies on the detector plane");
        }
        let pp = self.principal_point();
        let (w, h) = (self.image_width as f64, self.image_height as f64);
        if !(pp.u >= -0.5 && pp.v >= -0.5 && pp.u <= w - 0.5 && pp.v <= h - 0.5) {
            return bad("principal ray misses the image");
        }
        Ok(())
    }

    /// Central projection of a world point onto the detector.
    pub fn project_point(&self, p: &Vec3) -> Result<Pixel> {
        let n = self.normal();
        let dir = p - self.source;
        let denom = dir.dot(&n);
        if denom.abs() < 1e-12 {
            return Err(Error::RayParallelToDetector);
        }
        if denom < 0.0 {
            return Err(Error::BehindSource);
        }
        let t = self.source_to_detector() / denom;
        Ok(self.detector_coords(&(self.source + dir * t)))
    }

    /// Unit vectors `(r, e)` spanning the plane of all 3D directions at `origin`
    /// that project to image direction `alpha`: `r` is the viewing ray and `e`
    /// the in-plane direction perpendicular to it.
    fn alpha_plane(&self, origin: &Vec3, alpha_deg: f64) -> (Vec3, Vec3) {
        let r = (origin - self.source).normalize();
        let (s, c) = alpha_deg.to_radians().sin_cos();
        let q = self.detector_u * c + self.detector_v * s;
        let e = (q - r * q.dot(&r)).normalize();
        (r, e)
    }
}

/// Image-space pose: projected origin, forward angle, depth and tilt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImagePose {
    pub x_instr: Pixel,
    /// Forward angle in degrees, `(-180, 180]`.
    pub alpha: f64,
    /// Source-to-origin distance in mm.
    pub depth: f64,
    /// Signed angle between the axis and the detector plane, degrees;
    /// positive when the axis points toward the detector.
    pub tilt: f64,
    /// For a given (alpha, tilt) the axis can take two directions inside the
    /// back-projection plane of the image line; `true` selects the one that
    /// has swung past the detector normal.
    #[serde(default)]
    pub far_branch: bool,
}

pub fn world_to_image_pose(wp: &WorldPose, g: &ProjectionGeometry) -> Result<ImagePose> {
    let x = g.project_point(&wp.origin)?;
    let x2 = g.project_point(&(wp.origin + wp.axis * AXIS_TRACE_MM))?;
    let (du, dv) = (x2.u - x.u, x2.v - x.v);
    if du.hypot(dv) < 1e-6 {
        return Err(Error::DegenerateAxis);
    }
    let alpha = wrap_deg(dv.atan2(du).to_degrees());
    let n = g.normal();
    let tilt = wp.axis.dot(&n).clamp(-1.0, 1.0).asin().to_degrees();
    let (r, e) = g.alpha_plane(&wp.origin, alpha);
    let phi = wp.axis.dot(&r).atan2(wp.axis.dot(&e));
    let psi = e.dot(&n).atan2(r.dot(&n));
    Ok(ImagePose {
        x_instr: x,
        alpha,
        depth: (wp.origin - g.source).norm(),
        tilt,
        far_branch: (phi + psi).abs() > std::f64::consts::FRAC_PI_2,
    })
}

/// Open interval of tilts (degrees) reachable by a forward-pointing axis at
/// this image position and angle. Every tilt inside is reachable with
/// `far_branch = false`. At one end the axis is as steep as the image
/// angle allows; at the other it turns into the viewing ray.
pub fn tilt_bounds(ip: &ImagePose, g: &ProjectionGeometry) -> (f64, f64) {
    let origin = g.source + g.ray_direction(ip.x_instr) * ip.depth;
    let (r, e) = g.alpha_plane(&origin, ip.alpha);
    let n = g.normal();
    let (a, b) = (e.dot(&n), r.dot(&n));
    let top = a.hypot(b).min(1.0).asin().to_degrees();
    let edge = b.abs().min(1.0).asin().to_degrees();
    if a >= 0.0 {
        (-edge, top)
    } else {
        (-top, edge)
    }
}

pub fn image_to_world_pose(ip: &ImagePose, g: &ProjectionGeometry) -> Result<WorldPose> {
    use std::f64::consts::{FRAC_PI_2, PI};
    if !(ip.tilt.abs() <= 90.0) {
        return Err(Error::InvalidTilt(ip.tilt));
    }
    if !(ip.depth > 0.0) {
        return Err(Error::Format(format!("depth must be positive, got {}", ip.depth)));
    }
    let origin = g.source + g.ray_direction(ip.x_instr) * ip.depth;
    let (r, e) = g.alpha_plane(&origin, ip.alpha);
    let n = g.normal();
    let (a, b) = (e.dot(&n), r.dot(&n));
    let reach = a.hypot(b);
    let ratio = ip.tilt.to_radians().sin() / reach;
    if ratio.abs() > 1.0 + 1e-12 {
        return Err(Error::InvalidTilt(ip.tilt));
    }
    let s0 = ratio.clamp(-1.0, 1.0).asin();
    let psi = a.atan2(b);
    let phi = if ip.far_branch {
        PI.copysign(s0) - s0 - psi
    } else {
        s0 - psi
    };
    if phi.abs() >= FRAC_PI_2 {
        return Err(Error::InvalidTilt(ip.tilt));
    }
    Ok(WorldPose {
        origin,
        axis: (e * phi.cos() + r * phi.sin()).normalize(),
        roll: 0.0,
    })
}

/// Distance in mm between the ground-truth origin and the estimate
/// back-projected onto the detector-parallel plane through the origin.
pub fn position_error_mm(gt: &WorldPose, est: Pixel, g: &ProjectionGeometry) -> Result<f64> {
    let n = g.normal();
    let d = g.ray_direction(est);
    let denom = d.dot(&n);
    if denom.abs() < 1e-12 {
        return Err(Error::RayParallelToDetector);
    }
    let t = (gt.origin - g.source).dot(&n) / denom;
    Ok((g.source + d * t - gt.origin).norm())
}

/// Signed forward-angle error `est − gt`, wrapped to `(-180, 180]`.
pub fn forward_angle_error(gt_alpha: f64, est_alpha: f64) -> f64 {
    wrap_deg(est_alpha - gt_alpha)
}
