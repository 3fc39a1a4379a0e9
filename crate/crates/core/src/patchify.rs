//! Standard-pose patches: rotate and crop the radiograph around a pose
//! estimate so the expected instrument sits at a fixed anchor, pointing along
//! the patch `+x` axis.

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::geometry::{ImagePose, Pixel};
use crate::renderer::RadiographImage;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatchSpec {
    pub patch_width: usize,
    pub patch_height: usize,
    /// Fractional position of the expected instrument origin in the patch.
    pub anchor: [f64; 2],
    /// Zero-mean, unit-variance normalization of the patch pixels.
    pub normalize: bool,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            patch_width: 64,
            patch_height: 32,
            anchor: [0.25, 0.5],
            normalize: true,
        }
    }
}

impl PatchSpec {
    pub fn n_pixels(&self) -> usize {
        self.patch_width * self.patch_height
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |a: f64| a > 0.0 && a < 1.0;
        if self.patch_width == 0 || self.patch_height == 0 || !in_unit(self.anchor[0]) || !in_unit(self.anchor[1]) {
            return Err(Error::Config(format!("invalid patch spec: {self:?}")));
        }
        Ok(())
    }

    pub fn frame(&self, center: Pixel, alpha_deg: f64) -> PatchFrame {
        let (sin, cos) = alpha_deg.to_radians().sin_cos();
        PatchFrame {
            center,
            alpha: alpha_deg,
            cos,
            sin,
            anchor_px: [
                self.anchor[0] * self.patch_width as f64,
                self.anchor[1] * self.patch_height as f64,
            ],
            width: self.patch_width as f64,
            height: self.patch_height as f64,
        }
    }
}

/// Similarity transform between image pixels and normalized patch
/// coordinates (patch center `(0, 0)`, corners `(±1, ±1)`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PatchFrame {
    pub center: Pixel,
    pub alpha: f64,
    cos: f64,
    sin: f64,
    anchor_px: [f64; 2],
    width: f64,
    height: f64,
}

impl PatchFrame {
    /// Image pixel to continuous patch pixel (`[0, W] × [0, H]`).
    pub fn image_to_patch_px(&self, p: Pixel) -> [f64; 2] {
        let (dx, dy) = (p.u - self.center.u, p.v - self.center.v);
        [
            self.anchor_px[0] + self.cos * dx + self.sin * dy,
            self.anchor_px[1] - self.sin * dx + self.cos * dy,
        ]
    }

    pub fn patch_px_to_image(&self, q: [f64; 2]) -> Pixel {
        let (lx, ly) = (q[0] - self.anchor_px[0], q[1] - self.anchor_px[1]);
        Pixel::new(
            self.center.u + self.cos * lx - self.sin * ly,
            self.center.v + self.sin * lx + self.cos * ly,
        )
    }

    pub fn image_to_patch_coords(&self, p: Pixel) -> [f64; 2] {
        let [px, py] = self.image_to_patch_px(p);
        [2.0 * px / self.width - 1.0, 2.0 * py / self.height - 1.0]
    }

    pub fn patch_to_image_coords(&self, q: [f64; 2]) -> Pixel {
        self.patch_px_to_image([(q[0] + 1.0) * self.width / 2.0, (q[1] + 1.0) * self.height / 2.0])
    }

    /// Homogeneous matrix of [`PatchFrame::image_to_patch_coords`].
    pub fn matrix(&self) -> Matrix3<f64> {
        let (sx, sy) = (2.0 / self.width, 2.0 / self.height);
        let (c, s) = (self.cos, self.sin);
        let (u0, v0) = (self.center.u, self.center.v);
        Matrix3::new(
            sx * c,
            sx * s,
            sx * (self.anchor_px[0] - c * u0 - s * v0) - 1.0,
            -sy * s,
            sy * c,
            sy * (self.anchor_px[1] + s * u0 - c * v0) - 1.0,
            0.0,
            0.0,
            1.0,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub width: usize,
    pub height: usize,
    /// Row-major pixels.
    pub pixels: Vec<f32>,
    pub frame: PatchFrame,
}

/// Bilinear sample with border replication; pixel centers at integers.
pub fn sample_bilinear(img: &RadiographImage, p: Pixel) -> f64 {
    let (w, h) = (img.width, img.height);
    let u = p.u.clamp(0.0, (w - 1) as f64);
    let v = p.v.clamp(0.0, (h - 1) as f64);
    let u0 = (u.floor() as usize).min(w.saturating_sub(2));
    let v0 = (v.floor() as usize).min(h.saturating_sub(2));
    let (fu, fv) = (u - u0 as f64, v - v0 as f64);
    let u1 = (u0 + 1).min(w - 1);
    let v1 = (v0 + 1).min(h - 1);
    let a = img.get(u0, v0) as f64 * (1.0 - fu) + img.get(u1, v0) as f64 * fu;
    let b = img.get(u0, v1) as f64 * (1.0 - fu) + img.get(u1, v1) as f64 * fu;
    a * (1.0 - fv) + b * fv
}

pub fn extract_patch(img: &RadiographImage, est: &ImagePose, spec: &PatchSpec) -> Result<Patch> {
    let c = est.x_instr;
    if !img.in_bounds(c) || !c.u.is_finite() || !c.v.is_finite() {
        return Err(Error::EstimateOutOfImage(c.u, c.v));
    }
    let frame = spec.frame(c, est.alpha);
    let (pw, ph) = (spec.patch_width, spec.patch_height);
    let mut values = Vec::with_capacity(pw * ph);
    for j in 0..ph {
        for i in 0..pw {
            let q = frame.patch_px_to_image([i as f64 + 0.5, j as f64 + 0.5]);
            values.push(sample_bilinear(img, q));
        }
    }
    if spec.normalize {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let inv = 1.0 / var.max(1e-8).sqrt();
        values.iter_mut().for_each(|x| *x = (*x - mean) * inv);
    }
    Ok(Patch {
        width: pw,
        height: ph,
        pixels: values.into_iter().map(|x| x as f32).collect(),
        frame,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Vec3, WorldPose};
    use crate::renderer::ImageMeta;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn image_from(width: usize, height: usize, f: impl Fn(f64, f64) -> f64) -> RadiographImage {
        let mut pixels = Vec::with_capacity(width * height);
        for v in 0..height {
            for u in 0..width {
                pixels.push(f(u as f64, v as f64) as f32);
            }
        }
        let wp = WorldPose::new(Vec3::zeros(), Vec3::y(), 0.0).unwrap();
        RadiographImage {
            width,
            height,
            pixels,
            meta: ImageMeta {
                geometry_id: String::new(),
                anatomy_seed: None,
                world_pose: wp,
                image_pose: ImagePose {
                    x_instr: Pixel::new(0.0, 0.0),
                    alpha: 0.0,
                    depth: 1.0,
                    tilt: 0.0,
                    far_branch: false,
                },
                settings_hash: String::new(),
            },
        }
    }

    fn est(u: f64, v: f64, alpha: f64) -> ImagePose {
        ImagePose {
            x_instr: Pixel::new(u, v),
            alpha,
            depth: 500.0,
            tilt: 0.0,
            far_branch: false,
        }
    }

    fn raw_spec() -> PatchSpec {
        PatchSpec {
            normalize: false,
            ..PatchSpec::default()
        }
    }

    #[test]
    fn unrotated_patch_is_a_crop() {
        let img = image_from(128, 128, |u, v| u * 1000.0 + v);
        let spec = raw_spec();
        // anchor pixel center 16.5 in the patch maps to the estimate, so a
        // half-pixel estimate makes samples land on pixel centers
        let p = extract_patch(&img, &est(64.0, 64.0, 0.0), &spec).unwrap();
        for j in 0..spec.patch_height {
            for i in 0..spec.patch_width {
                let u = 64.0 - 16.0 + i as f64 + 0.5;
                let v = 64.0 - 16.0 + j as f64 + 0.5;
                let expect = u * 1000.0 + v;
                assert_abs_diff_eq!(p.pixels[j * 64 + i] as f64, expect, epsilon = 0.02);
            }
        }
    }

    #[test]
    fn constant_image_normalizes_to_zero() {
        let img = image_from(64, 64, |_, _| 3.5);
        let p = extract_patch(&img, &est(30.0, 30.0, 17.0), &PatchSpec::default()).unwrap();
        assert!(p.pixels.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn normalized_patch_statistics() {
        let img = image_from(96, 96, |u, v| (u * 0.1).sin() + v * 0.01);
        let p = extract_patch(&img, &est(40.0, 50.0, 33.0), &PatchSpec::default()).unwrap();
        let n = p.pixels.len() as f64;
        let mean = p.pixels.iter().map(|&x| x as f64).sum::<f64>() / n;
        let var = p.pixels.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-5);
    }

    #[test]
    fn estimate_outside_image_is_rejected() {
        let img = image_from(32, 32, |_, _| 0.0);
        assert!(matches!(
            extract_patch(&img, &est(-3.0, 4.0, 0.0), &PatchSpec::default()),
            Err(Error::EstimateOutOfImage(..))
        ));
    }

    #[test]
    fn rotation_equivariance_against_double_resampling() {
        // smooth elongated blob on a gentle ramp
        let c = Pixel::new(64.0, 64.0);
        let f = |u: f64, v: f64| {
            let (x, y) = (u - c.u - 6.0, v - c.v);
            2.0 * (-(x * x) / 160.0 - (y * y) / 30.0).exp() + 0.004 * u + 0.5
        };
        let base = image_from(128, 128, f);
        let (s, co) = 30f64.to_radians().sin_cos();
        let rotated = image_from(128, 128, |u, v| {
            // I1(q) = I0(R(-30)(q - c) + c)
            let (dx, dy) = (u - c.u, v - c.v);
            let src = Pixel::new(c.u + co * dx + s * dy, c.v - s * dx + co * dy);
            sample_bilinear(&base, src)
        });
        let spec = raw_spec();
        let a = extract_patch(&base, &est(c.u, c.v, 0.0), &spec).unwrap();
        let b = extract_patch(&rotated, &est(c.u, c.v, 30.0), &spec).unwrap();
        let (lo, hi) = base
            .pixels
            .iter()
            .fold((f32::MAX, f32::MIN), |(l, h), &x| (l.min(x), h.max(x)));
        let gray = (hi - lo) as f64 / 255.0;
        let worst = a
            .pixels
            .iter()
            .zip(&b.pixels)
            .map(|(x, y)| (x - y).abs() as f64)
            .fold(0.0, f64::max);
        assert!(worst < 2.0 * gray, "max diff {} gray levels", worst / gray);
    }

    #[test]
    fn coordinate_examples() {
        let spec = PatchSpec::default();
        let f = spec.frame(Pixel::new(100.0, 80.0), 25.0);
        let anchor = f.image_to_patch_coords(Pixel::new(100.0, 80.0));
        assert_abs_diff_eq!(anchor[0], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(anchor[1], 0.0, epsilon = 1e-12);
        let centre = f.patch_px_to_image([32.0, 16.0]);
        let z = f.image_to_patch_coords(centre);
        assert!(z[0].abs() < 1e-12 && z[1].abs() < 1e-12);
        let back = f.patch_to_image_coords([0.0, 0.0]);
        assert!(back.dist(centre) < 1e-12);
        // corners
        let corner = f.patch_px_to_image([64.0, 32.0]);
        let q = f.image_to_patch_coords(corner);
        assert_abs_diff_eq!(q[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(q[1], 1.0, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn frame_round_trip_and_matrix_inverse(
            u in 0.0f64..256.0, v in 0.0f64..256.0, alpha in -180.0f64..180.0,
            x in -3.0f64..3.0, y in -3.0f64..3.0
        ) {
            let f = PatchSpec::default().frame(Pixel::new(u, v), alpha);
            let img = f.patch_to_image_coords([x, y]);
            let q = f.image_to_patch_coords(img);
            prop_assert!((q[0] - x).abs() < 1e-12 && (q[1] - y).abs() < 1e-12);
            let p = Pixel::new(u + 7.0 * x, v - 5.0 * y);
            let q = f.image_to_patch_coords(p);
            let r = f.patch_to_image_coords(q);
            prop_assert!(r.dist(p) < 1e-9);
            // independent inverse: invert the homogeneous matrix numerically
            let inv = f.matrix().try_inverse().unwrap();
            let h = inv * nalgebra::Vector3::new(x, y, 1.0);
            prop_assert!((h.x - img.u).abs() < 1e-9 && (h.y - img.v).abs() < 1e-9);
            // similarity: distances scale uniformly in pixel units
            let a = f.image_to_patch_px(Pixel::new(u, v));
            let b = f.image_to_patch_px(p);
            let d_img = Pixel::new(u, v).dist(p);
            let d_patch = (a[0] - b[0]).hypot(a[1] - b[1]);
            prop_assert!((d_img - d_patch).abs() < 1e-9);
        }
    }
}
