//! Procedural anatomy volumes and the parametric screw instrument.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::Point3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::exec::Exec;
use crate::geometry::{Pixel, ProjectionGeometry, Vec3, WorldPose};
use crate::{Error, Result};

/// Scalar attenuation volume, x-fastest storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// World position of the center of voxel (0, 0, 0).
    pub origin: Vec3,
    pub seed: u64,
    pub data: Vec<f32>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing: [f64; 3],
    origin: Vec3,
    seed: u64,
}

impl Volume {
    /// Volume of zeros centered on the world origin.
    pub fn centered(dims: [usize; 3], spacing: [f64; 3]) -> Self {
        let origin = Vec3::new(
            -(dims[0] as f64 - 1.0) * spacing[0] / 2.0,
            -(dims[1] as f64 - 1.0) * spacing[1] / 2.0,
            -(dims[2] as f64 - 1.0) * spacing[2] / 2.0,
        );
        Volume {
            dims,
            spacing,
            origin,
            seed: 0,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        self.origin
            + Vec3::new(
                x as f64 * self.spacing[0],
                y as f64 * self.spacing[1],
                z as f64 * self.spacing[2],
            )
    }

    /// Axis-aligned box spanned by the voxel centers.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let ext = Vec3::new(
            (self.dims[0] - 1) as f64 * self.spacing[0],
            (self.dims[1] - 1) as f64 * self.spacing[1],
            (self.dims[2] - 1) as f64 * self.spacing[2],
        );
        (self.origin, self.origin + ext)
    }

    /// Trilinear interpolation; zero outside the voxel-center box.
    pub fn sample(&self, p: &Vec3) -> f64 {
        let mut i = [0usize; 3];
        let mut f = [0f64; 3];
        for k in 0..3 {
            let c = (p[k] - self.origin[k]) / self.spacing[k];
            let max = (self.dims[k] - 1) as f64;
            if !(c >= 0.0 && c <= max) {
                return 0.0;
            }
            let fl = c.floor().min((self.dims[k].max(2) - 2) as f64);
            i[k] = fl as usize;
            f[k] = c - fl;
        }
        if self.dims.iter().any(|&d| d < 2) {
            return self.data[self.index(i[0], i[1], i[2])] as f64;
        }
        let (nx, nxy) = (self.dims[0], self.dims[0] * self.dims[1]);
        let base = self.index(i[0], i[1], i[2]);
        let v = |o: usize| self.data[base + o] as f64;
        let c00 = v(0) * (1.0 - f[0]) + v(1) * f[0];
        let c10 = v(nx) * (1.0 - f[0]) + v(nx + 1) * f[0];
        let c01 = v(nxy) * (1.0 - f[0]) + v(nxy + 1) * f[0];
        let c11 = v(nxy + nx) * (1.0 - f[0]) + v(nxy + nx + 1) * f[0];
        let c0 = c00 * (1.0 - f[1]) + c10 * f[1];
        let c1 = c01 * (1.0 - f[1]) + c11 * f[1];
        c0 * (1.0 - f[2]) + c1 * f[2]
    }

    /// Writes `<stem>.json` (header) and `<stem>.raw` (little-endian f32).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let header = VolumeHeader {
            dims: self.dims,
            spacing: self.spacing,
            origin: self.origin,
            seed: self.seed,
        };
        let hp = stem.with_extension("json");
        let text = serde_json::to_string_pretty(&header).map_err(|e| Error::json(&hp, e))?;
        std::fs::write(&hp, text).map_err(|e| Error::io(&hp, e))?;
        let rp = stem.with_extension("raw");
        let mut w = BufWriter::new(File::create(&rp).map_err(|e| Error::io(&rp, e))?);
        for v in &self.data {
            w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&rp, e))?;
        }
        w.flush().map_err(|e| Error::io(&rp, e))
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let hp = stem.with_extension("json");
        let text = std::fs::read_to_string(&hp).map_err(|e| Error::io(&hp, e))?;
        let h: VolumeHeader = serde_json::from_str(&text).map_err(|e| Error::json(&hp, e))?;
        let rp: PathBuf = stem.with_extension("raw");
        let mut bytes = Vec::new();
        BufReader::new(File::open(&rp).map_err(|e| Error::io(&rp, e))?)
            .read_to_end(&mut bytes)
            .map_err(|e| Error::io(&rp, e))?;
        let n = h.dims.iter().product::<usize>();
        if bytes.len() != n * 4 {
            return Err(Error::Format(format!(
                "{}: expected {} bytes, found {}",
                rp.display(),
                n * 4,
                bytes.len()
            )));
        }
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Volume {
            dims: h.dims,
            spacing: h.spacing,
            origin: h.origin,
            seed: h.seed,
            data,
        })
    }
}

/// Recipe for a procedural head-like phantom: an ellipsoidal bone shell filled
/// with soft tissue and sprinkled with ellipsoidal inclusions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnatomySpec {
    pub seed: u64,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub semi_axes: [f64; 3],
    /// Relative random scaling applied per semi-axis (0 disables).
    pub shape_jitter: f64,
    pub shell_thickness: f64,
    pub mu_bone: f64,
    pub mu_soft: f64,
    pub n_inclusions: usize,
    pub inclusion_radius: [f64; 2],
    /// Inclusion attenuation as a fraction of `mu_bone`.
    pub inclusion_contrast: [f64; 2],
}

impl Default for AnatomySpec {
    fn default() -> Self {
        AnatomySpec {
            seed: 1,
            dims: [128, 128, 128],
            spacing: [1.0, 1.0, 1.0],
            semi_axes: [55.0, 50.0, 58.0],
            shape_jitter: 0.08,
            shell_thickness: 6.0,
            mu_bone: 0.05,
            mu_soft: 0.02,
            n_inclusions: 40,
            inclusion_radius: [2.0, 8.0],
            inclusion_contrast: [0.0, 0.9],
        }
    }
}

impl AnatomySpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        AnatomySpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.dims.iter().all(|&d| d > 0)
            && self.spacing.iter().all(|&s| s > 0.0)
            && self.semi_axes.iter().all(|&a| a > 0.0)
            && self.shell_thickness >= 0.0
            && self.mu_soft >= 0.0
            && self.mu_bone >= self.mu_soft
            && (0.0..1.0).contains(&self.shape_jitter)
            && self.inclusion_radius[0] > 0.0
            && self.inclusion_radius[0] <= self.inclusion_radius[1]
            && self.inclusion_contrast[0] >= 0.0
            && self.inclusion_contrast[0] <= self.inclusion_contrast[1]
            && self.inclusion_contrast[1] <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid anatomy spec: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    center: Vec3,
    semi: Vec3,
}

impl Ellipsoid {
    fn contains(&self, p: &Vec3) -> bool {
        let d = (p - self.center).component_div(&self.semi);
        d.norm_squared() <= 1.0
    }
}

pub fn generate_anatomy(spec: &AnatomySpec) -> Result<Volume> {
    generate_anatomy_with(spec, Exec::available())
}

pub fn generate_anatomy_with(spec: &AnatomySpec, exec: Exec) -> Result<Volume> {
    spec.validate()?;
    let mut rng = crate::seed::child_rng(spec.seed, &[crate::seed::tag("anatomy")]);
    let mut semi = Vec3::from(spec.semi_axes);
    if spec.shape_jitter > 0.0 {
        for k in 0..3 {
            semi[k] *= 1.0 + rng.random_range(-spec.shape_jitter..spec.shape_jitter);
        }
    }
    let outer = Ellipsoid {
        center: Vec3::zeros(),
        semi,
    };
    let inner_semi = semi.map(|a| a - spec.shell_thickness);
    let inner = (inner_semi.min() > 0.0).then_some(Ellipsoid {
        center: Vec3::zeros(),
        semi: inner_semi,
    });

    let mut inclusions = Vec::with_capacity(spec.n_inclusions);
    while inclusions.len() < spec.n_inclusions {
        let c = Vec3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        );
        if c.norm_squared() > 1.0 {
            continue;
        }
        let [rlo, rhi] = spec.inclusion_radius;
        let r = |rng: &mut crate::seed::Rng| {
            if rhi > rlo {
                rng.random_range(rlo..rhi)
            } else {
                rlo
            }
        };
        let semi_i = Vec3::new(r(&mut rng), r(&mut rng), r(&mut rng));
        let [clo, chi] = spec.inclusion_contrast;
        let contrast = if chi > clo { rng.random_range(clo..chi) } else { clo };
        inclusions.push((
            Ellipsoid {
                center: c.component_mul(&semi),
                semi: semi_i,
            },
            (contrast * spec.mu_bone) as f32,
        ));
    }

    let mut vol = Volume::centered(spec.dims, spec.spacing);
    vol.seed = spec.seed;
    let [nx, ny, _] = spec.dims;
    let (origin, spacing) = (vol.origin, spec.spacing);
    let (mu_bone, mu_soft) = (spec.mu_bone as f32, spec.mu_soft as f32);
    exec.for_each_chunk(&mut vol.data, nx * ny, |z, slab| {
        for y in 0..ny {
            for x in 0..nx {
                let p = origin
                    + Vec3::new(
                        x as f64 * spacing[0],
                        y as f64 * spacing[1],
                        z as f64 * spacing[2],
                    );
                if !outer.contains(&p) {
                    continue;
                }
                let mut mu = match &inner {
                    Some(e) if e.contains(&p) => mu_soft,
                    Some(_) => mu_bone,
                    None if spec.shell_thickness > 0.0 => mu_bone,
                    None => mu_soft,
                };
                for (e, m) in &inclusions {
                    if e.contains(&p) {
                        mu = *m;
                    }
                }
                slab[x + nx * y] = mu;
            }
        }
    });
    Ok(vol)
}

/// Screw solid: a head cylinder on `[-head_length, 0]` and a shaft cylinder on
/// `[0, shaft_length]` along the local axis. The origin is the head point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScrewModel {
    pub shaft_length: f64,
    pub shaft_radius: f64,
    pub head_radius: f64,
    pub head_length: f64,
    pub mu_metal: f64,
    /// Offset `d` of the cross keypoints.
    pub keypoint_offset: f64,
}

impl Default for ScrewModel {
    fn default() -> Self {
        ScrewModel {
            shaft_length: 9.0,
            shaft_radius: 1.0,
            head_radius: 2.0,
            head_length: 2.0,
            mu_metal: 2.0,
            keypoint_offset: 3.0,
        }
    }
}

/// Number of regression keypoints.
pub const N_KEYPOINTS: usize = 6;

/// The six keypoints in fixed order A1, A2, A3 (axis) and B1, B2, B3 (cross line).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScrewKeypoints {
    pub local: [Vec3; N_KEYPOINTS],
    pub world: [Vec3; N_KEYPOINTS],
    pub pixels: [Pixel; N_KEYPOINTS],
}

/// Minimum angle between instrument axis and viewing ray for keypoints.
pub const MIN_AXIS_VIEW_ANGLE_DEG: f64 = 2.0;

impl ScrewModel {
    pub fn validate(&self) -> Result<()> {
        let ok = [
            self.shaft_length,
            self.shaft_radius,
            self.head_radius,
            self.head_length,
            self.mu_metal,
            self.keypoint_offset,
        ]
        .iter()
        .all(|&v| v > 0.0)
            && self.head_radius >= self.shaft_radius;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid screw model: {self:?}")))
        }
    }

    /// Axis points `{0, L/2, L}` and cross points `{-d, d/2, d}` along
    /// `w = unit(axis × view_ray)`, with their detector projections.
    pub fn keypoints(&self, wp: &WorldPose, g: &ProjectionGeometry) -> Result<ScrewKeypoints> {
        let view = (wp.origin - g.source).normalize();
        let cross = wp.axis.cross(&view);
        let sin = cross.norm();
        if sin < MIN_AXIS_VIEW_ANGLE_DEG.to_radians().sin() {
            return Err(Error::DegenerateAxis);
        }
        let w = cross / sin;
        let l = self.shaft_length;
        let d = self.keypoint_offset;
        let world = [
            wp.origin,
            wp.origin + wp.axis * (l / 2.0),
            wp.origin + wp.axis * l,
            wp.origin - w * d,
            wp.origin + w * (d / 2.0),
            wp.origin + w * d,
        ];
        let inv = wp.local_to_world().inverse();
        let mut local = [Vec3::zeros(); N_KEYPOINTS];
        let mut pixels = [Pixel::new(0.0, 0.0); N_KEYPOINTS];
        for k in 0..N_KEYPOINTS {
            local[k] = (inv * Point3::from(world[k])).coords;
            pixels[k] = g.project_point(&world[k])?;
        }
        Ok(ScrewKeypoints {
            local,
            world,
            pixels,
        })
    }

    /// Chord length (mm) of the ray `ray_origin + t·dir, t ≥ 0` inside the
    /// screw solid. `dir` must be a unit vector.
    pub fn ray_pathlength(&self, wp: &WorldPose, ray_origin: &Vec3, dir: &Vec3) -> f64 {
        let p0 = ray_origin - wp.origin;
        let a = wp.axis;
        let (ax0, ad) = (p0.dot(&a), dir.dot(&a));
        let perp0 = p0 - a * ax0;
        let perpd = dir - a * ad;
        let chord = |x0: f64, x1: f64, r: f64| -> f64 {
            let (mut lo, mut hi) = (0.0f64, f64::INFINITY);
            // radial extent
            let qa = perpd.norm_squared();
            let qb = 2.0 * perp0.dot(&perpd);
            let qc = perp0.norm_squared() - r * r;
            if qa < 1e-15 {
                if qc > 0.0 {
                    return 0.0;
                }
            } else {
                let disc = qb * qb - 4.0 * qa * qc;
                if disc <= 0.0 {
                    return 0.0;
                }
                let sq = disc.sqrt();
                lo = lo.max((-qb - sq) / (2.0 * qa));
                hi = hi.min((-qb + sq) / (2.0 * qa));
            }
            // axial extent
            if ad.abs() < 1e-15 {
                if ax0 < x0 || ax0 > x1 {
                    return 0.0;
                }
            } else {
                let (t0, t1) = ((x0 - ax0) / ad, (x1 - ax0) / ad);
                lo = lo.max(t0.min(t1));
                hi = hi.min(t0.max(t1));
            }
            (hi - lo).max(0.0)
        };
        chord(-self.head_length, 0.0, self.head_radius)
            + chord(0.0, self.shaft_length, self.shaft_radius)
    }

    /// Closed silhouette of the axial cross-section in local `(x, y)`
    /// coordinates; every edge is split at its midpoint.
    pub fn outline(&self) -> Vec<[f64; 2]> {
        let (hl, hr, sr, l) = (
            self.head_length,
            self.head_radius,
            self.shaft_radius,
            self.shaft_length,
        );
        let corners = [
            [-hl, -hr],
            [0.0, -hr],
            [0.0, -sr],
            [l, -sr],
            [l, sr],
            [0.0, sr],
            [0.0, hr],
            [-hl, hr],
        ];
        let mut out = Vec::with_capacity(2 * corners.len() + 1);
        for k in 0..corners.len() {
            let a = corners[k];
            let b = corners[(k + 1) % corners.len()];
            out.push(a);
            out.push([(a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0]);
        }
        out.push(corners[0]);
        out
    }
}
