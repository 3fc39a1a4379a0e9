//! Digitally rendered radiographs: attenuation line integrals over the full
//! detector, anatomy by uniform ray marching and the screw analytically.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::exec::Exec;
use crate::geometry::{world_to_image_pose, ImagePose, Pixel, ProjectionGeometry, Vec3, WorldPose};
use crate::phantom::{ScrewModel, Volume};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub geometry_id: String,
    pub anatomy_seed: Option<u64>,
    pub world_pose: WorldPose,
    pub image_pose: ImagePose,
    pub settings_hash: String,
}

/// Line-integral image `p(u, v) = ∫ μ dl`, row-major, `v` down.
#[derive(Debug, Clone, PartialEq)]
pub struct RadiographImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
    pub meta: ImageMeta,
}

impl RadiographImage {
    #[inline]
    pub fn get(&self, u: usize, v: usize) -> f32 {
        self.pixels[v * self.width + u]
    }

    /// Whether `p` lies inside the image footprint (pixel edges at ±0.5).
    pub fn in_bounds(&self, p: Pixel) -> bool {
        p.u >= -0.5 && p.v >= -0.5 && p.u < self.width as f64 - 0.5 && p.v < self.height as f64 - 0.5
    }

    pub fn geometry_matches(&self, g: &ProjectionGeometry) -> bool {
        self.width == g.image_width && self.height == g.image_height
    }
}

/// Default ray step: half the smallest voxel spacing.
pub fn default_step(vol: &Volume) -> f64 {
    0.5 * vol.spacing.iter().cloned().fold(f64::INFINITY, f64::min)
}

/// Short content hash of the geometry, used as its id in metadata.
pub fn geometry_id(g: &ProjectionGeometry) -> String {
    short_hash(&serde_json::to_vec(g).expect("geometry serializes"))
}

pub fn settings_hash(screw: &ScrewModel, step: f64) -> String {
    let v = serde_json::json!({ "screw": screw, "step": step });
    short_hash(v.to_string().as_bytes())
}

/// First 16 hex digits of the SHA-256 of `bytes`.
pub fn short_hash(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(&digest[..8])
}

/// Parametric interval where the ray is inside the box, if any.
fn clip_to_box(origin: &Vec3, dir: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (0.0f64, f64::INFINITY);
    for k in 0..3 {
        if dir[k].abs() < 1e-15 {
            if origin[k] < lo[k] || origin[k] > hi[k] {
                return None;
            }
            continue;
        }
        let a = (lo[k] - origin[k]) / dir[k];
        let b = (hi[k] - origin[k]) / dir[k];
        t0 = t0.max(a.min(b));
        t1 = t1.min(a.max(b));
    }
    (t1 > t0).then_some((t0, t1))
}

/// Midpoint-rule line integral through the volume along a unit ray.
fn march(vol: &Volume, origin: &Vec3, dir: &Vec3, lo: &Vec3, hi: &Vec3, step: f64) -> f64 {
    let Some((t0, t1)) = clip_to_box(origin, dir, lo, hi) else {
        return 0.0;
    };
    let len = t1 - t0;
    let n = (len / step).ceil().max(1.0) as usize;
    let h = len / n as f64;
    let mut sum = 0.0;
    for k in 0..n {
        let t = t0 + (k as f64 + 0.5) * h;
        sum += vol.sample(&(origin + dir * t));
    }
    sum * h
}

/// Anatomy-only line integrals for every detector pixel.
pub fn anatomy_layer(vol: &Volume, g: &ProjectionGeometry, step: f64, exec: Exec) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::Config(format!("ray step must be positive, got {step}")));
    }
    g.validate()?;
    let (lo, hi) = vol.bounds();
    let principal = g.normal();
    if clip_to_box(&g.source, &principal, &lo, &hi).is_none() {
        return Err(Error::EmptyScene("principal ray does not cross the volume".into()));
    }
    let w = g.image_width;
    let mut out = vec![0.0; w * g.image_height];
    exec.for_each_chunk(&mut out, w, |v, row| {
        for (u, px) in row.iter_mut().enumerate() {
            let dir = g.ray_direction(Pixel::new(u as f64, v as f64));
            *px = march(vol, &g.source, &dir, &lo, &hi, step);
        }
    });
    Ok(out)
}

/// Screw-only line integrals (`mu_metal × chord length`).
pub fn screw_layer(screw: &ScrewModel, wp: &WorldPose, g: &ProjectionGeometry, exec: Exec) -> Vec<f64> {
    let w = g.image_width;
    let mut out = vec![0.0; w * g.image_height];
    exec.for_each_chunk(&mut out, w, |v, row| {
        for (u, px) in row.iter_mut().enumerate() {
            let dir = g.ray_direction(Pixel::new(u as f64, v as f64));
            *px = screw.mu_metal * screw.ray_pathlength(wp, &g.source, &dir);
        }
    });
    out
}

/// Adds the analytic screw to a precomputed anatomy layer. Produces exactly
/// the same pixels as [`render`] for the same anatomy layer.
pub fn compose(
    anatomy: &[f64],
    anatomy_seed: Option<u64>,
    screw: &ScrewModel,
    wp: &WorldPose,
    g: &ProjectionGeometry,
    step: f64,
    exec: Exec,
) -> Result<RadiographImage> {
    let image_pose = world_to_image_pose(wp, g)?;
    let w = g.image_width;
    if anatomy.len() != w * g.image_height {
        return Err(Error::ShapeMismatch {
            expected: w * g.image_height,
            got: anatomy.len(),
        });
    }
    let mut pixels = vec![0f32; anatomy.len()];
    exec.for_each_chunk(&mut pixels, w, |v, row| {
        for (u, px) in row.iter_mut().enumerate() {
            let dir = g.ray_direction(Pixel::new(u as f64, v as f64));
            let metal = screw.mu_metal * screw.ray_pathlength(wp, &g.source, &dir);
            *px = (anatomy[v * w + u] + metal) as f32;
        }
    });
    Ok(RadiographImage {
        width: w,
        height: g.image_height,
        pixels,
        meta: ImageMeta {
            geometry_id: geometry_id(g),
            anatomy_seed,
            world_pose: *wp,
            image_pose,
            settings_hash: settings_hash(screw, step),
        },
    })
}

pub fn render(
    vol: &Volume,
    screw: &ScrewModel,
    wp: &WorldPose,
    g: &ProjectionGeometry,
    step: f64,
) -> Result<RadiographImage> {
    render_with(vol, screw, wp, g, step, Exec::available())
}

pub fn render_with(
    vol: &Volume,
    screw: &ScrewModel,
    wp: &WorldPose,
    g: &ProjectionGeometry,
    step: f64,
    exec: Exec,
) -> Result<RadiographImage> {
    let layer = anatomy_layer(vol, g, step, exec)?;
    compose(&layer, Some(vol.seed), screw, wp, g, step, exec)
}

/// Inverted display window: `lo → 255`, `hi → 0`, round-half-up.
pub fn window_to_8bit(img: &RadiographImage, lo: f64, hi: f64) -> Vec<u8> {
    assert!(lo < hi, "window requires lo < hi");
    img.pixels
        .iter()
        .map(|&p| {
            let x = 255.0 * (1.0 - (p as f64 - lo) / (hi - lo));
            (x + 0.5).floor().clamp(0.0, 255.0) as u8
        })
        .collect()
}

/// Linear 16-bit quantization of `[lo, hi]` (not inverted).
pub fn quantize_16bit(img: &RadiographImage, lo: f64, hi: f64) -> Vec<u16> {
    assert!(lo < hi, "window requires lo < hi");
    img.pixels
        .iter()
        .map(|&p| {
            let x = 65535.0 * (p as f64 - lo) / (hi - lo);
            (x + 0.5).floor().clamp(0.0, 65535.0) as u16
        })
        .collect()
}

pub fn encode_png8(width: usize, height: usize, data: &[u8]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, width as u32, height as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
        w.write_image_data(data).map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(buf)
}

pub fn write_png16(path: &Path, width: usize, height: usize, data: &[u16]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut w = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_be_bytes()).collect();
    w.write_image_data(&bytes).map_err(|e| Error::Format(e.to_string()))
}

pub fn read_png16(path: &Path) -> Result<(usize, usize, Vec<u16>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = png::Decoder::new(std::io::BufReader::new(file))
        .read_info()
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if info.bit_depth != png::BitDepth::Sixteen || info.color_type != png::ColorType::Grayscale {
        return Err(Error::Format(format!("{}: expected 16-bit grayscale", path.display())));
    }
    let data = buf[..info.buffer_size()]
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((info.width as usize, info.height as usize, data))
}

/// Raw little-endian f32 sidecar.
pub fn write_raw_f32(path: &Path, pixels: &[f32]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for p in pixels {
        w.write_all(&p.to_le_bytes()).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_raw_f32(path: &Path) -> Result<Vec<f32>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!("{}: truncated float data", path.display())));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CArm;

    fn small_geom() -> ProjectionGeometry {
        ProjectionGeometry::c_arm(CArm {
            image_width: 48,
            image_height: 40,
            pixel_spacing: 4.0,
            ..CArm::default()
        })
    }

    fn pose() -> WorldPose {
        WorldPose::new(Vec3::new(0.0, 3.0, -2.0), Vec3::new(0.1, 1.0, 0.3), 0.0).unwrap()
    }

    #[test]
    fn uniform_slab_integral() {
        let mut vol = Volume::centered([101, 101, 101], [1.0, 1.0, 1.0]);
        vol.data.iter_mut().for_each(|m| *m = 0.02);
        let g = ProjectionGeometry::c_arm(CArm {
            image_width: 8,
            image_height: 8,
            ..CArm::default()
        });
        let layer = anatomy_layer(&vol, &g, 0.5, Exec::available()).unwrap();
        // pixel (4, 4) is the principal point: the ray runs along world +x
        let p = layer[4 * 8 + 4];
        assert!((p - 2.0).abs() < 0.02, "{p}");
    }

    #[test]
    fn empty_volume_renders_zero() {
        let vol = Volume::centered([20, 20, 20], [2.0, 2.0, 2.0]);
        let layer = anatomy_layer(&vol, &small_geom(), 1.0, Exec::available()).unwrap();
        assert!(layer.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn principal_ray_must_hit_volume() {
        let mut vol = Volume::centered([10, 10, 10], [1.0, 1.0, 1.0]);
        vol.origin += Vec3::new(0.0, 300.0, 0.0);
        assert!(matches!(
            anatomy_layer(&vol, &small_geom(), 0.5, Exec::available()),
            Err(Error::EmptyScene(_))
        ));
    }

    #[test]
    fn schedules_agree_bitwise_and_layers_add() {
        let spec = crate::phantom::AnatomySpec {
            dims: [40, 40, 40],
            spacing: [3.0, 3.0, 3.0],
            ..Default::default()
        };
        let vol = crate::phantom::generate_anatomy(&spec).unwrap();
        let g = small_geom();
        let screw = ScrewModel::default();
        let a = render_with(&vol, &screw, &pose(), &g, 1.5, Exec::Sequential).unwrap();
        let b = render_with(&vol, &screw, &pose(), &g, 1.5, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        let anat = anatomy_layer(&vol, &g, 1.5, Exec::Sequential).unwrap();
        let metal = screw_layer(&screw, &pose(), &g, Exec::Sequential);
        for i in 0..anat.len() {
            assert!((anat[i] + metal[i] - a.pixels[i] as f64).abs() < 1e-6);
        }
        assert!(metal.iter().any(|&m| m > 0.0));
        assert!(a.pixels.iter().all(|&p| p >= 0.0));
        let ip = crate::geometry::world_to_image_pose(&pose(), &g).unwrap();
        assert_eq!(a.meta.image_pose, ip);
    }

    #[test]
    fn raising_a_voxel_never_darkens() {
        let spec = crate::phantom::AnatomySpec {
            dims: [30, 30, 30],
            spacing: [4.0, 4.0, 4.0],
            ..Default::default()
        };
        let mut vol = crate::phantom::generate_anatomy(&spec).unwrap();
        let g = small_geom();
        let before = anatomy_layer(&vol, &g, 2.0, Exec::available()).unwrap();
        let i = vol.index(15, 14, 16);
        vol.data[i] += 0.5;
        let after = anatomy_layer(&vol, &g, 2.0, Exec::available()).unwrap();
        assert!(before.iter().zip(&after).all(|(b, a)| a >= b));
        assert!(before.iter().zip(&after).any(|(b, a)| a > b));
    }

    #[test]
    fn window_examples() {
        let img = RadiographImage {
            width: 3,
            height: 1,
            pixels: vec![1.0, 3.0, 2.0],
            meta: ImageMeta {
                geometry_id: String::new(),
                anatomy_seed: None,
                world_pose: pose(),
                image_pose: crate::geometry::world_to_image_pose(&pose(), &small_geom()).unwrap(),
                settings_hash: String::new(),
            },
        };
        assert_eq!(window_to_8bit(&img, 1.0, 3.0), vec![255, 0, 128]);
        assert_eq!(quantize_16bit(&img, 1.0, 3.0), vec![0, 65535, 32768]);
    }

    #[test]
    fn png16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<u16> = (0..12 * 5).map(|i| (i * 1000) as u16).collect();
        let p = dir.path().join("x.png");
        write_png16(&p, 12, 5, &data).unwrap();
        assert_eq!(read_png16(&p).unwrap(), (12, 5, data));
    }
}
