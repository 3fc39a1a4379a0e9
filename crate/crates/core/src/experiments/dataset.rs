//! Dataset generation: reference poses on each phantom's shell, image poses
//! drawn around them, and rendered splits with leave-one-anatomy-out.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{DatasetSpec, ExperimentConfig};
use crate::exec::Exec;
use crate::geometry::{world_to_image_pose, ImagePose, ProjectionGeometry, Vec3, WorldPose};
use crate::phantom::{generate_anatomy_with, AnatomySpec, ScrewModel};
use crate::renderer::{anatomy_layer, compose, quantize_16bit, read_png16, write_png16, ImageMeta, RadiographImage};
use crate::seed::{self, Rng};
use crate::stats::{open_uniform, standard_normal};
use crate::{Error, Result};

pub const TRAIN: &str = "train";
pub const VAL: &str = "val";
pub const TEST: &str = "test";
pub const EXPERT: &str = "expert";
pub const SPLITS: [&str; 4] = [TRAIN, VAL, TEST, EXPERT];

const MAX_POSE_DRAWS: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub angle_deg: f64,
    pub geometry: ProjectionGeometry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: String,
    /// Path relative to the split directory.
    pub file: String,
    pub anatomy_seed: u64,
    pub reference: usize,
    /// Index into [`SplitMeta::views`].
    pub view: usize,
    pub world_pose: WorldPose,
    pub image_pose: ImagePose,
}

/// Two views of one scene, used by the expert split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub id: String,
    pub world_pose: WorldPose,
    pub images: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMeta {
    pub split: String,
    pub anatomy_seeds: Vec<u64>,
    pub views: Vec<ViewRecord>,
    /// Line-integral values mapped to 16-bit codes 0 and 65535.
    pub intensity_range: [f64; 2],
    pub screw: ScrewModel,
    pub render_step: f64,
    pub images: Vec<ImageRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<TaskRecord>,
}

impl SplitMeta {
    pub fn geometry(&self, rec: &ImageRecord) -> &ProjectionGeometry {
        &self.views[rec.view].geometry
    }

    pub fn find(&self, id: &str) -> Option<&ImageRecord> {
        self.images.iter().find(|r| r.id == id)
    }
}

/// Draws the reference poses of one anatomy: origins inside the bone shell
/// away from the beam axis, axes pointing inward within 25° of the shell
/// normal.
pub fn reference_poses(anatomy: &AnatomySpec, n: usize) -> Vec<WorldPose> {
    let mut rng = seed::child_rng(anatomy.seed, &[seed::tag("references")]);
    let semi = Vec3::from(anatomy.semi_axes).map(|a| (a - anatomy.shell_thickness / 2.0).max(1.0));
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let d = random_unit(&mut rng);
        // stay on the sides and top so the axis is seen roughly side-on
        if d.x.abs() > 0.5 {
            continue;
        }
        let p = d / d.component_div(&semi).norm();
        let normal = -p.component_div(&semi.component_mul(&semi)).normalize();
        let axis = random_in_cone(&mut rng, &normal, 25.0);
        let roll = 360.0 * open_uniform(&mut rng);
        out.push(WorldPose::new(p, axis, roll).expect("unit axis"));
    }
    out
}

fn random_unit(rng: &mut Rng) -> Vec3 {
    loop {
        let v = Vec3::new(standard_normal(rng), standard_normal(rng), standard_normal(rng));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

/// Uniform direction on the spherical cap of half-angle `cone_deg` around `axis`.
fn random_in_cone(rng: &mut Rng, axis: &Vec3, cone_deg: f64) -> Vec3 {
    let a = axis.normalize();
    let helper = if a.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let b1 = a.cross(&helper).normalize();
    let b2 = a.cross(&b1);
    let cos_t = 1.0 - open_uniform(rng) * (1.0 - cone_deg.to_radians().cos());
    let sin_t = (1.0 - cos_t * cos_t).max(0.0).sqrt();
    let phi = std::f64::consts::TAU * open_uniform(rng);
    (a * cos_t + (b1 * phi.cos() + b2 * phi.sin()) * sin_t).normalize()
}

fn perturb_reference(rng: &mut Rng, reference: &WorldPose, spec: &DatasetSpec) -> WorldPose {
    let s = spec.position_sigma_mm;
    let origin = reference.origin + Vec3::new(standard_normal(rng), standard_normal(rng), standard_normal(rng)) * s;
    let axis = random_in_cone(rng, &reference.axis, spec.cone_deg);
    let roll = 360.0 * open_uniform(rng);
    WorldPose::new(origin, axis, roll).expect("unit axis")
}

/// A pose is usable in a view when its keypoints exist, the tilt stays
/// below the limit and the origin projects well inside the image.
fn usable(wp: &WorldPose, g: &ProjectionGeometry, screw: &ScrewModel, spec: &DatasetSpec) -> Option<ImagePose> {
    let ip = world_to_image_pose(wp, g).ok()?;
    screw.keypoints(wp, g).ok()?;
    let m = spec.border_margin_px;
    let inside = ip.x_instr.u >= m
        && ip.x_instr.v >= m
        && ip.x_instr.u <= g.image_width as f64 - 1.0 - m
        && ip.x_instr.v <= g.image_height as f64 - 1.0 - m;
    (ip.tilt.abs() < spec.max_tilt_deg && inside).then_some(ip)
}

struct Draw {
    anatomy_seed: u64,
    reference: usize,
    world_pose: WorldPose,
    /// (view index, image pose) per rendered view.
    views: Vec<(usize, ImagePose)>,
}

fn draw_pose(
    rng: &mut Rng,
    anatomy_seed: u64,
    references: &[WorldPose],
    views: &[ViewRecord],
    single_view: bool,
    screw: &ScrewModel,
    spec: &DatasetSpec,
) -> Result<Draw> {
    for _ in 0..MAX_POSE_DRAWS {
        let r = (open_uniform(rng) * references.len() as f64) as usize;
        let r = r.min(references.len() - 1);
        let wp = perturb_reference(rng, &references[r], spec);
        let wanted: Vec<usize> = if single_view {
            vec![((open_uniform(rng) * views.len() as f64) as usize).min(views.len() - 1)]
        } else {
            (0..views.len()).collect()
        };
        let poses: Option<Vec<(usize, ImagePose)>> = wanted
            .iter()
            .map(|&v| usable(&wp, &views[v].geometry, screw, spec).map(|ip| (v, ip)))
            .collect();
        if let Some(views) = poses {
            return Ok(Draw {
                anatomy_seed,
                reference: r,
                world_pose: wp,
                views,
            });
        }
    }
    Err(Error::Config(format!(
        "no usable pose found in {MAX_POSE_DRAWS} draws for anatomy {anatomy_seed}; check view angles and margins"
    )))
}

fn split_views(cfg: &ExperimentConfig, split: &str) -> Vec<ViewRecord> {
    let angles: Vec<f64> = if split == EXPERT {
        let h = cfg.dataset.expert_view_separation_deg / 2.0;
        vec![-h, h]
    } else {
        cfg.dataset.view_angles_deg.clone()
    };
    angles
        .into_iter()
        .map(|a| ViewRecord {
            angle_deg: a,
            geometry: ProjectionGeometry::c_arm(cfg.carm.at_angle(a)),
        })
        .collect()
}

fn split_count(spec: &DatasetSpec, split: &str) -> usize {
    match split {
        TRAIN => spec.train,
        VAL => spec.val,
        TEST => spec.test,
        _ => spec.expert,
    }
}

fn split_anatomies(spec: &DatasetSpec, split: &str) -> Vec<u64> {
    if split == TRAIN || split == VAL {
        spec.train_anatomies()
    } else {
        vec![spec.test_anatomy_seed()]
    }
}

/// Poses and metadata of one split, before rendering.
fn plan_split(cfg: &ExperimentConfig, split: &str, references: &BTreeMap<u64, Vec<WorldPose>>) -> Result<SplitMeta> {
    let spec = &cfg.dataset;
    let views = split_views(cfg, split);
    let anatomies = split_anatomies(spec, split);
    let mut images = Vec::new();
    let mut tasks = Vec::new();
    for i in 0..split_count(spec, split) {
        let mut rng = seed::child_rng(cfg.seed, &[seed::tag("pose"), seed::tag(split), i as u64]);
        let anatomy = anatomies[i % anatomies.len()];
        let d = draw_pose(&mut rng, anatomy, &references[&anatomy], &views, split != EXPERT, &cfg.screw, spec)?;
        let base = if split == EXPERT {
            format!("{split}_{i:05}")
        } else {
            String::new()
        };
        let mut ids = Vec::new();
        for (slot, (v, ip)) in d.views.iter().enumerate() {
            let id = if split == EXPERT {
                format!("{base}_v{slot}")
            } else {
                format!("{split}_{i:05}")
            };
            ids.push(id.clone());
            images.push(ImageRecord {
                file: format!("images/{id}.png"),
                id,
                anatomy_seed: d.anatomy_seed,
                reference: d.reference,
                view: *v,
                world_pose: d.world_pose,
                image_pose: *ip,
            });
        }
        if split == EXPERT {
            tasks.push(TaskRecord {
                id: base,
                world_pose: d.world_pose,
                images: ids,
            });
        }
    }
    Ok(SplitMeta {
        split: split.to_string(),
        anatomy_seeds: anatomies,
        views,
        intensity_range: [0.0, 1.0],
        screw: cfg.screw.clone(),
        render_step: cfg.step(),
        images,
        tasks,
    })
}

/// Longest chord through the screw solid, an upper bound for its line integral.
fn screw_chord_bound(s: &ScrewModel) -> f64 {
    (s.shaft_length + s.head_length).hypot(2.0 * s.head_radius)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub root: PathBuf,
    pub counts: BTreeMap<String, usize>,
    pub intensity_range: [f64; 2],
}

/// Renders all splits under `cfg.dataset_dir()`. Existing split directories
/// are replaced. Output depends only on the configuration.
pub fn generate_dataset(cfg: &ExperimentConfig, exec: Exec) -> Result<DatasetSummary> {
    cfg.validate()?;
    let spec = &cfg.dataset;
    let step = cfg.step();
    let references: BTreeMap<u64, Vec<WorldPose>> = spec
        .anatomy_seeds
        .iter()
        .map(|&s| (s, reference_poses(&cfg.anatomy.with_seed(s), spec.references_per_anatomy)))
        .collect();
    let mut metas: Vec<SplitMeta> = SPLITS
        .iter()
        .map(|s| plan_split(cfg, s, &references))
        .collect::<Result<_>>()?;

    // anatomy layers per (anatomy, view angle); each volume is dropped once
    // its layers exist, and test splits only ever see the held-out anatomy
    let mut layers: BTreeMap<(u64, u64), Vec<f64>> = BTreeMap::new();
    for &a in &spec.anatomy_seeds {
        let needed: Vec<&ViewRecord> = metas
            .iter()
            .filter(|m| m.anatomy_seeds.contains(&a))
            .flat_map(|m| m.views.iter())
            .collect();
        if needed.is_empty() {
            continue;
        }
        let vol = generate_anatomy_with(&cfg.anatomy.with_seed(a), exec)?;
        for v in needed {
            let key = (a, v.angle_deg.to_bits());
            if !layers.contains_key(&key) {
                log::info!("anatomy {a}: projecting view {}°", v.angle_deg);
                layers.insert(key, anatomy_layer(&vol, &v.geometry, step, exec)?);
            }
        }
    }
    let bg_max = layers.values().flatten().cloned().fold(0.0, f64::max);
    let range = [0.0, bg_max + cfg.screw.mu_metal * screw_chord_bound(&cfg.screw)];

    let root = cfg.dataset_dir();
    let mut counts = BTreeMap::new();
    for meta in &mut metas {
        meta.intensity_range = range;
        let dir = root.join(&meta.split);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        let m = &*meta;
        exec.try_map(m.images.len(), |i| {
            let rec = &m.images[i];
            let view = &m.views[rec.view];
            let layer = &layers[&(rec.anatomy_seed, view.angle_deg.to_bits())];
            let img = compose(
                layer,
                Some(rec.anatomy_seed),
                &cfg.screw,
                &rec.world_pose,
                &view.geometry,
                step,
                Exec::Sequential,
            )?;
            let q = quantize_16bit(&img, range[0], range[1]);
            write_png16(&dir.join(&rec.file), img.width, img.height, &q)
        })?;
        write_json(&dir.join("meta.json"), m)?;
        counts.insert(m.split.clone(), m.images.len());
        log::info!("{}: {} images", m.split, m.images.len());
    }
    let summary = DatasetSummary {
        root: root.clone(),
        counts,
        intensity_range: range,
    };
    let mut snapshot = cfg.clone();
    snapshot.workdir = PathBuf::new();
    write_json(&root.join("dataset.json"), &snapshot)?;
    Ok(summary)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path, e))
}

/// A generated dataset on disk.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub splits: BTreeMap<String, SplitMeta>,
}

impl Dataset {
    /// Reads the metadata of every split present under `root`.
    pub fn open(root: &Path) -> Result<Self> {
        let mut splits = BTreeMap::new();
        for s in SPLITS {
            let p = root.join(s).join("meta.json");
            if p.exists() {
                splits.insert(s.to_string(), read_json::<SplitMeta>(&p)?);
            }
        }
        if splits.is_empty() {
            return Err(Error::Config(format!("no dataset found under {}", root.display())));
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            splits,
        })
    }

    pub fn split(&self, name: &str) -> Result<&SplitMeta> {
        self.splits
            .get(name)
            .ok_or_else(|| Error::Config(format!("dataset has no `{name}` split")))
    }

    pub fn image_path(&self, split: &SplitMeta, rec: &ImageRecord) -> PathBuf {
        self.root.join(&split.split).join(&rec.file)
    }

    pub fn load_image(&self, split: &SplitMeta, rec: &ImageRecord) -> Result<RadiographImage> {
        let path = self.image_path(split, rec);
        let (w, h, codes) = read_png16(&path)?;
        let g = split.geometry(rec);
        if (w, h) != (g.image_width, g.image_height) {
            return Err(Error::Format(format!("{}: size {w}x{h} does not match its geometry", path.display())));
        }
        let [lo, hi] = split.intensity_range;
        let scale = (hi - lo) / 65535.0;
        Ok(RadiographImage {
            width: w,
            height: h,
            pixels: codes.iter().map(|&c| (lo + c as f64 * scale) as f32).collect(),
            meta: ImageMeta {
                geometry_id: crate::renderer::geometry_id(g),
                anatomy_seed: Some(rec.anatomy_seed),
                world_pose: rec.world_pose,
                image_pose: rec.image_pose,
                settings_hash: crate::renderer::settings_hash(&split.screw, split.render_step),
            },
        })
    }

    /// All images of a split, in metadata order.
    pub fn load_split(&self, name: &str, exec: Exec) -> Result<LoadedSplit> {
        let meta = self.split(name)?.clone();
        let images = exec.try_map(meta.images.len(), |i| self.load_image(&meta, &meta.images[i]))?;
        Ok(LoadedSplit { meta, images })
    }
}

/// Split metadata with decoded images, index-aligned.
#[derive(Debug, Clone)]
pub struct LoadedSplit {
    pub meta: SplitMeta,
    pub images: Vec<RadiographImage>,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn geometry(&self, i: usize) -> &ProjectionGeometry {
        self.meta.geometry(&self.meta.images[i])
    }
}
