//! Sequential against data-parallel execution for the three hot loops:
//! phantom voxelization, anatomy ray marching and batch evaluation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use drrpose::estimator::{estimate, EstimatorConfig, FixedKeypoints};
use drrpose::exec::Exec;
use drrpose::geometry::{world_to_image_pose, CArm};
use drrpose::phantom::{generate_anatomy_with, AnatomySpec, ScrewModel};
use drrpose::renderer::{anatomy_layer, render_with};
use drrpose::{ProjectionGeometry, Vec3, WorldPose};

const MODES: [(&str, Exec); 2] = [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)];

fn small_anatomy() -> AnatomySpec {
    AnatomySpec {
        dims: [64, 64, 64],
        spacing: [2.0, 2.0, 2.0],
        ..AnatomySpec::default()
    }
}

fn phantom(c: &mut Criterion) {
    let spec = small_anatomy();
    let mut group = c.benchmark_group("phantom");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| generate_anatomy_with(&spec, exec).unwrap())
        });
    }
    group.finish();
}

fn ray_march(c: &mut Criterion) {
    let vol = generate_anatomy_with(&small_anatomy(), Exec::available()).unwrap();
    let g = ProjectionGeometry::c_arm(CArm {
        image_width: 128,
        image_height: 128,
        pixel_spacing: 2.0,
        ..CArm::default()
    });
    let mut group = c.benchmark_group("anatomy_layer");
    group.sample_size(10);
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| anatomy_layer(&vol, &g, 1.0, exec).unwrap())
        });
    }
    group.finish();
}

fn evaluation(c: &mut Criterion) {
    let vol = generate_anatomy_with(&small_anatomy(), Exec::available()).unwrap();
    let g = ProjectionGeometry::c_arm(CArm::default());
    let screw = ScrewModel::default();
    let wp = WorldPose::new(Vec3::new(0.0, -20.0, 10.0), Vec3::new(0.2, 1.0, -0.3), 0.0).unwrap();
    let img = render_with(&vol, &screw, &wp, &g, 1.0, Exec::available()).unwrap();
    let truth = world_to_image_pose(&wp, &g).unwrap();
    let oracle = FixedKeypoints(screw.keypoints(&wp, &g).unwrap().pixels);
    let cfg = EstimatorConfig::default();
    let mut group = c.benchmark_group("estimate_batch");
    for (name, exec) in MODES {
        group.bench_function(BenchmarkId::from_parameter(name), |b| {
            b.iter(|| {
                exec.try_map(256, |i| {
                    let mut init = truth;
                    init.x_instr.u += (i % 16) as f64 * 0.5 - 4.0;
                    init.alpha += (i / 16) as f64 - 8.0;
                    estimate(&img, &init, &cfg, &oracle)
                })
                .unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, phantom, ray_march, evaluation);
criterion_main!(benches);
