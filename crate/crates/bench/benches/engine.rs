use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nalgebra::Vector3;
use voxfuse_core::index::{HashConfig, HashVolume};
use voxfuse_core::integration::SceneParams;
use voxfuse_core::pipeline::{Engine, EngineSettings};
use voxfuse_core::tracking::pyramid::build_depth_pyramid;
use voxfuse_core::tracking::{icp_track, TrackerSettings};
use voxfuse_core::view::synth::{default_intrinsics, orbit_poses, render_view, Scene};
use voxfuse_core::view::Calibration;
use voxfuse_core::voxel::VoxelS;

fn hash_table(c: &mut Criterion) {
    let blocks: Vec<Vector3<i32>> = (0..20_000)
        .map(|i: i32| Vector3::new(i % 97 - 48, (i / 97) % 89 - 44, i / (97 * 89) - 1))
        .collect();
    c.bench_function("hash insert 20k blocks", |b| {
        b.iter_batched(
            || HashVolume::<VoxelS>::new(HashConfig::default(), 0.01),
            |mut vol| {
                for &p in &blocks {
                    vol.insert_block(p).unwrap();
                }
                vol
            },
            BatchSize::LargeInput,
        )
    });
    let mut vol = HashVolume::<VoxelS>::new(HashConfig::default(), 0.01);
    for &p in &blocks {
        vol.insert_block(p).unwrap();
    }
    c.bench_function("hash retrieve 20k voxels", |b| {
        b.iter(|| {
            for &p in &blocks {
                black_box(vol.retrieve(p * 8 + Vector3::new(3, 4, 5)));
            }
        })
    });
}

fn engine_320x240() -> (Engine<VoxelS>, Calibration, Vec<voxfuse_core::math::Pose>) {
    let calib = Calibration::shared(default_intrinsics(320, 240));
    let settings = EngineSettings {
        scene: SceneParams {
            voxel_size: 0.01,
            mu: 0.04,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut engine = Engine::<VoxelS>::new(settings, calib).unwrap();
    let poses = orbit_poses(12, Scene::demo_target(), 1.4, 0.5, 0.0, 1.0);
    for p in &poses[..6] {
        engine.process_view(render_view(&Scene::demo(), &calib, p), Some(*p)).unwrap();
    }
    (engine, calib, poses)
}

fn frames(c: &mut Criterion) {
    let (engine, calib, poses) = engine_320x240();
    let view = render_view(&Scene::demo(), &calib, &poses[6]);
    c.bench_function("fuse frame 320x240 (known pose)", |b| {
        let mut engine = Engine::<VoxelS>::new(*engine.settings(), calib).unwrap();
        b.iter(|| engine.process_view(view.clone(), Some(poses[6])).unwrap())
    });

    let maps = engine.maps().unwrap().clone();
    let settings = TrackerSettings::default();
    let pyramid = build_depth_pyramid(&view.depth, settings.num_hierarchy_levels);
    let schedule: Vec<_> = (0..settings.num_hierarchy_levels)
        .rev()
        .map(|l| (pyramid.level(l), calib.depth.downsampled(l), l))
        .collect();
    c.bench_function("icp track 320x240", |b| {
        b.iter(|| icp_track(&schedule, &maps, &poses[5], &settings).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = hash_table, frames
}
criterion_main!(benches);
