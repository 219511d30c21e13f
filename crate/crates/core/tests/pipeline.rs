use std::collections::BTreeSet;

use voxfuse_core::allocation::Frustum;
use voxfuse_core::index::{HashConfig, HashVolume};
use voxfuse_core::integration::SceneParams;
use voxfuse_core::pipeline::{Engine, EngineSettings};
use voxfuse_core::swap::SwapSettings;
use voxfuse_core::view::synth::{default_intrinsics, orbit_poses, render_view, Scene};
use voxfuse_core::view::Calibration;
use voxfuse_core::voxel::VoxelS;

fn settings(swap: bool) -> EngineSettings {
    EngineSettings {
        scene: SceneParams {
            voxel_size: 0.01,
            mu: 0.04,
            ..Default::default()
        },
        hash: HashConfig {
            bucket_count: 1 << 16,
            bucket_size: 2,
            excess_count: 1 << 13,
            block_count: 1 << 14,
        },
        use_swapping: swap,
        swap: SwapSettings {
            budget: 8,
            frustum: Frustum::default().with_margin(16.0),
            ..Default::default()
        },
        ..Default::default()
    }
}

fn block_set(v: &HashVolume<VoxelS>) -> BTreeSet<[i32; 3]> {
    v.table()
        .allocated_entries()
        .map(|e| {
            let p = v.table().entry(e).block_pos();
            [p.x, p.y, p.z]
        })
        .collect()
}

#[test]
fn swapping_respects_budget_and_state_invariants() {
    let calib = Calibration::shared(default_intrinsics(160, 120));
    let scene = Scene::demo();
    let mut on = Engine::<VoxelS>::new(settings(true), calib).unwrap();
    let mut off = Engine::<VoxelS>::new(settings(false), calib).unwrap();
    let poses = orbit_poses(24, Scene::demo_target(), 1.4, 0.5, 0.0, std::f64::consts::PI);
    for pose in poses.iter().chain(poses.iter().rev()) {
        let view = render_view(&scene, &calib, pose);
        let s = on.process_view(view.clone(), Some(*pose)).unwrap();
        off.process_view(view, Some(*pose)).unwrap();
        assert!(s.swap.swapped_in <= 8 && s.swap.swapped_out <= 8);
        on.swap_cache().unwrap().check_invariants(on.hash_volume().unwrap()).unwrap();
    }
    assert!(on.swap_cache().unwrap().totals().swapped_out > 0);
    for m in on.flush_swap().unwrap() {
        assert!(m.swapped_in <= 8 && m.swapped_out <= 8);
    }
    on.swap_cache().unwrap().check_invariants(on.hash_volume().unwrap()).unwrap();
    let (a, b) = (on.hash_volume().unwrap(), off.hash_volume().unwrap());
    assert_eq!(block_set(a), block_set(b));
    // no observation is lost or counted twice
    for e in b.table().allocated_entries() {
        let p = b.table().entry(e).block_pos();
        let (wa, wb): (Vec<u8>, Vec<u8>) = a
            .block_at(p)
            .unwrap()
            .iter()
            .zip(b.block_at(p).unwrap())
            .map(|(x, y)| (x.w_depth, y.w_depth))
            .unzip();
        assert_eq!(wa, wb, "block {p:?}");
    }
}

#[test]
fn raycast_normals_are_unit_length() {
    let calib = Calibration::shared(default_intrinsics(160, 120));
    let scene = Scene::demo();
    let mut engine = Engine::<VoxelS>::new(settings(false), calib).unwrap();
    for pose in orbit_poses(4, Scene::demo_target(), 1.4, 0.5, 0.0, 0.3) {
        engine.process_view(render_view(&scene, &calib, &pose), Some(pose)).unwrap();
    }
    let maps = engine.maps().unwrap();
    let mut valid = 0;
    for (p, n) in maps.points.data().iter().zip(maps.normals.data()) {
        if p.w > 0.0 {
            valid += 1;
            assert!((n.xyz().norm() - 1.0).abs() < 1e-4);
        } else {
            assert_eq!(n.w, 0.0);
        }
    }
    assert!(valid > 5000);
}

#[test]
fn dense_and_hash_agree_when_blocks_exist_from_the_start() {
    // one pose repeated: every hash block is allocated by the first frame
    // and visible in all of them
    let calib = Calibration::shared(default_intrinsics(160, 120));
    let scene = Scene::demo();
    let pose = orbit_poses(1, Scene::demo_target(), 1.4, 0.5, 0.3, 0.3)[0];
    let mut hash = Engine::<VoxelS>::new(settings(false), calib).unwrap();
    let mut dense = Engine::<VoxelS>::new(
        EngineSettings {
            backend: voxfuse_core::pipeline::Backend::Dense,
            dense: voxfuse_core::index::DenseConfig {
                size: nalgebra::Vector3::new(256, 256, 256),
                offset: nalgebra::Vector3::new(-128, -128, 20),
            },
            ..settings(false)
        },
        calib,
    )
    .unwrap();
    for _ in 0..3 {
        let view = render_view(&scene, &calib, &pose);
        hash.process_view(view.clone(), Some(pose)).unwrap();
        dense.process_view(view, Some(pose)).unwrap();
    }
    let hv = hash.hash_volume().unwrap();
    let mut compared = 0;
    for e in hv.table().allocated_entries() {
        let block = hv.table().entry(e).block_pos();
        for (i, v) in hv.block_of_entry(e).unwrap().iter().enumerate() {
            let p = block * 8 + voxfuse_core::index::local_offset(i);
            if let Some(d) = dense.read_voxel(p) {
                assert_eq!(d, *v, "voxel {p:?}");
                compared += 1;
            }
        }
    }
    assert!(compared > 100_000);
}
