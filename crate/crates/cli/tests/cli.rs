use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use voxfuse_core::view::pnm::{save_pgm16, save_ppm};
use voxfuse_core::view::synth::{default_intrinsics, orbit_poses, render_view, Scene};
use voxfuse_core::view::{depth_to_disparity, Calibration};

fn voxfuse(args: &[&std::ffi::OsStr]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_voxfuse")).args(args).output().unwrap()
}

fn calibration(dir: &Path) -> (Calibration, PathBuf) {
    let calib = Calibration::shared(default_intrinsics(160, 120));
    let path = dir.join("calib.txt");
    std::fs::write(&path, calib.to_text()).unwrap();
    (calib, path)
}

fn write_frames(dir: &Path, calib: &Calibration, count: usize) {
    let scene = Scene::demo();
    for (i, pose) in orbit_poses(count, Scene::demo_target(), 1.4, 0.5, 0.3, 0.8).iter().enumerate() {
        let view = render_view(&scene, calib, pose);
        let disparity = view
            .depth
            .map(|&d| if d > 0.0 { depth_to_disparity(d, calib.disparity_a, calib.disparity_b, calib.depth.fx) } else { 0 });
        save_pgm16(dir.join(format!("{i:04}.pgm")), &disparity).unwrap();
        save_ppm(dir.join(format!("{i:04}.ppm")), view.rgb.as_ref().unwrap()).unwrap();
    }
}

fn stats(out: &Path) -> Vec<Value> {
    std::fs::read_to_string(out.join("stats.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn summary(out: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap()
}

#[test]
fn synthetic_orbit_stays_on_track() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, calib) = calibration(tmp.path());
    let out = tmp.path().join("out");
    let o = voxfuse(&[
        calib.as_os_str(),
        "--output".as_ref(),
        out.as_os_str(),
        "--voxel-size".as_ref(),
        "0.01".as_ref(),
        "--mu".as_ref(),
        "0.04".as_ref(),
        "--frames".as_ref(),
        "0..12".as_ref(),
        "--render-stride".as_ref(),
        "5".as_ref(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("12 frames processed"));
    let s = summary(&out);
    assert_eq!(s["synthetic"], true);
    assert_eq!(s["processed"], 12);
    assert_eq!(s["tracking_failures"], 0);
    assert!(s["max_translation_error"].as_f64().unwrap() < 0.01);
    let rows = stats(&out);
    assert_eq!(rows.len(), 12);
    for row in &rows[1..] {
        assert!(row["ground_truth"]["translation_error"].as_f64().unwrap() < 0.01, "{row}");
    }
    for i in [5, 10] {
        assert!(out.join(format!("render_{i:04}.ppm")).exists());
    }
    assert_eq!(std::fs::read_to_string(out.join("timings.jsonl")).unwrap().lines().count(), 12);
}

#[test]
fn missing_calibration_is_an_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = voxfuse(&[tmp.path().join("nope.txt").as_os_str(), "-o".as_ref(), out.as_os_str()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.txt"));
    assert!(!out.exists());
}

#[test]
fn recorded_frames_with_range_and_swapping() {
    let tmp = tempfile::tempdir().unwrap();
    let (calib, calib_path) = calibration(tmp.path());
    write_frames(tmp.path(), &calib, 8);
    let out = tmp.path().join("out");
    let o = voxfuse(&[
        calib_path.as_os_str(),
        tmp.path().as_os_str(),
        "-o".as_ref(),
        out.as_os_str(),
        "--voxel-size".as_ref(),
        "0.01".as_ref(),
        "--mu".as_ref(),
        "0.04".as_ref(),
        "--frames".as_ref(),
        "2..7".as_ref(),
        "--swap".as_ref(),
        "on".as_ref(),
        "--swap-buffer".as_ref(),
        "16".as_ref(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = stats(&out);
    let frames: Vec<u64> = rows.iter().map(|r| r["frame"].as_u64().unwrap()).collect();
    assert_eq!(frames, [2, 3, 4, 5, 6]);
    assert_eq!(rows[0]["tracking"]["status"], "skipped");
    for row in &rows {
        if row != &rows[0] {
            assert_eq!(row["tracking"]["status"], "ok", "{row}");
        }
        assert!(row["swap"]["swapped_in"].as_u64().unwrap() <= 16);
        assert!(row["swap"]["swapped_out"].as_u64().unwrap() <= 16);
    }
    assert_eq!(summary(&out)["synthetic"], false);
    assert!(out.join("host_blocks.bin").exists());
}

#[test]
fn corrupt_frame_is_skipped_unless_strict() {
    let tmp = tempfile::tempdir().unwrap();
    let (calib, calib_path) = calibration(tmp.path());
    write_frames(tmp.path(), &calib, 4);
    std::fs::write(tmp.path().join("0002.pgm"), b"P5\n1 1\n").unwrap();

    let out = tmp.path().join("lenient");
    let o = voxfuse(&[calib_path.as_os_str(), tmp.path().as_os_str(), "-o".as_ref(), out.as_os_str()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = summary(&out);
    assert_eq!(s["processed"], 3);
    assert_eq!(s["skipped"], serde_json::json!([2]));

    let out = tmp.path().join("strict");
    let o = voxfuse(&[
        calib_path.as_os_str(),
        tmp.path().as_os_str(),
        "-o".as_ref(),
        out.as_os_str(),
        "--strict".as_ref(),
    ]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains('2'));
}

#[test]
fn bad_arguments_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, calib) = calibration(tmp.path());
    for args in [["--frames", "5..2"], ["--backend", "octree"], ["--tracker", "sift"]] {
        let mut all = vec![calib.as_os_str()];
        all.extend(args.iter().map(std::ffi::OsStr::new));
        assert!(!voxfuse(&all).status.success(), "{args:?}");
    }
}
