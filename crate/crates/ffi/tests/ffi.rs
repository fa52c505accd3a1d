use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use lidar_oss::checkpoint::Checkpoint;
use lidar_oss::io::generate_scene;
use lidar_oss::losses::ClassMeanState;
use lidar_oss::network::{NetConfig, Network};
use lidar_oss::openset::{segment, OpenSetConfig};
use lidar_oss::voxel::{voxelize, CylGrid, KnownClasses};
use lidar_oss_ffi::*;

fn write_checkpoint(dir: &Path) -> (PathBuf, Checkpoint) {
    let net = Network::new(NetConfig {
        num_classes: 4,
        seed: 3,
        ..NetConfig::default()
    })
    .unwrap();
    let known = KnownClasses::new(vec![10, 40, 50, 80]).unwrap();
    let ck = Checkpoint::new(net, known, ClassMeanState::new(4, 4)).unwrap();
    let path = dir.join("model.ckpt");
    ck.save(&path).unwrap();
    (path, ck)
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(lidar_oss_last_error()) }.to_string_lossy().into_owned()
}

fn load(path: &Path) -> *mut LidarOssModel {
    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    assert_eq!(unsafe { lidar_oss_model_load(c.as_ptr(), &mut model) }, LidarOssStatus::Ok);
    assert!(!model.is_null());
    model
}

#[test]
fn version_matches_package() {
    let v = unsafe { CStr::from_ptr(lidar_oss_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn infer_matches_library() {
    let dir = tempfile::tempdir().unwrap();
    let (path, ck) = write_checkpoint(dir.path());
    let model = load(&path);
    assert_eq!(unsafe { lidar_oss_model_num_classes(model) }, 4);

    let mut ids = [0u16; 4];
    let mut n = 0;
    let st = unsafe { lidar_oss_model_known_classes(model, ids.as_mut_ptr(), 4, &mut n) };
    assert_eq!(st, LidarOssStatus::Ok);
    assert_eq!(&ids[..n], &[10, 40, 50, 80]);
    let st = unsafe { lidar_oss_model_known_classes(model, ids.as_mut_ptr(), 2, &mut n) };
    assert_eq!(st, LidarOssStatus::BufferTooSmall);
    assert_eq!(n, 4);

    let (cloud, _) = generate_scene(&Default::default()).unwrap();
    let flat: Vec<f32> = cloud.points.iter().flat_map(|p| [p.x, p.y, p.z, p.intensity]).collect();
    let mut labels = vec![0u16; cloud.len()];
    let mut scores = vec![0f32; cloud.len()];
    let st = unsafe {
        lidar_oss_infer(model, flat.as_ptr(), cloud.len(), labels.as_mut_ptr(), scores.as_mut_ptr())
    };
    assert_eq!(st, LidarOssStatus::Ok, "{}", last_error());

    let mapping = voxelize(&cloud, &CylGrid::default());
    let (f_s, f_o) = ck.net.infer(&cloud, &mapping);
    let res = segment(&f_s, &f_o, &mapping, &ck.known, &OpenSetConfig::default());
    assert_eq!(labels, res.point_labels);
    let expect: Vec<f32> = res.point_scores.iter().map(|&s| s as f32).collect();
    assert_eq!(scores, expect);
    unsafe { lidar_oss_model_free(model) };
}

#[test]
fn errors_are_reported_not_panicked() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = write_checkpoint(dir.path());
    let mut model = ptr::null_mut();

    let missing = CString::new(dir.path().join("nope").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { lidar_oss_model_load(missing.as_ptr(), &mut model) }, LidarOssStatus::Io);
    assert!(last_error().contains("nope"));

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a model").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { lidar_oss_model_load(junk.as_ptr(), &mut model) }, LidarOssStatus::Format);
    assert_eq!(unsafe { lidar_oss_model_load(ptr::null(), &mut model) }, LidarOssStatus::NullPointer);

    let model = load(&path);
    assert_eq!(unsafe { lidar_oss_model_set_openset(model, 0.4, 40) }, LidarOssStatus::Config);
    assert_eq!(unsafe { lidar_oss_model_set_openset(model, f64::NAN, 1) }, LidarOssStatus::Config);
    assert_eq!(unsafe { lidar_oss_model_set_openset(model, 0.4, 1) }, LidarOssStatus::Ok);
    assert_eq!(last_error(), "");
    assert_eq!(
        unsafe { lidar_oss_model_set_grid(model, 5.0, 1.0, -1.0, 1.0, 4, 4, 4) },
        LidarOssStatus::Config
    );
    let bad = [1.0f32, f32::NAN, 0.0, 0.5];
    let mut label = [0u16];
    let st = unsafe { lidar_oss_infer(model, bad.as_ptr(), 1, label.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(st, LidarOssStatus::InvalidArgument);
    assert_eq!(unsafe { lidar_oss_infer(ptr::null(), bad.as_ptr(), 1, ptr::null_mut(), ptr::null_mut()) }, LidarOssStatus::NullPointer);
    unsafe { lidar_oss_model_free(model) };
    unsafe { lidar_oss_model_free(ptr::null_mut()) };
}

#[test]
fn outside_points_are_unknown_with_infinite_score() {
    let dir = tempfile::tempdir().unwrap();
    let (path, _) = write_checkpoint(dir.path());
    let model = load(&path);
    assert_eq!(unsafe { lidar_oss_model_set_openset(model, 0.5, 7) }, LidarOssStatus::Ok);
    let pts = [5.0f32, 0.0, -1.0, 0.3, 500.0, 0.0, 0.0, 0.3];
    let mut labels = [0u16; 2];
    let mut scores = [0f32; 2];
    let st = unsafe { lidar_oss_infer(model, pts.as_ptr(), 2, labels.as_mut_ptr(), scores.as_mut_ptr()) };
    assert_eq!(st, LidarOssStatus::Ok);
    assert_eq!(labels[1], 7);
    assert_eq!(scores[1], f32::INFINITY);
    assert!(scores[0].is_finite());
    unsafe { lidar_oss_model_free(model) };
}

/// Compiles a C program against the generated header and the static
/// library. Skipped when no C compiler is installed.
#[test]
fn c_program_links_against_header() {
    if Command::new("cc").arg("--version").output().is_err() {
        eprintln!("no C compiler; skipping");
        return;
    }
    let exe = std::env::current_exe().unwrap();
    let target_dir = exe.parent().unwrap().parent().unwrap();
    let lib = target_dir.join("liblidar_oss_ffi.a");
    assert!(lib.exists(), "static library not built at {}", lib.display());
    let include = Path::new(env!("CARGO_MANIFEST_DIR")).join("include");
    let dir = tempfile::tempdir().unwrap();
    let (ckpt, _) = write_checkpoint(dir.path());
    let src = dir.path().join("main.c");
    std::fs::write(
        &src,
        r#"
#include <stdio.h>
#include "lidar_oss.h"
int main(int argc, char **argv) {
    LidarOssModel *m = NULL;
    if (lidar_oss_model_load(argv[1], &m) != LIDAR_OSS_STATUS_OK) {
        fprintf(stderr, "%s\n", lidar_oss_last_error());
        return 1;
    }
    float pts[8] = {5.0f, 0.0f, -1.0f, 0.3f, 0.0f, 8.0f, 0.5f, 0.6f};
    uint16_t labels[2];
    float scores[2];
    if (lidar_oss_infer(m, pts, 2, labels, scores) != LIDAR_OSS_STATUS_OK) return 2;
    printf("%s %u %u %u\n", lidar_oss_version(), lidar_oss_model_num_classes(m), labels[0], labels[1]);
    lidar_oss_model_free(m);
    return 0;
}
"#,
    )
    .unwrap();
    let bin = dir.path().join("probe");
    let status = Command::new("cc")
        .arg(&src)
        .arg("-I")
        .arg(&include)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let out = Command::new(&bin).arg(&ckpt).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with(&format!("{} 4 ", env!("CARGO_PKG_VERSION"))), "{text}");
}
