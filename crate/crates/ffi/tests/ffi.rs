use std::ffi::{CStr, CString};
use std::ptr;

use stratformer_ffi::*;

fn last_error() -> String {
    let p = st_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn tiny_cloud() -> *mut StCloud {
    let positions = [
        0.0, 0.0, 0.0, 0.05, 0.0, 0.0, 0.0, 0.05, 0.0, 0.3, 0.3, 0.1, 0.32, 0.3, 0.1, 0.3, 0.33, 0.12,
    ];
    let features = [0.2; 18];
    let labels = [0u32, 0, 0, 1, 1, 1];
    let mut cloud = ptr::null_mut();
    let s = unsafe { st_cloud_new(positions.as_ptr(), 6, features.as_ptr(), 3, labels.as_ptr(), &mut cloud) };
    assert_eq!(s, StStatus::Ok);
    cloud
}

#[test]
fn cloud_round_trip_through_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("c.bin").to_str().unwrap()).unwrap();
    let cloud = tiny_cloud();
    unsafe {
        assert_eq!(st_cloud_write(cloud, path.as_ptr()), StStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(st_cloud_read(path.as_ptr(), &mut back), StStatus::Ok);
        let mut n = 0;
        assert_eq!(st_cloud_len(back, &mut n), StStatus::Ok);
        assert_eq!(n, 6);
        let mut labels = [9u32; 6];
        assert_eq!(st_cloud_labels(back, labels.as_mut_ptr(), 6), StStatus::Ok);
        assert_eq!(labels, [0, 0, 0, 1, 1, 1]);
        assert_eq!(st_cloud_labels(back, labels.as_mut_ptr(), 5), StStatus::BufferTooSmall);
        st_cloud_free(back);
        st_cloud_free(cloud);
    }
}

#[test]
fn errors_are_reported_not_raised() {
    unsafe {
        let mut out = ptr::null_mut();
        assert_eq!(st_cloud_read(ptr::null(), &mut out), StStatus::NullPointer);
        assert!(last_error().contains("path"));
        let missing = CString::new("/nonexistent/cloud.bin").unwrap();
        assert_eq!(st_cloud_read(missing.as_ptr(), &mut out), StStatus::Io);
        let bad = CString::new("huge").unwrap();
        let mut model = ptr::null_mut();
        assert_eq!(st_model_new(bad.as_ptr(), 0, &mut model), StStatus::Config);
        assert!(last_error().contains("huge"));
        assert!(model.is_null());
        let feats = [0.0; 3];
        let pos = [f64::NAN, 0.0, 0.0];
        assert_eq!(
            st_cloud_new(pos.as_ptr(), 1, feats.as_ptr(), 3, ptr::null(), &mut out),
            StStatus::InvalidArgument
        );
        st_cloud_free(ptr::null_mut());
        st_model_free(ptr::null_mut());
    }
}

#[test]
fn train_predict_and_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = CString::new(dir.path().join("m.stw").to_str().unwrap()).unwrap();
    let toy = CString::new("toy").unwrap();
    let cloud = tiny_cloud();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(st_model_new(toy.as_ptr(), 3, &mut model), StStatus::Ok);
        let mut k = 0;
        assert_eq!(st_model_num_classes(model, &mut k), StStatus::Ok);
        assert_eq!(k, 2);
        let mut losses = [0.0f64; 30];
        assert_eq!(st_model_train(model, cloud, 30, 1e-2, 1, false, losses.as_mut_ptr()), StStatus::Ok);
        assert!(losses[29] < losses[0], "{losses:?}");
        let mut pred = [0u32; 6];
        assert_eq!(st_model_predict(model, cloud, pred.as_mut_ptr(), 6), StStatus::Ok);
        assert_eq!(st_model_save(model, ckpt.as_ptr()), StStatus::Ok);

        let mut other = ptr::null_mut();
        assert_eq!(st_model_new(toy.as_ptr(), 99, &mut other), StStatus::Ok);
        assert_eq!(st_model_load(other, ckpt.as_ptr()), StStatus::Ok);
        let mut a = [0f32; 12];
        let mut b = [0f32; 12];
        assert_eq!(st_model_logits(model, cloud, a.as_mut_ptr(), 12), StStatus::Ok);
        assert_eq!(st_model_logits(other, cloud, b.as_mut_ptr(), 12), StStatus::Ok);
        assert_eq!(a, b);
        st_model_free(model);
        st_model_free(other);
        st_cloud_free(cloud);
    }
}

#[test]
fn oracle_and_version() {
    let mut dev = -1.0;
    assert_eq!(unsafe { st_oracle_compare(4, 1, &mut dev) }, StStatus::Ok);
    assert!((0.0..1e-10).contains(&dev));
    let v = unsafe { CStr::from_ptr(st_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/stratformer.h")).unwrap();
    for name in [
        "STRATFORMER_H",
        "ST_STATUS_OK = 0",
        "ST_STATUS_PANIC",
        "typedef struct StCloud StCloud",
        "typedef struct StModel StModel",
        "st_last_error(void)",
        "st_cloud_new(",
        "st_model_train(",
        "st_model_free(",
    ] {
        assert!(header.contains(name), "header lacks `{name}`");
    }
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/stratformer.h");
    match std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header])
        .output()
    {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(_) => eprintln!("no C compiler found; skipping"),
    }
}
