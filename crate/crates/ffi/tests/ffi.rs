use std::ffi::{c_char, CStr, CString};
use std::ptr;

use fcmae::fc::{FcMatrix, Parcellation};
use fcmae::mae::{save_checkpoint, MaeConfig, MaeModel, Pooling};
use fcmae_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as c_char; 256];
    let n = unsafe { fcmae_last_error_message(buf.as_mut_ptr(), buf.len()) };
    assert!(n > 0);
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_str().unwrap().to_string()
}

fn small_model() -> MaeModel {
    let cfg = MaeConfig {
        embed_dim: 8,
        decoder_dim: 4,
        epochs: 2,
        warmup_epochs: 1,
        ..MaeConfig::desk()
    };
    MaeModel::new(cfg, Parcellation::contiguous(&[4, 4, 4]).unwrap()).unwrap()
}

fn toy_fc(r: usize) -> FcMatrix {
    let mut v = vec![0.0; r * r];
    for i in 0..r {
        for j in 0..r {
            v[i * r + j] = if i == j { 1.0 } else { 0.3 * (-((i as f64 - j as f64).abs()) / 3.0).exp() };
        }
    }
    FcMatrix::new(r, v).unwrap()
}

#[test]
fn load_encode_free_matches_the_library() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let model = small_model();
    save_checkpoint(&model, &path).unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    let mut handle = ptr::null_mut();
    assert_eq!(unsafe { fcmae_model_load(cpath.as_ptr(), &mut handle) }, FcmaeStatus::Ok);
    assert!(!handle.is_null());
    unsafe {
        assert_eq!(fcmae_model_embed_dim(handle), 8);
        assert_eq!(fcmae_model_region_count(handle), 12);
        assert_eq!(fcmae_model_param_count(handle), model.param_count());
    }
    let fc = toy_fc(12);
    for (code, pooling) in [(FcmaePooling::Cls, Pooling::Cls), (FcmaePooling::Mean, Pooling::Mean)] {
        let mut out = vec![0.0; 8];
        let status =
            unsafe { fcmae_model_encode(handle, fc.as_slice().as_ptr(), 12, code as u32, out.as_mut_ptr(), out.len()) };
        assert_eq!(status, FcmaeStatus::Ok);
        assert_eq!(out, model.encode_fc(&fc, pooling).unwrap());
    }
    let mut short = vec![0.0; 4];
    let status = unsafe { fcmae_model_encode(handle, fc.as_slice().as_ptr(), 12, 0, short.as_mut_ptr(), 4) };
    assert_eq!(status, FcmaeStatus::BufferTooSmall);
    let mut out = vec![0.0; 8];
    let status = unsafe { fcmae_model_encode(handle, fc.as_slice().as_ptr(), 12, 7, out.as_mut_ptr(), 8) };
    assert_eq!(status, FcmaeStatus::InvalidArgument);
    assert!(last_error().contains("pooling"));
    let wrong = toy_fc(6);
    let status = unsafe { fcmae_model_encode(handle, wrong.as_slice().as_ptr(), 6, 0, out.as_mut_ptr(), 8) };
    assert_ne!(status, FcmaeStatus::Ok);
    unsafe { fcmae_model_free(handle) };
    unsafe { fcmae_model_free(ptr::null_mut()) };
}

#[test]
fn load_errors_are_reported() {
    let mut handle = ptr::null_mut();
    let missing = CString::new("/nonexistent/model.ckpt").unwrap();
    assert_eq!(unsafe { fcmae_model_load(missing.as_ptr(), &mut handle) }, FcmaeStatus::Io);
    assert!(handle.is_null());
    assert!(last_error().contains("nonexistent"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("junk.ckpt");
    std::fs::write(&path, b"not a checkpoint").unwrap();
    let cpath = CString::new(path.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { fcmae_model_load(cpath.as_ptr(), &mut handle) }, FcmaeStatus::Corrupt);
    assert_eq!(unsafe { fcmae_model_load(ptr::null(), &mut handle) }, FcmaeStatus::NullPointer);
    unsafe {
        assert_eq!(fcmae_model_embed_dim(ptr::null()), 0);
    }
}

#[test]
fn statistics_helpers() {
    let y = [1.0, 2.0, 3.0, 4.0];
    let yhat = [2.0, 4.0, 6.0, 8.5];
    let mut r = 0.0;
    assert_eq!(unsafe { fcmae_pearson(y.as_ptr(), yhat.as_ptr(), 4, &mut r) }, FcmaeStatus::Ok);
    assert_eq!(r, fcmae::eval::pearson(&y, &yhat).unwrap());
    let flat = [1.0; 4];
    assert_eq!(unsafe { fcmae_pearson(y.as_ptr(), flat.as_ptr(), 4, &mut r) }, FcmaeStatus::Numeric);

    let nulls: Vec<f64> = (0..100).map(|i| i as f64 / 200.0).collect();
    let mut p = 0.0;
    assert_eq!(unsafe { fcmae_permutation_p(0.9, nulls.as_ptr(), 100, &mut p) }, FcmaeStatus::Ok);
    assert_eq!(p, 1.0 / 101.0);
    assert_eq!(
        unsafe { fcmae_permutation_p(0.9, ptr::null(), 0, &mut p) },
        FcmaeStatus::InvalidArgument
    );
    assert_eq!(unsafe { fcmae_pearson(ptr::null(), yhat.as_ptr(), 4, &mut r) }, FcmaeStatus::NullPointer);
}

#[test]
fn khatri_rao_layout() {
    let a = [1.0, 2.0, 3.0, 4.0];
    let b = [5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
    let mut out = vec![0.0; 12];
    let status = unsafe { fcmae_khatri_rao(a.as_ptr(), 2, b.as_ptr(), 3, 2, out.as_mut_ptr(), 12) };
    assert_eq!(status, FcmaeStatus::Ok);
    assert_eq!(out, [5.0, 12.0, 7.0, 16.0, 9.0, 20.0, 15.0, 24.0, 21.0, 32.0, 27.0, 40.0]);
    let status = unsafe { fcmae_khatri_rao(a.as_ptr(), 2, b.as_ptr(), 3, 2, out.as_mut_ptr(), 11) };
    assert_eq!(status, FcmaeStatus::BufferTooSmall);
}

#[test]
fn version_and_error_buffer_truncation() {
    let v = unsafe { CStr::from_ptr(fcmae_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
    let mut p = 0.0;
    unsafe { fcmae_permutation_p(0.0, ptr::null(), 0, &mut p) };
    let full = unsafe { fcmae_last_error_message(ptr::null_mut(), 0) };
    let mut tiny = [1 as c_char; 4];
    assert_eq!(unsafe { fcmae_last_error_message(tiny.as_mut_ptr(), 4) }, full);
    assert_eq!(tiny[3], 0);
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/fcmae.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in ["fcmae_model_load", "fcmae_model_encode", "fcmae_khatri_rao", "FCMAE_STATUS_OK"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(status) = std::process::Command::new("cc").args(["-fsyntax-only", "-x", "c", header]).status() else {
        return;
    };
    assert!(status.success());
}
