use std::ffi::CStr;
use std::process::Command;
use std::ptr;

use aecodec_ffi::*;

fn last_error() -> String {
    let p = aec_last_error_message();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn init_model(seed: u64) -> *mut AecModel {
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { aec_model_init(seed, &mut m) }, AecStatus::Ok);
    m
}

fn gradient_image(w: usize, h: usize) -> Vec<u8> {
    (0..w * h * 3).map(|i| (i * 13 % 251) as u8).collect()
}

fn empty() -> AecBuffer {
    AecBuffer {
        data: ptr::null_mut(),
        len: 0,
    }
}

#[test]
fn encode_decode_roundtrip_both_modes() {
    let m = init_model(3);
    let img = gradient_image(32, 48);
    for (mode, len) in [(AecLatentMode::Float32, 19 + 64 * 3 * 2 * 4), (AecLatentMode::Uint8, 27 + 64 * 3 * 2)] {
        let mut latent = empty();
        let st = unsafe { aec_encode_rgb8(m, img.as_ptr(), 32, 48, mode as u32, &mut latent) };
        assert_eq!(st, AecStatus::Ok);
        assert_eq!(latent.len, len);
        let (mut out, mut w, mut h) = (empty(), 0usize, 0usize);
        let st = unsafe { aec_decode_rgb8(m, latent.data, latent.len, &mut out, &mut w, &mut h) };
        assert_eq!(st, AecStatus::Ok);
        assert_eq!((w, h, out.len), (32, 48, 32 * 48 * 3));
        assert!(aec_last_error_message().is_null());
        unsafe {
            aec_buffer_free(&mut latent);
            aec_buffer_free(&mut out);
        }
        assert!(latent.data.is_null() && latent.len == 0);
    }
    unsafe { aec_model_free(m) };
}

#[test]
fn weights_roundtrip_through_bytes() {
    let m = init_model(9);
    let mut bytes = empty();
    assert_eq!(unsafe { aec_model_save_bytes(m, &mut bytes) }, AecStatus::Ok);
    assert_eq!(unsafe { std::slice::from_raw_parts(bytes.data, 4) }, b"AEW1");
    let mut m2 = ptr::null_mut();
    assert_eq!(unsafe { aec_model_from_bytes(bytes.data, bytes.len, &mut m2) }, AecStatus::Ok);

    let img = gradient_image(16, 16);
    let encode = |model| {
        let mut b = empty();
        assert_eq!(unsafe { aec_encode_rgb8(model, img.as_ptr(), 16, 16, 0, &mut b) }, AecStatus::Ok);
        let v = unsafe { std::slice::from_raw_parts(b.data, b.len) }.to_vec();
        unsafe { aec_buffer_free(&mut b) };
        v
    };
    assert_eq!(encode(m), encode(m2));
    unsafe {
        aec_buffer_free(&mut bytes);
        aec_model_free(m);
        aec_model_free(m2);
    }
}

#[test]
fn errors_map_to_status_codes() {
    let m = init_model(1);
    let img = gradient_image(20, 16);
    let mut out = empty();

    let st = unsafe { aec_encode_rgb8(m, img.as_ptr(), 20, 16, 0, &mut out) };
    assert_eq!(st, AecStatus::Dimension, "{}", last_error());

    let st = unsafe { aec_encode_rgb8(m, img.as_ptr(), 16, 16, 7, &mut out) };
    assert_eq!(st, AecStatus::InvalidArgument);
    assert!(last_error().contains("latent mode"));

    let st = unsafe { aec_encode_rgb8(ptr::null(), img.as_ptr(), 16, 16, 0, &mut out) };
    assert_eq!(st, AecStatus::NullPointer);
    let st = unsafe { aec_encode_rgb8(m, ptr::null(), 16, 16, 0, &mut out) };
    assert_eq!(st, AecStatus::NullPointer);

    let junk = b"AEL1 not really a latent";
    let (mut w, mut h) = (0, 0);
    let st = unsafe { aec_decode_rgb8(m, junk.as_ptr(), junk.len(), &mut out, &mut w, &mut h) };
    assert_eq!(st, AecStatus::Format, "{}", last_error());

    let mut handle = ptr::null_mut();
    let path = c"/nonexistent/weights.aew";
    assert_eq!(unsafe { aec_model_load(path.as_ptr(), &mut handle) }, AecStatus::Io);
    assert!(handle.is_null());

    let bad = b"XXXX";
    assert_eq!(unsafe { aec_model_from_bytes(bad.as_ptr(), 4, &mut handle) }, AecStatus::Format);
    assert!(last_error().contains("AEW1"));
    unsafe {
        aec_model_free(m);
        aec_model_free(ptr::null_mut());
        aec_buffer_free(ptr::null_mut());
    }
}

#[test]
fn decoder_without_decoder_weights_reports_missing_parameter() {
    let full = aecodec::model::init_params(2);
    let (encoder, _) = aecodec::model::split_params(&full).unwrap();
    let bytes = aecodec::codec::encode_weights(&encoder).unwrap();
    let mut m = ptr::null_mut();
    assert_eq!(unsafe { aec_model_from_bytes(bytes.as_ptr(), bytes.len(), &mut m) }, AecStatus::Ok);

    let img = gradient_image(16, 16);
    let mut latent = empty();
    assert_eq!(unsafe { aec_encode_rgb8(m, img.as_ptr(), 16, 16, 1, &mut latent) }, AecStatus::Ok);
    let (mut out, mut w, mut h) = (empty(), 0, 0);
    let st = unsafe { aec_decode_rgb8(m, latent.data, latent.len, &mut out, &mut w, &mut h) };
    assert_eq!(st, AecStatus::MissingParameter, "{}", last_error());
    unsafe {
        aec_buffer_free(&mut latent);
        aec_model_free(m);
    }
}

#[test]
fn metrics_identical_and_shifted() {
    let a = gradient_image(24, 24);
    let mut r = AecMetrics::default();
    assert_eq!(unsafe { aec_metrics_rgb8(a.as_ptr(), a.as_ptr(), 24, 24, &mut r) }, AecStatus::Ok);
    assert_eq!(r.mse, 0.0);
    assert!(r.psnr.is_infinite() && r.psnr > 0.0);
    assert!((r.ssim - 1.0).abs() < 1e-12);

    let b: Vec<u8> = a.iter().map(|v| v.saturating_add(10)).collect();
    assert_eq!(unsafe { aec_metrics_rgb8(a.as_ptr(), b.as_ptr(), 24, 24, &mut r) }, AecStatus::Ok);
    assert!(r.mse > 0.0 && r.psnr.is_finite() && r.ssim < 1.0);
}

#[test]
fn version_is_package_version() {
    let v = unsafe { CStr::from_ptr(aec_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_is_valid_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/aecodec.h");
    let text = std::fs::read_to_string(header).unwrap();
    for sym in ["aec_encode_rgb8", "aec_decode_rgb8", "aec_metrics_rgb8", "aec_buffer_free", "AEC_STATUS_OK", "typedef struct AecModel AecModel;"] {
        assert!(text.contains(sym), "header lacks {sym}");
    }
    // Syntax-check with the system C compiler when one is installed.
    match Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", header]).output() {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(e) => eprintln!("skipping C syntax check: {e}"),
    }
}
