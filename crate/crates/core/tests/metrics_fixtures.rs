//! SSIM/MSE on checked-in image pairs against values computed offline with
//! scikit-image (`structural_similarity(..., channel_axis=2, data_range=1.0,
//! gaussian_weights=True, sigma=1.5, use_sample_covariance=False)`).

use std::path::{Path, PathBuf};

use aecodec::data::ImageRecord;
use aecodec::metrics::{mse, psnr, ssim};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/ssim").join(name)
}

fn load(name: &str) -> aecodec::Tensor {
    ImageRecord::open(&fixture(name)).unwrap().to_tensor()
}

const REFERENCE: [(&str, f64, f64); 3] = [
    ("noisy.png", 0.5685132552424853, 0.0022215569688296523),
    ("blur.png", 0.9605487744957966, 0.0003894491256923975),
    ("shift.png", 0.7373659972368193, 0.008262682978056872),
];

#[test]
fn ssim_matches_reference_values() {
    let base = load("base.png");
    for (name, want_ssim, want_mse) in REFERENCE {
        let other = load(name);
        let got = ssim(&base, &other).unwrap();
        assert!((got - want_ssim).abs() < 1e-4, "{name}: ssim {got} vs {want_ssim}");
        let got = mse(&base, &other).unwrap();
        assert!((got - want_mse).abs() < 1e-8, "{name}: mse {got} vs {want_mse}");
    }
}

#[test]
fn identical_fixture_is_perfect() {
    let base = load("base.png");
    assert_eq!(ssim(&base, &base).unwrap(), 1.0);
    assert_eq!(psnr(&base, &base, 1.0).unwrap(), f64::INFINITY);
}
