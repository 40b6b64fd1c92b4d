//! Spectrum-fit recovery on synthetic lambda-system scans.

mod common;

use common::*;
use ioncool::lsq::LmOptions;
use ioncool::specfit::{fit_scan, ScanData};

#[test]
fn noise_free_scan_returns_the_generator() {
    let basis = lambda_basis(LAMBDA_FIELD);
    let beams = lambda_beams(true);
    let model = lambda_model(&beams);
    let fit = fit_scan(&basis, &beams, &model, &lambda_clean_scan(), &LmOptions::default()).unwrap();
    for (k, t) in LAMBDA_TRUTH.iter().enumerate() {
        assert!((fit.values[k] - t).abs() <= 1e-6 * t.abs().max(1.0), "{}: {}", fit.names[k], fit.values[k]);
    }
}

#[test]
fn error_bars_are_calibrated() {
    // one-sigma intervals of a correctly weighted fit cover the truth about
    // 68% of the time; 50 repetitions give a binomial spread of ~7%
    let cover = coverage(50, 0.02, 10_000);
    for (k, c) in cover.iter().enumerate() {
        assert!((0.55..=0.85).contains(c), "parameter {k}: coverage {c}");
    }
}

#[test]
fn masking_a_distorted_region_removes_its_bias() {
    // mimic heating on the blue side of a dark resonance by inflating the
    // signal there, then compare the bias of masked and unmasked fits
    // with the statistical error of a 2%-noise scan
    let basis = lambda_basis(LAMBDA_FIELD);
    let beams = lambda_beams(true);
    let mut model = lambda_model(&beams);
    let region = (-15.0, -5.0);
    let clean = lambda_clean_scan();
    let distort = |data: &ScanData| ScanData {
        signal: data
            .x
            .iter()
            .zip(&data.signal)
            .map(|(x, y)| if (region.0..=region.1).contains(x) { 1.3 * y } else { *y })
            .collect(),
        ..data.clone()
    };
    let k = 2;
    assert_eq!(model.names()[k], "offset866");
    let opts = LmOptions::default();
    let biased = fit_scan(&basis, &beams, &model, &distort(&clean), &opts).unwrap();
    model.masks = vec![region];
    let masked = fit_scan(&basis, &beams, &model, &distort(&clean), &opts).unwrap();
    let sigma = fit_scan(&basis, &beams, &model, &distort(&with_noise(&clean, 0.02, 77)), &opts)
        .unwrap()
        .uncertainties[k];
    let bias = (masked.values[k] - LAMBDA_TRUTH[k]).abs();
    assert!(bias < sigma, "masked bias {bias} vs sigma {sigma}");
    assert!((biased.values[k] - LAMBDA_TRUTH[k]).abs() > bias);
}
