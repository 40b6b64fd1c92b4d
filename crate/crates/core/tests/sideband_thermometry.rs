//! Sideband thermometry round trips anchored to the measured mode data.

mod common;

use common::*;
use ioncool::thermometry::{fit_sidebands, nbar_from_peaks, SidebandFitOptions};

#[test]
fn weak_probe_ratio_recovers_occupation() {
    let eta = 0.098;
    let pi_time = 1.0 / (2.0 * 0.171 * eta);
    for nbar in [0.08, 0.16, 1.97] {
        let (red, blue) = sideband_pair(&lineshape(nbar, eta), 3270.0, 0.15 * pi_time, None, 0);
        let r = nbar_from_peaks(&red, &blue).unwrap();
        assert!((r.nbar / nbar - 1.0).abs() < 0.03, "{nbar}: {}", r.nbar);
    }
}

#[test]
fn thirty_microsecond_probe_joint_fit() {
    let (red, blue) = sideband_pair(&lineshape(1.97, 0.098), 3270.0, 30.0, None, 0);
    let fit = fit_sidebands(&[red, blue], &SidebandFitOptions::default()).unwrap();
    assert!((fit.nbar / 1.97 - 1.0).abs() < 1e-6, "{}", fit.nbar);
}

#[test]
fn noisy_ground_state_fits_cover_the_truth() {
    for (mode, eta, nbar, seed) in [(3270.0, 0.098, 0.08, 11), (3630.0, 0.082, 0.16, 12)] {
        let (red, blue) = sideband_pair(&lineshape(nbar, eta), mode, 30.0, Some(200), seed);
        let fit = fit_sidebands(&[red, blue], &SidebandFitOptions::default()).unwrap();
        let (e, de) = fit.eta.unwrap();
        assert!((fit.nbar - nbar).abs() < 2.0 * fit.nbar_sigma, "nbar {} +- {}", fit.nbar, fit.nbar_sigma);
        assert!((e - eta).abs() < 2.0 * de, "eta {e} +- {de}");
        assert!(fit.nbar_sigma > 0.0 && de > 0.0);
    }
}

#[test]
fn hot_ions_are_flagged_outside_lamb_dicke() {
    let (red, blue) = sideband_pair(&lineshape(20.0, 0.1), 3270.0, 10.0, None, 0);
    let fit = fit_sidebands(
        &[red, blue],
        &SidebandFitOptions {
            initial_nbar: 15.0,
            ..SidebandFitOptions::default()
        },
    )
    .unwrap();
    assert!(!fit.warnings.is_empty());
}
