use fdot::forward::{PeakConstants, QuadratureSpec};
use fdot::peaks::{self, ScanGrid};
use fdot::{BoundaryPoint, OpticalParams, SdPair, Target};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn peak_time_and_depth_round_trip() {
    let p = OpticalParams::reference();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let half = rng.gen_range(0.1..15.0);
        let depth = rng.gen_range(0.2..30.0);
        let pair = SdPair::new(BoundaryPoint::new(-half, 0.0), BoundaryPoint::new(half, 0.0)).unwrap();
        let pc = PeakConstants::new(&pair, [0.0, 0.0, depth], &p);
        let t = peaks::peak_time_approx(&pc, &p);
        let back = peaks::depth_from_peak_time(t, 2.0 * half, &p).unwrap();
        assert!((back - depth).abs() <= 1e-12 * depth, "{depth} -> {back}");
    }
}

#[test]
fn intensity_and_concentration_round_trip() {
    let p = OpticalParams::reference();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..1000 {
        let pair = SdPair::new(
            BoundaryPoint::new(rng.gen_range(-10.0..0.0), rng.gen_range(-5.0..5.0)),
            BoundaryPoint::new(rng.gen_range(0.0..10.0), rng.gen_range(-5.0..5.0)),
        )
        .unwrap();
        let center = [rng.gen_range(-3.0..3.0), rng.gen_range(-3.0..3.0), rng.gen_range(1.0..10.0)];
        let pc = PeakConstants::new(&pair, center, &p);
        let t = peaks::peak_time_approx(&pc, &p);
        let conc = 10f64.powf(rng.gen_range(-3.0..6.0));
        let u = peaks::peak_intensity_approx(&pc, t, conc, &p);
        let back = peaks::concentration_from_peak(u, &pc, t, &p);
        assert!((back - conc).abs() <= 1e-12 * conc, "{conc} -> {back}");
    }
}

#[test]
fn point_target_is_localized_from_a_symmetric_scan() {
    let p = OpticalParams::reference();
    let q = QuadratureSpec::default();
    let target = Target::Point { center: [0.0, 0.0, 5.0], concentration: 1e6 };
    let scan = ScanGrid::square(BoundaryPoint::new(0.0, 0.0), 5, 1.0, 6.0).unwrap();
    let times: Vec<f64> = (1..=400).map(f64::from).collect();
    let samples = peaks::sample_scan(&scan, &target, &times, &p, &q).unwrap();
    let loc = peaks::localize(&scan, &samples, &p).unwrap();
    assert_eq!(&loc.center[..2], &[0.0, 0.0]);
    assert!((loc.center[2] - 5.0).abs() <= 0.02 * 5.0, "depth {}", loc.center[2]);
    assert!((loc.concentration - 1e6).abs() <= 0.1 * 1e6, "P {}", loc.concentration);
    assert!(!loc.asymmetry_warning);
}

#[test]
fn empty_scan_is_rejected() {
    let scan = ScanGrid::new(vec![], 6.0, [1.0, 0.0]).unwrap();
    assert!(peaks::locate_horizontal(&scan, &[]).is_err());
}
