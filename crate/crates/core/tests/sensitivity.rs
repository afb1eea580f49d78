use fdot::forward::{self, QuadratureSpec};
use fdot::inversion::{invert, sensitivity, AlphaStrategy, InversionConfig};
use fdot::scenarios::{builtin, Prepared};
use fdot::{Acquisition, Layout, ParamVector};
use nalgebra::DMatrix;

fn small(id: &str) -> (Prepared, QuadratureSpec) {
    let q = QuadratureSpec::default().fixed_volume();
    let mut prep = builtin(id).unwrap().prepare(&q).unwrap();
    let pick = [0usize, 9, 18, 27];
    prep.acquisition = Acquisition::new(
        pick.iter().map(|&k| prep.acquisition.pairs[k]).collect(),
        pick.iter().map(|&k| prep.acquisition.grids[k].clone()).collect(),
    )
    .unwrap();
    (prep, q)
}

fn jacobian(prep: &Prepared, a: &ParamVector, fd_step: f64, q: &QuadratureSpec) -> DMatrix<f64> {
    let cfg = InversionConfig { fd_step, ..InversionConfig::default() };
    sensitivity(a, &prep.acquisition, &prep.optical, q, &cfg, None).unwrap()
}

#[test]
fn concentration_column_is_model_over_concentration() {
    let (prep, q) = small("ex3a");
    let a = &prep.exact;
    let k = forward::measure(a, &prep.acquisition, &prep.optical, &q).unwrap();
    let g = jacobian(&prep, a, 1e-5, &q);
    let col = a.layout.concentration_index();
    let p = a.values[col];
    for (i, v) in k.data.iter().enumerate() {
        let expected = v / p;
        assert!((g[(i, col)] - expected).abs() <= 1e-10 * expected, "row {i}");
    }
}

#[test]
fn central_differences_converge_at_second_order() {
    let (prep, q) = small("ex3a");
    let a = &prep.exact;
    let d1 = jacobian(&prep, a, 4e-3, &q);
    let d2 = jacobian(&prep, a, 2e-3, &q);
    let d3 = jacobian(&prep, a, 1e-3, &q);
    // depth of the top face and of the bottom face
    for s in [4usize, 5] {
        let num = (d1.column(s) - d2.column(s)).norm();
        let den = (d2.column(s) - d3.column(s)).norm();
        let ratio = num / den;
        assert!((3.0..5.0).contains(&ratio), "column {s}: ratio {ratio}");
    }
}

#[test]
fn absorption_column_is_negative() {
    let (prep, q) = small("ex3b");
    assert!(matches!(prep.exact.layout, Layout::Joint9));
    let g = jacobian(&prep, &prep.exact, 1e-5, &q);
    for i in 0..g.nrows() {
        assert!(g[(i, 1)] < 0.0, "row {i}: {}", g[(i, 1)]);
    }
    // direct evaluation at mu_a +- 1e-3
    let mut lo = prep.exact.clone();
    let mut hi = prep.exact.clone();
    lo.values[1] -= 1e-3;
    hi.values[1] += 1e-3;
    let k_lo = forward::measure(&lo, &prep.acquisition, &prep.optical, &q).unwrap();
    let k_hi = forward::measure(&hi, &prep.acquisition, &prep.optical, &q).unwrap();
    assert!(k_lo.data.iter().zip(&k_hi.data).all(|(l, h)| h < l));
}

#[test]
fn large_eta_stops_after_one_update() {
    let (prep, q) = small("ex3a");
    let h = prep.exact_data(&q).unwrap();
    let cfg = InversionConfig {
        eta: 1e6,
        alpha: AlphaStrategy::Fixed { alpha: 1.0 },
        ..InversionConfig::default()
    };
    let r = invert(&h, prep.initial.as_ref().unwrap(), &prep.optical, &q, &cfg).unwrap();
    assert_eq!(r.iterations, 1);
    assert!(r.converged);
    assert_eq!(r.history.len(), 1);
}
