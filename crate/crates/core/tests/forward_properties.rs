use fdot::forward::{self, QuadratureSpec};
use fdot::{BoundaryPoint, Cuboid, OpticalParams, SdPair, Target};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Config {
    pair: SdPair,
    target: Target,
    t_ps: f64,
}

fn random_configs(n: usize, seed: u64) -> Vec<Config> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|k| {
            let pair = SdPair::new(
                BoundaryPoint::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)),
                BoundaryPoint::new(rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)),
            )
            .unwrap();
            let center = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(2.0..8.0)];
            let target = if k % 2 == 0 {
                Target::Point { center, concentration: rng.gen_range(0.1..10.0) }
            } else {
                let half = rng.gen_range(0.1..1.0);
                Target::Cuboid(
                    Cuboid::new(
                        [center[0] - half, center[1] - half, center[2] - half],
                        [center[0] + half, center[1] + half, center[2] + half],
                        rng.gen_range(0.1..10.0),
                    )
                    .unwrap(),
                )
            };
            Config { pair, target, t_ps: rng.gen_range(50.0..500.0) }
        })
        .collect()
}

fn scaled(target: &Target, factor: f64) -> Target {
    match target {
        Target::Point { center, concentration } => Target::Point { center: *center, concentration: concentration * factor },
        Target::Cuboid(c) => Target::Cuboid(Cuboid { concentration: c.concentration * factor, ..*c }),
        other => other.clone(),
    }
}

#[test]
fn reciprocity_linearity_positivity() {
    let p = OpticalParams::reference();
    let q = QuadratureSpec::default();
    for (k, c) in random_configs(100, 11).iter().enumerate() {
        let u = forward::tpsf(&c.pair, &c.target, c.t_ps, &p, &q).unwrap();
        assert!(u > 0.0 && u.is_finite(), "config {k}: {u}");
        let swapped = forward::tpsf(&c.pair.swapped(), &c.target, c.t_ps, &p, &q).unwrap();
        assert!((u - swapped).abs() <= 1e-9 * u, "config {k}: {u:e} vs {swapped:e}");
        let tripled = forward::tpsf(&c.pair, &scaled(&c.target, 3.0), c.t_ps, &p, &q).unwrap();
        assert!((tripled - 3.0 * u).abs() <= 1e-12 * tripled, "config {k}");
    }
}

#[test]
fn quadrature_self_convergence() {
    let p = OpticalParams::reference();
    let coarse = QuadratureSpec::default().with_rel_tol(1e-9);
    let fine = QuadratureSpec::default().with_rel_tol(1e-12);
    for (k, c) in random_configs(100, 12).iter().enumerate() {
        let a = forward::tpsf(&c.pair, &c.target, c.t_ps, &p, &coarse).unwrap();
        let b = forward::tpsf(&c.pair, &c.target, c.t_ps, &p, &fine).unwrap();
        assert!((a - b).abs() <= 1e-8 * b, "config {k}: {a:e} vs {b:e}");
    }
}

#[test]
fn example1_dense_argmax() {
    let p = OpticalParams::reference();
    let q = QuadratureSpec::default();
    let pair = SdPair::new(BoundaryPoint::new(-3.0, 0.0), BoundaryPoint::new(3.0, 0.0)).unwrap();
    let target = Target::Point { center: [0.0, 0.0, 5.0], concentration: 1e6 };
    let mut best = (0.0, f64::MIN);
    for i in 1000..1300 {
        let t = i as f64 * 0.1;
        let u = forward::tpsf(&pair, &target, t, &p, &q).unwrap();
        if u > best.1 {
            best = (t, u);
        }
    }
    // frozen from this 0.1 ps scan
    assert!((best.0 - 115.2).abs() < 0.05, "argmax {}", best.0);
    assert!((best.0 - 115.6).abs() < 0.5);
}
