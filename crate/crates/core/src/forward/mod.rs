//! Time-resolved fluorescence signal at a boundary detector for a
//! half-space with Robin boundary condition and zero fluorescence lifetime.
//!
//! For a point target at `x_c` the detected signal is the convolution of the
//! excitation Green's function (source to target, elapsed time `s`) with the
//! emission Green's function (target to detector, elapsed time `t - s`):
//!
//! ```text
//! u(t) = C(t) P ∫_0^t [(t-s)s]^{-3/2} exp(-A/(t-s)) exp(-B/s) K3(0,x_c3;t-s) K3(x_c3,0;s) ds
//! C(t) = exp(-c mu_a t) / (16 pi^3 c mu_D^2)
//! ```
//!
//! with `A = |x_d - x_c|^2 / (4 c mu_D)` and `B = |x_s - x_c|^2 / (4 c mu_D)`
//! using full 3-D distances. Extended targets integrate the point kernel over
//! their support; time-dependent targets are evaluated at the emission time.

pub mod quadrature;
pub mod special;

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FdotError, Result};
use crate::model::{Acquisition, Cuboid, Measurement, OpticalParams, ParamVector, SdPair, Target};
use quadrature::{integrate_adaptive, GaussLegendre};
use special::{erfcx, ln_gaussian_product_integral};

/// Numerical settings for the convolution and volume integrals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_subdivisions: usize,
    /// Initial Gauss–Legendre order per volume axis.
    pub volume_nodes_per_axis: usize,
    /// When set, the volume order is doubled until two successive
    /// results agree to `rel_tol`; otherwise the initial order is used.
    #[serde(default = "default_refine")]
    pub refine_volume: bool,
}

fn default_refine() -> bool {
    true
}

/// Upper bound for volume-order doubling.
pub const MAX_VOLUME_NODES: usize = 128;

impl Default for QuadratureSpec {
    fn default() -> Self {
        QuadratureSpec {
            rel_tol: 1e-9,
            abs_tol: 0.0,
            max_subdivisions: 400,
            volume_nodes_per_axis: 8,
            refine_volume: true,
        }
    }
}

impl QuadratureSpec {
    pub fn with_rel_tol(self, rel_tol: f64) -> Self {
        QuadratureSpec { rel_tol, ..self }
    }

    /// Fixed-order variant used inside iterative reconstructions.
    pub fn fixed_volume(self) -> Self {
        QuadratureSpec {
            refine_volume: false,
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rel_tol > 0.0 && self.rel_tol.is_finite()) {
            return Err(FdotError::Domain(format!("rel_tol {} must be > 0", self.rel_tol)));
        }
        if self.abs_tol < 0.0 {
            return Err(FdotError::Domain("abs_tol must be >= 0".into()));
        }
        if self.volume_nodes_per_axis < 2 {
            return Err(FdotError::Domain("volume_nodes_per_axis must be >= 2".into()));
        }
        if self.max_subdivisions == 0 {
            return Err(FdotError::Domain("max_subdivisions must be >= 1".into()));
        }
        Ok(())
    }
}

/// Diffusive time constants of a source-target-detector path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakConstants {
    /// Detector side, `|x_d - x_c|^2 / (4 c mu_D)` (ps).
    pub a_ps: f64,
    /// Source side, `|x_s - x_c|^2 / (4 c mu_D)` (ps).
    pub b_ps: f64,
}

impl PeakConstants {
    pub fn new(pair: &SdPair, center: [f64; 3], p: &OpticalParams) -> Self {
        let d = 4.0 * p.diffusivity();
        PeakConstants {
            a_ps: dist2(pair.detector.lift(), center) / d,
            b_ps: dist2(pair.source.lift(), center) / d,
        }
    }

    /// `|A - B| / (A + B)`.
    pub fn asymmetry(&self) -> f64 {
        (self.a_ps - self.b_ps).abs() / (self.a_ps + self.b_ps)
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]) * (a[i] - b[i])).sum()
}

/// `C(t) = exp(-c mu_a t) / (16 pi^3 c mu_D^2)`.
pub fn prefactor(t_ps: f64, p: &OpticalParams) -> f64 {
    (-p.absorption_rate() * t_ps).exp()
        / (16.0 * PI.powi(3) * p.c_mm_per_ps() * p.mu_d() * p.mu_d())
}

/// Robin boundary kernel
/// `K3 = 1 - beta sqrt(pi c mu_D t) erfcx((x3 + y3 + 2 beta c mu_D t) / sqrt(4 c mu_D t))`.
pub fn k3(x3_mm: f64, y3_mm: f64, t_ps: f64, p: &OpticalParams) -> Result<f64> {
    if !(t_ps > 0.0) || !t_ps.is_finite() {
        return Err(FdotError::Domain(format!("K3 requires t > 0, got {t_ps}")));
    }
    robin_kernel(x3_mm, y3_mm, t_ps, p.diffusivity(), p.beta())
}

/// [`k3`] with explicit diffusivity `c mu_D` (mm^2/ps) and impedance `beta`
/// (1/mm); `beta = 0` gives the Neumann limit `K3 = 1`.
pub fn robin_kernel(x3_mm: f64, y3_mm: f64, t_ps: f64, diffusivity: f64, beta: f64) -> Result<f64> {
    if !(t_ps > 0.0) || !t_ps.is_finite() {
        return Err(FdotError::Domain(format!("K3 requires t > 0, got {t_ps}")));
    }
    if x3_mm < 0.0 || y3_mm < 0.0 || beta < 0.0 || !(diffusivity > 0.0) {
        return Err(FdotError::Domain(
            "K3 requires non-negative depths and beta, positive diffusivity".into(),
        ));
    }
    Ok(k3_unchecked(x3_mm + y3_mm, t_ps, diffusivity, beta))
}

#[inline]
fn k3_unchecked(depth_sum: f64, t: f64, diffusivity: f64, beta: f64) -> f64 {
    let dt = diffusivity * t;
    let zeta = (depth_sum + 2.0 * beta * dt) / (4.0 * dt).sqrt();
    1.0 - beta * (PI * dt).sqrt() * erfcx(zeta)
}

fn check_time(t_ps: f64) -> Result<()> {
    if t_ps > 0.0 && t_ps.is_finite() {
        Ok(())
    } else {
        Err(FdotError::Domain(format!("time must be > 0, got {t_ps}")))
    }
}

/// Split point of `[0, 1]` where `exp(-A/(1-σ) - B/σ)` peaks.
fn peak_fraction(a: f64, b: f64) -> f64 {
    let (ra, rb) = (a.sqrt(), b.sqrt());
    if ra + rb > 0.0 {
        rb / (ra + rb)
    } else {
        0.5
    }
}

fn breakpoints(center: f64) -> Vec<f64> {
    let c = center.clamp(0.05, 0.95);
    vec![0.0, c, 1.0]
}

/// TPSF of a point target, `Target::Point`.
pub fn tpsf_point(
    pair: &SdPair,
    center: [f64; 3],
    concentration: f64,
    t_ps: f64,
    p: &OpticalParams,
    q: &QuadratureSpec,
) -> Result<f64> {
    check_time(t_ps)?;
    if !(center[2] > 0.0) {
        return Err(FdotError::InvalidGeometry(format!(
            "point depth {} must be > 0",
            center[2]
        )));
    }
    let pc = PeakConstants::new(pair, center, p);
    let (d, beta) = (p.diffusivity(), p.beta());
    let (a, b) = (pc.a_ps / t_ps, pc.b_ps / t_ps);
    let depth = center[2];
    // s = t σ; ∫_0^t ... ds = t^{-2} ∫_0^1 ... dσ
    let integrand = |sigma: f64| {
        let rest = 1.0 - sigma;
        if sigma <= 0.0 || rest <= 0.0 {
            return 0.0;
        }
        let ln = -a / rest - b / sigma - 1.5 * (sigma * rest).ln();
        ln.exp()
            * k3_unchecked(depth, t_ps * rest, d, beta)
            * k3_unchecked(depth, t_ps * sigma, d, beta)
    };
    let integral = integrate_adaptive(
        integrand,
        &breakpoints(peak_fraction(a, b)),
        q.rel_tol,
        q.abs_tol,
        q.max_subdivisions,
    )?;
    Ok(prefactor(t_ps, p) * concentration * integral.value / (t_ps * t_ps))
}

/// Separable volume integral of the point kernel at fixed emission split.
///
/// The Gaussian factors factorize over the three axes; the horizontal ones
/// integrate in closed form and the depth axis (which also carries the K3
/// factors) uses Gauss–Legendre.
struct BoxKernel<'a> {
    pair: &'a SdPair,
    diffusivity: f64,
    beta: f64,
    depth_rule: &'a GaussLegendre,
}

impl BoxKernel<'_> {
    /// `[(t-s)s]^{-3/2} ∫_box exp(-|x_d-x|^2/(4D(t-s)) - |x_s-x|^2/(4Ds)) K3 K3 dx`
    fn eval(&self, t: f64, s: f64, lower: [f64; 3], upper: [f64; 3]) -> f64 {
        let rest = t - s;
        if s <= 0.0 || rest <= 0.0 {
            return 0.0;
        }
        let p_det = 1.0 / (4.0 * self.diffusivity * rest);
        let q_src = 1.0 / (4.0 * self.diffusivity * s);
        let xd = self.pair.detector.lift();
        let xs = self.pair.source.lift();
        let mut ln = -1.5 * (rest * s).ln();
        for axis in 0..2 {
            ln += ln_gaussian_product_integral(
                p_det,
                q_src,
                xd[axis],
                xs[axis],
                lower[axis],
                upper[axis],
            );
        }
        if ln == f64::NEG_INFINITY {
            return 0.0;
        }
        // depth axis, boundary points at x3 = 0: exp(-(p+q) x^2), scaled at the top face
        let w = p_det + q_src;
        let top = lower[2];
        let depth_integral = self.depth_rule.integrate(lower[2], upper[2], |x| {
            (-w * (x - top) * (x + top)).exp()
                * k3_unchecked(x, rest, self.diffusivity, self.beta)
                * k3_unchecked(x, s, self.diffusivity, self.beta)
        });
        if depth_integral <= 0.0 {
            return 0.0;
        }
        (ln - w * top * top + depth_integral.ln()).exp()
    }
}

/// Convolution integral over emission time with box geometry `geometry(s)`.
fn box_convolution<G>(
    pair: &SdPair,
    t_ps: f64,
    p: &OpticalParams,
    q: &QuadratureSpec,
    depth_nodes: usize,
    center_hint: [f64; 3],
    geometry: G,
) -> Result<f64>
where
    G: Fn(f64) -> ([f64; 3], [f64; 3]),
{
    let rule = GaussLegendre::new(depth_nodes);
    let kernel = BoxKernel {
        pair,
        diffusivity: p.diffusivity(),
        beta: p.beta(),
        depth_rule: &rule,
    };
    let pc = PeakConstants::new(pair, center_hint, p);
    let integrand = |sigma: f64| {
        let s = t_ps * sigma;
        let (lower, upper) = geometry(s);
        kernel.eval(t_ps, s, lower, upper)
    };
    let integral = integrate_adaptive(
        integrand,
        &breakpoints(peak_fraction(pc.a_ps, pc.b_ps)),
        q.rel_tol,
        q.abs_tol,
        q.max_subdivisions,
    )?;
    // ds = t dσ
    Ok(prefactor(t_ps, p) * integral.value * t_ps)
}

/// Runs `eval(nodes)` with doubling node counts until two successive values
/// agree to `rel_tol` (or once, when refinement is disabled).
fn refine_nodes<F>(q: &QuadratureSpec, mut eval: F) -> Result<f64>
where
    F: FnMut(usize) -> Result<f64>,
{
    let mut nodes = q.volume_nodes_per_axis;
    let mut previous = eval(nodes)?;
    if !q.refine_volume {
        return Ok(previous);
    }
    loop {
        nodes *= 2;
        let current = eval(nodes)?;
        let diff = (current - previous).abs();
        if diff <= q.rel_tol * current.abs() || diff <= q.abs_tol {
            return Ok(current);
        }
        if nodes >= MAX_VOLUME_NODES {
            return Err(FdotError::QuadratureNonConvergence {
                subdivisions: nodes,
                estimate: diff,
                tolerance: q.rel_tol * current.abs(),
            });
        }
        previous = current;
    }
}

/// TPSF of a static cuboid: the point kernel integrated over the box.
pub fn tpsf_cuboid(
    pair: &SdPair,
    cuboid: &Cuboid,
    t_ps: f64,
    p: &OpticalParams,
    q: &QuadratureSpec,
) -> Result<f64> {
    check_time(t_ps)?;
    cuboid.validate()?;
    let (lower, upper) = (cuboid.lower, cuboid.upper);
    let value = refine_nodes(q, |n| {
        box_convolution(pair, t_ps, p, q, n, cuboid.center(), |_| (lower, upper))
    })?;
    Ok(cuboid.concentration * value)
}

/// Tensor-product Gauss–Legendre over the box with the point TPSF as
/// integrand. Much slower than [`tpsf_cuboid`]; kept as an independent
/// route for validation.
pub fn tpsf_cuboid_tensor(
    pair: &SdPair,
    cuboid: &Cuboid,
    t_ps: f64,
    p: &OpticalParams,
    q: &QuadratureSpec,
) -> Result<f64> {
    check_time(t_ps)?;
    cuboid.validate()?;
    refine_nodes(q, |n| {
        let rule = GaussLegendre::new(n);
        let mut total = 0.0;
        for (x1, w1) in rule.mapped(cuboid.lower[0], cuboid.upper[0]) {
            for (x2, w2) in rule.mapped(cuboid.lower[1], cuboid.upper[1]) {
                for (x3, w3) in rule.mapped(cuboid.lower[2], cuboid.upper[2]) {
                    total += w1
                        * w2
                        * w3
                        * tpsf_point(pair, [x1, x2, x3], cuboid.concentration, t_ps, p, q)?;
                }
            }
        }
        Ok(total)
    })
}

/// TPSF of a moving or growing cuboid; the geometry follows the emission time.
pub fn tpsf_time_dependent(
    pair: &SdPair,
    target: &Target,
    t_ps: f64,
    p: &OpticalParams,
    q: &QuadratureSpec,
) -> Result<f64> {
    check_time(t_ps)?;
    let window = match target {
        Target::MovingCuboid { window, .. } | Target::GrowingCuboid { window, .. } => *window,
        _ => {
            return Err(FdotError::LayoutMismatch {
                expected: "moving or growing cuboid".into(),
                found: "static target".into(),
            })
        }
    };
    // geometry must stay valid over every emission time in [0, t]
    for k in 0..=32 {
        let u = window.normalize(t_ps * k as f64 / 32.0);
        let (lo, up) = target.box_at(u).expect("cuboid family");
        if !((0..3).all(|i| lo[i] < up[i]) && lo[2] > 0.0) {
            return Err(FdotError::GeometryOutsideDomain { u });
        }
    }
    let hint = {
        let (lo, up) = target
            .box_at(window.normalize(0.5 * t_ps))
            .expect("cuboid family");
        [0, 1, 2].map(|i| 0.5 * (lo[i] + up[i]))
    };
    let value = refine_nodes(q, |n| {
        box_convolution(pair, t_ps, p, q, n, hint, |s| {
            let (lo, up) = target.box_at(window.normalize(s)).expect("cuboid family");
            // tolerate interior samples outside the probed set
            let lo2 = [lo[0], lo[1], lo[2].max(0.0)];
            (lo2, up)
        })
    })?;
    Ok(target.concentration() * value)
}

/// TPSF for any target family.
pub fn tpsf(
    pair: &SdPair,
    target: &Target,
    t_ps: f64,
    p: &OpticalParams,
    q: &QuadratureSpec,
) -> Result<f64> {
    match target {
        Target::Point {
            center,
            concentration,
        } => tpsf_point(pair, *center, *concentration, t_ps, p, q),
        Target::Cuboid(c) => tpsf_cuboid(pair, c, t_ps, p, q),
        Target::MovingCuboid { .. } | Target::GrowingCuboid { .. } => {
            tpsf_time_dependent(pair, target, t_ps, p, q)
        }
    }
}

/// Evaluates `target` on every stacked `(pair, time)` entry of `acquisition`.
pub fn simulate(
    target: &Target,
    acquisition: &Acquisition,
    p: &OpticalParams,
    q: &QuadratureSpec,
) -> Result<Measurement> {
    q.validate()?;
    acquisition.validate()?;
    target.validate()?;
    let data = acquisition
        .entries()
        .par_iter()
        .map(|&(m, t)| tpsf(&acquisition.pairs[m], target, t, p, q))
        .collect::<Result<Vec<_>>>()?;
    Measurement::new(acquisition.clone(), data)
}

/// Measurement operator: decodes `params` (applying optics overrides for
/// joint layouts) and returns the stacked data vector, pair-major.
pub fn measure(
    params: &ParamVector,
    acquisition: &Acquisition,
    p: &OpticalParams,
    q: &QuadratureSpec,
) -> Result<Measurement> {
    let target = params.decode()?;
    let optics = params.apply_optics(p)?;
    simulate(&target, acquisition, &optics, q)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundaryPoint, Layout, TimeGrid};

    fn ex1_pair() -> SdPair {
        SdPair::new(BoundaryPoint::new(-3.0, 0.0), BoundaryPoint::new(3.0, 0.0)).unwrap()
    }

    #[test]
    fn k3_reference_values() {
        let p = OpticalParams::reference();
        // 50-digit evaluations of the defining formula
        let v = k3(0.0, 5.0, 100.0, &p).unwrap();
        assert!((v - 0.978_882_218_059_181_754_11).abs() < 1e-14);
        let v = k3(2.0, 3.0, 250.0, &p).unwrap();
        assert!((v - 0.957_934_062_300_786_146_24).abs() < 1e-14);
    }

    #[test]
    fn k3_limits() {
        let p = OpticalParams::reference();
        for t in [1e-6, 1.0, 100.0, 1e5] {
            assert_eq!(robin_kernel(0.0, 5.0, t, p.diffusivity(), 0.0).unwrap(), 1.0);
        }
        let v = k3(0.0, 5.0, 1e-6, &p).unwrap();
        assert!((v - 1.0).abs() < 1e-6);
        assert!(matches!(k3(0.0, 5.0, 0.0, &p), Err(FdotError::Domain(_))));
        assert!(matches!(k3(0.0, 5.0, -1.0, &p), Err(FdotError::Domain(_))));
    }

    #[test]
    fn k3_monotone_in_beta() {
        let base = OpticalParams::reference();
        let mut last = 1.0;
        for beta in [1e-4, 1e-3, 1e-2, 0.1, 1.0, 10.0] {
            let v = k3(1.0, 4.0, 300.0, &base.with_beta(beta).unwrap()).unwrap();
            assert!(v <= last && v > 0.0);
            last = v;
        }
    }

    #[test]
    fn point_tpsf_matches_high_precision_oracle() {
        // mpmath evaluations (25 digits) of the convolution integral, P = 1e6
        let p = OpticalParams::reference();
        let q = QuadratureSpec::default();
        let cases = [
            (115.0, [0.0, 0.0, 5.0], 0.030_160_440_763_659_070_7),
            (60.0, [0.0, 0.0, 2.0], 1.272_663_409_077_970_31),
            (200.0, [1.0, -0.5, 5.0], 0.010_444_427_056_060_01),
            (40.0, [0.0, 0.0, 0.5], 3.495_627_679_230_200_39),
        ];
        for (t, xc, expected) in cases {
            let v = tpsf_point(&ex1_pair(), xc, 1e6, t, &p, &q).unwrap();
            assert!((v - expected).abs() / expected < 1e-8, "t={t}: {v} vs {expected}");
        }
    }

    #[test]
    fn point_tpsf_reciprocity_and_linearity() {
        let p = OpticalParams::reference();
        let q = QuadratureSpec::default();
        let pair = SdPair::new(BoundaryPoint::new(-4.0, 1.0), BoundaryPoint::new(2.5, -0.5)).unwrap();
        let xc = [0.7, 0.2, 3.0];
        let a = tpsf_point(&pair, xc, 2.0, 90.0, &p, &q).unwrap();
        let b = tpsf_point(&pair.swapped(), xc, 2.0, 90.0, &p, &q).unwrap();
        assert!((a - b).abs() / a < 1e-10);
        let c = tpsf_point(&pair, xc, 4.0, 90.0, &p, &q).unwrap();
        assert_eq!(c, 2.0 * a);
    }

    #[test]
    fn point_tpsf_rejects_bad_time() {
        let p = OpticalParams::reference();
        let q = QuadratureSpec::default();
        assert!(tpsf_point(&ex1_pair(), [0.0, 0.0, 5.0], 1.0, 0.0, &p, &q).is_err());
    }

    #[test]
    fn separable_cuboid_matches_tensor_product() {
        let p = OpticalParams::reference();
        let q = QuadratureSpec::default().with_rel_tol(1e-10);
        let cube = Cuboid::new([-0.4, -0.3, 4.5], [0.6, 0.3, 5.2], 1e6).unwrap();
        for t in [60.0, 115.0, 250.0] {
            let fast = tpsf_cuboid(&ex1_pair(), &cube, t, &p, &q).unwrap();
            let slow = tpsf_cuboid_tensor(
                &ex1_pair(),
                &cube,
                t,
                &p,
                &QuadratureSpec {
                    volume_nodes_per_axis: 6,
                    ..q
                },
            )
            .unwrap();
            assert!((fast - slow).abs() / slow < 1e-8, "t={t}: {fast} vs {slow}");
        }
    }

    #[test]
    fn small_cube_approaches_point() {
        let p = OpticalParams::reference();
        let q = QuadratureSpec::default();
        let side = 0.01;
        let cube = Cuboid::cube([0.0, 0.0, 5.0], side, 1e6).unwrap();
        for t in [80.0, 115.0, 200.0] {
            let c = tpsf_cuboid(&ex1_pair(), &cube, t, &p, &q).unwrap();
            let pt = tpsf_point(&ex1_pair(), [0.0, 0.0, 5.0], 1e6, t, &p, &q).unwrap();
            let ratio = c / (cube.volume() * pt);
            assert!((ratio - 1.0).abs() < 1e-4, "ratio {ratio}");
        }
    }

    #[test]
    fn constant_time_dependence_reduces_to_cuboid() {
        use crate::model::{Poly, TimeWindow};
        let p = OpticalParams::reference();
        let q = QuadratureSpec::default();
        let window = TimeWindow::new(0.0, 300.0).unwrap();
        let cube = Cuboid::cube([0.2, -0.1, 5.0], 1.0, 2.0).unwrap();
        let growing = Target::GrowingCuboid {
            center: [0.2, -0.1, 5.0],
            side: Poly::constant(1.0),
            concentration: 2.0,
            window,
        };
        let moving = Target::MovingCuboid {
            center: [Poly::constant(0.2), Poly::constant(-0.1), Poly::constant(5.0)],
            side: 1.0,
            concentration: 2.0,
            window,
        };
        for t in [70.0, 140.0] {
            let reference = tpsf_cuboid(&ex1_pair(), &cube, t, &p, &q).unwrap();
            for target in [&growing, &moving] {
                let v = tpsf(&ex1_pair(), target, t, &p, &q).unwrap();
                assert!((v - reference).abs() / reference < 1e-10);
            }
        }
    }

    #[test]
    fn time_dependent_geometry_must_stay_inside() {
        use crate::model::{Poly, TimeWindow};
        let p = OpticalParams::reference();
        let q = QuadratureSpec::default();
        // shrinks through zero at u = 0.5 (window [0, 100]) so t = 80 is invalid
        let target = Target::GrowingCuboid {
            center: [0.0, 0.0, 5.0],
            side: Poly::linear(1.0, -2.0),
            concentration: 1.0,
            window: TimeWindow::new(0.0, 100.0).unwrap(),
        };
        assert!(matches!(
            tpsf_time_dependent(&ex1_pair(), &target, 80.0, &p, &q),
            Err(FdotError::GeometryOutsideDomain { .. })
        ));
    }

    #[test]
    fn measure_stacks_pair_major() {
        let p = OpticalParams::reference();
        let q = QuadratureSpec::default();
        let pairs = vec![
            ex1_pair(),
            SdPair::new(BoundaryPoint::new(-2.0, 1.0), BoundaryPoint::new(4.0, 1.0)).unwrap(),
        ];
        let grids = vec![
            TimeGrid::new(vec![80.0, 100.0, 120.0]).unwrap(),
            TimeGrid::new(vec![90.0, 110.0]).unwrap(),
        ];
        let acq = Acquisition::new(pairs.clone(), grids).unwrap();
        let v = ParamVector::new(Layout::Cuboid7, vec![-0.5, 0.5, -0.5, 0.5, 4.5, 5.5, 3.0]).unwrap();
        let m = measure(&v, &acq, &p, &q).unwrap();
        assert_eq!(m.data.len(), 5);
        let cube = match v.decode().unwrap() {
            Target::Cuboid(c) => c,
            _ => unreachable!(),
        };
        for (k, (pair_idx, t)) in acq.entries().into_iter().enumerate() {
            let direct = tpsf_cuboid(&pairs[pair_idx], &cube, t, &p, &q).unwrap();
            assert_eq!(m.data[k], direct);
        }
        let empty = Acquisition::new(vec![], vec![]).unwrap();
        assert!(measure(&v, &empty, &p, &q).unwrap().data.is_empty());
    }
}
