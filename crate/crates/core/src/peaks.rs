//! Peak features of sampled TPSFs and the closed-form peak relations used
//! for non-iterative localization of a small target.

use std::cmp::Ordering;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{FdotError, Result};
use crate::forward::{self, PeakConstants, QuadratureSpec};
use crate::model::{BoundaryPoint, OpticalParams, SdPair, Target};

/// Asymmetry `|A - B| / (A + B)` above which the closed forms are unreliable.
pub const ASYMMETRY_WARNING: f64 = 0.2;

/// Peak of a sampled TPSF.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakFeatures {
    pub t_peak_ps: f64,
    pub u_peak: f64,
    /// The maximum sample sits at either end of the window; no refinement.
    pub on_boundary: bool,
}

/// Locates the maximum of `(t, u)` samples and refines it with the vertex of
/// the parabola through the three samples around it.
pub fn detect_peak(samples: &[(f64, f64)]) -> Result<PeakFeatures> {
    if samples.len() < 3 {
        return Err(FdotError::Peak(format!(
            "need at least 3 samples, got {}",
            samples.len()
        )));
    }
    if samples.windows(2).any(|w| !(w[1].0 > w[0].0)) {
        return Err(FdotError::Peak("sample times must be strictly increasing".into()));
    }
    if samples.iter().any(|(t, u)| !t.is_finite() || !u.is_finite()) {
        return Err(FdotError::Peak("non-finite sample".into()));
    }
    // first index of the maximum
    let (k, _) = samples
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bk, bu), (i, &(_, u))| {
            if u > bu {
                (i, u)
            } else {
                (bk, bu)
            }
        });
    if k == 0 || k == samples.len() - 1 {
        let (t, u) = samples[k];
        return Ok(PeakFeatures {
            t_peak_ps: t,
            u_peak: u,
            on_boundary: true,
        });
    }
    let (t0, u0) = samples[k - 1];
    let (t1, u1) = samples[k];
    let (t2, u2) = samples[k + 1];
    let (h0, h2) = (t0 - t1, t2 - t1);
    let (s0, s2) = ((u0 - u1) / h0, (u2 - u1) / h2);
    let curvature = (s0 - s2) / (h0 - h2);
    let slope = s0 - curvature * h0;
    if !(curvature < 0.0) {
        return Ok(PeakFeatures {
            t_peak_ps: t1,
            u_peak: u1,
            on_boundary: false,
        });
    }
    let x = -slope / (2.0 * curvature);
    Ok(PeakFeatures {
        t_peak_ps: t1 + x,
        u_peak: u1 - slope * slope / (4.0 * curvature),
        on_boundary: false,
    })
}

/// Approximate peak time `(-3 + sqrt(9 + 32 c mu_a (A + B))) / (4 c mu_a)`.
pub fn peak_time_approx(pc: &PeakConstants, p: &OpticalParams) -> f64 {
    let sum = pc.a_ps + pc.b_ps;
    let k = p.absorption_rate();
    // rationalized to stay accurate as A + B -> 0
    8.0 * sum / (3.0 + (9.0 + 32.0 * k * sum).sqrt())
}

/// Approximate peak intensity
/// `C(t) P (sqrt(pi/A) + sqrt(pi/B)) exp(-(2A + 2B)/t) t^{-3/2}`.
pub fn peak_intensity_approx(
    pc: &PeakConstants,
    t_peak_ps: f64,
    concentration: f64,
    p: &OpticalParams,
) -> f64 {
    let ln_unit = ln_unit_peak_intensity(pc, t_peak_ps, p);
    let unit = ln_unit.exp();
    if unit.is_normal() {
        unit * concentration
    } else {
        (ln_unit + concentration.ln()).exp()
    }
}

/// Logarithm of [`peak_intensity_approx`] at unit concentration.
fn ln_unit_peak_intensity(pc: &PeakConstants, t_peak_ps: f64, p: &OpticalParams) -> f64 {
    let pi = std::f64::consts::PI;
    let mu_d = p.mu_d();
    -p.absorption_rate() * t_peak_ps - (16.0 * pi.powi(3) * p.c_mm_per_ps() * mu_d * mu_d).ln()
        + ((pi / pc.a_ps).sqrt() + (pi / pc.b_ps).sqrt()).ln()
        - (2.0 * pc.a_ps + 2.0 * pc.b_ps) / t_peak_ps
        - 1.5 * t_peak_ps.ln()
}

/// Depth of a target centred under a pair with separation `separation_mm`
/// whose measured peak time is `t_star_ps`. Exact inverse of
/// [`peak_time_approx`] when `A = B`.
pub fn depth_from_peak_time(t_star_ps: f64, separation_mm: f64, p: &OpticalParams) -> Result<f64> {
    let c = p.c_mm_per_ps();
    let radicand = c * c * p.mu_d() * p.mu_a() * t_star_ps * t_star_ps
        + 1.5 * c * p.mu_d() * t_star_ps
        - 0.25 * separation_mm * separation_mm;
    if radicand > 0.0 && radicand.is_finite() {
        Ok(radicand.sqrt())
    } else {
        Err(FdotError::InconsistentPeak { radicand })
    }
}

/// Concentration reproducing `u_star` through [`peak_intensity_approx`].
pub fn concentration_from_peak(
    u_star: f64,
    pc: &PeakConstants,
    t_star_ps: f64,
    p: &OpticalParams,
) -> f64 {
    (u_star.ln() - ln_unit_peak_intensity(pc, t_star_ps, p)).exp()
}

/// Family of S-D pairs with fixed separation and orientation, indexed by
/// their midpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanGrid {
    pub midpoints: Vec<BoundaryPoint>,
    pub separation_mm: f64,
    /// Unit vector from source to detector.
    pub orientation: [f64; 2],
}

impl ScanGrid {
    pub fn new(
        midpoints: Vec<BoundaryPoint>,
        separation_mm: f64,
        orientation: [f64; 2],
    ) -> Result<Self> {
        if !(separation_mm > 0.0 && separation_mm.is_finite()) {
            return Err(FdotError::InvalidGeometry(format!(
                "scan separation {separation_mm} must be > 0"
            )));
        }
        let norm = orientation[0].hypot(orientation[1]);
        if !(norm > 0.0 && norm.is_finite()) {
            return Err(FdotError::InvalidGeometry("scan orientation is zero".into()));
        }
        Ok(ScanGrid {
            midpoints,
            separation_mm,
            orientation: [orientation[0] / norm, orientation[1] / norm],
        })
    }

    /// `n x n` square of midpoints with spacing `pitch_mm`, centred on
    /// `center`, pairs aligned with the x1 axis.
    pub fn square(center: BoundaryPoint, n: usize, pitch_mm: f64, separation_mm: f64) -> Result<Self> {
        let half = (n as f64 - 1.0) / 2.0;
        let mut midpoints = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                midpoints.push(BoundaryPoint::new(
                    center.x1 + (i as f64 - half) * pitch_mm,
                    center.x2 + (j as f64 - half) * pitch_mm,
                ));
            }
        }
        Self::new(midpoints, separation_mm, [1.0, 0.0])
    }

    pub fn pair(&self, index: usize) -> SdPair {
        let m = self.midpoints[index];
        let h = 0.5 * self.separation_mm;
        SdPair {
            source: BoundaryPoint::new(m.x1 - h * self.orientation[0], m.x2 - h * self.orientation[1]),
            detector: BoundaryPoint::new(m.x1 + h * self.orientation[0], m.x2 + h * self.orientation[1]),
        }
    }

    pub fn pairs(&self) -> Vec<SdPair> {
        (0..self.midpoints.len()).map(|i| self.pair(i)).collect()
    }
}

fn lexicographic(a: &BoundaryPoint, b: &BoundaryPoint) -> Ordering {
    a.x1.total_cmp(&b.x1).then(a.x2.total_cmp(&b.x2))
}

/// Winning midpoint of a scan: largest detected peak intensity, ties broken
/// by the lexicographically smallest midpoint. Returns its index as well.
pub fn locate_horizontal(
    scan: &ScanGrid,
    samples: &[Vec<(f64, f64)>],
) -> Result<(usize, PeakFeatures)> {
    if scan.midpoints.is_empty() {
        return Err(FdotError::InvalidGeometry("empty scan grid".into()));
    }
    if samples.len() != scan.midpoints.len() {
        return Err(FdotError::InvalidGeometry(format!(
            "{} sampled curves for {} midpoints",
            samples.len(),
            scan.midpoints.len()
        )));
    }
    let peaks = samples
        .iter()
        .map(|s| detect_peak(s))
        .collect::<Result<Vec<_>>>()?;
    let best = (0..peaks.len())
        .max_by(|&i, &j| {
            peaks[i]
                .u_peak
                .total_cmp(&peaks[j].u_peak)
                .then_with(|| lexicographic(&scan.midpoints[j], &scan.midpoints[i]))
        })
        .expect("non-empty");
    Ok((best, peaks[best]))
}

/// Result of the three-step localization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Localization {
    pub center: [f64; 3],
    pub concentration: f64,
    pub pair: SdPair,
    pub peak: PeakFeatures,
    pub asymmetry: f64,
    /// `asymmetry` exceeds [`ASYMMETRY_WARNING`].
    pub asymmetry_warning: bool,
}

/// Horizontal position from the brightest pair, depth from its peak time and
/// concentration from its peak intensity.
pub fn localize(
    scan: &ScanGrid,
    samples: &[Vec<(f64, f64)>],
    p: &OpticalParams,
) -> Result<Localization> {
    let (best, peak) = locate_horizontal(scan, samples)?;
    let pair = scan.pair(best);
    let mid = scan.midpoints[best];
    let depth = depth_from_peak_time(peak.t_peak_ps, pair.separation(), p)?;
    let center = [mid.x1, mid.x2, depth];
    let pc = PeakConstants::new(&pair, center, p);
    let asymmetry = pc.asymmetry();
    let asymmetry_warning = asymmetry > ASYMMETRY_WARNING;
    if asymmetry_warning {
        warn!(
            "|A-B|/(A+B) = {asymmetry:.3} exceeds {ASYMMETRY_WARNING}; peak approximations may be inaccurate"
        );
    }
    Ok(Localization {
        center,
        concentration: concentration_from_peak(peak.u_peak, &pc, peak.t_peak_ps, p),
        pair,
        peak,
        asymmetry,
        asymmetry_warning,
    })
}

/// Samples the TPSF of `target` for every scan pair on `times_ps`.
pub fn sample_scan(
    scan: &ScanGrid,
    target: &Target,
    times_ps: &[f64],
    p: &OpticalParams,
    q: &QuadratureSpec,
) -> Result<Vec<Vec<(f64, f64)>>> {
    use rayon::prelude::*;
    scan.pairs()
        .par_iter()
        .map(|pair| {
            times_ps
                .iter()
                .map(|&t| forward::tpsf(pair, target, t, p, q).map(|u| (t, u)))
                .collect()
        })
        .collect()
}

/// Dense-grid peak of a TPSF: samples on `[start, end]` with pitch `step`,
/// stopping once the curve has decayed below `1e-6` of its running maximum
/// after the peak, then refines quadratically.
pub fn dense_peak(
    pair: &SdPair,
    target: &Target,
    start_ps: f64,
    end_ps: f64,
    step_ps: f64,
    p: &OpticalParams,
    q: &QuadratureSpec,
) -> Result<PeakFeatures> {
    let mut samples: Vec<(f64, f64)> = Vec::new();
    let mut best = 0.0f64;
    let mut k = 0usize;
    loop {
        let t = start_ps + k as f64 * step_ps;
        if t > end_ps {
            break;
        }
        let u = forward::tpsf(pair, target, t, p, q)?;
        samples.push((t, u));
        best = best.max(u);
        if best > 0.0 && u < 1e-6 * best {
            break;
        }
        k += 1;
    }
    let peak = detect_peak(&samples)?;
    if peak.on_boundary {
        return Err(FdotError::Peak(format!(
            "peak not bracketed in [{start_ps}, {end_ps}] ps"
        )));
    }
    Ok(peak)
}

/// Golden-section maximization of the TPSF on `[lo_ps, hi_ps]`, which must
/// bracket a single maximum, down to an interval of width `tol_ps`.
pub fn refine_peak(
    pair: &SdPair,
    target: &Target,
    lo_ps: f64,
    hi_ps: f64,
    tol_ps: f64,
    p: &OpticalParams,
    q: &QuadratureSpec,
) -> Result<PeakFeatures> {
    if !(lo_ps > 0.0 && hi_ps > lo_ps && tol_ps > 0.0) {
        return Err(FdotError::Peak(format!(
            "invalid refinement bracket [{lo_ps}, {hi_ps}] with tolerance {tol_ps}"
        )));
    }
    let f = |t: f64| forward::tpsf(pair, target, t, p, q);
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo_ps, hi_ps);
    let mut x1 = b - inv_phi * (b - a);
    let mut x2 = a + inv_phi * (b - a);
    let (mut f1, mut f2) = (f(x1)?, f(x2)?);
    while b - a > tol_ps {
        if f1 >= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - inv_phi * (b - a);
            f1 = f(x1)?;
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + inv_phi * (b - a);
            f2 = f(x2)?;
        }
    }
    let (t_peak_ps, u_peak) = if f1 >= f2 { (x1, f1) } else { (x2, f2) };
    Ok(PeakFeatures {
        t_peak_ps,
        u_peak,
        on_boundary: t_peak_ps - lo_ps < 2.0 * tol_ps || hi_ps - t_peak_ps < 2.0 * tol_ps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex1_pair() -> SdPair {
        SdPair::new(BoundaryPoint::new(-3.0, 0.0), BoundaryPoint::new(3.0, 0.0)).unwrap()
    }

    #[test]
    fn symmetric_triple() {
        let p = detect_peak(&[(1.0, 0.0), (2.0, 1.0), (3.0, 0.0)]).unwrap();
        assert_eq!(p.t_peak_ps, 2.0);
        assert_eq!(p.u_peak, 1.0);
        assert!(!p.on_boundary);
    }

    #[test]
    fn exact_on_parabola() {
        let f = |t: f64| 1.0 - (t - 2.3) * (t - 2.3);
        let s: Vec<_> = [2.0, 2.2, 2.4].iter().map(|&t| (t, f(t))).collect();
        let p = detect_peak(&s).unwrap();
        assert!((p.t_peak_ps - 2.3).abs() < 1e-12);
        assert!((p.u_peak - 1.0).abs() < 1e-12);
    }

    #[test]
    fn detect_peak_errors_and_boundary() {
        assert!(detect_peak(&[(1.0, 0.0), (2.0, 1.0)]).is_err());
        assert!(detect_peak(&[(1.0, 0.0), (1.0, 1.0), (3.0, 0.0)]).is_err());
        let p = detect_peak(&[(1.0, 3.0), (2.0, 2.0), (3.0, 1.0)]).unwrap();
        assert!(p.on_boundary);
        assert_eq!(p.t_peak_ps, 1.0);
    }

    #[test]
    fn example1_peak_time_closed_form() {
        let p = OpticalParams::reference();
        let pc = PeakConstants::new(&ex1_pair(), [0.0, 0.0, 5.0], &p);
        // 34 / (4 * 0.219 / 3)
        assert!((pc.a_ps - 116.4383561643836).abs() < 1e-10);
        assert_eq!(pc.a_ps, pc.b_ps);
        let t = peak_time_approx(&pc, &p);
        assert!((t - 115.553_650_249_536_5).abs() < 1e-9, "{t}");
        let depth = depth_from_peak_time(t, 6.0, &p).unwrap();
        assert!((depth - 5.0).abs() < 1e-12);
        let depth = depth_from_peak_time(115.55, 6.0, &p).unwrap();
        assert!((depth - 5.0).abs() < 1e-3);
    }

    #[test]
    fn peak_time_limit_and_concentration_independence() {
        let p = OpticalParams::reference();
        let tiny = PeakConstants {
            a_ps: 1e-300,
            b_ps: 1e-300,
        };
        assert!(peak_time_approx(&tiny, &p) < 1e-299);
        assert_eq!(
            peak_time_approx(&PeakConstants { a_ps: 0.0, b_ps: 0.0 }, &p),
            0.0
        );
    }

    #[test]
    fn shallow_peak_time_is_inconsistent() {
        let p = OpticalParams::reference();
        assert!(matches!(
            depth_from_peak_time(1.0, 6.0, &p),
            Err(FdotError::InconsistentPeak { .. })
        ));
    }

    #[test]
    fn intensity_is_linear_in_concentration() {
        let p = OpticalParams::reference();
        let pc = PeakConstants::new(&ex1_pair(), [0.0, 0.0, 5.0], &p);
        let one = peak_intensity_approx(&pc, 115.0, 1.5, &p);
        let two = peak_intensity_approx(&pc, 115.0, 3.0, &p);
        assert_eq!(two, 2.0 * one);
        let back = concentration_from_peak(2.0 * one, &pc, 115.0, &p);
        assert!((back - 3.0).abs() / 3.0 < 1e-14);
    }

    #[test]
    fn locate_tie_break_is_lexicographic() {
        let scan = ScanGrid::new(
            vec![
                BoundaryPoint::new(1.0, 0.0),
                BoundaryPoint::new(-1.0, 0.0),
                BoundaryPoint::new(-1.0, -2.0),
            ],
            6.0,
            [1.0, 0.0],
        )
        .unwrap();
        let curve = vec![(1.0, 0.0), (2.0, 1.0), (3.0, 0.0)];
        let samples = vec![curve.clone(), curve.clone(), curve];
        let (best, _) = locate_horizontal(&scan, &samples).unwrap();
        assert_eq!(scan.midpoints[best], BoundaryPoint::new(-1.0, -2.0));
        let single = ScanGrid::new(vec![BoundaryPoint::new(2.0, 3.0)], 6.0, [0.0, 1.0]).unwrap();
        let (best, _) = locate_horizontal(&single, &samples[..1]).unwrap();
        assert_eq!(best, 0);
        let empty = ScanGrid::new(vec![], 6.0, [1.0, 0.0]).unwrap();
        assert!(locate_horizontal(&empty, &[]).is_err());
    }

    #[test]
    fn scan_pairs_have_fixed_separation() {
        let scan = ScanGrid::square(BoundaryPoint::new(0.0, 0.0), 3, 1.0, 6.0).unwrap();
        for pair in scan.pairs() {
            assert!((pair.separation() - 6.0).abs() < 1e-12);
        }
    }

    proptest! {
        // the radicand cancels d^2/4, costing about (d / 2 depth)^2 in relative accuracy
        #[test]
        fn depth_inverts_peak_time(depth in 0.5..30.0f64, sep in 0.5..30.0f64,
                                   mu_a in 0.01..3.0f64, mu_s in 1.0..50.0f64) {
            let p = OpticalParams::new(0.219, mu_a, mu_s, 0.9, 0.01).unwrap();
            let pair = SdPair::new(BoundaryPoint::new(-sep / 2.0, 0.0), BoundaryPoint::new(sep / 2.0, 0.0)).unwrap();
            let pc = PeakConstants::new(&pair, [0.0, 0.0, depth], &p);
            let t = peak_time_approx(&pc, &p);
            let back = depth_from_peak_time(t, sep, &p).unwrap();
            prop_assert!((back - depth).abs() / depth < 1e-12);
        }

        #[test]
        fn concentration_inverts_intensity(a in 1.0..5000.0f64, b in 1.0..5000.0f64,
                                           t in 5.0..2000.0f64, conc in 1e-3..1e7f64) {
            let p = OpticalParams::reference();
            let pc = PeakConstants { a_ps: a, b_ps: b };
            let u = peak_intensity_approx(&pc, t, conc, &p);
            prop_assume!(u > 0.0 && u.is_normal());
            let back = concentration_from_peak(u, &pc, t, &p);
            prop_assert!((back - conc).abs() / conc < 1e-12);
        }

        #[test]
        fn peak_time_increases_with_path(s1 in 0.0..1e4f64, ds in 1e-3..1e4f64) {
            let p = OpticalParams::reference();
            let lo = peak_time_approx(&PeakConstants { a_ps: s1 / 2.0, b_ps: s1 / 2.0 }, &p);
            let hi = peak_time_approx(&PeakConstants { a_ps: (s1 + ds) / 2.0, b_ps: (s1 + ds) / 2.0 }, &p);
            prop_assert!(hi > lo);
        }

        #[test]
        fn locate_invariant_under_relabeling(perm_seed in 0u64..1000) {
            use rand::{seq::SliceRandom, SeedableRng};
            let scan = ScanGrid::square(BoundaryPoint::new(0.0, 0.0), 3, 1.0, 6.0).unwrap();
            let samples: Vec<Vec<(f64, f64)>> = scan.midpoints.iter().map(|m| {
                let h = 1.0 / (1.0 + (m.x1 - 0.3).powi(2) + m.x2.powi(2));
                vec![(1.0, 0.0), (2.0, h), (3.0, 0.0)]
            }).collect();
            let (best, _) = locate_horizontal(&scan, &samples).unwrap();
            let mut order: Vec<usize> = (0..scan.midpoints.len()).collect();
            order.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(perm_seed));
            let shuffled = ScanGrid::new(order.iter().map(|&i| scan.midpoints[i]).collect(), 6.0, [1.0, 0.0]).unwrap();
            let s2: Vec<_> = order.iter().map(|&i| samples[i].clone()).collect();
            let (best2, _) = locate_horizontal(&shuffled, &s2).unwrap();
            prop_assert_eq!(shuffled.midpoints[best2], scan.midpoints[best]);
        }
    }
}
