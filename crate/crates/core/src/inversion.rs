//! Iterative reconstruction of a parametrized target from boundary data.
//!
//! Each iteration linearizes the measurement operator `K` around the current
//! estimate `a_j` with a central-difference sensitivity matrix `G` and solves
//! the regularized normal equations
//!
//! ```text
//! (alpha I + G^T G) da_j = G^T (h - K(a_j)),    a_{j+1} = a_j + da_j
//! ```
//!
//! until `|da_j|_2 <= eta`. The regularization parameter is re-selected every
//! iteration by a discrepancy search over a geometric grid, or held fixed.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FdotError, Result};
use crate::forward::{self, QuadratureSpec};
use crate::model::{Acquisition, Layout, Measurement, OpticalParams, ParamVector};

/// Multiplicative Gaussian noise `h (1 + zeta epsilon)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub epsilon: f64,
    pub seed: u64,
}

/// Returns `h_q (1 + zeta_q epsilon)` with `zeta_q` drawn in stacking order
/// from a ChaCha8 stream seeded by `spec.seed`.
pub fn add_noise(h: &Measurement, spec: &NoiseSpec) -> Measurement {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let data = h
        .data
        .iter()
        .map(|&v| {
            let zeta: f64 = StandardNormal.sample(&mut rng);
            v * (1.0 + zeta * spec.epsilon)
        })
        .collect();
    Measurement {
        acquisition: h.acquisition.clone(),
        data,
    }
}

/// How the regularization parameter is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaStrategy {
    Fixed { alpha: f64 },
    /// Largest α on the search grid whose linearized residual stays below
    /// `max(rho * |r_j|_2, safety * delta)`, with `delta = epsilon * |h_delta|_2`.
    /// Steps that raise the misfit are retried with a larger α.
    Discrepancy {
        epsilon: f64,
        safety: f64,
        #[serde(default = "default_rho")]
        rho: f64,
    },
}

fn default_rho() -> f64 {
    0.5
}

/// Geometric α grid `alpha_0 rho^k`, `k = 0..count`, with
/// `alpha_0 = initial_scale * mean(diag(G^T G))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaSearch {
    pub initial_scale: f64,
    pub ratio: f64,
    pub count: usize,
}

impl Default for AlphaSearch {
    fn default() -> Self {
        AlphaSearch {
            initial_scale: 1e-2,
            ratio: 0.5,
            count: 48,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub eta: f64,
    pub max_iters: usize,
    pub alpha: AlphaStrategy,
    pub alpha_search: AlphaSearch,
    /// Relative central-difference step.
    pub fd_step: f64,
    /// Parameter magnitude below which the step stops shrinking.
    pub fd_scale_floor: f64,
    /// Absolute lower bound on the step.
    pub fd_abs_floor: f64,
    /// Retries with α doubled when a step raises the misfit.
    pub max_backtracks: usize,
    /// α is doubled until `|da_j|_2` is at most this radius.
    pub max_step_norm: f64,
    /// Also stop once `|r_j|_2 <= tau * delta` when set to `Some(tau)`.
    pub discrepancy_stop: Option<f64>,
    /// How the concentration is kept in step with the geometry.
    #[serde(default)]
    pub concentration: ConcentrationUpdate,
    pub weighting: Weighting,
}

/// Treatment of the concentration `P`, on which the model depends linearly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcentrationUpdate {
    /// `P` is updated by the regularized step like every other unknown.
    Regularized,
    /// `P` starts from its closed-form optimum for the initial geometry and
    /// is then updated by the regularized step.
    Initial,
    /// `P` is replaced by its optimum after every update and removed from
    /// the step (variable projection).
    Projected,
    /// `Projected` when the optical coefficients are unknown, since the data
    /// scale then changes by orders of magnitude between iterates; `Initial`
    /// otherwise, which keeps `P` under the penalty and damps the trade-off
    /// between `P` and the box thickness.
    #[default]
    Auto,
}

impl ConcentrationUpdate {
    fn resolve(self, layout: &Layout) -> ConcentrationUpdate {
        match self {
            ConcentrationUpdate::Auto if layout.has_optics() => ConcentrationUpdate::Projected,
            ConcentrationUpdate::Auto => ConcentrationUpdate::Initial,
            other => other,
        }
    }
}

/// Space in which data and model values are compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `|h_delta - K(a)|_2` as written.
    Absolute,
    /// Each residual divided by `|h_delta_q|`.
    Relative,
    /// `ln h_delta_q - ln K_q(a)`. Agrees with `Relative` to first order near
    /// the data and stays tame when the model is off by orders of magnitude.
    #[default]
    Logarithmic,
}

impl Weighting {
    fn check_data(&self, h: &Measurement) -> Result<()> {
        if *self == Weighting::Absolute {
            return Ok(());
        }
        match h.data.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
            Some(i) => Err(FdotError::Domain(format!(
                "{self:?} residuals need positive data, entry {i} is {}",
                h.data[i]
            ))),
            None => Ok(()),
        }
    }

    /// Residual `T(h_q) - T(k_q)` in the chosen space.
    pub fn residual(&self, h: &Measurement, k: &Measurement) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(h.len());
        for (i, (hv, kv)) in h.data.iter().zip(&k.data).enumerate() {
            out[i] = match self {
                Weighting::Absolute => hv - kv,
                Weighting::Relative => (hv - kv) / hv,
                Weighting::Logarithmic => {
                    if !(*kv > 0.0) {
                        return Err(FdotError::Domain(format!(
                            "model value {kv} at entry {i} has no logarithm"
                        )));
                    }
                    hv.ln() - kv.ln()
                }
            };
        }
        Ok(out)
    }

    /// Factor `dT/dk` applied to row `q` of the raw Jacobian.
    pub fn row_scale(&self, h: &Measurement, k: &Measurement) -> Vec<f64> {
        match self {
            Weighting::Absolute => vec![1.0; h.len()],
            Weighting::Relative => h.data.iter().map(|v| 1.0 / v).collect(),
            Weighting::Logarithmic => k.data.iter().map(|v| 1.0 / v).collect(),
        }
    }

    /// Factor `f > 0` minimizing the residual norm of `f * k`; `K` is linear
    /// in the concentration, so this is the best concentration rescaling.
    pub fn best_scale(&self, h: &Measurement, k: &Measurement) -> Option<f64> {
        let pairs = h.data.iter().zip(&k.data);
        let f = match self {
            Weighting::Absolute => {
                let (num, den) = pairs.fold((0.0, 0.0), |(n, d), (h, k)| (n + h * k, d + k * k));
                num / den
            }
            Weighting::Relative => {
                let (num, den) = pairs.fold((0.0, 0.0), |(n, d), (h, k)| {
                    let r = k / h;
                    (n + r, d + r * r)
                });
                num / den
            }
            Weighting::Logarithmic => {
                let mean = pairs.map(|(h, k)| h.ln() - k.ln()).sum::<f64>() / h.len() as f64;
                mean.exp()
            }
        };
        (f.is_finite() && f > 0.0).then_some(f)
    }

    /// Noise norm `delta` for relative noise level `epsilon`.
    pub fn noise_norm(&self, h: &Measurement, epsilon: f64) -> f64 {
        match self {
            Weighting::Absolute => epsilon * h.data.iter().map(|v| v * v).sum::<f64>().sqrt(),
            _ => epsilon * (h.len() as f64).sqrt(),
        }
    }
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            eta: 1e-8,
            max_iters: 200,
            alpha: AlphaStrategy::Discrepancy {
                epsilon: 0.0,
                safety: 1.01,
                rho: default_rho(),
            },
            max_backtracks: 60,
            max_step_norm: 2.0,
            discrepancy_stop: Some(1.01),
            concentration: ConcentrationUpdate::Auto,
            weighting: Weighting::default(),
            alpha_search: AlphaSearch::default(),
            fd_step: 1e-5,
            fd_scale_floor: 1.0,
            fd_abs_floor: 1e-8,
        }
    }
}

impl InversionConfig {
    /// Discrepancy strategy for noise level `epsilon`, keeping the safety
    /// factor and reduction ratio of the current strategy.
    pub fn with_noise_level(self, epsilon: f64) -> Self {
        let (safety, rho) = match self.alpha {
            AlphaStrategy::Discrepancy { safety, rho, .. } => (safety, rho),
            AlphaStrategy::Fixed { .. } => (1.01, default_rho()),
        };
        InversionConfig {
            alpha: AlphaStrategy::Discrepancy {
                epsilon,
                safety,
                rho,
            },
            ..self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) {
            return Err(FdotError::Domain("eta must be > 0".into()));
        }
        if self.max_iters == 0 {
            return Err(FdotError::Domain("max_iters must be >= 1".into()));
        }
        if !(self.max_step_norm > 0.0) {
            return Err(FdotError::Domain("max_step_norm must be > 0".into()));
        }
        if !(self.fd_step > 0.0) {
            return Err(FdotError::Domain("fd_step must be > 0".into()));
        }
        match self.alpha {
            AlphaStrategy::Fixed { alpha } if !(alpha > 0.0) => {
                Err(FdotError::Domain("fixed alpha must be > 0".into()))
            }
            AlphaStrategy::Discrepancy {
                epsilon,
                safety,
                rho,
            } if !(epsilon >= 0.0 && safety > 0.0 && rho > 0.0 && rho < 1.0) => Err(
                FdotError::Domain("need epsilon >= 0, safety > 0 and 0 < rho < 1".into()),
            ),
            _ => {
                let s = self.alpha_search;
                if s.initial_scale > 0.0 && s.ratio > 0.0 && s.ratio < 1.0 && s.count > 0 {
                    Ok(())
                } else {
                    Err(FdotError::Domain("invalid alpha search grid".into()))
                }
            }
        }
    }
}

/// Central-difference sensitivity matrix `g_qs = d K(a)_q / d a_s`.
///
/// The step for component `s` is `max(fd_step * max(|a_s|, fd_scale_floor),
/// fd_abs_floor)`; when one side of the stencil leaves the admissible set
/// a one-sided difference is used instead.
pub fn sensitivity(
    a: &ParamVector,
    acquisition: &Acquisition,
    p: &OpticalParams,
    q: &QuadratureSpec,
    cfg: &InversionConfig,
    base: Option<&Measurement>,
) -> Result<DMatrix<f64>> {
    let n_rows = acquisition.len();
    let n_cols = a.len();
    let admissible = |v: &ParamVector| v.decode().is_ok() && v.apply_optics(p).is_ok();
    let eval = |v: &ParamVector, index: usize| {
        forward::measure(v, acquisition, p, q)
            .map(|m| m.data)
            .map_err(|e| FdotError::Sensitivity {
                index,
                source: Box::new(e),
            })
    };
    let columns = (0..n_cols)
        .into_par_iter()
        .map(|s| -> Result<Vec<f64>> {
            let step = (cfg.fd_step * a.values[s].abs().max(cfg.fd_scale_floor)).max(cfg.fd_abs_floor);
            let shifted = |delta: f64| {
                let mut v = a.clone();
                v.values[s] += delta;
                v
            };
            let (plus, minus) = (shifted(step), shifted(-step));
            let (ok_plus, ok_minus) = (admissible(&plus), admissible(&minus));
            let center = || -> Result<Vec<f64>> {
                match base {
                    Some(m) => Ok(m.data.clone()),
                    None => eval(a, s),
                }
            };
            // the stencil uses the step actually represented in floating point
            let (hi, lo, width) = match (ok_plus, ok_minus) {
                (true, true) => (
                    eval(&plus, s)?,
                    eval(&minus, s)?,
                    plus.values[s] - minus.values[s],
                ),
                (true, false) => (eval(&plus, s)?, center()?, plus.values[s] - a.values[s]),
                (false, true) => (center()?, eval(&minus, s)?, a.values[s] - minus.values[s]),
                (false, false) => {
                    return Err(FdotError::Sensitivity {
                        index: s,
                        source: Box::new(FdotError::InvalidParameter {
                            index: s,
                            reason: "no admissible finite-difference stencil".into(),
                        }),
                    })
                }
            };
            Ok(hi.iter().zip(&lo).map(|(h, l)| (h - l) / width).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DMatrix::from_fn(n_rows, n_cols, |i, j| columns[j][i]))
}

/// One record of the iteration history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// `|h_delta - K(a_j)|_2`
    pub misfit: f64,
    /// `|da_j|_2`
    pub step_norm: f64,
    pub alpha: f64,
    /// The discrepancy condition was met by the chosen α.
    pub alpha_qualified: bool,
    /// Times α was doubled because the step raised the misfit.
    pub backtracks: usize,
}

/// Working state of the iteration at step `j`.
#[derive(Debug, Clone)]
pub struct InversionState {
    pub a: ParamVector,
    /// `h_delta - K(a)`
    pub residual: DVector<f64>,
    /// `Q x S` sensitivity matrix.
    pub jacobian: DMatrix<f64>,
    pub step: Option<DVector<f64>>,
    pub iteration: usize,
    pub history: Vec<IterationRecord>,
}

impl InversionState {
    pub fn new(a: ParamVector, residual: DVector<f64>, jacobian: DMatrix<f64>) -> Result<Self> {
        if jacobian.nrows() != residual.len() || jacobian.ncols() != a.len() {
            return Err(FdotError::LinearAlgebra(format!(
                "sensitivity is {}x{} for {} residuals and {} parameters",
                jacobian.nrows(),
                jacobian.ncols(),
                residual.len(),
                a.len()
            )));
        }
        Ok(InversionState {
            a,
            residual,
            jacobian,
            step: None,
            iteration: 0,
            history: Vec::new(),
        })
    }
}

/// Solves `(alpha I + G^T G) da = G^T r` by Cholesky factorization.
pub fn lm_step(state: &InversionState, alpha: f64) -> Result<DVector<f64>> {
    solve_regularized(&state.jacobian, &state.residual, alpha)
}

pub(crate) fn solve_regularized(
    g: &DMatrix<f64>,
    r: &DVector<f64>,
    alpha: f64,
) -> Result<DVector<f64>> {
    if !(alpha > 0.0) {
        return Err(FdotError::Domain(format!("alpha must be > 0, got {alpha}")));
    }
    let gtg = g.tr_mul(g);
    let rhs = g.tr_mul(r);
    solve_normal(&gtg, &rhs, alpha)
}

fn solve_normal(gtg: &DMatrix<f64>, rhs: &DVector<f64>, alpha: f64) -> Result<DVector<f64>> {
    let n = gtg.nrows();
    let system = gtg + DMatrix::<f64>::identity(n, n) * alpha;
    let chol = system.cholesky().ok_or_else(|| {
        FdotError::LinearAlgebra("normal matrix is not positive definite (NaN contamination?)".into())
    })?;
    let step = chol.solve(rhs);
    if step.iter().all(|v| v.is_finite()) {
        Ok(step)
    } else {
        Err(FdotError::LinearAlgebra("non-finite step".into()))
    }
}

/// Outcome of the α search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaChoice {
    pub alpha: f64,
    /// `false` when no candidate met the discrepancy bound and the smallest
    /// candidate was returned.
    pub qualified: bool,
    pub linearized_residual: f64,
}

/// Target for the linearized residual: `max(rho * misfit, safety * delta)`.
pub fn discrepancy_bound(misfit: f64, delta: f64, safety: f64, rho: f64) -> f64 {
    (rho * misfit).max(safety * delta)
}

/// Largest α on the geometric grid whose linearized residual
/// `|r - G da(α)|_2` is at most `bound`.
pub fn choose_alpha(
    state: &InversionState,
    bound: f64,
    search: &AlphaSearch,
) -> Result<AlphaChoice> {
    choose_alpha_for(&state.jacobian, &state.residual, bound, search)
}

fn choose_alpha_for(
    g: &DMatrix<f64>,
    r: &DVector<f64>,
    bound: f64,
    search: &AlphaSearch,
) -> Result<AlphaChoice> {
    let gtg = g.tr_mul(g);
    let rhs = g.tr_mul(r);
    let n = gtg.nrows().max(1);
    let diag_mean = gtg.diagonal().iter().sum::<f64>() / n as f64;
    let alpha0 = if diag_mean > 0.0 {
        search.initial_scale * diag_mean
    } else {
        search.initial_scale
    };
    let mut last = None;
    for k in 0..search.count {
        let alpha = alpha0 * search.ratio.powi(k as i32);
        let step = solve_normal(&gtg, &rhs, alpha)?;
        let linearized = (r - g * &step).norm();
        if linearized <= bound {
            return Ok(AlphaChoice {
                alpha,
                qualified: true,
                linearized_residual: linearized,
            });
        }
        last = Some(AlphaChoice {
            alpha,
            qualified: false,
            linearized_residual: linearized,
        });
    }
    Ok(last.expect("count > 0"))
}

/// Minimum separation of box faces and related floors used by [`project`].
pub const MIN_EXTENT_MM: f64 = 1e-3;
pub const MIN_CONCENTRATION: f64 = 1e-6;
pub const MIN_COEFFICIENT: f64 = 1e-6;

fn order_interval(lo: &mut f64, hi: &mut f64) {
    if *lo > *hi {
        std::mem::swap(lo, hi);
    }
    if *hi - *lo < MIN_EXTENT_MM {
        let mid = 0.5 * (*lo + *hi);
        *lo = mid - 0.5 * MIN_EXTENT_MM;
        *hi = mid + 0.5 * MIN_EXTENT_MM;
    }
}

fn project_box(v: &mut [f64]) {
    // v = (a1, b1, a2, b2, a3, b3, P)
    for axis in 0..3 {
        let (lo, hi) = v.split_at_mut(2 * axis + 1);
        order_interval(&mut lo[2 * axis], &mut hi[0]);
    }
    if v[4] < MIN_EXTENT_MM {
        v[4] = MIN_EXTENT_MM;
    }
    if v[5] < v[4] + MIN_EXTENT_MM {
        v[5] = v[4] + MIN_EXTENT_MM;
    }
    v[6] = v[6].max(MIN_CONCENTRATION);
}

/// Maps a parameter vector back into the admissible set: inverted box faces
/// are swapped and separated, depths, sizes, concentration and optical
/// coefficients are floored.
pub fn project(v: &ParamVector) -> ParamVector {
    let mut out = v.clone();
    let x = &mut out.values;
    match &v.layout {
        Layout::Point4 => {
            x[2] = x[2].max(MIN_EXTENT_MM);
            x[3] = x[3].max(MIN_CONCENTRATION);
        }
        Layout::Cuboid7 => project_box(&mut x[..]),
        Layout::Joint9 => {
            x[0] = x[0].max(MIN_COEFFICIENT);
            x[1] = x[1].max(MIN_COEFFICIENT);
            project_box(&mut x[2..]);
        }
        Layout::GrowingCuboid { .. } => {
            x[3] = x[3].max(MIN_CONCENTRATION);
            let probes = probe_points();
            let side = |x: &[f64], u: f64| x[4..].iter().rev().fold(0.0, |acc, &c| acc * u + c);
            let min_side = probes.iter().map(|&u| side(x, u)).fold(f64::INFINITY, f64::min);
            if min_side < MIN_EXTENT_MM {
                x[4] += MIN_EXTENT_MM - min_side;
            }
            let max_half = probes.iter().map(|&u| 0.5 * side(x, u)).fold(0.0, f64::max);
            if x[2] - max_half < MIN_EXTENT_MM {
                x[2] = max_half + MIN_EXTENT_MM;
            }
        }
        Layout::MovingCuboid { center_degrees, .. } => {
            let n = x.len();
            x[n - 2] = x[n - 2].max(MIN_EXTENT_MM);
            x[n - 1] = x[n - 1].max(MIN_CONCENTRATION);
            let half = 0.5 * x[n - 2];
            let start = center_degrees[0] + center_degrees[1] + 2;
            let len = center_degrees[2] + 1;
            let depth = |x: &[f64], u: f64| {
                x[start..start + len]
                    .iter()
                    .rev()
                    .fold(0.0, |acc, &c| acc * u + c)
            };
            let min_depth = probe_points()
                .iter()
                .map(|&u| depth(x, u))
                .fold(f64::INFINITY, f64::min);
            if min_depth - half < MIN_EXTENT_MM {
                x[start] += half + MIN_EXTENT_MM - min_depth;
            }
        }
    }
    out
}

fn probe_points() -> Vec<f64> {
    (0..=64).map(|k| k as f64 / 64.0).collect()
}

/// Result of one reconstruction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub estimate: ParamVector,
    /// `|da_j|_2 <= eta` was reached before `max_iters`.
    pub converged: bool,
    pub iterations: usize,
    /// Misfit at the returned estimate.
    pub final_misfit: f64,
    /// Iterations after the third whose misfit rose.
    pub misfit_increases: usize,
    pub history: Vec<IterationRecord>,
}

/// Rescales the concentration of `a` (and the model data `k`) to the
/// optimum for the current geometry; unchanged when no valid optimum exists.
fn optimize_concentration(weighting: Weighting, h: &Measurement, a: &mut ParamVector, k: &mut Measurement) {
    let Some(f) = weighting.best_scale(h, k) else {
        return;
    };
    let index = a.layout.concentration_index();
    let rescaled = a.values[index] * f;
    if rescaled > 0.0 && rescaled.is_finite() {
        a.values[index] = rescaled;
        for v in k.data.iter_mut() {
            *v *= f;
        }
    }
}

/// Projects the concentration direction out of the other columns and zeroes
/// its own column, so the update leaves the (separately optimized)
/// concentration alone.
fn eliminate_concentration(jacobian: &mut DMatrix<f64>, index: usize) {
    let norm = jacobian.column(index).norm();
    if norm > 0.0 && norm.is_finite() {
        let u = jacobian.column(index) / norm;
        for s in 0..jacobian.ncols() {
            if s != index {
                let dot = u.dot(&jacobian.column(s));
                jacobian.column_mut(s).axpy(-dot, &u, 1.0);
            }
        }
    }
    jacobian.column_mut(index).fill(0.0);
}

/// Regularized Gauss–Newton iteration from `a0` for the data `h_delta`.
pub fn invert(
    h_delta: &Measurement,
    a0: &ParamVector,
    p: &OpticalParams,
    q: &QuadratureSpec,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    cfg.validate()?;
    q.validate()?;
    let acquisition = &h_delta.acquisition;
    let weighting = cfg.weighting;
    weighting.check_data(h_delta)?;
    let delta = match cfg.alpha {
        AlphaStrategy::Discrepancy { epsilon, .. } => weighting.noise_norm(h_delta, epsilon),
        AlphaStrategy::Fixed { .. } => 0.0,
    };
    let mut a = project(a0);
    a.decode().map_err(|e| FdotError::Iteration {
        iteration: 0,
        source: Box::new(e),
    })?;
    let mut history = Vec::new();
    let mut converged = false;
    let mut misfit_increases = 0;
    let wrap = |iteration: usize| move |e: FdotError| FdotError::Iteration {
        iteration,
        source: Box::new(e),
    };
    let misfit_of = |k: &Measurement| weighting.residual(h_delta, k).map(|r| r.norm());
    let mut k = forward::measure(&a, acquisition, p, q).map_err(wrap(0))?;
    let concentration = cfg.concentration.resolve(&a.layout);
    let projecting = concentration == ConcentrationUpdate::Projected;
    if concentration != ConcentrationUpdate::Regularized {
        optimize_concentration(weighting, h_delta, &mut a, &mut k);
    }
    let mut misfit = misfit_of(&k).map_err(wrap(0))?;
    for j in 0..cfg.max_iters {
        if let Some(tau) = cfg.discrepancy_stop {
            if delta > 0.0 && misfit <= tau * delta {
                converged = true;
                break;
            }
        }
        let residual = weighting.residual(h_delta, &k).map_err(wrap(j))?;
        let mut jacobian = sensitivity(&a, acquisition, p, q, cfg, Some(&k)).map_err(wrap(j))?;
        for (mut row, w) in jacobian.row_iter_mut().zip(weighting.row_scale(h_delta, &k)) {
            row *= w;
        }
        if projecting {
            eliminate_concentration(&mut jacobian, a.layout.concentration_index());
        }
        let mut state = InversionState::new(a.clone(), residual, jacobian)?;
        state.iteration = j;
        let (mut choice, guarded) = match cfg.alpha {
            AlphaStrategy::Fixed { alpha } => (
                AlphaChoice {
                    alpha,
                    qualified: true,
                    linearized_residual: f64::NAN,
                },
                false,
            ),
            AlphaStrategy::Discrepancy { safety, rho, .. } => {
                let bound = discrepancy_bound(misfit, delta, safety, rho);
                let choice = choose_alpha(&state, bound, &cfg.alpha_search).map_err(wrap(j))?;
                (choice, true)
            }
        };
        let mut backtracks = 0;
        let (step, next, k_next, misfit_next) = loop {
            let step = lm_step(&state, choice.alpha).map_err(wrap(j))?;
            if guarded && step.norm() > cfg.max_step_norm && backtracks < cfg.max_backtracks {
                backtracks += 1;
                choice.alpha /= cfg.alpha_search.ratio;
                continue;
            }
            let mut moved = a.clone();
            for (v, d) in moved.values.iter_mut().zip(step.iter()) {
                *v += d;
            }
            let mut moved = project(&moved);
            let evaluated = moved.decode().and_then(|_| {
                let mut k_new = forward::measure(&moved, acquisition, p, q)?;
                if projecting {
                    optimize_concentration(weighting, h_delta, &mut moved, &mut k_new);
                }
                let m = misfit_of(&k_new)?;
                Ok((k_new, m))
            });
            match evaluated {
                Ok((k_new, m)) => {
                    if !guarded || m <= misfit || backtracks >= cfg.max_backtracks {
                        break (step, moved, k_new, m);
                    }
                }
                Err(e) if !guarded || backtracks >= cfg.max_backtracks => {
                    return Err(wrap(j)(e));
                }
                Err(e) => debug!("iteration {j}: rejected step ({e})"),
            }
            backtracks += 1;
            choice.alpha /= cfg.alpha_search.ratio;
        };
        let step_norm = step.norm();
        if j >= 3 && misfit_next > misfit {
            misfit_increases += 1;
            debug!("iteration {j}: misfit rose from {misfit:e} to {misfit_next:e}");
        }
        history.push(IterationRecord {
            iteration: j,
            misfit,
            step_norm,
            alpha: choice.alpha,
            alpha_qualified: choice.qualified,
            backtracks,
        });
        a = next;
        k = k_next;
        misfit = misfit_next;
        if step_norm <= cfg.eta {
            converged = true;
            break;
        }
    }
    if misfit_increases > 0 {
        warn!("misfit increased in {misfit_increases} iterations");
    }
    Ok(InversionResult {
        estimate: a,
        converged,
        iterations: history.len(),
        final_misfit: misfit,
        misfit_increases,
        history,
    })
}

/// Relative L2 error `|a_exa - a_rec|_2 / |a_exa|_2`.
pub fn err_metric(exact: &ParamVector, recovered: &ParamVector) -> Result<f64> {
    if exact.layout != recovered.layout || exact.len() != recovered.len() {
        return Err(FdotError::LayoutMismatch {
            expected: exact.layout.name().into(),
            found: recovered.layout.name().into(),
        });
    }
    let diff: f64 = exact
        .values
        .iter()
        .zip(&recovered.values)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    Ok(diff / exact.norm())
}

/// One noisy reconstruction within [`multi_run`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub seed: u64,
    pub result: Option<InversionResult>,
    pub error: Option<String>,
    pub err: Option<f64>,
}

/// Averaged reconstruction over several noise realizations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiRunReport {
    pub epsilon: f64,
    pub average: ParamVector,
    /// Err of the componentwise mean.
    pub err: f64,
    pub runs: Vec<RunOutcome>,
    /// Number of runs excluded from the average.
    pub failed: usize,
}

/// Reconstructs from `h_exact` perturbed with noise level `epsilon` once
/// per seed and averages the successful estimates componentwise.
#[allow(clippy::too_many_arguments)]
pub fn multi_run(
    h_exact: &Measurement,
    exact: &ParamVector,
    a0: &ParamVector,
    p: &OpticalParams,
    q: &QuadratureSpec,
    cfg: &InversionConfig,
    epsilon: f64,
    seeds: &[u64],
) -> Result<MultiRunReport> {
    if seeds.is_empty() {
        return Err(FdotError::Domain("at least one run is required".into()));
    }
    let cfg = cfg.with_noise_level(epsilon);
    let runs: Vec<RunOutcome> = seeds
        .par_iter()
        .map(|&seed| {
            let noisy = add_noise(h_exact, &NoiseSpec { epsilon, seed });
            match invert(&noisy, a0, p, q, &cfg) {
                Ok(result) => RunOutcome {
                    seed,
                    err: err_metric(exact, &result.estimate).ok(),
                    result: Some(result),
                    error: None,
                },
                Err(e) => {
                    warn!("run with seed {seed} failed: {e}");
                    RunOutcome {
                        seed,
                        result: None,
                        error: Some(e.to_string()),
                        err: None,
                    }
                }
            }
        })
        .collect();
    let successes: Vec<&InversionResult> = runs.iter().filter_map(|r| r.result.as_ref()).collect();
    if successes.is_empty() {
        return Err(FdotError::Domain("every run failed".into()));
    }
    let n = successes.len() as f64;
    let mut mean = vec![0.0; exact.len()];
    for r in &successes {
        for (m, v) in mean.iter_mut().zip(&r.estimate.values) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let average = ParamVector::new(exact.layout.clone(), mean)?;
    Ok(MultiRunReport {
        epsilon,
        err: err_metric(exact, &average)?,
        failed: runs.len() - successes.len(),
        average,
        runs,
    })
}

/// History as CSV with a units header line.
pub fn history_csv(history: &[IterationRecord]) -> String {
    let mut out = String::from("iteration,misfit,step_norm,alpha,alpha_qualified,backtracks\n");
    for r in history {
        out.push_str(&format!(
            "{},{:e},{:e},{:e},{},{}\n",
            r.iteration, r.misfit, r.step_norm, r.alpha, r.alpha_qualified, r.backtracks
        ));
    }
    out
}
