//! Built-in experiment definitions and the data behind the published curves.
//!
//! A [`Scenario`] is a serializable description; [`Scenario::prepare`] turns
//! it into concrete inputs by locating per-pair peak times on the exact target
//! and, for time-dependent targets, fixing the gate window to the acquisition
//! span.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{FdotError, Result};
use crate::forward::{self, PeakConstants, QuadratureSpec};
use crate::inversion::NoiseSpec;
use crate::model::{
    Acquisition, BoundaryPoint, Cuboid, Layout, Measurement, OpticalParams, ParamVector, Poly,
    SdPair, Target, TimeGrid, TimeWindow,
};
use crate::peaks::{self, PeakFeatures};

/// Bumped whenever a builtin definition changes.
pub const REGISTRY_VERSION: u32 = 1;

pub const BUILTIN_IDS: [&str; 6] = ["ex1", "ex2", "ex3a", "ex3b", "ex4a", "ex4b"];

pub const SOURCES: [(f64, f64); 4] = [(-13.0, -13.0), (9.0, -13.0), (9.0, 9.0), (-13.0, 9.0)];
pub const DETECTORS: [(f64, f64); 8] = [
    (-13.0, -6.0),
    (-6.0, -18.0),
    (2.0, -18.0),
    (9.0, -6.0),
    (9.0, 2.0),
    (2.0, 14.0),
    (-6.0, 14.0),
    (-13.0, 2.0),
];

/// Window and pitch of the dense search for per-pair peak times.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PeakSearch {
    pub start_ps: f64,
    pub end_ps: f64,
    pub step_ps: f64,
}

impl Default for PeakSearch {
    fn default() -> Self {
        PeakSearch {
            start_ps: 1.0,
            end_ps: 5000.0,
            step_ps: 1.0,
        }
    }
}

/// How the sampling times are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AcquisitionSpec {
    Explicit(Acquisition),
    /// `t_peak - before*dt, .., t_peak + after*dt` around the peak of each
    /// pair. Time-dependent targets are located on their geometry at `u = 0`.
    PeakStencil {
        pairs: Vec<SdPair>,
        dt_ps: f64,
        before: usize,
        after: usize,
        #[serde(default)]
        search: PeakSearch,
    },
}

/// Parameter swept for the peak-approximation curves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Sweep {
    /// Depth `x_c3` of a point target (mm).
    Depth { values: Vec<f64> },
    /// Side length of a cube with fixed centre (mm).
    Side { values: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub id: String,
    #[serde(default = "registry_version")]
    pub version: u32,
    pub optical: OpticalParams,
    /// Exact target. For time-dependent targets the window is replaced by
    /// `[0, last sampling time]` during [`Scenario::prepare`].
    pub target: Target,
    pub layout: Layout,
    pub acquisition: AcquisitionSpec,
    pub noise: NoiseSpec,
    #[serde(default)]
    pub initial_guess: Option<Vec<f64>>,
    #[serde(default)]
    pub sweep: Option<Sweep>,
}

fn registry_version() -> u32 {
    REGISTRY_VERSION
}

/// Concrete inputs of a scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prepared {
    pub optical: OpticalParams,
    pub target: Target,
    pub acquisition: Acquisition,
    pub exact: ParamVector,
    pub initial: Option<ParamVector>,
    /// Peak of each pair used to centre its grid.
    pub peaks: Vec<PeakFeatures>,
}

fn pair(s: (f64, f64), d: (f64, f64)) -> SdPair {
    SdPair::new(BoundaryPoint::new(s.0, s.1), BoundaryPoint::new(d.0, d.1))
        .expect("distinct source and detector")
}

/// The 32 source-detector pairs, source-major.
pub fn ring_pairs() -> Vec<SdPair> {
    SOURCES
        .iter()
        .flat_map(|&s| DETECTORS.iter().map(move |&d| pair(s, d)))
        .collect()
}

fn ring_acquisition() -> AcquisitionSpec {
    AcquisitionSpec::PeakStencil {
        pairs: ring_pairs(),
        dt_ps: 2.0,
        before: 10,
        after: 9,
        search: PeakSearch::default(),
    }
}

fn single_pair_curve() -> AcquisitionSpec {
    let times: Vec<f64> = (1..=600).map(f64::from).collect();
    AcquisitionSpec::Explicit(
        Acquisition::new(
            vec![pair((-3.0, 0.0), (3.0, 0.0))],
            vec![TimeGrid::new(times).expect("increasing")],
        )
        .expect("one grid per pair"),
    )
}

fn example3_optics() -> OpticalParams {
    OpticalParams::reference()
        .with_scattering_absorption(10.0, 2.0)
        .expect("valid")
}

/// Placeholder replaced by the acquisition span in [`Scenario::prepare`].
fn unit_window() -> TimeWindow {
    TimeWindow::new(0.0, 1.0).expect("valid")
}

const EX3_GUESS: [f64; 7] = [-5.1, -4.9, -2.1, -1.9, 5.9, 6.1, 0.1];

/// Returns the built-in scenario `id`.
pub fn builtin(id: &str) -> Result<Scenario> {
    let noise = NoiseSpec {
        epsilon: 0.0,
        seed: 0,
    };
    let ex3_target = Target::Cuboid(
        Cuboid::new([-1.0, -1.0, 9.0], [1.0, 1.0, 11.0], 0.5).expect("valid box"),
    );
    let scenario = match id {
        "ex1" => {
            let mut depths = vec![0.05, 0.1];
            depths.extend((1..=24).map(|k| 0.25 * k as f64));
            Scenario {
                id: id.into(),
                version: REGISTRY_VERSION,
                optical: OpticalParams::reference(),
                target: Target::Point {
                    center: [0.0, 0.0, 5.0],
                    concentration: 1e6,
                },
                layout: Layout::Point4,
                acquisition: single_pair_curve(),
                noise,
                initial_guess: None,
                sweep: Some(Sweep::Depth { values: depths }),
            }
        }
        "ex2" => {
            let mut sides = vec![0.01, 0.02, 0.05];
            sides.extend((1..=10).map(|k| k as f64 / 10.0));
            Scenario {
                id: id.into(),
                version: REGISTRY_VERSION,
                optical: OpticalParams::reference(),
                target: Target::Cuboid(Cuboid::cube([0.0, 0.0, 5.0], 1.0, 1e6)?),
                layout: Layout::Cuboid7,
                acquisition: single_pair_curve(),
                noise,
                initial_guess: None,
                sweep: Some(Sweep::Side { values: sides }),
            }
        }
        "ex3a" => Scenario {
            id: id.into(),
            version: REGISTRY_VERSION,
            optical: example3_optics(),
            target: ex3_target,
            layout: Layout::Cuboid7,
            acquisition: ring_acquisition(),
            noise,
            initial_guess: Some(EX3_GUESS.to_vec()),
            sweep: None,
        },
        "ex3b" => {
            let mut guess = vec![5.0, 0.5];
            guess.extend_from_slice(&EX3_GUESS);
            Scenario {
                id: id.into(),
                version: REGISTRY_VERSION,
                optical: example3_optics(),
                target: ex3_target,
                layout: Layout::Joint9,
                acquisition: ring_acquisition(),
                noise,
                initial_guess: Some(guess),
                sweep: None,
            }
        }
        "ex4a" => Scenario {
            id: id.into(),
            version: REGISTRY_VERSION,
            optical: example3_optics(),
            target: Target::GrowingCuboid {
                center: [0.0, 0.0, 10.0],
                side: Poly::linear(0.5, 1.0),
                concentration: 0.5,
                window: unit_window(),
            },
            layout: Layout::GrowingCuboid {
                side_degree: 1,
                window: unit_window(),
            },
            acquisition: ring_acquisition(),
            noise,
            initial_guess: Some(vec![-2.0, -2.0, 5.0, 0.2, 0.1, 0.2]),
            sweep: None,
        },
        "ex4b" => Scenario {
            id: id.into(),
            version: REGISTRY_VERSION,
            optical: example3_optics(),
            target: Target::MovingCuboid {
                center: [
                    Poly::linear(-4.0, 6.0),
                    Poly::linear(-5.0, 8.0),
                    Poly::constant(8.0),
                ],
                side: 2.0,
                concentration: 0.5,
                window: unit_window(),
            },
            layout: Layout::MovingCuboid {
                center_degrees: [1, 1, 0],
                window: unit_window(),
            },
            acquisition: ring_acquisition(),
            noise,
            initial_guess: Some(vec![-1.0, 2.0, -2.0, 3.0, 4.0, 0.2, 0.1]),
            sweep: None,
        },
        other => {
            return Err(FdotError::UnknownScenario {
                id: other.into(),
                valid: BUILTIN_IDS.join(", "),
            })
        }
    };
    Ok(scenario)
}

fn with_window(target: &Target, w: TimeWindow) -> Target {
    match target.clone() {
        Target::GrowingCuboid {
            center,
            side,
            concentration,
            ..
        } => Target::GrowingCuboid {
            center,
            side,
            concentration,
            window: w,
        },
        Target::MovingCuboid {
            center,
            side,
            concentration,
            ..
        } => Target::MovingCuboid {
            center,
            side,
            concentration,
            window: w,
        },
        other => other,
    }
}

fn layout_with_window(layout: &Layout, w: TimeWindow) -> Layout {
    match layout.clone() {
        Layout::GrowingCuboid { side_degree, .. } => Layout::GrowingCuboid {
            side_degree,
            window: w,
        },
        Layout::MovingCuboid { center_degrees, .. } => Layout::MovingCuboid {
            center_degrees,
            window: w,
        },
        other => other,
    }
}

/// Geometry on which the sampling grids are centred: the target itself, or
/// its box at `u = 0` for time-dependent targets.
fn grid_geometry(target: &Target) -> Target {
    match (target.is_time_dependent(), target.box_at(0.0)) {
        (true, Some((lower, upper))) => Target::Cuboid(Cuboid {
            lower,
            upper,
            concentration: target.concentration(),
        }),
        _ => target.clone(),
    }
}

/// Per-pair grids `t_peak - before*dt .. t_peak + after*dt`, with `t_peak`
/// from a dense search plus quadratic refinement on `target`.
#[allow(clippy::too_many_arguments)]
pub fn acquisition_grids(
    pairs: &[SdPair],
    target: &Target,
    dt_ps: f64,
    before: usize,
    after: usize,
    search: &PeakSearch,
    p: &OpticalParams,
    q: &QuadratureSpec,
) -> Result<(Vec<TimeGrid>, Vec<PeakFeatures>)> {
    let geometry = grid_geometry(target);
    let peaks = pairs
        .par_iter()
        .map(|pair| {
            peaks::dense_peak(
                pair,
                &geometry,
                search.start_ps,
                search.end_ps,
                search.step_ps,
                p,
                q,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let grids = peaks
        .iter()
        .map(|pk| TimeGrid::stencil(pk.t_peak_ps, dt_ps, before, after))
        .collect::<Result<Vec<_>>>()?;
    Ok((grids, peaks))
}

impl Scenario {
    /// Checks the scenario invariants without evaluating the forward model.
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(FdotError::Scenario("empty id".into()));
        }
        self.target.validate()?;
        ParamVector::encode(&self.target, &self.optical, &self.layout)?;
        if let Some(guess) = &self.initial_guess {
            ParamVector::new(self.layout.clone(), guess.clone())?;
        }
        if !(self.noise.epsilon >= 0.0) {
            return Err(FdotError::Scenario(format!(
                "noise level {} must be >= 0",
                self.noise.epsilon
            )));
        }
        match &self.acquisition {
            AcquisitionSpec::Explicit(acq) => acq.validate(),
            AcquisitionSpec::PeakStencil {
                pairs,
                dt_ps,
                search,
                ..
            } => {
                if pairs.is_empty() {
                    return Err(FdotError::Scenario("no source-detector pairs".into()));
                }
                if !(*dt_ps > 0.0) || !(search.step_ps > 0.0 && search.end_ps > search.start_ps) {
                    return Err(FdotError::Scenario("invalid time stencil".into()));
                }
                pairs.iter().try_for_each(SdPair::validate)
            }
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario =
            serde_json::from_str(text).map_err(|e| FdotError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    /// Resolves the acquisition, the gate window and the parameter vectors.
    pub fn prepare(&self, q: &QuadratureSpec) -> Result<Prepared> {
        self.validate()?;
        let p = &self.optical;
        let (acquisition, peaks) = match &self.acquisition {
            AcquisitionSpec::Explicit(acq) => (acq.clone(), Vec::new()),
            AcquisitionSpec::PeakStencil {
                pairs,
                dt_ps,
                before,
                after,
                search,
            } => {
                let (grids, peaks) =
                    acquisition_grids(pairs, &self.target, *dt_ps, *before, *after, search, p, q)?;
                (Acquisition::new(pairs.clone(), grids)?, peaks)
            }
        };
        let (target, layout) = if self.target.is_time_dependent() {
            let end = acquisition
                .last_time()
                .ok_or_else(|| FdotError::Scenario("empty acquisition".into()))?;
            let w = TimeWindow::new(0.0, end)?;
            (with_window(&self.target, w), layout_with_window(&self.layout, w))
        } else {
            (self.target.clone(), self.layout.clone())
        };
        target.validate()?;
        let exact = ParamVector::encode(&target, p, &layout)?;
        let initial = self
            .initial_guess
            .as_ref()
            .map(|g| ParamVector::new(layout.clone(), g.clone()))
            .transpose()?;
        Ok(Prepared {
            optical: *p,
            target,
            acquisition,
            exact,
            initial,
            peaks,
        })
    }
}

impl Prepared {
    /// Noise-free data on the exact target.
    pub fn exact_data(&self, q: &QuadratureSpec) -> Result<Measurement> {
        forward::simulate(&self.target, &self.acquisition, &self.optical, q)
    }
}

/// A plot-ready table; column names carry their units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub name: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

fn rel_err(exact: f64, approx: f64) -> f64 {
    (exact - approx).abs() / exact.abs()
}

/// Exact TPSF peak: dense search at 1 ps, then golden-section refinement.
pub fn exact_peak(
    pair: &SdPair,
    target: &Target,
    p: &OpticalParams,
    q: &QuadratureSpec,
) -> Result<PeakFeatures> {
    let s = PeakSearch::default();
    let coarse = peaks::dense_peak(pair, target, s.start_ps, s.end_ps, s.step_ps, p, q)?;
    let lo = (coarse.t_peak_ps - 2.0 * s.step_ps).max(0.5 * s.start_ps);
    peaks::refine_peak(pair, target, lo, coarse.t_peak_ps + 2.0 * s.step_ps, 1e-6, p, q)
}

fn single_pair(scenario: &Scenario) -> Result<SdPair> {
    match &scenario.acquisition {
        AcquisitionSpec::Explicit(acq) if acq.pairs.len() == 1 => Ok(acq.pairs[0]),
        _ => Err(FdotError::Scenario(format!(
            "scenario `{}` has no single-pair configuration",
            scenario.id
        ))),
    }
}

/// Point-target sweep: exact and approximate peak time and intensity.
pub fn depth_sweep_table(scenario: &Scenario, q: &QuadratureSpec) -> Result<Table> {
    let Some(Sweep::Depth { values }) = &scenario.sweep else {
        return Err(FdotError::Scenario("no depth sweep".into()));
    };
    let pair = single_pair(scenario)?;
    let p = &scenario.optical;
    let conc = scenario.target.concentration();
    let rows = values
        .par_iter()
        .map(|&depth| -> Result<Vec<f64>> {
            let center = [0.0, 0.0, depth];
            let target = Target::Point {
                center,
                concentration: conc,
            };
            let exact = exact_peak(&pair, &target, p, q)?;
            let pc = PeakConstants::new(&pair, center, p);
            let t_approx = peaks::peak_time_approx(&pc, p);
            let u_approx = peaks::peak_intensity_approx(&pc, t_approx, conc, p);
            Ok(vec![
                depth,
                exact.t_peak_ps,
                t_approx,
                rel_err(exact.t_peak_ps, t_approx),
                exact.u_peak,
                u_approx,
                rel_err(exact.u_peak, u_approx),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Table {
        name: format!("{}_peak_sweep", scenario.id),
        columns: [
            "depth_mm",
            "t_peak_exact_ps",
            "t_peak_approx_ps",
            "t_peak_rel_err",
            "u_peak_exact",
            "u_peak_approx",
            "u_peak_rel_err",
        ]
        .map(String::from)
        .to_vec(),
        rows,
    })
}

/// Cube sweep: exact cube peak against the point target at its centre,
/// intensity scaled by the cube volume.
pub fn side_sweep_table(scenario: &Scenario, q: &QuadratureSpec) -> Result<Table> {
    let Some(Sweep::Side { values }) = &scenario.sweep else {
        return Err(FdotError::Scenario("no side-length sweep".into()));
    };
    let pair = single_pair(scenario)?;
    let p = &scenario.optical;
    let conc = scenario.target.concentration();
    let center = match &scenario.target {
        Target::Cuboid(c) => c.center(),
        _ => return Err(FdotError::Scenario("side sweep needs a cuboid target".into())),
    };
    let point = Target::Point {
        center,
        concentration: conc,
    };
    let point_peak = exact_peak(&pair, &point, p, q)?;
    let pc = PeakConstants::new(&pair, center, p);
    let t_formula = peaks::peak_time_approx(&pc, p);
    let u_formula = peaks::peak_intensity_approx(&pc, t_formula, conc, p);
    let rows = values
        .par_iter()
        .map(|&side| -> Result<Vec<f64>> {
            let cube = Cuboid::cube(center, side, conc)?;
            let volume = cube.volume();
            let exact = exact_peak(&pair, &Target::Cuboid(cube), p, q)?;
            Ok(vec![
                side,
                exact.t_peak_ps,
                point_peak.t_peak_ps,
                rel_err(exact.t_peak_ps, point_peak.t_peak_ps),
                t_formula,
                exact.u_peak,
                volume * point_peak.u_peak,
                rel_err(exact.u_peak, volume * point_peak.u_peak),
                volume * u_formula,
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Table {
        name: format!("{}_peak_sweep", scenario.id),
        columns: [
            "side_mm",
            "t_peak_cube_ps",
            "t_peak_point_ps",
            "t_peak_rel_err",
            "t_peak_formula_ps",
            "u_peak_cube",
            "u_peak_point_scaled",
            "u_peak_rel_err",
            "u_peak_formula_scaled",
        ]
        .map(String::from)
        .to_vec(),
        rows,
    })
}

/// TPSF of the scenario target sampled on its acquisition grids.
pub fn tpsf_table(prepared: &Prepared, name: &str, q: &QuadratureSpec) -> Result<Table> {
    let m = prepared.exact_data(q)?;
    let rows = prepared
        .acquisition
        .entries()
        .iter()
        .zip(&m.data)
        .map(|(&(k, t), &u)| vec![k as f64, t, u])
        .collect();
    Ok(Table {
        name: name.into(),
        columns: ["pair_index", "t_ps", "u_m"].map(String::from).to_vec(),
        rows,
    })
}

/// Tables behind the published curves of scenario `id`.
pub fn figure_data(id: &str, q: &QuadratureSpec) -> Result<Vec<Table>> {
    let scenario = builtin(id)?;
    let prepared = scenario.prepare(q)?;
    let mut tables = vec![tpsf_table(&prepared, &format!("{id}_tpsf"), q)?];
    match &scenario.sweep {
        Some(Sweep::Depth { .. }) => tables.push(depth_sweep_table(&scenario, q)?),
        Some(Sweep::Side { .. }) => tables.push(side_sweep_table(&scenario, q)?),
        None => {}
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_ids_resolve() {
        for id in BUILTIN_IDS {
            let s = builtin(id).unwrap();
            assert_eq!(s.id, id);
            s.validate().unwrap();
        }
        match builtin("ex9") {
            Err(FdotError::UnknownScenario { valid, .. }) => assert!(valid.contains("ex3a")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn example3_target_and_pairs() {
        let s = builtin("ex3a").unwrap();
        assert_eq!(
            s.target,
            Target::Cuboid(Cuboid::new([-1.0, -1.0, 9.0], [1.0, 1.0, 11.0], 0.5).unwrap())
        );
        assert_eq!(s.optical.mu_s(), 10.0);
        assert_eq!(s.optical.mu_a(), 2.0);
        let pairs = ring_pairs();
        assert_eq!(pairs.len(), 32);
        assert_eq!(pairs[0].source, BoundaryPoint::new(-13.0, -13.0));
        assert_eq!(pairs[31].detector, BoundaryPoint::new(-13.0, 2.0));
    }

    #[test]
    fn example1_definition() {
        let s = builtin("ex1").unwrap();
        assert_eq!(
            s.target,
            Target::Point {
                center: [0.0, 0.0, 5.0],
                concentration: 1e6
            }
        );
        let Some(Sweep::Depth { values }) = s.sweep else { panic!() };
        assert_eq!(values.first(), Some(&0.05));
        assert_eq!(values.last(), Some(&6.0));
        let Some(Sweep::Side { values }) = builtin("ex2").unwrap().sweep else { panic!() };
        assert_eq!(values.first(), Some(&0.01));
        assert!((values.last().unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn json_round_trip() {
        for id in BUILTIN_IDS {
            let s = builtin(id).unwrap();
            let back = Scenario::from_json(&s.to_json()).unwrap();
            assert_eq!(back, s);
            assert_eq!(back.to_json(), s.to_json());
        }
    }

    #[test]
    fn invalid_json_is_a_scenario_error() {
        assert!(matches!(
            Scenario::from_json("{\"id\": 3}"),
            Err(FdotError::Scenario(_))
        ));
    }

    #[test]
    fn table_csv_layout() {
        let t = Table {
            name: "x".into(),
            columns: vec!["a_mm".into(), "b_ps".into()],
            rows: vec![vec![1.0, 2.5]],
        };
        assert_eq!(t.to_csv(), "a_mm,b_ps\n1e0,2.5e0\n");
        assert_eq!(t.column("b_ps"), Some(vec![2.5]));
    }
}
