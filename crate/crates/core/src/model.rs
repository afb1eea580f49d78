//! Domain types shared by the forward and inverse engines.
//!
//! Units throughout: millimetres for length, picoseconds for time and
//! inverse millimetres for optical coefficients and concentrations.

use serde::{Deserialize, Serialize};

use crate::error::{FdotError, Result};

/// Homogeneous optical properties of the diffusive half-space.
///
/// `mu_s_prime` and `mu_d` are derived from `mu_s` and `g` at construction
/// and cannot be set independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "OpticalParamsSpec", into = "OpticalParamsSpec")]
pub struct OpticalParams {
    c_mm_per_ps: f64,
    mu_a: f64,
    mu_s: f64,
    g: f64,
    beta: f64,
    tau_ps: f64,
    mu_s_prime: f64,
    mu_d: f64,
}

/// Serialized form of [`OpticalParams`]; only independent quantities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticalParamsSpec {
    pub c_mm_per_ps: f64,
    pub mu_a_per_mm: f64,
    pub mu_s_per_mm: f64,
    pub g: f64,
    pub beta_per_mm: f64,
    #[serde(default)]
    pub tau_ps: f64,
}

impl TryFrom<OpticalParamsSpec> for OpticalParams {
    type Error = FdotError;

    fn try_from(s: OpticalParamsSpec) -> Result<Self> {
        OpticalParams::new(s.c_mm_per_ps, s.mu_a_per_mm, s.mu_s_per_mm, s.g, s.beta_per_mm)
            .and_then(|p| {
                if s.tau_ps != 0.0 {
                    Err(FdotError::InvalidOptics {
                        field: "tau_ps",
                        reason: "only the zero-lifetime model is supported".into(),
                    })
                } else {
                    Ok(p)
                }
            })
    }
}

impl From<OpticalParams> for OpticalParamsSpec {
    fn from(p: OpticalParams) -> Self {
        OpticalParamsSpec {
            c_mm_per_ps: p.c_mm_per_ps,
            mu_a_per_mm: p.mu_a,
            mu_s_per_mm: p.mu_s,
            g: p.g,
            beta_per_mm: p.beta,
            tau_ps: p.tau_ps,
        }
    }
}

fn positive(field: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() && v > 0.0 {
        Ok(v)
    } else {
        Err(FdotError::InvalidOptics {
            field,
            reason: format!("must be finite and > 0, got {v}"),
        })
    }
}

impl OpticalParams {
    /// Anisotropy assumed by the built-in scenarios; with `mu_s = 10 /mm`
    /// it gives the reduced scattering `mu_s' = 1 /mm`.
    pub const DEFAULT_ANISOTROPY: f64 = 0.9;

    pub fn new(c_mm_per_ps: f64, mu_a: f64, mu_s: f64, g: f64, beta: f64) -> Result<Self> {
        positive("c_mm_per_ps", c_mm_per_ps)?;
        positive("mu_a_per_mm", mu_a)?;
        positive("mu_s_per_mm", mu_s)?;
        positive("beta_per_mm", beta)?;
        if !(g.is_finite() && (0.0..1.0).contains(&g)) {
            return Err(FdotError::InvalidOptics {
                field: "g",
                reason: format!("anisotropy must lie in [0, 1), got {g}"),
            });
        }
        let mu_s_prime = mu_s * (1.0 - g);
        Ok(OpticalParams {
            c_mm_per_ps,
            mu_a,
            mu_s,
            g,
            beta,
            tau_ps: 0.0,
            mu_s_prime,
            mu_d: 1.0 / (3.0 * mu_s_prime),
        })
    }

    /// c = 0.219 mm/ps, mu_s' = 1 /mm, mu_a = 0.1 /mm, beta = 0.01 /mm.
    pub fn reference() -> Self {
        Self::new(0.219, 0.1, 10.0, Self::DEFAULT_ANISOTROPY, 0.01).expect("valid constants")
    }

    pub fn with_scattering_absorption(&self, mu_s: f64, mu_a: f64) -> Result<Self> {
        Self::new(self.c_mm_per_ps, mu_a, mu_s, self.g, self.beta)
    }

    pub fn with_beta(&self, beta: f64) -> Result<Self> {
        Self::new(self.c_mm_per_ps, self.mu_a, self.mu_s, self.g, beta)
    }

    pub fn c_mm_per_ps(&self) -> f64 {
        self.c_mm_per_ps
    }
    pub fn mu_a(&self) -> f64 {
        self.mu_a
    }
    pub fn mu_s(&self) -> f64 {
        self.mu_s
    }
    pub fn g(&self) -> f64 {
        self.g
    }
    pub fn beta(&self) -> f64 {
        self.beta
    }
    pub fn tau_ps(&self) -> f64 {
        self.tau_ps
    }
    pub fn mu_s_prime(&self) -> f64 {
        self.mu_s_prime
    }
    pub fn mu_d(&self) -> f64 {
        self.mu_d
    }

    /// Diffusivity `c * mu_D` in mm^2/ps.
    pub fn diffusivity(&self) -> f64 {
        self.c_mm_per_ps * self.mu_d
    }

    /// Absorption rate `c * mu_a` in 1/ps.
    pub fn absorption_rate(&self) -> f64 {
        self.c_mm_per_ps * self.mu_a
    }
}

/// A point on the boundary plane x3 = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub x1: f64,
    pub x2: f64,
}

impl BoundaryPoint {
    pub const fn new(x1: f64, x2: f64) -> Self {
        BoundaryPoint { x1, x2 }
    }

    pub fn lift(&self) -> [f64; 3] {
        [self.x1, self.x2, 0.0]
    }

    pub fn distance(&self, other: &BoundaryPoint) -> f64 {
        (self.x1 - other.x1).hypot(self.x2 - other.x2)
    }

    pub fn is_finite(&self) -> bool {
        self.x1.is_finite() && self.x2.is_finite()
    }
}

/// Source-detector pair on the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdPair {
    pub source: BoundaryPoint,
    pub detector: BoundaryPoint,
}

impl SdPair {
    pub fn new(source: BoundaryPoint, detector: BoundaryPoint) -> Result<Self> {
        let pair = SdPair { source, detector };
        pair.validate()?;
        Ok(pair)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.source.is_finite() || !self.detector.is_finite() {
            return Err(FdotError::InvalidGeometry("non-finite S-D coordinate".into()));
        }
        if self.source == self.detector {
            return Err(FdotError::InvalidGeometry(
                "source and detector coincide".into(),
            ));
        }
        Ok(())
    }

    pub fn swapped(&self) -> Self {
        SdPair {
            source: self.detector,
            detector: self.source,
        }
    }

    pub fn separation(&self) -> f64 {
        self.source.distance(&self.detector)
    }

    pub fn midpoint(&self) -> BoundaryPoint {
        BoundaryPoint::new(
            0.5 * (self.source.x1 + self.detector.x1),
            0.5 * (self.source.x2 + self.detector.x2),
        )
    }
}

/// Polynomial in normalized gate time `u`, coefficients in increasing degree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Poly {
    pub coeffs: Vec<f64>,
}

impl Poly {
    pub fn new(coeffs: Vec<f64>) -> Self {
        Poly { coeffs }
    }

    pub fn constant(v: f64) -> Self {
        Poly { coeffs: vec![v] }
    }

    pub fn linear(c0: f64, c1: f64) -> Self {
        Poly {
            coeffs: vec![c0, c1],
        }
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len().saturating_sub(1)
    }

    pub fn eval(&self, u: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &c| acc * u + c)
    }
}

/// Time window mapping acquisition time onto normalized gate time
/// `u = (t - start) / (end - start)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeWindow {
    pub start_ps: f64,
    pub end_ps: f64,
}

impl TimeWindow {
    pub fn new(start_ps: f64, end_ps: f64) -> Result<Self> {
        if !(start_ps.is_finite() && end_ps.is_finite() && end_ps > start_ps) {
            return Err(FdotError::InvalidGeometry(format!(
                "time window [{start_ps}, {end_ps}] is empty"
            )));
        }
        Ok(TimeWindow { start_ps, end_ps })
    }

    pub fn normalize(&self, t_ps: f64) -> f64 {
        (t_ps - self.start_ps) / (self.end_ps - self.start_ps)
    }
}

/// Axis-aligned box `(lower[i], upper[i])` per axis with uniform concentration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cuboid {
    pub lower: [f64; 3],
    pub upper: [f64; 3],
    pub concentration: f64,
}

impl Cuboid {
    pub fn new(lower: [f64; 3], upper: [f64; 3], concentration: f64) -> Result<Self> {
        let c = Cuboid {
            lower,
            upper,
            concentration,
        };
        c.validate()?;
        Ok(c)
    }

    /// Cube of side `side` centred at `center`.
    pub fn cube(center: [f64; 3], side: f64, concentration: f64) -> Result<Self> {
        let h = 0.5 * side;
        Self::new(
            [center[0] - h, center[1] - h, center[2] - h],
            [center[0] + h, center[1] + h, center[2] + h],
            concentration,
        )
    }

    pub fn validate(&self) -> Result<()> {
        for axis in 0..3 {
            let (a, b) = (self.lower[axis], self.upper[axis]);
            if !(a.is_finite() && b.is_finite() && a < b) {
                return Err(FdotError::InvalidParameter {
                    index: 2 * axis,
                    reason: format!("axis {} bounds ({a}, {b}) are not increasing", axis + 1),
                });
            }
        }
        if self.lower[2] <= 0.0 {
            return Err(FdotError::InvalidParameter {
                index: 4,
                reason: format!("lower depth {} must be > 0", self.lower[2]),
            });
        }
        check_concentration(self.concentration, 6)
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|i| self.upper[i] - self.lower[i]).product()
    }

    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| 0.5 * (self.lower[i] + self.upper[i]))
    }

    /// Hausdorff distance between two solid boxes.
    pub fn hausdorff(&self, other: &Cuboid) -> f64 {
        fn directed(from: &Cuboid, to: &Cuboid) -> f64 {
            // distance to a convex set is convex, so the sup is at a vertex
            let mut worst: f64 = 0.0;
            for mask in 0..8 {
                let mut d2 = 0.0;
                for axis in 0..3 {
                    let v = if mask & (1 << axis) == 0 {
                        from.lower[axis]
                    } else {
                        from.upper[axis]
                    };
                    let gap = (to.lower[axis] - v).max(v - to.upper[axis]).max(0.0);
                    d2 += gap * gap;
                }
                worst = worst.max(d2.sqrt());
            }
            worst
        }
        directed(self, other).max(directed(other, self))
    }
}

fn check_concentration(p: f64, index: usize) -> Result<()> {
    if p.is_finite() && p > 0.0 {
        Ok(())
    } else {
        Err(FdotError::InvalidParameter {
            index,
            reason: format!("concentration {p} must be > 0"),
        })
    }
}

/// Fluorescent target families.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Target {
    Point {
        center: [f64; 3],
        concentration: f64,
    },
    Cuboid(Cuboid),
    /// Cube of fixed side whose centre follows polynomials in gate time.
    MovingCuboid {
        center: [Poly; 3],
        side: f64,
        concentration: f64,
        window: TimeWindow,
    },
    /// Cube with fixed centre whose side follows a polynomial in gate time.
    GrowingCuboid {
        center: [f64; 3],
        side: Poly,
        concentration: f64,
        window: TimeWindow,
    },
}

/// Number of interior probes used to check time-dependent geometry.
const GEOMETRY_PROBES: usize = 64;

impl Target {
    pub fn concentration(&self) -> f64 {
        match self {
            Target::Point { concentration, .. }
            | Target::MovingCuboid { concentration, .. }
            | Target::GrowingCuboid { concentration, .. } => *concentration,
            Target::Cuboid(c) => c.concentration,
        }
    }

    pub fn is_time_dependent(&self) -> bool {
        matches!(
            self,
            Target::MovingCuboid { .. } | Target::GrowingCuboid { .. }
        )
    }

    /// Box occupied at normalized gate time `u`; `None` for point targets.
    /// Static cuboids ignore `u`.
    pub fn box_at(&self, u: f64) -> Option<([f64; 3], [f64; 3])> {
        match self {
            Target::Point { .. } => None,
            Target::Cuboid(c) => Some((c.lower, c.upper)),
            Target::MovingCuboid { center, side, .. } => {
                let h = 0.5 * side;
                let c = [center[0].eval(u), center[1].eval(u), center[2].eval(u)];
                Some((c.map(|x| x - h), c.map(|x| x + h)))
            }
            Target::GrowingCuboid { center, side, .. } => {
                let h = 0.5 * side.eval(u);
                Some((center.map(|x| x - h), center.map(|x| x + h)))
            }
        }
    }

    /// Box at acquisition time `t_ps` as a [`Cuboid`].
    pub fn cuboid_at_time(&self, t_ps: f64) -> Option<Cuboid> {
        let u = match self {
            Target::MovingCuboid { window, .. } | Target::GrowingCuboid { window, .. } => {
                window.normalize(t_ps)
            }
            _ => 0.0,
        };
        self.box_at(u).map(|(lower, upper)| Cuboid {
            lower,
            upper,
            concentration: self.concentration(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Target::Point {
                center,
                concentration,
            } => {
                if !center.iter().all(|x| x.is_finite()) || center[2] <= 0.0 {
                    return Err(FdotError::InvalidParameter {
                        index: 2,
                        reason: format!("point depth {} must be > 0", center[2]),
                    });
                }
                check_concentration(*concentration, 3)
            }
            Target::Cuboid(c) => c.validate(),
            Target::MovingCuboid {
                center,
                side,
                concentration,
                ..
            } => {
                let n_coeffs: usize = center.iter().map(|p| p.coeffs.len()).sum();
                if center.iter().any(|p| p.coeffs.is_empty()) {
                    return Err(FdotError::InvalidGeometry(
                        "centre polynomial without coefficients".into(),
                    ));
                }
                if !(side.is_finite() && *side > 0.0) {
                    return Err(FdotError::InvalidParameter {
                        index: n_coeffs,
                        reason: format!("side {side} must be > 0"),
                    });
                }
                check_concentration(*concentration, n_coeffs + 1)?;
                self.check_window_geometry()
            }
            Target::GrowingCuboid {
                center,
                side,
                concentration,
                ..
            } => {
                if !center.iter().all(|x| x.is_finite()) {
                    return Err(FdotError::InvalidParameter {
                        index: 0,
                        reason: "non-finite centre".into(),
                    });
                }
                if side.coeffs.is_empty() {
                    return Err(FdotError::InvalidGeometry(
                        "side polynomial without coefficients".into(),
                    ));
                }
                check_concentration(*concentration, 3)?;
                self.check_window_geometry()
            }
        }
    }

    fn check_window_geometry(&self) -> Result<()> {
        for k in 0..=GEOMETRY_PROBES {
            let u = k as f64 / GEOMETRY_PROBES as f64;
            let (lower, upper) = self.box_at(u).expect("cuboid family");
            let ok = (0..3).all(|i| lower[i].is_finite() && upper[i].is_finite() && lower[i] < upper[i])
                && lower[2] > 0.0;
            if !ok {
                return Err(FdotError::GeometryOutsideDomain { u });
            }
        }
        Ok(())
    }
}

/// Ordering of the unknowns in a parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Layout {
    /// `(x_c1, x_c2, x_c3, P)`
    Point4,
    /// `(a1, b1, a2, b2, a3, b3, P)`
    Cuboid7,
    /// `(mu_s, mu_a, a1, b1, a2, b2, a3, b3, P)`
    Joint9,
    /// `(x_c1, x_c2, x_c3, P, L_0, .., L_d)`
    GrowingCuboid { side_degree: usize, window: TimeWindow },
    /// `(x_c1 coeffs, x_c2 coeffs, x_c3 coeffs, L, P)`
    MovingCuboid {
        center_degrees: [usize; 3],
        window: TimeWindow,
    },
}

impl Layout {
    pub fn len(&self) -> usize {
        match self {
            Layout::Point4 => 4,
            Layout::Cuboid7 => 7,
            Layout::Joint9 => 9,
            Layout::GrowingCuboid { side_degree, .. } => 5 + side_degree,
            Layout::MovingCuboid { center_degrees, .. } => {
                center_degrees.iter().map(|d| d + 1).sum::<usize>() + 2
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn name(&self) -> &'static str {
        match self {
            Layout::Point4 => "point4",
            Layout::Cuboid7 => "cuboid7",
            Layout::Joint9 => "joint9",
            Layout::GrowingCuboid { .. } => "growing_cuboid",
            Layout::MovingCuboid { .. } => "moving_cuboid",
        }
    }

    /// Whether the optical coefficients are among the unknowns.
    pub fn has_optics(&self) -> bool {
        matches!(self, Layout::Joint9)
    }

    /// Index of the concentration `P` in the vector.
    pub fn concentration_index(&self) -> usize {
        match self {
            Layout::Point4 => 3,
            Layout::Cuboid7 => 6,
            Layout::Joint9 => 8,
            Layout::GrowingCuboid { .. } => 3,
            Layout::MovingCuboid { .. } => self.len() - 1,
        }
    }

    /// Human-readable name of each component.
    pub fn labels(&self) -> Vec<String> {
        let box_labels = ["a1", "b1", "a2", "b2", "a3", "b3", "P"];
        match self {
            Layout::Point4 => ["xc1", "xc2", "xc3", "P"].map(String::from).to_vec(),
            Layout::Cuboid7 => box_labels.map(String::from).to_vec(),
            Layout::Joint9 => ["mu_s", "mu_a"]
                .into_iter()
                .chain(box_labels)
                .map(String::from)
                .collect(),
            Layout::GrowingCuboid { side_degree, .. } => {
                let mut v: Vec<String> = ["xc1", "xc2", "xc3", "P"].map(String::from).to_vec();
                v.extend((0..=*side_degree).map(|k| format!("L_{k}")));
                v
            }
            Layout::MovingCuboid { center_degrees, .. } => {
                let mut v = Vec::new();
                for (axis, d) in center_degrees.iter().enumerate() {
                    v.extend((0..=*d).map(|k| format!("xc{}_{k}", axis + 1)));
                }
                v.push("L".into());
                v.push("P".into());
                v
            }
        }
    }
}

/// Finite-dimensional encoding of a target (and optionally optics).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub layout: Layout,
    pub values: Vec<f64>,
}

fn mismatch(layout: &Layout, target: &Target) -> FdotError {
    let found = match target {
        Target::Point { .. } => "point",
        Target::Cuboid(_) => "cuboid",
        Target::MovingCuboid { .. } => "moving_cuboid",
        Target::GrowingCuboid { .. } => "growing_cuboid",
    };
    FdotError::LayoutMismatch {
        expected: layout.name().into(),
        found: found.into(),
    }
}

fn cuboid_values(c: &Cuboid) -> [f64; 7] {
    [
        c.lower[0],
        c.upper[0],
        c.lower[1],
        c.upper[1],
        c.lower[2],
        c.upper[2],
        c.concentration,
    ]
}

impl ParamVector {
    pub fn new(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(FdotError::LayoutMismatch {
                expected: format!("{} values for {}", layout.len(), layout.name()),
                found: format!("{} values", values.len()),
            });
        }
        Ok(ParamVector { layout, values })
    }

    /// Encodes `target` (and for [`Layout::Joint9`], the scattering and
    /// absorption of `optics`) in the ordering documented on [`Layout`].
    pub fn encode(target: &Target, optics: &OpticalParams, layout: &Layout) -> Result<Self> {
        let values = match (layout, target) {
            (
                Layout::Point4,
                Target::Point {
                    center,
                    concentration,
                },
            ) => vec![center[0], center[1], center[2], *concentration],
            (Layout::Cuboid7, Target::Cuboid(c)) => cuboid_values(c).to_vec(),
            (Layout::Joint9, Target::Cuboid(c)) => {
                let mut v = vec![optics.mu_s(), optics.mu_a()];
                v.extend_from_slice(&cuboid_values(c));
                v
            }
            (
                Layout::GrowingCuboid {
                    side_degree,
                    window: lw,
                },
                Target::GrowingCuboid {
                    center,
                    side,
                    concentration,
                    window,
                },
            ) => {
                if side.degree() != *side_degree || side.coeffs.is_empty() || lw != window {
                    return Err(mismatch(layout, target));
                }
                let mut v = center.to_vec();
                v.push(*concentration);
                v.extend_from_slice(&side.coeffs);
                v
            }
            (
                Layout::MovingCuboid {
                    center_degrees,
                    window: lw,
                },
                Target::MovingCuboid {
                    center,
                    side,
                    concentration,
                    window,
                },
            ) => {
                let degrees_match = center
                    .iter()
                    .zip(center_degrees)
                    .all(|(p, d)| !p.coeffs.is_empty() && p.degree() == *d);
                if !degrees_match || lw != window {
                    return Err(mismatch(layout, target));
                }
                let mut v: Vec<f64> = center.iter().flat_map(|p| p.coeffs.clone()).collect();
                v.push(*side);
                v.push(*concentration);
                v
            }
            _ => return Err(mismatch(layout, target)),
        };
        Ok(ParamVector {
            layout: layout.clone(),
            values,
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Decodes the target, validating its geometric invariants. Errors carry
    /// the index of the offending component within this vector.
    pub fn decode(&self) -> Result<Target> {
        if self.values.len() != self.layout.len() {
            return Err(FdotError::LayoutMismatch {
                expected: format!("{} values", self.layout.len()),
                found: format!("{} values", self.values.len()),
            });
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(FdotError::InvalidParameter {
                index: i,
                reason: "non-finite value".into(),
            });
        }
        let v = &self.values;
        let target = match &self.layout {
            Layout::Point4 => Target::Point {
                center: [v[0], v[1], v[2]],
                concentration: v[3],
            },
            Layout::Cuboid7 => Target::Cuboid(Cuboid {
                lower: [v[0], v[2], v[4]],
                upper: [v[1], v[3], v[5]],
                concentration: v[6],
            }),
            Layout::Joint9 => {
                // optics are checked in `apply_optics`; shift box indices by 2
                let c = Cuboid {
                    lower: [v[2], v[4], v[6]],
                    upper: [v[3], v[5], v[7]],
                    concentration: v[8],
                };
                return c.validate().map(|_| Target::Cuboid(c)).map_err(|e| match e {
                    FdotError::InvalidParameter { index, reason } => FdotError::InvalidParameter {
                        index: index + 2,
                        reason,
                    },
                    other => other,
                });
            }
            Layout::GrowingCuboid { window, .. } => Target::GrowingCuboid {
                center: [v[0], v[1], v[2]],
                side: Poly::new(v[4..].to_vec()),
                concentration: v[3],
                window: *window,
            },
            Layout::MovingCuboid {
                center_degrees,
                window,
            } => {
                let mut offset = 0;
                let center = center_degrees.map(|d| {
                    let p = Poly::new(v[offset..offset + d + 1].to_vec());
                    offset += d + 1;
                    p
                });
                Target::MovingCuboid {
                    center,
                    side: v[offset],
                    concentration: v[offset + 1],
                    window: *window,
                }
            }
        };
        target.validate()?;
        Ok(target)
    }

    /// Optical parameters to use with this vector: for [`Layout::Joint9`]
    /// the encoded `(mu_s, mu_a)` replace those of `base`.
    pub fn apply_optics(&self, base: &OpticalParams) -> Result<OpticalParams> {
        match self.layout {
            Layout::Joint9 => base
                .with_scattering_absorption(self.values[0], self.values[1])
                .map_err(|e| match e {
                    FdotError::InvalidOptics { field, reason } => FdotError::InvalidParameter {
                        index: if field == "mu_s_per_mm" { 0 } else { 1 },
                        reason,
                    },
                    other => other,
                }),
            _ => Ok(*base),
        }
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Sample times for one S-D pair, strictly increasing and positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    times_ps: Vec<f64>,
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = FdotError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        TimeGrid::new(v)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.times_ps
    }
}

impl TimeGrid {
    pub fn new(times_ps: Vec<f64>) -> Result<Self> {
        if times_ps.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
            return Err(FdotError::InvalidGeometry(
                "time grid entries must be finite and positive".into(),
            ));
        }
        if times_ps.windows(2).any(|w| w[1] <= w[0]) {
            return Err(FdotError::InvalidGeometry(
                "time grid must be strictly increasing".into(),
            ));
        }
        Ok(TimeGrid { times_ps })
    }

    /// Uniform stencil `center - before*dt, ..., center + after*dt`.
    pub fn stencil(center_ps: f64, dt_ps: f64, before: usize, after: usize) -> Result<Self> {
        let times = (0..before + after + 1)
            .map(|k| center_ps + (k as f64 - before as f64) * dt_ps)
            .collect();
        Self::new(times)
    }

    pub fn times(&self) -> &[f64] {
        &self.times_ps
    }

    pub fn len(&self) -> usize {
        self.times_ps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times_ps.is_empty()
    }
}

/// Acquisition geometry: S-D pairs and one sample grid per pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Acquisition {
    pub pairs: Vec<SdPair>,
    pub grids: Vec<TimeGrid>,
}

impl Acquisition {
    pub fn new(pairs: Vec<SdPair>, grids: Vec<TimeGrid>) -> Result<Self> {
        let acq = Acquisition { pairs, grids };
        acq.validate()?;
        Ok(acq)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pairs.len() != self.grids.len() {
            return Err(FdotError::InvalidGeometry(format!(
                "{} pairs but {} time grids",
                self.pairs.len(),
                self.grids.len()
            )));
        }
        self.pairs.iter().try_for_each(SdPair::validate)
    }

    /// Total number of samples `Q`.
    pub fn len(&self) -> usize {
        self.grids.iter().map(TimeGrid::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(pair index, time)` for every stacked entry, pair-major.
    pub fn entries(&self) -> Vec<(usize, f64)> {
        self.grids
            .iter()
            .enumerate()
            .flat_map(|(m, g)| g.times().iter().map(move |&t| (m, t)))
            .collect()
    }

    pub fn swapped(&self) -> Self {
        Acquisition {
            pairs: self.pairs.iter().map(SdPair::swapped).collect(),
            grids: self.grids.clone(),
        }
    }

    /// Latest sample time over all grids.
    pub fn last_time(&self) -> Option<f64> {
        self.grids
            .iter()
            .filter_map(|g| g.times().last().copied())
            .fold(None, |acc: Option<f64>, t| Some(acc.map_or(t, |a| a.max(t))))
    }
}

/// Stacked data vector `h` with the acquisition it was sampled on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Measurement {
    pub acquisition: Acquisition,
    pub data: Vec<f64>,
}

impl Measurement {
    pub fn new(acquisition: Acquisition, data: Vec<f64>) -> Result<Self> {
        if acquisition.len() != data.len() {
            return Err(FdotError::InvalidGeometry(format!(
                "data length {} does not match {} grid samples",
                data.len(),
                acquisition.len()
            )));
        }
        Ok(Measurement { acquisition, data })
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Samples of pair `m` as `(t, u)`.
    pub fn pair_samples(&self, m: usize) -> Vec<(f64, f64)> {
        let offset: usize = self.acquisition.grids[..m].iter().map(TimeGrid::len).sum();
        self.acquisition.grids[m]
            .times()
            .iter()
            .zip(&self.data[offset..])
            .map(|(&t, &u)| (t, u))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ex3_cuboid() -> Target {
        Target::Cuboid(Cuboid::new([-1.0, -1.0, 9.0], [1.0, 1.0, 11.0], 0.5).unwrap())
    }

    #[test]
    fn reference_optics() {
        let p = OpticalParams::reference();
        assert_eq!(p.mu_s_prime(), 10.0 * (1.0 - 0.9));
        assert_eq!(p.mu_d(), 1.0 / (3.0 * p.mu_s() * (1.0 - p.g())));
        assert!((p.mu_d() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(p.tau_ps(), 0.0);
    }

    #[test]
    fn optics_validation() {
        assert!(OpticalParams::new(0.219, 0.1, 10.0, 1.0, 0.01).is_err());
        assert!(OpticalParams::new(0.219, -0.1, 10.0, 0.9, 0.01).is_err());
        assert!(OpticalParams::new(0.0, 0.1, 10.0, 0.9, 0.01).is_err());
        let json = r#"{"c_mm_per_ps":0.219,"mu_a_per_mm":0.1,"mu_s_per_mm":10,"g":0.9,"beta_per_mm":0.01,"tau_ps":5}"#;
        assert!(serde_json::from_str::<OpticalParams>(json).is_err());
    }

    #[test]
    fn encode_cuboid7() {
        let v = ParamVector::encode(&ex3_cuboid(), &OpticalParams::reference(), &Layout::Cuboid7)
            .unwrap();
        assert_eq!(v.values, vec![-1.0, 1.0, -1.0, 1.0, 9.0, 11.0, 0.5]);
    }

    #[test]
    fn encode_joint9() {
        let p = OpticalParams::reference()
            .with_scattering_absorption(10.0, 2.0)
            .unwrap();
        let v = ParamVector::encode(&ex3_cuboid(), &p, &Layout::Joint9).unwrap();
        assert_eq!(v.values, vec![10.0, 2.0, -1.0, 1.0, -1.0, 1.0, 9.0, 11.0, 0.5]);
        assert_eq!(v.apply_optics(&OpticalParams::reference()).unwrap(), p);
    }

    #[test]
    fn encode_layout_mismatch() {
        let t = Target::Point {
            center: [0.0, 0.0, 5.0],
            concentration: 1.0,
        };
        let err = ParamVector::encode(&t, &OpticalParams::reference(), &Layout::Cuboid7);
        assert!(matches!(err, Err(FdotError::LayoutMismatch { .. })));
    }

    #[test]
    fn decode_table_row() {
        let v = ParamVector::new(Layout::Cuboid7, vec![-1.0, 1.0, -1.0, 1.0, 9.0, 11.0, 0.5])
            .unwrap();
        assert_eq!(v.decode().unwrap(), ex3_cuboid());
    }

    #[test]
    fn decode_degenerate_box() {
        let v = ParamVector::new(Layout::Cuboid7, vec![0.0, 0.0, -1.0, 1.0, 9.0, 11.0, 0.5])
            .unwrap();
        assert!(matches!(
            v.decode(),
            Err(FdotError::InvalidParameter { index: 0, .. })
        ));
        let v = ParamVector::new(
            Layout::Joint9,
            vec![10.0, 2.0, -1.0, 1.0, -1.0, 1.0, 9.0, 11.0, -0.5],
        )
        .unwrap();
        assert!(matches!(
            v.decode(),
            Err(FdotError::InvalidParameter { index: 8, .. })
        ));
        let v = ParamVector::new(
            Layout::Joint9,
            vec![-10.0, 2.0, -1.0, 1.0, -1.0, 1.0, 9.0, 11.0, 0.5],
        )
        .unwrap();
        assert!(matches!(
            v.apply_optics(&OpticalParams::reference()),
            Err(FdotError::InvalidParameter { index: 0, .. })
        ));
    }

    #[test]
    fn time_dependent_geometry_guard() {
        let window = TimeWindow::new(0.0, 100.0).unwrap();
        let t = Target::GrowingCuboid {
            center: [0.0, 0.0, 1.0],
            side: Poly::linear(0.5, 2.0),
            concentration: 0.5,
            window,
        };
        // at u = 1 the half side 1.25 exceeds the depth 1
        assert!(matches!(
            t.validate(),
            Err(FdotError::GeometryOutsideDomain { .. })
        ));
        let t = Target::GrowingCuboid {
            center: [0.0, 0.0, 10.0],
            side: Poly::linear(0.5, 1.0),
            concentration: 0.5,
            window,
        };
        t.validate().unwrap();
        let c = t.cuboid_at_time(50.0).unwrap();
        assert!((c.upper[0] - c.lower[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn time_grid_invariants() {
        assert!(TimeGrid::new(vec![1.0, 1.0]).is_err());
        assert!(TimeGrid::new(vec![-1.0, 1.0]).is_err());
        let g = TimeGrid::stencil(100.0, 2.0, 10, 9).unwrap();
        assert_eq!(g.len(), 20);
        assert_eq!(g.times()[0], 80.0);
        assert_eq!(g.times()[19], 118.0);
    }

    #[test]
    fn hausdorff_boxes() {
        let a = Cuboid::cube([0.0, 0.0, 10.0], 2.0, 1.0).unwrap();
        assert_eq!(a.hausdorff(&a), 0.0);
        let b = Cuboid::cube([0.5, 0.0, 10.0], 2.0, 1.0).unwrap();
        assert!((a.hausdorff(&b) - 0.5).abs() < 1e-15);
        let c = Cuboid::cube([0.0, 0.0, 10.0], 1.0, 1.0).unwrap();
        assert!((a.hausdorff(&c) - 0.5 * 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn stacking_is_pair_major() {
        let p = SdPair::new(BoundaryPoint::new(-3.0, 0.0), BoundaryPoint::new(3.0, 0.0)).unwrap();
        let acq = Acquisition::new(
            vec![p, p.swapped()],
            vec![
                TimeGrid::new(vec![1.0, 2.0]).unwrap(),
                TimeGrid::new(vec![5.0]).unwrap(),
            ],
        )
        .unwrap();
        assert_eq!(acq.entries(), vec![(0, 1.0), (0, 2.0), (1, 5.0)]);
        let m = Measurement::new(acq, vec![0.1, 0.2, 0.3]).unwrap();
        assert_eq!(m.pair_samples(1), vec![(5.0, 0.3)]);
    }

    fn arb_target() -> impl Strategy<Value = (Target, Layout)> {
        let window = TimeWindow::new(0.0, 200.0).unwrap();
        prop_oneof![
            (-5.0..5.0f64, -5.0..5.0f64, 0.1..10.0f64, 1e-3..10.0f64).prop_map(|(x, y, z, p)| (
                Target::Point {
                    center: [x, y, z],
                    concentration: p
                },
                Layout::Point4
            )),
            (
                prop::array::uniform3(-5.0..5.0f64),
                prop::array::uniform3(0.01..3.0f64),
                1e-3..10.0f64
            )
                .prop_map(|(lo, w, p)| {
                    let lo = [lo[0], lo[1], lo[2].abs() + 0.1];
                    let up = [lo[0] + w[0], lo[1] + w[1], lo[2] + w[2]];
                    (Target::Cuboid(Cuboid::new(lo, up, p).unwrap()), Layout::Cuboid7)
                }),
            (0.1..2.0f64, 0.0..1.0f64, 5.0..10.0f64, 1e-3..2.0f64).prop_map(move |(l0, l1, z, p)| (
                Target::GrowingCuboid {
                    center: [0.3, -0.2, z],
                    side: Poly::linear(l0, l1),
                    concentration: p,
                    window
                },
                Layout::GrowingCuboid {
                    side_degree: 1,
                    window
                }
            )),
            (-5.0..5.0f64, -5.0..5.0f64, 0.1..3.0f64, 1e-3..2.0f64).prop_map(move |(x0, x1, l, p)| (
                Target::MovingCuboid {
                    center: [Poly::linear(x0, x1), Poly::linear(x1, x0), Poly::constant(8.0)],
                    side: l,
                    concentration: p,
                    window
                },
                Layout::MovingCuboid {
                    center_degrees: [1, 1, 0],
                    window
                }
            )),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip((target, layout) in arb_target()) {
            let p = OpticalParams::reference();
            let v = ParamVector::encode(&target, &p, &layout).unwrap();
            prop_assert_eq!(v.len(), layout.len());
            prop_assert_eq!(v.decode().unwrap(), target.clone());
            let again = ParamVector::encode(&v.decode().unwrap(), &p, &layout).unwrap();
            prop_assert_eq!(again, v);
        }

        #[test]
        fn mu_d_is_derived(mu_s in 0.1..100.0f64, g in 0.0..0.99f64) {
            let p = OpticalParams::new(0.219, 0.1, mu_s, g, 0.01).unwrap();
            prop_assert_eq!(p.mu_d(), 1.0 / (3.0 * (mu_s * (1.0 - g))));
        }
    }
}
