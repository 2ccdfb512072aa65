//! Continuous time: `x' = A(t)x + f(t,x)` on an integer-aligned range,
//! discretized at integer times and shadowed with the discrete solver.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dichotomy::{
    fit_constants_unchecked, validate_splitting, Bundle, DichotomyConstants, SplittingTriple,
    WindowSystem,
};
use crate::error::{Error, Result};
use crate::green::GreenContext;
use crate::linalg;
use crate::seqspace::{Ambient, NormFamily, SequenceNorm, VecSeq, Window};
use crate::shadow::{
    delta_for_epsilon, empirical_lipschitz, quasi_shadow, verify_report, Check, Perturbation,
    PseudoTrajectory, QuasiShadowReport, SolveOptions, VerificationSummary,
};

pub const DEFAULT_STEP: f64 = 1.0 / 64.0;

/// Splitting identities of a discretized flow hold only to integrator accuracy.
pub const FLOW_SPLIT_TOL: f64 = 1e-8;
pub const JUMP_TOL: f64 = 1e-8;

fn default_step() -> f64 {
    DEFAULT_STEP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum MatrixFamily {
    Constant {
        rows: Vec<Vec<f64>>,
    },
    /// `A(t) = Q(t) Λ Q(t)ᵀ + ωJ` with `Q(t)` the rotation by `ωt` in `plane`,
    /// so that `T(t,s) = Q(t) e^{Λ(t−s)} Q(s)ᵀ`.
    PeriodicRotation {
        rates: Vec<f64>,
        omega: f64,
        #[serde(default = "default_plane")]
        plane: [usize; 2],
    },
    /// `A(t) = diag(diagonals[⌊t⌋ mod len])`, switching at integers.
    Switched {
        diagonals: Vec<Vec<f64>>,
    },
}

fn default_plane() -> [usize; 2] {
    [0, 1]
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum VectorField {
    #[default]
    Zero,
    /// `f(t,x) = B x`.
    Linear { rows: Vec<Vec<f64>> },
    /// `f(t,x) = κ tanh(W x)` componentwise.
    Tanh { kappa: f64, weights: Vec<Vec<f64>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantProjections {
    #[serde(rename = "P1")]
    pub p1: Vec<Vec<f64>>,
    #[serde(rename = "P2")]
    pub p2: Vec<Vec<f64>>,
    #[serde(rename = "P3")]
    pub p3: Vec<Vec<f64>>,
}

/// Flow file schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSpec {
    pub t_lo: i64,
    pub t_hi: i64,
    #[serde(default = "default_step")]
    pub h: f64,
    pub matrix: MatrixFamily,
    #[serde(default)]
    pub field: VectorField,
    /// Per-coordinate bundle labels ("s", "u", "c") for the diagonal families.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundles: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub projections: Option<ConstantProjections>,
    /// Declared `N ≥ sup_t ‖A(t)‖`.
    #[serde(rename = "N", default, skip_serializing_if = "Option::is_none")]
    pub n_bound: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lip_c: Option<f64>,
    #[serde(default)]
    pub ambient: Ambient,
}

#[derive(Debug, Clone)]
enum Coefficients {
    Constant(DMatrix<f64>),
    Rotation {
        rates: DVector<f64>,
        omega: f64,
        plane: [usize; 2],
    },
    Switched(Vec<DMatrix<f64>>),
}

#[derive(Debug, Clone)]
enum Field {
    Zero,
    Linear(DMatrix<f64>),
    Tanh { kappa: f64, weights: DMatrix<f64> },
}

/// A validated flow specification.
#[derive(Debug, Clone)]
pub struct FlowModel {
    spec: FlowSpec,
    dim: usize,
    steps_per_unit: usize,
    coeff: Coefficients,
    field: Field,
    axes: Option<Vec<Bundle>>,
    projections: Option<[DMatrix<f64>; 3]>,
    n_bound: f64,
    lip_c: f64,
}

fn rotation(dim: usize, plane: [usize; 2], angle: f64) -> DMatrix<f64> {
    let mut q = DMatrix::identity(dim, dim);
    let (c, s) = (angle.cos(), angle.sin());
    let [i, j] = plane;
    q[(i, i)] = c;
    q[(i, j)] = -s;
    q[(j, i)] = s;
    q[(j, j)] = c;
    q
}

fn classify(diag: &[f64]) -> Vec<Bundle> {
    diag.iter()
        .map(|&v| {
            if v < 0.0 {
                Bundle::Stable
            } else if v > 0.0 {
                Bundle::Unstable
            } else {
                Bundle::Central
            }
        })
        .collect()
}

fn is_diagonal(m: &DMatrix<f64>) -> bool {
    m.iter().enumerate().all(|(idx, &v)| idx % m.nrows() == idx / m.nrows() || v == 0.0)
}

impl FlowModel {
    pub fn new(spec: FlowSpec) -> Result<Self> {
        if spec.t_hi - spec.t_lo < 3 {
            return Err(Error::Config("flow time range must span at least 3 units".into()));
        }
        let inv = 1.0 / spec.h;
        if !(spec.h > 0.0 && spec.h <= 1.0) || (inv - inv.round()).abs() > 1e-9 {
            return Err(Error::Config(format!("step h = {} must divide 1", spec.h)));
        }
        let steps_per_unit = inv.round() as usize;
        let (coeff, dim, diag_signs) = match &spec.matrix {
            MatrixFamily::Constant { rows } => {
                let a = linalg::matrix_from_rows(rows)?;
                if a.nrows() != a.ncols() || a.nrows() == 0 {
                    return Err(Error::Structure("constant A must be square".into()));
                }
                let signs = is_diagonal(&a).then(|| classify(a.diagonal().as_slice()));
                let dim = a.nrows();
                (Coefficients::Constant(a), dim, signs)
            }
            MatrixFamily::PeriodicRotation { rates, omega, plane } => {
                let dim = rates.len();
                if dim < 2 || plane[0] == plane[1] || plane[0] >= dim || plane[1] >= dim {
                    return Err(Error::Structure("rotation plane must name two distinct coordinates".into()));
                }
                if !omega.is_finite() || rates.iter().any(|r| !r.is_finite()) {
                    return Err(Error::Config("rotation parameters must be finite".into()));
                }
                let signs = Some(classify(rates));
                (
                    Coefficients::Rotation {
                        rates: DVector::from_row_slice(rates),
                        omega: *omega,
                        plane: *plane,
                    },
                    dim,
                    signs,
                )
            }
            MatrixFamily::Switched { diagonals } => {
                let dim = diagonals.first().map_or(0, Vec::len);
                if dim == 0 || diagonals.iter().any(|d| d.len() != dim || d.iter().any(|v| !v.is_finite())) {
                    return Err(Error::Structure("switched diagonals must be finite and of equal length".into()));
                }
                let signs = classify(&diagonals[0]);
                let agree = diagonals.iter().all(|d| classify(d) == signs);
                let mats = diagonals
                    .iter()
                    .map(|d| DMatrix::from_diagonal(&DVector::from_row_slice(d)))
                    .collect();
                (Coefficients::Switched(mats), dim, agree.then_some(signs))
            }
        };
        let field = match &spec.field {
            VectorField::Zero => Field::Zero,
            VectorField::Linear { rows } => {
                let b = linalg::matrix_from_rows(rows)?;
                if b.nrows() != dim || b.ncols() != dim {
                    return Err(Error::Structure(format!("linear field must be {dim}x{dim}")));
                }
                Field::Linear(b)
            }
            VectorField::Tanh { kappa, weights } => {
                let w = linalg::matrix_from_rows(weights)?;
                if w.nrows() != dim || w.ncols() != dim {
                    return Err(Error::Structure(format!("tanh weights must be {dim}x{dim}")));
                }
                if !(kappa.is_finite() && *kappa >= 0.0) {
                    return Err(Error::Config("tanh kappa must be finite and >= 0".into()));
                }
                Field::Tanh { kappa: *kappa, weights: w }
            }
        };
        let axes = match &spec.bundles {
            Some(labels) => {
                if labels.len() != dim {
                    return Err(Error::Structure(format!("bundles must list {dim} labels")));
                }
                Some(labels.iter().map(|l| Bundle::parse(l)).collect::<Result<Vec<_>>>()?)
            }
            None => diag_signs,
        };
        let projections = match &spec.projections {
            Some(p) => {
                let mats = [&p.p1, &p.p2, &p.p3].map(|r| linalg::matrix_from_rows(r));
                let [a, b, c] = mats;
                let out = [a?, b?, c?];
                if out.iter().any(|m| m.nrows() != dim || m.ncols() != dim) {
                    return Err(Error::Structure(format!("projections must be {dim}x{dim}")));
                }
                Some(out)
            }
            None => None,
        };
        if projections.is_none() && axes.is_none() {
            return Err(Error::Config(
                "projections cannot be inferred for this matrix family; supply \"bundles\" or \"projections\"".into(),
            ));
        }
        let mut model = Self {
            dim,
            steps_per_unit,
            coeff,
            field,
            axes,
            projections,
            n_bound: 0.0,
            lip_c: 0.0,
            spec,
        };
        model.n_bound = model.resolve_n_bound()?;
        model.lip_c = model.resolve_lip()?;
        Ok(model)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn spec(&self) -> &FlowSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn h(&self) -> f64 {
        self.spec.h
    }

    pub fn ambient(&self) -> Ambient {
        self.spec.ambient
    }

    pub fn n_bound(&self) -> f64 {
        self.n_bound
    }

    pub fn lip_c(&self) -> f64 {
        self.lip_c
    }

    pub fn window(&self) -> Window {
        Window::new(self.spec.t_lo, self.spec.t_hi).expect("range validated")
    }

    fn resolve_n_bound(&self) -> Result<f64> {
        let samples = (self.spec.t_hi - self.spec.t_lo) as usize * self.steps_per_unit * 2;
        let sampled = (0..samples)
            .map(|i| {
                let t = self.spec.t_lo as f64 + (i as f64 + 0.5) * self.spec.h / 2.0;
                self.ambient().op_norm(&self.a_at(t, t.floor() as i64))
            })
            .fold(0.0, f64::max);
        match self.spec.n_bound {
            Some(n) if !(n >= sampled * (1.0 - 1e-12)) => Err(Error::Config(format!(
                "declared N = {n} is below the sampled sup ‖A(t)‖ = {sampled}"
            ))),
            Some(n) => Ok(n),
            None => Ok(sampled),
        }
    }

    fn resolve_lip(&self) -> Result<f64> {
        let analytic = match &self.field {
            Field::Zero => 0.0,
            Field::Linear(b) => self.ambient().op_norm(b),
            Field::Tanh { kappa, weights } => kappa * self.ambient().op_norm(weights),
        };
        let declared = match self.spec.lip_c {
            Some(c) if !(c.is_finite() && c >= 0.0) => {
                return Err(Error::Config(format!("lip_c must be finite and >= 0, got {c}")))
            }
            Some(c) => c,
            None => analytic,
        };
        let probe = FieldProbe(self);
        let emp = empirical_lipschitz(&probe, self.window(), self.dim, self.ambient(), 500, 2.0, 7);
        if emp > declared * (1.0 + 1e-6) + 1e-300 {
            return Err(Error::Config(format!(
                "declared lip_c = {declared} is violated by sampled pairs (ratio {emp})"
            )));
        }
        Ok(declared)
    }

    /// `A(t)`; `piece` selects the mode of the switched family.
    fn a_at(&self, t: f64, piece: i64) -> DMatrix<f64> {
        match &self.coeff {
            Coefficients::Constant(a) => a.clone(),
            Coefficients::Rotation { rates, omega, plane } => {
                let q = rotation(self.dim, *plane, omega * t);
                let mut j = DMatrix::zeros(self.dim, self.dim);
                j[(plane[0], plane[1])] = -omega;
                j[(plane[1], plane[0])] = *omega;
                &q * DMatrix::from_diagonal(rates) * q.transpose() + j
            }
            Coefficients::Switched(mats) => mats[piece.rem_euclid(mats.len() as i64) as usize].clone(),
        }
    }

    pub fn matrix(&self, t: f64) -> DMatrix<f64> {
        self.a_at(t, t.floor() as i64)
    }

    pub fn field(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.field {
            Field::Zero => DVector::zeros(self.dim),
            Field::Linear(b) => b * x,
            Field::Tanh { kappa, weights } => (weights * x).map(|v| kappa * v.tanh()),
        }
    }

    fn field_is_zero(&self) -> bool {
        matches!(self.field, Field::Zero)
    }

    /// `P^i(s)` at integer `s`.
    pub fn projections_at(&self, s: i64) -> [DMatrix<f64>; 3] {
        if let Some(p) = &self.projections {
            return p.clone();
        }
        let axes = self.axes.as_ref().expect("projections or axes resolved");
        let coord = |b: Bundle| {
            DMatrix::from_diagonal(&DVector::from_iterator(
                self.dim,
                axes.iter().map(|&a| if a == b { 1.0 } else { 0.0 }),
            ))
        };
        let base = [coord(Bundle::Stable), coord(Bundle::Unstable), coord(Bundle::Central)];
        match &self.coeff {
            Coefficients::Rotation { omega, plane, .. } => {
                let q = rotation(self.dim, *plane, omega * s as f64);
                base.map(|p| &q * p * q.transpose())
            }
            _ => base,
        }
    }

    /// Number of `h`-steps from `s` to `t`, both on the sample grid and in range.
    fn steps_between(&self, t: f64, s: f64) -> Result<usize> {
        let (lo, hi) = (self.spec.t_lo as f64, self.spec.t_hi as f64);
        if !(s >= lo - 1e-12 && t <= hi + 1e-12) {
            return Err(Error::Domain(format!("times ({t}, {s}) outside [{lo}, {hi}]")));
        }
        if t < s - 1e-12 {
            return Err(Error::Domain(format!("evolution needs t >= s (t = {t}, s = {s})")));
        }
        let k = (t - s) / self.spec.h;
        if (k - k.round()).abs() > 1e-9 {
            return Err(Error::Domain(format!("t − s = {} is not a multiple of h", t - s)));
        }
        Ok(k.round() as usize)
    }

    fn rk4_linear(&self, start: f64, x: &DMatrix<f64>) -> DMatrix<f64> {
        let h = self.spec.h;
        let piece = (start + h / 2.0).floor() as i64;
        let a = |t: f64| self.a_at(t, piece);
        let k1 = a(start) * x;
        let k2 = a(start + h / 2.0) * (x + &k1 * (h / 2.0));
        let k3 = a(start + h / 2.0) * (x + &k2 * (h / 2.0));
        let k4 = a(start + h) * (x + &k3 * h);
        x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }

    fn rk4(&self, start: f64, x: &DVector<f64>) -> DVector<f64> {
        let h = self.spec.h;
        let piece = (start + h / 2.0).floor() as i64;
        let g = |t: f64, v: &DVector<f64>| self.a_at(t, piece) * v + self.field(v);
        let k1 = g(start, x);
        let k2 = g(start + h / 2.0, &(x + &k1 * (h / 2.0)));
        let k3 = g(start + h / 2.0, &(x + &k2 * (h / 2.0)));
        let k4 = g(start + h, &(x + &k3 * h));
        x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }

    /// `T(t, s)` by fixed-step RK4.
    pub fn linear_evolution(&self, t: f64, s: f64) -> Result<DMatrix<f64>> {
        let steps = self.steps_between(t, s)?;
        let mut x = DMatrix::identity(self.dim, self.dim);
        for i in 0..steps {
            x = self.rk4_linear(s + i as f64 * self.spec.h, &x);
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("linear evolution overflowed".into()));
            }
        }
        Ok(x)
    }

    /// `U(t, s) x` by fixed-step RK4.
    pub fn nonlinear_evolution(&self, t: f64, s: f64, x: &DVector<f64>) -> Result<DVector<f64>> {
        let steps = self.steps_between(t, s)?;
        let mut v = x.clone();
        for i in 0..steps {
            v = self.rk4(s + i as f64 * self.spec.h, &v);
            if v.iter().any(|c| !c.is_finite()) {
                return Err(Error::Numerical("nonlinear evolution overflowed".into()));
            }
        }
        Ok(v)
    }

    /// `A_n = T(n+1, n)`, `f_n = U(n+1, n) − T(n+1, n)` and the splitting at integers.
    pub fn discretize(&self) -> Result<Discretization> {
        let w = self.window();
        let transitions = (w.lo()..w.hi())
            .map(|n| self.linear_evolution((n + 1) as f64, n as f64))
            .collect::<Result<Vec<_>>>()?;
        let sys = WindowSystem::new(w, self.dim, transitions.clone())?;
        let split = SplittingTriple::from_fn(w, self.dim, |n| self.projections_at(n))?;
        let kappa = (self.n_bound + self.lip_c).exp();
        Ok(Discretization {
            sys,
            split,
            perturbation: DiscretePerturbation {
                model: self.clone(),
                transitions,
                lo: w.lo(),
                lip: self.lip_c * kappa,
            },
            kappa,
        })
    }

    /// The exact (integrator) solution through `x0` at `t_lo`, with declared defect zero.
    pub fn sample_solution(&self, x0: &DVector<f64>) -> Result<SampledPath> {
        let count = (self.spec.t_hi - self.spec.t_lo) as usize * self.steps_per_unit + 1;
        let mut samples = Vec::with_capacity(count);
        let mut v = x0.clone();
        samples.push(v.clone());
        for i in 1..count {
            v = self.rk4(self.sample_time(i - 1), &v);
            samples.push(v.clone());
        }
        SampledPath::new(self.spec.t_lo as f64, self.spec.h, samples, Some(0.0))
    }

    fn sample_time(&self, i: usize) -> f64 {
        self.spec.t_lo as f64 + i as f64 / self.steps_per_unit as f64
    }

    fn sample_count(&self) -> usize {
        (self.spec.t_hi - self.spec.t_lo) as usize * self.steps_per_unit + 1
    }
}

/// The field as a perturbation, for the Lipschitz sampler.
struct FieldProbe<'a>(&'a FlowModel);

impl Perturbation for FieldProbe<'_> {
    fn eval(&self, _n: i64, x: &DVector<f64>) -> DVector<f64> {
        self.0.field(x)
    }

    fn lipschitz(&self, _ambient: Ambient) -> f64 {
        self.0.lip_c
    }
}

/// `f_n(x) = U(n+1,n)x − T(n+1,n)x`.
#[derive(Debug, Clone)]
pub struct DiscretePerturbation {
    model: FlowModel,
    transitions: Vec<DMatrix<f64>>,
    lo: i64,
    lip: f64,
}

impl Perturbation for DiscretePerturbation {
    fn eval(&self, n: i64, x: &DVector<f64>) -> DVector<f64> {
        if self.model.field_is_zero() {
            return DVector::zeros(x.len());
        }
        let u = self
            .model
            .nonlinear_evolution((n + 1) as f64, n as f64, x)
            .unwrap_or_else(|_| DVector::from_element(x.len(), f64::NAN));
        u - &self.transitions[(n - self.lo) as usize] * x
    }

    /// `lip_c·e^{N + lip_c}` by Gronwall over one unit interval.
    fn lipschitz(&self, _ambient: Ambient) -> f64 {
        self.lip
    }
}

#[derive(Debug, Clone)]
pub struct Discretization {
    pub sys: WindowSystem,
    pub split: SplittingTriple,
    pub perturbation: DiscretePerturbation,
    /// `κ = e^{N + lip_c}`.
    pub kappa: f64,
}

/// A path sampled at step `h` starting at `t0`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampledPath {
    t0: f64,
    h: f64,
    samples: Vec<DVector<f64>>,
    /// Declared `sup_t ‖y' − A(t)y − f(t,y)‖`.
    pub defect_bound: Option<f64>,
}

impl SampledPath {
    pub fn new(t0: f64, h: f64, samples: Vec<DVector<f64>>, defect_bound: Option<f64>) -> Result<Self> {
        if samples.len() < 3 {
            return Err(Error::Structure("a sampled path needs at least three samples".into()));
        }
        let dim = samples[0].len();
        if samples.iter().any(|s| s.len() != dim || s.iter().any(|v| !v.is_finite())) {
            return Err(Error::Structure("path samples must be finite and of equal dimension".into()));
        }
        Ok(Self {
            t0,
            h,
            samples,
            defect_bound,
        })
    }

    pub fn from_fn(t_lo: f64, t_hi: f64, h: f64, f: impl Fn(f64) -> DVector<f64>) -> Result<Self> {
        let count = ((t_hi - t_lo) / h).round() as usize + 1;
        Self::new(t_lo, h, (0..count).map(|i| f(t_lo + i as f64 * h)).collect(), None)
    }

    pub fn t0(&self) -> f64 {
        self.t0
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn samples(&self) -> &[DVector<f64>] {
        &self.samples
    }

    pub fn time(&self, i: usize) -> f64 {
        self.t0 + i as f64 * self.h
    }

    pub fn with_defect_bound(mut self, bound: Option<f64>) -> Self {
        self.defect_bound = bound;
        self
    }

    pub fn scale(&self, alpha: f64) -> Self {
        Self {
            samples: self.samples.iter().map(|s| s * alpha).collect(),
            defect_bound: self.defect_bound.map(|d| d * alpha.abs()),
            ..self.clone()
        }
    }

    /// CSV with header `t,c0,c1,...`; rows must be equally spaced.
    pub fn read_csv(reader: impl Read, defect_bound: Option<f64>) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr.headers()?.clone();
        if header.get(0) != Some("t") || header.len() < 2 {
            return Err(Error::Parse("path CSV header must start with t".into()));
        }
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let vals = rec
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| Error::Parse(format!("{s:?}: {e}"))))
                .collect::<Result<Vec<_>>>()?;
            times.push(vals[0]);
            samples.push(DVector::from_row_slice(&vals[1..]));
        }
        if times.len() < 3 {
            return Err(Error::Parse("path CSV needs at least three rows".into()));
        }
        let h = times[1] - times[0];
        if !(h > 0.0) || times.windows(2).any(|w| ((w[1] - w[0]) - h).abs() > 1e-9) {
            return Err(Error::Parse("path samples must be equally spaced in t".into()));
        }
        Self::new(times[0], h, samples, defect_bound)
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let dim = self.samples[0].len();
        let mut header = vec!["t".to_string()];
        header.extend((0..dim).map(|i| format!("c{i}")));
        wtr.write_record(&header)?;
        for (i, s) in self.samples.iter().enumerate() {
            let mut row = vec![format!("{}", self.time(i))];
            row.extend(s.iter().map(|v| format!("{v}")));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }

    /// Largest central-difference defect `‖y' − A(t)y − f(t,y)‖` at interior samples.
    pub fn measured_defect(&self, model: &FlowModel) -> f64 {
        (1..self.samples.len() - 1)
            .map(|i| {
                let t = self.time(i);
                let dy = (&self.samples[i + 1] - &self.samples[i - 1]) / (2.0 * self.h);
                let y = &self.samples[i];
                model.ambient().vec_norm(&(dy - model.matrix(t) * y - model.field(y)))
            })
            .fold(0.0, f64::max)
    }

    fn check_alignment(&self, model: &FlowModel) -> Result<()> {
        if self.samples[0].len() != model.dim() {
            return Err(Error::Structure(format!(
                "path has dimension {}, flow has {}",
                self.samples[0].len(),
                model.dim()
            )));
        }
        if (self.h - model.h()).abs() > 1e-12
            || (self.t0 - model.spec().t_lo as f64).abs() > 1e-9
            || self.samples.len() != model.sample_count()
        {
            return Err(Error::Structure(format!(
                "path must be sampled at h = {} on [{}, {}]",
                model.h(),
                model.spec().t_lo,
                model.spec().t_hi
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSample {
    pub t: f64,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub deviation: f64,
}

/// `x(n) − lim_{t↑n} x(t)` at an integer time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowJump {
    pub n: i64,
    pub jump: Vec<f64>,
    pub z_central: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub epsilon: f64,
    /// `δ = L ε` with `L = 1/((1 + κ/L') κ)`.
    pub delta: f64,
    pub defect: f64,
    pub defect_measured: f64,
    pub kappa: f64,
    pub l_prime: f64,
    pub l: f64,
    pub n_bound: f64,
    pub lip_c: f64,
    pub lip_discrete: f64,
    pub constants: DichotomyConstants,
    pub discrete_epsilon: f64,
    pub discrete: QuasiShadowReport,
    pub samples: Vec<FlowSample>,
    pub jumps: Vec<FlowJump>,
    pub max_deviation: f64,
    /// `δ (1 + κ/L') e^{N + lip_c}`.
    pub gronwall_bound: f64,
}

/// Shadows a sampled approximate solution by a piecewise solution whose
/// jumps at integers lie in the central bundle.
pub fn flow_quasi_shadow(
    model: &FlowModel,
    path: &SampledPath,
    epsilon: f64,
    opts: &SolveOptions,
) -> Result<FlowReport> {
    path.check_alignment(model)?;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let disc = model.discretize()?;
    let ambient = model.ambient();
    validate_splitting(&disc.sys, &disc.split, FLOW_SPLIT_TOL)?;
    let consts = fit_constants_unchecked(&disc.sys, &disc.split, ambient, false)?;
    let ctx = GreenContext::with_tolerances(
        disc.sys.clone(),
        disc.split.clone(),
        consts,
        SequenceNorm::new(NormFamily::Sup, ambient),
        FLOW_SPLIT_TOL,
        1e-9,
    )?;
    let lip_discrete = disc.perturbation.lipschitz(ambient);
    let l_prime = delta_for_epsilon(&consts, ctx.g_bound(), lip_discrete, 1.0)?;
    let kappa = disc.kappa;
    let l = 1.0 / ((1.0 + kappa / l_prime) * kappa);
    let delta = l * epsilon;

    let defect_measured = path.measured_defect(model);
    let fd_tol = 10.0 * model.h().powi(2) * path.samples().iter().map(|s| ambient.vec_norm(s)).fold(1.0, f64::max);
    let defect = match path.defect_bound {
        Some(declared) => {
            if defect_measured > declared + fd_tol {
                return Err(Error::Precondition(format!(
                    "declared defect {declared:.3e} is contradicted by the samples ({defect_measured:.3e})"
                )));
            }
            declared
        }
        None => defect_measured,
    };
    if defect > delta && !opts.force {
        return Err(Error::Precondition(format!(
            "path defect {defect:.6e} exceeds delta {delta:.6e}"
        )));
    }

    let w = disc.sys.window();
    let spu = model.steps_per_unit;
    let at_integer = |n: i64| path.samples()[(n - w.lo()) as usize * spu].clone();
    let y = VecSeq::from_fn(w, model.dim(), at_integer);
    let pseudo = PseudoTrajectory::new(&disc.sys, &disc.perturbation, y)?;
    let discrete_epsilon = kappa * delta / l_prime;
    let discrete = quasi_shadow(&ctx, &disc.perturbation, &pseudo, discrete_epsilon, &SolveOptions { force: true, ..*opts })?;

    let mut samples = Vec::with_capacity(model.sample_count());
    let mut jumps = Vec::new();
    for n in w.lo()..w.hi() {
        let mut v = discrete.x.get(n).clone();
        for j in 0..spu {
            let i = (n - w.lo()) as usize * spu + j;
            let yv = &path.samples()[i];
            samples.push(FlowSample {
                t: model.sample_time(i),
                x: v.iter().copied().collect(),
                y: yv.iter().copied().collect(),
                deviation: ambient.vec_norm(&(&v - yv)),
            });
            v = model.rk4(model.sample_time(i), &v);
        }
        let next = discrete.x.get(n + 1);
        jumps.push(FlowJump {
            n: n + 1,
            jump: (next - &v).iter().copied().collect(),
            z_central: discrete.z_central.get(n + 1).iter().copied().collect(),
        });
    }
    let last = model.sample_count() - 1;
    let x_hi = discrete.x.get(w.hi());
    samples.push(FlowSample {
        t: model.sample_time(last),
        x: x_hi.iter().copied().collect(),
        y: path.samples()[last].iter().copied().collect(),
        deviation: ambient.vec_norm(&(x_hi - &path.samples()[last])),
    });
    let max_deviation = samples.iter().map(|s| s.deviation).fold(0.0, f64::max);
    Ok(FlowReport {
        epsilon,
        delta,
        defect,
        defect_measured,
        kappa,
        l_prime,
        l,
        n_bound: model.n_bound(),
        lip_c: model.lip_c(),
        lip_discrete,
        constants: consts,
        discrete_epsilon,
        discrete,
        samples,
        jumps,
        max_deviation,
        gronwall_bound: delta * (1.0 + kappa / l_prime) * kappa,
    })
}

/// Re-checks a flow report: deviation, jump locality, the interval ODE
/// residual, the Gronwall bound and the discrete report.
pub fn verify_flow(model: &FlowModel, path: &SampledPath, report: &FlowReport) -> Result<VerificationSummary> {
    let disc = model.discretize()?;
    let ambient = model.ambient();
    let ctx = GreenContext::with_tolerances(
        disc.sys.clone(),
        disc.split.clone(),
        report.constants,
        SequenceNorm::new(NormFamily::Sup, ambient),
        FLOW_SPLIT_TOL,
        1e-9,
    )?;
    let pseudo = PseudoTrajectory::new(&disc.sys, &disc.perturbation, report.discrete.y.clone())?;
    let discrete = verify_report(&ctx, &disc.perturbation, &pseudo, &report.discrete)?;

    let mut jump_central = 0.0_f64;
    let mut jump_match = 0.0_f64;
    for j in &report.jumps {
        let v = DVector::from_row_slice(&j.jump);
        let p3 = &model.projections_at(j.n)[2];
        jump_central = jump_central.max((&v - p3 * &v).amax());
        jump_match = jump_match.max((&v - DVector::from_row_slice(&j.z_central)).amax());
    }

    let spu = model.steps_per_unit;
    let h = model.h();
    let xs: Vec<DVector<f64>> = report.samples.iter().map(|s| DVector::from_row_slice(&s.x)).collect();
    let scale = xs.iter().map(|x| ambient.vec_norm(x)).fold(1.0, f64::max);
    let mut interval = 0.0_f64;
    for i in 1..xs.len().saturating_sub(1) {
        // neighbours must lie in the same unit interval
        if i % spu == 0 || (i + 1) % spu == 0 {
            continue;
        }
        let t = report.samples[i].t;
        let dx = (&xs[i + 1] - &xs[i - 1]) / (2.0 * h);
        let r = dx - model.matrix(t) * &xs[i] - model.field(&xs[i]);
        interval = interval.max(ambient.vec_norm(&r));
    }
    let interval_tol = 10.0 * h * h * (model.n_bound() + model.lip_c()).max(1.0) * scale;
    let deviation = report
        .samples
        .iter()
        .zip(path.samples())
        .map(|(s, y)| ambient.vec_norm(&(DVector::from_row_slice(&s.x) - y)))
        .fold(0.0, f64::max);

    let mut checks = vec![
        Check::at_most("sup_deviation", deviation, report.epsilon * (1.0 + 1e-9)),
        Check::at_most("gronwall_consistency", deviation, report.gronwall_bound * (1.0 + 1e-9)),
        Check::at_most("jumps_central", jump_central, JUMP_TOL),
        Check::at_most("jumps_match_z_central", jump_match, JUMP_TOL),
        Check::at_most("interval_solution", interval, interval_tol),
    ];
    checks.extend(discrete.checks.into_iter().map(|mut c| {
        c.name = format!("discrete_{}", c.name);
        c
    }));
    Ok(VerificationSummary::new(checks))
}
