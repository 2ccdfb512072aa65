//! Quasi-shadowing of pseudotrajectories of `x_{n+1} = A_n x_n + f_n(x_n)`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dichotomy::{decompose, DichotomyConstants, WindowSystem};
use crate::error::{Error, Result};
use crate::green::GreenContext;
use crate::linalg;
use crate::seqspace::{Ambient, VecSeq, Window};

pub const FIXED_POINT_TOL: f64 = 1e-12;
pub const VERIFY_TOL: f64 = 1e-9;
pub const MAX_ITERATIONS_CAP: usize = 100_000;

/// The nonlinear part `f_n` of the dynamics together with a declared global
/// Lipschitz constant.
pub trait Perturbation: Sync {
    fn eval(&self, n: i64, x: &DVector<f64>) -> DVector<f64>;

    /// Global Lipschitz bound in the given ambient norm.
    fn lipschitz(&self, ambient: Ambient) -> f64;
}

/// Either one value for every index or a list starting at `first`; indices
/// not covered by the list get the zero value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Indexed<T> {
    Constant(T),
    PerIndex { first: i64, items: Vec<T> },
}

impl<T> Indexed<T> {
    fn get(&self, n: i64) -> Option<&T> {
        match self {
            Indexed::Constant(v) => Some(v),
            Indexed::PerIndex { first, items } => {
                usize::try_from(n - first).ok().and_then(|i| items.get(i))
            }
        }
    }

    fn all(&self) -> Box<dyn Iterator<Item = &T> + '_> {
        match self {
            Indexed::Constant(v) => Box::new(std::iter::once(v)),
            Indexed::PerIndex { items, .. } => Box::new(items.iter()),
        }
    }
}

/// Perturbation file schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PerturbationSpec {
    Zero,
    /// `f_n(x) = B_n x + v_n`.
    Affine {
        linear: Indexed<Vec<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        offset: Option<Indexed<Vec<f64>>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lip_c: Option<f64>,
    },
    /// `f_n(x) = κ tanh(W x + β)` componentwise.
    Tanh {
        kappa: f64,
        weights: Vec<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        bias: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        lip_c: Option<f64>,
    },
}

/// A perturbation from one of the builtin families, validated against a dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct BuiltinPerturbation {
    spec: PerturbationSpec,
    dim: usize,
    kind: Builtin,
}

#[derive(Debug, Clone, PartialEq)]
enum Builtin {
    Zero,
    Affine {
        linear: Indexed<DMatrix<f64>>,
        offset: Option<Indexed<DVector<f64>>>,
        lip_c: Option<f64>,
    },
    Tanh {
        kappa: f64,
        weights: DMatrix<f64>,
        bias: DVector<f64>,
        lip_c: Option<f64>,
    },
}

fn check_lip(lip: Option<f64>) -> Result<()> {
    match lip {
        Some(c) if !(c.is_finite() && c >= 0.0) => {
            Err(Error::Config(format!("lip_c must be finite and >= 0, got {c}")))
        }
        _ => Ok(()),
    }
}

fn square(rows: &[Vec<f64>], dim: usize, what: &str) -> Result<DMatrix<f64>> {
    let m = linalg::matrix_from_rows(rows)?;
    if m.nrows() != dim || m.ncols() != dim {
        return Err(Error::Structure(format!("{what} must be {dim}x{dim}")));
    }
    Ok(m)
}

fn vector(v: &[f64], dim: usize, what: &str) -> Result<DVector<f64>> {
    if v.len() != dim || v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Structure(format!("{what} must be a finite vector of length {dim}")));
    }
    Ok(DVector::from_row_slice(v))
}

impl BuiltinPerturbation {
    pub fn new(spec: PerturbationSpec, dim: usize) -> Result<Self> {
        let kind = match &spec {
            PerturbationSpec::Zero => Builtin::Zero,
            PerturbationSpec::Affine { linear, offset, lip_c } => {
                check_lip(*lip_c)?;
                let linear = match linear {
                    Indexed::Constant(r) => Indexed::Constant(square(r, dim, "affine linear part")?),
                    Indexed::PerIndex { first, items } => Indexed::PerIndex {
                        first: *first,
                        items: items
                            .iter()
                            .map(|r| square(r, dim, "affine linear part"))
                            .collect::<Result<_>>()?,
                    },
                };
                let offset = match offset {
                    None => None,
                    Some(Indexed::Constant(v)) => Some(Indexed::Constant(vector(v, dim, "affine offset")?)),
                    Some(Indexed::PerIndex { first, items }) => Some(Indexed::PerIndex {
                        first: *first,
                        items: items
                            .iter()
                            .map(|v| vector(v, dim, "affine offset"))
                            .collect::<Result<_>>()?,
                    }),
                };
                Builtin::Affine { linear, offset, lip_c: *lip_c }
            }
            PerturbationSpec::Tanh { kappa, weights, bias, lip_c } => {
                check_lip(*lip_c)?;
                if !(kappa.is_finite() && *kappa >= 0.0) {
                    return Err(Error::Config(format!("tanh kappa must be >= 0, got {kappa}")));
                }
                let weights = square(weights, dim, "tanh weights")?;
                let bias = match bias {
                    Some(b) => vector(b, dim, "tanh bias")?,
                    None => DVector::zeros(dim),
                };
                Builtin::Tanh {
                    kappa: *kappa,
                    weights,
                    bias,
                    lip_c: *lip_c,
                }
            }
        };
        Ok(Self { spec, dim, kind })
    }

    pub fn zero(dim: usize) -> Self {
        Self::new(PerturbationSpec::Zero, dim).expect("zero perturbation is valid")
    }

    pub fn affine(linear: DMatrix<f64>, offset: Option<DVector<f64>>) -> Result<Self> {
        let dim = linear.nrows();
        Self::new(
            PerturbationSpec::Affine {
                linear: Indexed::Constant(linalg::matrix_to_rows(&linear)),
                offset: offset.map(|v| Indexed::Constant(linalg::vector_to_vec(&v))),
                lip_c: None,
            },
            dim,
        )
    }

    pub fn tanh(kappa: f64, weights: DMatrix<f64>, bias: Option<DVector<f64>>) -> Result<Self> {
        let dim = weights.nrows();
        Self::new(
            PerturbationSpec::Tanh {
                kappa,
                weights: linalg::matrix_to_rows(&weights),
                bias: bias.map(|b| linalg::vector_to_vec(&b)),
                lip_c: None,
            },
            dim,
        )
    }

    pub fn from_json(text: &str, dim: usize) -> Result<Self> {
        Self::new(serde_json::from_str(text)?, dim)
    }

    pub fn spec(&self) -> &PerturbationSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Linear part `B_n` and offset `v_n` when the perturbation is affine.
    pub fn affine_parts(&self, n: i64) -> Option<(DMatrix<f64>, DVector<f64>)> {
        match &self.kind {
            Builtin::Zero => Some((DMatrix::zeros(self.dim, self.dim), DVector::zeros(self.dim))),
            Builtin::Affine { linear, offset, .. } => Some((
                linear.get(n).cloned().unwrap_or_else(|| DMatrix::zeros(self.dim, self.dim)),
                offset
                    .as_ref()
                    .and_then(|o| o.get(n).cloned())
                    .unwrap_or_else(|| DVector::zeros(self.dim)),
            )),
            Builtin::Tanh { .. } => None,
        }
    }
}

impl Perturbation for BuiltinPerturbation {
    fn eval(&self, n: i64, x: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            Builtin::Zero => DVector::zeros(self.dim),
            Builtin::Affine { linear, offset, .. } => {
                let mut out = match linear.get(n) {
                    Some(b) => b * x,
                    None => DVector::zeros(self.dim),
                };
                if let Some(v) = offset.as_ref().and_then(|o| o.get(n)) {
                    out += v;
                }
                out
            }
            Builtin::Tanh { kappa, weights, bias, .. } => {
                (weights * x + bias).map(|t| kappa * t.tanh())
            }
        }
    }

    fn lipschitz(&self, ambient: Ambient) -> f64 {
        match &self.kind {
            Builtin::Zero => 0.0,
            Builtin::Affine { linear, lip_c, .. } => {
                lip_c.unwrap_or_else(|| linear.all().map(|b| ambient.op_norm(b)).fold(0.0, f64::max))
            }
            // the Jacobian is κ·diag(sech²)·W and the diagonal factor has norm ≤ 1
            Builtin::Tanh { kappa, weights, lip_c, .. } => {
                lip_c.unwrap_or_else(|| kappa * ambient.op_norm(weights))
            }
        }
    }
}

/// Largest difference quotient `‖f_n(x) − f_n(x')‖ / ‖x − x'‖` over random
/// pairs in the box `[-radius, radius]^k`.
pub fn empirical_lipschitz(
    f: &dyn Perturbation,
    window: Window,
    dim: usize,
    ambient: Ambient,
    samples: usize,
    radius: f64,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = 0.0_f64;
    for _ in 0..samples {
        let n = rng.random_range(window.lo()..=window.hi());
        let x = DVector::from_fn(dim, |_, _| rng.random_range(-radius..=radius));
        let scale = 10f64.powf(rng.random_range(-6.0..0.0)) * radius;
        let dx = DVector::from_fn(dim, |_, _| rng.random_range(-scale..=scale));
        let den = ambient.vec_norm(&dx);
        if den > 0.0 {
            let num = ambient.vec_norm(&(f.eval(n, &(&x + &dx)) - f.eval(n, &x)));
            best = best.max(num / den);
        }
    }
    best
}

/// `F_n(x) = A_n x + f_n(x)`.
pub fn step_map(sys: &WindowSystem, f: &dyn Perturbation, n: i64, x: &DVector<f64>) -> DVector<f64> {
    sys.a(n) * x + f.eval(n, x)
}

/// A candidate orbit `y` with its one-step residuals `y_{n+1} − F_n(y_n)`,
/// stored at index `n` for `lo ≤ n < hi` and zero at `hi`.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTrajectory {
    pub y: VecSeq,
    pub residual: VecSeq,
}

impl PseudoTrajectory {
    pub fn new(sys: &WindowSystem, f: &dyn Perturbation, y: VecSeq) -> Result<Self> {
        if y.window() != sys.window() || y.dim() != sys.dim() {
            return Err(Error::Structure("pseudotrajectory shape differs from the system".into()));
        }
        if !y.is_finite() {
            return Err(Error::Domain("pseudotrajectory has nonfinite entries".into()));
        }
        let hi = sys.window().hi();
        let residual = VecSeq::from_fn(sys.window(), sys.dim(), |n| {
            if n < hi {
                y.get(n + 1) - step_map(sys, f, n, y.get(n))
            } else {
                DVector::zeros(sys.dim())
            }
        });
        Ok(Self { y, residual })
    }

    /// A pseudotrajectory whose residuals are known exactly; used when `y`
    /// is large and forming `y_{n+1} − F_n(y_n)` would cancel catastrophically.
    pub fn with_residual(y: VecSeq, residual: VecSeq) -> Result<Self> {
        if y.window() != residual.window() || y.dim() != residual.dim() {
            return Err(Error::Structure("residual shape differs from the pseudotrajectory".into()));
        }
        if !y.is_finite() || !residual.is_finite() {
            return Err(Error::Domain("pseudotrajectory has nonfinite entries".into()));
        }
        Ok(Self { y, residual })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContractionCheck {
    pub ok: bool,
    pub q: f64,
}

/// `q = 4·c·D·(1+2D)·Gbound`, admissible iff `q < 1`.
pub fn contraction_check(consts: &DichotomyConstants, lip_c: f64, g_bound: f64) -> ContractionCheck {
    let d = consts.bound;
    let q = 4.0 * lip_c * d * (1.0 + 2.0 * d) * g_bound;
    ContractionCheck { ok: q < 1.0, q }
}

/// `δ = (1 − q)/((1+2D)·Gbound) · ε`.
pub fn delta_for_epsilon(consts: &DichotomyConstants, g_bound: f64, lip_c: f64, epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    let check = contraction_check(consts, lip_c, g_bound);
    if !check.ok {
        return Err(Error::ContractionViolated { q: check.q });
    }
    Ok((1.0 - check.q) / ((1.0 + 2.0 * consts.bound) * g_bound) * epsilon)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub tol: f64,
    /// Overrides the default `10·⌈ln tol / ln q⌉` iteration budget.
    pub max_iterations: Option<usize>,
    /// Run even if the pseudotrajectory exceeds `δ`.
    pub force: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            tol: FIXED_POINT_TOL,
            max_iterations: None,
            force: false,
        }
    }
}

fn default_max_iterations(tol: f64, q: f64) -> usize {
    if q <= 0.0 {
        return 10;
    }
    let est = 10.0 * (tol.ln() / q.ln()).ceil();
    if est.is_finite() {
        (est as usize).clamp(10, MAX_ITERATIONS_CAP)
    } else {
        MAX_ITERATIONS_CAP
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuasiShadowReport {
    pub z: VecSeq,
    pub z_central: VecSeq,
    pub z_hyperbolic: VecSeq,
    pub x: VecSeq,
    pub y: VecSeq,
    pub epsilon: f64,
    pub delta_used: f64,
    pub pseudo_norm: f64,
    pub lip_c: f64,
    pub q: f64,
    pub g_bound: f64,
    pub iterations: usize,
    pub step_norms: Vec<f64>,
    pub a_priori_bound: f64,
    pub fixed_point_residual: f64,
    /// `‖x_{n+1} − F_n(x_n) − z^c_{n+1}‖` for `lo ≤ n < hi`.
    pub quasi_residuals: Vec<f64>,
    pub adapted_norm_z: f64,
    pub deviation_norm: f64,
    pub norm: String,
    pub ambient: Ambient,
    pub tolerances: BTreeMap<String, f64>,
}

/// `S(x)_n = g_{n−1}(x^{s,u}_{n−1})` with
/// `g_n(v) = f_n(v + y_n) − f_n(y_n) − r_n`; `S(x)_lo = 0`.
struct Shadowing<'a> {
    ctx: &'a GreenContext,
    f: &'a dyn Perturbation,
    pseudo: &'a PseudoTrajectory,
}

impl Shadowing<'_> {
    fn s(&self, x: &VecSeq) -> VecSeq {
        let split = self.ctx.splitting();
        let y = &self.pseudo.y;
        let lo = x.window().lo();
        x.map(|n, _| {
            if n == lo {
                return DVector::zeros(x.dim());
            }
            let m = n - 1;
            let v = x.get(m) - split.p3(m) * x.get(m);
            let ym = y.get(m);
            self.f.eval(m, &(v + ym)) - self.f.eval(m, ym) - self.pseudo.residual.get(m)
        })
    }

    fn phi(&self, x: &VecSeq) -> Result<VecSeq> {
        self.ctx.apply_g(&self.s(x))
    }

    /// Iterates `Φ` from `start` until the step or the a-priori bound drops below `tol`.
    fn iterate(&self, start: VecSeq, q: f64, tol: f64, max_iter: usize) -> Result<(VecSeq, Vec<f64>, f64)> {
        let mut z = start;
        let mut steps = Vec::new();
        let mut first_step = None;
        for k in 1..=max_iter {
            let next = self.phi(&z)?;
            if !next.is_finite() {
                return Err(Error::Numerical(format!("iterate {k} is not finite")));
            }
            let step = self.ctx.adapted_norm(&next.sub(&z))?;
            let first = *first_step.get_or_insert(step);
            steps.push(step);
            z = next;
            let a_priori = if q < 1.0 { q.powi(k as i32) / (1.0 - q) * first } else { f64::INFINITY };
            if step <= tol || a_priori <= tol {
                return Ok((z, steps, a_priori));
            }
        }
        Err(Error::MaxIterations {
            iterations: max_iter,
            last_step: steps.last().copied().unwrap_or(f64::NAN),
        })
    }
}

fn quasi_residuals(sys: &WindowSystem, f: &dyn Perturbation, x: &VecSeq, zc: &VecSeq) -> Vec<f64> {
    (sys.window().lo()..sys.window().hi())
        .map(|n| (x.get(n + 1) - step_map(sys, f, n, x.get(n)) - zc.get(n + 1)).amax())
        .collect()
}

/// Finds the correction `z` with `z = G(S(z))` and the quasi-trajectory
/// `x = y + z^{s,u}` satisfying `x_{n+1} = F_n(x_n) + z^c_{n+1}`.
pub fn quasi_shadow(
    ctx: &GreenContext,
    f: &dyn Perturbation,
    pseudo: &PseudoTrajectory,
    epsilon: f64,
    opts: &SolveOptions,
) -> Result<QuasiShadowReport> {
    let sys = ctx.system();
    if pseudo.y.window() != sys.window() || pseudo.y.dim() != sys.dim() {
        return Err(Error::Structure("pseudotrajectory shape differs from the system".into()));
    }
    let ambient = ctx.norm().ambient;
    let lip_c = f.lipschitz(ambient);
    let g_bound = ctx.g_bound();
    let delta = delta_for_epsilon(ctx.constants(), g_bound, lip_c, epsilon)?;
    let q = contraction_check(ctx.constants(), lip_c, g_bound).q;
    let pseudo_norm = ctx.norm().norm(&pseudo.residual)?;
    if pseudo_norm > delta && !opts.force {
        return Err(Error::Precondition(format!(
            "pseudotrajectory residual norm {pseudo_norm:.6e} exceeds delta {delta:.6e}"
        )));
    }
    let max_iter = opts
        .max_iterations
        .unwrap_or_else(|| default_max_iterations(opts.tol, q));
    let solver = Shadowing { ctx, f, pseudo };
    let (z, step_norms, a_priori) =
        solver.iterate(VecSeq::zeros(sys.window(), sys.dim()), q, opts.tol, max_iter)?;
    let fixed_point_residual = ctx.adapted_norm(&solver.phi(&z)?.sub(&z))?;
    let parts = decompose(&z, ctx.splitting())?;
    let x = pseudo.y.add(&parts.hyperbolic);
    let mut tolerances = BTreeMap::new();
    tolerances.insert("fixed_point".to_string(), opts.tol);
    tolerances.insert("verification".to_string(), VERIFY_TOL);
    Ok(QuasiShadowReport {
        quasi_residuals: quasi_residuals(sys, f, &x, &parts.central),
        adapted_norm_z: ctx.adapted_norm(&z)?,
        deviation_norm: ctx.norm().norm(&x.sub(&pseudo.y))?,
        iterations: step_norms.len(),
        step_norms,
        a_priori_bound: a_priori,
        fixed_point_residual,
        z_central: parts.central,
        z_hyperbolic: parts.hyperbolic,
        z,
        x,
        y: pseudo.y.clone(),
        epsilon,
        delta_used: delta,
        pseudo_norm,
        lip_c,
        q,
        g_bound,
        norm: ctx.norm().family.label(),
        ambient,
        tolerances,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            value,
            tolerance,
            passed: value <= tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationSummary {
    pub checks: Vec<Check>,
    pub passed: bool,
}

impl VerificationSummary {
    pub fn new(checks: Vec<Check>) -> Self {
        let passed = checks.iter().all(|c| c.passed);
        Self { checks, passed }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }
}

/// Recomputes every claim of a report from scratch.
pub fn verify_report(
    ctx: &GreenContext,
    f: &dyn Perturbation,
    pseudo: &PseudoTrajectory,
    report: &QuasiShadowReport,
) -> Result<VerificationSummary> {
    let sys = ctx.system();
    let split = ctx.splitting();
    for s in [&report.z, &report.z_central, &report.z_hyperbolic, &report.x, &report.y] {
        if s.window() != sys.window() || s.dim() != sys.dim() {
            return Err(Error::Structure("report sequences do not match the system".into()));
        }
    }
    let scale = pseudo.y.entries().iter().map(|v| v.amax()).fold(1.0, f64::max);
    let tol = VERIFY_TOL * scale;
    let sup = |s: &VecSeq| s.entries().iter().map(|v| v.amax()).fold(0.0, f64::max);

    let split_err = sup(&report.z_central.add(&report.z_hyperbolic).sub(&report.z));
    let x_err = sup(&report.x.sub(&pseudo.y.add(&report.z_hyperbolic)));
    let membership = report
        .z_central
        .iter()
        .map(|(n, v)| (v - split.p3(n) * v).amax())
        .chain(report.z_hyperbolic.iter().map(|(n, v)| (split.p3(n) * v).amax()))
        .fold(0.0, f64::max);
    let residual = quasi_residuals(sys, f, &report.x, &report.z_central)
        .into_iter()
        .fold(0.0, f64::max);
    let solver = Shadowing { ctx, f, pseudo };
    let fixed = ctx.adapted_norm(&solver.phi(&report.z)?.sub(&report.z))?;
    let adapted = ctx.adapted_norm(&report.z)?;
    let deviation = ctx.norm().norm(&report.x.sub(&pseudo.y))?;
    let eps = report.epsilon;
    Ok(VerificationSummary::new(vec![
        Check::at_most("pseudotrajectory_matches", sup(&report.y.sub(&pseudo.y)), tol),
        Check::at_most("decomposition", split_err, tol),
        Check::at_most("x_equals_y_plus_zsu", x_err, tol),
        Check::at_most("central_membership", membership, tol),
        Check::at_most("quasi_residual", residual, tol),
        Check::at_most("fixed_point", fixed, tol),
        Check::at_most("adapted_norm_z", adapted, eps * (1.0 + 1e-12)),
        Check::at_most("deviation_norm", deviation, 2.0 * eps * (1.0 + 1e-12)),
    ]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub trials: usize,
    pub max_distance: f64,
    pub iterations: Vec<usize>,
}

/// Runs the iteration from random starts in the ball `‖z‖' ≤ ε` and returns
/// the largest distance between the resulting fixed points and the one
/// reached from zero.
pub fn uniqueness_probe(
    ctx: &GreenContext,
    f: &dyn Perturbation,
    pseudo: &PseudoTrajectory,
    epsilon: f64,
    trials: usize,
    seed: u64,
) -> Result<UniquenessReport> {
    let base = quasi_shadow(ctx, f, pseudo, epsilon, &SolveOptions::default())?;
    let q = base.q;
    let solver = Shadowing { ctx, f, pseudo };
    let sys = ctx.system();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = vec![base.z];
    let mut iterations = Vec::new();
    for t in 0..trials {
        let raw = VecSeq::from_fn(sys.window(), sys.dim(), |_| {
            DVector::from_fn(sys.dim(), |_, _| rng.random_range(-1.0..1.0))
        });
        let size = ctx.adapted_norm(&raw)?;
        let radius = epsilon * rng.random_range(0.0..1.0);
        let start = if size > 0.0 { raw.scale(radius / size) } else { raw };
        let max_iter = default_max_iterations(FIXED_POINT_TOL, q);
        let (z, steps, _) = solver
            .iterate(start, q, FIXED_POINT_TOL, max_iter)
            .map_err(|e| Error::ContractionSoundness(format!("start {t} did not converge: {e}")))?;
        if steps.windows(2).any(|w| w[1] > w[0] * (1.0 + 1e-9) && w[1] > FIXED_POINT_TOL) {
            return Err(Error::ContractionSoundness(format!(
                "start {t}: step sizes increased within the ball"
            )));
        }
        iterations.push(steps.len());
        points.push(z);
    }
    let mut max_distance = 0.0_f64;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            max_distance = max_distance.max(ctx.adapted_norm(&points[i].sub(&points[j]))?);
        }
    }
    Ok(UniquenessReport {
        trials,
        max_distance,
        iterations,
    })
}

/// Shadowing by a true orbit when the central bundle is trivial.
pub fn shadow_ed(
    ctx: &GreenContext,
    f: &dyn Perturbation,
    pseudo: &PseudoTrajectory,
    epsilon: f64,
    opts: &SolveOptions,
) -> Result<QuasiShadowReport> {
    let split = ctx.splitting();
    if let Some(n) = split.window().indices().find(|&n| split.p3(n).amax() > 0.0) {
        return Err(Error::Domain(format!("central projection is nonzero at n = {n}")));
    }
    quasi_shadow(ctx, f, pseudo, epsilon, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dichotomy::{fit_constants, Bundle, SplittingTriple};
    use crate::seqspace::{NormFamily, SequenceNorm};
    use proptest::prelude::*;
    use rand::Rng;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(v))
    }

    fn e(i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(3);
        v[i] = 1.0;
        v
    }

    fn diag_ctx(radius: i64, norm: SequenceNorm) -> GreenContext {
        let w = Window::centered(radius).unwrap();
        let sys = WindowSystem::constant(w, diag(&[0.5, 2.0, 1.0])).unwrap();
        let split =
            SplittingTriple::coordinate(w, &[Bundle::Stable, Bundle::Unstable, Bundle::Central]).unwrap();
        let consts = fit_constants(&sys, &split, Ambient::Euclidean, false).unwrap();
        GreenContext::new(sys, split, consts, norm).unwrap()
    }

    fn consts(d: f64) -> DichotomyConstants {
        DichotomyConstants::new(d, 2f64.ln(), 2f64.ln()).unwrap()
    }

    /// Solves `(I − G·M_S) z = G·S(0)` densely for affine `f`.
    fn dense_oracle(ctx: &GreenContext, f: &BuiltinPerturbation, pseudo: &PseudoTrajectory) -> VecSeq {
        let w = ctx.system().window();
        let k = ctx.system().dim();
        let size = w.len() * k;
        let g = ctx.assemble_g_dense().unwrap();
        let mut m_s = DMatrix::zeros(size, size);
        let mut s0 = DVector::zeros(size);
        for n in w.lo() + 1..=w.hi() {
            let (b, _) = f.affine_parts(n - 1).unwrap();
            let p3 = ctx.splitting().p3(n - 1);
            let block = b * (DMatrix::identity(k, k) - p3);
            let (r, c) = (w.pos(n) * k, w.pos(n - 1) * k);
            m_s.view_mut((r, c), (k, k)).copy_from(&block);
            s0.rows_mut(r, k).copy_from(&(-pseudo.residual.get(n - 1)));
        }
        let lhs = DMatrix::identity(size, size) - &g * m_s;
        let z = lhs.lu().solve(&(g * s0)).unwrap();
        VecSeq::from_stacked(w, k, &z).unwrap()
    }

    #[test]
    fn contraction_examples() {
        let c = consts(1.0);
        let chk = contraction_check(&c, 0.0, 3.0);
        assert!(chk.ok && chk.q == 0.0);
        let chk = contraction_check(&c, 1.0 / 36.0, 3.0);
        assert!(!chk.ok && (chk.q - 1.0).abs() < 1e-15);
        let chk = contraction_check(&c, 1.0 / 72.0, 3.0);
        assert!(chk.ok && (chk.q - 0.5).abs() < 1e-15);
    }

    #[test]
    fn delta_examples() {
        let c = consts(1.0);
        assert!((delta_for_epsilon(&c, 3.0, 0.0, 0.9).unwrap() - 0.1).abs() < 1e-15);
        assert!((delta_for_epsilon(&c, 3.0, 1.0 / 72.0, 1.8).unwrap() - 0.1).abs() < 1e-15);
        let d1 = delta_for_epsilon(&c, 3.0, 0.01, 0.3).unwrap();
        let d2 = delta_for_epsilon(&c, 3.0, 0.01, 0.6).unwrap();
        assert!((d2 - 2.0 * d1).abs() < 1e-15);
        assert!(matches!(
            delta_for_epsilon(&c, 3.0, 1.0 / 36.0, 1.0),
            Err(Error::ContractionViolated { .. })
        ));
    }

    #[test]
    fn exact_trajectory_needs_one_iteration() {
        let ctx = diag_ctx(15, SequenceNorm::sup());
        let f = BuiltinPerturbation::zero(3);
        let w = ctx.system().window();
        let y = VecSeq::from_fn(w, 3, |n| DVector::from_vec(vec![0.0, 0.0, 0.3 + 0.0 * n as f64]));
        let pseudo = PseudoTrajectory::new(ctx.system(), &f, y.clone()).unwrap();
        let r = quasi_shadow(&ctx, &f, &pseudo, 0.1, &SolveOptions::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert_eq!(r.x, y);
        assert_eq!(r.z, VecSeq::zeros(w, 3));
    }

    #[test]
    fn central_bump_closed_form() {
        let ctx = diag_ctx(15, SequenceNorm::sup());
        let f = BuiltinPerturbation::zero(3);
        let w = ctx.system().window();
        let eta = 0.09;
        let y = VecSeq::delta(w, 0, e(2) * eta);
        let pseudo = PseudoTrajectory::new(ctx.system(), &f, y.clone()).unwrap();
        let r = quasi_shadow(&ctx, &f, &pseudo, 0.9, &SolveOptions::default()).unwrap();
        assert!((r.delta_used - 0.1).abs() < 1e-12);
        assert_eq!(r.iterations, 1);
        let mut expect = VecSeq::delta(w, 0, e(2) * eta);
        expect.set(1, e(2) * -eta);
        assert!(r.z_central.sub(&expect).to_stacked().amax() < 1e-12);
        assert!(r.z_hyperbolic.to_stacked().amax() < 1e-12);
        assert!(r.x.sub(&y).to_stacked().amax() < 1e-12);
        let oracle = dense_oracle(&ctx, &f, &pseudo);
        assert!(oracle.sub(&r.z).to_stacked().amax() < 1e-12);
        assert!(verify_report(&ctx, &f, &pseudo, &r).unwrap().passed);
    }

    #[test]
    fn stable_bump_closed_form() {
        let ctx = diag_ctx(15, SequenceNorm::sup());
        let f = BuiltinPerturbation::zero(3);
        let w = ctx.system().window();
        let eta = 0.05;
        let y = VecSeq::delta(w, 0, e(0) * eta);
        let pseudo = PseudoTrajectory::new(ctx.system(), &f, y).unwrap();
        let r = quasi_shadow(&ctx, &f, &pseudo, 0.9, &SolveOptions::default()).unwrap();
        let expect = VecSeq::delta(w, 0, e(0) * -eta);
        assert!(r.z.sub(&expect).to_stacked().amax() < 1e-12);
        assert!(r.x.to_stacked().amax() < 1e-12);
        assert!(r.z_central.to_stacked().amax() == 0.0);
        let oracle = dense_oracle(&ctx, &f, &pseudo);
        assert!(oracle.sub(&r.z).to_stacked().amax() < 1e-12);
        assert!(verify_report(&ctx, &f, &pseudo, &r).unwrap().passed);
    }

    #[test]
    fn precondition_and_force() {
        let ctx = diag_ctx(10, SequenceNorm::sup());
        let f = BuiltinPerturbation::zero(3);
        let w = ctx.system().window();
        let pseudo = PseudoTrajectory::new(ctx.system(), &f, VecSeq::delta(w, 0, e(2))).unwrap();
        assert!(matches!(
            quasi_shadow(&ctx, &f, &pseudo, 0.9, &SolveOptions::default()),
            Err(Error::Precondition(_))
        ));
        let opts = SolveOptions { force: true, ..Default::default() };
        let r = quasi_shadow(&ctx, &f, &pseudo, 0.9, &opts).unwrap();
        let v = verify_report(&ctx, &f, &pseudo, &r).unwrap();
        assert!(!v.check("adapted_norm_z").unwrap().passed);
        assert!(v.check("quasi_residual").unwrap().passed);
    }

    #[test]
    fn corrupted_reports_fail() {
        let ctx = diag_ctx(10, SequenceNorm::sup());
        let f = BuiltinPerturbation::zero(3);
        let w = ctx.system().window();
        let pseudo = PseudoTrajectory::new(ctx.system(), &f, VecSeq::delta(w, 0, e(2) * 0.05)).unwrap();
        let r = quasi_shadow(&ctx, &f, &pseudo, 0.9, &SolveOptions::default()).unwrap();

        let mut bad = r.clone();
        *bad.z_central.get_mut(2) += e(0) * 1e-3;
        let v = verify_report(&ctx, &f, &pseudo, &bad).unwrap();
        assert!(!v.passed && !v.check("central_membership").unwrap().passed);

        let mut bad = r.clone();
        bad.z = r.z.scale(100.0);
        bad.z_central = r.z_central.scale(100.0);
        bad.epsilon = 0.9;
        let v = verify_report(&ctx, &f, &pseudo, &bad).unwrap();
        assert!(!v.check("adapted_norm_z").unwrap().passed);
    }

    fn random_tanh(seed: u64, kappa: f64) -> BuiltinPerturbation {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let w = &w / linalg::spectral_norm(&w);
        BuiltinPerturbation::tanh(kappa, w, Some(DVector::from_fn(3, |_, _| rng.random_range(-0.5..0.5)))).unwrap()
    }

    #[test]
    fn tanh_lipschitz_declaration_holds_empirically() {
        let f = random_tanh(3, 0.2);
        let w = Window::centered(5).unwrap();
        let emp = empirical_lipschitz(&f, w, 3, Ambient::Euclidean, 2000, 2.0, 1);
        assert!(emp <= f.lipschitz(Ambient::Euclidean) * (1.0 + 1e-6));
        assert!(emp > 0.5 * f.lipschitz(Ambient::Euclidean));
    }

    /// Random small sequence shrunk until its defect is below `0.9·delta`.
    fn small_pseudo(ctx: &GreenContext, f: &dyn Perturbation, delta: f64, seed: u64) -> PseudoTrajectory {
        let sys = ctx.system();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut y = VecSeq::from_fn(sys.window(), sys.dim(), |_| {
            DVector::from_fn(sys.dim(), |_, _| rng.random_range(-1.0..1.0))
        });
        loop {
            let p = PseudoTrajectory::new(sys, f, y.clone()).unwrap();
            let norm = ctx.norm().norm(&p.residual).unwrap();
            if norm <= 0.9 * delta {
                return p;
            }
            y = y.scale(0.8 * delta / norm);
        }
    }

    #[test]
    fn tanh_solution_verifies_and_contracts() {
        let ctx = diag_ctx(20, SequenceNorm::sup());
        let c = ctx.constants();
        let lip = 0.5 / (4.0 * c.bound * (1.0 + 2.0 * c.bound) * ctx.g_bound());
        let f = random_tanh(9, lip);
        let eps = 0.5;
        let delta = delta_for_epsilon(c, ctx.g_bound(), f.lipschitz(Ambient::Euclidean), eps).unwrap();
        let f = BuiltinPerturbation::tanh(lip, match f.spec() {
            PerturbationSpec::Tanh { weights, .. } => linalg::matrix_from_rows(weights).unwrap(),
            _ => unreachable!(),
        }, None).unwrap();
        let pseudo = small_pseudo(&ctx, &f, delta, 2);
        let r = quasi_shadow(&ctx, &f, &pseudo, eps, &SolveOptions::default()).unwrap();
        assert!((r.q - 0.5).abs() < 1e-12);
        assert!(verify_report(&ctx, &f, &pseudo, &r).unwrap().passed);
        for pair in r.step_norms.windows(2).skip(1) {
            if pair[0] > 1e-14 {
                assert!(pair[1] / pair[0] <= r.q + 0.05);
            }
        }
        let u = uniqueness_probe(&ctx, &f, &pseudo, eps, 5, 4).unwrap();
        assert!(u.max_distance <= 1e-10);
    }

    #[test]
    fn linear_uniqueness_is_exact() {
        let ctx = diag_ctx(10, SequenceNorm::sup());
        let f = BuiltinPerturbation::zero(3);
        let w = ctx.system().window();
        let pseudo = PseudoTrajectory::new(ctx.system(), &f, VecSeq::delta(w, 2, e(1) * 0.01)).unwrap();
        let u = uniqueness_probe(&ctx, &f, &pseudo, 0.9, 5, 1).unwrap();
        assert!(u.max_distance <= 1e-12);
    }

    #[test]
    fn large_lipschitz_is_rejected() {
        let ctx = diag_ctx(10, SequenceNorm::sup());
        let f = BuiltinPerturbation::affine(DMatrix::identity(3, 3) * 0.5, None).unwrap();
        let w = ctx.system().window();
        let pseudo = PseudoTrajectory::new(ctx.system(), &f, VecSeq::zeros(w, 3)).unwrap();
        assert!(matches!(
            uniqueness_probe(&ctx, &f, &pseudo, 0.1, 5, 1),
            Err(Error::ContractionViolated { .. })
        ));
    }

    #[test]
    fn affine_matches_dense_oracle_in_lp() {
        let ctx = diag_ctx(12, SequenceNorm::new(NormFamily::Lp { p: 2.0 }, Ambient::Euclidean));
        let c = ctx.constants();
        let lip = 0.6 / (4.0 * c.bound * (1.0 + 2.0 * c.bound) * ctx.g_bound());
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let b = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        let b = &b * (lip / linalg::spectral_norm(&b));
        let f = BuiltinPerturbation::affine(b, Some(DVector::from_vec(vec![1e-3, -2e-3, 5e-4]))).unwrap();
        let w = ctx.system().window();
        let y = VecSeq::from_fn(w, 3, |_| DVector::from_fn(3, |_, _| rng.random_range(-1e-3..1e-3)));
        let pseudo = PseudoTrajectory::new(ctx.system(), &f, y).unwrap();
        let opts = SolveOptions { force: true, ..Default::default() };
        let r = quasi_shadow(&ctx, &f, &pseudo, 1.0, &opts).unwrap();
        let oracle = dense_oracle(&ctx, &f, &pseudo);
        assert!(oracle.sub(&r.z).to_stacked().amax() <= 1e-9);
    }

    #[test]
    fn exponential_dichotomy_gives_true_orbits() {
        let w = Window::centered(15).unwrap();
        let sys = WindowSystem::constant(w, diag(&[0.5, 2.0])).unwrap();
        let split = SplittingTriple::coordinate(w, &[Bundle::Stable, Bundle::Unstable]).unwrap();
        let consts = fit_constants(&sys, &split, Ambient::Euclidean, false).unwrap();
        let ctx = GreenContext::new(sys, split, consts, SequenceNorm::sup()).unwrap();
        let f = BuiltinPerturbation::tanh(0.01, DMatrix::identity(2, 2), None).unwrap();
        let y = VecSeq::delta(w, 0, DVector::from_vec(vec![0.02, -0.03]));
        let pseudo = PseudoTrajectory::new(ctx.system(), &f, y).unwrap();
        let r = shadow_ed(&ctx, &f, &pseudo, 0.9, &SolveOptions::default()).unwrap();
        assert_eq!(r.z_central, VecSeq::zeros(w, 2));
        assert!(r.quasi_residuals.iter().all(|&v| v <= 1e-9));

        let bad = diag_ctx(5, SequenceNorm::sup());
        let f3 = BuiltinPerturbation::zero(3);
        let p3 = PseudoTrajectory::new(bad.system(), &f3, VecSeq::zeros(bad.system().window(), 3)).unwrap();
        assert!(matches!(
            shadow_ed(&bad, &f3, &p3, 0.1, &SolveOptions::default()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn perturbation_json_round_trip() {
        let text = r#"{"kind":"affine","linear":[[0.01,0],[0,0.02]],"offset":{"first":-1,"items":[[1,2],[3,4]]}}"#;
        let f = BuiltinPerturbation::from_json(text, 2).unwrap();
        let x = DVector::from_vec(vec![1.0, 1.0]);
        assert_eq!(f.eval(0, &x), DVector::from_vec(vec![3.01, 4.02]));
        assert_eq!(f.eval(5, &x), DVector::from_vec(vec![0.01, 0.02]));
        let back: PerturbationSpec = serde_json::from_str(&serde_json::to_string(f.spec()).unwrap()).unwrap();
        assert_eq!(&back, f.spec());
        assert!(BuiltinPerturbation::from_json(r#"{"kind":"tanh","kappa":1,"weights":[[1]]}"#, 2).is_err());
        assert!(BuiltinPerturbation::from_json(r#"{"kind":"zero"}"#, 4).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn halving_the_defect_halves_the_correction(seed in 0u64..500) {
            let ctx = diag_ctx(10, SequenceNorm::sup());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-0.01..0.01));
            let f = BuiltinPerturbation::affine(b, None).unwrap();
            let w = ctx.system().window();
            let y = VecSeq::from_fn(w, 3, |_| DVector::from_fn(3, |_, _| rng.random_range(-1e-3..1e-3)));
            let opts = SolveOptions { force: true, ..Default::default() };
            let p1 = PseudoTrajectory::new(ctx.system(), &f, y.clone()).unwrap();
            let p2 = PseudoTrajectory::new(ctx.system(), &f, y.scale(0.5)).unwrap();
            let z1 = quasi_shadow(&ctx, &f, &p1, 1.0, &opts).unwrap().adapted_norm_z;
            let z2 = quasi_shadow(&ctx, &f, &p2, 1.0, &opts).unwrap().adapted_norm_z;
            prop_assert!((z2 - 0.5 * z1).abs() <= 1e-9 * z1.max(1e-300));
        }

        #[test]
        fn each_family_meets_its_own_epsilon(seed in 0u64..500, fam in 0usize..3) {
            let family = [NormFamily::Sup, NormFamily::Lp { p: 1.0 }, NormFamily::Lp { p: 3.0 }][fam].clone();
            let ctx = diag_ctx(10, SequenceNorm::new(family, Ambient::Euclidean));
            let f = BuiltinPerturbation::zero(3);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = ctx.system().window();
            let raw = VecSeq::from_fn(w, 3, |_| DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)));
            let eps = 0.5;
            let delta = delta_for_epsilon(ctx.constants(), ctx.g_bound(), 0.0, eps).unwrap();
            let p = PseudoTrajectory::new(ctx.system(), &f, raw.clone()).unwrap();
            let scale = 0.99 * delta / ctx.norm().norm(&p.residual).unwrap();
            let p = PseudoTrajectory::new(ctx.system(), &f, raw.scale(scale)).unwrap();
            let r = quasi_shadow(&ctx, &f, &p, eps, &SolveOptions::default()).unwrap();
            prop_assert!(verify_report(&ctx, &f, &p, &r).unwrap().passed);
        }
    }
}
