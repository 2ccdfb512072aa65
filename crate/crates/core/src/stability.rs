//! Pointwise construction of the quasi-conjugacy `(h_m, τ_m)` between the
//! perturbed and the linear dynamics, with consistency and continuity checks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dichotomy::{DichotomyConstants, SplittingTriple, WindowSystem};
use crate::error::{Error, Result};
use crate::green::GreenContext;
use crate::seqspace::{Ambient, NormFamily, SequenceNorm, VecSeq, Window};
use crate::shadow::{
    delta_for_epsilon, quasi_shadow, step_map, BuiltinPerturbation, Check, Perturbation,
    PseudoTrajectory, SolveOptions, VerificationSummary,
};

/// Tolerance of the backward step `F_n(x) = target`.
pub const INVERSE_TOL: f64 = 1e-13;
pub const INVERSE_MAX_ITER: usize = 200;
pub const CONJUGACY_TOL: f64 = 1e-8;
pub const MEMBERSHIP_TOL: f64 = 1e-9;

/// Truncation target for the default probe margin.
const TRUNCATION: f64 = 1e12;

/// Default half-width of the probe window: the dichotomy kernels decay by
/// `1e-24` over it.
pub fn default_margin(consts: &DichotomyConstants) -> i64 {
    let rate = consts.stable_rate.min(consts.unstable_rate);
    2 * (TRUNCATION.ln() / rate).ceil().max(1.0) as i64
}

/// Solves `A_n x + f_n(x) = target` by the fixed-point iteration
/// `x ← A_n⁻¹(target − f_n(x))`.
pub fn inverse_step(
    f: &dyn Perturbation,
    n: i64,
    a_inv: &DMatrix<f64>,
    target: &DVector<f64>,
) -> Result<DVector<f64>> {
    let mut x = a_inv * target;
    for _ in 0..INVERSE_MAX_ITER {
        let next = a_inv * (target - f.eval(n, &x));
        let step = (&next - &x).amax();
        x = next;
        if step <= INVERSE_TOL * x.amax().max(1.0) {
            return Ok(x);
        }
    }
    Err(Error::Numerical(format!(
        "backward step at n = {n} did not converge in {INVERSE_MAX_ITER} iterations"
    )))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyQuery {
    pub m: i64,
    pub y: Vec<f64>,
    /// Probe half-width; the default comes from the dichotomy rates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<i64>,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyValue {
    pub m: i64,
    pub y: Vec<f64>,
    pub h: Vec<f64>,
    pub tau: Vec<f64>,
    pub probe: Window,
    /// `sup_n ‖f_n(y_n)‖` along the orbit, the pseudotrajectory size.
    pub forcing_sup: f64,
    pub delta: f64,
    #[serde(skip)]
    pub correction: Option<VecSeq>,
}

/// Orbit data for computing `h_m` and `τ_m` by shadowing against the linear system.
pub struct QuasiConjugacy<'a> {
    sys: &'a WindowSystem,
    split: &'a SplittingTriple,
    consts: DichotomyConstants,
    ambient: Ambient,
    f: &'a dyn Perturbation,
    inverses: Vec<DMatrix<f64>>,
}

impl<'a> QuasiConjugacy<'a> {
    pub fn new(
        sys: &'a WindowSystem,
        split: &'a SplittingTriple,
        consts: DichotomyConstants,
        ambient: Ambient,
        f: &'a dyn Perturbation,
    ) -> Result<Self> {
        if consts.strong.is_none() {
            return Err(Error::Config("conjugacy needs strong dichotomy constants (a, c_back)".into()));
        }
        consts.validate()?;
        let inverses = sys.inverses()?;
        let worst = inverses.iter().map(|m| ambient.op_norm(m)).fold(0.0, f64::max);
        let lip = f.lipschitz(ambient);
        if lip * worst >= 1.0 {
            return Err(Error::NotInvertible(format!(
                "lip_c·max‖A_n⁻¹‖ = {:.4} >= 1, backward orbit map is not a contraction",
                lip * worst
            )));
        }
        Ok(Self {
            sys,
            split,
            consts,
            ambient,
            f,
            inverses,
        })
    }

    pub fn system(&self) -> &WindowSystem {
        self.sys
    }

    /// The probe window `[m − margin, m + margin]` clipped to the system window.
    pub fn probe_window(&self, m: i64, margin: Option<i64>) -> Result<Window> {
        let w = self.sys.window();
        let margin = margin.unwrap_or_else(|| default_margin(&self.consts));
        if !w.contains(m) {
            return Err(Error::Domain(format!("index {m} outside the system window")));
        }
        let probe = Window::new((m - margin).max(w.lo()), (m + margin).min(w.hi()))?;
        if probe.lo() >= m || probe.hi() <= m {
            return Err(Error::Domain(format!(
                "probe window around {m} needs at least one index on each side"
            )));
        }
        Ok(probe)
    }

    /// `y_n = ℱ(n, m) y` on the probe window.
    pub fn perturbed_orbit(&self, m: i64, y: &DVector<f64>, probe: Window) -> Result<VecSeq> {
        if !self.sys.window().contains_window(&probe) || !probe.contains(m) {
            return Err(Error::Domain("probe window must lie in the system window and contain m".into()));
        }
        if y.len() != self.sys.dim() {
            return Err(Error::Structure(format!("point has dimension {}, expected {}", y.len(), self.sys.dim())));
        }
        let mut orbit = VecSeq::zeros(probe, self.sys.dim());
        orbit.set(m, y.clone());
        for n in m..probe.hi() {
            let next = step_map(self.sys, self.f, n, orbit.get(n));
            orbit.set(n + 1, next);
        }
        for n in (probe.lo()..m).rev() {
            let a_inv = &self.inverses[(n - self.sys.window().lo()) as usize];
            let prev = inverse_step(self.f, n, a_inv, orbit.get(n + 1))?;
            orbit.set(n, prev);
        }
        if !orbit.is_finite() {
            return Err(Error::Numerical("orbit overflowed on the probe window".into()));
        }
        Ok(orbit)
    }

    fn context(&self, probe: Window) -> Result<GreenContext> {
        let weak = DichotomyConstants { strong: None, ..self.consts };
        GreenContext::new(
            self.sys.restrict(probe)?,
            self.split.restrict(probe)?,
            weak,
            SequenceNorm::new(NormFamily::Sup, self.ambient),
        )
    }

    /// `h_m(y) = y + z^{s,u}_m` and `τ_m(y) = z^c_m`, where `z` shadows the
    /// perturbed orbit through `y` as a pseudotrajectory of the linear system.
    pub fn conjugacy_point(&self, query: &ConjugacyQuery, force: bool) -> Result<ConjugacyValue> {
        let probe = self.probe_window(query.m, query.margin)?;
        let ctx = self.context(probe)?;
        self.point_in(&ctx, query, force)
    }

    fn point_in(&self, ctx: &GreenContext, query: &ConjugacyQuery, force: bool) -> Result<ConjugacyValue> {
        let probe = ctx.system().window();
        let y = DVector::from_row_slice(&query.y);
        let orbit = self.perturbed_orbit(query.m, &y, probe)?;
        let zero = BuiltinPerturbation::zero(self.sys.dim());
        // against the linear system the defect of the orbit is exactly f_n(y_n)
        let forcing = orbit.map(|n, v| {
            if n < probe.hi() {
                self.f.eval(n, v)
            } else {
                DVector::zeros(v.len())
            }
        });
        let pseudo = PseudoTrajectory::with_residual(orbit, forcing)?;
        let forcing_sup = pseudo
            .residual
            .entries()
            .iter()
            .map(|v| self.ambient.vec_norm(v))
            .fold(0.0, f64::max);
        let delta = delta_for_epsilon(ctx.constants(), ctx.g_bound(), 0.0, query.epsilon)?;
        if forcing_sup > delta && !force {
            return Err(Error::Precondition(format!(
                "sup‖f_n‖ along the orbit is {forcing_sup:.6e} > delta {delta:.6e}"
            )));
        }
        let opts = SolveOptions { force: true, ..Default::default() };
        let report = quasi_shadow(ctx, &zero, &pseudo, query.epsilon, &opts)?;
        let h = &y + report.z_hyperbolic.get(query.m);
        Ok(ConjugacyValue {
            m: query.m,
            y: query.y.clone(),
            h: h.iter().copied().collect(),
            tau: report.z_central.get(query.m).iter().copied().collect(),
            probe,
            forcing_sup,
            delta,
            correction: Some(report.z),
        })
    }

    /// `h_m` at several points sharing one probe window.
    pub fn h_batch(&self, m: i64, points: &[DVector<f64>], margin: Option<i64>, epsilon: f64) -> Result<Vec<ConjugacyValue>> {
        let ctx = self.context(self.probe_window(m, margin)?)?;
        points
            .iter()
            .map(|p| {
                let q = ConjugacyQuery {
                    m,
                    y: p.iter().copied().collect(),
                    margin,
                    epsilon,
                };
                self.point_in(&ctx, &q, true)
            })
            .collect()
    }

    /// Checks `h_{m+1}(F_m y) = A_m h_m(y) + τ_{m+1}(F_m y)` and the size and
    /// bundle claims on every grid point.
    pub fn verify_conjugacy(&self, grid: &[(i64, Vec<f64>)], epsilon: f64, margin: Option<i64>) -> Result<ConjugacyReport> {
        let mut points = Vec::new();
        for (m, y) in grid {
            let q = ConjugacyQuery {
                m: *m,
                y: y.clone(),
                margin,
                epsilon,
            };
            let here = self.conjugacy_point(&q, true)?;
            let yv = DVector::from_row_slice(y);
            let image = step_map(self.sys, self.f, *m, &yv);
            let there = self.conjugacy_point(
                &ConjugacyQuery {
                    m: m + 1,
                    y: image.iter().copied().collect(),
                    margin,
                    epsilon,
                },
                true,
            )?;
            let h = DVector::from_row_slice(&here.h);
            let tau = DVector::from_row_slice(&here.tau);
            let h_next = DVector::from_row_slice(&there.h);
            let tau_next = DVector::from_row_slice(&there.tau);
            let gh1 = self.ambient.vec_norm(&(&h_next - self.sys.a(*m) * &h - &tau_next));
            let p3 = self.split.p3(*m);
            let dev = &h - &yv;
            let prev = self.perturbed_orbit(*m, &yv, here.probe)?;
            let recurrence = if *m > here.probe.lo() {
                let expect = p3 * (prev.get(*m) - self.sys.a(m - 1) * prev.get(m - 1));
                (&tau - expect).amax()
            } else {
                0.0
            };
            points.push(ConjugacyPoint {
                m: *m,
                y: y.clone(),
                h: here.h.clone(),
                tau: here.tau.clone(),
                gh1_residual: gh1,
                h_deviation: self.ambient.vec_norm(&dev),
                tau_norm: self.ambient.vec_norm(&tau),
                deviation_central: (p3 * &dev).amax(),
                tau_off_central: (&tau - p3 * &tau).amax(),
                tau_recurrence: recurrence,
                forcing_sup: here.forcing_sup.max(there.forcing_sup),
                delta: here.delta,
            });
        }
        let max = |f: fn(&ConjugacyPoint) -> f64| points.iter().map(f).fold(0.0, f64::max);
        let scale = grid
            .iter()
            .flat_map(|(_, y)| y.iter().map(|v| v.abs()))
            .fold(1.0, f64::max);
        let delta = points.first().map_or(f64::INFINITY, |p| p.delta);
        let summary = VerificationSummary::new(vec![
            Check::at_most("forcing_within_delta", max(|p| p.forcing_sup), delta),
            Check::at_most("conjugacy_equation", max(|p| p.gh1_residual), CONJUGACY_TOL * scale),
            Check::at_most("h_minus_id", max(|p| p.h_deviation), epsilon * (1.0 + 1e-12)),
            Check::at_most("tau_size", max(|p| p.tau_norm), epsilon * (1.0 + 1e-12)),
            Check::at_most("h_minus_id_hyperbolic", max(|p| p.deviation_central), MEMBERSHIP_TOL * scale),
            Check::at_most("tau_central", max(|p| p.tau_off_central), MEMBERSHIP_TOL * scale),
            Check::at_most("tau_recurrence", max(|p| p.tau_recurrence), MEMBERSHIP_TOL * scale),
        ]);
        Ok(ConjugacyReport {
            epsilon,
            points,
            summary,
        })
    }

    /// Empirical modulus of continuity of `h_m` at `y`.
    pub fn continuity_probe(
        &self,
        m: i64,
        y: &DVector<f64>,
        radii: &[f64],
        directions: usize,
        epsilon: f64,
        seed: u64,
    ) -> Result<ModulusTable> {
        let ctx = self.context(self.probe_window(m, None)?)?;
        let eval = |p: &DVector<f64>| -> Result<DVector<f64>> {
            let q = ConjugacyQuery {
                m,
                y: p.iter().copied().collect(),
                margin: None,
                epsilon,
            };
            Ok(DVector::from_row_slice(&self.point_in(&ctx, &q, true)?.h))
        };
        continuity_probe_fn(eval, y, radii, directions, self.ambient, seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyPoint {
    pub m: i64,
    pub y: Vec<f64>,
    pub h: Vec<f64>,
    pub tau: Vec<f64>,
    pub gh1_residual: f64,
    pub h_deviation: f64,
    pub tau_norm: f64,
    pub deviation_central: f64,
    pub tau_off_central: f64,
    pub tau_recurrence: f64,
    pub forcing_sup: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyReport {
    pub epsilon: f64,
    pub points: Vec<ConjugacyPoint>,
    pub summary: VerificationSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModulusTable {
    pub radii: Vec<f64>,
    pub modulus: Vec<f64>,
    /// Heuristic: the modulus is nonincreasing and shrinks with the radius.
    pub vanishing: bool,
}

/// `sup_{‖w−y‖=r} ‖h(w) − h(y)‖` over `directions` random unit directions
/// for each radius (radii in decreasing order).
pub fn continuity_probe_fn(
    h: impl Fn(&DVector<f64>) -> Result<DVector<f64>>,
    y: &DVector<f64>,
    radii: &[f64],
    directions: usize,
    ambient: Ambient,
    seed: u64,
) -> Result<ModulusTable> {
    if radii.len() < 2 || radii.windows(2).any(|w| !(w[1] < w[0])) || radii.iter().any(|&r| !(r > 0.0)) {
        return Err(Error::Config("radii must be positive and strictly decreasing".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirs: Vec<DVector<f64>> = (0..directions.max(1))
        .map(|_| loop {
            let v = DVector::from_fn(y.len(), |_, _| rng.random_range(-1.0..1.0));
            let n = ambient.vec_norm(&v);
            if n > 1e-3 {
                break v / n;
            }
        })
        .collect();
    let base = h(y)?;
    let mut modulus = Vec::with_capacity(radii.len());
    for &r in radii {
        let mut worst = 0.0_f64;
        for d in &dirs {
            worst = worst.max(ambient.vec_norm(&(h(&(y + d * r))? - &base)));
        }
        modulus.push(worst);
    }
    let slack = 1e-12 * modulus[0].max(1.0);
    let monotone = modulus.windows(2).all(|w| w[1] <= w[0] + slack);
    let first = modulus[0];
    let last = *modulus.last().expect("at least two radii");
    let shrink = radii[radii.len() - 1] / radii[0];
    let vanishing = monotone && last <= (first * shrink.sqrt()).max(slack);
    Ok(ModulusTable {
        radii: radii.to_vec(),
        modulus,
        vanishing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dichotomy::{fit_constants, Bundle};

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(v))
    }

    fn e(i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(3);
        v[i] = 1.0;
        v
    }

    fn diag_system(radius: i64) -> (WindowSystem, SplittingTriple, DichotomyConstants) {
        let w = Window::centered(radius).unwrap();
        let sys = WindowSystem::constant(w, diag(&[0.5, 2.0, 1.0])).unwrap();
        let split =
            SplittingTriple::coordinate(w, &[Bundle::Stable, Bundle::Unstable, Bundle::Central]).unwrap();
        let consts = fit_constants(&sys, &split, Ambient::Euclidean, true).unwrap();
        (sys, split, consts)
    }

    fn constant_offset(v: DVector<f64>) -> BuiltinPerturbation {
        BuiltinPerturbation::affine(DMatrix::zeros(3, 3), Some(v)).unwrap()
    }

    #[test]
    fn default_margin_for_halving_rates() {
        let c = DichotomyConstants::new(1.0, 2f64.ln(), 2f64.ln()).unwrap();
        assert_eq!(default_margin(&c), 80);
    }

    #[test]
    fn linear_orbits() {
        let (sys, split, consts) = diag_system(10);
        let f = BuiltinPerturbation::zero(3);
        let qc = QuasiConjugacy::new(&sys, &split, consts, Ambient::Euclidean, &f).unwrap();
        let probe = Window::new(-5, 5).unwrap();
        let orbit = qc.perturbed_orbit(0, &e(2), probe).unwrap();
        for n in probe.indices() {
            assert_eq!(orbit.get(n), &e(2));
        }
        let y = DVector::from_vec(vec![1.0, 1.0, 0.0]);
        let orbit = qc.perturbed_orbit(1, &y, probe).unwrap();
        assert!((orbit.get(4) - DVector::from_vec(vec![0.125, 8.0, 0.0])).amax() < 1e-15);
        assert!((orbit.get(-1) - DVector::from_vec(vec![4.0, 0.25, 0.0])).amax() < 1e-15);
    }

    #[test]
    fn tanh_inverse_round_trip() {
        let (sys, _, _) = diag_system(5);
        let f = BuiltinPerturbation::tanh(0.1, diag(&[1.0, -0.5, 0.7]), Some(DVector::from_vec(vec![0.1, 0.2, -0.3])))
            .unwrap();
        let inv = sys.inverses().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let x = DVector::from_fn(3, |_, _| rng.random_range(-2.0..2.0));
            let fx = step_map(&sys, &f, 0, &x);
            let back = inverse_step(&f, 0, &inv[0], &fx).unwrap();
            assert!((back - &x).amax() <= 1e-10);
        }
    }

    #[test]
    fn large_lipschitz_is_not_invertible() {
        let (sys, split, consts) = diag_system(5);
        let f = BuiltinPerturbation::tanh(0.6, DMatrix::identity(3, 3), None).unwrap();
        assert!(matches!(
            QuasiConjugacy::new(&sys, &split, consts, Ambient::Euclidean, &f),
            Err(Error::NotInvertible(_))
        ));
    }

    #[test]
    fn zero_perturbation_gives_identity() {
        let (sys, split, consts) = diag_system(100);
        let f = BuiltinPerturbation::zero(3);
        let qc = QuasiConjugacy::new(&sys, &split, consts, Ambient::Euclidean, &f).unwrap();
        let q = ConjugacyQuery { m: 0, y: vec![0.3, -0.2, 0.5], margin: None, epsilon: 0.1 };
        let v = qc.conjugacy_point(&q, false).unwrap();
        assert_eq!(v.h, q.y);
        assert_eq!(v.tau, vec![0.0; 3]);
        let grid: Vec<(i64, Vec<f64>)> = vec![(0, vec![0.1, 0.2, 0.3]), (3, vec![-1.0, 0.0, 2.0])];
        let r = qc.verify_conjugacy(&grid, 0.1, None).unwrap();
        assert!(r.summary.passed);
        assert!(r.points.iter().all(|p| p.gh1_residual == 0.0));
    }

    /// Dense solve of the linear shadowing problem on the probe window.
    fn dense_correction(ctx: &GreenContext, forcing: &VecSeq) -> VecSeq {
        let w = ctx.system().window();
        let g = ctx.assemble_g_dense().unwrap();
        let mut s0 = DVector::zeros(w.len() * 3);
        for n in w.lo() + 1..=w.hi() {
            s0.rows_mut(w.pos(n) * 3, 3).copy_from(&(-forcing.get(n - 1)));
        }
        VecSeq::from_stacked(w, 3, &(g * s0)).unwrap()
    }

    #[test]
    fn central_bump_forcing() {
        let (sys, split, consts) = diag_system(100);
        let eta = 0.01;
        let f = constant_offset(e(2) * eta);
        let qc = QuasiConjugacy::new(&sys, &split, consts, Ambient::Euclidean, &f).unwrap();
        let q = ConjugacyQuery { m: 0, y: vec![0.0; 3], margin: Some(30), epsilon: 0.1 };
        let v = qc.conjugacy_point(&q, false).unwrap();
        assert!(v.h.iter().all(|x| x.abs() < 1e-15));
        assert!((DVector::from_row_slice(&v.tau) - e(2) * eta).amax() < 1e-15);

        let ctx = qc.context(v.probe).unwrap();
        let forcing = VecSeq::from_fn(v.probe, 3, |n| if n < v.probe.hi() { e(2) * eta } else { DVector::zeros(3) });
        let oracle = dense_correction(&ctx, &forcing);
        assert!((oracle.get(0) - e(2) * eta).amax() < 1e-13);

        let grid = vec![(0, vec![0.0, 0.0, 0.0]), (-2, vec![0.1, -0.1, 0.3])];
        let r = qc.verify_conjugacy(&grid, 0.1, Some(30)).unwrap();
        assert!(r.summary.passed, "{:?}", r.summary);
    }

    #[test]
    fn stable_bump_forcing() {
        let (sys, split, consts) = diag_system(100);
        let eta = 0.01;
        let f = constant_offset(e(0) * eta);
        let qc = QuasiConjugacy::new(&sys, &split, consts, Ambient::Euclidean, &f).unwrap();
        let margin = 60;
        let q = ConjugacyQuery { m: 0, y: vec![0.0; 3], margin: Some(margin), epsilon: 0.1 };
        let v = qc.conjugacy_point(&q, false).unwrap();
        assert!(v.tau.iter().all(|x| x.abs() < 1e-15));
        // h_0(0) = 0 + z^{s,u}_0 = −Σ_{j=0}^{margin−1} 2^{-j} η e_s
        let tail: f64 = (0..margin).map(|j| 0.5f64.powi(j as i32)).sum();
        assert!((v.h[0] + tail * eta).abs() < 1e-14);
        assert!(v.h[1].abs() < 1e-15 && v.h[2].abs() < 1e-15);
    }

    #[test]
    fn tanh_conjugacy_grid() {
        let (sys, split, consts) = diag_system(120);
        let f = BuiltinPerturbation::tanh(0.002, diag(&[1.0, 0.5, -0.8]), Some(DVector::from_vec(vec![0.2, 0.1, 0.0])))
            .unwrap();
        let qc = QuasiConjugacy::new(&sys, &split, consts, Ambient::Euclidean, &f).unwrap();
        let mut grid = Vec::new();
        for m in [-2, 0, 3] {
            for y in [[0.0, 0.0, 0.0], [0.5, -0.3, 0.2]] {
                grid.push((m, y.to_vec()));
            }
        }
        let r = qc.verify_conjugacy(&grid, 0.1, None).unwrap();
        assert!(r.summary.passed, "{:?}", r.summary);
    }

    #[test]
    fn forcing_beyond_delta_is_reported() {
        let (sys, split, consts) = diag_system(60);
        let f = constant_offset(e(2) * 0.5);
        let qc = QuasiConjugacy::new(&sys, &split, consts, Ambient::Euclidean, &f).unwrap();
        let q = ConjugacyQuery { m: 0, y: vec![0.0; 3], margin: Some(20), epsilon: 0.1 };
        assert!(matches!(qc.conjugacy_point(&q, false), Err(Error::Precondition(_))));
        let r = qc.verify_conjugacy(&[(0, vec![0.0; 3])], 0.1, Some(20)).unwrap();
        assert!(!r.summary.passed);
        assert!(!r.summary.check("forcing_within_delta").unwrap().passed);
    }

    #[test]
    fn continuity_tables() {
        let radii = [1e-1, 1e-2, 1e-3, 1e-4];
        let y = DVector::from_vec(vec![0.2, 0.1, -0.3]);
        let id = continuity_probe_fn(|w| Ok(w.clone()), &y, &radii, 8, Ambient::Euclidean, 1).unwrap();
        for (r, m) in id.radii.iter().zip(&id.modulus) {
            assert!((r - m).abs() < 1e-12 * r.max(1e-3));
        }
        assert!(id.vanishing);

        let jump = |w: &DVector<f64>| Ok(if w[0] > 0.2 { w + e(1) } else { w.clone() });
        let t = continuity_probe_fn(jump, &y, &radii, 16, Ambient::Euclidean, 2).unwrap();
        assert!(!t.vanishing);

        let (sys, split, consts) = diag_system(100);
        let f = BuiltinPerturbation::tanh(0.002, diag(&[1.0, 0.5, -0.8]), None).unwrap();
        let qc = QuasiConjugacy::new(&sys, &split, consts, Ambient::Euclidean, &f).unwrap();
        let t = qc.continuity_probe(0, &y, &radii, 4, 0.1, 3).unwrap();
        assert!(t.vanishing, "{t:?}");
        let c = t.modulus[0] / radii[0];
        for (r, m) in t.radii.iter().zip(&t.modulus) {
            assert!(*m <= 2.0 * c * r);
        }
    }
}
