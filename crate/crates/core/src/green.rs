//! The Green-type operator on the hyperbolic bundle and the operator
//! `G x = -x^c + 𝔸^{s,u} x^{s,u}`.

use nalgebra::{DMatrix, DVector};

use crate::dichotomy::{
    check_constants, validate_splitting, DichotomyConstants, SplittingTriple, UnstableInverses,
    WindowSystem, SPLIT_TOL,
};
use crate::error::{Error, Result};
use crate::seqspace::{SequenceNorm, VecSeq};

/// Largest `window·k` for which the dense matrix of `G` is assembled.
pub const DENSE_CAP: usize = 4000;

/// Relative tolerance for the dichotomy inequalities when building a context.
pub const CONSTANTS_TOL: f64 = 1e-9;

/// Allowed central component of an input to `𝔸^{s,u}`, relative to `max(1, ‖y_n‖)`.
pub const CENTRAL_INPUT_TOL: f64 = 1e-10;

/// A validated system together with its dichotomy constants and norm.
#[derive(Debug, Clone)]
pub struct GreenContext {
    sys: WindowSystem,
    split: SplittingTriple,
    consts: DichotomyConstants,
    norm: SequenceNorm,
    unstable: UnstableInverses,
}

impl GreenContext {
    pub fn new(
        sys: WindowSystem,
        split: SplittingTriple,
        consts: DichotomyConstants,
        norm: SequenceNorm,
    ) -> Result<Self> {
        Self::with_tolerances(sys, split, consts, norm, SPLIT_TOL, CONSTANTS_TOL)
    }

    /// Like [`GreenContext::new`] with explicit tolerances, for systems whose
    /// matrices come from numerical integration.
    pub fn with_tolerances(
        sys: WindowSystem,
        split: SplittingTriple,
        consts: DichotomyConstants,
        norm: SequenceNorm,
        split_tol: f64,
        constants_tol: f64,
    ) -> Result<Self> {
        consts.validate()?;
        norm.family.validate()?;
        validate_splitting(&sys, &split, split_tol)?;
        let report = check_constants(&sys, &split, &consts, norm.ambient, constants_tol)?;
        if let Some(bad) = report.checks.iter().find(|c| !c.passed) {
            return Err(Error::NotDichotomic(format!(
                "{} bound fails: ratio {:.6} at (m, n) = ({}, {})",
                bad.kind, bad.max_ratio, bad.worst_m, bad.worst_n
            )));
        }
        let unstable = UnstableInverses::new(&sys, &split)?;
        Ok(Self {
            sys,
            split,
            consts,
            norm,
            unstable,
        })
    }

    pub fn system(&self) -> &WindowSystem {
        &self.sys
    }

    pub fn splitting(&self) -> &SplittingTriple {
        &self.split
    }

    pub fn constants(&self) -> &DichotomyConstants {
        &self.consts
    }

    pub fn norm(&self) -> &SequenceNorm {
        &self.norm
    }

    /// The same context measured in a different sequence norm.
    pub fn with_norm(&self, norm: SequenceNorm) -> Result<Self> {
        norm.family.validate()?;
        if norm.ambient != self.norm.ambient {
            return Self::new(self.sys.clone(), self.split.clone(), self.consts, norm);
        }
        Ok(Self { norm, ..self.clone() })
    }

    pub fn g_bound(&self) -> f64 {
        g_norm_upper(&self.consts)
    }

    pub fn adapted_norm(&self, x: &VecSeq) -> Result<f64> {
        crate::dichotomy::adapted_norm(x, &self.split, &self.norm)
    }

    fn check_shape(&self, x: &VecSeq) -> Result<()> {
        if x.window() != self.sys.window() || x.dim() != self.sys.dim() {
            return Err(Error::Structure(format!(
                "sequence on [{}, {}] with dim {} does not match the system",
                x.window().lo(),
                x.window().hi(),
                x.dim()
            )));
        }
        Ok(())
    }

    /// `(𝔸^{s,u}y)_n = Σ_{m≤n} 𝒜(n,m)P¹_m y_m − Σ_{m>n} 𝒜(n,m)P²_m y_m`.
    pub fn apply_asu(&self, y: &VecSeq) -> Result<VecSeq> {
        self.check_shape(y)?;
        for (n, v) in y.iter() {
            let central = (self.split.p3(n) * v).amax();
            if central > CENTRAL_INPUT_TOL * v.amax().max(1.0) {
                return Err(Error::Domain(format!(
                    "input has central component {central:.3e} at n = {n}"
                )));
            }
        }
        Ok(self.asu_unchecked(y))
    }

    /// Both sums evaluated by one-step recursions, re-projecting onto the
    /// bundle after each step.
    fn asu_unchecked(&self, y: &VecSeq) -> VecSeq {
        let w = y.window();
        let k = y.dim();
        let mut stable = Vec::with_capacity(w.len());
        let mut s = self.split.p1(w.lo()) * y.get(w.lo());
        stable.push(s.clone());
        for n in w.lo() + 1..=w.hi() {
            s = self.split.p1(n) * (self.sys.a(n - 1) * &s + y.get(n));
            stable.push(s.clone());
        }
        let mut unstable = vec![DVector::zeros(k); w.len()];
        for n in (w.lo()..w.hi()).rev() {
            let next = &unstable[w.pos(n + 1)] + y.get(n + 1);
            unstable[w.pos(n)] = self.unstable.step(n) * next;
        }
        let entries = stable.into_iter().zip(unstable).map(|(s, u)| s - u).collect();
        VecSeq::from_entries(w, k, entries).expect("shapes match")
    }

    /// `G x = -x^c + 𝔸^{s,u} x^{s,u}`.
    pub fn apply_g(&self, x: &VecSeq) -> Result<VecSeq> {
        self.check_shape(x)?;
        let central = x.map(|n, v| self.split.p3(n) * v);
        let hyperbolic = x.sub(&central);
        Ok(self.asu_unchecked(&hyperbolic).sub(&central))
    }

    /// Dense matrix of `G` acting on stacked coordinates (index-major).
    pub fn assemble_g_dense(&self) -> Result<DMatrix<f64>> {
        let w = self.sys.window();
        let k = self.sys.dim();
        let size = w.len() * k;
        if size > DENSE_CAP {
            return Err(Error::Resource(format!(
                "dense G would be {size}x{size} (cap {DENSE_CAP})"
            )));
        }
        let mut out = DMatrix::zeros(size, size);
        for col in 0..size {
            let mut e = DVector::zeros(size);
            e[col] = 1.0;
            let x = VecSeq::from_stacked(w, k, &e)?;
            let gx = self.apply_g(&x)?.to_stacked();
            out.set_column(col, &gx);
        }
        Ok(out)
    }
}

/// `max(1, D/(1−e^{−d}) + D e^{−b}/(1−e^{−b}))`: the kernel ℓ¹ bound on
/// `‖G‖` in the adapted norm, valid for every admissible family.
pub fn g_norm_upper(consts: &DichotomyConstants) -> f64 {
    let d = consts.stable_rate;
    let b = consts.unstable_rate;
    let stable = consts.bound / -(-d).exp_m1();
    let unstable = consts.bound * (-b).exp() / -(-b).exp_m1();
    (stable + unstable).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dichotomy::{fit_constants, Bundle};
    use crate::seqspace::{Ambient, NormFamily, Window};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_row_slice(v))
    }

    fn e(i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(3);
        v[i] = 1.0;
        v
    }

    fn diag_ctx(radius: i64) -> GreenContext {
        let w = Window::centered(radius).unwrap();
        let sys = WindowSystem::constant(w, diag(&[0.5, 2.0, 1.0])).unwrap();
        let split =
            SplittingTriple::coordinate(w, &[Bundle::Stable, Bundle::Unstable, Bundle::Central]).unwrap();
        let consts = fit_constants(&sys, &split, Ambient::Euclidean, false).unwrap();
        GreenContext::new(sys, split, consts, SequenceNorm::sup()).unwrap()
    }

    /// A rotating 3-dimensional system with oblique varying projections.
    fn varying_ctx(radius: i64, seed: u64) -> GreenContext {
        let w = Window::centered(radius).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let qs: Vec<DMatrix<f64>> = w
            .indices()
            .map(|_| DMatrix::identity(3, 3) + DMatrix::from_fn(3, 3, |_, _| rng.random_range(-0.25..0.25)))
            .collect();
        let qi: Vec<DMatrix<f64>> = qs.iter().map(|q| q.clone().try_inverse().unwrap()).collect();
        let sys = WindowSystem::from_fn(w, 3, |n| {
            let p = w.pos(n);
            &qs[p + 1] * diag(&[0.4, 2.5, 1.1]) * &qi[p]
        })
        .unwrap();
        let split = SplittingTriple::from_fn(w, 3, |n| {
            let p = w.pos(n);
            [0, 1, 2].map(|i| &qs[p] * DMatrix::from_diagonal(&e(i)) * &qi[p])
        })
        .unwrap();
        let consts = fit_constants(&sys, &split, Ambient::Euclidean, false).unwrap();
        GreenContext::new(sys, split, consts, SequenceNorm::sup()).unwrap()
    }

    fn random_hyperbolic(ctx: &GreenContext, rng: &mut ChaCha8Rng) -> VecSeq {
        VecSeq::from_fn(ctx.system().window(), 3, |n| {
            let v = DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0));
            &v - ctx.splitting().p3(n) * &v
        })
    }

    #[test]
    fn zero_maps_to_zero() {
        let ctx = diag_ctx(10);
        let z = VecSeq::zeros(ctx.system().window(), 3);
        assert_eq!(ctx.apply_asu(&z).unwrap(), z);
    }

    #[test]
    fn stable_delta_closed_form() {
        let ctx = diag_ctx(20);
        let w = ctx.system().window();
        let x = ctx.apply_asu(&VecSeq::delta(w, 0, e(0))).unwrap();
        for n in w.indices() {
            let expect = if n >= 0 { e(0) * 0.5f64.powi(n as i32) } else { DVector::zeros(3) };
            assert!((x.get(n) - expect).amax() < 1e-10, "n = {n}");
        }
    }

    #[test]
    fn unstable_delta_closed_form() {
        let ctx = diag_ctx(20);
        let w = ctx.system().window();
        let x = ctx.apply_asu(&VecSeq::delta(w, 0, e(1))).unwrap();
        for n in w.indices() {
            let expect = if n <= -1 { e(1) * -(2f64.powi(n as i32)) } else { DVector::zeros(3) };
            assert!((x.get(n) - expect).amax() < 1e-10, "n = {n}");
        }
    }

    #[test]
    fn central_input_is_a_domain_error() {
        let ctx = diag_ctx(5);
        let y = VecSeq::delta(ctx.system().window(), 1, e(2));
        assert!(matches!(ctx.apply_asu(&y), Err(Error::Domain(_))));
    }

    #[test]
    fn g_on_pure_and_mixed_inputs() {
        let ctx = diag_ctx(12);
        let w = ctx.system().window();
        let c = VecSeq::delta(w, 3, e(2) * 2.0);
        assert_eq!(ctx.apply_g(&c).unwrap(), c.scale(-1.0));
        let h = VecSeq::delta(w, -2, e(0) - e(1));
        assert_eq!(ctx.apply_g(&h).unwrap(), ctx.apply_asu(&h).unwrap());
        let mixed = c.add(&h);
        let expect = ctx.apply_asu(&h).unwrap().sub(&c);
        assert!(ctx.apply_g(&mixed).unwrap().sub(&expect).to_stacked().amax() < 1e-14);
    }

    #[test]
    fn dense_assembly_matches_apply() {
        let ctx = varying_ctx(8, 2);
        let dense = ctx.assemble_g_dense().unwrap();
        let w = ctx.system().window();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let v = DVector::from_fn(w.len() * 3, |_, _| rng.random_range(-1.0..1.0));
            let x = VecSeq::from_stacked(w, 3, &v).unwrap();
            let direct = ctx.apply_g(&x).unwrap().to_stacked();
            assert!((&dense * &v - direct).amax() < 1e-10);
        }
        let d = diag_ctx(4).assemble_g_dense().unwrap();
        let col = 2;
        let mut expect = DVector::zeros(d.nrows());
        expect[col] = -1.0;
        assert_eq!(d.column(col).into_owned(), expect);
    }

    #[test]
    fn dense_cap_is_enforced() {
        let w = Window::centered(50).unwrap();
        let k = 40;
        let axes: Vec<Bundle> = (0..k).map(|i| if i % 2 == 0 { Bundle::Stable } else { Bundle::Unstable }).collect();
        let a = DMatrix::from_fn(k, k, |i, j| if i != j { 0.0 } else if i % 2 == 0 { 0.5 } else { 2.0 });
        let sys = WindowSystem::constant(w, a).unwrap();
        let split = SplittingTriple::coordinate(w, &axes).unwrap();
        let consts = DichotomyConstants::new(1.0, 2f64.ln(), 2f64.ln()).unwrap();
        let ctx = GreenContext::new(sys, split, consts, SequenceNorm::sup()).unwrap();
        assert!(matches!(ctx.assemble_g_dense(), Err(Error::Resource(_))));
    }

    #[test]
    fn norm_upper_examples() {
        let c = DichotomyConstants::new(1.0, 2f64.ln(), 2f64.ln()).unwrap();
        assert!((g_norm_upper(&c) - 3.0).abs() < 1e-12);
        let c = DichotomyConstants::new(1.0, 200.0, 200.0).unwrap();
        assert!((g_norm_upper(&c) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn random_probes_stay_below_the_bound() {
        for (seed, family) in [
            (3, NormFamily::Sup),
            (4, NormFamily::Lp { p: 1.0 }),
            (5, NormFamily::Lp { p: 2.5 }),
        ] {
            let base = varying_ctx(10, seed);
            let ctx = base.with_norm(SequenceNorm::new(family, Ambient::Euclidean)).unwrap();
            let bound = ctx.g_bound();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let w = ctx.system().window();
            for _ in 0..200 {
                let x = VecSeq::from_fn(w, 3, |_| DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)));
                let ratio = ctx.adapted_norm(&ctx.apply_g(&x).unwrap()).unwrap() / ctx.adapted_norm(&x).unwrap();
                assert!(ratio <= bound * (1.0 + 1e-12), "ratio {ratio} > bound {bound}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn difference_identity_and_range(seed in 0u64..1000, ctx_seed in 0u64..4) {
            let ctx = varying_ctx(12, ctx_seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = random_hyperbolic(&ctx, &mut rng);
            let x = ctx.apply_asu(&y).unwrap();
            let scale = ctx.norm().norm(&y).unwrap();
            let w = y.window();
            for n in w.lo() + 1..=w.hi() {
                let r = x.get(n) - ctx.system().a(n - 1) * x.get(n - 1) - y.get(n);
                prop_assert!(r.amax() <= 1e-10 * scale.max(1.0));
            }
            for n in w.indices() {
                prop_assert!((ctx.splitting().p3(n) * x.get(n)).amax() <= 1e-10);
            }
        }

        #[test]
        fn linearity(seed in 0u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0) {
            let ctx = varying_ctx(10, 1);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y1 = random_hyperbolic(&ctx, &mut rng);
            let y2 = random_hyperbolic(&ctx, &mut rng);
            let lhs = ctx.apply_asu(&y1.scale(alpha).add(&y2.scale(beta))).unwrap();
            let rhs = ctx.apply_asu(&y1).unwrap().scale(alpha).add(&ctx.apply_asu(&y2).unwrap().scale(beta));
            prop_assert!(lhs.sub(&rhs).to_stacked().amax() <= 1e-10);
        }
    }
}
