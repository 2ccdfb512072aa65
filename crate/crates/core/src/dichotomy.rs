//! Linear window systems, their invariant splittings, the cocycle, and
//! fitting/checking of partial exponential dichotomy constants.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::seqspace::{Ambient, SequenceNorm, VecSeq, Window};

/// Smallest admissible singular value of `A_n` restricted to the unstable bundle.
pub const SIGMA_MIN: f64 = 1e-10;

/// Default tolerance for projection identities.
pub const SPLIT_TOL: f64 = 1e-10;

/// Rates on bundles of rank zero are unconstrained; they are reported at this cap.
pub const RATE_CAP: f64 = 700.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Bundle {
    Stable,
    Unstable,
    Central,
}

impl Bundle {
    pub const ALL: [Bundle; 3] = [Bundle::Stable, Bundle::Unstable, Bundle::Central];

    fn slot(self) -> usize {
        match self {
            Bundle::Stable => 0,
            Bundle::Unstable => 1,
            Bundle::Central => 2,
        }
    }

    pub fn parse(label: &str) -> Result<Self> {
        match label {
            "s" | "stable" => Ok(Bundle::Stable),
            "u" | "unstable" => Ok(Bundle::Unstable),
            "c" | "central" => Ok(Bundle::Central),
            other => Err(Error::Config(format!("unknown bundle label {other:?}"))),
        }
    }
}

/// The sequence `(A_n)` for `n` in `lo..hi` on a window `[lo, hi]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSystem {
    window: Window,
    dim: usize,
    matrices: Vec<DMatrix<f64>>,
}

impl WindowSystem {
    pub fn new(window: Window, dim: usize, matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        if matrices.len() != window.len() - 1 {
            return Err(Error::Structure(format!(
                "window [{}, {}] needs {} matrices, got {}",
                window.lo(),
                window.hi(),
                window.len() - 1,
                matrices.len()
            )));
        }
        for (i, a) in matrices.iter().enumerate() {
            if a.nrows() != dim || a.ncols() != dim {
                return Err(Error::Structure(format!(
                    "A_{} is {}x{}, expected {dim}x{dim}",
                    window.lo() + i as i64,
                    a.nrows(),
                    a.ncols()
                )));
            }
            if a.iter().any(|v| !v.is_finite()) {
                return Err(Error::Structure(format!(
                    "A_{} has nonfinite entries",
                    window.lo() + i as i64
                )));
            }
        }
        Ok(Self { window, dim, matrices })
    }

    pub fn constant(window: Window, a: DMatrix<f64>) -> Result<Self> {
        let dim = a.nrows();
        Self::new(window, dim, vec![a; window.len() - 1])
    }

    pub fn from_fn(window: Window, dim: usize, f: impl FnMut(i64) -> DMatrix<f64>) -> Result<Self> {
        Self::new(window, dim, (window.lo()..window.hi()).map(f).collect())
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// `A_n`, defined for `lo <= n < hi`.
    pub fn a(&self, n: i64) -> &DMatrix<f64> {
        assert!(
            n >= self.window.lo() && n < self.window.hi(),
            "A_{n} is not defined on the window"
        );
        &self.matrices[(n - self.window.lo()) as usize]
    }

    pub fn matrices(&self) -> &[DMatrix<f64>] {
        &self.matrices
    }

    pub fn restrict(&self, sub: Window) -> Result<Self> {
        if !self.window.contains_window(&sub) {
            return Err(Error::Structure("sub-window not contained in the system window".into()));
        }
        Self::from_fn(sub, self.dim, |n| self.a(n).clone())
    }

    /// `sup_n ‖A_n‖`.
    pub fn sup_norm(&self, ambient: Ambient) -> f64 {
        self.matrices.iter().map(|a| ambient.op_norm(a)).fold(0.0, f64::max)
    }

    /// Full inverses `A_n⁻¹`; fails when some `A_n` is singular.
    pub fn inverses(&self) -> Result<Vec<DMatrix<f64>>> {
        self.matrices
            .iter()
            .enumerate()
            .map(|(i, a)| {
                let n = self.window.lo() + i as i64;
                if linalg::smallest_singular_value(a) < SIGMA_MIN {
                    return Err(Error::NotInvertible(format!("A_{n} is numerically singular")));
                }
                a.clone()
                    .try_inverse()
                    .ok_or_else(|| Error::NotInvertible(format!("A_{n} is singular")))
            })
            .collect()
    }
}

/// Projections `P¹_n, P²_n, P³_n` for every `n` in the window.
#[derive(Debug, Clone, PartialEq)]
pub struct SplittingTriple {
    window: Window,
    dim: usize,
    projections: [Vec<DMatrix<f64>>; 3],
}

impl SplittingTriple {
    pub fn new(
        window: Window,
        dim: usize,
        p1: Vec<DMatrix<f64>>,
        p2: Vec<DMatrix<f64>>,
        p3: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        for (label, ps) in [("P1", &p1), ("P2", &p2), ("P3", &p3)] {
            if ps.len() != window.len() {
                return Err(Error::Structure(format!(
                    "{label} needs {} matrices, got {}",
                    window.len(),
                    ps.len()
                )));
            }
            if ps.iter().any(|p| p.nrows() != dim || p.ncols() != dim) {
                return Err(Error::Structure(format!("{label} matrices must be {dim}x{dim}")));
            }
            if ps.iter().any(|p| p.iter().any(|v| !v.is_finite())) {
                return Err(Error::Structure(format!("{label} has nonfinite entries")));
            }
        }
        Ok(Self {
            window,
            dim,
            projections: [p1, p2, p3],
        })
    }

    pub fn constant(window: Window, p1: DMatrix<f64>, p2: DMatrix<f64>, p3: DMatrix<f64>) -> Result<Self> {
        let dim = p1.nrows();
        let len = window.len();
        Self::new(window, dim, vec![p1; len], vec![p2; len], vec![p3; len])
    }

    /// Coordinate projections from a per-axis bundle assignment.
    pub fn coordinate(window: Window, axes: &[Bundle]) -> Result<Self> {
        let dim = axes.len();
        let proj = |b: Bundle| {
            DMatrix::from_diagonal(&DVector::from_iterator(
                dim,
                axes.iter().map(|&a| if a == b { 1.0 } else { 0.0 }),
            ))
        };
        Self::constant(window, proj(Bundle::Stable), proj(Bundle::Unstable), proj(Bundle::Central))
    }

    pub fn from_fn(
        window: Window,
        dim: usize,
        mut f: impl FnMut(i64) -> [DMatrix<f64>; 3],
    ) -> Result<Self> {
        let mut p = [Vec::new(), Vec::new(), Vec::new()];
        for n in window.indices() {
            let [a, b, c] = f(n);
            p[0].push(a);
            p[1].push(b);
            p[2].push(c);
        }
        let [p1, p2, p3] = p;
        Self::new(window, dim, p1, p2, p3)
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn projection(&self, bundle: Bundle, n: i64) -> &DMatrix<f64> {
        &self.projections[bundle.slot()][self.window.pos(n)]
    }

    pub fn p1(&self, n: i64) -> &DMatrix<f64> {
        self.projection(Bundle::Stable, n)
    }

    pub fn p2(&self, n: i64) -> &DMatrix<f64> {
        self.projection(Bundle::Unstable, n)
    }

    pub fn p3(&self, n: i64) -> &DMatrix<f64> {
        self.projection(Bundle::Central, n)
    }

    pub fn restrict(&self, sub: Window) -> Result<Self> {
        if !self.window.contains_window(&sub) {
            return Err(Error::Structure("sub-window not contained in the splitting window".into()));
        }
        Self::from_fn(sub, self.dim, |n| {
            [self.p1(n).clone(), self.p2(n).clone(), self.p3(n).clone()]
        })
    }

    /// True when every central projection vanishes (a classical exponential dichotomy).
    pub fn central_is_trivial(&self) -> bool {
        self.projections[2].iter().all(|p| p.amax() <= 1e-12)
    }

    pub fn rank(&self, bundle: Bundle, n: i64) -> usize {
        linalg::projection_rank(self.projection(bundle, n))
    }

    /// Coordinates of `v` in the given bundle at index `n`.
    pub fn component(&self, bundle: Bundle, n: i64, v: &DVector<f64>) -> DVector<f64> {
        self.projection(bundle, n) * v
    }
}

fn check_shapes(sys: &WindowSystem, split: &SplittingTriple) -> Result<()> {
    if sys.window != split.window {
        return Err(Error::Structure(format!(
            "system window [{}, {}] and splitting window [{}, {}] differ",
            sys.window.lo(),
            sys.window.hi(),
            split.window.lo(),
            split.window.hi()
        )));
    }
    if sys.dim != split.dim {
        return Err(Error::Structure(format!(
            "system dimension {} and splitting dimension {} differ",
            sys.dim, split.dim
        )));
    }
    Ok(())
}

/// Worst value of one splitting check and where it occurs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Worst {
    pub value: f64,
    pub index: i64,
}

impl Worst {
    fn new() -> Self {
        Self { value: 0.0, index: 0 }
    }

    fn update(&mut self, value: f64, index: i64) {
        if value > self.value || value.is_nan() {
            self.value = value;
            self.index = index;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplittingReport {
    pub idempotence: Worst,
    pub sum_to_identity: Worst,
    pub annihilation: Worst,
    pub commutation: Worst,
    /// Smallest singular value of `A_n : Im P²_n → Im P²_{n+1}`; infinite when the bundle is trivial.
    pub unstable_min_sigma: f64,
    pub unstable_min_sigma_index: i64,
    /// Ranks of (P¹, P², P³); `None` if a rank varies along the window.
    pub ranks: Option<[usize; 3]>,
}

impl SplittingReport {
    fn checks(&self) -> [(&'static str, Worst); 4] {
        [
            ("idempotence", self.idempotence),
            ("sum-to-identity", self.sum_to_identity),
            ("pairwise annihilation", self.annihilation),
            ("commutation", self.commutation),
        ]
    }

    pub fn ensure(&self, tol: f64) -> Result<()> {
        if let Some((check, worst)) = self.checks().into_iter().find(|(_, w)| !(w.value <= tol)) {
            return Err(Error::InvalidSplitting {
                check,
                index: worst.index,
                value: worst.value,
                tol,
            });
        }
        if self.ranks.is_none() {
            return Err(Error::InvalidSplitting {
                check: "constant rank",
                index: 0,
                value: f64::NAN,
                tol,
            });
        }
        if self.unstable_min_sigma < SIGMA_MIN {
            return Err(Error::IllConditionedUnstable {
                index: self.unstable_min_sigma_index,
                sigma: self.unstable_min_sigma,
            });
        }
        Ok(())
    }
}

/// Measures every splitting identity without judging it.
pub fn splitting_report(sys: &WindowSystem, split: &SplittingTriple) -> Result<SplittingReport> {
    check_shapes(sys, split)?;
    let id = DMatrix::<f64>::identity(sys.dim, sys.dim);
    let mut idem = Worst::new();
    let mut sum = Worst::new();
    let mut annih = Worst::new();
    let mut comm = Worst::new();
    let mut ranks: Option<[usize; 3]> = None;
    let mut rank_constant = true;
    for n in sys.window.indices() {
        let ps = [split.p1(n), split.p2(n), split.p3(n)];
        for p in ps {
            idem.update((p * p - p).amax(), n);
        }
        sum.update((ps[0] + ps[1] + ps[2] - &id).amax(), n);
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    annih.update((ps[i] * ps[j]).amax(), n);
                }
            }
        }
        let r = [
            linalg::projection_rank(ps[0]),
            linalg::projection_rank(ps[1]),
            linalg::projection_rank(ps[2]),
        ];
        match ranks {
            None => ranks = Some(r),
            Some(prev) if prev != r => rank_constant = false,
            _ => {}
        }
        if n < sys.window.hi() {
            let a = sys.a(n);
            for b in Bundle::ALL {
                let lhs = a * split.projection(b, n);
                let rhs = split.projection(b, n + 1) * a;
                comm.update((lhs - rhs).amax(), n);
            }
        }
    }
    let (sigma, sigma_index) = restricted_unstable_blocks(sys, split)
        .into_iter()
        .fold((f64::INFINITY, sys.window.lo()), |acc, blk| {
            if blk.sigma < acc.0 {
                (blk.sigma, blk.index)
            } else {
                acc
            }
        });
    Ok(SplittingReport {
        idempotence: idem,
        sum_to_identity: sum,
        annihilation: annih,
        commutation: comm,
        unstable_min_sigma: sigma,
        unstable_min_sigma_index: sigma_index,
        ranks: if rank_constant { ranks } else { None },
    })
}

/// Checks the splitting identities at tolerance `tol`.
pub fn validate_splitting(sys: &WindowSystem, split: &SplittingTriple, tol: f64) -> Result<SplittingReport> {
    let report = splitting_report(sys, split)?;
    report.ensure(tol)?;
    Ok(report)
}

struct UnstableBlock {
    index: i64,
    sigma: f64,
    /// `(A_n|Im P²_n)⁻¹ P²_{n+1}`, present when the block is invertible.
    inverse: Option<DMatrix<f64>>,
}

fn restricted_unstable_blocks(sys: &WindowSystem, split: &SplittingTriple) -> Vec<UnstableBlock> {
    let bases: Vec<DMatrix<f64>> = sys
        .window
        .indices()
        .map(|n| linalg::projection_range_basis(split.p2(n)))
        .collect();
    (sys.window.lo()..sys.window.hi())
        .map(|n| {
            let pos = sys.window.pos(n);
            let (u_n, u_next) = (&bases[pos], &bases[pos + 1]);
            if u_n.ncols() == 0 && u_next.ncols() == 0 {
                return UnstableBlock {
                    index: n,
                    sigma: f64::INFINITY,
                    inverse: Some(DMatrix::zeros(sys.dim, sys.dim)),
                };
            }
            if u_n.ncols() != u_next.ncols() {
                return UnstableBlock {
                    index: n,
                    sigma: 0.0,
                    inverse: None,
                };
            }
            let block = u_next.transpose() * sys.a(n) * u_n;
            let sigma = linalg::smallest_singular_value(&block);
            let inverse = if sigma >= SIGMA_MIN {
                block
                    .try_inverse()
                    .map(|inv| u_n * inv * u_next.transpose() * split.p2(n + 1))
            } else {
                None
            };
            UnstableBlock { index: n, sigma, inverse }
        })
        .collect()
}

/// Backward steps of the cocycle on the unstable bundle: for each `n`, the
/// map `(A_n|Im P²_n)⁻¹ P²_{n+1}`.
#[derive(Debug, Clone)]
pub struct UnstableInverses {
    window: Window,
    maps: Vec<DMatrix<f64>>,
}

impl UnstableInverses {
    pub fn new(sys: &WindowSystem, split: &SplittingTriple) -> Result<Self> {
        check_shapes(sys, split)?;
        let maps = restricted_unstable_blocks(sys, split)
            .into_iter()
            .map(|blk| {
                blk.inverse.ok_or(Error::IllConditionedUnstable {
                    index: blk.index,
                    sigma: blk.sigma,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            window: sys.window,
            maps,
        })
    }

    /// Backward step from `n + 1` to `n`.
    pub fn step(&self, n: i64) -> &DMatrix<f64> {
        &self.maps[(n - self.window.lo()) as usize]
    }
}

/// The cocycle `𝒜(m, n)`: forward products for `m > n`, the identity for
/// `m = n`, and for `m < n` the inverse of `𝒜(n, m)` on the unstable bundle
/// composed with `P²_n`.
pub fn cocycle(sys: &WindowSystem, split: &SplittingTriple, m: i64, n: i64) -> Result<DMatrix<f64>> {
    if !sys.window.contains(m) || !sys.window.contains(n) {
        return Err(Error::Domain(format!("cocycle indices ({m}, {n}) outside window")));
    }
    if m >= n {
        return Ok(forward_product(sys, m, n));
    }
    let inv = UnstableInverses::new(sys, split)?;
    Ok(cocycle_backward(&inv, sys.dim, m, n))
}

fn forward_product(sys: &WindowSystem, m: i64, n: i64) -> DMatrix<f64> {
    let mut out = DMatrix::identity(sys.dim, sys.dim);
    for j in n..m {
        out = sys.a(j) * out;
    }
    out
}

fn cocycle_backward(inv: &UnstableInverses, dim: usize, m: i64, n: i64) -> DMatrix<f64> {
    let mut out = DMatrix::identity(dim, dim);
    for j in (m..n).rev() {
        out = inv.step(j) * out;
    }
    out
}

/// Dichotomy constants: `‖𝒜(m,n)P¹_n‖ ≤ D e^{-d(m-n)}` for `m ≥ n` and
/// `‖𝒜(m,n)P²_n‖ ≤ D e^{-b(n-m)}` for `m ≤ n`, optionally with central
/// growth rates for the strong variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DichotomyConstants {
    #[serde(rename = "D")]
    pub bound: f64,
    #[serde(rename = "d")]
    pub stable_rate: f64,
    #[serde(rename = "b")]
    pub unstable_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strong: Option<CentralRates>,
}

/// `‖𝒜(m,n)P³_n‖ ≤ D e^{a(m-n)}` forward and `≤ D e^{c(n-m)}` backward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CentralRates {
    #[serde(rename = "a")]
    pub forward: f64,
    #[serde(rename = "c_back")]
    pub backward: f64,
}

impl DichotomyConstants {
    pub fn new(bound: f64, stable_rate: f64, unstable_rate: f64) -> Result<Self> {
        let c = Self {
            bound,
            stable_rate,
            unstable_rate,
            strong: None,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn with_strong(mut self, forward: f64, backward: f64) -> Result<Self> {
        self.strong = Some(CentralRates { forward, backward });
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !(positive(self.bound) && positive(self.stable_rate) && positive(self.unstable_rate)) {
            return Err(Error::Config(format!("dichotomy constants must be positive: {self:?}")));
        }
        if let Some(s) = self.strong {
            if !(s.forward >= 0.0 && s.forward < self.unstable_rate) {
                return Err(Error::Config(format!(
                    "strong dichotomy needs 0 <= a < b (a = {}, b = {})",
                    s.forward, self.unstable_rate
                )));
            }
            if !(s.backward >= 0.0 && s.backward < self.stable_rate) {
                return Err(Error::Config(format!(
                    "strong dichotomy needs 0 <= c < d (c = {}, d = {})",
                    s.backward, self.stable_rate
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sweep {
    StableForward,
    UnstableBackward,
    CentralForward,
    CentralBackward,
}

/// For every gap `j = |m - n|`, the largest `‖𝒜(m,n)P_n‖` over the window and
/// the pair attaining it.
struct GapTable {
    max: Vec<f64>,
    arg: Vec<(i64, i64)>,
}

/// Enumerates all in-window pairs for one bundle, re-projecting onto the
/// bundle after each step so that roundoff in complementary directions does
/// not get amplified.
fn gap_table(
    sys: &WindowSystem,
    split: &SplittingTriple,
    ambient: Ambient,
    sweep: Sweep,
    unstable: Option<&UnstableInverses>,
    inverses: Option<&[DMatrix<f64>]>,
) -> GapTable {
    let w = sys.window;
    let len = w.len();
    let rows: Vec<Vec<(f64, i64)>> = w
        .indices()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&n| {
            let mut out = Vec::new();
            match sweep {
                Sweep::StableForward | Sweep::CentralForward => {
                    let bundle = if sweep == Sweep::StableForward {
                        Bundle::Stable
                    } else {
                        Bundle::Central
                    };
                    let mut m_mat = split.projection(bundle, n).clone();
                    out.push((ambient.op_norm(&m_mat), n));
                    for m in n + 1..=w.hi() {
                        m_mat = split.projection(bundle, m) * (sys.a(m - 1) * m_mat);
                        out.push((ambient.op_norm(&m_mat), m));
                    }
                }
                Sweep::UnstableBackward => {
                    let inv = unstable.expect("unstable inverses");
                    let mut m_mat = split.p2(n).clone();
                    out.push((ambient.op_norm(&m_mat), n));
                    for m in (w.lo()..n).rev() {
                        m_mat = inv.step(m) * m_mat;
                        out.push((ambient.op_norm(&m_mat), m));
                    }
                }
                Sweep::CentralBackward => {
                    let inverses = inverses.expect("full inverses");
                    let mut m_mat = split.p3(n).clone();
                    out.push((ambient.op_norm(&m_mat), n));
                    for m in (w.lo()..n).rev() {
                        let a_inv = &inverses[(m - w.lo()) as usize];
                        m_mat = split.p3(m) * (a_inv * m_mat);
                        out.push((ambient.op_norm(&m_mat), m));
                    }
                }
            }
            out
        })
        .collect();
    let mut table = GapTable {
        max: vec![0.0; len],
        arg: vec![(w.lo(), w.lo()); len],
    };
    for (i, row) in rows.iter().enumerate() {
        let n = w.lo() + i as i64;
        for (j, &(value, m)) in row.iter().enumerate() {
            if value > table.max[j] || value.is_nan() {
                table.max[j] = value;
                table.arg[j] = (m, n);
            }
        }
    }
    table
}

/// `g·e^{t}` evaluated in log space so that underflowed norms give zero.
fn scaled(g: f64, t: f64) -> f64 {
    if g == 0.0 {
        0.0
    } else {
        (g.ln() + t).exp()
    }
}

/// Largest decay rate with `g_j ≤ D e^{-rate·j}` for all gaps.
fn decay_rate_at(table: &GapTable, bound: f64) -> f64 {
    table
        .max
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &g)| g > 0.0)
        .map(|(j, &g)| (bound.ln() - g.ln()) / j as f64)
        .fold(RATE_CAP, f64::min)
}

/// Smallest nonnegative growth rate with `g_j ≤ D e^{rate·j}` for all gaps.
fn growth_rate_at(table: &GapTable, bound: f64) -> f64 {
    table
        .max
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &g)| g > 0.0)
        .map(|(j, &g)| (g.ln() - bound.ln()) / j as f64)
        .fold(0.0, f64::max)
}

/// Least-squares slope of `ln g_j` against `j` over positive gaps.
fn log_linear_slope(table: &GapTable) -> Option<f64> {
    let pts: Vec<(f64, f64)> = table
        .max
        .iter()
        .enumerate()
        .skip(1)
        .filter(|(_, &g)| g > 0.0)
        .map(|(j, &g)| (j as f64, g.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// Bound needed for a decaying bundle when the projection norms alone do not
/// admit a positive rate: rate from the log-linear fit, bound from the worst
/// residual above that line.
fn fallback_bound(table: &GapTable, label: &str) -> Result<f64> {
    match log_linear_slope(table) {
        Some(slope) if slope < 0.0 => {
            let rate = -slope;
            Ok(table
                .max
                .iter()
                .enumerate()
                .map(|(j, &g)| scaled(g, rate * j as f64))
                .fold(0.0, f64::max))
        }
        _ => Err(Error::NotDichotomic(format!(
            "{label} bundle does not decay along the window"
        ))),
    }
}

/// Fits `(D, d, b)` and, when `strong` is set, the central rates `(a, c)`.
///
/// `D` starts at the largest projection norm (the gap-zero constraint); rates
/// are then the tightest ones compatible with that `D`. If a decaying bundle
/// shows transient growth, `D` is enlarged to the envelope of a log-linear fit.
pub fn fit_constants(
    sys: &WindowSystem,
    split: &SplittingTriple,
    ambient: Ambient,
    strong: bool,
) -> Result<DichotomyConstants> {
    validate_splitting(sys, split, SPLIT_TOL)?;
    fit_constants_unchecked(sys, split, ambient, strong)
}

/// Same as [`fit_constants`] but trusts the splitting (used for numerically
/// generated systems validated at a looser tolerance).
pub fn fit_constants_unchecked(
    sys: &WindowSystem,
    split: &SplittingTriple,
    ambient: Ambient,
    strong: bool,
) -> Result<DichotomyConstants> {
    check_shapes(sys, split)?;
    let unstable = UnstableInverses::new(sys, split)?;
    let stable_t = gap_table(sys, split, ambient, Sweep::StableForward, None, None);
    let unstable_t = gap_table(sys, split, ambient, Sweep::UnstableBackward, Some(&unstable), None);
    let central = if strong {
        let inverses = sys.inverses()?;
        Some((
            gap_table(sys, split, ambient, Sweep::CentralForward, None, None),
            gap_table(sys, split, ambient, Sweep::CentralBackward, None, Some(&inverses)),
        ))
    } else {
        None
    };

    let mut bound = stable_t.max[0].max(unstable_t.max[0]);
    if let Some((fwd, bwd)) = &central {
        bound = bound.max(fwd.max[0]).max(bwd.max[0]);
    }
    if bound == 0.0 {
        bound = 1.0;
    }
    if decay_rate_at(&stable_t, bound) <= 0.0 {
        bound = bound.max(fallback_bound(&stable_t, "stable")?);
    }
    if decay_rate_at(&unstable_t, bound) <= 0.0 {
        bound = bound.max(fallback_bound(&unstable_t, "unstable")?);
    }
    let d = decay_rate_at(&stable_t, bound);
    let b = decay_rate_at(&unstable_t, bound);
    if !(d > 0.0) {
        return Err(Error::NotDichotomic("no positive stable rate fits".into()));
    }
    if !(b > 0.0) {
        return Err(Error::NotDichotomic("no positive unstable rate fits".into()));
    }
    let mut consts = DichotomyConstants {
        bound,
        stable_rate: d,
        unstable_rate: b,
        strong: None,
    };
    if let Some((fwd, bwd)) = &central {
        consts.strong = Some(CentralRates {
            forward: growth_rate_at(fwd, bound),
            backward: growth_rate_at(bwd, bound),
        });
    }
    consts.validate().map_err(|e| match e {
        Error::Config(msg) => Error::NotDichotomic(msg),
        other => other,
    })?;
    Ok(consts)
}

/// Worst normalised ratio `‖𝒜(m,n)P_n‖ e^{±rate·|m-n|} / D` for one bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub kind: String,
    pub max_ratio: f64,
    pub worst_m: i64,
    pub worst_n: i64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantsReport {
    pub constants: DichotomyConstants,
    pub checks: Vec<BoundCheck>,
    pub passed: bool,
}

/// Evaluates the dichotomy inequalities on every in-window pair.
pub fn check_constants(
    sys: &WindowSystem,
    split: &SplittingTriple,
    consts: &DichotomyConstants,
    ambient: Ambient,
    tol: f64,
) -> Result<ConstantsReport> {
    check_shapes(sys, split)?;
    let unstable = UnstableInverses::new(sys, split)?;
    let mut checks = Vec::new();
    let mut push = |kind: &str, table: GapTable, exponent: f64| {
        let (mut max_ratio, mut worst) = (0.0_f64, (sys.window.lo(), sys.window.lo()));
        for (j, (&g, &arg)) in table.max.iter().zip(&table.arg).enumerate() {
            let ratio = scaled(g, exponent * j as f64) / consts.bound;
            if ratio > max_ratio || ratio.is_nan() {
                max_ratio = ratio;
                worst = arg;
            }
        }
        checks.push(BoundCheck {
            kind: kind.into(),
            max_ratio,
            worst_m: worst.0,
            worst_n: worst.1,
            passed: max_ratio <= 1.0 + tol,
        });
    };
    push(
        "stable",
        gap_table(sys, split, ambient, Sweep::StableForward, None, None),
        consts.stable_rate,
    );
    push(
        "unstable",
        gap_table(sys, split, ambient, Sweep::UnstableBackward, Some(&unstable), None),
        consts.unstable_rate,
    );
    if let Some(s) = consts.strong {
        let inverses = sys.inverses()?;
        push(
            "central-forward",
            gap_table(sys, split, ambient, Sweep::CentralForward, None, None),
            -s.forward,
        );
        push(
            "central-backward",
            gap_table(sys, split, ambient, Sweep::CentralBackward, None, Some(&inverses)),
            -s.backward,
        );
    }
    let passed = checks.iter().all(|c| c.passed);
    Ok(ConstantsReport {
        constants: *consts,
        checks,
        passed,
    })
}

/// `x = x^c + x^{s,u}` with `x^c_n = P³_n x_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedDecomposition {
    pub central: VecSeq,
    pub hyperbolic: VecSeq,
}

pub fn decompose(x: &VecSeq, split: &SplittingTriple) -> Result<AdaptedDecomposition> {
    if x.window() != split.window() || x.dim() != split.dim() {
        return Err(Error::Structure("sequence and splitting shapes differ".into()));
    }
    let central = x.map(|n, v| split.p3(n) * v);
    let hyperbolic = x.sub(&central);
    Ok(AdaptedDecomposition { central, hyperbolic })
}

/// `max(‖x^c‖_B, ‖x^{s,u}‖_B)`.
pub fn adapted_norm(x: &VecSeq, split: &SplittingTriple, norm: &SequenceNorm) -> Result<f64> {
    let parts = decompose(x, split)?;
    Ok(norm.norm(&parts.central)?.max(norm.norm(&parts.hyperbolic)?))
}
