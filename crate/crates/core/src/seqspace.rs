//! Sequence norms on finite index windows.
//!
//! A [`Window`] stands in for the integers; every sequence is taken to be zero
//! outside it. Scalar sequences are measured with a [`NormFamily`] (sup, ℓᵖ or
//! a Luxemburg–Orlicz norm), and vector sequences ([`VecSeq`]) are measured by
//! applying the family to the pointwise ambient norms.

use std::io::{Read, Write};
use std::ops::RangeInclusive;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// Closed range of integer indices `lo..=hi`, at least three long.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawWindow")]
pub struct Window {
    lo: i64,
    hi: i64,
}

#[derive(Deserialize)]
struct RawWindow {
    lo: i64,
    hi: i64,
}

impl TryFrom<RawWindow> for Window {
    type Error = Error;

    fn try_from(raw: RawWindow) -> Result<Self> {
        Window::new(raw.lo, raw.hi)
    }
}

impl Window {
    pub fn new(lo: i64, hi: i64) -> Result<Self> {
        if hi - lo < 2 {
            return Err(Error::Config(format!(
                "window [{lo}, {hi}] must contain at least three indices"
            )));
        }
        Ok(Self { lo, hi })
    }

    /// Symmetric window `[-radius, radius]`.
    pub fn centered(radius: i64) -> Result<Self> {
        Self::new(-radius, radius)
    }

    pub fn lo(&self) -> i64 {
        self.lo
    }

    pub fn hi(&self) -> i64 {
        self.hi
    }

    pub fn len(&self) -> usize {
        (self.hi - self.lo + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn indices(&self) -> RangeInclusive<i64> {
        self.lo..=self.hi
    }

    pub fn contains(&self, n: i64) -> bool {
        (self.lo..=self.hi).contains(&n)
    }

    pub fn contains_window(&self, other: &Window) -> bool {
        self.lo <= other.lo && other.hi <= self.hi
    }

    /// Storage offset of index `n`. Panics when `n` is outside the window.
    pub fn pos(&self, n: i64) -> usize {
        assert!(self.contains(n), "index {n} outside window [{}, {}]", self.lo, self.hi);
        (n - self.lo) as usize
    }
}

/// Convex generating function of an Orlicz norm. Only finite-valued
/// functions are supported.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psi {
    /// ψ(t) = t^exponent, exponent ≥ 1.
    Power { exponent: f64 },
    /// ψ(t) = eᵗ − 1 − t.
    Exp,
}

impl Psi {
    pub fn eval(&self, t: f64) -> f64 {
        match *self {
            Psi::Power { exponent } => t.powf(exponent),
            Psi::Exp => t.exp_m1() - t,
        }
    }

    /// Inverse on `[0, ∞)`; ψ is strictly increasing there for both variants.
    pub fn inverse(&self, v: f64) -> f64 {
        match *self {
            Psi::Power { exponent } => v.powf(1.0 / exponent),
            Psi::Exp => {
                if v <= 0.0 {
                    return 0.0;
                }
                let mut lo = 0.0;
                let mut hi = 1.0;
                while self.eval(hi) < v {
                    lo = hi;
                    hi *= 2.0;
                }
                bisect_monotone(lo, hi, |t| self.eval(t) >= v)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            Psi::Power { exponent } if !(exponent.is_finite() && exponent >= 1.0) => Err(
                Error::Config(format!("orlicz power exponent must be a finite value >= 1, got {exponent}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Smallest `t` in `[lo, hi]` (to floating resolution) with `pred(t)` true,
/// assuming `pred` is monotone and `pred(hi)` holds.
fn bisect_monotone(mut lo: f64, mut hi: f64, pred: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..2000 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if pred(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Admissible sequence-space norm family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFamily", into = "RawFamily")]
pub enum NormFamily {
    Sup,
    Lp { p: f64 },
    Orlicz { psi: Psi },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawFamily {
    norm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    psi: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    exponent: Option<f64>,
}

impl TryFrom<RawFamily> for NormFamily {
    type Error = Error;

    fn try_from(raw: RawFamily) -> Result<Self> {
        let family = match raw.norm.as_str() {
            "sup" | "c0" | "linf" => NormFamily::Sup,
            "lp" => NormFamily::Lp {
                p: raw
                    .p
                    .ok_or_else(|| Error::Config("lp norm needs \"p\"".into()))?,
            },
            "orlicz" => {
                let psi = match raw.psi.as_deref() {
                    Some("power") | None => Psi::Power {
                        exponent: raw.exponent.ok_or_else(|| {
                            Error::Config("orlicz power norm needs \"exponent\"".into())
                        })?,
                    },
                    Some("exp") => Psi::Exp,
                    Some(other) => {
                        return Err(Error::Config(format!("unknown orlicz function {other:?}")))
                    }
                };
                NormFamily::Orlicz { psi }
            }
            other => return Err(Error::Config(format!("unknown norm family {other:?}"))),
        };
        family.validate()?;
        Ok(family)
    }
}

impl From<NormFamily> for RawFamily {
    fn from(f: NormFamily) -> Self {
        let mut raw = RawFamily {
            norm: String::new(),
            p: None,
            psi: None,
            exponent: None,
        };
        match f {
            NormFamily::Sup => raw.norm = "sup".into(),
            NormFamily::Lp { p } => {
                raw.norm = "lp".into();
                raw.p = Some(p);
            }
            NormFamily::Orlicz { psi } => {
                raw.norm = "orlicz".into();
                match psi {
                    Psi::Power { exponent } => {
                        raw.psi = Some("power".into());
                        raw.exponent = Some(exponent);
                    }
                    Psi::Exp => raw.psi = Some("exp".into()),
                }
            }
        }
        raw
    }
}

impl NormFamily {
    /// On a finite window the c₀ norm is the sup norm.
    pub fn c0() -> Self {
        NormFamily::Sup
    }

    pub fn lp(p: f64) -> Result<Self> {
        let f = NormFamily::Lp { p };
        f.validate()?;
        Ok(f)
    }

    pub fn orlicz(psi: Psi) -> Result<Self> {
        let f = NormFamily::Orlicz { psi };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            NormFamily::Sup => Ok(()),
            NormFamily::Lp { p } if !(p.is_finite() && *p >= 1.0) => Err(Error::Config(format!(
                "lp norm requires finite p >= 1, got {p}"
            ))),
            NormFamily::Lp { .. } => Ok(()),
            NormFamily::Orlicz { psi } => psi.validate(),
        }
    }

    /// Parses the compact command-line forms `sup`, `c0`, `lp:P`,
    /// `orlicz:power:E`, `orlicz:exp`, or a JSON object.
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        if text.starts_with('{') {
            return Ok(serde_json::from_str(text)?);
        }
        let parts: Vec<&str> = text.split(':').collect();
        let num = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad number {s:?} in norm spec {text:?}")))
        };
        match parts.as_slice() {
            ["sup"] | ["c0"] | ["linf"] => Ok(NormFamily::Sup),
            ["lp", p] => NormFamily::lp(num(p)?),
            ["orlicz", "power", e] => NormFamily::orlicz(Psi::Power { exponent: num(e)? }),
            ["orlicz", "exp"] => NormFamily::orlicz(Psi::Exp),
            _ => Err(Error::Config(format!("unrecognised norm spec {text:?}"))),
        }
    }

    pub fn label(&self) -> String {
        match self {
            NormFamily::Sup => "sup".into(),
            NormFamily::Lp { p } => format!("lp:{p}"),
            NormFamily::Orlicz { psi: Psi::Power { exponent } } => format!("orlicz:power:{exponent}"),
            NormFamily::Orlicz { psi: Psi::Exp } => "orlicz:exp".into(),
        }
    }
}

/// Norm of a scalar sequence supported on a window.
pub fn scalar_norm(s: &[f64], family: &NormFamily) -> Result<f64> {
    family.validate()?;
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("sequence has nonfinite entries".into()));
    }
    let norm = match *family {
        NormFamily::Sup => s.iter().fold(0.0_f64, |acc, v| acc.max(v.abs())),
        NormFamily::Lp { p } => lp_norm(s, p),
        NormFamily::Orlicz { psi } => luxemburg_norm(s, &psi)? * psi.inverse(1.0),
    };
    Ok(norm)
}

fn lp_norm(s: &[f64], p: f64) -> f64 {
    let scale = s.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    if p == 1.0 {
        return s.iter().map(|v| v.abs()).sum();
    }
    let sum: f64 = s.iter().map(|v| (v.abs() / scale).powf(p)).sum();
    scale * sum.powf(1.0 / p)
}

/// Unscaled Luxemburg value `inf{c > 0 : Σ ψ(|s_n|/c) ≤ 1}` by bisection on `c`.
fn luxemburg_norm(s: &[f64], psi: &Psi) -> Result<f64> {
    let max = s.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if max == 0.0 {
        return Ok(0.0);
    }
    let modular = |c: f64| s.iter().map(|v| psi.eval(v.abs() / c)).sum::<f64>();
    let count = s.iter().filter(|v| **v != 0.0).count() as f64;
    // Σψ(|s|/c) ≥ ψ(max/c) and ≤ count·ψ(max/c) bracket the root.
    let mut lo = max / psi.inverse(1.0);
    let mut hi = max / psi.inverse(1.0 / count);
    while !(modular(hi) <= 1.0) {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(Error::Numerical("orlicz bisection failed to bracket".into()));
        }
    }
    while lo > 0.0 && modular(lo) <= 1.0 && lo < hi {
        hi = lo;
        lo *= 0.5;
    }
    Ok(bisect_monotone(lo, hi, |c| modular(c) <= 1.0))
}

/// `s^m` with `s^m_n = s_{n+m}`; entries shifted in from outside are zero.
pub fn shift(s: &[f64], m: i64) -> Vec<f64> {
    let len = s.len() as i64;
    (0..len)
        .map(|p| {
            let src = p + m;
            if (0..len).contains(&src) {
                s[src as usize]
            } else {
                0.0
            }
        })
        .collect()
}

/// Norm used on each ℝᵏ fibre.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ambient {
    #[default]
    Euclidean,
    Sup,
}

impl Ambient {
    pub fn vec_norm(&self, v: &DVector<f64>) -> f64 {
        match self {
            Ambient::Euclidean => v.norm(),
            Ambient::Sup => v.amax(),
        }
    }

    /// Operator norm induced by this vector norm.
    pub fn op_norm(&self, m: &DMatrix<f64>) -> f64 {
        match self {
            Ambient::Euclidean => linalg::spectral_norm(m),
            Ambient::Sup => linalg::inf_norm(m),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text {
            "euclidean" | "l2" => Ok(Ambient::Euclidean),
            "sup" | "max" => Ok(Ambient::Sup),
            other => Err(Error::Config(format!("unknown ambient norm {other:?}"))),
        }
    }
}

/// A norm family lifted to vector sequences through an ambient norm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SequenceNorm {
    pub family: NormFamily,
    #[serde(default)]
    pub ambient: Ambient,
}

impl SequenceNorm {
    pub fn new(family: NormFamily, ambient: Ambient) -> Self {
        Self { family, ambient }
    }

    pub fn sup() -> Self {
        Self::new(NormFamily::Sup, Ambient::Euclidean)
    }

    pub fn norm(&self, x: &VecSeq) -> Result<f64> {
        seq_norm(x, &self.family, self.ambient)
    }
}

/// Window-indexed sequence of k-vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct VecSeq {
    window: Window,
    dim: usize,
    entries: Vec<DVector<f64>>,
}

impl VecSeq {
    pub fn zeros(window: Window, dim: usize) -> Self {
        Self {
            window,
            dim,
            entries: vec![DVector::zeros(dim); window.len()],
        }
    }

    pub fn from_fn(window: Window, dim: usize, mut f: impl FnMut(i64) -> DVector<f64>) -> Self {
        let entries = window
            .indices()
            .map(|n| {
                let v = f(n);
                assert_eq!(v.len(), dim, "entry at {n} has wrong dimension");
                v
            })
            .collect();
        Self { window, dim, entries }
    }

    pub fn from_entries(window: Window, dim: usize, entries: Vec<DVector<f64>>) -> Result<Self> {
        if entries.len() != window.len() {
            return Err(Error::Structure(format!(
                "expected {} entries for the window, got {}",
                window.len(),
                entries.len()
            )));
        }
        if entries.iter().any(|v| v.len() != dim) {
            return Err(Error::Structure(format!("all entries must have dimension {dim}")));
        }
        Ok(Self { window, dim, entries })
    }

    /// Sequence that is `v` at index `n` and zero elsewhere.
    pub fn delta(window: Window, n: i64, v: DVector<f64>) -> Self {
        let mut s = Self::zeros(window, v.len());
        s.set(n, v);
        s
    }

    pub fn window(&self) -> Window {
        self.window
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, n: i64) -> &DVector<f64> {
        &self.entries[self.window.pos(n)]
    }

    pub fn get_mut(&mut self, n: i64) -> &mut DVector<f64> {
        let p = self.window.pos(n);
        &mut self.entries[p]
    }

    pub fn set(&mut self, n: i64, v: DVector<f64>) {
        assert_eq!(v.len(), self.dim);
        let p = self.window.pos(n);
        self.entries[p] = v;
    }

    pub fn entries(&self) -> &[DVector<f64>] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = (i64, &DVector<f64>)> {
        self.window.indices().zip(self.entries.iter())
    }

    pub fn map(&self, mut f: impl FnMut(i64, &DVector<f64>) -> DVector<f64>) -> Self {
        Self::from_fn(self.window, self.dim, |n| f(n, self.get(n)))
    }

    fn check_compatible(&self, other: &Self) {
        assert_eq!(self.window, other.window, "window mismatch");
        assert_eq!(self.dim, other.dim, "dimension mismatch");
    }

    pub fn add(&self, other: &Self) -> Self {
        self.check_compatible(other);
        self.map(|n, v| v + other.get(n))
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.check_compatible(other);
        self.map(|n, v| v - other.get(n))
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|_, v| v * alpha)
    }

    /// Pointwise ambient norms `(‖x_n‖)_n`.
    pub fn pointwise_norms(&self, ambient: Ambient) -> Vec<f64> {
        self.entries.iter().map(|v| ambient.vec_norm(v)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Coordinates stacked index-major, as used by dense oracle matrices.
    pub fn to_stacked(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.window.len() * self.dim,
            self.entries.iter().flat_map(|v| v.iter().copied()),
        )
    }

    pub fn from_stacked(window: Window, dim: usize, data: &DVector<f64>) -> Result<Self> {
        if data.len() != window.len() * dim {
            return Err(Error::Structure("stacked vector length mismatch".into()));
        }
        Ok(Self::from_fn(window, dim, |n| {
            let p = window.pos(n) * dim;
            DVector::from_iterator(dim, data.rows(p, dim).iter().copied())
        }))
    }

    /// Restriction to a sub-window.
    pub fn restrict(&self, sub: Window) -> Result<Self> {
        if !self.window.contains_window(&sub) {
            return Err(Error::Structure("restriction window not contained".into()));
        }
        Ok(Self::from_fn(sub, self.dim, |n| self.get(n).clone()))
    }

    /// Reads the `n,c0,...,c{k-1}` CSV format. Missing indices are zero.
    pub fn read_csv(reader: impl Read, window: Window, dim: usize) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() != dim + 1 || &headers[0] != "n" {
            return Err(Error::Parse(format!(
                "expected header n,c0..c{} but found {:?}",
                dim.saturating_sub(1),
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let mut seq = Self::zeros(window, dim);
        for record in rdr.records() {
            let record = record?;
            let n: i64 = record[0]
                .parse()
                .map_err(|_| Error::Parse(format!("bad index {:?}", &record[0])))?;
            if !window.contains(n) {
                return Err(Error::Parse(format!("index {n} outside the system window")));
            }
            let values = (1..=dim)
                .map(|i| {
                    record[i]
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad value {:?}", &record[i])))
                })
                .collect::<Result<Vec<f64>>>()?;
            seq.set(n, DVector::from_vec(values));
        }
        Ok(seq)
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["n".to_string()];
        header.extend((0..self.dim).map(|i| format!("c{i}")));
        wtr.write_record(&header)?;
        for (n, v) in self.iter() {
            let mut row = vec![n.to_string()];
            row.extend(v.iter().map(|x| format!("{x:e}")));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct RawVecSeq {
    window: Window,
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl Serialize for VecSeq {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        RawVecSeq {
            window: self.window,
            dim: self.dim,
            rows: self.entries.iter().map(linalg::vector_to_vec).collect(),
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for VecSeq {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let raw = RawVecSeq::deserialize(deserializer)?;
        let entries = raw.rows.into_iter().map(DVector::from_vec).collect();
        VecSeq::from_entries(raw.window, raw.dim, entries).map_err(serde::de::Error::custom)
    }
}

/// Norm of a vector sequence: the family applied to `(‖x_n‖_ambient)_n`.
pub fn seq_norm(x: &VecSeq, family: &NormFamily, ambient: Ambient) -> Result<f64> {
    scalar_norm(&x.pointwise_norms(ambient), family)
}
