//! Command-line front end: file formats, the example gallery, run configs
//! and the dispatch from commands to module operations.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dichotomy::{
    check_constants, fit_constants, splitting_report, validate_splitting, ConstantsReport,
    DichotomyConstants, SplittingReport, SplittingTriple, WindowSystem, SPLIT_TOL,
};
use crate::error::{Error, Result};
use crate::flow::{flow_quasi_shadow, verify_flow, FlowModel, FlowReport, SampledPath};
use crate::green::{g_norm_upper, GreenContext, CONSTANTS_TOL};
use crate::linalg;
use crate::seqspace::{Ambient, NormFamily, SequenceNorm, VecSeq, Window};
use crate::shadow::{
    delta_for_epsilon, empirical_lipschitz, quasi_shadow, uniqueness_probe, verify_report,
    BuiltinPerturbation, Check, Indexed, Perturbation, PerturbationSpec, PseudoTrajectory,
    QuasiShadowReport, SolveOptions, UniquenessReport, VerificationSummary, FIXED_POINT_TOL,
};
use crate::stability::{ConjugacyReport, ModulusTable, QuasiConjugacy};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_PRECONDITION: i32 = 2;
pub const EXIT_VERIFICATION: i32 = 3;
pub const EXIT_INPUT: i32 = 4;

/// Exit code for an error: bad or unreadable input is 4, everything the
/// mathematics refuses (hypotheses, contraction, convergence) is 2.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Io(_) | Error::Parse(_) | Error::Config(_) | Error::Structure(_) => EXIT_INPUT,
        _ => EXIT_PRECONDITION,
    }
}

// ---------------------------------------------------------------------------
// System files

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexedRows {
    pub n: i64,
    pub rows: Vec<Vec<f64>>,
}

/// A matrix per index, or one matrix for all of them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MatrixSeqFile {
    Constant { constant: bool, rows: Vec<Vec<f64>> },
    List(Vec<IndexedRows>),
}

impl MatrixSeqFile {
    fn from_matrices(first: i64, mats: &[DMatrix<f64>]) -> Self {
        if mats.windows(2).all(|w| w[0] == w[1]) {
            MatrixSeqFile::Constant {
                constant: true,
                rows: linalg::matrix_to_rows(&mats[0]),
            }
        } else {
            MatrixSeqFile::List(
                mats.iter()
                    .enumerate()
                    .map(|(i, m)| IndexedRows {
                        n: first + i as i64,
                        rows: linalg::matrix_to_rows(m),
                    })
                    .collect(),
            )
        }
    }

    /// Matrices for `lo..=hi`, each index given exactly once.
    fn to_matrices(&self, what: &str, lo: i64, hi: i64) -> Result<Vec<DMatrix<f64>>> {
        let count = (hi - lo + 1) as usize;
        match self {
            MatrixSeqFile::Constant { constant, rows } => {
                if !constant {
                    return Err(Error::Parse(format!("{what}: \"constant\" must be true")));
                }
                Ok(vec![linalg::matrix_from_rows(rows)?; count])
            }
            MatrixSeqFile::List(items) => {
                let mut out: Vec<Option<DMatrix<f64>>> = vec![None; count];
                for item in items {
                    if item.n < lo || item.n > hi {
                        return Err(Error::Structure(format!("{what}: index {} outside [{lo}, {hi}]", item.n)));
                    }
                    let slot = &mut out[(item.n - lo) as usize];
                    if slot.is_some() {
                        return Err(Error::Structure(format!("{what}: index {} given twice", item.n)));
                    }
                    *slot = Some(linalg::matrix_from_rows(&item.rows)?);
                }
                out.into_iter()
                    .enumerate()
                    .map(|(i, m)| {
                        m.ok_or_else(|| Error::Structure(format!("{what}: index {} missing", lo + i as i64)))
                    })
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionFile {
    #[serde(rename = "P1")]
    pub p1: MatrixSeqFile,
    #[serde(rename = "P2")]
    pub p2: MatrixSeqFile,
    #[serde(rename = "P3")]
    pub p3: MatrixSeqFile,
}

/// System file schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemFile {
    pub window: Window,
    pub dim: usize,
    #[serde(rename = "A")]
    pub a: MatrixSeqFile,
    pub projections: ProjectionFile,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub constants: Option<DichotomyConstants>,
    #[serde(default)]
    pub ambient: Ambient,
}

#[derive(Debug, Clone)]
pub struct LoadedSystem {
    pub sys: WindowSystem,
    pub split: SplittingTriple,
    pub constants: Option<DichotomyConstants>,
    pub ambient: Ambient,
}

impl SystemFile {
    pub fn from_parts(
        sys: &WindowSystem,
        split: &SplittingTriple,
        constants: Option<DichotomyConstants>,
        ambient: Ambient,
    ) -> Self {
        let w = sys.window();
        let proj = |f: &dyn Fn(i64) -> DMatrix<f64>| {
            MatrixSeqFile::from_matrices(w.lo(), &w.indices().map(f).collect::<Vec<_>>())
        };
        Self {
            window: w,
            dim: sys.dim(),
            a: MatrixSeqFile::from_matrices(w.lo(), sys.matrices()),
            projections: ProjectionFile {
                p1: proj(&|n| split.p1(n).clone()),
                p2: proj(&|n| split.p2(n).clone()),
                p3: proj(&|n| split.p3(n).clone()),
            },
            constants,
            ambient,
        }
    }

    pub fn load(&self) -> Result<LoadedSystem> {
        let (lo, hi) = (self.window.lo(), self.window.hi());
        let sys = WindowSystem::new(self.window, self.dim, self.a.to_matrices("A", lo, hi - 1)?)?;
        let p = &self.projections;
        let split = SplittingTriple::new(
            self.window,
            self.dim,
            p.p1.to_matrices("P1", lo, hi)?,
            p.p2.to_matrices("P2", lo, hi)?,
            p.p3.to_matrices("P3", lo, hi)?,
        )?;
        if let Some(c) = &self.constants {
            c.validate()?;
        }
        Ok(LoadedSystem {
            sys,
            split,
            constants: self.constants,
            ambient: self.ambient,
        })
    }
}

// ---------------------------------------------------------------------------
// Gallery

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
pub enum GalleryName {
    #[serde(rename = "diag-3d")]
    #[value(name = "diag-3d")]
    Diag3d,
    #[serde(rename = "rotation-center")]
    #[value(name = "rotation-center")]
    RotationCenter,
    #[serde(rename = "switched-central")]
    #[value(name = "switched-central")]
    SwitchedCentral,
    #[serde(rename = "ed-2d")]
    #[value(name = "ed-2d")]
    Ed2d,
}

impl GalleryName {
    pub const ALL: [GalleryName; 4] = [
        GalleryName::Diag3d,
        GalleryName::RotationCenter,
        GalleryName::SwitchedCentral,
        GalleryName::Ed2d,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            GalleryName::Diag3d => "diag-3d",
            GalleryName::RotationCenter => "rotation-center",
            GalleryName::SwitchedCentral => "switched-central",
            GalleryName::Ed2d => "ed-2d",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GallerySystem {
    pub name: GalleryName,
    pub sys: WindowSystem,
    pub split: SplittingTriple,
    pub constants: DichotomyConstants,
    pub ambient: Ambient,
}

pub const GALLERY_RADIUS: i64 = 100;
pub const GALLERY_EPSILON: f64 = 0.1;

fn diag(v: &[f64]) -> DMatrix<f64> {
    DMatrix::from_diagonal(&DVector::from_row_slice(v))
}

fn switched_basis() -> DMatrix<f64> {
    DMatrix::from_row_slice(3, 3, &[1.0, 0.4, 0.1, 0.0, 1.0, 0.3, 0.2, 0.0, 1.0])
}

/// Builtin systems on `[-100, 100]` with projections and constants derived
/// by hand from their block structure.
pub fn gallery_system(name: GalleryName) -> Result<GallerySystem> {
    let w = Window::centered(GALLERY_RADIUS)?;
    let ln2 = std::f64::consts::LN_2;
    let (sys, split, constants) = match name {
        GalleryName::Diag3d => {
            let sys = WindowSystem::constant(w, diag(&[0.5, 2.0, 1.0]))?;
            let split = SplittingTriple::constant(w, diag(&[1.0, 0.0, 0.0]), diag(&[0.0, 1.0, 0.0]), diag(&[0.0, 0.0, 1.0]))?;
            (sys, split, DichotomyConstants::new(1.0, ln2, ln2)?.with_strong(0.0, 0.0)?)
        }
        GalleryName::RotationCenter => {
            let (c, s) = (0.5f64.cos(), 0.5f64.sin());
            let a = DMatrix::from_row_slice(
                4,
                4,
                &[0.5, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0, 0.0, 0.0, 0.0, c, -s, 0.0, 0.0, s, c],
            );
            let sys = WindowSystem::constant(w, a)?;
            let split = SplittingTriple::constant(
                w,
                diag(&[1.0, 0.0, 0.0, 0.0]),
                diag(&[0.0, 1.0, 0.0, 0.0]),
                diag(&[0.0, 0.0, 1.0, 1.0]),
            )?;
            (sys, split, DichotomyConstants::new(1.0, ln2, ln2)?.with_strong(0.0, 0.0)?)
        }
        GalleryName::SwitchedCentral => {
            let s = switched_basis();
            let s_inv = s.clone().try_inverse().expect("basis is invertible");
            let conj = |d: &[f64]| &s * diag(d) * &s_inv;
            let sys = WindowSystem::from_fn(w, 3, |n| {
                let c = if n.rem_euclid(2) == 0 { 0.1f64 } else { -0.1 };
                conj(&[0.5, 2.0, c.exp()])
            })?;
            let [p1, p2, p3] = [conj(&[1.0, 0.0, 0.0]), conj(&[0.0, 1.0, 0.0]), conj(&[0.0, 0.0, 1.0])];
            // central products over consecutive indices stay within e^{±0.1}
            let bound = Ambient::Euclidean
                .op_norm(&p1)
                .max(Ambient::Euclidean.op_norm(&p2))
                .max(0.1f64.exp() * Ambient::Euclidean.op_norm(&p3))
                * (1.0 + 1e-12);
            let split = SplittingTriple::constant(w, p1, p2, p3)?;
            (sys, split, DichotomyConstants::new(bound, ln2, ln2)?.with_strong(0.0, 0.0)?)
        }
        GalleryName::Ed2d => {
            let sys = WindowSystem::from_fn(w, 2, |n| {
                let t = n as f64;
                diag(&[0.5 + 0.1 * t.sin(), 2.0 + 0.3 * (0.5 * t).cos()])
            })?;
            let split = SplittingTriple::constant(w, diag(&[1.0, 0.0]), diag(&[0.0, 1.0]), DMatrix::zeros(2, 2))?;
            let consts = DichotomyConstants::new(1.0, -(0.6f64.ln()), 1.7f64.ln())?.with_strong(0.0, 0.0)?;
            (sys, split, consts)
        }
    };
    Ok(GallerySystem {
        name,
        sys,
        split,
        constants,
        ambient: Ambient::Euclidean,
    })
}

/// Example inputs shipped with a gallery system.
#[derive(Debug, Clone)]
pub struct GalleryInputs {
    pub perturbation: PerturbationSpec,
    pub pseudo: VecSeq,
    pub grid: GridFile,
}

pub fn gallery_inputs(g: &GallerySystem) -> Result<GalleryInputs> {
    let dim = g.sys.dim();
    let w = g.sys.window();
    let identity_rows = linalg::matrix_to_rows(&DMatrix::identity(dim, dim));
    let perturbation = match g.name {
        GalleryName::Diag3d => PerturbationSpec::Zero,
        GalleryName::SwitchedCentral => PerturbationSpec::Affine {
            linear: Indexed::Constant(linalg::matrix_to_rows(&DMatrix::zeros(dim, dim))),
            offset: Some(Indexed::Constant(vec![0.0; dim])),
            lip_c: None,
        },
        GalleryName::RotationCenter | GalleryName::Ed2d => PerturbationSpec::Tanh {
            kappa: 0.002,
            weights: identity_rows,
            bias: None,
            lip_c: None,
        },
    };
    let f = BuiltinPerturbation::new(perturbation.clone(), dim)?;
    let delta = delta_for_epsilon(
        &g.constants,
        g_norm_upper(&g.constants),
        f.lipschitz(g.ambient),
        GALLERY_EPSILON,
    )?;
    let eta = 0.5 * delta;
    // a single bump at n = 0 along the central bundle (stable for ed-2d)
    let direction = match g.name {
        GalleryName::Ed2d => g.split.p1(0).column(0).into_owned(),
        GalleryName::SwitchedCentral => switched_basis().column(2).normalize(),
        _ => g.split.p3(0).column(dim - 1).into_owned(),
    };
    let pseudo = match g.name {
        // the forcing alone is the residual
        GalleryName::SwitchedCentral => VecSeq::zeros(w, dim),
        _ => VecSeq::delta(w, 0, direction.clone() * eta),
    };
    let perturbation = match perturbation {
        // constant central forcing of size η, the conjugacy example
        PerturbationSpec::Affine { linear, .. } => PerturbationSpec::Affine {
            linear,
            offset: Some(Indexed::Constant(linalg::vector_to_vec(&(direction * eta)))),
            lip_c: None,
        },
        other => other,
    };
    let grid = GridFile {
        points: (-2..=2)
            .map(|m| GridPoint {
                m,
                y: (0..dim).map(|i| 0.1 * ((m * 3 + i as i64) as f64).cos()).collect(),
            })
            .collect(),
        radii: None,
        directions: None,
    };
    Ok(GalleryInputs {
        perturbation,
        pseudo,
        grid,
    })
}

// ---------------------------------------------------------------------------
// Run configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandKind {
    Solve,
    Verify,
    VerifyDichotomy,
    Conjugacy,
    Flow,
    Gallery,
}

fn default_norm() -> String {
    "sup".into()
}

fn default_fixed_point() -> f64 {
    FIXED_POINT_TOL
}

fn default_trials() -> usize {
    2
}

fn default_lip_samples() -> usize {
    200
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    #[serde(default = "default_fixed_point")]
    pub fixed_point: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
    #[serde(default = "default_trials")]
    pub uniqueness_trials: usize,
    #[serde(default = "default_lip_samples")]
    pub lipschitz_samples: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            fixed_point: FIXED_POINT_TOL,
            max_iterations: None,
            uniqueness_trials: default_trials(),
            lipschitz_samples: default_lip_samples(),
        }
    }
}

/// Everything one command needs; the JSON form is what `run --config` reads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: CommandKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub perturbation: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pseudo: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub report: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plot: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gallery: Option<GalleryName>,
    #[serde(default = "default_norm")]
    pub norm: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub h: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub defect: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub margin: Option<i64>,
    #[serde(default)]
    pub tolerances: Tolerances,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub force: bool,
}

impl RunConfig {
    pub fn new(command: CommandKind) -> Self {
        Self {
            command,
            system: None,
            perturbation: None,
            pseudo: None,
            grid: None,
            report: None,
            spec: None,
            path: None,
            out: None,
            plot: None,
            out_dir: None,
            gallery: None,
            norm: default_norm(),
            epsilon: None,
            h: None,
            defect: None,
            margin: None,
            tolerances: Tolerances::default(),
            seed: 0,
            force: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Reads a config file and resolves its relative paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json(&read_text(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.system,
            &mut cfg.perturbation,
            &mut cfg.pseudo,
            &mut cfg.grid,
            &mut cfg.report,
            &mut cfg.spec,
            &mut cfg.path,
            &mut cfg.out,
            &mut cfg.plot,
            &mut cfg.out_dir,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    fn require<'a>(&self, field: &'a Option<PathBuf>, name: &str) -> Result<&'a Path> {
        field
            .as_deref()
            .ok_or_else(|| Error::Config(format!("{:?} needs --{name}", self.command)))
    }

    fn epsilon(&self) -> Result<f64> {
        match self.epsilon {
            Some(e) if e > 0.0 && e.is_finite() => Ok(e),
            Some(e) => Err(Error::Config(format!("epsilon must be positive, got {e}"))),
            None => Err(Error::Config("--epsilon is required".into())),
        }
    }

    fn solve_options(&self) -> SolveOptions {
        SolveOptions {
            tol: self.tolerances.fixed_point,
            max_iterations: self.tolerances.max_iterations,
            force: self.force,
        }
    }
}

/// Result of a command: exit code plus diagnostics and written files.
#[derive(Debug, Clone, PartialEq)]
pub struct Outcome {
    pub code: i32,
    pub messages: Vec<String>,
    pub artifacts: Vec<PathBuf>,
}

impl Outcome {
    fn from_summary(summary: &VerificationSummary, artifacts: Vec<PathBuf>) -> Self {
        let messages = summary
            .checks
            .iter()
            .map(|c| {
                format!(
                    "{} {}: {:.3e} (tolerance {:.3e})",
                    if c.passed { "ok  " } else { "FAIL" },
                    c.name,
                    c.value,
                    c.tolerance
                )
            })
            .collect();
        Self {
            code: if summary.passed { EXIT_PASS } else { EXIT_VERIFICATION },
            messages,
            artifacts,
        }
    }
}

// ---------------------------------------------------------------------------
// I/O helpers

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

pub fn load_system(path: &Path) -> Result<LoadedSystem> {
    read_json::<SystemFile>(path)?.load()
}

fn load_perturbation(path: &Path, dim: usize) -> Result<BuiltinPerturbation> {
    BuiltinPerturbation::from_json(&read_text(path)?, dim)
}

fn load_sequence(path: &Path, window: Window, dim: usize) -> Result<VecSeq> {
    VecSeq::read_csv(fs::File::open(path)?, window, dim)
}

/// Configures the global thread pool from `QSHADOW_THREADS`.
pub fn configure_threads() {
    if let Some(n) = std::env::var("QSHADOW_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        // a pool that already exists keeps its size
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
}

// ---------------------------------------------------------------------------
// Artifacts

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveInputs {
    pub system: PathBuf,
    pub perturbation: PathBuf,
    pub pseudo: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveArtifact {
    #[serde(flatten)]
    pub report: QuasiShadowReport,
    pub constants: DichotomyConstants,
    pub verification: VerificationSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uniqueness: Option<UniquenessReport>,
    /// Largest difference quotient of `f` over seeded random pairs.
    pub lipschitz_sample: f64,
    pub seed: u64,
    pub inputs: SolveInputs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DichotomyArtifact {
    pub splitting: SplittingReport,
    pub constants: ConstantsReport,
    pub fitted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub m: i64,
    pub y: Vec<f64>,
}

/// Conjugacy grid file: the `(m, y)` points plus optional continuity-probe settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridFile {
    pub points: Vec<GridPoint>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radii: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directions: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugacyArtifact {
    pub report: ConjugacyReport,
    pub modulus: ModulusTable,
    pub constants: DichotomyConstants,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowArtifact {
    pub report: FlowReport,
    pub verification: VerificationSummary,
}

/// Plot data for a solve: `n, ‖residual_n‖, ‖z^c_n‖, ‖z^{s,u}_n‖, ‖x_n − y_n‖`.
pub fn emit_plot_data(report: &QuasiShadowReport, residual: &VecSeq) -> Result<String> {
    let a = report.ambient;
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["n", "residual", "zc", "zsu", "deviation"])?;
    for n in report.z.window().indices() {
        let dev = report.x.get(n) - report.y.get(n);
        wtr.write_record(&[
            n.to_string(),
            format!("{:e}", a.vec_norm(residual.get(n))),
            format!("{:e}", a.vec_norm(report.z_central.get(n))),
            format!("{:e}", a.vec_norm(report.z_hyperbolic.get(n))),
            format!("{:e}", a.vec_norm(&dev)),
        ])?;
    }
    csv_string(wtr)
}

/// Plot data for a flow: `t, ‖x(t) − y(t)‖, ε`.
pub fn emit_flow_plot_data(report: &FlowReport) -> Result<String> {
    let mut wtr = csv::Writer::from_writer(Vec::new());
    wtr.write_record(["t", "deviation", "epsilon"])?;
    for s in &report.samples {
        wtr.write_record(&[format!("{}", s.t), format!("{:e}", s.deviation), format!("{:e}", report.epsilon)])?;
    }
    csv_string(wtr)
}

fn csv_string(wtr: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

// ---------------------------------------------------------------------------
// Commands

pub fn run(cfg: &RunConfig) -> Result<Outcome> {
    match cfg.command {
        CommandKind::Solve => run_solve(cfg),
        CommandKind::Verify => run_verify(cfg),
        CommandKind::VerifyDichotomy => run_verify_dichotomy(cfg),
        CommandKind::Conjugacy => run_conjugacy(cfg),
        CommandKind::Flow => run_flow(cfg),
        CommandKind::Gallery => run_gallery(cfg),
    }
}

fn constants_for(loaded: &LoadedSystem, strong: bool) -> Result<(DichotomyConstants, bool)> {
    match loaded.constants {
        Some(c) if !strong || c.strong.is_some() => Ok((c, false)),
        _ => Ok((fit_constants(&loaded.sys, &loaded.split, loaded.ambient, strong)?, true)),
    }
}

fn lipschitz_check(f: &BuiltinPerturbation, sys: &WindowSystem, ambient: Ambient, cfg: &RunConfig) -> (f64, Check) {
    let sample = empirical_lipschitz(
        f,
        sys.window(),
        sys.dim(),
        ambient,
        cfg.tolerances.lipschitz_samples,
        1.0,
        cfg.seed,
    );
    let declared = f.lipschitz(ambient);
    (sample, Check::at_most("declared_lipschitz", sample, declared * (1.0 + 1e-9) + 1e-15))
}

fn run_solve(cfg: &RunConfig) -> Result<Outcome> {
    let system_path = cfg.require(&cfg.system, "system")?;
    let pert_path = cfg.require(&cfg.perturbation, "perturbation")?;
    let pseudo_path = cfg.require(&cfg.pseudo, "pseudo")?;
    let out = cfg.require(&cfg.out, "out")?;
    let epsilon = cfg.epsilon()?;
    let family = NormFamily::parse(&cfg.norm)?;

    let loaded = load_system(system_path)?;
    let (sys, ambient) = (&loaded.sys, loaded.ambient);
    let f = load_perturbation(pert_path, sys.dim())?;
    let y = load_sequence(pseudo_path, sys.window(), sys.dim())?;
    let (constants, _) = constants_for(&loaded, false)?;
    let ctx = GreenContext::new(sys.clone(), loaded.split.clone(), constants, SequenceNorm::new(family, ambient))?;
    let pseudo = PseudoTrajectory::new(sys, &f, y)?;
    let report = quasi_shadow(&ctx, &f, &pseudo, epsilon, &cfg.solve_options())?;

    let mut verification = verify_report(&ctx, &f, &pseudo, &report)?;
    let (lipschitz_sample, lip_check) = lipschitz_check(&f, sys, ambient, cfg);
    verification.checks.push(lip_check);
    let uniqueness = if cfg.tolerances.uniqueness_trials > 0 && report.pseudo_norm <= report.delta_used {
        Some(uniqueness_probe(&ctx, &f, &pseudo, epsilon, cfg.tolerances.uniqueness_trials, cfg.seed)?)
    } else {
        None
    };
    if let Some(u) = &uniqueness {
        verification.checks.push(Check::at_most("uniqueness", u.max_distance, 1e-9));
    }
    let verification = VerificationSummary::new(verification.checks);

    let mut artifacts = vec![out.to_path_buf()];
    if let Some(plot) = &cfg.plot {
        write_atomic(plot, emit_plot_data(&report, &pseudo.residual)?.as_bytes())?;
        artifacts.push(plot.clone());
    }
    let artifact = SolveArtifact {
        report,
        constants,
        verification,
        uniqueness,
        lipschitz_sample,
        seed: cfg.seed,
        inputs: SolveInputs {
            system: system_path.to_path_buf(),
            perturbation: pert_path.to_path_buf(),
            pseudo: pseudo_path.to_path_buf(),
        },
    };
    write_json(out, &artifact)?;
    Ok(Outcome::from_summary(&artifact.verification, artifacts))
}

fn run_verify(cfg: &RunConfig) -> Result<Outcome> {
    let report_path = cfg.require(&cfg.report, "report")?;
    let artifact: SolveArtifact = read_json(report_path)?;
    let system_path = cfg.system.clone().unwrap_or(artifact.inputs.system.clone());
    let pert_path = cfg.perturbation.clone().unwrap_or(artifact.inputs.perturbation.clone());
    let loaded = load_system(&system_path)?;
    let sys = &loaded.sys;
    let f = load_perturbation(&pert_path, sys.dim())?;
    let y = match &cfg.pseudo {
        Some(p) => load_sequence(p, sys.window(), sys.dim())?,
        None => artifact.report.y.clone(),
    };
    let family = NormFamily::parse(&artifact.report.norm)?;
    let ctx = GreenContext::new(
        sys.clone(),
        loaded.split.clone(),
        artifact.constants,
        SequenceNorm::new(family, artifact.report.ambient),
    )?;
    let pseudo = PseudoTrajectory::new(sys, &f, y)?;
    let mut summary = verify_report(&ctx, &f, &pseudo, &artifact.report)?;
    summary.checks.push(lipschitz_check(&f, sys, artifact.report.ambient, cfg).1);
    let summary = VerificationSummary::new(summary.checks);
    let mut artifacts = Vec::new();
    if let Some(out) = &cfg.out {
        write_json(out, &summary)?;
        artifacts.push(out.clone());
    }
    Ok(Outcome::from_summary(&summary, artifacts))
}

fn run_verify_dichotomy(cfg: &RunConfig) -> Result<Outcome> {
    let loaded = load_system(cfg.require(&cfg.system, "system")?)?;
    validate_splitting(&loaded.sys, &loaded.split, SPLIT_TOL)?;
    let splitting = splitting_report(&loaded.sys, &loaded.split)?;
    let (constants, fitted) = constants_for(&loaded, false)?;
    let report = check_constants(&loaded.sys, &loaded.split, &constants, loaded.ambient, CONSTANTS_TOL)?;
    let passed = report.passed;
    let messages = report
        .checks
        .iter()
        .map(|c| {
            format!(
                "{} {}: max ratio {:.6} at (m, n) = ({}, {})",
                if c.passed { "ok  " } else { "FAIL" },
                c.kind,
                c.max_ratio,
                c.worst_m,
                c.worst_n
            )
        })
        .collect();
    let artifact = DichotomyArtifact {
        splitting,
        constants: report,
        fitted,
    };
    let mut artifacts = Vec::new();
    if let Some(out) = &cfg.out {
        write_json(out, &artifact)?;
        artifacts.push(out.clone());
    }
    Ok(Outcome {
        code: if passed { EXIT_PASS } else { EXIT_VERIFICATION },
        messages,
        artifacts,
    })
}

fn run_conjugacy(cfg: &RunConfig) -> Result<Outcome> {
    let loaded = load_system(cfg.require(&cfg.system, "system")?)?;
    let sys = &loaded.sys;
    let f = load_perturbation(cfg.require(&cfg.perturbation, "perturbation")?, sys.dim())?;
    let grid: GridFile = read_json(cfg.require(&cfg.grid, "grid")?)?;
    let out = cfg.require(&cfg.out, "out")?;
    let epsilon = cfg.epsilon()?;
    if grid.points.is_empty() {
        return Err(Error::Config("conjugacy grid has no points".into()));
    }
    if let Some(p) = grid.points.iter().find(|p| p.y.len() != sys.dim()) {
        return Err(Error::Structure(format!("grid point at m = {} has wrong dimension", p.m)));
    }
    let (constants, _) = constants_for(&loaded, true)?;
    let qc = QuasiConjugacy::new(sys, &loaded.split, constants, loaded.ambient, &f)?;
    let points: Vec<(i64, Vec<f64>)> = grid.points.iter().map(|p| (p.m, p.y.clone())).collect();
    let report = qc.verify_conjugacy(&points, epsilon, cfg.margin)?;
    let radii = grid.radii.clone().unwrap_or_else(|| vec![1e-1, 1e-2, 1e-3, 1e-4]);
    let first = &grid.points[0];
    let modulus = qc.continuity_probe(
        first.m,
        &DVector::from_row_slice(&first.y),
        &radii,
        grid.directions.unwrap_or(4),
        epsilon,
        cfg.seed,
    )?;
    let mut outcome = Outcome::from_summary(&report.summary, vec![out.to_path_buf()]);
    outcome.messages.push(format!(
        "continuity modulus at m = {}: {:?} ({})",
        first.m,
        modulus.modulus,
        if modulus.vanishing { "vanishing" } else { "not clearly vanishing" }
    ));
    write_json(
        out,
        &ConjugacyArtifact {
            report,
            modulus,
            constants,
            seed: cfg.seed,
        },
    )?;
    Ok(outcome)
}

fn run_flow(cfg: &RunConfig) -> Result<Outcome> {
    let mut spec: crate::flow::FlowSpec = read_json(cfg.require(&cfg.spec, "spec")?)?;
    if let Some(h) = cfg.h {
        spec.h = h;
    }
    let model = FlowModel::new(spec)?;
    let path = SampledPath::read_csv(fs::File::open(cfg.require(&cfg.path, "path")?)?, cfg.defect)?;
    let out = cfg.require(&cfg.out, "out")?;
    let report = flow_quasi_shadow(&model, &path, cfg.epsilon()?, &cfg.solve_options())?;
    let verification = verify_flow(&model, &path, &report)?;
    let mut artifacts = vec![out.to_path_buf()];
    if let Some(plot) = &cfg.plot {
        write_atomic(plot, emit_flow_plot_data(&report)?.as_bytes())?;
        artifacts.push(plot.clone());
    }
    let outcome = Outcome::from_summary(&verification, artifacts);
    write_json(out, &FlowArtifact { report, verification })?;
    Ok(outcome)
}

/// Writes a gallery system with example inputs and ready-to-run configs.
fn run_gallery(cfg: &RunConfig) -> Result<Outcome> {
    let name = cfg
        .gallery
        .ok_or_else(|| Error::Config("gallery needs a system name".into()))?;
    let dir = cfg.require(&cfg.out_dir, "out-dir")?;
    fs::create_dir_all(dir)?;
    let g = gallery_system(name)?;
    let inputs = gallery_inputs(&g)?;
    let mut written = Vec::new();
    let mut put = |file: &str, bytes: Vec<u8>| -> Result<()> {
        let p = dir.join(file);
        write_atomic(&p, &bytes)?;
        written.push(p);
        Ok(())
    };
    let system = SystemFile::from_parts(&g.sys, &g.split, Some(g.constants), g.ambient);
    put("system.json", json_bytes(&system)?)?;
    put("perturbation.json", json_bytes(&inputs.perturbation)?)?;
    let mut csv = Vec::new();
    inputs.pseudo.write_csv(&mut csv)?;
    put("pseudo.csv", csv)?;
    put("grid.json", json_bytes(&inputs.grid)?)?;
    for c in gallery_configs() {
        let file = match c.command {
            CommandKind::Solve => "solve.json",
            CommandKind::Conjugacy => "conjugacy.json",
            _ => "verify-dichotomy.json",
        };
        put(file, json_bytes(&c)?)?;
    }
    Ok(Outcome {
        code: EXIT_PASS,
        messages: vec![format!("wrote gallery system {} to {}", name.label(), dir.display())],
        artifacts: written,
    })
}

/// Configs written next to every gallery system, with paths relative to it.
pub fn gallery_configs() -> Vec<RunConfig> {
    let mut solve = RunConfig::new(CommandKind::Solve);
    solve.system = Some("system.json".into());
    solve.perturbation = Some("perturbation.json".into());
    solve.pseudo = Some("pseudo.csv".into());
    solve.epsilon = Some(GALLERY_EPSILON);
    solve.out = Some("report.json".into());
    solve.plot = Some("plot.csv".into());

    let mut conj = RunConfig::new(CommandKind::Conjugacy);
    conj.system = Some("system.json".into());
    conj.perturbation = Some("perturbation.json".into());
    conj.grid = Some("grid.json".into());
    conj.epsilon = Some(GALLERY_EPSILON);
    conj.out = Some("conjugacy-report.json".into());

    let mut dich = RunConfig::new(CommandKind::VerifyDichotomy);
    dich.system = Some("system.json".into());
    dich.out = Some("dichotomy-report.json".into());
    vec![solve, conj, dich]
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text.into_bytes())
}

// ---------------------------------------------------------------------------
// Argument parsing

#[derive(Debug, Parser)]
#[command(
    name = "qshadow",
    version,
    about = "Quasi-shadowing of perturbed partially dichotomic linear sequences",
    after_help = "Exit codes: 0 pass, 2 contraction or precondition failure, 3 verification failure, 4 I/O or parse error.\nQSHADOW_THREADS caps internal parallelism."
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Debug, Args)]
struct CommonArgs {
    /// Seed for randomized checks.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Fixed-point stopping tolerance.
    #[arg(long, default_value_t = FIXED_POINT_TOL)]
    tol: f64,
    /// Iteration budget (default 10·⌈ln tol / ln q⌉).
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Run even when the pseudotrajectory residual exceeds δ.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Solve for the quasi-shadowing correction of a pseudotrajectory.
    Solve {
        /// System JSON (docs/schemas/system.schema.json).
        #[arg(long)]
        system: PathBuf,
        /// Perturbation JSON.
        #[arg(long)]
        perturbation: PathBuf,
        /// Pseudotrajectory CSV (n,c0,...).
        #[arg(long)]
        pseudo: PathBuf,
        /// Target shadowing radius ε > 0.
        #[arg(long)]
        epsilon: f64,
        /// sup, lp:P, orlicz:power:E, orlicz:exp or a JSON object.
        #[arg(long, default_value = "sup")]
        norm: String,
        /// Where to write the JSON report.
        #[arg(long)]
        out: PathBuf,
        /// Per-index plot data CSV.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Random restarts for the uniqueness check.
        #[arg(long, default_value_t = 2)]
        uniqueness_trials: usize,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Re-check a solve report from its inputs.
    Verify {
        /// Report written by `solve`.
        #[arg(long)]
        report: PathBuf,
        /// Defaults to the system recorded in the report.
        #[arg(long)]
        system: Option<PathBuf>,
        /// Perturbation JSON, defaults to the recorded one.
        #[arg(long)]
        perturbation: Option<PathBuf>,
        /// Pseudotrajectory CSV, defaults to the recorded one.
        #[arg(long)]
        pseudo: Option<PathBuf>,
        /// Where to write the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Validate the splitting and the dichotomy constants of a system.
    VerifyDichotomy {
        /// System JSON (docs/schemas/system.schema.json).
        #[arg(long)]
        system: PathBuf,
        /// Where to write the JSON report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate the conjugacy h and its defect τ on a grid.
    Conjugacy {
        /// System JSON (docs/schemas/system.schema.json).
        #[arg(long)]
        system: PathBuf,
        /// Perturbation JSON.
        #[arg(long)]
        perturbation: PathBuf,
        /// Grid JSON with the (m, y) points.
        #[arg(long)]
        grid: PathBuf,
        /// Target shadowing radius ε > 0.
        #[arg(long)]
        epsilon: f64,
        /// Half-width of the probe window around each m.
        #[arg(long)]
        margin: Option<i64>,
        /// Where to write the JSON report.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Shadow a sampled approximate solution of a flow.
    Flow {
        /// Flow JSON (docs/schemas/flow.schema.json).
        #[arg(long)]
        spec: PathBuf,
        /// Path CSV (t,c0,...) sampled at step h.
        #[arg(long)]
        path: PathBuf,
        /// Target shadowing radius ε > 0.
        #[arg(long)]
        epsilon: f64,
        /// Overrides the step given in the flow file.
        #[arg(long)]
        h: Option<f64>,
        /// Declared defect bound of the path.
        #[arg(long)]
        defect: Option<f64>,
        /// Where to write the JSON report.
        #[arg(long)]
        out: PathBuf,
        /// Per-sample plot data CSV.
        #[arg(long)]
        plot: Option<PathBuf>,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Write a builtin system with example inputs and configs.
    Gallery {
        name: GalleryName,
        /// Directory for the generated files.
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Run a command described by a JSON config.
    Run {
        /// Run config JSON (docs/schemas/run-config.schema.json).
        #[arg(long)]
        config: PathBuf,
    },
}

impl CommonArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        cfg.seed = self.seed;
        cfg.tolerances.fixed_point = self.tol;
        cfg.tolerances.max_iterations = self.max_iterations;
        cfg.force = self.force;
    }
}

fn config_from(cmd: Cmd) -> Result<RunConfig> {
    let cfg = match cmd {
        Cmd::Solve {
            system,
            perturbation,
            pseudo,
            epsilon,
            norm,
            out,
            plot,
            uniqueness_trials,
            common,
        } => {
            let mut c = RunConfig::new(CommandKind::Solve);
            c.system = Some(system);
            c.perturbation = Some(perturbation);
            c.pseudo = Some(pseudo);
            c.epsilon = Some(epsilon);
            c.norm = norm;
            c.out = Some(out);
            c.plot = plot;
            c.tolerances.uniqueness_trials = uniqueness_trials;
            common.apply(&mut c);
            c
        }
        Cmd::Verify {
            report,
            system,
            perturbation,
            pseudo,
            out,
            common,
        } => {
            let mut c = RunConfig::new(CommandKind::Verify);
            c.report = Some(report);
            c.system = system;
            c.perturbation = perturbation;
            c.pseudo = pseudo;
            c.out = out;
            common.apply(&mut c);
            c
        }
        Cmd::VerifyDichotomy { system, out } => {
            let mut c = RunConfig::new(CommandKind::VerifyDichotomy);
            c.system = Some(system);
            c.out = out;
            c
        }
        Cmd::Conjugacy {
            system,
            perturbation,
            grid,
            epsilon,
            margin,
            out,
            common,
        } => {
            let mut c = RunConfig::new(CommandKind::Conjugacy);
            c.system = Some(system);
            c.perturbation = Some(perturbation);
            c.grid = Some(grid);
            c.epsilon = Some(epsilon);
            c.margin = margin;
            c.out = Some(out);
            common.apply(&mut c);
            c
        }
        Cmd::Flow {
            spec,
            path,
            epsilon,
            h,
            defect,
            out,
            plot,
            common,
        } => {
            let mut c = RunConfig::new(CommandKind::Flow);
            c.spec = Some(spec);
            c.path = Some(path);
            c.epsilon = Some(epsilon);
            c.h = h;
            c.defect = defect;
            c.out = Some(out);
            c.plot = plot;
            common.apply(&mut c);
            c
        }
        Cmd::Gallery { name, out_dir } => {
            let mut c = RunConfig::new(CommandKind::Gallery);
            c.gallery = Some(name);
            c.out_dir = Some(out_dir);
            c
        }
        Cmd::Run { config } => RunConfig::load(&config)?,
    };
    Ok(cfg)
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_PASS };
        }
    };
    configure_threads();
    match config_from(cli.command).and_then(|cfg| run(&cfg)) {
        Ok(outcome) => {
            for m in &outcome.messages {
                println!("{m}");
            }
            for a in &outcome.artifacts {
                println!("wrote {}", a.display());
            }
            outcome.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gallery_constants_pass_their_check() {
        for name in GalleryName::ALL {
            let g = gallery_system(name).unwrap();
            validate_splitting(&g.sys, &g.split, SPLIT_TOL).unwrap();
            let r = check_constants(&g.sys, &g.split, &g.constants, g.ambient, CONSTANTS_TOL).unwrap();
            assert!(r.passed, "{}: {:?}", name.label(), r.checks);
        }
    }

    #[test]
    fn system_file_round_trip() {
        for name in GalleryName::ALL {
            let g = gallery_system(name).unwrap();
            let file = SystemFile::from_parts(&g.sys, &g.split, Some(g.constants), g.ambient);
            let text = serde_json::to_string(&file).unwrap();
            let back: SystemFile = serde_json::from_str(&text).unwrap();
            assert_eq!(back, file);
            let loaded = back.load().unwrap();
            assert_eq!(loaded.sys, g.sys);
            assert_eq!(loaded.split, g.split);
        }
        let g = gallery_system(GalleryName::Diag3d).unwrap();
        let file = SystemFile::from_parts(&g.sys, &g.split, None, g.ambient);
        assert!(matches!(file.a, MatrixSeqFile::Constant { .. }));
    }

    #[test]
    fn list_form_needs_every_index() {
        let text = r#"{"window":{"lo":0,"hi":2},"dim":1,
            "A":[{"n":0,"rows":[[0.5]]}],
            "projections":{"P1":{"constant":true,"rows":[[1.0]]},"P2":{"constant":true,"rows":[[0.0]]},"P3":{"constant":true,"rows":[[0.0]]}}}"#;
        let file: SystemFile = serde_json::from_str(text).unwrap();
        assert!(matches!(file.load(), Err(Error::Structure(_))));
    }

    #[test]
    fn config_round_trip() {
        for c in gallery_configs() {
            assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
        }
        let c = RunConfig::from_json(r#"{"command":"verify-dichotomy","system":"s.json"}"#).unwrap();
        assert_eq!(c.norm, "sup");
        assert_eq!(c.tolerances, Tolerances::default());
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Parse("x".into())), EXIT_INPUT);
        assert_eq!(exit_code(&Error::ContractionViolated { q: 1.2 }), EXIT_PRECONDITION);
        assert_eq!(exit_code(&Error::Precondition("x".into())), EXIT_PRECONDITION);
    }

    #[test]
    fn zero_report_plots_zeros() {
        let g = gallery_system(GalleryName::Diag3d).unwrap();
        let ctx = GreenContext::new(g.sys.clone(), g.split.clone(), g.constants, SequenceNorm::sup()).unwrap();
        let f = BuiltinPerturbation::zero(3);
        let pseudo = PseudoTrajectory::new(&g.sys, &f, VecSeq::zeros(g.sys.window(), 3)).unwrap();
        let r = quasi_shadow(&ctx, &f, &pseudo, 0.1, &SolveOptions::default()).unwrap();
        let csv = emit_plot_data(&r, &pseudo.residual).unwrap();
        for line in csv.lines().skip(1) {
            assert!(line.split(',').skip(1).all(|v| v.parse::<f64>().unwrap() == 0.0), "{line}");
        }
    }

    #[test]
    fn diagonal_plot_has_two_central_rows() {
        let g = gallery_system(GalleryName::Diag3d).unwrap();
        let inputs = gallery_inputs(&g).unwrap();
        let ctx = GreenContext::new(g.sys.clone(), g.split.clone(), g.constants, SequenceNorm::sup()).unwrap();
        let f = BuiltinPerturbation::new(inputs.perturbation, 3).unwrap();
        let pseudo = PseudoTrajectory::new(&g.sys, &f, inputs.pseudo).unwrap();
        let r = quasi_shadow(&ctx, &f, &pseudo, GALLERY_EPSILON, &SolveOptions::default()).unwrap();
        let csv = emit_plot_data(&r, &pseudo.residual).unwrap();
        let nonzero: Vec<i64> = csv
            .lines()
            .skip(1)
            .filter_map(|l| {
                let cols: Vec<&str> = l.split(',').collect();
                (cols[2].parse::<f64>().unwrap() > 0.0).then(|| cols[0].parse().unwrap())
            })
            .collect();
        assert_eq!(nonzero, vec![0, 1]);
    }

    #[test]
    fn gallery_examples_solve_and_verify() {
        for name in GalleryName::ALL {
            let g = gallery_system(name).unwrap();
            let inputs = gallery_inputs(&g).unwrap();
            let ctx = GreenContext::new(g.sys.clone(), g.split.clone(), g.constants, SequenceNorm::sup()).unwrap();
            let f = BuiltinPerturbation::new(inputs.perturbation, g.sys.dim()).unwrap();
            let pseudo = PseudoTrajectory::new(&g.sys, &f, inputs.pseudo).unwrap();
            let r = quasi_shadow(&ctx, &f, &pseudo, GALLERY_EPSILON, &SolveOptions::default()).unwrap();
            let v = verify_report(&ctx, &f, &pseudo, &r).unwrap();
            assert!(v.passed, "{}: {v:?}", name.label());
        }
    }
}
