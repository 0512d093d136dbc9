//! JSON run configuration: schema-validated before any computation, unknown
//! keys rejected, and all defaults materialized into the echoed config so a
//! result file fully determines its rerun.

use gbsde_core::error::{Error, Result};
use gbsde_core::expr::{Expr, VarSpace};
use gbsde_core::forward::SdeCoefficients;
use gbsde_core::grid::{AxisSpec, GridSpec, SpatialGrid, TimeGrid};
use gbsde_core::picard::{suggested_interval_count, PicardConfig, SystemSpec};
use gbsde_core::presets::preset;
use gbsde_core::scalar::{Implicitness, SolveConfig};
use gbsde_core::sublinear::GammaSet;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub problem: ProblemConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<GammaConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grid: Option<GridConfig>,
    #[serde(default)]
    pub solver: SolverSection,
    #[serde(default)]
    pub outputs: OutputSection,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

fn default_seed() -> u64 {
    42
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inline: Option<InlineProblem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InlineProblem {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    /// f^l as expression strings of (t, x1.., y1.., z1..).
    pub f: Vec<String>,
    /// Upper-triangle g entries per component.
    #[serde(default)]
    pub g: Vec<Vec<GEntry>>,
    /// φ^l as expression strings of x1..
    pub terminal: Vec<String>,
    pub dynamics: DynamicsConfig,
    pub lipschitz: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Optional paired lower system for comparison checks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lower: Option<Box<InlineProblem>>,
}

fn default_beta() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GEntry {
    pub i: usize,
    pub j: usize,
    pub expr: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    /// k expressions of (t, x).
    pub b: Vec<String>,
    /// k×d expressions, row-major.
    pub sigma: Vec<String>,
    /// Upper-triangle h entries: (i, j, k-vector of expressions).
    #[serde(default)]
    pub h: Vec<HEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HEntry {
    pub i: usize,
    pub j: usize,
    pub exprs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum GammaConfig {
    Interval { sigma_min_sq: f64, sigma_max_sq: f64 },
    Singleton { gamma: f64 },
    Finite { dim: usize, matrices: Vec<Vec<Vec<f64>>> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub axes: Vec<AxisConfig>,
    #[serde(default)]
    pub t_start: f64,
    pub t_end: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisConfig {
    pub min: f64,
    pub max: f64,
    pub nodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSection {
    pub tol: f64,
    pub max_iter: usize,
    pub implicitness: ImplicitnessConfig,
    /// Initial stitching interval count; absent means the preset value or
    /// the h·L ≤ 0.25 heuristic.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub m_initial: Option<usize>,
    pub quadrature_q: usize,
    pub gamma_m: usize,
    pub moment_match: bool,
    pub k_tolerance_factor: f64,
    pub c_comparison: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        SolverSection {
            tol: 1e-8,
            max_iter: 50,
            implicitness: ImplicitnessConfig::Explicit,
            m_initial: None,
            quadrature_q: 7,
            gamma_m: 9,
            moment_match: true,
            k_tolerance_factor: 10.0,
            c_comparison: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImplicitnessConfig {
    Explicit,
    InnerFixedPoint { max_iter: usize, tol: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection {
            dir: "out".to_string(),
            formats: vec![OutputFormat::Csv, OutputFormat::Json, OutputFormat::Gnuplot],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputFormat {
    Csv,
    Json,
    Gnuplot,
}

/// A parsed, fully materialized run: core objects plus the echoed config.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub spec: SystemSpec,
    pub lower: Option<SystemSpec>,
    pub gamma: GammaSet,
    pub grid: GridSpec,
    pub initial_m: usize,
    pub solver: SolverSection,
    pub outputs: OutputSection,
    pub seed: u64,
    /// Per-preset cross-validation threshold (config default for inline).
    pub crossval_threshold: f64,
    /// Config with every default filled in, for the envelope.
    pub echo: RunConfig,
}

impl ResolvedRun {
    pub fn picard_config(&self) -> PicardConfig {
        PicardConfig {
            tol: self.solver.tol,
            max_iter: self.solver.max_iter,
            contraction_guard: 0.95,
            solve: self.solve_config(),
        }
    }

    pub fn solve_config(&self) -> SolveConfig {
        SolveConfig {
            implicitness: match self.solver.implicitness {
                ImplicitnessConfig::Explicit => Implicitness::Explicit,
                ImplicitnessConfig::InnerFixedPoint { max_iter, tol } => {
                    Implicitness::InnerFixedPoint { max_iter, tol }
                }
            },
            l_declared: self.spec.l_declared,
            moment_match: self.solver.moment_match,
            k_tolerance_factor: self.solver.k_tolerance_factor,
        }
    }

    pub fn harness(&self) -> gbsde_core::crossval::HarnessConfig {
        gbsde_core::crossval::HarnessConfig::new(
            self.gamma.clone(),
            self.solver.quadrature_q,
            self.solver.gamma_m,
            self.initial_m,
            self.picard_config(),
        )
    }
}

fn parse_exprs(srcs: &[String], space: &VarSpace) -> Result<Vec<Expr>> {
    srcs.iter().map(|s| Expr::parse(s, space)).collect()
}

fn build_inline_spec(p: &InlineProblem) -> Result<SystemSpec> {
    if p.f.len() != p.n || p.terminal.len() != p.n {
        return Err(Error::Config(format!(
            "inline problem declares n = {}, but f has {} and terminal has {} entries",
            p.n,
            p.f.len(),
            p.terminal.len()
        )));
    }
    let gen_space = VarSpace::generator(p.k, p.n, p.d);
    let f = parse_exprs(&p.f, &gen_space)?;
    let terminal = parse_exprs(&p.terminal, &VarSpace::terminal(p.k))?;
    let mut g_upper = Vec::with_capacity(p.n);
    if !p.g.is_empty() && p.g.len() != p.n {
        return Err(Error::Config(format!("g must list one entry set per component, got {}", p.g.len())));
    }
    for l in 0..p.n {
        let mut entries = Vec::new();
        if let Some(list) = p.g.get(l) {
            for e in list {
                entries.push((e.i, e.j, Expr::parse(&e.expr, &gen_space)?));
            }
        }
        g_upper.push(entries);
    }
    let dyn_space = VarSpace::dynamics(p.k);
    let b = parse_exprs(&p.dynamics.b, &dyn_space)?;
    let sigma = parse_exprs(&p.dynamics.sigma, &dyn_space)?;
    let mut h_upper = Vec::new();
    for e in &p.dynamics.h {
        h_upper.push((e.i, e.j, parse_exprs(&e.exprs, &dyn_space)?));
    }
    let dynamics = SdeCoefficients::new(p.k, p.d, b, sigma, h_upper, p.lipschitz)?;
    SystemSpec::new(p.n, p.k, p.d, f, g_upper, terminal, dynamics, p.lipschitz, p.beta)
}

fn build_gamma(cfg: &GammaConfig) -> Result<GammaSet> {
    match cfg {
        GammaConfig::Interval { sigma_min_sq, sigma_max_sq } => {
            GammaSet::interval(*sigma_min_sq, *sigma_max_sq)
        }
        GammaConfig::Singleton { gamma } => GammaSet::singleton(*gamma),
        GammaConfig::Finite { dim, matrices } => {
            let mats = matrices
                .iter()
                .map(|rows| {
                    let flat: Vec<f64> = rows.iter().flatten().cloned().collect();
                    DMatrix::from_row_slice(*dim, *dim, &flat)
                })
                .collect();
            GammaSet::finite(*dim, mats)
        }
    }
}

fn gamma_to_config(set: &GammaSet) -> GammaConfig {
    match set.kind() {
        gbsde_core::sublinear::GammaKind::Interval { sigma_min_sq, sigma_max_sq } => {
            GammaConfig::Interval { sigma_min_sq: *sigma_min_sq, sigma_max_sq: *sigma_max_sq }
        }
        gbsde_core::sublinear::GammaKind::Finite(mats) => GammaConfig::Finite {
            dim: set.dim(),
            matrices: mats
                .iter()
                .map(|m| {
                    (0..m.nrows())
                        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
                        .collect()
                })
                .collect(),
        },
    }
}

fn build_grid(cfg: &GridConfig) -> Result<GridSpec> {
    let axes = cfg
        .axes
        .iter()
        .map(|a| AxisSpec::new(a.min, a.max, a.nodes))
        .collect::<Result<Vec<_>>>()?;
    Ok(GridSpec::new(SpatialGrid::new(axes)?, TimeGrid::new(cfg.t_start, cfg.t_end, cfg.steps)?))
}

fn grid_to_config(grid: &GridSpec) -> GridConfig {
    GridConfig {
        axes: grid
            .space
            .axes()
            .iter()
            .map(|a| AxisConfig { min: a.min, max: a.max, nodes: a.count })
            .collect(),
        t_start: grid.time.t_start,
        t_end: grid.time.t_end,
        steps: grid.time.steps,
    }
}

/// Parses a JSON string (schema errors are configuration errors) and
/// materializes presets and defaults.
pub fn parse_config(text: &str) -> Result<ResolvedRun> {
    let cfg: RunConfig =
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
    resolve(cfg)
}

/// A minimal config for a named preset.
pub fn preset_config(name: &str) -> RunConfig {
    RunConfig {
        problem: ProblemConfig { preset: Some(name.to_string()), inline: None },
        gamma: None,
        grid: None,
        solver: SolverSection::default(),
        outputs: OutputSection::default(),
        seed: default_seed(),
    }
}

pub fn resolve(cfg: RunConfig) -> Result<ResolvedRun> {
    let (spec, lower, gamma_default, grid_default, m_default, threshold) =
        match (&cfg.problem.preset, &cfg.problem.inline) {
            (Some(name), None) => {
                let p = preset(name)?;
                (
                    p.spec,
                    p.lower,
                    Some(p.gamma),
                    Some(p.grid),
                    Some(p.initial_m),
                    p.crossval_threshold,
                )
            }
            (None, Some(inline)) => {
                let spec = build_inline_spec(inline)?;
                let lower = inline.lower.as_deref().map(build_inline_spec).transpose()?;
                (spec, lower, None, None, None, 0.05)
            }
            (Some(_), Some(_)) => {
                return Err(Error::Config("give either a preset or an inline problem, not both".into()))
            }
            (None, None) => {
                return Err(Error::Config("problem needs a preset name or an inline definition".into()))
            }
        };

    let gamma = match &cfg.gamma {
        Some(g) => build_gamma(g)?,
        None => gamma_default
            .ok_or_else(|| Error::Config("inline problems must configure gamma".into()))?,
    };
    if gamma.dim() != spec.d {
        return Err(Error::Config(format!(
            "gamma dimension {} does not match the problem's d = {}",
            gamma.dim(),
            spec.d
        )));
    }
    let grid = match &cfg.grid {
        Some(g) => build_grid(g)?,
        None => {
            grid_default.ok_or_else(|| Error::Config("inline problems must configure the grid".into()))?
        }
    };
    if grid.space.dim() != spec.k {
        return Err(Error::Config(format!(
            "grid dimension {} does not match the problem's k = {}",
            grid.space.dim(),
            spec.k
        )));
    }
    let horizon = grid.time.t_end - grid.time.t_start;
    let initial_m = cfg
        .solver
        .m_initial
        .or(m_default)
        .unwrap_or_else(|| suggested_interval_count(horizon, spec.l_declared));

    // echoed config: every default materialized
    let mut echo = cfg.clone();
    echo.gamma = Some(gamma_to_config(&gamma));
    echo.grid = Some(grid_to_config(&grid));
    echo.solver.m_initial = Some(initial_m);

    Ok(ResolvedRun {
        spec,
        lower,
        gamma,
        grid,
        initial_m,
        solver: cfg.solver,
        outputs: cfg.outputs,
        seed: cfg.seed,
        crossval_threshold: threshold,
        echo,
    })
}
