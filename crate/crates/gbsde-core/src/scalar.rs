//! Backward dynamic programming for scalar-Y G-BSDEs on a spatial grid.
//!
//! One backward step per time node: Z from the next slice's gradient,
//! then a sup over the discretized volatility scenarios of the one-step
//! quadrature expectation plus generator terms, the quadratic-covariation
//! integrand weighted by γ_ij·Δt. Produces Y and Z fields, the per-node
//! maximizing scenario, and path-sampled K increments.

use crate::error::{Error, Result};
use crate::expr::{EvalContext, Expr};
use crate::forward::{DynamicsEval, PathBundle, SdeCoefficients};
use crate::grid::GridSpec;
use crate::lattice::{PreparedStep, Propagator, MAX_K};
use crate::sublinear::QuadratureRule;
use nalgebra::DMatrix;
use rayon::prelude::*;

/// Maximum supported Brownian dimension.
pub const MAX_D: usize = 2;

/// Evaluation point handed to a driver. `node` is set when the point is a
/// grid node, letting field-backed drivers read node values directly.
#[derive(Debug, Clone, Copy)]
pub struct QueryPoint<'a> {
    /// Time node index.
    pub m: usize,
    pub t: f64,
    pub x: &'a [f64],
    pub node: Option<usize>,
}

/// The scalar equation's generators: f and the d×d block g_ij, both
/// functions of (t, x, y, z) with y the live scalar component.
pub trait ScalarDriver: Sync {
    fn f(&self, q: &QueryPoint, y: f64, z: &[f64]) -> Result<f64>;
    fn g(&self, q: &QueryPoint, y: f64, z: &[f64], i: usize, j: usize) -> Result<f64>;
    /// Fast path: the whole g block is identically zero.
    fn g_is_zero(&self) -> bool {
        false
    }
}

/// Expression-backed generators. The y variable of the expressions is `y1`.
#[derive(Debug, Clone)]
pub struct ScalarGenerator {
    pub d: usize,
    f: Expr,
    /// d×d, mirrored from the upper triangle.
    g: Vec<Expr>,
    g_zero: bool,
}

impl ScalarGenerator {
    pub fn new(d: usize, f: Expr, g_upper: Vec<(usize, usize, Expr)>) -> Result<Self> {
        let mut g = vec![Expr::Const(0.0); d * d];
        for (i, j, e) in g_upper {
            if i > j || j >= d {
                return Err(Error::Config(format!("g entry ({i},{j}) must satisfy i <= j < d = {d}")));
            }
            g[i * d + j] = e.clone();
            g[j * d + i] = e;
        }
        let g_zero = g.iter().all(Expr::is_zero);
        Ok(ScalarGenerator { d, f, g, g_zero })
    }

    pub fn from_f(d: usize, f: Expr) -> Self {
        ScalarGenerator { d, f, g: vec![Expr::Const(0.0); d * d], g_zero: true }
    }

    pub fn zero(d: usize) -> Self {
        Self::from_f(d, Expr::Const(0.0))
    }

    pub fn f_expr(&self) -> &Expr {
        &self.f
    }

    pub fn g_expr(&self, i: usize, j: usize) -> &Expr {
        &self.g[i * self.d + j]
    }
}

impl ScalarDriver for ScalarGenerator {
    fn f(&self, q: &QueryPoint, y: f64, z: &[f64]) -> Result<f64> {
        self.f.eval(&EvalContext::new(q.t, q.x, &[y], z))
    }

    fn g(&self, q: &QueryPoint, y: f64, z: &[f64], i: usize, j: usize) -> Result<f64> {
        self.g[i * self.d + j].eval(&EvalContext::new(q.t, q.x, &[y], z))
    }

    fn g_is_zero(&self) -> bool {
        self.g_zero
    }
}

/// How Y* inside the generator terms is resolved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Implicitness {
    /// Y* = the one-step expectation of the next slice.
    Explicit,
    /// Inner fixed point y = E + f(y)Δt + Σ g_ij(y)γ_ijΔt.
    InnerFixedPoint { max_iter: usize, tol: f64 },
}

impl Default for Implicitness {
    fn default() -> Self {
        Implicitness::Explicit
    }
}

/// Solver knobs shared by the scalar and system solvers.
#[derive(Debug, Clone, Copy)]
pub struct SolveConfig {
    pub implicitness: Implicitness,
    /// Declared Lipschitz constant of the generators; the explicit policy
    /// requires Δt·L < 1.
    pub l_declared: f64,
    /// Match the post-splitting one-step second moment to γ·Δt.
    pub moment_match: bool,
    /// c_K in the K-increment tolerance c_K·(Δt + Δx).
    pub k_tolerance_factor: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig {
            implicitness: Implicitness::Explicit,
            l_declared: 0.0,
            moment_match: true,
            k_tolerance_factor: 10.0,
        }
    }
}

impl SolveConfig {
    pub fn with_lipschitz(l: f64) -> Self {
        SolveConfig { l_declared: l, ..Default::default() }
    }
}

/// Terminal data: an expression of x or a precomputed node slice.
#[derive(Debug, Clone, Copy)]
pub enum Terminal<'a> {
    Expression(&'a Expr),
    Slice(&'a [f64]),
}

/// One backward step's output at every node.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub y: Vec<f64>,
    /// Node-major, d entries per node.
    pub z: Vec<f64>,
    pub argmax: Vec<u16>,
}

/// The discrete solution triple: Y and Z fields on the full grid, the
/// maximizing scenario per (time, node), and the grid it lives on.
#[derive(Debug, Clone)]
pub struct ScalarSolution {
    pub y: crate::grid::ValueField,
    pub z: crate::grid::ValueField,
    /// [time node][space node].
    pub argmax: Vec<u16>,
    pub grid: GridSpec,
}

impl ScalarSolution {
    pub fn argmax_at(&self, m: usize, node: usize) -> usize {
        self.argmax[m * self.grid.space.node_count() + node] as usize
    }
}

struct NodeOut {
    y: f64,
    z: [f64; MAX_D],
    gi: u16,
}

/// Spatial gradient of a slice at a node: central differences inside,
/// one-sided at the boundary.
fn slice_gradient(space: &crate::grid::SpatialGrid, values: &[f64], idx: usize, out: &mut [f64]) {
    let k = space.dim();
    let mut multi = [0usize; MAX_K];
    space.multi_index(idx, &mut multi[..k]);
    for a in 0..k {
        let dx = space.axis(a).spacing();
        let n = space.axis(a).count;
        let stride = space.stride(a);
        let i = multi[a];
        out[a] = if i == 0 {
            (values[idx + stride] - values[idx]) / dx
        } else if i == n - 1 {
            (values[idx] - values[idx - stride]) / dx
        } else {
            (values[idx + stride] - values[idx - stride]) / (2.0 * dx)
        };
    }
}

/// Per-scenario data shared across nodes when the dynamics are
/// state-independent: grid nodes all sit on the same lattice, so the drift,
/// offsets and shrink calibration computed at one node hold at every node.
#[derive(Debug, Clone)]
struct SharedStep {
    sigma: Vec<f64>,
    per_gamma: Vec<(Vec<f64>, PreparedStep)>,
}

/// One backward step with a prebuilt propagator.
#[allow(clippy::too_many_arguments)]
fn step_backward_with<D: ScalarDriver + ?Sized>(
    m: usize,
    next_y: &[f64],
    next_lip: f64,
    gen: &D,
    dynamics: &SdeCoefficients,
    grid: &GridSpec,
    prop: &Propagator,
    cfg: &SolveConfig,
    shared: Option<&SharedStep>,
) -> Result<StepOutput> {
    let space = &grid.space;
    let k = space.dim();
    let d = dynamics.d;
    let dt = grid.dt();
    let t = grid.time.node(m);
    let n_gamma = prop.gamma_count();

    let node_result = |idx: usize| -> Result<NodeOut> {
        let mut x = [0.0f64; MAX_K];
        space.coords(idx, &mut x[..k]);
        let x = &x[..k];

        let mut local_eval = DynamicsEval::default();
        let mut local_drift = vec![0.0f64; k];
        let mut local_prep = PreparedStep::default();
        if shared.is_none() {
            dynamics.eval_at(t, x, &mut local_eval).map_err(|e| at_node(idx, x, e))?;
        }
        let sigma: &[f64] = match shared {
            Some(s) => &s.sigma,
            None => &local_eval.sigma,
        };

        // Z = σᵀ·(gradient of the next slice)
        let mut grad = [0.0f64; MAX_K];
        slice_gradient(space, next_y, idx, &mut grad[..k]);
        let mut z = [0.0f64; MAX_D];
        for b in 0..d {
            let mut acc = 0.0;
            for a in 0..k {
                acc += sigma[a * d + b] * grad[a];
            }
            z[b] = acc;
        }
        let z = &z[..d];

        let q = QueryPoint { m, t, x, node: Some(idx) };
        let mut best = f64::NEG_INFINITY;
        let mut best_gi = 0u16;
        for gi in 0..n_gamma {
            let (drift, prep): (&[f64], &PreparedStep) = match shared {
                Some(s) => (&s.per_gamma[gi].0, &s.per_gamma[gi].1),
                None => {
                    dynamics.drift_for_gamma(&local_eval, prop.gamma(gi), dt, &mut local_drift);
                    prop.prepare(x, &local_drift, &local_eval.sigma, gi, &mut local_prep);
                    (&local_drift, &local_prep)
                }
            };
            let e = prop.expect(next_y, next_lip, x, drift, prep);
            let gamma = prop.gamma(gi);
            let cand = match cfg.implicitness {
                Implicitness::Explicit => {
                    let f_val = gen.f(&q, e, z).map_err(|err| at_node_gamma(idx, x, gi, err))?;
                    e + f_val * dt + g_term(gen, &q, e, z, gamma, d, dt).map_err(|err| at_node_gamma(idx, x, gi, err))?
                }
                Implicitness::InnerFixedPoint { max_iter, tol } => {
                    let mut y_star = e;
                    for _ in 0..max_iter {
                        let f_val = gen.f(&q, y_star, z).map_err(|err| at_node_gamma(idx, x, gi, err))?;
                        let next = e
                            + f_val * dt
                            + g_term(gen, &q, y_star, z, gamma, d, dt)
                                .map_err(|err| at_node_gamma(idx, x, gi, err))?;
                        if (next - y_star).abs() < tol {
                            y_star = next;
                            break;
                        }
                        y_star = next;
                    }
                    y_star
                }
            };
            if !cand.is_finite() {
                return Err(Error::Solver(format!(
                    "non-finite value at node {idx} (x = {x:?}), gamma {gi}, t = {t}"
                )));
            }
            if cand > best {
                best = cand;
                best_gi = gi as u16;
            }
        }
        let mut zs = [0.0f64; MAX_D];
        zs[..d].copy_from_slice(z);
        Ok(NodeOut { y: best, z: zs, gi: best_gi })
    };

    let outs: Vec<NodeOut> =
        (0..space.node_count()).into_par_iter().map(node_result).collect::<Result<_>>()?;

    let mut y = Vec::with_capacity(outs.len());
    let mut z = Vec::with_capacity(outs.len() * d);
    let mut argmax = Vec::with_capacity(outs.len());
    for o in outs {
        y.push(o.y);
        z.extend_from_slice(&o.z[..d]);
        argmax.push(o.gi);
    }
    Ok(StepOutput { y, z, argmax })
}

fn g_term<D: ScalarDriver + ?Sized>(
    gen: &D,
    q: &QueryPoint,
    y: f64,
    z: &[f64],
    gamma: &DMatrix<f64>,
    d: usize,
    dt: f64,
) -> Result<f64> {
    if gen.g_is_zero() {
        return Ok(0.0);
    }
    let mut acc = 0.0;
    for i in 0..d {
        for j in i..d {
            let g = gen.g(q, y, z, i, j)?;
            let w = if i == j { 1.0 } else { 2.0 };
            acc += w * g * gamma[(i, j)];
        }
    }
    Ok(acc * dt)
}

fn at_node(idx: usize, x: &[f64], e: Error) -> Error {
    Error::Solver(format!("node {idx} (x = {x:?}): {e}"))
}

fn at_node_gamma(idx: usize, x: &[f64], gi: usize, e: Error) -> Error {
    Error::Solver(format!("node {idx} (x = {x:?}), gamma {gi}: {e}"))
}

/// Standalone one-step operator; builds the propagator on the fly.
#[allow(clippy::too_many_arguments)]
pub fn step_backward<D: ScalarDriver + ?Sized>(
    m: usize,
    next_y: &[f64],
    gen: &D,
    dynamics: &SdeCoefficients,
    grid: &GridSpec,
    gammas: &[DMatrix<f64>],
    rule: &QuadratureRule,
    cfg: &SolveConfig,
) -> Result<StepOutput> {
    for v in next_y {
        if !v.is_finite() {
            return Err(Error::InvalidInput("next slice contains non-finite values".into()));
        }
    }
    let prop = Propagator::new(&grid.space, grid.dt(), rule, gammas, cfg.moment_match)?;
    let next_lip = grid.space.max_adjacent_slope(next_y);
    let shared = build_shared(&prop, dynamics, grid, m)?;
    step_backward_with(m, next_y, next_lip, gen, dynamics, grid, &prop, cfg, shared.as_ref())
}

fn build_shared(
    prop: &Propagator,
    dynamics: &SdeCoefficients,
    grid: &GridSpec,
    m: usize,
) -> Result<Option<SharedStep>> {
    if !dynamics.is_state_independent() {
        return Ok(None);
    }
    let k = grid.space.dim();
    let t = grid.time.node(m);
    let mut x0 = vec![0.0; k];
    grid.space.coords(0, &mut x0);
    let mut ev = DynamicsEval::default();
    dynamics.eval_at(t, &x0, &mut ev)?;
    let mut per_gamma = Vec::with_capacity(prop.gamma_count());
    for gi in 0..prop.gamma_count() {
        let mut drift = vec![0.0; k];
        dynamics.drift_for_gamma(&ev, prop.gamma(gi), grid.dt(), &mut drift);
        let mut prep = PreparedStep::default();
        prop.prepare(&x0, &drift, &ev.sigma, gi, &mut prep);
        per_gamma.push((drift, prep));
    }
    Ok(Some(SharedStep { sigma: ev.sigma, per_gamma }))
}

/// Full backward sweep from the terminal slice to t_start; fields stored at
/// every time node.
pub fn solve_scalar<D: ScalarDriver + ?Sized>(
    gen: &D,
    dynamics: &SdeCoefficients,
    terminal: Terminal,
    grid: &GridSpec,
    gammas: &[DMatrix<f64>],
    rule: &QuadratureRule,
    cfg: &SolveConfig,
) -> Result<ScalarSolution> {
    solve_scalar_range(gen, dynamics, terminal, grid, gammas, rule, cfg, 0, grid.time.steps)
        .map(|(y, z, argmax)| ScalarSolution { y, z, argmax, grid: grid.clone() })
}

/// Backward sweep restricted to time nodes [m_lo, m_hi]; slices outside the
/// range are left at zero. The returned fields still span the full grid.
#[allow(clippy::too_many_arguments)]
pub(crate) fn solve_scalar_range<D: ScalarDriver + ?Sized>(
    gen: &D,
    dynamics: &SdeCoefficients,
    terminal: Terminal,
    grid: &GridSpec,
    gammas: &[DMatrix<f64>],
    rule: &QuadratureRule,
    cfg: &SolveConfig,
    m_lo: usize,
    m_hi: usize,
) -> Result<(crate::grid::ValueField, crate::grid::ValueField, Vec<u16>)> {
    if let Implicitness::Explicit = cfg.implicitness {
        if cfg.l_declared * grid.dt() >= 1.0 {
            return Err(Error::Config(format!(
                "explicit policy needs dt*L < 1, got dt = {}, L = {}",
                grid.dt(),
                cfg.l_declared
            )));
        }
    }
    let space = &grid.space;
    let nodes = space.node_count();
    let d = dynamics.d;
    let terminal_slice: Vec<f64> = match terminal {
        Terminal::Expression(phi) => {
            let mut out = vec![0.0; nodes];
            let mut x = vec![0.0; space.dim()];
            for (idx, slot) in out.iter_mut().enumerate() {
                space.coords(idx, &mut x);
                *slot = phi.eval(&EvalContext::new(0.0, &x, &[], &[]))?;
            }
            out
        }
        Terminal::Slice(s) => {
            if s.len() != nodes {
                return Err(Error::InvalidInput(format!(
                    "terminal slice has {} entries, grid has {nodes} nodes",
                    s.len()
                )));
            }
            s.to_vec()
        }
    };

    let mut y = crate::grid::ValueField::zeros(grid.time, space.clone(), 1);
    let mut z = crate::grid::ValueField::zeros(grid.time, space.clone(), d);
    let mut argmax = vec![0u16; grid.time.nodes() * nodes];
    y.set_slice(m_hi, 0, &terminal_slice);

    // terminal Z from the terminal slice's own gradient
    {
        let t = grid.time.node(m_hi);
        let mut ev = DynamicsEval::default();
        let mut zterm = vec![0.0; nodes * d];
        let mut x = vec![0.0; space.dim()];
        let mut grad = [0.0f64; MAX_K];
        for idx in 0..nodes {
            space.coords(idx, &mut x);
            dynamics.eval_at(t, &x, &mut ev)?;
            slice_gradient(space, &terminal_slice, idx, &mut grad[..space.dim()]);
            for b in 0..d {
                let mut acc = 0.0;
                for a in 0..space.dim() {
                    acc += ev.sigma[a * d + b] * grad[a];
                }
                zterm[idx * d + b] = acc;
            }
        }
        for b in 0..d {
            let col: Vec<f64> = (0..nodes).map(|i| zterm[i * d + b]).collect();
            z.set_slice(m_hi, b, &col);
        }
    }

    let prop = Propagator::new(space, grid.dt(), rule, gammas, cfg.moment_match)?;
    let mut current = terminal_slice;
    let mut current_lip = space.max_adjacent_slope(&current);
    for m in (m_lo..m_hi).rev() {
        let shared = build_shared(&prop, dynamics, grid, m)?;
        let out = step_backward_with(
            m,
            &current,
            current_lip,
            gen,
            dynamics,
            grid,
            &prop,
            cfg,
            shared.as_ref(),
        )?;
        y.set_slice(m, 0, &out.y);
        for b in 0..d {
            let col: Vec<f64> = (0..nodes).map(|i| out.z[i * d + b]).collect();
            z.set_slice(m, b, &col);
        }
        argmax[m * nodes..(m + 1) * nodes].copy_from_slice(&out.argmax);
        current = out.y;
        current_lip = y.slice_lipschitz(m, 0);
    }
    Ok((y, z, argmax))
}

/// Path-sampled K: along each stored path,
/// ΔK_m = Y(t_{m+1}, X_{m+1}) − Y(t_m, X_m) + f·Δt + Σ g_ij γ_ij Δt − ⟨Z, ΔB⟩,
/// with K_0 = 0.
#[derive(Debug, Clone)]
pub struct KPaths {
    /// Per path, the sequence ΔK_m.
    pub increments: Vec<Vec<f64>>,
    /// K_T per path.
    pub terminal: Vec<f64>,
    pub mean_terminal: f64,
    /// Largest positive increment over all paths and steps.
    pub max_increment: f64,
}

pub fn extract_k_along_paths<D: ScalarDriver + ?Sized>(
    sol: &ScalarSolution,
    bundle: &PathBundle,
    gen: &D,
    dynamics: &SdeCoefficients,
) -> Result<KPaths> {
    if bundle.times != sol.grid.time {
        return Err(Error::InvalidInput("path bundle time grid does not match the solution grid".into()));
    }
    let d = dynamics.d;
    let dt = sol.grid.time.dt();
    let steps = sol.grid.time.steps;
    let per_path = |p: usize| -> Result<Vec<f64>> {
        let mut incs = Vec::with_capacity(steps);
        let mut z = vec![0.0f64; d];
        for m in 0..steps {
            let x_now = bundle.state(p, m);
            let x_next = bundle.state(p, m + 1);
            let y_now = sol.y.interpolate(m, 0, x_now);
            let y_next = sol.y.interpolate(m + 1, 0, x_next);
            for (b, slot) in z.iter_mut().enumerate() {
                *slot = sol.z.interpolate(m, b, x_now);
            }
            let t = sol.grid.time.node(m);
            let q = QueryPoint { m, t, x: x_now, node: None };
            let f_val = gen.f(&q, y_now, &z)?;
            let gterm = g_term(gen, &q, y_now, &z, bundle.gamma(p, m), d, dt)?;
            let db = bundle.increment(p, m);
            let zdb: f64 = z.iter().zip(db).map(|(a, b)| a * b).sum();
            incs.push(y_next - y_now + f_val * dt + gterm - zdb);
        }
        Ok(incs)
    };
    let increments: Vec<Vec<f64>> =
        (0..bundle.paths).into_par_iter().map(per_path).collect::<Result<_>>()?;
    let terminal: Vec<f64> = increments.iter().map(|incs| incs.iter().sum()).collect();
    let mean_terminal = terminal.iter().sum::<f64>() / terminal.len().max(1) as f64;
    let max_increment =
        increments.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(KPaths { increments, terminal, mean_terminal, max_increment })
}

/// Continuous dependence of the scalar solution on its data: solves two
/// instances sharing dynamics and grid, and reports the field distance at
/// t = 0 against the terminal and driver distances.
#[derive(Debug, Clone, serde::Serialize)]
pub struct StabilityReport {
    pub field_distance: f64,
    pub terminal_distance: f64,
    pub driver_distance: f64,
    /// field distance / (terminal distance + T·driver distance); 0 when the
    /// perturbation vanishes.
    pub ratio: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn scalar_stability_check<D1, D2>(
    gen1: &D1,
    terminal1: Terminal,
    gen2: &D2,
    terminal2: Terminal,
    dynamics: &SdeCoefficients,
    grid: &GridSpec,
    gammas: &[DMatrix<f64>],
    rule: &QuadratureRule,
    cfg: &SolveConfig,
) -> Result<StabilityReport>
where
    D1: ScalarDriver + ?Sized,
    D2: ScalarDriver + ?Sized,
{
    let sol1 = solve_scalar(gen1, dynamics, terminal1, grid, gammas, rule, cfg)?;
    let sol2 = solve_scalar(gen2, dynamics, terminal2, grid, gammas, rule, cfg)?;
    let nodes = grid.space.node_count();
    let mut field_distance = 0.0f64;
    for idx in 0..nodes {
        field_distance = field_distance.max((sol1.y.value(0, 0, idx) - sol2.y.value(0, 0, idx)).abs());
    }
    let steps = grid.time.steps;
    let mut terminal_distance = 0.0f64;
    for idx in 0..nodes {
        terminal_distance =
            terminal_distance.max((sol1.y.value(steps, 0, idx) - sol2.y.value(steps, 0, idx)).abs());
    }
    // driver distance along solution 2, sampled on the grid
    let d = dynamics.d;
    let mut driver_distance = 0.0f64;
    let mut x = vec![0.0; grid.space.dim()];
    let mut z = vec![0.0; d];
    for m in 0..=steps {
        let t = grid.time.node(m);
        for idx in 0..nodes {
            grid.space.coords(idx, &mut x);
            let yv = sol2.y.value(m, 0, idx);
            for (b, slot) in z.iter_mut().enumerate() {
                *slot = sol2.z.value(m, b, idx);
            }
            let q = QueryPoint { m, t, x: &x, node: Some(idx) };
            let mut dist = (gen1.f(&q, yv, &z)? - gen2.f(&q, yv, &z)?).abs();
            if !(gen1.g_is_zero() && gen2.g_is_zero()) {
                for i in 0..d {
                    for j in 0..d {
                        dist += (gen1.g(&q, yv, &z, i, j)? - gen2.g(&q, yv, &z, i, j)?).abs();
                    }
                }
            }
            driver_distance = driver_distance.max(dist);
        }
    }
    let horizon = grid.time.t_end - grid.time.t_start;
    let denom = terminal_distance + horizon * driver_distance;
    let ratio = if denom > 0.0 { field_distance / denom } else { 0.0 };
    Ok(StabilityReport { field_distance, terminal_distance, driver_distance, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::VarSpace;
    use crate::forward::{InitialState, ScenarioPolicy};
    use crate::grid::GridSpec;
    use crate::sublinear::GammaSet;
    use approx::assert_relative_eq;

    fn phi(src: &str) -> Expr {
        Expr::parse(src, &VarSpace::terminal(1)).unwrap()
    }

    fn gen_expr(src: &str) -> Expr {
        Expr::parse(src, &VarSpace::generator(1, 1, 1)).unwrap()
    }

    fn setup(nodes: usize, steps: usize) -> (GridSpec, Vec<DMatrix<f64>>, QuadratureRule) {
        let grid = GridSpec::uniform_1d(-6.0, 6.0, nodes, 0.0, 1.0, steps).unwrap();
        let gammas = GammaSet::interval(1.0, 4.0).unwrap().discretize(9).unwrap();
        let rule = QuadratureRule::gauss_hermite(1, 7).unwrap();
        (grid, gammas, rule)
    }

    #[test]
    fn one_step_linear_terminal_is_invariant() {
        let (grid, gammas, rule) = setup(101, 100);
        let dynamics = SdeCoefficients::standard_1d();
        let gen = ScalarGenerator::zero(1);
        let next: Vec<f64> =
            (0..grid.space.node_count()).map(|i| grid.space.axis(0).node(i)).collect();
        let out = step_backward(
            grid.time.steps - 1,
            &next,
            &gen,
            &dynamics,
            &grid,
            &gammas,
            &rule,
            &SolveConfig::default(),
        )
        .unwrap();
        for idx in 10..grid.space.node_count() - 10 {
            assert_relative_eq!(out.y[idx], next[idx], epsilon = 1e-12);
        }
    }

    #[test]
    fn one_step_quadratic_gains_sup_variance() {
        let grid = GridSpec::uniform_1d(-6.0, 6.0, 240, 0.0, 0.01, 1).unwrap();
        let gammas = GammaSet::interval(1.0, 4.0).unwrap().discretize(9).unwrap();
        let rule = QuadratureRule::gauss_hermite(1, 7).unwrap();
        let dynamics = SdeCoefficients::standard_1d();
        let gen = ScalarGenerator::zero(1);
        let next: Vec<f64> =
            (0..grid.space.node_count()).map(|i| grid.space.axis(0).node(i).powi(2)).collect();
        let out = step_backward(0, &next, &gen, &dynamics, &grid, &gammas, &rule, &SolveConfig::default())
            .unwrap();
        for idx in 40..grid.space.node_count() - 40 {
            let x = grid.space.axis(0).node(idx);
            assert!((out.y[idx] - (x * x + 4.0 * 0.01)).abs() < 1e-6, "node {idx}");
            assert_eq!(out.argmax[idx], 8, "sup should pick the largest gamma");
        }
    }

    #[test]
    fn one_step_pure_drift_generator() {
        let (grid, gammas, rule) = setup(64, 100);
        let dynamics = SdeCoefficients::standard_1d();
        let gen = ScalarGenerator::from_f(1, gen_expr("1"));
        let next = vec![0.0; grid.space.node_count()];
        let out = step_backward(0, &next, &gen, &dynamics, &grid, &gammas, &rule, &SolveConfig::default())
            .unwrap();
        for v in &out.y {
            assert_relative_eq!(*v, grid.dt(), epsilon = 1e-14);
        }
    }

    #[test]
    fn g_heat_value_and_z_field() {
        // domain wide enough that the artificial-boundary layer stays below
        // the 2% consistency band on the interior half
        let grid = GridSpec::uniform_1d(-10.0, 10.0, 401, 0.0, 1.0, 100).unwrap();
        let gammas = GammaSet::interval(1.0, 4.0).unwrap().discretize(9).unwrap();
        let rule = QuadratureRule::gauss_hermite(1, 7).unwrap();
        let dynamics = SdeCoefficients::standard_1d();
        let gen = ScalarGenerator::zero(1);
        let sol = solve_scalar(
            &gen,
            &dynamics,
            Terminal::Expression(&phi("x1^2")),
            &grid,
            &gammas,
            &rule,
            &SolveConfig::default(),
        )
        .unwrap();
        let mid = grid.space.node_count() / 2;
        // u(0, 0) = σ̄²·T for φ = x²
        assert_relative_eq!(sol.y.value(0, 0, mid), 4.0, max_relative = 0.02);
        // Z = σᵀ·2x on the interior half
        let quarter = grid.space.node_count() / 4;
        for idx in (quarter..=3 * quarter).step_by(7) {
            let x = grid.space.axis(0).node(idx);
            if x.abs() > 0.5 {
                assert_relative_eq!(sol.z.value(0, 0, idx), 2.0 * x, max_relative = 0.02);
            }
        }
        // terminal consistency is exact on nodes
        for idx in 0..grid.space.node_count() {
            let x = grid.space.axis(0).node(idx);
            assert_eq!(sol.y.value(grid.time.steps, 0, idx), x * x);
        }
    }

    #[test]
    fn g_heat_concave_uses_lower_volatility() {
        let (grid, gammas, rule) = setup(201, 100);
        let dynamics = SdeCoefficients::standard_1d();
        let gen = ScalarGenerator::zero(1);
        let sol = solve_scalar(
            &gen,
            &dynamics,
            Terminal::Expression(&phi("-x1^2")),
            &grid,
            &gammas,
            &rule,
            &SolveConfig::default(),
        )
        .unwrap();
        let mid = grid.space.node_count() / 2;
        assert_relative_eq!(sol.y.value(0, 0, mid), -1.0, max_relative = 0.02);
        assert_eq!(sol.argmax_at(0, mid), 0);
    }

    #[test]
    fn linear_driver_grows_exponentially() {
        let (grid, gammas, rule) = setup(64, 200);
        let dynamics = SdeCoefficients::standard_1d();
        let gen = ScalarGenerator::from_f(1, gen_expr("y1"));
        let sol = solve_scalar(
            &gen,
            &dynamics,
            Terminal::Expression(&phi("x1")),
            &grid,
            &gammas,
            &rule,
            &SolveConfig::with_lipschitz(1.0),
        )
        .unwrap();
        // u(0, x) = x·e for u_t + u = 0 with linear data (u_xx = 0)
        let idx = 40;
        let x = grid.space.axis(0).node(idx);
        assert_relative_eq!(sol.y.value(0, 0, idx), x * std::f64::consts::E, max_relative = 0.01);
    }

    #[test]
    fn singleton_gamma_reduces_to_classical_heat() {
        let grid = GridSpec::uniform_1d(-6.0, 6.0, 201, 0.0, 1.0, 100).unwrap();
        let gammas = GammaSet::singleton(1.5).unwrap().discretize(2).unwrap();
        assert_eq!(gammas.len(), 1);
        let rule = QuadratureRule::gauss_hermite(1, 7).unwrap();
        let dynamics = SdeCoefficients::standard_1d();
        let gen = ScalarGenerator::zero(1);
        let sol = solve_scalar(
            &gen,
            &dynamics,
            Terminal::Expression(&phi("x1^2")),
            &grid,
            &gammas,
            &rule,
            &SolveConfig::default(),
        )
        .unwrap();
        let mid = grid.space.node_count() / 2;
        assert_relative_eq!(sol.y.value(0, 0, mid), 1.5, max_relative = 0.02);
    }

    #[test]
    fn one_step_operator_is_monotone() {
        // nodes whose quadrature support stays inside the box see exact
        // one-step comparison; f non-decreasing in y, dt·L < 1
        let (grid, gammas, rule) = setup(64, 100);
        let dynamics = SdeCoefficients::standard_1d();
        let gen = ScalarGenerator::from_f(1, gen_expr("0.5*y1"));
        let cfg = SolveConfig::with_lipschitz(0.5);
        let n = grid.space.node_count();
        let a: Vec<f64> = (0..n).map(|i| (grid.space.axis(0).node(i) * 2.3).sin() + 0.4).collect();
        let b: Vec<f64> = (0..n)
            .map(|i| {
                let x = grid.space.axis(0).node(i);
                (x * 2.3).sin() + 0.4 - 0.3 * (x * 5.1).cos().powi(2)
            })
            .collect();
        let sa = step_backward(0, &a, &gen, &dynamics, &grid, &gammas, &rule, &cfg).unwrap();
        let sb = step_backward(0, &b, &gen, &dynamics, &grid, &gammas, &rule, &cfg).unwrap();
        let reach = (4.0f64 * grid.dt()).sqrt() * 4.0 / grid.space.axis(0).spacing();
        let margin = reach.ceil() as usize + 1;
        for idx in margin..n - margin {
            assert!(sa.y[idx] >= sb.y[idx] - 1e-12, "monotonicity violated at node {idx}");
        }
    }

    #[test]
    fn k_extraction_classical_case_vanishes_under_refinement() {
        // singleton Γ: K ≡ 0 classically; max |ΔK| halves when Δt and Δx² halve
        let dynamics = SdeCoefficients::standard_1d();
        let gen = ScalarGenerator::zero(1);
        let rule = QuadratureRule::gauss_hermite(1, 7).unwrap();
        let gammas = GammaSet::singleton(1.0).unwrap().discretize(2).unwrap();
        let mut maxes = Vec::new();
        for (nodes, steps) in [(72, 50), (101, 100)] {
            let grid = GridSpec::uniform_1d(-6.0, 6.0, nodes, 0.0, 1.0, steps).unwrap();
            let sol = solve_scalar(
                &gen,
                &dynamics,
                Terminal::Expression(&phi("x1^2")),
                &grid,
                &gammas,
                &rule,
                &SolveConfig::default(),
            )
            .unwrap();
            let bundle = crate::forward::simulate_paths(
                &dynamics,
                &InitialState::point(&[0.0]),
                &grid.time,
                &gammas,
                &ScenarioPolicy::Fixed(0),
                200,
                17,
            )
            .unwrap();
            let k = extract_k_along_paths(&sol, &bundle, &gen, &dynamics).unwrap();
            maxes.push(k.increments.iter().flatten().map(|v| v.abs()).fold(0.0f64, f64::max));
        }
        assert!(maxes[1] < 0.75 * maxes[0], "max |ΔK| did not shrink: {maxes:?}");
    }

    #[test]
    fn k_under_suboptimal_scenario_drifts_down() {
        let (grid, gammas, rule) = setup(201, 100);
        let dynamics = SdeCoefficients::standard_1d();
        let gen = ScalarGenerator::zero(1);
        let sol = solve_scalar(
            &gen,
            &dynamics,
            Terminal::Expression(&phi("x1^2")),
            &grid,
            &gammas,
            &rule,
            &SolveConfig::default(),
        )
        .unwrap();
        let bundle = crate::forward::simulate_paths(
            &dynamics,
            &InitialState::point(&[0.0]),
            &grid.time,
            &gammas,
            &ScenarioPolicy::Fixed(0),
            400,
            7,
        )
        .unwrap();
        let k = extract_k_along_paths(&sol, &bundle, &gen, &dynamics).unwrap();
        // K_T ≈ −(σ̄² − σ̲²)·T = −3 along the γ = σ_min² scenario
        assert!((k.mean_terminal + 3.0).abs() < 0.3, "mean K_T = {}", k.mean_terminal);
        // no positive increments beyond the discretization slack
        let tol = 10.0 * grid.slack_scale();
        assert!(k.max_increment <= tol, "max ΔK = {} > {tol}", k.max_increment);
    }

    #[test]
    fn stability_constant_terminal_shift() {
        let (grid, gammas, rule) = setup(101, 50);
        let dynamics = SdeCoefficients::standard_1d();
        let gen = ScalarGenerator::zero(1);
        let report = scalar_stability_check(
            &gen,
            Terminal::Expression(&phi("x1^2")),
            &gen,
            Terminal::Expression(&phi("x1^2 + 0.5")),
            &dynamics,
            &grid,
            &gammas,
            &rule,
            &SolveConfig::default(),
        )
        .unwrap();
        // constants propagate exactly: distance = 0.5, ratio = 1
        assert_relative_eq!(report.field_distance, 0.5, epsilon = 1e-10);
        assert_relative_eq!(report.ratio, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn stability_identical_instances() {
        let (grid, gammas, rule) = setup(64, 25);
        let dynamics = SdeCoefficients::standard_1d();
        let gen = ScalarGenerator::from_f(1, gen_expr("y1 - z1"));
        let cfg = SolveConfig::with_lipschitz(2.0);
        let report = scalar_stability_check(
            &gen,
            Terminal::Expression(&phi("abs(x1)")),
            &gen,
            Terminal::Expression(&phi("abs(x1)")),
            &dynamics,
            &grid,
            &gammas,
            &rule,
            &cfg,
        )
        .unwrap();
        assert_eq!(report.field_distance, 0.0);
        assert_eq!(report.ratio, 0.0);
    }

    #[test]
    fn driver_perturbation_bounded_over_shrinking_sequence() {
        let (grid, gammas, rule) = setup(64, 50);
        let dynamics = SdeCoefficients::standard_1d();
        let cfg = SolveConfig::with_lipschitz(1.0);
        let mut ratios = Vec::new();
        for eps in [1.0, 0.1, 0.01] {
            let gen1 = ScalarGenerator::from_f(1, gen_expr("y1"));
            let perturbed = format!("y1 + {eps}");
            let gen2 = ScalarGenerator::from_f(1, gen_expr(&perturbed));
            let report = scalar_stability_check(
                &gen1,
                Terminal::Expression(&phi("x1")),
                &gen2,
                Terminal::Expression(&phi("x1")),
                &dynamics,
                &grid,
                &gammas,
                &rule,
                &cfg,
            )
            .unwrap();
            // constant driver shift: |Y1 − Y2|(0) = ε(e^T − 1) ≤ ε·T·e^{LT}
            let bound = eps * 1.0 * (1.0f64).exp() * 1.05;
            assert!(report.field_distance <= bound, "distance {} > {bound}", report.field_distance);
            ratios.push(report.field_distance / eps);
        }
        let (lo, hi) = ratios.iter().fold((f64::MAX, f64::MIN), |(l, h), r| (l.min(*r), h.max(*r)));
        assert!(hi / lo < 1.25, "ratios vary too much: {ratios:?}");
    }

    #[test]
    fn explicit_policy_rejects_large_dt_lipschitz_product() {
        let grid = GridSpec::uniform_1d(-1.0, 1.0, 16, 0.0, 1.0, 2).unwrap();
        let gammas = GammaSet::interval(1.0, 4.0).unwrap().discretize(3).unwrap();
        let rule = QuadratureRule::gauss_hermite(1, 3).unwrap();
        let dynamics = SdeCoefficients::standard_1d();
        let gen = ScalarGenerator::from_f(1, gen_expr("3*y1"));
        let err = solve_scalar(
            &gen,
            &dynamics,
            Terminal::Expression(&phi("x1")),
            &grid,
            &gammas,
            &rule,
            &SolveConfig::with_lipschitz(3.0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
