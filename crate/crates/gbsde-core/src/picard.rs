//! Component-wise Picard iteration for n-dimensional G-BSDE systems.
//!
//! One iterate solves n scalar equations, each with every y-slot except its
//! own frozen at the previous iterate's field; the solution map contracts
//! on short intervals, and a backward sweep over intervals stitches local
//! solutions into a global one. A direct coupled recursion cross-checks the
//! fixed point, and sampled quasi-monotonicity plus field ordering realize
//! the comparison theorem at grid scale.

use crate::error::{Error, Result};
use crate::expr::{EvalContext, Expr};
use crate::forward::{PathBundle, SdeCoefficients};
use crate::grid::{GridSpec, ValueField};
use crate::lattice::{Propagator, MAX_K};
use crate::scalar::{
    self, KPaths, QueryPoint, ScalarDriver, ScalarSolution, SolveConfig, Terminal,
};
use crate::sublinear::QuadratureRule;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

/// The n-dimensional problem: generators f^l, g^l_ij (diagonal in z by
/// construction of the expression language), terminal map φ^l, forward
/// dynamics, and the declared constants.
#[derive(Debug, Clone)]
pub struct SystemSpec {
    pub n: usize,
    pub k: usize,
    pub d: usize,
    /// f^l(t, x, y, z^l), one per component.
    f: Vec<Expr>,
    /// Per component, d×d mirrored g^l_ij.
    g: Vec<Vec<Expr>>,
    g_zero: Vec<bool>,
    /// φ^l(x).
    terminal: Vec<Expr>,
    pub dynamics: SdeCoefficients,
    pub l_declared: f64,
    pub beta_declared: f64,
}

impl SystemSpec {
    pub fn new(
        n: usize,
        k: usize,
        d: usize,
        f: Vec<Expr>,
        g_upper: Vec<Vec<(usize, usize, Expr)>>,
        terminal: Vec<Expr>,
        dynamics: SdeCoefficients,
        l_declared: f64,
        beta_declared: f64,
    ) -> Result<Self> {
        if n == 0 || n > 16 {
            return Err(Error::Config(format!("component count n must be in 1..=16, got {n}")));
        }
        if d == 0 || d > 2 {
            return Err(Error::Config(format!("supported Brownian dimensions are 1 and 2, got {d}")));
        }
        if k == 0 || k > MAX_K {
            return Err(Error::Config(format!("state dimension must be in 1..={MAX_K}, got {k}")));
        }
        if f.len() != n || terminal.len() != n || g_upper.len() != n {
            return Err(Error::Config(format!(
                "component counts disagree: f = {}, g = {}, terminal = {}, n = {n}",
                f.len(),
                g_upper.len(),
                terminal.len()
            )));
        }
        if dynamics.k != k || dynamics.d != d {
            return Err(Error::Config("dynamics dimensions do not match the system".into()));
        }
        if !(beta_declared > 1.0) {
            return Err(Error::Config(format!("beta must exceed 1, got {beta_declared}")));
        }
        let mut g = Vec::with_capacity(n);
        let mut g_zero = Vec::with_capacity(n);
        for entries in g_upper {
            let mut block = vec![Expr::Const(0.0); d * d];
            for (i, j, e) in entries {
                if i > j || j >= d {
                    return Err(Error::Config(format!("g entry ({i},{j}) must satisfy i <= j < d = {d}")));
                }
                block[i * d + j] = e.clone();
                block[j * d + i] = e;
            }
            g_zero.push(block.iter().all(Expr::is_zero));
            g.push(block);
        }
        Ok(SystemSpec { n, k, d, f, g, g_zero, terminal, dynamics, l_declared, beta_declared })
    }

    pub fn f_expr(&self, l: usize) -> &Expr {
        &self.f[l]
    }

    pub fn g_expr(&self, l: usize, i: usize, j: usize) -> &Expr {
        &self.g[l][i * self.d + j]
    }

    pub fn terminal_expr(&self, l: usize) -> &Expr {
        &self.terminal[l]
    }

    /// Same system with every terminal map shifted by a constant.
    pub fn with_terminal_shift(&self, shift: f64) -> SystemSpec {
        SystemSpec {
            terminal: self
                .terminal
                .iter()
                .map(|e| Expr::Add(Box::new(e.clone()), Box::new(Expr::Const(shift))))
                .collect(),
            ..self.clone()
        }
    }

    /// Same system with every driver f^l shifted by a constant.
    pub fn with_driver_shift(&self, shift: f64) -> SystemSpec {
        SystemSpec {
            f: self
                .f
                .iter()
                .map(|e| Expr::Add(Box::new(e.clone()), Box::new(Expr::Const(shift))))
                .collect(),
            ..self.clone()
        }
    }

    /// Terminal slices φ^l on the grid nodes.
    pub fn terminal_slices(&self, grid: &GridSpec) -> Result<Vec<Vec<f64>>> {
        let nodes = grid.space.node_count();
        let mut out = Vec::with_capacity(self.n);
        let mut x = vec![0.0; self.k];
        for l in 0..self.n {
            let mut slice = vec![0.0; nodes];
            for (idx, slot) in slice.iter_mut().enumerate() {
                grid.space.coords(idx, &mut x);
                *slot = self.terminal[l].eval(&EvalContext::new(0.0, &x, &[], &[]))?;
            }
            out.push(slice);
        }
        Ok(out)
    }
}

/// Scalar view of component `l` with the other y-slots read from a frozen
/// field U: ψ^{l,U}(t, y, z) = ψ^l(t, U¹..U^{l−1}, y, U^{l+1}..Uⁿ, z).
pub struct FrozenGenerator<'a> {
    spec: &'a SystemSpec,
    component: usize,
    u: &'a ValueField,
    /// Time-node range on which U carries data.
    valid: (usize, usize),
}

impl<'a> FrozenGenerator<'a> {
    fn y_vector(&self, q: &QueryPoint, y: f64, buf: &mut [f64]) -> Result<()> {
        if q.m < self.valid.0 || q.m > self.valid.1 {
            return Err(Error::Field(format!(
                "frozen field queried at time node {} outside its range [{}, {}]",
                q.m, self.valid.0, self.valid.1
            )));
        }
        for j in 0..self.spec.n {
            buf[j] = if j == self.component {
                y
            } else if let Some(node) = q.node {
                self.u.value(q.m, j, node)
            } else {
                self.u.interpolate(q.m, j, q.x)
            };
        }
        Ok(())
    }
}

impl<'a> ScalarDriver for FrozenGenerator<'a> {
    fn f(&self, q: &QueryPoint, y: f64, z: &[f64]) -> Result<f64> {
        let mut yv = [0.0f64; 16];
        let yv = &mut yv[..self.spec.n];
        self.y_vector(q, y, yv)?;
        self.spec.f[self.component].eval(&EvalContext::new(q.t, q.x, yv, z))
    }

    fn g(&self, q: &QueryPoint, y: f64, z: &[f64], i: usize, j: usize) -> Result<f64> {
        let mut yv = [0.0f64; 16];
        let yv = &mut yv[..self.spec.n];
        self.y_vector(q, y, yv)?;
        self.spec.g[self.component][i * self.spec.d + j].eval(&EvalContext::new(q.t, q.x, yv, z))
    }

    fn g_is_zero(&self) -> bool {
        self.spec.g_zero[self.component]
    }
}

/// The scalar generator for component `l` with off-components frozen at U.
pub fn frozen_generator<'a>(
    spec: &'a SystemSpec,
    l: usize,
    u: &'a ValueField,
    valid: (usize, usize),
) -> FrozenGenerator<'a> {
    FrozenGenerator { spec, component: l, u, valid }
}

/// One Picard iterate's diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct PicardIterRecord {
    pub iterate: usize,
    /// Sup over interval time nodes, grid nodes and components of
    /// |U^(i+1) − U^(i)|.
    pub residual: f64,
    /// r_{i+1} / r_i, absent for the first iterate.
    pub ratio: Option<f64>,
    /// Time-integrated proxy (Σ_m Δt·sup_node|ΔU|^β)^{1/β}.
    pub mbeta_residual: f64,
}

/// Knobs of the fixed-point loop.
#[derive(Debug, Clone, Copy)]
pub struct PicardConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// Two consecutive ratios at or above this signal a too-long interval.
    pub contraction_guard: f64,
    pub solve: SolveConfig,
}

impl Default for PicardConfig {
    fn default() -> Self {
        PicardConfig { tol: 1e-8, max_iter: 50, contraction_guard: 0.95, solve: SolveConfig::default() }
    }
}

/// Multi-component solution fields.
#[derive(Debug, Clone)]
pub struct SystemSolution {
    /// n channels.
    pub y: ValueField,
    /// n·d channels, channel l·d + b.
    pub z: ValueField,
    /// Maximizing scenario per (time node, component, space node).
    pub argmax: Vec<u16>,
    pub grid: GridSpec,
    pub n: usize,
    pub d: usize,
}

impl SystemSolution {
    fn zeros(spec: &SystemSpec, grid: &GridSpec) -> Self {
        SystemSolution {
            y: ValueField::zeros(grid.time, grid.space.clone(), spec.n),
            z: ValueField::zeros(grid.time, grid.space.clone(), spec.n * spec.d),
            argmax: vec![0; grid.time.nodes() * spec.n * grid.space.node_count()],
            grid: grid.clone(),
            n: spec.n,
            d: spec.d,
        }
    }

    pub fn argmax_at(&self, m: usize, l: usize, node: usize) -> usize {
        let nodes = self.grid.space.node_count();
        self.argmax[(m * self.n + l) * nodes + node] as usize
    }

    /// Copies one component into a scalar solution (fields plus argmax).
    pub fn component(&self, l: usize) -> ScalarSolution {
        let nodes = self.grid.space.node_count();
        let mut y = ValueField::zeros(self.grid.time, self.grid.space.clone(), 1);
        let mut z = ValueField::zeros(self.grid.time, self.grid.space.clone(), self.d);
        let mut argmax = vec![0u16; self.grid.time.nodes() * nodes];
        for m in 0..self.grid.time.nodes() {
            y.set_slice(m, 0, self.y.slice(m, l));
            for b in 0..self.d {
                z.set_slice(m, b, self.z.slice(m, l * self.d + b));
            }
            argmax[m * nodes..(m + 1) * nodes].copy_from_slice(
                &self.argmax[(m * self.n + l) * nodes..(m * self.n + l + 1) * nodes],
            );
        }
        ScalarSolution { y, z, argmax, grid: self.grid.clone() }
    }
}

/// Local solve on the time-node range [m_lo, m_hi]: Picard iteration from
/// U^(0) ≡ 0, one frozen scalar solve per component per iterate.
#[allow(clippy::too_many_arguments)]
pub fn picard_solve_local(
    spec: &SystemSpec,
    terminal: &[Vec<f64>],
    m_lo: usize,
    m_hi: usize,
    grid: &GridSpec,
    gammas: &[DMatrix<f64>],
    rule: &QuadratureRule,
    cfg: &PicardConfig,
) -> Result<(SystemSolution, Vec<PicardIterRecord>)> {
    if cfg.tol <= 0.0 {
        return Err(Error::Config("picard tolerance must be positive".into()));
    }
    if cfg.max_iter < 2 {
        return Err(Error::Config("picard needs max_iter >= 2".into()));
    }
    if terminal.len() != spec.n {
        return Err(Error::InvalidInput(format!(
            "terminal field has {} components, system has {}",
            terminal.len(),
            spec.n
        )));
    }
    let nodes = grid.space.node_count();
    let dt = grid.dt();
    let mut u_prev = ValueField::zeros(grid.time, grid.space.clone(), spec.n);
    let mut history: Vec<PicardIterRecord> = Vec::new();
    let mut bad_ratios = 0usize;

    for iterate in 1..=cfg.max_iter {
        let mut solution = SystemSolution::zeros(spec, grid);
        for l in 0..spec.n {
            let gen = frozen_generator(spec, l, &u_prev, (m_lo, m_hi));
            let (y, z, argmax) = scalar::solve_scalar_range(
                &gen,
                &spec.dynamics,
                Terminal::Slice(&terminal[l]),
                grid,
                gammas,
                rule,
                &cfg.solve,
                m_lo,
                m_hi,
            )?;
            for m in m_lo..=m_hi {
                solution.y.set_slice(m, l, y.slice(m, 0));
                for b in 0..spec.d {
                    solution.z.set_slice(m, l * spec.d + b, z.slice(m, b));
                }
                solution.argmax[(m * spec.n + l) * nodes..(m * spec.n + l + 1) * nodes]
                    .copy_from_slice(&argmax[m * nodes..(m + 1) * nodes]);
            }
        }

        // residual proxies over the working range
        let mut linf = 0.0f64;
        let mut mbeta_acc = 0.0f64;
        for m in m_lo..=m_hi {
            let mut slice_sup = 0.0f64;
            for node in 0..nodes {
                let mut norm_sq = 0.0;
                for l in 0..spec.n {
                    let diff = solution.y.value(m, l, node) - u_prev.value(m, l, node);
                    norm_sq += diff * diff;
                }
                slice_sup = slice_sup.max(norm_sq.sqrt());
            }
            linf = linf.max(slice_sup);
            mbeta_acc += dt * slice_sup.powf(spec.beta_declared);
        }
        let mbeta = mbeta_acc.powf(1.0 / spec.beta_declared);
        let ratio = history.last().map(|r: &PicardIterRecord| {
            if r.residual > 0.0 {
                linf / r.residual
            } else {
                0.0
            }
        });
        history.push(PicardIterRecord { iterate, residual: linf, ratio, mbeta_residual: mbeta });

        if linf < cfg.tol {
            return Ok((solution, history));
        }
        if let Some(r) = ratio {
            if r >= cfg.contraction_guard {
                bad_ratios += 1;
                if bad_ratios >= 2 {
                    return Err(Error::IntervalTooLong { ratio: r, iterate });
                }
            } else {
                bad_ratios = 0;
            }
        }
        u_prev = solution.y;
    }
    let last = history.last().unwrap();
    Err(Error::IntervalTooLong { ratio: last.ratio.unwrap_or(f64::NAN), iterate: last.iterate })
}

/// One interval of the global stitching plan.
#[derive(Debug, Clone, Serialize)]
pub struct IntervalRecord {
    pub m_lo: usize,
    pub m_hi: usize,
    pub h: f64,
    pub iterations: usize,
    pub final_residual: f64,
}

/// Interval layout, halving log and per-interval convergence histories.
#[derive(Debug, Clone, Serialize, Default)]
pub struct StitchPlan {
    pub intervals: Vec<IntervalRecord>,
    /// (m_lo, m_hi) pairs that failed contraction and were split.
    pub halvings: Vec<(usize, usize)>,
    pub history: Vec<IntervalHistory>,
}

#[derive(Debug, Clone, Serialize)]
pub struct IntervalHistory {
    pub interval: usize,
    pub records: Vec<PicardIterRecord>,
}

impl StitchPlan {
    /// Longest interval in the final plan.
    pub fn max_h(&self) -> f64 {
        self.intervals.iter().map(|r| r.h).fold(0.0, f64::max)
    }
}

/// Suggested initial interval count from the contraction heuristic
/// h·L ≤ 0.25.
pub fn suggested_interval_count(horizon: f64, lipschitz: f64) -> usize {
    ((horizon * lipschitz / 0.25).ceil() as usize).max(1)
}

/// Global solve: backward over intervals, each interval's left slice the
/// next one's terminal data; intervals failing contraction are halved.
#[allow(clippy::too_many_arguments)]
pub fn stitch_solve_global(
    spec: &SystemSpec,
    grid: &GridSpec,
    gammas: &[DMatrix<f64>],
    rule: &QuadratureRule,
    initial_m: usize,
    cfg: &PicardConfig,
) -> Result<(SystemSolution, StitchPlan)> {
    if initial_m < 1 {
        return Err(Error::Config("initial interval count must be at least 1".into()));
    }
    let steps = grid.time.steps;
    let m_eff = initial_m.min(steps);
    // breakpoints in time-node indices, right-to-left work order
    let mut boundaries: Vec<usize> = (0..=m_eff)
        .map(|i| (i as f64 * steps as f64 / m_eff as f64).round() as usize)
        .collect();
    boundaries.dedup();
    let mut stack: Vec<(usize, usize)> = boundaries
        .windows(2)
        .map(|w| (w[0], w[1]))
        .rev()
        .collect();
    // stack top = rightmost unsolved interval
    stack.reverse();

    let mut global = SystemSolution::zeros(spec, grid);
    let mut plan = StitchPlan::default();
    // terminal data of the rightmost interval
    let phi = spec.terminal_slices(grid)?;
    for l in 0..spec.n {
        global.y.set_slice(steps, l, &phi[l]);
    }

    while let Some((m_lo, m_hi)) = stack.pop() {
        // intervals are processed right to left, so the slice at m_hi is
        // always in place: φ for the first, a solved slice afterwards
        let terminal: Vec<Vec<f64>> =
            (0..spec.n).map(|l| global.y.slice(m_hi, l).to_vec()).collect();
        match picard_solve_local(spec, &terminal, m_lo, m_hi, grid, gammas, rule, cfg) {
            Ok((local, records)) => {
                for m in m_lo..=m_hi {
                    for l in 0..spec.n {
                        global.y.set_slice(m, l, local.y.slice(m, l));
                        for b in 0..spec.d {
                            global.z.set_slice(m, l * spec.d + b, local.z.slice(m, l * spec.d + b));
                        }
                    }
                }
                let nodes = grid.space.node_count();
                let lo = (m_lo * spec.n) * nodes;
                let hi = ((m_hi + 1) * spec.n) * nodes;
                global.argmax[lo..hi].copy_from_slice(&local.argmax[lo..hi]);
                let interval_index = plan.intervals.len();
                plan.intervals.push(IntervalRecord {
                    m_lo,
                    m_hi,
                    h: grid.time.node(m_hi) - grid.time.node(m_lo),
                    iterations: records.len(),
                    final_residual: records.last().map(|r| r.residual).unwrap_or(0.0),
                });
                plan.history.push(IntervalHistory { interval: interval_index, records });
            }
            Err(Error::IntervalTooLong { .. }) => {
                if m_hi - m_lo <= 1 {
                    return Err(Error::Solver(format!(
                        "contraction failed on a single-step interval [{m_lo}, {m_hi}]; \
                         the time grid cannot be refined further within this plan"
                    )));
                }
                plan.halvings.push((m_lo, m_hi));
                let mid = (m_lo + m_hi) / 2;
                stack.push((m_lo, mid));
                stack.push((mid, m_hi));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((global, plan))
}

/// Single backward sweep advancing all components simultaneously, the
/// y-coupling read explicitly from the next slice; an independent
/// discretization of the same fixed point used as a cross-check.
pub fn direct_coupled_solve(
    spec: &SystemSpec,
    grid: &GridSpec,
    gammas: &[DMatrix<f64>],
    rule: &QuadratureRule,
    cfg: &SolveConfig,
) -> Result<SystemSolution> {
    if let scalar::Implicitness::Explicit = cfg.implicitness {
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
    let k = spec.k;
    let d = spec.d;
    let n = spec.n;
    let dt = grid.dt();
    let steps = grid.time.steps;

    let mut solution = SystemSolution::zeros(spec, grid);
    let terminal = spec.terminal_slices(grid)?;
    for l in 0..n {
        solution.y.set_slice(steps, l, &terminal[l]);
    }
    let prop = Propagator::new(space, dt, rule, gammas, cfg.moment_match)?;
    let state_independent = spec.dynamics.is_state_independent();

    for m in (0..steps).rev() {
        let t = grid.time.node(m);
        let next: Vec<(&[f64], f64)> = (0..n)
            .map(|l| (solution.y.slice(m + 1, l), solution.y.slice_lipschitz(m + 1, l)))
            .collect();

        let shared = if state_independent {
            let mut x0 = vec![0.0; k];
            space.coords(0, &mut x0);
            let mut ev = crate::forward::DynamicsEval::default();
            spec.dynamics.eval_at(t, &x0, &mut ev)?;
            let mut per_gamma = Vec::with_capacity(prop.gamma_count());
            for gi in 0..prop.gamma_count() {
                let mut drift = vec![0.0; k];
                spec.dynamics.drift_for_gamma(&ev, prop.gamma(gi), dt, &mut drift);
                let mut prep = crate::lattice::PreparedStep::default();
                prop.prepare(&x0, &drift, &ev.sigma, gi, &mut prep);
                per_gamma.push((drift, prep));
            }
            Some((ev.sigma, per_gamma))
        } else {
            None
        };

        let node_out = |idx: usize| -> Result<(Vec<f64>, Vec<f64>, Vec<u16>)> {
            let mut x = [0.0f64; MAX_K];
            space.coords(idx, &mut x[..k]);
            let x = &x[..k];
            let mut local_ev = crate::forward::DynamicsEval::default();
            if shared.is_none() {
                spec.dynamics.eval_at(t, x, &mut local_ev)?;
            }
            let sigma: &[f64] = match &shared {
                Some((s, _)) => s,
                None => &local_ev.sigma,
            };
            // y-coupling from the next slice at this node
            let mut y_next = [0.0f64; 16];
            for l in 0..n {
                y_next[l] = next[l].0[idx];
            }
            let mut ys = vec![0.0f64; n];
            let mut zs = vec![0.0f64; n * d];
            let mut gis = vec![0u16; n];
            let mut grad = [0.0f64; MAX_K];
            let mut drift_buf = vec![0.0f64; k];
            let mut prep_buf = crate::lattice::PreparedStep::default();
            for l in 0..n {
                // Z^l from the next slice's gradient
                let mut z = [0.0f64; 8];
                {
                    let values = next[l].0;
                    let mut multi = [0usize; MAX_K];
                    space.multi_index(idx, &mut multi[..k]);
                    for a in 0..k {
                        let dx = space.axis(a).spacing();
                        let stride = space.stride(a);
                        let i = multi[a];
                        grad[a] = if i == 0 {
                            (values[idx + stride] - values[idx]) / dx
                        } else if i == space.axis(a).count - 1 {
                            (values[idx] - values[idx - stride]) / dx
                        } else {
                            (values[idx + stride] - values[idx - stride]) / (2.0 * dx)
                        };
                    }
                    for b in 0..d {
                        let mut acc = 0.0;
                        for a in 0..k {
                            acc += sigma[a * d + b] * grad[a];
                        }
                        z[b] = acc;
                    }
                }
                let z = &z[..d];
                let mut best = f64::NEG_INFINITY;
                let mut best_gi = 0u16;
                for gi in 0..prop.gamma_count() {
                    let (drift, prep): (&[f64], &crate::lattice::PreparedStep) = match &shared {
                        Some((_, pg)) => (&pg[gi].0, &pg[gi].1),
                        None => {
                            spec.dynamics.drift_for_gamma(&local_ev, prop.gamma(gi), dt, &mut drift_buf);
                            prop.prepare(x, &drift_buf, &local_ev.sigma, gi, &mut prep_buf);
                            (&drift_buf, &prep_buf)
                        }
                    };
                    let e = prop.expect(next[l].0, next[l].1, x, drift, prep);
                    let mut yv = [0.0f64; 16];
                    yv[..n].copy_from_slice(&y_next[..n]);
                    yv[l] = e;
                    let ctx = EvalContext::new(t, x, &yv[..n], z);
                    let f_val = spec.f[l].eval(&ctx)?;
                    let mut cand = e + f_val * dt;
                    if !spec.g_zero[l] {
                        let gamma = prop.gamma(gi);
                        for i in 0..d {
                            for j in i..d {
                                let g = spec.g[l][i * d + j].eval(&ctx)?;
                                let w = if i == j { 1.0 } else { 2.0 };
                                cand += w * g * gamma[(i, j)] * dt;
                            }
                        }
                    }
                    if !cand.is_finite() {
                        return Err(Error::Solver(format!(
                            "non-finite value at node {idx}, component {l}, gamma {gi}, t = {t}"
                        )));
                    }
                    if cand > best {
                        best = cand;
                        best_gi = gi as u16;
                    }
                }
                ys[l] = best;
                zs[l * d..(l + 1) * d].copy_from_slice(z);
                gis[l] = best_gi;
            }
            Ok((ys, zs, gis))
        };

        let outs: Vec<(Vec<f64>, Vec<f64>, Vec<u16>)> =
            (0..nodes).into_par_iter().map(node_out).collect::<Result<_>>()?;
        for l in 0..n {
            let ycol: Vec<f64> = outs.iter().map(|o| o.0[l]).collect();
            solution.y.set_slice(m, l, &ycol);
            for b in 0..d {
                let zcol: Vec<f64> = outs.iter().map(|o| o.1[l * d + b]).collect();
                solution.z.set_slice(m, l * d + b, &zcol);
            }
            for (idx, o) in outs.iter().enumerate() {
                solution.argmax[(m * n + l) * nodes + idx] = o.2[l];
            }
        }
    }
    Ok(solution)
}

/// Path-sampled K for one component of a system solution, the off-components
/// read from the solved field itself.
pub fn extract_component_k(
    spec: &SystemSpec,
    sol: &SystemSolution,
    l: usize,
    bundle: &PathBundle,
) -> Result<KPaths> {
    let scalar_view = sol.component(l);
    let gen = frozen_generator(spec, l, &sol.y, (0, sol.grid.time.steps));
    scalar::extract_k_along_paths(&scalar_view, bundle, &gen, &spec.dynamics)
}

/// Sampled quasi-monotonicity hypothesis plus field ordering.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonReport {
    pub hypothesis_samples: usize,
    pub hypothesis_violations: usize,
    pub terminal_violations: usize,
    /// Whether the solve-and-order part ran (hypotheses held).
    pub checked: bool,
    /// min over (t, x, l) of (Y^l − Ȳ^l); meaningful when `checked`.
    pub min_signed_gap: f64,
    pub epsilon_grid: f64,
    pub pass: bool,
}

/// Samples hypothesis (i) (quasi-monotonicity of the upper system's
/// generators against the lower's) and (ii) (terminal ordering), then — if
/// both hold — solves both systems and checks Y ≥ Ȳ up to grid slack
/// ε = c_cmp·(Δt + Δx).
#[allow(clippy::too_many_arguments)]
pub fn comparison_check(
    upper: &SystemSpec,
    lower: &SystemSpec,
    grid: &GridSpec,
    gammas: &[DMatrix<f64>],
    rule: &QuadratureRule,
    cfg: &PicardConfig,
    initial_m: usize,
    samples: usize,
    c_cmp: f64,
    seed: u64,
) -> Result<ComparisonReport> {
    if upper.n != lower.n || upper.k != lower.k || upper.d != lower.d {
        return Err(Error::InvalidInput("comparison pair must share dimensions".into()));
    }
    let n = upper.n;
    let d = upper.d;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0usize;
    let mut x = vec![0.0; upper.k];
    for _ in 0..samples {
        let l = rng.gen_range(0..n);
        let t = rng.gen_range(grid.time.t_start..=grid.time.t_end);
        for (a, xa) in x.iter_mut().enumerate() {
            let axis = grid.space.axis(a);
            *xa = rng.gen_range(axis.min..=axis.max);
        }
        let mut y_bar = vec![0.0; n];
        let mut y = vec![0.0; n];
        for j in 0..n {
            y_bar[j] = rng.gen_range(-3.0..3.0);
            y[j] = if j == l { y_bar[j] } else { y_bar[j] + rng.gen_range(0.0..2.0) };
        }
        let mut z = vec![0.0; d];
        for zb in z.iter_mut() {
            *zb = rng.gen_range(-2.0..2.0);
        }
        let ctx_up = EvalContext::new(t, &x, &y, &z);
        let ctx_low = EvalContext::new(t, &x, &y_bar, &z);
        let f_up = upper.f[l].eval(&ctx_up)?;
        let f_low = lower.f[l].eval(&ctx_low)?;
        if f_up < f_low - 1e-12 {
            violations += 1;
            continue;
        }
        // g-block difference must be positive semidefinite
        let mut diff = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                diff[(i, j)] =
                    upper.g[l][i * d + j].eval(&ctx_up)? - lower.g[l][i * d + j].eval(&ctx_low)?;
            }
        }
        let psd_ok = match d {
            1 => diff[(0, 0)] >= -1e-12,
            _ => {
                let tr = diff.trace();
                let det = diff[(0, 0)] * diff[(1, 1)] - diff[(0, 1)] * diff[(1, 0)];
                tr >= -1e-12 && det >= -1e-12
            }
        };
        if !psd_ok {
            violations += 1;
        }
    }

    let term_up = upper.terminal_slices(grid)?;
    let term_low = lower.terminal_slices(grid)?;
    let mut terminal_violations = 0usize;
    for l in 0..n {
        for idx in 0..grid.space.node_count() {
            if term_up[l][idx] < term_low[l][idx] - 1e-12 {
                terminal_violations += 1;
            }
        }
    }

    let epsilon_grid = c_cmp * grid.slack_scale();
    if violations > 0 || terminal_violations > 0 {
        return Ok(ComparisonReport {
            hypothesis_samples: samples,
            hypothesis_violations: violations,
            terminal_violations,
            checked: false,
            min_signed_gap: f64::NAN,
            epsilon_grid,
            pass: false,
        });
    }

    let (sol_up, _) = stitch_solve_global(upper, grid, gammas, rule, initial_m, cfg)?;
    let (sol_low, _) = stitch_solve_global(lower, grid, gammas, rule, initial_m, cfg)?;
    let mut min_gap = f64::INFINITY;
    for m in 0..grid.time.nodes() {
        for l in 0..n {
            let up = sol_up.y.slice(m, l);
            let low = sol_low.y.slice(m, l);
            for idx in 0..grid.space.node_count() {
                min_gap = min_gap.min(up[idx] - low[idx]);
            }
        }
    }
    Ok(ComparisonReport {
        hypothesis_samples: samples,
        hypothesis_violations: 0,
        terminal_violations: 0,
        checked: true,
        min_signed_gap: min_gap,
        epsilon_grid,
        pass: min_gap >= -epsilon_grid,
    })
}

/// Continuous dependence of the system solution on terminal data and
/// generators, plus the linear-growth scaling pattern.
#[derive(Debug, Clone, Serialize)]
pub struct SystemStabilityReport {
    pub field_distance: f64,
    pub terminal_distance: f64,
    pub driver_distance: f64,
    pub ratio: f64,
    /// (λ, sup|Y_λ(0,·)|) for terminal data scaled by λ.
    pub growth: Vec<(f64, f64)>,
}

#[allow(clippy::too_many_arguments)]
pub fn system_stability_check(
    spec1: &SystemSpec,
    spec2: &SystemSpec,
    grid: &GridSpec,
    gammas: &[DMatrix<f64>],
    rule: &QuadratureRule,
    cfg: &PicardConfig,
    initial_m: usize,
    growth_scales: &[f64],
) -> Result<SystemStabilityReport> {
    let (sol1, _) = stitch_solve_global(spec1, grid, gammas, rule, initial_m, cfg)?;
    let (sol2, _) = stitch_solve_global(spec2, grid, gammas, rule, initial_m, cfg)?;
    let nodes = grid.space.node_count();
    let n = spec1.n;
    let d = spec1.d;
    let mut field_distance = 0.0f64;
    for l in 0..n {
        for idx in 0..nodes {
            field_distance =
                field_distance.max((sol1.y.value(0, l, idx) - sol2.y.value(0, l, idx)).abs());
        }
    }
    let steps = grid.time.steps;
    let mut terminal_distance = 0.0f64;
    for l in 0..n {
        for idx in 0..nodes {
            terminal_distance = terminal_distance
                .max((sol1.y.value(steps, l, idx) - sol2.y.value(steps, l, idx)).abs());
        }
    }
    // driver distance along solution 2
    let mut driver_distance = 0.0f64;
    let mut x = vec![0.0; spec1.k];
    let mut y = vec![0.0; n];
    let mut z = vec![0.0; d];
    for m in 0..=steps {
        let t = grid.time.node(m);
        for idx in 0..nodes {
            grid.space.coords(idx, &mut x);
            for l in 0..n {
                y[l] = sol2.y.value(m, l, idx);
            }
            let mut dist = 0.0;
            for l in 0..n {
                for b in 0..d {
                    z[b] = sol2.z.value(m, l * d + b, idx);
                }
                let ctx = EvalContext::new(t, &x, &y, &z);
                dist += (spec1.f[l].eval(&ctx)? - spec2.f[l].eval(&ctx)?).abs();
                for i in 0..d {
                    for j in 0..d {
                        dist += (spec1.g[l][i * d + j].eval(&ctx)?
                            - spec2.g[l][i * d + j].eval(&ctx)?)
                        .abs();
                    }
                }
            }
            driver_distance = driver_distance.max(dist);
        }
    }
    let horizon = grid.time.t_end - grid.time.t_start;
    let denom = terminal_distance + horizon * driver_distance;
    let ratio = if denom > 0.0 { field_distance / denom } else { 0.0 };

    // growth pattern: scale spec1's terminal data, |Y| should scale at most
    // linearly for linear-growth data
    let mut growth = Vec::new();
    for &lam in growth_scales {
        let scaled = SystemSpec {
            terminal: spec1
                .terminal
                .iter()
                .map(|e| Expr::Mul(Box::new(Expr::Const(lam)), Box::new(e.clone())))
                .collect(),
            ..spec1.clone()
        };
        let (sol, _) = stitch_solve_global(&scaled, grid, gammas, rule, initial_m, cfg)?;
        let mut sup = 0.0f64;
        for l in 0..n {
            for idx in 0..nodes {
                sup = sup.max(sol.y.value(0, l, idx).abs());
            }
        }
        growth.push((lam, sup));
    }
    Ok(SystemStabilityReport { field_distance, terminal_distance, driver_distance, ratio, growth })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::VarSpace;
    use crate::sublinear::GammaSet;
    use approx::assert_relative_eq;

    fn gen2(src: &str) -> Expr {
        Expr::parse(src, &VarSpace::generator(1, 2, 1)).unwrap()
    }

    fn phi(src: &str) -> Expr {
        Expr::parse(src, &VarSpace::terminal(1)).unwrap()
    }

    fn setup(nodes: usize, steps: usize) -> (GridSpec, Vec<DMatrix<f64>>, QuadratureRule) {
        let grid = GridSpec::uniform_1d(-6.0, 6.0, nodes, 0.0, 1.0, steps).unwrap();
        let gammas = GammaSet::interval(1.0, 4.0).unwrap().discretize(9).unwrap();
        let rule = QuadratureRule::gauss_hermite(1, 7).unwrap();
        (grid, gammas, rule)
    }

    fn coupled_linear() -> SystemSpec {
        SystemSpec::new(
            2,
            1,
            1,
            vec![gen2("y2"), gen2("y1")],
            vec![vec![], vec![]],
            vec![phi("x1"), phi("x1")],
            SdeCoefficients::standard_1d(),
            1.0,
            2.0,
        )
        .unwrap()
    }

    fn picard_cfg(l: f64) -> PicardConfig {
        PicardConfig { solve: SolveConfig::with_lipschitz(l), ..Default::default() }
    }

    #[test]
    fn frozen_generator_examples() {
        let (grid, ..) = setup(16, 4);
        // n = 2, f¹ = y2 frozen at U² ≡ 3 is the constant 3
        let spec = coupled_linear();
        let mut u = ValueField::zeros(grid.time, grid.space.clone(), 2);
        let three = vec![3.0; grid.space.node_count()];
        for m in 0..grid.time.nodes() {
            u.set_slice(m, 1, &three);
        }
        let gen = frozen_generator(&spec, 0, &u, (0, grid.time.steps));
        let q = QueryPoint { m: 1, t: 0.25, x: &[0.5], node: Some(3) };
        assert_eq!(gen.f(&q, -7.0, &[0.0]).unwrap(), 3.0);

        // f¹ = y1 + y2 with U² ≡ c stays live in y1
        let spec_sum = SystemSpec::new(
            2,
            1,
            1,
            vec![gen2("y1 + y2"), gen2("y1")],
            vec![vec![], vec![]],
            vec![phi("x1"), phi("x1")],
            SdeCoefficients::standard_1d(),
            2.0,
            2.0,
        )
        .unwrap();
        let gen_sum = frozen_generator(&spec_sum, 0, &u, (0, grid.time.steps));
        assert_eq!(gen_sum.f(&q, 1.25, &[0.0]).unwrap(), 1.25 + 3.0);

        // out-of-range time nodes are a plumbing error
        let gen_bad = frozen_generator(&spec, 0, &u, (2, 3));
        let q_bad = QueryPoint { m: 0, t: 0.0, x: &[0.5], node: Some(3) };
        assert!(matches!(gen_bad.f(&q_bad, 0.0, &[0.0]), Err(Error::Field(_))));
    }

    #[test]
    fn n_equals_one_converges_at_iterate_two() {
        let (grid, gammas, rule) = setup(64, 32);
        let spec = SystemSpec::new(
            1,
            1,
            1,
            vec![Expr::parse("y1 + z1", &VarSpace::generator(1, 1, 1)).unwrap()],
            vec![vec![]],
            vec![phi("x1^2")],
            SdeCoefficients::standard_1d(),
            2.0,
            2.0,
        )
        .unwrap();
        let terminal = spec.terminal_slices(&grid).unwrap();
        let (_, records) =
            picard_solve_local(&spec, &terminal, 0, grid.time.steps, &grid, &gammas, &rule, &picard_cfg(2.0))
                .unwrap();
        assert_eq!(records.len(), 2);
        assert!(records[1].residual < 1e-12, "residual {}", records[1].residual);
    }

    #[test]
    fn decoupled_pair_equals_independent_scalar_solves() {
        let (grid, gammas, rule) = setup(64, 32);
        let spec = SystemSpec::new(
            2,
            1,
            1,
            vec![gen2("0.5*y1"), gen2("-0.5*y2")],
            vec![vec![], vec![]],
            vec![phi("x1^2"), phi("x1")],
            SdeCoefficients::standard_1d(),
            0.5,
            2.0,
        )
        .unwrap();
        let terminal = spec.terminal_slices(&grid).unwrap();
        let (sol, _) =
            picard_solve_local(&spec, &terminal, 0, grid.time.steps, &grid, &gammas, &rule, &picard_cfg(0.5))
                .unwrap();
        // independent scalar solves, node for node
        let cfg = SolveConfig::with_lipschitz(0.5);
        let s1 = scalar::solve_scalar(
            &crate::scalar::ScalarGenerator::from_f(1, Expr::parse("0.5*y1", &VarSpace::generator(1, 1, 1)).unwrap()),
            &spec.dynamics,
            Terminal::Slice(&terminal[0]),
            &grid,
            &gammas,
            &rule,
            &cfg,
        )
        .unwrap();
        let s2 = scalar::solve_scalar(
            &crate::scalar::ScalarGenerator::from_f(1, Expr::parse("-0.5*y1", &VarSpace::generator(1, 1, 1)).unwrap()),
            &spec.dynamics,
            Terminal::Slice(&terminal[1]),
            &grid,
            &gammas,
            &rule,
            &cfg,
        )
        .unwrap();
        for m in 0..grid.time.nodes() {
            for idx in 0..grid.space.node_count() {
                assert!((sol.y.value(m, 0, idx) - s1.y.value(m, 0, idx)).abs() < 1e-12);
                assert!((sol.y.value(m, 1, idx) - s2.y.value(m, 0, idx)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coupled_linear_hits_closed_form_and_contracts() {
        let (grid, gammas, rule) = setup(101, 100);
        let spec = coupled_linear();
        let (sol, plan) =
            stitch_solve_global(&spec, &grid, &gammas, &rule, 4, &picard_cfg(1.0)).unwrap();
        // u^l(0, x) = x·e^T
        let e = std::f64::consts::E;
        assert_relative_eq!(sol.y.interpolate(0, 0, &[1.0]), e, max_relative = 0.01);
        assert_relative_eq!(sol.y.interpolate(0, 1, &[1.0]), e, max_relative = 0.01);
        // measured contraction ratios stay below 0.9 for h·L ≤ 0.25
        for hist in &plan.history {
            for r in &hist.records {
                if let Some(ratio) = r.ratio {
                    if r.residual >= 1e-12 {
                        assert!(ratio <= 0.9, "ratio {ratio} at iterate {}", r.iterate);
                    }
                }
            }
        }
        assert!(plan.halvings.is_empty());
    }

    #[test]
    fn stitching_is_exact_for_backward_dp() {
        let (grid, gammas, rule) = setup(64, 32);
        let spec = SystemSpec::new(
            1,
            1,
            1,
            vec![Expr::parse("0", &VarSpace::generator(1, 1, 1)).unwrap()],
            vec![vec![]],
            vec![phi("x1^2")],
            SdeCoefficients::standard_1d(),
            0.0,
            2.0,
        )
        .unwrap();
        let (one, _) = stitch_solve_global(&spec, &grid, &gammas, &rule, 1, &picard_cfg(0.0)).unwrap();
        let (four, plan) = stitch_solve_global(&spec, &grid, &gammas, &rule, 4, &picard_cfg(0.0)).unwrap();
        assert_eq!(plan.intervals.len(), 4);
        for m in 0..grid.time.nodes() {
            for idx in 0..grid.space.node_count() {
                assert!((one.y.value(m, 0, idx) - four.y.value(m, 0, idx)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn interval_counts_agree_for_coupled_system() {
        let (grid, gammas, rule) = setup(64, 64);
        let spec = coupled_linear();
        let (m1, _) = stitch_solve_global(&spec, &grid, &gammas, &rule, 4, &picard_cfg(1.0)).unwrap();
        let (m8, _) = stitch_solve_global(&spec, &grid, &gammas, &rule, 8, &picard_cfg(1.0)).unwrap();
        let mut worst = 0.0f64;
        for idx in 0..grid.space.node_count() {
            for l in 0..2 {
                worst = worst.max((m1.y.value(0, l, idx) - m8.y.value(0, l, idx)).abs());
            }
        }
        let scale = 6.0 * std::f64::consts::E;
        assert!(worst / scale < 0.002, "stitch variance {worst}");
    }

    #[test]
    fn strong_coupling_triggers_adaptive_halving() {
        let (grid, gammas, rule) = setup(48, 64);
        let spec = SystemSpec::new(
            2,
            1,
            1,
            vec![gen2("5*y2"), gen2("5*y1")],
            vec![vec![], vec![]],
            vec![phi("x1"), phi("x1")],
            SdeCoefficients::standard_1d(),
            5.0,
            2.0,
        )
        .unwrap();
        let (sol, plan) = stitch_solve_global(&spec, &grid, &gammas, &rule, 1, &picard_cfg(5.0)).unwrap();
        assert!(!plan.halvings.is_empty(), "expected the full interval to fail contraction");
        assert!(plan.max_h() <= 0.25 + 1e-12, "final h {}", plan.max_h());
        // discrete fixed point: the symmetric mode obeys s_m = s_{m+1}/(1 − 5Δt)
        // exactly (linear slices propagate exactly), so u¹(0, x) = x·(1 − 5Δt)^{−N}
        let growth = (1.0 - 5.0 * grid.dt()).powi(-(grid.time.steps as i32));
        assert_relative_eq!(sol.y.interpolate(0, 0, &[1.0]), growth, max_relative = 1e-5);
        // and the discrete value approaches x·e^{5T} as Δt shrinks
        assert_relative_eq!(growth, (5.0f64).exp(), max_relative = 0.25);
    }

    #[test]
    fn direct_solve_matches_picard_and_scalar() {
        let (grid, gammas, rule) = setup(80, 64);
        // n = 1 collapse: direct solve is the same code path as solve_scalar
        let spec1 = SystemSpec::new(
            1,
            1,
            1,
            vec![Expr::parse("0", &VarSpace::generator(1, 1, 1)).unwrap()],
            vec![vec![]],
            vec![phi("x1^2")],
            SdeCoefficients::standard_1d(),
            0.0,
            2.0,
        )
        .unwrap();
        let direct1 = direct_coupled_solve(&spec1, &grid, &gammas, &rule, &SolveConfig::default()).unwrap();
        let scalar1 = scalar::solve_scalar(
            &crate::scalar::ScalarGenerator::zero(1),
            &spec1.dynamics,
            Terminal::Expression(&phi("x1^2")),
            &grid,
            &gammas,
            &rule,
            &SolveConfig::default(),
        )
        .unwrap();
        for m in 0..grid.time.nodes() {
            for idx in 0..grid.space.node_count() {
                assert!((direct1.y.value(m, 0, idx) - scalar1.y.value(m, 0, idx)).abs() < 1e-12);
            }
        }

        // coupled case agrees with the Picard fixed point within O(Δt + Δx²)
        let spec = coupled_linear();
        let direct = direct_coupled_solve(&spec, &grid, &gammas, &rule, &SolveConfig::with_lipschitz(1.0)).unwrap();
        let (picard, _) = stitch_solve_global(&spec, &grid, &gammas, &rule, 4, &picard_cfg(1.0)).unwrap();
        let mut worst = 0.0f64;
        for idx in 0..grid.space.node_count() {
            for l in 0..2 {
                worst = worst.max((direct.y.value(0, l, idx) - picard.y.value(0, l, idx)).abs());
            }
        }
        let tol = 10.0 * (grid.dt() + grid.space.max_spacing().powi(2));
        assert!(worst <= tol, "direct vs picard gap {worst} > {tol}");
    }

    #[test]
    fn comparison_identical_specs_is_exact() {
        let (grid, gammas, rule) = setup(48, 32);
        let spec = coupled_linear();
        let report =
            comparison_check(&spec, &spec, &grid, &gammas, &rule, &picard_cfg(1.0), 4, 500, 10.0, 3)
                .unwrap();
        assert!(report.checked);
        assert_eq!(report.hypothesis_violations, 0);
        assert_eq!(report.min_signed_gap, 0.0);
        assert!(report.pass);
    }

    #[test]
    fn comparison_lower_driver_orders_fields() {
        let (grid, gammas, rule) = setup(48, 32);
        // upper: f¹ = 0.25 y2 (non-decreasing in the off-component)
        let upper = SystemSpec::new(
            2,
            1,
            1,
            vec![gen2("0.25*y2"), gen2("0.25*y1")],
            vec![vec![], vec![]],
            vec![phi("x1"), phi("x1")],
            SdeCoefficients::standard_1d(),
            0.25,
            2.0,
        )
        .unwrap();
        let lower = SystemSpec::new(
            2,
            1,
            1,
            vec![gen2("0.25*y2 - 0.1"), gen2("0.25*y1 - 0.1")],
            vec![vec![], vec![]],
            vec![phi("x1 - 0.5"), phi("x1 - 0.5")],
            SdeCoefficients::standard_1d(),
            0.25,
            2.0,
        )
        .unwrap();
        let report =
            comparison_check(&upper, &lower, &grid, &gammas, &rule, &picard_cfg(0.25), 4, 500, 10.0, 3)
                .unwrap();
        assert!(report.checked);
        assert!(report.pass);
        // the gap is genuinely positive, not just within slack
        assert!(report.min_signed_gap > 0.05, "gap {}", report.min_signed_gap);
    }

    #[test]
    fn comparison_hypothesis_violation_skips_solve() {
        let (grid, gammas, rule) = setup(48, 16);
        // f¹ = −y2 is decreasing in the off-component: hypothesis (i) fails
        let upper = SystemSpec::new(
            2,
            1,
            1,
            vec![gen2("-y2"), gen2("0")],
            vec![vec![], vec![]],
            vec![phi("x1"), phi("x1")],
            SdeCoefficients::standard_1d(),
            1.0,
            2.0,
        )
        .unwrap();
        let report =
            comparison_check(&upper, &upper, &grid, &gammas, &rule, &picard_cfg(1.0), 4, 500, 10.0, 3)
                .unwrap();
        assert!(!report.checked);
        assert!(report.hypothesis_violations > 0);
        assert!(!report.pass);
    }

    #[test]
    fn constant_terminal_shift_propagates_exactly() {
        let (grid, gammas, rule) = setup(48, 32);
        // f = g = 0, φ̄ = φ − 1: constants are invariant, so Y − Ȳ ≡ 1
        let base = SystemSpec::new(
            2,
            1,
            1,
            vec![gen2("0"), gen2("0")],
            vec![vec![], vec![]],
            vec![phi("x1^2"), phi("x1")],
            SdeCoefficients::standard_1d(),
            0.0,
            2.0,
        )
        .unwrap();
        let shifted = SystemSpec::new(
            2,
            1,
            1,
            vec![gen2("0"), gen2("0")],
            vec![vec![], vec![]],
            vec![phi("x1^2 - 1"), phi("x1 - 1")],
            SdeCoefficients::standard_1d(),
            0.0,
            2.0,
        )
        .unwrap();
        let (a, _) = stitch_solve_global(&base, &grid, &gammas, &rule, 2, &picard_cfg(0.0)).unwrap();
        let (b, _) = stitch_solve_global(&shifted, &grid, &gammas, &rule, 2, &picard_cfg(0.0)).unwrap();
        for m in 0..grid.time.nodes() {
            for l in 0..2 {
                for idx in 0..grid.space.node_count() {
                    assert!((a.y.value(m, l, idx) - b.y.value(m, l, idx) - 1.0).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn system_stability_bounded_ratios_and_linear_growth() {
        let (grid, gammas, rule) = setup(48, 32);
        let spec = coupled_linear();
        let mut ratios = Vec::new();
        for eps in [1.0, 0.1, 0.01] {
            let shifted = format!("x1 + {eps}");
            let perturbed = SystemSpec::new(
                2,
                1,
                1,
                vec![gen2("y2"), gen2("y1")],
                vec![vec![], vec![]],
                vec![phi(&shifted), phi(&shifted)],
                SdeCoefficients::standard_1d(),
                1.0,
                2.0,
            )
            .unwrap();
            let report = system_stability_check(
                &spec,
                &perturbed,
                &grid,
                &gammas,
                &rule,
                &picard_cfg(1.0),
                4,
                &[],
            )
            .unwrap();
            ratios.push(report.field_distance / eps);
        }
        // linear system: response exactly linear in ε, so ratios coincide
        let (lo, hi) = ratios.iter().fold((f64::MAX, f64::MIN), |(l, h), r| (l.min(*r), h.max(*r)));
        assert!(hi / lo < 1.25, "ratios {ratios:?}");
        // terminal scaling: |Y| scales linearly for this homogeneous system
        let report = system_stability_check(
            &spec,
            &spec,
            &grid,
            &gammas,
            &rule,
            &picard_cfg(1.0),
            4,
            &[1.0, 2.0, 4.0],
        )
        .unwrap();
        let base = report.growth[0].1;
        for (lam, sup) in &report.growth {
            assert_relative_eq!(sup / lam, base, max_relative = 1e-6);
        }
    }

    #[test]
    fn argmax_invariant_under_positive_terminal_scaling() {
        let (grid, gammas, rule) = setup(64, 32);
        let spec = SystemSpec::new(
            1,
            1,
            1,
            vec![Expr::parse("0", &VarSpace::generator(1, 1, 1)).unwrap()],
            vec![vec![]],
            vec![phi("x1^2")],
            SdeCoefficients::standard_1d(),
            0.0,
            2.0,
        )
        .unwrap();
        let scaled = SystemSpec::new(
            1,
            1,
            1,
            vec![Expr::parse("0", &VarSpace::generator(1, 1, 1)).unwrap()],
            vec![vec![]],
            vec![phi("2.5*x1^2")],
            SdeCoefficients::standard_1d(),
            0.0,
            2.0,
        )
        .unwrap();
        let (a, _) = stitch_solve_global(&spec, &grid, &gammas, &rule, 1, &picard_cfg(0.0)).unwrap();
        let (b, _) = stitch_solve_global(&scaled, &grid, &gammas, &rule, 1, &picard_cfg(0.0)).unwrap();
        assert_eq!(a.argmax, b.argmax);
        for m in 0..grid.time.nodes() {
            for idx in 0..grid.space.node_count() {
                let va = a.y.value(m, 0, idx);
                let vb = b.y.value(m, 0, idx);
                assert!((vb - 2.5 * va).abs() <= 1e-9 * (1.0 + va.abs()), "scaling broke at {m},{idx}");
            }
        }
    }

    #[test]
    fn component_k_extraction_sees_saturating_scenario() {
        let (grid, gammas, rule) = setup(201, 100);
        let spec = SystemSpec::new(
            1,
            1,
            1,
            vec![Expr::parse("0", &VarSpace::generator(1, 1, 1)).unwrap()],
            vec![vec![]],
            vec![phi("x1^2")],
            SdeCoefficients::standard_1d(),
            0.0,
            2.0,
        )
        .unwrap();
        let (sol, _) = stitch_solve_global(&spec, &grid, &gammas, &rule, 1, &picard_cfg(0.0)).unwrap();
        let bundle = crate::forward::simulate_paths(
            &spec.dynamics,
            &crate::forward::InitialState::point(&[0.0]),
            &grid.time,
            &gammas,
            &crate::forward::ScenarioPolicy::Fixed(8),
            300,
            21,
        )
        .unwrap();
        let k = extract_component_k(&spec, &sol, 0, &bundle).unwrap();
        // the sup is attained along the σ̄² scenario, so K_T stays near zero
        assert!(k.mean_terminal.abs() < 0.05, "mean K_T = {}", k.mean_terminal);
    }
}
