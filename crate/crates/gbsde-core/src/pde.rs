//! Explicit monotone finite differences for the fully nonlinear parabolic
//! system associated with the backward equations: for each component,
//! ∂_t u^l + F^l(D²u^l, Du^l, u, x, t) = 0 backward from u(T) = φ, where
//! F^l wraps the second-order part, the quadratic-covariation decorations
//! and the own-component generators inside G.
//!
//! This solver shares nothing with the probabilistic path: it is the
//! independent oracle of the cross-validation harness.

use crate::error::{Error, Result};
use crate::expr::EvalContext;
use crate::forward::DynamicsEval;
use crate::grid::{GridSpec, SpatialGrid, TimeGrid, ValueField};
use crate::lattice::MAX_K;
use crate::picard::SystemSpec;
use crate::sublinear::{GFunction, GammaKind, GammaSet};
use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

/// The assembled operator family F^l plus the discretized scenario set used
/// for maximizer reporting (and for the sup itself when d = 2).
#[derive(Debug, Clone)]
pub struct PdeSystem {
    pub gfunc: GFunction,
    pub spec: SystemSpec,
    pub gammas: Vec<DMatrix<f64>>,
}

/// Builds F^l from the sublinear operator, the forward coefficients and the
/// system generators.
pub fn assemble_f(gfunc: GFunction, spec: &SystemSpec, gamma_discretization: usize) -> Result<PdeSystem> {
    if gfunc.gamma.dim() != spec.d {
        return Err(Error::InvalidInput(format!(
            "G has Brownian dimension {}, system has {}",
            gfunc.gamma.dim(),
            spec.d
        )));
    }
    let gammas = gfunc.gamma.discretize(gamma_discretization)?;
    Ok(PdeSystem { gfunc, spec: spec.clone(), gammas })
}

impl PdeSystem {
    /// F^l(A, p, r, x, t) and the maximizing scenario index. `a` is the k×k
    /// Hessian, `p` the gradient, `r` the full solution vector at (t, x).
    pub fn eval_component(
        &self,
        l: usize,
        a: &DMatrix<f64>,
        p: &[f64],
        r: &[f64],
        x: &[f64],
        t: f64,
        dynamics_eval: &DynamicsEval,
    ) -> Result<(f64, usize)> {
        let k = self.spec.k;
        let d = self.spec.d;
        debug_assert_eq!(a.nrows(), k);
        // z = σᵀ p
        let mut z = [0.0f64; 4];
        for b in 0..d {
            let mut acc = 0.0;
            for ax in 0..k {
                acc += dynamics_eval.sigma[ax * d + b] * p[ax];
            }
            z[b] = acc;
        }
        let z = &z[..d];
        let ctx = EvalContext::new(t, x, r, z);

        // M_ij = (σᵀ A σ)_ij + 2⟨p, h_ij⟩ + 2 g^l_ij(t, x, r, z)
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let mut sas = 0.0;
                for ax in 0..k {
                    for bx in 0..k {
                        sas += dynamics_eval.sigma[ax * d + i] * a[(ax, bx)] * dynamics_eval.sigma[bx * d + j];
                    }
                }
                let mut ph = 0.0;
                for ax in 0..k {
                    ph += p[ax] * dynamics_eval.h[(i * d + j) * k + ax];
                }
                let g = self.spec.g_expr(l, i.min(j), i.max(j)).eval(&ctx)?;
                m[(i, j)] = sas + 2.0 * ph + 2.0 * g;
            }
        }
        let (g_val, argmax) = match self.gfunc.gamma.kind() {
            GammaKind::Interval { sigma_min_sq, sigma_max_sq } => {
                let a0 = m[(0, 0)];
                let v = GFunction::interval_closed_form(a0, *sigma_min_sq, *sigma_max_sq);
                let idx = if a0 > 0.0 { self.gammas.len() - 1 } else { 0 };
                (v, idx)
            }
            GammaKind::Finite(_) => self.gfunc.eval_discrete(&m, &self.gammas)?,
        };
        let mut bp = 0.0;
        for ax in 0..k {
            bp += dynamics_eval.b[ax] * p[ax];
        }
        let f = self.spec.f_expr(l).eval(&ctx)?;
        Ok((g_val + bp + f, argmax))
    }

    /// σ̄²·sup‖σ‖²_F and sup‖b‖ over the grid nodes at a few time samples,
    /// the coefficients entering the stability bound.
    fn cfl_coefficients(&self, space: &SpatialGrid, times: &[f64]) -> Result<(f64, f64)> {
        let k = self.spec.k;
        let d = self.spec.d;
        let mut ev = DynamicsEval::default();
        let mut x = vec![0.0; k];
        let mut sigma_sq: f64 = 0.0;
        let mut b_norm: f64 = 0.0;
        for &t in times {
            for idx in 0..space.node_count() {
                space.coords(idx, &mut x);
                self.spec.dynamics.eval_at(t, &x, &mut ev)?;
                let fro: f64 = ev.sigma.iter().map(|v| v * v).sum();
                sigma_sq = sigma_sq.max(fro);
                let bn: f64 = ev.b.iter().map(|v| v * v).sum::<f64>().sqrt();
                b_norm = b_norm.max(bn);
            }
            let _ = d;
        }
        Ok((sigma_sq, b_norm))
    }
}

/// Largest stable time step of the explicit scheme:
/// Δx² / (2·σ̄²·sup‖σ‖² + Δx·sup‖b‖·k).
pub fn cfl_bound(sys: &PdeSystem, space: &SpatialGrid, times: &[f64]) -> Result<f64> {
    let dx = space.axes().iter().map(|a| a.spacing()).fold(f64::INFINITY, f64::min);
    let (sigma_sq, b_norm) = sys.cfl_coefficients(space, times)?;
    let denom = 2.0 * sys.gfunc.gamma.sigma_max_sq() * sigma_sq + dx * b_norm * sys.spec.k as f64;
    if denom <= 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(dx * dx / denom)
}

/// Grid plus the recorded stability ratio Δt·σ̄²·‖σ‖²/Δx².
#[derive(Debug, Clone)]
pub struct FdScheme {
    pub grid: GridSpec,
    pub cfl_ratio: f64,
}

impl FdScheme {
    /// Validates the time step against the stability bound.
    pub fn new(sys: &PdeSystem, grid: GridSpec) -> Result<Self> {
        let times = [grid.time.t_start, 0.5 * (grid.time.t_start + grid.time.t_end), grid.time.t_end];
        let dt_max = cfl_bound(sys, &grid.space, &times)?;
        let dt = grid.dt();
        if dt > dt_max {
            return Err(Error::CflViolation { dt, dt_max });
        }
        let dx = grid.space.axes().iter().map(|a| a.spacing()).fold(f64::INFINITY, f64::min);
        let (sigma_sq, _) = sys.cfl_coefficients(&grid.space, &times)?;
        let cfl_ratio = dt * sys.gfunc.gamma.sigma_max_sq() * sigma_sq / (dx * dx);
        Ok(FdScheme { grid, cfl_ratio })
    }

    /// Chooses the step count from the stability bound.
    pub fn with_cfl_steps(sys: &PdeSystem, space: SpatialGrid, t_start: f64, t_end: f64) -> Result<Self> {
        let times = [t_start, 0.5 * (t_start + t_end), t_end];
        let dt_max = cfl_bound(sys, &space, &times)?;
        let steps = if dt_max.is_finite() {
            ((t_end - t_start) / dt_max).ceil().max(1.0) as usize
        } else {
            1
        };
        let grid = GridSpec::new(space, TimeGrid::new(t_start, t_end, steps)?);
        FdScheme::new(sys, grid)
    }
}

/// Finite-difference solution fields.
#[derive(Debug, Clone)]
pub struct FdSolution {
    /// n channels.
    pub u: ValueField,
    /// Maximizing scenario per (time node, component, space node).
    pub argmax: Vec<u16>,
    pub grid: GridSpec,
    pub cfl_ratio: f64,
}

impl FdSolution {
    pub fn argmax_at(&self, m: usize, l: usize, node: usize) -> usize {
        let nodes = self.grid.space.node_count();
        let n = self.u.channels();
        self.argmax[(m * n + l) * nodes + node] as usize
    }
}

/// Explicit backward sweep u(t_m) = u(t_{m+1}) + Δt·F(D²u, Du, u, x, t_{m+1}),
/// boundary handled by gradient-clamped linear continuation.
pub fn fd_solve(sys: &PdeSystem, scheme: &FdScheme) -> Result<FdSolution> {
    let grid = &scheme.grid;
    let space = &grid.space;
    let nodes = space.node_count();
    let n = sys.spec.n;
    let k = sys.spec.k;
    let dt = grid.dt();
    let steps = grid.time.steps;

    let mut u = ValueField::zeros(grid.time, space.clone(), n);
    let mut argmax = vec![0u16; grid.time.nodes() * n * nodes];
    let terminal = sys.spec.terminal_slices(grid)?;
    for l in 0..n {
        u.set_slice(steps, l, &terminal[l]);
    }
    let state_independent = sys.spec.dynamics.is_state_independent();

    for m in (0..steps).rev() {
        let t_next = grid.time.node(m + 1);
        let slices: Vec<(&[f64], f64)> =
            (0..n).map(|l| (u.slice(m + 1, l), u.slice_lipschitz(m + 1, l))).collect();

        let shared_eval = if state_independent {
            let mut x0 = vec![0.0; k];
            space.coords(0, &mut x0);
            let mut ev = DynamicsEval::default();
            sys.spec.dynamics.eval_at(t_next, &x0, &mut ev)?;
            Some(ev)
        } else {
            None
        };

        let node_out = |idx: usize| -> Result<(Vec<f64>, Vec<u16>)> {
            let mut x = [0.0f64; MAX_K];
            space.coords(idx, &mut x[..k]);
            let x = &x[..k];
            let mut local_ev = DynamicsEval::default();
            let ev: &DynamicsEval = match &shared_eval {
                Some(ev) => ev,
                None => {
                    sys.spec.dynamics.eval_at(t_next, x, &mut local_ev)?;
                    &local_ev
                }
            };
            let mut r = [0.0f64; 16];
            for l in 0..n {
                r[l] = slices[l].0[idx];
            }
            let r = &r[..n];
            let mut multi = [0usize; MAX_K];
            space.multi_index(idx, &mut multi[..k]);

            let mut out_u = vec![0.0; n];
            let mut out_g = vec![0u16; n];
            for l in 0..n {
                let (values, lip) = slices[l];
                // neighbor reads, ghost values by clamped linear continuation
                let fetch = |offsets: &[isize]| -> f64 {
                    let mut inside = true;
                    for a in 0..k {
                        let pos = multi[a] as isize + offsets[a];
                        if pos < 0 || pos >= space.axis(a).count as isize {
                            inside = false;
                        }
                    }
                    if inside {
                        let mut j = idx;
                        for a in 0..k {
                            j = (j as isize + offsets[a] * space.stride(a) as isize) as usize;
                        }
                        values[j]
                    } else {
                        let mut xg = [0.0f64; MAX_K];
                        for a in 0..k {
                            xg[a] = x[a] + offsets[a] as f64 * space.axis(a).spacing();
                        }
                        space.interpolate(values, &xg[..k], lip)
                    }
                };
                let center = values[idx];
                let mut grad = [0.0f64; MAX_K];
                let mut hess = DMatrix::zeros(k, k);
                let mut off = [0isize; MAX_K];
                for a in 0..k {
                    let dx = space.axis(a).spacing();
                    off.fill(0);
                    off[a] = 1;
                    let up = fetch(&off[..k]);
                    off[a] = -1;
                    let down = fetch(&off[..k]);
                    grad[a] = (up - down) / (2.0 * dx);
                    hess[(a, a)] = (up - 2.0 * center + down) / (dx * dx);
                }
                if k == 2 {
                    let dx0 = space.axis(0).spacing();
                    let dx1 = space.axis(1).spacing();
                    let pp = fetch(&[1, 1]);
                    let pm = fetch(&[1, -1]);
                    let mp = fetch(&[-1, 1]);
                    let mm = fetch(&[-1, -1]);
                    let cross = (pp - pm - mp + mm) / (4.0 * dx0 * dx1);
                    hess[(0, 1)] = cross;
                    hess[(1, 0)] = cross;
                }
                let (f_val, gi) = sys.eval_component(l, &hess, &grad[..k], r, x, t_next, ev)?;
                let next = center + dt * f_val;
                if !next.is_finite() {
                    return Err(Error::Solver(format!(
                        "non-finite update at node {idx} (x = {x:?}), component {l}, t = {t_next}"
                    )));
                }
                out_u[l] = next;
                out_g[l] = gi as u16;
            }
            Ok((out_u, out_g))
        };

        let outs: Vec<(Vec<f64>, Vec<u16>)> =
            (0..nodes).into_par_iter().map(node_out).collect::<Result<_>>()?;
        for l in 0..n {
            let col: Vec<f64> = outs.iter().map(|o| o.0[l]).collect();
            u.set_slice(m, l, &col);
            for (idx, o) in outs.iter().enumerate() {
                argmax[(m * n + l) * nodes + idx] = o.1[l];
            }
        }
    }
    Ok(FdSolution { u, argmax, grid: grid.clone(), cfl_ratio: scheme.cfl_ratio })
}

/// Space-quadratic, time-linear test function with analytic derivatives.
#[derive(Debug, Clone)]
pub struct QuadraticProbe {
    pub c0: f64,
    pub ct: f64,
    pub cx: Vec<f64>,
    /// k×k symmetric.
    pub cxx: DMatrix<f64>,
}

impl QuadraticProbe {
    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        let mut v = self.c0 + self.ct * t;
        for (a, &xa) in x.iter().enumerate() {
            v += self.cx[a] * xa;
            for (b, &xb) in x.iter().enumerate() {
                v += 0.5 * self.cxx[(a, b)] * xa * xb;
            }
        }
        v
    }

    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        for a in 0..x.len() {
            out[a] = self.cx[a];
            for (b, &xb) in x.iter().enumerate() {
                out[a] += self.cxx[(a, b)] * xb;
            }
        }
    }
}

/// Windowed residuals of the frozen-coefficient comparison equation.
#[derive(Debug, Clone, Serialize)]
pub struct GeneratorConsistency {
    /// (window length, Ȳ_t / window).
    pub window_values: Vec<(f64, f64)>,
    /// e^l(t,x,0,0) + 2G([k_ij(t,x,0,0)]).
    pub instantaneous: f64,
    /// |last window value − instantaneous|.
    pub converged_gap: f64,
}

/// Integrates the scalar comparison ODE
/// Ȳ_s = ∫_s^{t'} [e^l(r, x, Ȳ_r, 0) + 2G([k^l_ij(r, x, Ȳ_r, 0)])] dr
/// over shrinking windows t' − t ∈ {w, w/2, w/4} and reports (t'−t)^{-1}·Ȳ_t
/// against the instantaneous integrand at the probe point. e^l and k^l_ij
/// are assembled from the test function ψ and the solved field u.
pub fn generator_consistency(
    sys: &PdeSystem,
    u: &ValueField,
    l: usize,
    t: f64,
    x: &[f64],
    probe: &QuadraticProbe,
    window: f64,
) -> Result<GeneratorConsistency> {
    let k = sys.spec.k;
    let d = sys.spec.d;
    let n = sys.spec.n;
    let mut dyn_eval = DynamicsEval::default();
    let mut grad = vec![0.0; k];

    // integrand e^l(s, x, y, 0) + 2G([k_ij(s, x, y, 0)]) at frozen x
    let mut integrand = |s: f64, y: f64| -> Result<f64> {
        sys.spec.dynamics.eval_at(s, x, &mut dyn_eval)?;
        probe.gradient(x, &mut grad);
        let mut z = [0.0f64; 4];
        for b in 0..d {
            let mut acc = 0.0;
            for a in 0..k {
                acc += dyn_eval.sigma[a * d + b] * grad[a];
            }
            z[b] = acc;
        }
        let z = &z[..d];
        // solution vector with the own slot living at y + ψ
        let mut r = [0.0f64; 16];
        for j in 0..n {
            r[j] = if j == l { y + probe.value(s, x) } else { u.interpolate_tx(s, j, x) };
        }
        let ctx = EvalContext::new(s, x, &r[..n], z);
        let f_val = sys.spec.f_expr(l).eval(&ctx)?;
        let mut bp = 0.0;
        for a in 0..k {
            bp += dyn_eval.b[a] * grad[a];
        }
        let e_val = f_val + probe.ct + bp;
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let g = sys.spec.g_expr(l, i.min(j), i.max(j)).eval(&ctx)?;
                let mut ph = 0.0;
                for a in 0..k {
                    ph += grad[a] * dyn_eval.h[(i * d + j) * k + a];
                }
                let mut sps = 0.0;
                for a in 0..k {
                    for b in 0..k {
                        sps += dyn_eval.sigma[a * d + i] * probe.cxx[(a, b)] * dyn_eval.sigma[b * d + j];
                    }
                }
                m[(i, j)] = g + ph + 0.5 * sps;
            }
        }
        Ok(e_val + 2.0 * sys.gfunc.eval(&m)?)
    };

    let instantaneous = integrand(t, 0.0)?;
    let mut window_values = Vec::new();
    let mut w = window;
    for _ in 0..3 {
        // backward RK4 from Ȳ_{t+w} = 0 down to t
        let steps = 64;
        let hs = w / steps as f64;
        let mut y = 0.0;
        let mut s = t + w;
        for _ in 0..steps {
            // dȲ/ds = −integrand(s, Ȳ)
            let k1 = -integrand(s, y)?;
            let k2 = -integrand(s - 0.5 * hs, y - 0.5 * hs * k1)?;
            let k3 = -integrand(s - 0.5 * hs, y - 0.5 * hs * k2)?;
            let k4 = -integrand(s - hs, y - hs * k3)?;
            y -= hs / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            s -= hs;
            if !y.is_finite() {
                return Err(Error::Solver(format!("comparison ODE diverged at s = {s}")));
            }
        }
        window_values.push((w, y / w));
        w *= 0.5;
    }
    let converged_gap = (window_values.last().unwrap().1 - instantaneous).abs();
    Ok(GeneratorConsistency { window_values, instantaneous, converged_gap })
}

/// Convenience: the canonical G-function from an uncertainty set.
pub fn gfunction(gamma: GammaSet) -> GFunction {
    GFunction::new(gamma)
}
