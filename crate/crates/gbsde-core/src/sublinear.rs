//! The sublinear operator G, its uncertainty set of covariance matrices,
//! and the discrete one-step upper expectation that every solver builds on.
//!
//! G(A) = ½ sup_{γ ∈ Γ} tr(γ A) over a set Γ of symmetric matrices bounded
//! below by σ_min²·I. The one-step law of a Brownian increment under a
//! fixed scenario γ is N(0, γ·dt), realized deterministically by a
//! Gauss–Hermite rule scaled by chol(γ·dt); the upper expectation is the
//! max over a finite discretization of Γ.

use crate::error::{Error, Result};
use nalgebra::DMatrix;

/// Uncertainty set of one-step covariance matrices.
#[derive(Debug, Clone, PartialEq)]
pub enum GammaKind {
    /// Scalar volatility interval [σ_min², σ̄²]; only valid for d = 1.
    Interval { sigma_min_sq: f64, sigma_max_sq: f64 },
    /// Explicit list of d×d symmetric matrices.
    Finite(Vec<DMatrix<f64>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GammaSet {
    dim: usize,
    kind: GammaKind,
    sigma_min_sq: f64,
    sigma_max_sq: f64,
}

impl GammaSet {
    /// Interval uncertainty set for d = 1.
    pub fn interval(sigma_min_sq: f64, sigma_max_sq: f64) -> Result<Self> {
        if !(sigma_min_sq > 0.0) || !(sigma_max_sq >= sigma_min_sq) {
            return Err(Error::Config(format!(
                "interval gamma set needs 0 < sigma_min_sq <= sigma_max_sq, got [{sigma_min_sq}, {sigma_max_sq}]"
            )));
        }
        Ok(GammaSet {
            dim: 1,
            kind: GammaKind::Interval { sigma_min_sq, sigma_max_sq },
            sigma_min_sq,
            sigma_max_sq,
        })
    }

    /// Classical case: a single covariance (no volatility ambiguity).
    pub fn singleton(gamma: f64) -> Result<Self> {
        GammaSet::interval(gamma, gamma)
    }

    /// Finite set of d×d symmetric matrices, each required to dominate
    /// σ_min²·I for some σ_min² > 0.
    pub fn finite(dim: usize, matrices: Vec<DMatrix<f64>>) -> Result<Self> {
        if dim == 0 || dim > 2 {
            return Err(Error::Config(format!("supported Brownian dimensions are 1 and 2, got {dim}")));
        }
        if matrices.is_empty() {
            return Err(Error::Config("finite gamma set must not be empty".into()));
        }
        let mut min_eig = f64::INFINITY;
        let mut max_eig = f64::NEG_INFINITY;
        for (idx, m) in matrices.iter().enumerate() {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::Config(format!(
                    "gamma matrix {idx} has shape {}x{}, expected {dim}x{dim}",
                    m.nrows(),
                    m.ncols()
                )));
            }
            check_symmetric(m)?;
            let eig = m.clone().symmetric_eigen();
            for v in eig.eigenvalues.iter() {
                min_eig = min_eig.min(*v);
                max_eig = max_eig.max(*v);
            }
        }
        if !(min_eig > 0.0) {
            return Err(Error::Config(format!(
                "finite gamma set is degenerate: minimal eigenvalue {min_eig} (needs sigma_min^2 > 0)"
            )));
        }
        Ok(GammaSet { dim, kind: GammaKind::Finite(matrices), sigma_min_sq: min_eig, sigma_max_sq: max_eig })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &GammaKind {
        &self.kind
    }

    /// Largest sigma_min² with γ ⪰ σ_min²·I for every member.
    pub fn sigma_min_sq(&self) -> f64 {
        self.sigma_min_sq
    }

    /// Smallest bound with γ ⪯ σ̄²·I for every member; the diffusion scale
    /// entering CFL bounds.
    pub fn sigma_max_sq(&self) -> f64 {
        self.sigma_max_sq
    }

    /// Finite one-step family: `m` equally spaced values for the interval
    /// kind (both endpoints included, duplicates collapsed), the list
    /// itself for the finite kind.
    pub fn discretize(&self, m: usize) -> Result<Vec<DMatrix<f64>>> {
        match &self.kind {
            GammaKind::Interval { sigma_min_sq, sigma_max_sq } => {
                if m < 2 {
                    return Err(Error::Config(format!(
                        "interval gamma discretization needs m >= 2, got {m}"
                    )));
                }
                let mut out: Vec<DMatrix<f64>> = Vec::with_capacity(m);
                for i in 0..m {
                    let v = sigma_min_sq
                        + (sigma_max_sq - sigma_min_sq) * i as f64 / (m - 1) as f64;
                    if out.last().map(|g| g[(0, 0)] == v) != Some(true) {
                        out.push(DMatrix::from_element(1, 1, v));
                    }
                }
                Ok(out)
            }
            GammaKind::Finite(list) => Ok(list.clone()),
        }
    }
}

fn check_symmetric(a: &DMatrix<f64>) -> Result<()> {
    let scale = 1.0 + a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..a.nrows() {
        for j in 0..i {
            if (a[(i, j)] - a[(j, i)]).abs() > 1e-12 * scale {
                return Err(Error::InvalidInput(format!(
                    "matrix is not symmetric: entry ({i},{j}) = {} vs ({j},{i}) = {}",
                    a[(i, j)],
                    a[(j, i)]
                )));
            }
        }
    }
    Ok(())
}

/// The sublinear function G associated with an uncertainty set.
#[derive(Debug, Clone)]
pub struct GFunction {
    pub gamma: GammaSet,
}

impl GFunction {
    pub fn new(gamma: GammaSet) -> Self {
        GFunction { gamma }
    }

    /// G(A) = ½ sup_γ tr(γA). Closed form for the interval kind,
    /// max over the list for the finite kind.
    pub fn eval(&self, a: &DMatrix<f64>) -> Result<f64> {
        if a.nrows() != self.gamma.dim || a.ncols() != self.gamma.dim {
            return Err(Error::InvalidInput(format!(
                "G argument has shape {}x{}, expected {}x{}",
                a.nrows(),
                a.ncols(),
                self.gamma.dim,
                self.gamma.dim
            )));
        }
        check_symmetric(a)?;
        match &self.gamma.kind {
            GammaKind::Interval { sigma_min_sq, sigma_max_sq } => {
                Ok(Self::interval_closed_form(a[(0, 0)], *sigma_min_sq, *sigma_max_sq))
            }
            GammaKind::Finite(list) => {
                let mut best = f64::NEG_INFINITY;
                for g in list {
                    best = best.max(0.5 * (g * a).trace());
                }
                Ok(best)
            }
        }
    }

    /// Scalar convenience for d = 1.
    pub fn eval_scalar(&self, a: f64) -> Result<f64> {
        self.eval(&DMatrix::from_element(1, 1, a))
    }

    /// ½(σ̄² a⁺ − σ_min² a⁻).
    pub fn interval_closed_form(a: f64, sigma_min_sq: f64, sigma_max_sq: f64) -> f64 {
        0.5 * (sigma_max_sq * a.max(0.0) - sigma_min_sq * (-a).max(0.0))
    }

    /// ½ max over an explicit discretized family, with the maximizer's index
    /// (ties broken by smallest index).
    pub fn eval_discrete(&self, a: &DMatrix<f64>, gammas: &[DMatrix<f64>]) -> Result<(f64, usize)> {
        if gammas.is_empty() {
            return Err(Error::Config("discretized gamma set is empty".into()));
        }
        check_symmetric(a)?;
        let mut best = f64::NEG_INFINITY;
        let mut best_idx = 0;
        for (i, g) in gammas.iter().enumerate() {
            let v = 0.5 * (g * a).trace();
            if v > best {
                best = v;
                best_idx = i;
            }
        }
        Ok((best, best_idx))
    }
}

/// Quadrature rule for a standard d-dimensional normal reference measure:
/// positive weights summing to one, nodes symmetric about the origin,
/// second moment equal to the identity.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    dim: usize,
    nodes_per_dim: usize,
    /// Flattened points, `count * dim`.
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl QuadratureRule {
    /// Gauss–Hermite rule with `q` nodes per dimension (exact for
    /// polynomials of degree 2q−1 against the Gaussian weight).
    pub fn gauss_hermite(dim: usize, q: usize) -> Result<Self> {
        if q < 2 {
            return Err(Error::Config(format!("quadrature needs q >= 2 nodes per dimension, got {q}")));
        }
        if dim == 0 || dim > 2 {
            return Err(Error::Config(format!("supported Brownian dimensions are 1 and 2, got {dim}")));
        }
        let (nodes1, weights1) = hermite_nodes(q);
        let (points, weights) = match dim {
            1 => (nodes1.clone(), weights1.clone()),
            _ => {
                let mut pts = Vec::with_capacity(q * q * 2);
                let mut ws = Vec::with_capacity(q * q);
                for (i, &xi) in nodes1.iter().enumerate() {
                    for (j, &xj) in nodes1.iter().enumerate() {
                        pts.push(xi);
                        pts.push(xj);
                        ws.push(weights1[i] * weights1[j]);
                    }
                }
                (pts, ws)
            }
        };
        let rule = QuadratureRule { dim, nodes_per_dim: q, points, weights };
        rule.validate()?;
        Ok(rule)
    }

    fn validate(&self) -> Result<()> {
        let mut sum = 0.0;
        for &w in &self.weights {
            if !(w > 0.0) {
                return Err(Error::Config(format!("non-positive quadrature weight {w}")));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("quadrature weights sum to {sum}, expected 1")));
        }
        for a in 0..self.dim {
            for b in 0..self.dim {
                let mut second = 0.0;
                for i in 0..self.count() {
                    let p = self.point(i);
                    second += self.weights[i] * p[a] * p[b];
                }
                let expect = if a == b { 1.0 } else { 0.0 };
                if (second - expect).abs() > 1e-12 {
                    return Err(Error::Config(format!(
                        "quadrature second moment ({a},{b}) = {second}, expected {expect}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nodes_per_dim(&self) -> usize {
        self.nodes_per_dim
    }

    pub fn count(&self) -> usize {
        self.weights.len()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Nodes and weights of the probabilists' Gauss–Hermite rule (standard
/// normal weight), symmetrized so paired nodes are exact negatives and the
/// middle node of an odd rule is exactly zero.
fn hermite_nodes(q: usize) -> (Vec<f64>, Vec<f64>) {
    // Golub–Welsch: Jacobi matrix with off-diagonal sqrt(i).
    let mut jacobi = DMatrix::zeros(q, q);
    for i in 0..q - 1 {
        let v = ((i + 1) as f64).sqrt();
        jacobi[(i, i + 1)] = v;
        jacobi[(i + 1, i)] = v;
    }
    let eig = jacobi.symmetric_eigen();
    let mut pairs: Vec<(f64, f64)> = (0..q)
        .map(|i| {
            let w = eig.eigenvectors[(0, i)];
            (eig.eigenvalues[i], w * w)
        })
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));

    // enforce exact symmetry about the origin
    let mut nodes = vec![0.0; q];
    let mut weights = vec![0.0; q];
    for i in 0..q / 2 {
        let j = q - 1 - i;
        let node = 0.5 * (pairs[j].0 - pairs[i].0);
        let weight = 0.5 * (pairs[i].1 + pairs[j].1);
        nodes[i] = -node;
        nodes[j] = node;
        weights[i] = weight;
        weights[j] = weight;
    }
    if q % 2 == 1 {
        nodes[q / 2] = 0.0;
        weights[q / 2] = pairs[q / 2].1;
    }
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    (nodes, weights)
}

/// One-step increment law under a fixed scenario γ: the quadrature rule
/// scaled by chol(γ·dt).
#[derive(Debug, Clone)]
pub struct OneStepMeasure {
    pub gamma: DMatrix<f64>,
    pub dt: f64,
    /// Flattened increments, `count * dim`.
    increments: Vec<f64>,
    weights: Vec<f64>,
}

impl OneStepMeasure {
    pub fn new(gamma: DMatrix<f64>, dt: f64, rule: &QuadratureRule) -> Result<Self> {
        if dt <= 0.0 {
            return Err(Error::Config(format!("time step must be positive, got {dt}")));
        }
        let d = gamma.nrows();
        if d != rule.dim() {
            return Err(Error::InvalidInput(format!(
                "gamma dimension {d} does not match quadrature dimension {}",
                rule.dim()
            )));
        }
        let scaled = &gamma * dt;
        let chol = scaled
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidInput("gamma*dt is not positive definite".into()))?;
        let l = chol.l();
        let mut increments = Vec::with_capacity(rule.count() * d);
        for i in 0..rule.count() {
            let p = rule.point(i);
            for a in 0..d {
                let mut v = 0.0;
                for b in 0..=a {
                    v += l[(a, b)] * p[b];
                }
                increments.push(v);
            }
        }
        let measure = OneStepMeasure {
            gamma,
            dt,
            increments,
            weights: rule.weights().to_vec(),
        };
        measure.validate(&scaled)?;
        Ok(measure)
    }

    fn validate(&self, target: &DMatrix<f64>) -> Result<()> {
        let d = target.nrows();
        let scale = target.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for a in 0..d {
            for b in 0..d {
                let mut cov = 0.0;
                for i in 0..self.count() {
                    let p = self.increment(i);
                    cov += self.weights[i] * p[a] * p[b];
                }
                if (cov - target[(a, b)]).abs() > 1e-10 * scale.max(1e-300) {
                    return Err(Error::InvalidInput(format!(
                        "one-step increment covariance ({a},{b}) = {cov}, expected {}",
                        target[(a, b)]
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.weights.len()
    }

    pub fn increment(&self, i: usize) -> &[f64] {
        let d = self.gamma.nrows();
        &self.increments[i * d..(i + 1) * d]
    }

    pub fn weight(&self, i: usize) -> f64 {
        self.weights[i]
    }
}

/// Maximizer report of [`one_step_sup_expectation`].
#[derive(Debug, Clone)]
pub struct SupExpectation {
    pub value: f64,
    /// Index of a maximizing γ in the discretized set (smallest on ties).
    pub argmax_index: usize,
    pub argmax_gamma: DMatrix<f64>,
}

/// Upper expectation of v(ΔB) over one time step:
/// max over γ of Σ_nodes w·v(chol(γ·dt)·node).
pub fn one_step_sup_expectation<F>(
    v: F,
    dt: f64,
    rule: &QuadratureRule,
    gammas: &[DMatrix<f64>],
) -> Result<SupExpectation>
where
    F: Fn(&[f64]) -> f64,
{
    if gammas.is_empty() {
        return Err(Error::Config("discretized gamma set is empty".into()));
    }
    let mut best: Option<SupExpectation> = None;
    for (gi, gamma) in gammas.iter().enumerate() {
        let measure = OneStepMeasure::new(gamma.clone(), dt, rule)?;
        let mut acc = 0.0;
        for i in 0..measure.count() {
            let dz = measure.increment(i);
            let val = v(dz);
            if !val.is_finite() {
                return Err(Error::NumericalDomain {
                    context: format!("one_step_sup_expectation at node {dz:?} (gamma {gi})"),
                    msg: format!("integrand produced {val}"),
                });
            }
            acc += measure.weight(i) * val;
        }
        let better = match &best {
            None => true,
            Some(b) => acc > b.value,
        };
        if better {
            best = Some(SupExpectation { value: acc, argmax_index: gi, argmax_gamma: gamma.clone() });
        }
    }
    Ok(best.expect("non-empty gamma set"))
}
