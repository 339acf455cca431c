//! Prescribed Gauss curvature on flat 2D grids.
//!
//! Minimizes `J(u) = ½∫|∇u|²` over zero-mean `u` with `∫K e^{2u} = 0`. At a
//! constrained critical point `−Δu + c₁K e^{2u} + c₂ = 0`; integrating gives
//! `c₂ = 0`, testing against `e^{−2u}` gives `c₁ < 0`, and `ũ = u + ½ln(−c₁)`
//! solves `−Δũ = K e^{2ũ}` with zero geodesic curvature on cylinder ends.
//! All identities hold exactly for the discrete stiffness form, so the
//! certificate measures optimizer convergence only.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::conformal::{check_necessary, conformal_gauss_curvature, ConformalError, VerdictCase};
use crate::grid::{GridError, GridManifold, ScalarField};
use crate::linalg::{dot, EllipticOperator, LinalgError, SolverOptions};

#[derive(Debug, Error)]
pub enum Surface2dError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error("surface solver needs a 2D grid, got dimension {0}")]
    NotTwoDimensional(usize),
    #[error("background must be flat with σ ≡ 0")]
    CurvedBackground,
    #[error("necessary condition violated: {0}")]
    NecessaryConditionViolated(String),
    #[error("bisection for a feasible start failed: {0}")]
    BisectionFailed(String),
    #[error("start is not feasible: mean {mean:e}, moment {moment:e}")]
    Infeasible { mean: f64, moment: f64 },
    #[error("no convergence after {steps} steps (projected gradient {grad_norm:e})")]
    NoConvergence { steps: usize, grad_norm: f64 },
    #[error("line search stalled at step {step}")]
    LineSearchStalled { step: usize },
    #[error("degenerate multiplier: numerator {numerator:e}")]
    DegenerateMultiplier { numerator: f64 },
}

fn require_flat_2d(grid: &GridManifold) -> Result<(), Surface2dError> {
    if grid.dim() != 2 {
        return Err(Surface2dError::NotTwoDimensional(grid.dim()));
    }
    if grid.coeff_k().sup_norm() != 0.0 || grid.coeff_sigma().sup_norm() != 0.0 {
        return Err(Surface2dError::CurvedBackground);
    }
    Ok(())
}

fn mean_tol(grid: &GridManifold) -> f64 {
    1e-10 * grid.volume()
}

fn moment_tol(grid: &GridManifold, k: &ScalarField) -> f64 {
    1e-9 * k.sup_norm() * grid.volume()
}

pub fn energy(grid: &GridManifold, u: &[f64]) -> f64 {
    let mut mu = vec![0.0; u.len()];
    grid.apply_stiffness(u, &mut mu);
    0.5 * dot(u, &mu)
}

/// Gradient of `J` with respect to the nodal values.
pub fn energy_gradient(grid: &GridManifold, u: &[f64]) -> Vec<f64> {
    let mut mu = vec![0.0; u.len()];
    grid.apply_stiffness(u, &mut mu);
    mu
}

/// `∫K e^{2u}`.
pub fn k_moment(grid: &GridManifold, k: &ScalarField, u: &[f64]) -> f64 {
    let terms: Vec<f64> = (0..u.len())
        .map(|i| grid.volume_weights()[i] * k.values()[i] * (2.0 * u[i]).exp())
        .collect();
    crate::grid::pairwise_sum(&terms)
}

fn weighted_mean(grid: &GridManifold, u: &[f64]) -> f64 {
    dot(u, grid.volume_weights()) / grid.volume()
}

/// Zero-mean `u₀ = tφ` with `∫K e^{2u₀} = 0`. `K ≡ 0` returns `u ≡ 0`.
pub fn feasible_start(grid: &GridManifold, k: &ScalarField) -> Result<ScalarField, Surface2dError> {
    require_flat_2d(grid)?;
    let verdict = check_necessary(grid, k)?;
    match verdict.case {
        VerdictCase::IdenticallyZero => return Ok(grid.constant(0.0)),
        VerdictCase::Violation => return Err(Surface2dError::NecessaryConditionViolated(verdict.reason)),
        VerdictCase::Admissible => {}
    }
    let top = 0.5 * k.max();
    let w = grid.volume_weights();
    let indicator: Vec<f64> = (0..grid.node_count())
        .map(|i| if k.values()[i] > top { w[i] } else { 0.0 })
        .collect();
    let smoother = EllipticOperator::uniform(grid, 1.0, 100.0, 0.0)?;
    let mut phi = smoother.solve(&indicator, &SolverOptions::default())?;
    let m = weighted_mean(grid, &phi);
    phi.iter_mut().for_each(|x| *x -= m);
    let scale = phi.iter().fold(0.0f64, |a, &x| a.max(x.abs()));
    phi.iter_mut().for_each(|x| *x /= scale);
    let peak = phi.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    // Sign of ∫K e^{2tφ}, evaluated without overflow.
    let sign_moment = |t: f64| -> f64 {
        let terms: Vec<f64> = (0..phi.len())
            .map(|i| w[i] * k.values()[i] * (2.0 * t * (phi[i] - peak)).exp())
            .collect();
        crate::grid::pairwise_sum(&terms)
    };
    let mut hi = 1.0;
    let mut doublings = 0;
    while sign_moment(hi) <= 0.0 {
        hi *= 2.0;
        doublings += 1;
        if doublings > 60 {
            return Err(Surface2dError::BisectionFailed("moment stays negative along the search ray".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if sign_moment(mid) <= 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let pick = |t: f64| -> Vec<f64> { phi.iter().map(|x| t * x).collect() };
    let (ul, uh) = (pick(lo), pick(hi));
    let mut u = if k_moment(grid, k, &ul).abs() <= k_moment(grid, k, &uh).abs() { ul } else { uh };
    let m = weighted_mean(grid, &u);
    u.iter_mut().for_each(|x| *x -= m);
    let moment = k_moment(grid, k, &u);
    if moment.abs() > moment_tol(grid, k) {
        return Err(Surface2dError::BisectionFailed(format!("final moment {moment:e}")));
    }
    Ok(ScalarField::interior(u))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MinimizeOptions {
    pub max_steps: usize,
    /// Stop when the projected gradient sup norm is at most `tol·(1+J)`.
    pub tol: f64,
    pub armijo: f64,
    /// Zeroth-order weight of the Sobolev metric `M + αW`.
    pub alpha: f64,
    pub max_halvings: usize,
}

impl Default for MinimizeOptions {
    fn default() -> Self {
        Self {
            max_steps: 20000,
            tol: 1e-7,
            armijo: 1e-4,
            alpha: 1.0,
            max_halvings: 60,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ConstraintState {
    pub u: ScalarField,
    pub mean_u: f64,
    pub k_moment: f64,
    pub j_value: f64,
    pub mu_mean: f64,
    pub mu_k: f64,
    pub grad_norm: f64,
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OptimizerRecord {
    pub step: usize,
    pub j: f64,
    pub grad_norm: f64,
    pub mean_u: f64,
    pub k_moment: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct OptimizerTrace {
    pub records: Vec<OptimizerRecord>,
}

impl OptimizerTrace {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "step,J,grad_norm,mean_u,K_moment")?;
        for r in &self.records {
            writeln!(out, "{},{:e},{:e},{:e},{:e}", r.step, r.j, r.grad_norm, r.mean_u, r.k_moment)?;
        }
        Ok(())
    }
}

fn solve2(g: [[f64; 2]; 2], r: [f64; 2]) -> [f64; 2] {
    let det = g[0][0] * g[1][1] - g[0][1] * g[1][0];
    [
        (r[0] * g[1][1] - r[1] * g[0][1]) / det,
        (g[0][0] * r[1] - g[1][0] * r[0]) / det,
    ]
}

/// Multipliers `(μ_mean, μ_K)` of `∇J + μ_mean W1 + μ_K·2WKe^{2u} ≈ 0` in
/// the `L²` sense, and the sup norm of what remains of `−Δu`.
fn l2_projection(grid: &GridManifold, k: &ScalarField, u: &[f64], grad: &[f64]) -> (f64, f64, f64) {
    let w = grid.volume_weights();
    let b2: Vec<f64> = (0..u.len()).map(|i| 2.0 * k.values()[i] * (2.0 * u[i]).exp()).collect();
    let wb2: Vec<f64> = b2.iter().zip(w).map(|(b, w)| b * w).collect();
    let gram = [[grid.volume(), wb2.iter().sum()], [wb2.iter().sum(), dot(&b2, &wb2)]];
    let nu = solve2(gram, [grad.iter().sum(), dot(&b2, grad)]);
    let sup = (0..u.len())
        .map(|i| (grad[i] / w[i] - nu[0] - nu[1] * b2[i]).abs())
        .fold(0.0, f64::max);
    (-nu[0], -nu[1], sup)
}

/// Zero the mean, then Newton on the moment along the mean-free direction `q`.
fn restore(grid: &GridManifold, k: &ScalarField, v: &mut [f64], q: &[f64]) -> bool {
    let m = weighted_mean(grid, v);
    v.iter_mut().for_each(|x| *x -= m);
    let w = grid.volume_weights();
    let tol = 1e-3 * moment_tol(grid, k);
    for _ in 0..30 {
        let e: Vec<f64> = (0..v.len()).map(|i| w[i] * k.values()[i] * (2.0 * v[i]).exp()).collect();
        let f = crate::grid::pairwise_sum(&e);
        if f.abs() <= tol {
            return true;
        }
        let df = 2.0 * dot(&e, q);
        if df == 0.0 || !df.is_finite() {
            return false;
        }
        let s = -f / df;
        v.iter_mut().zip(q).for_each(|(x, qi)| *x += s * qi);
    }
    k_moment(grid, k, v).abs() <= moment_tol(grid, k)
}

/// Sobolev-preconditioned projected gradient descent with Armijo
/// backtracking and constraint restoration after every trial step.
pub fn minimize_constrained(
    grid: &GridManifold,
    k: &ScalarField,
    u0: &ScalarField,
    opts: &MinimizeOptions,
) -> Result<(ConstraintState, OptimizerTrace), Surface2dError> {
    require_flat_2d(grid)?;
    grid.check_interior(k)?;
    grid.check_interior(u0)?;
    let mut u = u0.values().to_vec();
    let mean0 = weighted_mean(grid, &u);
    let moment0 = k_moment(grid, k, &u);
    if mean0.abs() * grid.volume() > mean_tol(grid) || moment0.abs() > moment_tol(grid, k) {
        return Err(Surface2dError::Infeasible {
            mean: mean0,
            moment: moment0,
        });
    }
    let w = grid.volume_weights().to_vec();
    let metric = EllipticOperator::uniform(grid, 1.0, opts.alpha, 0.0)?;
    let cg = SolverOptions {
        rel_tol: 1e-12,
        ..SolverOptions::default()
    };
    let mut trace = OptimizerTrace::default();
    let mut tau_prev: f64 = 1.0;
    let mut j = energy(grid, &u);
    for step in 0..=opts.max_steps {
        let grad = energy_gradient(grid, &u);
        let (mu_mean, mu_k, grad_norm) = l2_projection(grid, k, &u, &grad);
        let mean_u = weighted_mean(grid, &u);
        let moment = k_moment(grid, k, &u);
        trace.records.push(OptimizerRecord {
            step,
            j,
            grad_norm,
            mean_u,
            k_moment: moment,
        });
        if grad_norm <= opts.tol * (1.0 + j) {
            return Ok((
                ConstraintState {
                    u: ScalarField::interior(u),
                    mean_u,
                    k_moment: moment,
                    j_value: j,
                    mu_mean,
                    mu_k,
                    grad_norm,
                    steps: step,
                },
                trace,
            ));
        }
        if step == opts.max_steps {
            return Err(Surface2dError::NoConvergence {
                steps: step,
                grad_norm,
            });
        }

        // Remove the constraint-normal part pointwise first; forming the
        // projection from the full preconditioned gradient loses the small
        // remainder to cancellation near convergence.
        let c2: Vec<f64> = (0..u.len()).map(|i| 2.0 * w[i] * k.values()[i] * (2.0 * u[i]).exp()).collect();
        let perp: Vec<f64> = (0..u.len())
            .map(|i| grad[i] + mu_mean * w[i] + mu_k * c2[i])
            .collect();
        let gs = metric.solve(&perp, &cg)?;
        let d1 = vec![1.0 / opts.alpha; u.len()];
        let d2 = metric.solve(&c2, &cg)?;
        let c1_d1 = grid.volume() / opts.alpha;
        let c1_d2: f64 = d2.iter().zip(&w).map(|(d, w)| d * w).sum();
        let gram = [[c1_d1, c1_d2], [c1_d2, dot(&c2, &d2)]];
        let lam = solve2(gram, [dot(&w, &gs), dot(&c2, &gs)]);
        let dir: Vec<f64> = (0..u.len()).map(|i| gs[i] - lam[0] * d1[i] - lam[1] * d2[i]).collect();
        let slope = dot(&perp, &dir);
        let d2_mean = weighted_mean(grid, &d2);
        let q: Vec<f64> = d2.iter().map(|d| d - d2_mean).collect();

        let mut tau = (2.0 * tau_prev).min(4.0);
        let mut accepted = None;
        for _ in 0..opts.max_halvings {
            let mut trial: Vec<f64> = u.iter().zip(&dir).map(|(a, d)| a - tau * d).collect();
            if restore(grid, k, &mut trial, &q) {
                // J(u+s) − J(u) = gᵀs + ½sᵀMs, free of the cancellation in J(u+s) − J(u).
                let step_vec: Vec<f64> = trial.iter().zip(&u).map(|(a, b)| a - b).collect();
                let change = dot(&grad, &step_vec) + energy(grid, &step_vec);
                if change <= -opts.armijo * tau * slope && change <= 0.0 {
                    accepted = Some((trial, j + change));
                    break;
                }
            }
            tau *= 0.5;
        }
        match accepted {
            Some((trial, jt)) => {
                u = trial;
                j = jt;
                tau_prev = tau;
            }
            None => return Err(Surface2dError::LineSearchStalled { step }),
        }
    }
    unreachable!("loop returns on its last step")
}

#[derive(Clone, Debug, Serialize)]
pub struct GaussCertificate {
    /// `sup |−Δũ − K e^{2ũ}|` off the boundary.
    pub residual_interior: f64,
    /// Balanced outward derivative of `ũ` on cylinder ends.
    pub residual_boundary: Option<f64>,
    pub recovered_k: ScalarField,
    /// `∫K e^{2ũ}`, zero by Gauss–Bonnet.
    pub total_curvature: f64,
    pub min_u: f64,
    pub max_u: f64,
}

impl GaussCertificate {
    pub fn is_valid(&self, tol: f64) -> bool {
        self.residual_interior <= tol && self.residual_boundary.is_none_or(|b| b <= tol)
    }
}

/// Residuals of `−Δũ = K e^{2ũ}` for any field, independent of how it was
/// produced.
pub fn certify_gauss(grid: &GridManifold, k: &ScalarField, u: &ScalarField) -> Result<GaussCertificate, Surface2dError> {
    require_flat_2d(grid)?;
    grid.check_interior(k)?;
    let recovered_k = conformal_gauss_curvature(grid, u)?;
    let uv = u.values();
    let target: Vec<f64> = (0..uv.len()).map(|i| k.values()[i] * (2.0 * uv[i]).exp()).collect();
    let lap = grid.laplacian(u)?;
    let residual_interior = (0..uv.len())
        .filter(|&i| !grid.is_boundary(i))
        .map(|i| (-lap.values()[i] - target[i]).abs())
        .fold(0.0, f64::max);
    let residual_boundary = if grid.has_boundary() {
        let lap_target = ScalarField::boundary(grid.boundary_nodes().iter().map(|&i| -target[i]).collect());
        Some(grid.balanced_normal_derivative(u, &lap_target)?.sup_norm())
    } else {
        None
    };
    Ok(GaussCertificate {
        residual_interior,
        residual_boundary,
        recovered_k,
        total_curvature: k_moment(grid, k, uv),
        min_u: u.min(),
        max_u: u.max(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct GaussSolution {
    pub u: ScalarField,
    pub c1: f64,
    pub gamma: f64,
    pub certificate: GaussCertificate,
}

/// `c₁ = −(e^{−2u})ᵀMu / ∫K`, `γ = ½ln(−c₁)`, `ũ = u + γ`.
pub fn recover_solution(grid: &GridManifold, k: &ScalarField, state: &ConstraintState) -> Result<GaussSolution, Surface2dError> {
    require_flat_2d(grid)?;
    let u = state.u.values();
    let mu = energy_gradient(grid, u);
    let decay: Vec<f64> = u.iter().map(|x| (-2.0 * x).exp()).collect();
    let numerator = -dot(&decay, &mu);
    if !(numerator >= 1e-14) {
        return Err(Surface2dError::DegenerateMultiplier { numerator });
    }
    let total = grid.integrate(k)?;
    if !(total < 0.0) {
        return Err(Surface2dError::NecessaryConditionViolated(format!("∫K = {total:e} is not negative")));
    }
    let c1 = numerator / total;
    let gamma = 0.5 * (-c1).ln();
    let shifted = state.u.map(|x| x + gamma);
    let certificate = certify_gauss(grid, k, &shifted)?;
    Ok(GaussSolution {
        u: shifted,
        c1,
        gamma,
        certificate,
    })
}

/// `ũ ≡ 0` for `K ≡ 0`.
pub fn trivial_solution(grid: &GridManifold, k: &ScalarField) -> Result<GaussSolution, Surface2dError> {
    let u = grid.constant(0.0);
    let certificate = certify_gauss(grid, k, &u)?;
    Ok(GaussSolution {
        u,
        c1: 0.0,
        gamma: 0.0,
        certificate,
    })
}
