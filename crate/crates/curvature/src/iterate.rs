//! Monotone iteration between a verified lower and upper solution.
//!
//! Each step solves the shifted linear problem
//! `−aΔu_{k+1} + A u_{k+1} = (A − R − β)u_k + S u_k^{p−1}` with
//! `∂u_{k+1}/∂ν + B u_{k+1} = (B − κh)u_k + κH u_k^{p/2}`, written as an
//! increment `K_{A,B} δ = −rows(u_k)` so that the sign of `δ` is not polluted
//! by cancellation. Ordering `u₋ ≤ u_{k+1} ≤ u_k` is asserted at every step.

use std::io::Write;

use serde::Serialize;
use thiserror::Error;

use crate::conformal::{
    certify, equation_rows, pointwise_residuals, ConformalConstants, ConformalError, EquationData, SolutionCertificate,
};
use crate::grid::{GridError, GridManifold, ScalarField};
use crate::linalg::{EllipticOperator, LinalgError, SolverOptions};
use crate::subsuper::SubSuperPair;

#[derive(Debug, Error)]
pub enum IterateError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error("monotonicity violated at step {k}, node {node}: margin {margin:e}")]
    MonotonicityViolated { k: usize, node: usize, margin: f64 },
    #[error("no convergence after {max_iter} steps (residual {residual:e})")]
    NoConvergence { max_iter: usize, residual: f64 },
    #[error("limit collapsed to zero: min u = {min_u:e} below floor {floor:e}")]
    CollapsedToZero { min_u: f64, floor: f64 },
    #[error("sup|H| = {sup_h:e} exceeds the smallness budget {budget:e}")]
    SmallnessBudgetExceeded { sup_h: f64, budget: f64 },
    #[error("θ₁ must be negative if H < 0 somewhere")]
    ThetaOneNotNegative,
    #[error("θ₂ must be positive if H > 0 somewhere")]
    ThetaTwoNotPositive,
    #[error("boundary slack interval is empty: need {low:e} ≤ θ ≤ {high:e}")]
    ThetaInterval { low: f64, high: f64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("sandwich is not verified")]
    Unverified,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MonotoneConfig {
    /// Interior shift `A`.
    pub a_shift: f64,
    /// Boundary shift `B ≥ 0`.
    pub b_shift: f64,
    pub beta: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub max_iter: usize,
    pub tol_residual: f64,
    pub tol_monotone: f64,
    /// Envelope for `B − κ·max h`, the stand-in for the smallness of `sup|H|`.
    pub smallness_budget: f64,
}

impl MonotoneConfig {
    pub const DEFAULT_MAX_ITER: usize = 500;
    pub const DEFAULT_TOL_MONOTONE: f64 = 1e-10;
    pub const DEFAULT_BUDGET: f64 = 10.0;

    /// Config with `A`, `B`, `θ₁`, `θ₂` chosen from the pair and default
    /// tolerances.
    pub fn for_pair(grid: &GridManifold, data: &EquationData, pair: &SubSuperPair) -> Result<Self, IterateError> {
        let lo = pair.lower.min().max(0.0);
        let hi = pair.upper.max();
        let a_shift = choose_a(grid, &data.s, data.beta, lo, hi)?;
        let (b_shift, theta1, theta2) = if grid.has_boundary() {
            let h = data.boundary_h.clone().unwrap_or_else(|| grid.boundary_constant(0.0));
            let lo_b = grid.restrict_to_boundary(&pair.lower)?.min().max(0.0);
            let hi_b = grid.restrict_to_boundary(&pair.upper)?.max();
            let b = choose_b(grid, &h, lo_b, hi_b)?;
            let (t1, t2) = choose_thetas(grid, data, pair)?;
            (b, t1, t2)
        } else {
            (0.0, 0.0, 0.0)
        };
        Ok(Self {
            a_shift,
            b_shift,
            beta: data.beta,
            theta1,
            theta2,
            max_iter: Self::DEFAULT_MAX_ITER,
            tol_residual: 1e-8 * (1.0 + data.s.sup_norm()),
            tol_monotone: Self::DEFAULT_TOL_MONOTONE,
            smallness_budget: Self::DEFAULT_BUDGET,
        })
    }
}

fn shift_with_margin(worst: f64) -> f64 {
    let v = worst + 1e-6 * worst.abs().max(1.0);
    v.max(1e-6)
}

/// Smallest `A` keeping `t ↦ At − (R+β)t + S t^{p−1}` increasing on
/// `[u_lo, u_hi]`, plus a small margin.
pub fn choose_a(grid: &GridManifold, s: &ScalarField, beta: f64, u_lo: f64, u_hi: f64) -> Result<f64, IterateError> {
    let c = ConformalConstants::for_grid(grid)?;
    grid.check_interior(s)?;
    if !(0.0 <= u_lo && u_lo <= u_hi) {
        return Err(IterateError::InvalidConfig(format!("range [{u_lo}, {u_hi}]")));
    }
    let ends = [u_lo.powf(c.p_minus_2), u_hi.powf(c.p_minus_2)];
    let worst = s
        .values()
        .iter()
        .zip(grid.coeff_r().values())
        .flat_map(|(&sv, &r)| ends.map(|t| r + beta - sv * (c.p - 1.0) * t))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(shift_with_margin(worst))
}

/// Smallest `B ≥ 0` keeping `t ↦ Bt − κht + κH t^{p/2}` increasing on
/// `[u_lo, u_hi]`, plus a small margin.
pub fn choose_b(grid: &GridManifold, h_target: &ScalarField, u_lo: f64, u_hi: f64) -> Result<f64, IterateError> {
    let c = ConformalConstants::for_grid(grid)?;
    grid.check_boundary(h_target)?;
    if !(0.0 <= u_lo && u_lo <= u_hi) {
        return Err(IterateError::InvalidConfig(format!("range [{u_lo}, {u_hi}]")));
    }
    let half = 0.5 * c.p_minus_2;
    let ends = [u_lo.powf(half), u_hi.powf(half)];
    let worst = h_target
        .values()
        .iter()
        .zip(grid.coeff_h().values())
        .flat_map(|(&hv, &h)| ends.map(|t| c.kappa * h - c.kappa * 0.5 * c.p * hv * t))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(shift_with_margin(worst))
}

/// Boundary slack constants for a pair. `g = ∂u/∂ν + κhu` is read off the
/// weak boundary rows with `H = 0`; the lower solution needs
/// `g₋ ≤ θ₁u₋ ≤ κH u₋^{p/2}` and the upper `g₊ ≥ θ₂u₊ ≥ κH u₊^{p/2}`.
pub fn choose_thetas(grid: &GridManifold, data: &EquationData, pair: &SubSuperPair) -> Result<(f64, f64), IterateError> {
    let c = ConformalConstants::for_grid(grid)?;
    if !grid.has_boundary() {
        return Err(GridError::NoBoundary.into());
    }
    let h_target = data.boundary_h.clone().unwrap_or_else(|| grid.boundary_constant(0.0));
    let free = EquationData {
        s: data.s.clone(),
        boundary_h: None,
        beta: data.beta,
    };
    let at = c.a * grid.boundary_weight();
    let rows_lo = equation_rows(grid, &free, pair.lower.values())?;
    let rows_hi = equation_rows(grid, &free, pair.upper.values())?;

    let (mut low1, mut high1) = (f64::NEG_INFINITY, 0.0f64);
    let (mut low2, mut high2) = (0.0f64, f64::INFINITY);
    for (b, &node) in grid.boundary_nodes().iter().enumerate() {
        let hb = h_target.values()[b];
        let ul = pair.lower.values()[node];
        if ul > 0.0 {
            low1 = low1.max(rows_lo[node] / at / ul);
            high1 = high1.min(c.kappa * hb * ul.powf(0.5 * c.p - 1.0));
        }
        let uh = pair.upper.values()[node];
        low2 = low2.max(c.kappa * hb * uh.powf(0.5 * c.p - 1.0));
        high2 = high2.min(rows_hi[node] / at / uh);
    }
    if h_target.min() < 0.0 && high1 >= 0.0 {
        high1 = -1e-6 * (1.0 + h_target.sup_norm());
    }
    if low1 > high1 {
        return Err(IterateError::ThetaInterval { low: low1, high: high1 });
    }
    if h_target.max() > 0.0 && low2 <= 0.0 {
        low2 = 1e-6 * (1.0 + h_target.sup_norm());
    }
    if low2 > high2 {
        return Err(IterateError::ThetaInterval { low: low2, high: high2 });
    }
    Ok((high1, low2))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRecord {
    pub k: usize,
    pub residual: f64,
    pub residual_boundary: f64,
    pub min_u: f64,
    pub max_u: f64,
    pub monotone_margin: f64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct IterationTrace {
    pub records: Vec<TraceRecord>,
    pub status: String,
}

impl IterationTrace {
    pub fn write_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "k,residual,residual_boundary,min_u,max_u,monotone_margin")?;
        for r in &self.records {
            writeln!(
                out,
                "{},{:e},{:e},{:e},{:e},{:e}",
                r.k, r.residual, r.residual_boundary, r.min_u, r.max_u, r.monotone_margin
            )?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MonotoneSolution {
    pub solution: ScalarField,
    pub certificate: SolutionCertificate,
    pub steps: usize,
}

/// Trace of a run together with its outcome, so failures keep their history.
#[derive(Debug)]
pub struct MonotoneRun {
    pub trace: IterationTrace,
    pub result: Result<MonotoneSolution, IterateError>,
}

fn check_config(grid: &GridManifold, data: &EquationData, pair: &SubSuperPair, cfg: &MonotoneConfig) -> Result<(), IterateError> {
    if !pair.verified {
        return Err(IterateError::Unverified);
    }
    data.validate(grid)?;
    grid.check_interior(&pair.lower)?;
    grid.check_interior(&pair.upper)?;
    if !(cfg.a_shift > 0.0 && cfg.a_shift.is_finite()) {
        return Err(IterateError::InvalidConfig(format!("A = {}", cfg.a_shift)));
    }
    if !(cfg.b_shift >= 0.0 && cfg.b_shift.is_finite()) {
        return Err(IterateError::InvalidConfig(format!("B = {}", cfg.b_shift)));
    }
    if cfg.beta > 0.0 || cfg.beta != data.beta {
        return Err(IterateError::InvalidConfig(format!("β = {} (data has {})", cfg.beta, data.beta)));
    }
    if !(cfg.tol_residual > 0.0 && cfg.tol_monotone >= 0.0) || cfg.max_iter == 0 {
        return Err(IterateError::InvalidConfig("tolerances".into()));
    }
    if cfg.theta1 > 0.0 || cfg.theta2 < 0.0 {
        return Err(IterateError::InvalidConfig(format!("θ₁ = {}, θ₂ = {}", cfg.theta1, cfg.theta2)));
    }
    if let Some(h) = &data.boundary_h {
        if h.min() < 0.0 && cfg.theta1 >= 0.0 {
            return Err(IterateError::ThetaOneNotNegative);
        }
        if h.max() > 0.0 && cfg.theta2 <= 0.0 {
            return Err(IterateError::ThetaTwoNotPositive);
        }
        let c = ConformalConstants::for_grid(grid)?;
        let envelope = cfg.b_shift - c.kappa * grid.coeff_h().max();
        if envelope > cfg.smallness_budget {
            return Err(IterateError::SmallnessBudgetExceeded {
                sup_h: h.sup_norm(),
                budget: cfg.smallness_budget,
            });
        }
    }
    Ok(())
}

/// Runs the scheme from `u₊` and returns the trace whatever the outcome.
pub fn run_monotone(grid: &GridManifold, data: &EquationData, pair: &SubSuperPair, cfg: &MonotoneConfig) -> MonotoneRun {
    let mut trace = IterationTrace::default();
    let result = iterate(grid, data, pair, cfg, &mut trace);
    trace.status = match &result {
        Ok(_) => "converged".to_string(),
        Err(e) => e.to_string(),
    };
    MonotoneRun { trace, result }
}

fn iterate(
    grid: &GridManifold,
    data: &EquationData,
    pair: &SubSuperPair,
    cfg: &MonotoneConfig,
    trace: &mut IterationTrace,
) -> Result<MonotoneSolution, IterateError> {
    check_config(grid, data, pair, cfg)?;
    let c = ConformalConstants::for_grid(grid)?;
    let robin = if grid.has_boundary() { cfg.b_shift } else { 0.0 };
    let op = EllipticOperator::uniform(grid, c.a, cfg.a_shift, robin)?;
    let opts = SolverOptions {
        rel_tol: 1e-13,
        ..SolverOptions::default()
    };
    let lower = pair.lower.values();
    let floor = 1e-8 * pair.upper.max();
    let mut u = pair.upper.values().to_vec();
    let mut delta = vec![0.0; u.len()];
    let mut last_residual = f64::INFINITY;
    for k in 0..=cfg.max_iter {
        let rows = equation_rows(grid, data, &u)?;
        let res = pointwise_residuals(grid, &rows)?;
        let residual = res.interior.sup_norm();
        let residual_boundary = res.boundary.sup_norm();
        last_residual = residual.max(residual_boundary);
        let (min_u, max_u) = u
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        if last_residual <= cfg.tol_residual {
            trace.records.push(TraceRecord {
                k,
                residual,
                residual_boundary,
                min_u,
                max_u,
                monotone_margin: 0.0,
            });
            if min_u <= floor {
                return Err(IterateError::CollapsedToZero { min_u, floor });
            }
            let solution = ScalarField::interior(u);
            let certificate = certify(grid, &solution, data)?;
            return Ok(MonotoneSolution {
                solution,
                certificate,
                steps: k,
            });
        }
        if k == cfg.max_iter {
            break;
        }
        let rhs: Vec<f64> = rows.iter().map(|r| -r).collect();
        delta.iter_mut().for_each(|d| *d = 0.0);
        op.solve_into(&rhs, &mut delta, &opts)?;
        let (node, margin) = delta
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        trace.records.push(TraceRecord {
            k,
            residual,
            residual_boundary,
            min_u,
            max_u,
            monotone_margin: margin,
        });
        if margin > cfg.tol_monotone {
            return Err(IterateError::MonotonicityViolated { k, node, margin });
        }
        for (ui, d) in u.iter_mut().zip(&delta) {
            *ui += d;
        }
        if let Some((node, gap)) = u
            .iter()
            .zip(lower)
            .map(|(a, b)| a - b)
            .enumerate()
            .find(|&(_, g)| g < -cfg.tol_monotone)
        {
            return Err(IterateError::MonotonicityViolated { k, node, margin: gap });
        }
    }
    Err(IterateError::NoConvergence {
        max_iter: cfg.max_iter,
        residual: last_residual,
    })
}

/// Closed-manifold scheme; the data must not carry boundary values.
pub fn monotone_closed(
    grid: &GridManifold,
    s: &ScalarField,
    pair: &SubSuperPair,
    cfg: &MonotoneConfig,
) -> Result<(MonotoneSolution, IterationTrace), IterateError> {
    if grid.has_boundary() {
        return Err(IterateError::InvalidConfig("closed scheme on a manifold with boundary".into()));
    }
    let data = EquationData::new(s.clone()).with_beta(cfg.beta);
    let run = run_monotone(grid, &data, pair, cfg);
    run.result.map(|sol| (sol, run.trace))
}

/// Robin scheme on a cylinder.
pub fn monotone_robin(
    grid: &GridManifold,
    s: &ScalarField,
    h_target: &ScalarField,
    pair: &SubSuperPair,
    cfg: &MonotoneConfig,
) -> Result<(MonotoneSolution, IterationTrace), IterateError> {
    if !grid.has_boundary() {
        return Err(GridError::NoBoundary.into());
    }
    let data = EquationData::new(s.clone())
        .with_boundary(h_target.clone())
        .with_beta(cfg.beta);
    let run = run_monotone(grid, &data, pair, cfg);
    run.result.map(|sol| (sol, run.trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn torus() -> GridManifold {
        GridManifold::build_torus(3, &[8, 8, 8], &[1.0; 3]).unwrap()
    }

    fn cylinder() -> GridManifold {
        GridManifold::build_cylinder(3, &[9, 8, 8], &[1.0; 3]).unwrap()
    }

    fn config(a: f64, b: f64) -> MonotoneConfig {
        MonotoneConfig {
            a_shift: a,
            b_shift: b,
            beta: 0.0,
            theta1: 0.0,
            theta2: 0.0,
            max_iter: 500,
            tol_residual: 1e-8,
            tol_monotone: 1e-10,
            smallness_budget: 10.0,
        }
    }

    #[test]
    fn choose_a_examples() {
        let g = torus();
        assert_eq!(choose_a(&g, &g.constant(0.0), 0.0, 0.0, 1.0).unwrap(), 1e-6);
        let a = choose_a(&g, &g.constant(-1.0), 0.0, 0.5, 2.0).unwrap();
        assert!((a - 80.0).abs() < 1e-3, "{a}");
        let a = choose_a(&g, &g.constant(1.0), 0.0, 0.0, 2.0).unwrap();
        assert_eq!(a, 1e-6);
        let r = g.clone().with_coeff_r(g.constant(0.3)).unwrap();
        let a = choose_a(&r, &r.constant(1.0), 0.0, 0.0, 2.0).unwrap();
        assert!((a - 0.3).abs() < 1e-5);
    }

    #[test]
    fn choose_b_examples() {
        let g = cylinder();
        assert_eq!(choose_b(&g, &g.boundary_constant(0.0), 0.0, 1.0).unwrap(), 1e-6);
        let b = choose_b(&g, &g.boundary_constant(-1.0), 0.0, 1.0).unwrap();
        assert!((b - 1.5).abs() < 1e-5, "{b}");
    }

    #[test]
    fn zero_curvature_constant_in_one_step() {
        let g = torus();
        let pair = SubSuperPair::trusted(g.constant(0.5), g.constant(2.0), 0.0);
        let (sol, trace) = monotone_closed(&g, &g.constant(0.0), &pair, &config(1e-6, 0.0)).unwrap();
        assert_eq!(sol.steps, 0);
        assert_eq!(trace.records[0].residual, 0.0);
        assert!(sol.solution.values().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn forged_upper_is_caught() {
        let g = torus().with_coeff_r(torus().constant(-1.0)).unwrap();
        let s = g.constant(-1.0);
        let pair = SubSuperPair::trusted(g.constant(0.5), g.constant(0.7), 0.0);
        let err = monotone_closed(&g, &s, &pair, &config(80.0, 0.0)).unwrap_err();
        assert!(matches!(err, IterateError::MonotonicityViolated { k: 0, .. }), "{err}");
    }

    #[test]
    fn negative_curvature_converges_to_one() {
        let g = torus().with_coeff_r(torus().constant(-1.0)).unwrap();
        let s = g.constant(-1.0);
        let pair = SubSuperPair::verify(
            &g,
            &EquationData::new(s.clone()),
            g.constant(0.5),
            g.constant(2.0),
            0.0,
            1e-12,
        )
        .unwrap();
        let mut cfg = MonotoneConfig::for_pair(&g, &EquationData::new(s.clone()), &pair).unwrap();
        cfg.max_iter = 2000;
        let (sol, trace) = monotone_closed(&g, &s, &pair, &cfg).unwrap();
        assert!(sol.solution.values().iter().all(|&v| (v - 1.0).abs() < 1e-8));
        assert!(trace.records.iter().all(|r| r.monotone_margin <= 1e-10));
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().starts_with("k,residual,residual_boundary,min_u,max_u,monotone_margin\n"));
    }

    #[test]
    fn robin_zero_data_constant() {
        let g = cylinder();
        let pair = SubSuperPair::trusted(g.constant(0.5), g.constant(1.5), 0.0);
        let (sol, _) = monotone_robin(&g, &g.constant(0.0), &g.boundary_constant(0.0), &pair, &config(1e-6, 1e-6)).unwrap();
        assert!(sol.solution.values().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn theta_sign_preconditions() {
        let g = cylinder();
        let pair = SubSuperPair::trusted(g.constant(0.5), g.constant(1.5), 0.0);
        let err = monotone_robin(&g, &g.constant(-1.0), &g.boundary_constant(1.0), &pair, &config(80.0, 1.0)).unwrap_err();
        assert!(matches!(err, IterateError::ThetaTwoNotPositive));
        assert_eq!(err.to_string(), "θ₂ must be positive if H > 0 somewhere");
        let err = monotone_robin(&g, &g.constant(-1.0), &g.boundary_constant(-1.0), &pair, &config(80.0, 1.0)).unwrap_err();
        assert!(matches!(err, IterateError::ThetaOneNotNegative));
    }

    #[test]
    fn smallness_budget() {
        let g = cylinder();
        let pair = SubSuperPair::trusted(g.constant(0.5), g.constant(1.5), 0.0);
        let mut cfg = config(80.0, 50.0);
        cfg.theta1 = -1.0;
        let err = monotone_robin(&g, &g.constant(-1.0), &g.boundary_constant(-20.0), &pair, &cfg).unwrap_err();
        assert!(matches!(err, IterateError::SmallnessBudgetExceeded { .. }), "{err}");
    }

    #[test]
    fn unverified_pair_rejected() {
        let g = torus();
        let mut pair = SubSuperPair::trusted(g.constant(0.5), g.constant(2.0), 0.0);
        pair.verified = false;
        assert!(matches!(
            monotone_closed(&g, &g.constant(0.0), &pair, &config(1.0, 0.0)),
            Err(IterateError::Unverified)
        ));
    }
}
