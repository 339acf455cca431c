//! Lower and upper solutions for the monotone scheme.
//!
//! Upper solutions come from the substitution `u = v^{1/(2−p)}`, which turns
//! `−aΔu ≥ S u^{p−1}` into the linear-plus-gradient inequality
//! `−aΔv + a(p−1)/(p−2)·|∇v|²/v ≤ (2−p)S`. Lower solutions are local
//! Dirichlet solutions on a region where `S > 0`, extended by zero. Every
//! constructor re-checks the weak rows of the equation before returning.

use serde::Serialize;
use thiserror::Error;

use crate::conformal::{equation_rows, ConformalConstants, ConformalError, EquationData};
use crate::grid::{GridError, GridManifold, ScalarField};
use crate::linalg::{
    solve_neumann_compatible, solve_shifted, EllipticOperator, LinalgError, LinearProblem, SolverOptions,
};

#[derive(Debug, Error)]
pub enum SubSuperError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Conformal(#[from] ConformalError),
    #[error("slack too large: shifted integral {integral:e} is not negative")]
    SlackTooLarge { integral: f64 },
    #[error("verification failed at node {node}: margin {margin:e}")]
    VerificationFailed { node: usize, margin: f64 },
    #[error("local multiplier {mu:e} is not positive")]
    NonPositiveMultiplier { mu: f64 },
    #[error("local solve did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("invalid local domain: {0}")]
    InvalidDomain(String),
    #[error("lower solution vanishes identically")]
    NotNontrivial,
    #[error("S has no positive region to host a lower solution")]
    NoPositiveRegion,
    #[error("gluing failed; best worst-node margin {best_margin:e} at node {node}")]
    GluingFailed { best_margin: f64, node: usize },
}

/// Periodic-aware displacement between two points.
fn displacement(grid: &GridManifold, x: &[f64], y: &[f64]) -> Vec<f64> {
    (0..grid.dim())
        .map(|k| {
            let d = y[k] - x[k];
            if k == 0 && grid.has_boundary() {
                d
            } else {
                let l = grid.lengths()[k];
                d - l * (d / l).round()
            }
        })
        .collect()
}

fn distance(grid: &GridManifold, x: &[f64], y: &[f64]) -> f64 {
    displacement(grid, x, y).iter().map(|d| d * d).sum::<f64>().sqrt()
}

/// Region `Ω` hosting a local lower solution.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LocalDomain {
    mask: Vec<bool>,
}

impl LocalDomain {
    pub fn from_mask(grid: &GridManifold, mask: Vec<bool>) -> Result<Self, SubSuperError> {
        if mask.len() != grid.node_count() {
            return Err(SubSuperError::InvalidDomain("mask length mismatch".into()));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(SubSuperError::InvalidDomain("empty mask".into()));
        }
        if let Some(i) = (0..mask.len()).find(|&i| mask[i] && grid.is_boundary(i)) {
            return Err(SubSuperError::InvalidDomain(format!("mask touches boundary node {i}")));
        }
        let d = Self { mask };
        if d.components(grid).len() != 1 {
            return Err(SubSuperError::InvalidDomain("mask is not connected".into()));
        }
        Ok(d)
    }

    pub fn ball(grid: &GridManifold, center: &[f64], radius: f64) -> Result<Self, SubSuperError> {
        Self::from_mask(
            grid,
            (0..grid.node_count())
                .map(|i| distance(grid, center, &grid.coords(i)) < radius)
                .collect(),
        )
    }

    /// Shell `inner ≤ |x − center| < outer`, the topologically nontrivial option.
    pub fn annulus(grid: &GridManifold, center: &[f64], inner: f64, outer: f64) -> Result<Self, SubSuperError> {
        Self::from_mask(
            grid,
            (0..grid.node_count())
                .map(|i| {
                    let r = distance(grid, center, &grid.coords(i));
                    r >= inner && r < outer
                })
                .collect(),
        )
    }

    /// Largest connected component of `{S > ½ max S}` minus boundary nodes,
    /// eroded by two layers.
    pub fn auto(grid: &GridManifold, s: &ScalarField) -> Result<Self, SubSuperError> {
        grid.check_interior(s)?;
        let max = s.max();
        if !(max > 0.0) {
            return Err(SubSuperError::NoPositiveRegion);
        }
        let mut mask: Vec<bool> = (0..grid.node_count())
            .map(|i| s.values()[i] > 0.5 * max && !grid.is_boundary(i))
            .collect();
        mask = largest_component(grid, &mask).ok_or(SubSuperError::NoPositiveRegion)?;
        for _ in 0..2 {
            mask = erode(grid, &mask);
        }
        let mask = largest_component(grid, &mask).ok_or(SubSuperError::NoPositiveRegion)?;
        Self::from_mask(grid, mask)
    }

    /// The domain with one rim layer removed, if anything is left.
    pub fn eroded(&self, grid: &GridManifold) -> Option<Self> {
        let m = largest_component(grid, &erode(grid, &self.mask))?;
        Some(Self { mask: m })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn contains(&self, node: usize) -> bool {
        self.mask[node]
    }

    pub fn len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Nodes outside `Ω` with an axis neighbor inside.
    pub fn rim(&self, grid: &GridManifold) -> Vec<usize> {
        (0..grid.node_count())
            .filter(|&i| !self.mask[i] && neighbors(grid, i).any(|j| self.mask[j]))
            .collect()
    }

    fn components(&self, grid: &GridManifold) -> Vec<Vec<usize>> {
        components(grid, &self.mask)
    }

    /// Euclidean distance from each node of `Ω` to the nearest rim node,
    /// divided by the largest such distance (0 outside `Ω`).
    pub fn depth_fraction(&self, grid: &GridManifold) -> Vec<f64> {
        let rim: Vec<Vec<f64>> = self.rim(grid).iter().map(|&i| grid.coords(i)).collect();
        let mut depth = vec![0.0; grid.node_count()];
        for i in (0..grid.node_count()).filter(|&i| self.mask[i]) {
            let x = grid.coords(i);
            depth[i] = rim
                .iter()
                .map(|y| distance(grid, &x, y))
                .fold(f64::INFINITY, f64::min);
        }
        let max = depth.iter().copied().fold(0.0, f64::max);
        if max > 0.0 && max.is_finite() {
            depth.iter_mut().for_each(|d| *d /= max);
        } else {
            depth.iter_mut().zip(&self.mask).for_each(|(d, &m)| *d = if m { 1.0 } else { 0.0 });
        }
        depth
    }
}

fn neighbors(grid: &GridManifold, i: usize) -> impl Iterator<Item = usize> + '_ {
    (0..grid.dim()).flat_map(move |k| [-1isize, 1].into_iter().filter_map(move |o| grid.neighbor(i, k, o)))
}

fn components(grid: &GridManifold, mask: &[bool]) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut out = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut head = 0;
        while head < comp.len() {
            let i = comp[head];
            head += 1;
            for j in neighbors(grid, i) {
                if mask[j] && !seen[j] {
                    seen[j] = true;
                    comp.push(j);
                }
            }
        }
        out.push(comp);
    }
    out
}

fn largest_component(grid: &GridManifold, mask: &[bool]) -> Option<Vec<bool>> {
    let best = components(grid, mask).into_iter().max_by_key(|c| c.len())?;
    let mut m = vec![false; mask.len()];
    best.into_iter().for_each(|i| m[i] = true);
    Some(m)
}

fn erode(grid: &GridManifold, mask: &[bool]) -> Vec<bool> {
    (0..mask.len())
        .map(|i| mask[i] && neighbors(grid, i).all(|j| mask[j]))
        .collect()
}

/// Normalized weak-row margins: `row/W` off the boundary, `row/(aT)` on it.
pub fn row_margins(grid: &GridManifold, data: &EquationData, u: &[f64]) -> Result<Vec<f64>, SubSuperError> {
    let c = ConformalConstants::for_grid(grid)?;
    let rows = equation_rows(grid, data, u)?;
    let at = if grid.has_boundary() { c.a * grid.boundary_weight() } else { 1.0 };
    Ok(rows
        .iter()
        .enumerate()
        .map(|(i, r)| if grid.is_boundary(i) { r / at } else { r / grid.volume_weights()[i] })
        .collect())
}

fn worst(margins: &[f64], pick_min: bool) -> (usize, f64) {
    let mut best = (0, margins[0]);
    for (i, &m) in margins.iter().enumerate() {
        if (pick_min && m < best.1) || (!pick_min && m > best.1) {
            best = (i, m);
        }
    }
    best
}

#[derive(Clone, Debug, Serialize)]
pub struct UpperSolution {
    pub field: ScalarField,
    /// Smallest weak-row margin; non-negative when verified.
    pub worst_margin: f64,
    pub gamma: f64,
    pub constant_c: f64,
}

fn substitute(c: &ConformalConstants, v: &ScalarField) -> ScalarField {
    v.map(|x| x.powf(1.0 / c.two_minus_p))
}

fn lift_constant(c: &ConformalConstants, grid: &GridManifold, v0: &ScalarField, slack: f64) -> Result<f64, SubSuperError> {
    let grad = grid.gradient_sq(v0)?;
    let mut k = (0.0f64).max(-2.0 * v0.min()) + c.a * (c.p - 1.0) / (c.p_minus_2 * slack) * grad.max();
    if k == 0.0 {
        k = 1.0;
    }
    Ok(k)
}

/// Upper solution of `−aΔu ≥ (S+γ₀)u^{p−1}` on a closed manifold.
pub fn build_upper_closed(grid: &GridManifold, s: &ScalarField, gamma0: f64) -> Result<UpperSolution, SubSuperError> {
    let c = ConformalConstants::for_grid(grid)?;
    if grid.has_boundary() {
        return Err(SubSuperError::Precondition("closed construction on a cylinder".into()));
    }
    let shifted = s.map(|x| x + gamma0);
    let integral = grid.integrate(&shifted)?;
    if !(integral < 0.0) {
        return Err(SubSuperError::SlackTooLarge { integral });
    }
    let gamma = c.two_minus_p * integral / grid.volume();
    let rhs = shifted.map(|x| c.two_minus_p * x - gamma);
    let v0 = solve_shifted(&LinearProblem::new(c.a, 0.0, rhs), grid)?;
    let k = lift_constant(&c, grid, &v0, gamma)?;
    let u = substitute(&c, &v0.map(|x| x + k));
    let data = EquationData::new(shifted);
    let margins = row_margins(grid, &data, u.values())?;
    let (node, margin) = worst(&margins, true);
    if margin < -1e-12 * (1.0 + s.sup_norm()) {
        return Err(SubSuperError::VerificationFailed { node, margin });
    }
    Ok(UpperSolution {
        field: u,
        worst_margin: margin,
        gamma,
        constant_c: k,
    })
}

/// Upper solution on a cylinder: `−aΔv = (2−p)(S+γ₀+γ′)` with constant
/// outward derivative `γ″ < 0`; `γ′` is the interior slack. Returns the
/// field and the largest `c` for which it also bounds `∂u/∂ν + κhu ≥ κcHu^{p/2}`.
pub fn build_upper_boundary(
    grid: &GridManifold,
    s: &ScalarField,
    h_target: &ScalarField,
    gamma0: f64,
    gamma_prime: f64,
) -> Result<(UpperSolution, f64), SubSuperError> {
    let c = ConformalConstants::for_grid(grid)?;
    if !grid.has_boundary() {
        return Err(GridError::NoBoundary.into());
    }
    grid.check_boundary(h_target)?;
    if !(gamma_prime > 0.0) {
        return Err(SubSuperError::Precondition(format!("slack γ′ = {gamma_prime} must be positive")));
    }
    let integral = grid.integrate(&s.map(|x| x + gamma0 + gamma_prime))?;
    if !(integral < 0.0) {
        return Err(SubSuperError::SlackTooLarge { integral });
    }
    let rhs = s.map(|x| c.two_minus_p * (x + gamma0 + gamma_prime));
    let flux = -grid.integrate(&rhs)? / (c.a * grid.boundary_area());
    let v0 = solve_neumann_compatible(grid, c.a, &rhs, &grid.boundary_constant(flux))?;
    let k = lift_constant(&c, grid, &v0, c.p_minus_2 * gamma_prime)?;
    let u = substitute(&c, &v0.map(|x| x + k));

    let data = EquationData::new(s.map(|x| x + gamma0));
    let margins = row_margins(grid, &data, u.values())?;
    let (node, margin) = worst(&margins, true);
    if margin < -1e-12 * (1.0 + s.sup_norm()) {
        return Err(SubSuperError::VerificationFailed { node, margin });
    }
    let mut c_max = f64::INFINITY;
    for (b, &node) in grid.boundary_nodes().iter().enumerate() {
        let hb = h_target.values()[b];
        if hb > 0.0 {
            let bound = margins[node] / (c.kappa * hb * u.values()[node].powf(0.5 * c.p));
            c_max = c_max.min(bound);
        }
    }
    Ok((
        UpperSolution {
            field: u,
            worst_margin: margin,
            gamma: flux,
            constant_c: k,
        },
        c_max,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalOptions {
    /// Residual target, relative to `1 + ‖S‖∞`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for LocalOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 2000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LocalSolution {
    pub field: ScalarField,
    pub multiplier: f64,
    pub iterations: usize,
    pub residual: f64,
}

/// Positive solution of `−aΔu + (R+β)u = S u^{p−1}` in `Ω`, `u = 0` outside.
///
/// Minimizes `Q(w)/G(w)^{2/p}` with `Q(w) = a‖∇w‖² + ∫(R+β)w²` and
/// `G(w) = ∫_Ω S w₊^p`, by gradient steps in the metric of `Q` itself with
/// backtracking; a full step is the normalized map `w ↦ Q⁻¹(S w₊^{p−1})`.
/// At the minimizer `Kw = μ W S w^{p−1}` with `μ = Q(w)`, and the returned
/// field is `μ^{1/(p−2)} w`.
pub fn solve_local_dirichlet(
    grid: &GridManifold,
    s: &ScalarField,
    domain: &LocalDomain,
    beta: f64,
    opts: &LocalOptions,
) -> Result<LocalSolution, SubSuperError> {
    let c = ConformalConstants::for_grid(grid)?;
    grid.check_interior(s)?;
    if beta > 0.0 {
        return Err(SubSuperError::Precondition(format!("β = {beta} must be ≤ 0")));
    }
    if let Some(i) = (0..grid.node_count()).find(|&i| domain.contains(i) && !(s.values()[i] > 0.0)) {
        return Err(SubSuperError::Precondition(format!(
            "S = {} is not positive at node {i} of the local domain",
            s.values()[i]
        )));
    }
    let vol_coeff: Vec<f64> = grid.coeff_r().values().iter().map(|r| r + beta).collect();
    let k = EllipticOperator::new(grid, c.a, &vol_coeff, &vec![0.0; grid.boundary_count()])?
        .with_mask(domain.mask().to_vec());
    let w_vol = grid.volume_weights();
    let sv = s.values();
    let cg = SolverOptions {
        rel_tol: 1e-13,
        ..SolverOptions::default()
    };
    let map_indefinite = |e: LinalgError| match e {
        LinalgError::Indefinite => SubSuperError::NonPositiveMultiplier { mu: f64::NAN },
        other => other.into(),
    };

    let g = |w: &[f64]| -> f64 {
        (0..w.len())
            .filter(|&i| domain.contains(i))
            .map(|i| w_vol[i] * sv[i] * w[i].max(0.0).powf(c.p))
            .sum()
    };
    let normalize = |w: &mut Vec<f64>| {
        let gv = g(w);
        let scale = gv.powf(-1.0 / c.p);
        w.iter_mut().for_each(|x| *x *= scale);
    };
    let source = |w: &[f64]| -> Vec<f64> {
        (0..w.len())
            .map(|i| {
                if domain.contains(i) {
                    w_vol[i] * sv[i] * w[i].max(0.0).powf(c.p - 1.0)
                } else {
                    0.0
                }
            })
            .collect()
    };

    let ones: Vec<f64> = (0..grid.node_count())
        .map(|i| if domain.contains(i) { w_vol[i] } else { 0.0 })
        .collect();
    let mut w = k.solve(&ones, &cg).map_err(map_indefinite)?;
    if w.iter().any(|&x| x < 0.0) || g(&w) <= 0.0 {
        return Err(SubSuperError::NonPositiveMultiplier { mu: f64::NAN });
    }
    normalize(&mut w);
    let mut mu = k.energy(&w);
    let mut kw = vec![0.0; w.len()];
    let tol = opts.tol * (1.0 + s.sup_norm());
    let mut residual = f64::INFINITY;
    let (mut best, mut best_at) = (f64::INFINITY, 0);
    for it in 0..opts.max_iter {
        if !(mu > 0.0) {
            return Err(SubSuperError::NonPositiveMultiplier { mu });
        }
        let f = source(&w);
        k.apply(&w, &mut kw);
        let amp = mu.powf(1.0 / c.p_minus_2);
        residual = (0..w.len())
            .filter(|&i| domain.contains(i))
            .map(|i| amp * ((kw[i] - mu * f[i]) / w_vol[i]).abs())
            .fold(0.0, f64::max);
        if residual <= tol {
            let field = ScalarField::interior(w.iter().map(|x| amp * x.max(0.0)).collect());
            return Ok(LocalSolution {
                field,
                multiplier: mu,
                iterations: it,
                residual,
            });
        }
        if residual < 0.99 * best {
            (best, best_at) = (residual, it);
        } else if it - best_at > 50 {
            return Err(SubSuperError::NoConvergence { iterations: it, residual });
        }
        let mut fixed = k.solve(&f, &cg).map_err(map_indefinite)?;
        fixed.iter_mut().for_each(|x| *x *= mu);
        let mut tau = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let mut cand: Vec<f64> = w.iter().zip(&fixed).map(|(a, b)| a + tau * (b - a)).collect();
            if g(&cand) > 0.0 {
                normalize(&mut cand);
                let mu_c = k.energy(&cand);
                if mu_c <= mu * (1.0 + 1e-12) {
                    w = cand;
                    mu = mu_c;
                    accepted = true;
                    break;
                }
            }
            tau *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Err(SubSuperError::NoConvergence {
        iterations: opts.max_iter,
        residual,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct LowerSolution {
    pub field: ScalarField,
    /// Largest normalized weak-row value; at most the tolerance when verified.
    pub worst_margin: f64,
}

/// Zero extension of a local solution, verified as a weak subsolution:
/// rows inside `Ω` vanish to `tol`, rim rows are negative flux jumps, rows
/// farther out are zero.
pub fn build_lower(
    grid: &GridManifold,
    u0: &ScalarField,
    domain: &LocalDomain,
    data: &EquationData,
    tol: f64,
) -> Result<LowerSolution, SubSuperError> {
    grid.check_interior(u0)?;
    if u0.sup_norm() == 0.0 {
        return Err(SubSuperError::NotNontrivial);
    }
    for (i, &v) in u0.values().iter().enumerate() {
        let ok = if domain.contains(i) { v > 0.0 } else { v == 0.0 };
        if !ok {
            return Err(SubSuperError::Precondition(format!(
                "local field value {v} at node {i} is inconsistent with the domain"
            )));
        }
    }
    let margins = row_margins(grid, data, u0.values())?;
    let (node, margin) = worst(&margins, false);
    if margin > tol {
        return Err(SubSuperError::VerificationFailed { node, margin });
    }
    Ok(LowerSolution {
        field: u0.clone(),
        worst_margin: margin,
    })
}

/// `χ` on `[0, 1]`: zero below `0.1`, one above `0.4`, quintic in between.
fn cutoff(depth: f64) -> f64 {
    let t = ((depth - 0.1) / 0.3).clamp(0.0, 1.0);
    t * t * t * (10.0 - 15.0 * t + 6.0 * t * t)
}

pub const GLUE_HEADROOM: f64 = 0.05;

/// `u₊ = u_c + χ·max(0, (1+δ)u_l − u_c)`, verified as a supersolution of the
/// data.
pub fn glue(
    grid: &GridManifold,
    u_local: &ScalarField,
    u_candidate: &ScalarField,
    domain: &LocalDomain,
    data: &EquationData,
) -> Result<UpperSolution, SubSuperError> {
    grid.check_interior(u_local)?;
    grid.check_interior(u_candidate)?;
    let depth = domain.depth_fraction(grid);
    let glued: Vec<f64> = (0..grid.node_count())
        .map(|i| {
            let uc = u_candidate.values()[i];
            let lift = ((1.0 + GLUE_HEADROOM) * u_local.values()[i] - uc).max(0.0);
            uc + cutoff(depth[i]) * lift
        })
        .collect();
    let margins = row_margins(grid, data, &glued)?;
    let (node, margin) = worst(&margins, true);
    if margin < -1e-12 * (1.0 + data.s.sup_norm()) {
        return Err(SubSuperError::GluingFailed {
            best_margin: margin,
            node,
        });
    }
    Ok(UpperSolution {
        field: ScalarField::interior(glued),
        worst_margin: margin,
        gamma: f64::NAN,
        constant_c: f64::NAN,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct SubSuperPair {
    pub lower: ScalarField,
    pub upper: ScalarField,
    pub slack_gamma0: f64,
    pub verified: bool,
    pub worst_margin_lower: f64,
    pub worst_margin_upper: f64,
}

impl SubSuperPair {
    /// Check ordering and both weak inequalities against `data`.
    pub fn verify(
        grid: &GridManifold,
        data: &EquationData,
        lower: ScalarField,
        upper: ScalarField,
        slack_gamma0: f64,
        tol: f64,
    ) -> Result<Self, SubSuperError> {
        grid.check_interior(&lower)?;
        grid.check_interior(&upper)?;
        if lower.sup_norm() == 0.0 {
            return Err(SubSuperError::NotNontrivial);
        }
        for i in 0..grid.node_count() {
            let (l, u) = (lower.values()[i], upper.values()[i]);
            if !(l >= 0.0 && u > 0.0 && l <= u) {
                return Err(SubSuperError::VerificationFailed {
                    node: i,
                    margin: u - l,
                });
            }
        }
        let lo = row_margins(grid, data, lower.values())?;
        let (node, worst_lower) = worst(&lo, false);
        if worst_lower > tol {
            return Err(SubSuperError::VerificationFailed {
                node,
                margin: worst_lower,
            });
        }
        let up = row_margins(grid, data, upper.values())?;
        let (node, worst_upper) = worst(&up, true);
        if worst_upper < -tol {
            return Err(SubSuperError::VerificationFailed {
                node,
                margin: worst_upper,
            });
        }
        Ok(Self {
            lower,
            upper,
            slack_gamma0,
            verified: true,
            worst_margin_lower: worst_lower,
            worst_margin_upper: worst_upper,
        })
    }

    /// Build a pair without checking it. The monotone engine still asserts
    /// ordering at every step, so a false pair is caught there.
    pub fn trusted(lower: ScalarField, upper: ScalarField, slack_gamma0: f64) -> Self {
        Self {
            lower,
            upper,
            slack_gamma0,
            verified: true,
            worst_margin_lower: f64::NAN,
            worst_margin_upper: f64::NAN,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GlueSchedule {
    pub gamma_doublings: usize,
    pub shrinks: usize,
}

impl Default for GlueSchedule {
    fn default() -> Self {
        Self {
            gamma_doublings: 8,
            shrinks: 4,
        }
    }
}

/// Lower solution on `domain`, upper candidates from `candidate(γ₀)`, glued
/// with retries: `γ₀` doubles up to the schedule's limit, then `Ω` loses a
/// rim layer and the doublings restart.
pub fn build_sandwich(
    grid: &GridManifold,
    data: &EquationData,
    domain: LocalDomain,
    gamma0: f64,
    candidate: &dyn Fn(f64) -> Result<UpperSolution, SubSuperError>,
    schedule: &GlueSchedule,
    local: &LocalOptions,
) -> Result<SubSuperPair, SubSuperError> {
    let mut domain = domain;
    let mut best: Option<(f64, usize)> = None;
    let lower_tol = 10.0 * local.tol * (1.0 + data.s.sup_norm());
    for shrink in 0..=schedule.shrinks {
        let local_solution = solve_local_dirichlet(grid, &data.s, &domain, data.beta, local)?;
        let lower = build_lower(grid, &local_solution.field, &domain, data, lower_tol)?;
        let mut g = gamma0;
        for _ in 0..=schedule.gamma_doublings {
            let upper = match candidate(g) {
                Ok(u) => u,
                Err(SubSuperError::SlackTooLarge { .. }) => break,
                Err(e) => return Err(e),
            };
            match glue(grid, &lower.field, &upper.field, &domain, data) {
                Ok(glued) => {
                    return SubSuperPair::verify(grid, data, lower.field, glued.field, g, lower_tol);
                }
                Err(SubSuperError::GluingFailed { best_margin, node }) => {
                    if best.is_none_or(|(m, _)| best_margin > m) {
                        best = Some((best_margin, node));
                    }
                }
                Err(e) => return Err(e),
            }
            g *= 2.0;
        }
        if shrink == schedule.shrinks {
            break;
        }
        match domain.eroded(grid) {
            Some(d) => domain = d,
            None => break,
        }
    }
    let (best_margin, node) = best.unwrap_or((f64::NEG_INFINITY, 0));
    Err(SubSuperError::GluingFailed { best_margin, node })
}

/// Defects of the direct inequality `−aΔu − S u^{p−1}` at `u = v^{1/(2−p)}`
/// and of the substituted one, rescaled to the same units, each paired with
/// an estimate of its discretization error from a doubled-stencil
/// evaluation. Torus grids only.
#[derive(Clone, Debug)]
pub struct SubstitutionDefects {
    pub direct: Vec<f64>,
    pub substituted: Vec<f64>,
    pub error_estimate: Vec<f64>,
}

fn wide_laplacian(grid: &GridManifold, u: &[f64], stride: isize) -> Vec<f64> {
    (0..grid.node_count())
        .map(|i| {
            (0..grid.dim())
                .map(|k| {
                    let h = grid.spacing()[k] * stride as f64;
                    let p = grid.neighbor(i, k, stride).unwrap();
                    let m = grid.neighbor(i, k, -stride).unwrap();
                    (u[p] - 2.0 * u[i] + u[m]) / (h * h)
                })
                .sum()
        })
        .collect()
}

fn wide_gradient_sq(grid: &GridManifold, u: &[f64], stride: isize) -> Vec<f64> {
    (0..grid.node_count())
        .map(|i| {
            (0..grid.dim())
                .map(|k| {
                    let h = grid.spacing()[k] * stride as f64;
                    let p = grid.neighbor(i, k, stride).unwrap();
                    let m = grid.neighbor(i, k, -stride).unwrap();
                    let d = (u[p] - u[m]) / (2.0 * h);
                    d * d
                })
                .sum()
        })
        .collect()
}

pub fn substitution_defects(grid: &GridManifold, v: &ScalarField, s: &ScalarField) -> Result<SubstitutionDefects, SubSuperError> {
    let c = ConformalConstants::for_grid(grid)?;
    if grid.has_boundary() {
        return Err(SubSuperError::Precondition("substitution check runs on tori".into()));
    }
    grid.check_interior(v)?;
    grid.check_interior(s)?;
    let q = 1.0 / c.two_minus_p;
    let vv = v.values();
    let u: Vec<f64> = vv.iter().map(|x| x.powf(q)).collect();
    let sv = s.values();
    let eval = |stride: isize| -> (Vec<f64>, Vec<f64>) {
        let lu = wide_laplacian(grid, &u, stride);
        let lv = wide_laplacian(grid, vv, stride);
        let gv = wide_gradient_sq(grid, vv, stride);
        let direct = (0..u.len())
            .map(|i| -c.a * lu[i] - sv[i] * u[i].powf(c.p - 1.0))
            .collect();
        let subst = (0..u.len())
            .map(|i| {
                let bracket = c.two_minus_p * sv[i] + c.a * lv[i]
                    - c.a * (c.p - 1.0) / c.p_minus_2 * gv[i] / vv[i];
                vv[i].powf(q - 1.0) * q.abs() * bracket
            })
            .collect();
        (direct, subst)
    };
    let (d1, s1) = eval(1);
    let (d2, s2) = eval(2);
    let error_estimate = (0..u.len())
        .map(|i| ((d2[i] - d1[i]).abs() / 3.0).max((s2[i] - s1[i]).abs() / 3.0))
        .collect();
    Ok(SubstitutionDefects {
        direct: d1,
        substituted: s1,
        error_estimate,
    })
}
