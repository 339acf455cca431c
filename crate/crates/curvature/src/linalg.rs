//! Symmetric elliptic solves and the first eigenpair on grid manifolds.
//!
//! Every operator here is the weak form
//! `a·M + diag(W·c) + a·diag(T·c_∂)`, with `M` the stiffness matrix, `W` the
//! volume weights and `T` the boundary weight. It is symmetric, and with
//! non-negative coefficients it is an M-matrix, so the discrete comparison
//! principle holds.

use rayon::prelude::*;
use thiserror::Error;

use crate::conformal::ConformalConstants;
use crate::grid::{GridError, GridManifold, ScalarField};

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("incompatible right-hand side: defect {defect:e} exceeds {tolerance:e}")]
    IncompatibleRhs { defect: f64, tolerance: f64 },
    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("operator is not positive definite")]
    Indefinite,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverOptions {
    pub rel_tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            rel_tol: 1e-11,
            max_iter: 20_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CgStats {
    pub iterations: usize,
    pub relative_residual: f64,
}

const DOT_CHUNK: usize = 4096;

pub(crate) fn dot(x: &[f64], y: &[f64]) -> f64 {
    let partial: Vec<f64> = x
        .par_chunks(DOT_CHUNK)
        .zip(y.par_chunks(DOT_CHUNK))
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>())
        .collect();
    partial.iter().sum()
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// `a·M + diag(W∘c_vol) + a·T·diag(c_∂)` restricted, optionally, to a node mask
/// with homogeneous Dirichlet values outside it.
#[derive(Clone, Debug)]
pub struct EllipticOperator<'g> {
    grid: &'g GridManifold,
    a: f64,
    node_coeff: Vec<f64>,
    boundary_coeff: Vec<f64>,
    mask: Option<Vec<bool>>,
}

impl<'g> EllipticOperator<'g> {
    /// `volume_coeff` is per node, `boundary_coeff` per boundary node; both
    /// are pointwise coefficients and get weighted here.
    pub fn new(
        grid: &'g GridManifold,
        a: f64,
        volume_coeff: &[f64],
        boundary_coeff: &[f64],
    ) -> Result<Self, LinalgError> {
        if volume_coeff.len() != grid.node_count() || boundary_coeff.len() != grid.boundary_count() {
            return Err(LinalgError::InvalidProblem("coefficient length mismatch".into()));
        }
        if !(a > 0.0 && a.is_finite()) {
            return Err(LinalgError::InvalidProblem(format!("diffusion coefficient {a}")));
        }
        let w = grid.volume_weights();
        let t = if grid.has_boundary() { grid.boundary_weight() } else { 0.0 };
        Ok(Self {
            grid,
            a,
            node_coeff: volume_coeff.iter().zip(w).map(|(c, w)| c * w).collect(),
            boundary_coeff: boundary_coeff.iter().map(|c| a * t * c).collect(),
            mask: None,
        })
    }

    /// Uniform coefficients.
    pub fn uniform(grid: &'g GridManifold, a: f64, shift: f64, robin: f64) -> Result<Self, LinalgError> {
        Self::new(
            grid,
            a,
            &vec![shift; grid.node_count()],
            &vec![robin; grid.boundary_count()],
        )
    }

    pub fn with_mask(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.grid.node_count());
        self.mask = Some(mask);
        self
    }

    pub fn grid(&self) -> &GridManifold {
        self.grid
    }

    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        self.grid.apply_stiffness(u, out);
        out.par_iter_mut()
            .zip(u.par_iter())
            .zip(self.node_coeff.par_iter())
            .for_each(|((o, &ui), &c)| *o = self.a * *o + c * ui);
        for (b, &node) in self.grid.boundary_nodes().iter().enumerate() {
            out[node] += self.boundary_coeff[b] * u[node];
        }
        if let Some(mask) = &self.mask {
            for (o, &m) in out.iter_mut().zip(mask) {
                if !m {
                    *o = 0.0;
                }
            }
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut d: Vec<f64> = self
            .grid
            .stiffness_diagonal()
            .iter()
            .zip(&self.node_coeff)
            .map(|(m, c)| self.a * m + c)
            .collect();
        for (b, &node) in self.grid.boundary_nodes().iter().enumerate() {
            d[node] += self.boundary_coeff[b];
        }
        d
    }

    /// `uᵀ K u`.
    pub fn energy(&self, u: &[f64]) -> f64 {
        let mut ku = vec![0.0; u.len()];
        self.apply(u, &mut ku);
        dot(u, &ku)
    }

    /// Preconditioned conjugate gradients from the starting guess `x`.
    pub fn solve_into(
        &self,
        b: &[f64],
        x: &mut [f64],
        opts: &SolverOptions,
    ) -> Result<CgStats, LinalgError> {
        pcg(self, b, x, opts, false)
    }

    pub fn solve(&self, b: &[f64], opts: &SolverOptions) -> Result<Vec<f64>, LinalgError> {
        let mut x = vec![0.0; b.len()];
        self.solve_into(b, &mut x, opts)?;
        Ok(x)
    }
}

fn pcg(
    op: &EllipticOperator<'_>,
    b: &[f64],
    x: &mut [f64],
    opts: &SolverOptions,
    singular: bool,
) -> Result<CgStats, LinalgError> {
    let n = b.len();
    let inv_diag: Vec<f64> = op
        .diagonal()
        .iter()
        .enumerate()
        .map(|(i, &d)| {
            let inside = op.mask.as_ref().is_none_or(|m| m[i]);
            if inside && d > 0.0 {
                1.0 / d
            } else {
                0.0
            }
        })
        .collect();
    if let Some(mask) = &op.mask {
        for (xi, &m) in x.iter_mut().zip(mask) {
            if !m {
                *xi = 0.0;
            }
        }
    }
    let project = |v: &mut [f64]| {
        if singular {
            let m = v.iter().sum::<f64>() / n as f64;
            v.iter_mut().for_each(|e| *e -= m);
        }
    };

    let bnorm = norm(b);
    if bnorm == 0.0 {
        x.iter_mut().for_each(|e| *e = 0.0);
        return Ok(CgStats {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let mut r = vec![0.0; n];
    op.apply(x, &mut r);
    r.iter_mut().zip(b).for_each(|(ri, bi)| *ri = bi - *ri);
    if let Some(mask) = &op.mask {
        r.iter_mut().zip(mask).for_each(|(ri, &m)| if !m { *ri = 0.0 });
    }
    project(&mut r);
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(a, d)| a * d).collect();
    let mut p = z.clone();
    let mut rz = dot(&r, &z);
    let mut kp = vec![0.0; n];
    let mut rel = norm(&r) / bnorm;
    for it in 0..opts.max_iter {
        if rel <= opts.rel_tol {
            return Ok(CgStats {
                iterations: it,
                relative_residual: rel,
            });
        }
        op.apply(&p, &mut kp);
        let curv = dot(&p, &kp);
        if curv <= 0.0 {
            return Err(LinalgError::Indefinite);
        }
        let alpha = rz / curv;
        x.par_iter_mut()
            .zip(p.par_iter())
            .for_each(|(xi, pi)| *xi += alpha * pi);
        r.par_iter_mut()
            .zip(kp.par_iter())
            .for_each(|(ri, ki)| *ri -= alpha * ki);
        project(&mut r);
        z.par_iter_mut()
            .zip(r.par_iter().zip(inv_diag.par_iter()))
            .for_each(|(zi, (ri, di))| *zi = ri * di);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        p.par_iter_mut()
            .zip(z.par_iter())
            .for_each(|(pi, zi)| *pi = zi + beta * *pi);
        rel = norm(&r) / bnorm;
    }
    if rel <= opts.rel_tol {
        return Ok(CgStats {
            iterations: opts.max_iter,
            relative_residual: rel,
        });
    }
    Err(LinalgError::NoConvergence {
        iterations: opts.max_iter,
        residual: rel,
    })
}

/// Data for `(−aΔ + A)u = f` with `∂u/∂ν + B u = g` on the boundary.
#[derive(Clone, Debug)]
pub struct LinearProblem {
    pub shift_a: f64,
    pub robin_b: f64,
    pub rhs: ScalarField,
    pub rhs_boundary: Option<ScalarField>,
    pub a_coeff: f64,
}

impl LinearProblem {
    pub fn new(a_coeff: f64, shift_a: f64, rhs: ScalarField) -> Self {
        Self {
            shift_a,
            robin_b: 0.0,
            rhs,
            rhs_boundary: None,
            a_coeff,
        }
    }

    pub fn with_robin(mut self, robin_b: f64, rhs_boundary: ScalarField) -> Self {
        self.robin_b = robin_b;
        self.rhs_boundary = Some(rhs_boundary);
        self
    }
}

/// Assemble `W f + a T g`.
pub fn weak_rhs(
    grid: &GridManifold,
    a: f64,
    rhs: &ScalarField,
    rhs_boundary: Option<&ScalarField>,
) -> Result<Vec<f64>, LinalgError> {
    grid.check_interior(rhs)?;
    let mut b: Vec<f64> = rhs
        .values()
        .iter()
        .zip(grid.volume_weights())
        .map(|(f, w)| f * w)
        .collect();
    if let Some(g) = rhs_boundary {
        grid.check_boundary(g)?;
        let t = grid.boundary_weight();
        for (&node, gv) in grid.boundary_nodes().iter().zip(g.values()) {
            b[node] += a * t * gv;
        }
    }
    Ok(b)
}

pub fn solve_shifted(problem: &LinearProblem, grid: &GridManifold) -> Result<ScalarField, LinalgError> {
    solve_shifted_with(problem, grid, &SolverOptions::default())
}

pub fn solve_shifted_with(
    problem: &LinearProblem,
    grid: &GridManifold,
    opts: &SolverOptions,
) -> Result<ScalarField, LinalgError> {
    let LinearProblem {
        shift_a,
        robin_b,
        a_coeff,
        ..
    } = *problem;
    if !(shift_a >= 0.0) || !(robin_b >= 0.0) {
        return Err(LinalgError::InvalidProblem(format!(
            "shifts must be non-negative, got A = {shift_a}, B = {robin_b}"
        )));
    }
    if !grid.has_boundary() && (robin_b != 0.0 || problem.rhs_boundary.is_some()) {
        return Err(LinalgError::InvalidProblem(
            "a torus takes no boundary data".into(),
        ));
    }
    if let Some((i, v)) = problem.rhs.first_non_finite() {
        return Err(GridError::NonFinite { index: i, value: v }.into());
    }
    let op = EllipticOperator::uniform(grid, a_coeff, shift_a, robin_b)?;
    let b = weak_rhs(grid, a_coeff, &problem.rhs, problem.rhs_boundary.as_ref())?;
    let singular = shift_a == 0.0 && robin_b == 0.0;
    if singular {
        solve_singular(&op, grid, b, opts)
    } else {
        Ok(ScalarField::interior(op.solve(&b, opts)?))
    }
}

fn solve_singular(
    op: &EllipticOperator<'_>,
    grid: &GridManifold,
    mut b: Vec<f64>,
    opts: &SolverOptions,
) -> Result<ScalarField, LinalgError> {
    let defect: f64 = crate::grid::pairwise_sum(&b);
    let scale: f64 = b.iter().map(|v| v.abs()).sum();
    let tolerance = 1e-10 * scale + 1e-13 * grid.volume();
    if defect.abs() > tolerance {
        return Err(LinalgError::IncompatibleRhs { defect, tolerance });
    }
    let vol = grid.volume();
    for (bi, w) in b.iter_mut().zip(grid.volume_weights()) {
        *bi -= defect * w / vol;
    }
    let mut x = vec![0.0; b.len()];
    pcg(op, &b, &mut x, opts, true)?;
    let u = ScalarField::interior(x);
    let mean = grid.mean(&u)?;
    Ok(u.map(|v| v - mean))
}

/// Zero-mean solution of `−aΔu = f` with `∂u/∂ν = g` on a cylinder.
pub fn solve_neumann_compatible(
    grid: &GridManifold,
    a: f64,
    rhs: &ScalarField,
    rhs_boundary: &ScalarField,
) -> Result<ScalarField, LinalgError> {
    if !grid.has_boundary() {
        return Err(GridError::NoBoundary.into());
    }
    let op = EllipticOperator::uniform(grid, a, 0.0, 0.0)?;
    let b = weak_rhs(grid, a, rhs, Some(rhs_boundary))?;
    solve_singular(&op, grid, b, &SolverOptions::default())
}

#[derive(Clone, Debug)]
pub struct EigenReport {
    pub eigenvalue: f64,
    pub eigenfunction: ScalarField,
    pub iterations: usize,
    pub residual: f64,
    pub restarts: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EigenOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub max_restarts: usize,
}

impl Default for EigenOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 2000,
            max_restarts: 5,
        }
    }
}

/// Diffusion coefficient and boundary factor of the conformal operator in
/// dimension `n`; the 2D operator is `−Δ + R` with `∂_ν + σ`.
pub fn operator_constants(grid: &GridManifold) -> (f64, f64) {
    match ConformalConstants::new(grid.dim()) {
        Ok(c) => (c.a, c.kappa),
        Err(_) => (1.0, 1.0),
    }
}

/// Smallest eigenpair of `−aΔ + R + β_int` with `∂_ν + κ(h + β_∂)`.
pub fn first_eigenpair(
    grid: &GridManifold,
    beta_interior: f64,
    beta_boundary: f64,
) -> Result<EigenReport, LinalgError> {
    first_eigenpair_with(grid, beta_interior, beta_boundary, &EigenOptions::default())
}

pub fn first_eigenpair_with(
    grid: &GridManifold,
    beta_interior: f64,
    beta_boundary: f64,
    opts: &EigenOptions,
) -> Result<EigenReport, LinalgError> {
    let (a, kappa) = operator_constants(grid);
    let boundary_field = if grid.dim() == 2 {
        grid.coeff_sigma()
    } else {
        grid.coeff_h()
    };
    let vol_coeff: Vec<f64> = grid
        .coeff_r()
        .values()
        .iter()
        .map(|r| r + beta_interior)
        .collect();
    let bdy_coeff: Vec<f64> = boundary_field
        .values()
        .iter()
        .map(|h| kappa * (h + beta_boundary))
        .collect();
    let k = EllipticOperator::new(grid, a, &vol_coeff, &bdy_coeff)?;
    let w = grid.volume_weights();
    let n = grid.node_count();
    let normalize = |v: &mut Vec<f64>| {
        let s: f64 = v.iter().zip(w).map(|(x, w)| x * x * w).sum::<f64>().sqrt();
        let sign = if v.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
        v.iter_mut().for_each(|x| *x *= sign / s);
    };
    let rayleigh_and_residual = |phi: &[f64]| {
        let mut kphi = vec![0.0; n];
        k.apply(phi, &mut kphi);
        let rho = dot(phi, &kphi);
        let res: f64 = kphi
            .iter()
            .zip(phi)
            .zip(w)
            .map(|((kp, p), w)| {
                let r = kp - rho * w * p;
                r * r / w
            })
            .sum::<f64>()
            .sqrt();
        (rho, res / rho.abs().max(1.0))
    };

    let mut phi = vec![1.0; n];
    normalize(&mut phi);
    let (mut rho, mut residual) = rayleigh_and_residual(&phi);
    let mut drop = 1.0;
    let mut restarts = 0;
    let inner = SolverOptions {
        rel_tol: 1e-13,
        max_iter: 20_000,
    };
    let mut iterations = 0;
    while residual > opts.tol {
        if iterations >= opts.max_iter {
            return Err(LinalgError::NoConvergence {
                iterations,
                residual,
            });
        }
        iterations += 1;
        let sigma = rho - drop;
        let shifted_coeff: Vec<f64> = vol_coeff.iter().map(|c| c - sigma).collect();
        let shifted = EllipticOperator::new(grid, a, &shifted_coeff, &bdy_coeff)?;
        let rhs: Vec<f64> = phi.iter().zip(w).map(|(p, w)| p * w).collect();
        let mut x: Vec<f64> = phi.iter().map(|p| p / drop).collect();
        let solved = shifted.solve_into(&rhs, &mut x, &inner);
        let indefinite = match solved {
            Ok(_) => dot(&x, &rhs) <= 0.0,
            Err(LinalgError::Indefinite) => true,
            Err(e) => return Err(e),
        };
        if indefinite {
            restarts += 1;
            if restarts > opts.max_restarts {
                return Err(LinalgError::NoConvergence {
                    iterations,
                    residual,
                });
            }
            drop *= 2.0 * (1.0 + rho.abs());
            continue;
        }
        normalize(&mut x);
        phi = x;
        (rho, residual) = rayleigh_and_residual(&phi);
    }
    if phi.iter().any(|&v| v <= 0.0) {
        return Err(LinalgError::NoConvergence {
            iterations,
            residual,
        });
    }
    Ok(EigenReport {
        eigenvalue: rho,
        eigenfunction: ScalarField::interior(phi),
        iterations,
        residual,
        restarts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn torus3(n: usize) -> GridManifold {
        GridManifold::build_torus(3, &[n, n, n], &[1.0; 3]).unwrap()
    }

    #[test]
    fn shifted_constant() {
        let g = torus3(8);
        let p = LinearProblem::new(8.0, 1.0, g.constant(1.0));
        let u = solve_shifted(&p, &g).unwrap();
        assert!(u.values().iter().all(|v| (v - 1.0).abs() < 1e-10));
    }

    #[test]
    fn singular_torus_sinusoid() {
        let a = 8.0;
        let mut errs = Vec::new();
        for n in [16, 32] {
            let g = GridManifold::build_torus(3, &[n, 4, 4], &[1.0; 3]).unwrap();
            let rhs = g.field_from(|x| (2.0 * PI * x[0]).sin());
            let u = solve_shifted(&LinearProblem::new(a, 0.0, rhs), &g).unwrap();
            let exact = g.field_from(|x| (2.0 * PI * x[0]).sin() / (4.0 * PI * PI * a));
            errs.push(u.zip_map(&exact, |p, q| p - q).sup_norm());
            assert!(g.mean(&u).unwrap().abs() < 1e-14);
        }
        assert!(errs[0] < 1e-4);
        let ratio = errs[0] / errs[1];
        assert!((3.5..4.5).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn singular_incompatible() {
        let g = torus3(8);
        let r = solve_shifted(&LinearProblem::new(8.0, 0.0, g.constant(1.0)), &g);
        assert!(matches!(r, Err(LinalgError::IncompatibleRhs { .. })));
    }

    #[test]
    fn torus_rejects_boundary_data() {
        let g = torus3(8);
        let p = LinearProblem::new(8.0, 1.0, g.constant(1.0)).with_robin(1.0, ScalarField::boundary(vec![]));
        assert!(matches!(solve_shifted(&p, &g), Err(LinalgError::InvalidProblem(_))));
    }

    #[test]
    fn robin_cylinder_strong_rows() {
        let g = GridManifold::build_cylinder(3, &[9, 6, 6], &[1.0; 3]).unwrap();
        let rhs = g.field_from(|x| 1.0 + x[0] * (2.0 * PI * x[1]).cos());
        let gb = g.boundary_field_from(|x| x[2]);
        let p = LinearProblem::new(8.0, 0.0, rhs.clone()).with_robin(0.5, gb.clone());
        let u = solve_shifted(&p, &g).unwrap();
        let lap = g.laplacian(&u).unwrap();
        for i in 0..g.node_count() {
            if !g.is_boundary(i) {
                let r = -8.0 * lap.values()[i] - rhs.values()[i];
                assert!(r.abs() < 1e-7, "interior row {i}: {r}");
            }
        }
        let target = g.restrict_to_boundary(&rhs).unwrap().map(|f| -f / 8.0);
        let dn = g.balanced_normal_derivative(&u, &target).unwrap();
        let ub = g.restrict_to_boundary(&u).unwrap();
        for b in 0..g.boundary_count() {
            let r = dn.values()[b] + 0.5 * ub.values()[b] - gb.values()[b];
            assert!(r.abs() < 1e-7, "boundary row {b}: {r}");
        }
    }

    #[test]
    fn neumann_compatible_cases() {
        let g = GridManifold::build_cylinder(3, &[9, 6, 6], &[1.0; 3]).unwrap();
        let zero = solve_neumann_compatible(&g, 8.0, &g.constant(0.0), &g.boundary_constant(0.0)).unwrap();
        assert_eq!(zero.sup_norm(), 0.0);
        let bad = solve_neumann_compatible(&g, 8.0, &g.constant(1.0), &g.boundary_constant(0.0));
        assert!(matches!(bad, Err(LinalgError::IncompatibleRhs { .. })));
        let s = g.field_from(|x| (2.0 * PI * x[0]).cos() + x[1] * x[1]);
        let mean = g.mean(&s).unwrap();
        let rhs = s.map(|v| -4.0 * (v - mean));
        let u = solve_neumann_compatible(&g, 8.0, &rhs, &g.boundary_constant(0.0)).unwrap();
        assert!(g.mean(&u).unwrap().abs() < 1e-13);
        let lap = g.laplacian(&u).unwrap();
        for i in (0..g.node_count()).filter(|&i| !g.is_boundary(i)) {
            assert!((-8.0 * lap.values()[i] - rhs.values()[i]).abs() < 1e-8);
        }
        let t = g.restrict_to_boundary(&rhs).unwrap().map(|f| -f / 8.0);
        assert!(g.balanced_normal_derivative(&u, &t).unwrap().sup_norm() < 1e-8);
    }

    #[test]
    fn eigen_flat_models() {
        let t = torus3(8);
        let e = first_eigenpair(&t, 0.0, 0.0).unwrap();
        assert!(e.eigenvalue.abs() < 1e-10);
        let phi = e.eigenfunction.values();
        assert!(phi.iter().all(|v| (v - phi[0]).abs() < 1e-12 && *v > 0.0));
        let shifted = t.clone().with_coeff_r(t.constant(-1.0)).unwrap();
        let e = first_eigenpair(&shifted, 0.0, 0.0).unwrap();
        assert!((e.eigenvalue + 1.0).abs() < 1e-10);
    }

    #[test]
    fn eigen_negative_boundary_shift() {
        let g = GridManifold::build_cylinder(3, &[9, 6, 6], &[1.0; 3]).unwrap();
        let e = first_eigenpair(&g, 0.0, 0.05).unwrap();
        assert!(e.eigenvalue > 0.0);
        let e = first_eigenpair(&g, 0.0, -0.05).unwrap();
        assert!(e.eigenvalue < 0.0);
        assert!(e.residual <= 1e-10);
        let norm: f64 = e
            .eigenfunction
            .values()
            .iter()
            .zip(g.volume_weights())
            .map(|(p, w)| p * p * w)
            .sum();
        assert!((norm - 1.0).abs() < 1e-10);
    }
}
