//! Conformal bookkeeping: the constants `a`, `p`, curvature transformation
//! laws, admissibility verdicts, Kazdan–Warner identities, the curvature
//! budget and solution certificates.
//!
//! All discrete identities below are taken against the weak rows of the
//! equation
//!
//! ```text
//! r = a·M u + W (R+β) u − W S u^{p−1} + a T κ (h u − H u^{p/2})
//! ```
//!
//! so that pairing `r` with `1` or with `u^{1−p}` reproduces the integral
//! identities exactly, up to the size of `r` itself.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{pairwise_sum, GridError, GridManifold, ScalarField};

#[derive(Debug, Error)]
pub enum ConformalError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("dimension {0} has no conformal exponent; need n ≥ 3")]
    InvalidDimension(usize),
    #[error("non-positive input {value:e} at node {index}")]
    NonPositiveInput { index: usize, value: f64 },
    #[error("operation needs dimension {expected}, manifold has {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-zero background geodesic curvature is not supported")]
    UnsupportedGeodesicCurvature,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformalConstants {
    pub n: usize,
    pub a: f64,
    pub p: f64,
    pub p_minus_2: f64,
    pub two_minus_p: f64,
    /// `2/(p−2)`, the boundary factor.
    pub kappa: f64,
}

impl ConformalConstants {
    pub fn new(n: usize) -> Result<Self, ConformalError> {
        if n < 3 {
            return Err(ConformalError::InvalidDimension(n));
        }
        let nf = n as f64;
        let p = 2.0 * nf / (nf - 2.0);
        Ok(Self {
            n,
            a: 4.0 * (nf - 1.0) / (nf - 2.0),
            p,
            p_minus_2: 4.0 / (nf - 2.0),
            two_minus_p: -4.0 / (nf - 2.0),
            kappa: (nf - 2.0) / 2.0,
        })
    }

    pub fn for_grid(grid: &GridManifold) -> Result<Self, ConformalError> {
        Self::new(grid.dim())
    }
}

fn require_positive(u: &ScalarField) -> Result<(), ConformalError> {
    match u.values().iter().position(|&v| !(v > 0.0)) {
        Some(index) => Err(ConformalError::NonPositiveInput {
            index,
            value: u.values()[index],
        }),
        None => Ok(()),
    }
}

/// `u^{1−p}(−aΔu + R u)`.
pub fn conformal_scalar_curvature(grid: &GridManifold, u: &ScalarField) -> Result<ScalarField, ConformalError> {
    let c = ConformalConstants::for_grid(grid)?;
    grid.check_interior(u)?;
    require_positive(u)?;
    let lap = grid.laplacian(u)?;
    Ok(ScalarField::interior(
        u.values()
            .iter()
            .zip(lap.values())
            .zip(grid.coeff_r().values())
            .map(|((&u, &l), &r)| u.powf(1.0 - c.p) * (-c.a * l + r * u))
            .collect(),
    ))
}

/// `((p−2)/2)·u^{−p/2}(∂u/∂ν + κ h u)` with the one-sided normal derivative.
pub fn conformal_mean_curvature(grid: &GridManifold, u: &ScalarField) -> Result<ScalarField, ConformalError> {
    let c = ConformalConstants::for_grid(grid)?;
    grid.check_interior(u)?;
    require_positive(u)?;
    let dn = grid.normal_derivative(u)?;
    let ub = grid.restrict_to_boundary(u)?;
    Ok(mean_curvature_from(&c, &ub, &dn, grid.coeff_h()))
}

fn mean_curvature_from(c: &ConformalConstants, ub: &ScalarField, dn: &ScalarField, h: &ScalarField) -> ScalarField {
    ScalarField::boundary(
        ub.values()
            .iter()
            .zip(dn.values())
            .zip(h.values())
            .map(|((&u, &d), &h)| 0.5 * c.p_minus_2 * u.powf(-0.5 * c.p) * (d + c.kappa * h * u))
            .collect(),
    )
}

fn require_2d(grid: &GridManifold) -> Result<(), ConformalError> {
    if grid.dim() != 2 {
        return Err(ConformalError::DimensionMismatch {
            expected: 2,
            found: grid.dim(),
        });
    }
    Ok(())
}

/// `e^{−2u}(−Δu + K_g)`.
pub fn conformal_gauss_curvature(grid: &GridManifold, u: &ScalarField) -> Result<ScalarField, ConformalError> {
    require_2d(grid)?;
    let lap = grid.laplacian(u)?;
    Ok(ScalarField::interior(
        u.values()
            .iter()
            .zip(lap.values())
            .zip(grid.coeff_k().values())
            .map(|((&u, &l), &k)| (-2.0 * u).exp() * (-l + k))
            .collect(),
    ))
}

/// `e^{−u}(∂u/∂ν + σ_g u)`; only `σ_g ≡ 0` backgrounds are accepted.
pub fn conformal_geodesic_curvature(grid: &GridManifold, u: &ScalarField) -> Result<ScalarField, ConformalError> {
    require_2d(grid)?;
    if grid.coeff_sigma().values().iter().any(|&s| s != 0.0) {
        return Err(ConformalError::UnsupportedGeodesicCurvature);
    }
    let dn = grid.normal_derivative(u)?;
    let ub = grid.restrict_to_boundary(u)?;
    Ok(ub.zip_map(&dn, |u, d| (-u).exp() * d))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VerdictCase {
    IdenticallyZero,
    Admissible,
    Violation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NecessaryVerdict {
    pub case: VerdictCase,
    pub mean_s: f64,
    pub min_s: f64,
    pub max_s: f64,
    pub reason: String,
}

/// Classify a prescribed curvature: zero, or sign-changing with negative
/// integral, or neither.
pub fn check_necessary(grid: &GridManifold, s: &ScalarField) -> Result<NecessaryVerdict, ConformalError> {
    let integral = grid.integrate(s)?;
    let mean_s = integral / grid.volume();
    let (min_s, max_s) = (s.min(), s.max());
    let sup = s.sup_norm();
    let tau = 1e-12 * sup;
    let (case, reason) = if sup == 0.0 {
        (VerdictCase::IdenticallyZero, "S vanishes identically".to_string())
    } else {
        let negative = min_s < -tau;
        let positive = max_s > tau;
        let mut failed = Vec::new();
        if !(negative && positive) {
            failed.push("no sign change");
        }
        if !(integral < 0.0) {
            failed.push(if integral > 0.0 {
                "positive mean"
            } else {
                "zero mean"
            });
        }
        if failed.is_empty() {
            (
                VerdictCase::Admissible,
                "S changes sign and has negative integral".to_string(),
            )
        } else {
            (VerdictCase::Violation, failed.join("; "))
        }
    };
    Ok(NecessaryVerdict {
        case,
        mean_s,
        min_s,
        max_s,
        reason,
    })
}

/// Prescribed data of `−aΔu + (R+β)u = S u^{p−1}`,
/// `∂u/∂ν + κ h u = κ H u^{p/2}`; `R`, `h` come from the manifold and a missing
/// `H` means `H ≡ 0`.
#[derive(Clone, Debug)]
pub struct EquationData {
    pub s: ScalarField,
    pub boundary_h: Option<ScalarField>,
    pub beta: f64,
}

impl EquationData {
    pub fn new(s: ScalarField) -> Self {
        Self {
            s,
            boundary_h: None,
            beta: 0.0,
        }
    }

    pub fn with_boundary(mut self, h: ScalarField) -> Self {
        self.boundary_h = Some(h);
        self
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    fn target_h(&self, grid: &GridManifold) -> ScalarField {
        self.boundary_h
            .clone()
            .unwrap_or_else(|| grid.boundary_constant(0.0))
    }

    pub fn validate(&self, grid: &GridManifold) -> Result<(), ConformalError> {
        ConformalConstants::for_grid(grid)?;
        grid.check_interior(&self.s)?;
        if let Some(h) = &self.boundary_h {
            if !grid.has_boundary() {
                return Err(GridError::NoBoundary.into());
            }
            grid.check_boundary(h)?;
        }
        Ok(())
    }
}

/// Weak rows of the equation at `u`; non-negative rows mean `u` is a
/// supersolution there, non-positive a subsolution.
pub fn equation_rows(grid: &GridManifold, data: &EquationData, u: &[f64]) -> Result<Vec<f64>, ConformalError> {
    data.validate(grid)?;
    let c = ConformalConstants::for_grid(grid)?;
    let mut rows = vec![0.0; grid.node_count()];
    grid.apply_stiffness(u, &mut rows);
    for (i, r) in rows.iter_mut().enumerate() {
        let ui = u[i];
        let w = grid.volume_weights()[i];
        let q = grid.coeff_r().values()[i] + data.beta;
        *r = c.a * *r + w * (q * ui - data.s.values()[i] * ui.max(0.0).powf(c.p - 1.0));
    }
    if grid.has_boundary() {
        let t = grid.boundary_weight();
        let hh = data.target_h(grid);
        for (b, &node) in grid.boundary_nodes().iter().enumerate() {
            let ub = u[node];
            let h = grid.coeff_h().values()[b];
            rows[node] +=
                c.a * t * c.kappa * (h * ub - hh.values()[b] * ub.max(0.0).powf(0.5 * c.p));
        }
    }
    Ok(rows)
}

/// Pointwise residuals from weak rows: the strong interior residual
/// (row / W) at non-boundary nodes and the boundary law residual
/// (row / aT) at boundary nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct PointwiseResiduals {
    pub interior: ScalarField,
    pub boundary: ScalarField,
}

pub fn pointwise_residuals(grid: &GridManifold, rows: &[f64]) -> Result<PointwiseResiduals, ConformalError> {
    let c = ConformalConstants::for_grid(grid)?;
    let interior = rows
        .iter()
        .zip(grid.volume_weights())
        .enumerate()
        .map(|(i, (r, w))| if grid.is_boundary(i) { 0.0 } else { r / w })
        .collect();
    let boundary = if grid.has_boundary() {
        let at = c.a * grid.boundary_weight();
        grid.boundary_nodes().iter().map(|&i| rows[i] / at).collect()
    } else {
        Vec::new()
    };
    Ok(PointwiseResiduals {
        interior: ScalarField::interior(interior),
        boundary: ScalarField::boundary(boundary),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KwIdentities {
    pub orthogonality: f64,
    pub orthogonality_scale: f64,
    pub mean_gap: f64,
    pub mean_scale: f64,
}

/// Kazdan–Warner identities for the data with background curvatures.
///
/// `orthogonality = ∫(S u^{p−1} − (R+β)u) + aκ∮(H u^{p/2} − h u)`, which is
/// `∫S u^{p−1}` on a flat torus. `mean_gap` compares `∫S` with
/// `a(1−p)∫|∇u|² ū^{−p}` plus the zeroth-order and boundary terms, where
/// `ū^{−p}` is the mean-value slope of `t^{1−p}/(1−p)` along each edge.
pub fn kw_identities_for(grid: &GridManifold, u: &ScalarField, data: &EquationData) -> Result<KwIdentities, ConformalError> {
    data.validate(grid)?;
    grid.check_interior(u)?;
    require_positive(u)?;
    let c = ConformalConstants::for_grid(grid)?;
    let w = grid.volume_weights();
    let uv = u.values();
    let q: Vec<f64> = grid.coeff_r().values().iter().map(|r| r + data.beta).collect();

    let orth_vol: Vec<f64> = (0..uv.len())
        .map(|i| w[i] * (data.s.values()[i] * uv[i].powf(c.p - 1.0) - q[i] * uv[i]))
        .collect();
    let orth_abs: Vec<f64> = (0..uv.len())
        .map(|i| w[i] * ((data.s.values()[i] * uv[i].powf(c.p - 1.0)).abs() + (q[i] * uv[i]).abs()))
        .collect();
    let mut orthogonality = pairwise_sum(&orth_vol);
    let mut orthogonality_scale = pairwise_sum(&orth_abs);

    let mut mu = vec![0.0; uv.len()];
    grid.apply_stiffness(uv, &mut mu);
    let dirichlet: Vec<f64> = mu
        .iter()
        .zip(uv)
        .map(|(m, &u)| c.a * m * u.powf(1.0 - c.p))
        .collect();
    let zeroth: Vec<f64> = (0..uv.len())
        .map(|i| w[i] * q[i] * uv[i].powf(2.0 - c.p))
        .collect();
    let s_int = grid.integrate(&data.s)?;
    let d = pairwise_sum(&dirichlet);
    let z = pairwise_sum(&zeroth);
    let mut rhs_side = d + z;
    let mut mean_scale = grid.integrate(&data.s.map(f64::abs))? + d.abs() + z.abs();

    if grid.has_boundary() {
        let hh = data.target_h(grid);
        let ub = grid.restrict_to_boundary(u)?;
        let h = grid.coeff_h().values();
        let ak = c.a * c.kappa;
        let b_orth: Vec<f64> = (0..ub.len())
            .map(|b| hh.values()[b] * ub.values()[b].powf(0.5 * c.p) - h[b] * ub.values()[b])
            .collect();
        let b_abs: Vec<f64> = (0..ub.len())
            .map(|b| (hh.values()[b] * ub.values()[b].powf(0.5 * c.p)).abs() + (h[b] * ub.values()[b]).abs())
            .collect();
        let b_mean: Vec<f64> = (0..ub.len())
            .map(|b| h[b] * ub.values()[b].powf(2.0 - c.p) - hh.values()[b] * ub.values()[b].powf(1.0 - 0.5 * c.p))
            .collect();
        let t = grid.boundary_weight();
        orthogonality += ak * grid.integrate_boundary(&ScalarField::boundary(b_orth))?;
        orthogonality_scale += ak * t * pairwise_sum(&b_abs);
        let bm = ak * grid.integrate_boundary(&ScalarField::boundary(b_mean))?;
        rhs_side += bm;
        mean_scale += bm.abs();
    }
    Ok(KwIdentities {
        orthogonality,
        orthogonality_scale,
        mean_gap: (s_int - rhs_side).abs(),
        mean_scale,
    })
}

/// `(orthogonality, mean_gap)` with the manifold's background curvatures and
/// a minimal boundary target.
pub fn kw_identities(grid: &GridManifold, u: &ScalarField, s: &ScalarField) -> Result<(f64, f64), ConformalError> {
    let k = kw_identities_for(grid, u, &EquationData::new(s.clone()))?;
    Ok((k.orthogonality, k.mean_gap))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BudgetCheck {
    pub ok: bool,
    pub lhs: f64,
    pub rhs: f64,
}

/// `∫R dV ≥ −2(n−1)∮H dS`.
pub fn curvature_budget(grid: &GridManifold, r: &ScalarField, h: &ScalarField) -> Result<BudgetCheck, ConformalError> {
    if !grid.has_boundary() {
        return Err(GridError::NoBoundary.into());
    }
    let n = grid.dim() as f64;
    let lhs = grid.integrate(r)?;
    let rhs = -2.0 * (n - 1.0) * grid.integrate_boundary(h)?;
    let scale = 1.0 + grid.integrate(&r.map(f64::abs))? + 2.0 * (n - 1.0) * grid.integrate_boundary(&h.map(f64::abs))?;
    Ok(BudgetCheck {
        ok: lhs >= rhs - 1e-9 * scale,
        lhs,
        rhs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateTolerances {
    pub residual: f64,
    pub identity: f64,
}

impl CertificateTolerances {
    /// Residual `1e−8(1+‖S‖∞)`, identity gaps `1e−7` relative to their scale.
    pub fn for_data(s: &ScalarField) -> Self {
        Self {
            residual: 1e-8 * (1.0 + s.sup_norm()),
            identity: 1e-7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionCertificate {
    pub residual_interior: f64,
    pub residual_boundary: f64,
    pub min_u: f64,
    pub kw_orthogonality: f64,
    pub kw_mean_identity_gap: f64,
    #[serde(rename = "recovered_S")]
    pub recovered_s: Vec<f64>,
    #[serde(rename = "recovered_H")]
    pub recovered_h: Vec<f64>,
    pub budget_ok: bool,
    #[serde(skip)]
    pub identity_scales: (f64, f64),
}

impl SolutionCertificate {
    /// Reasons the certificate fails the tolerances; empty when valid.
    pub fn failures(&self, tol: &CertificateTolerances) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.residual_interior <= tol.residual) {
            out.push(format!(
                "interior residual {:e} > {:e}",
                self.residual_interior, tol.residual
            ));
        }
        if !(self.residual_boundary <= tol.residual) {
            out.push(format!(
                "boundary residual {:e} > {:e}",
                self.residual_boundary, tol.residual
            ));
        }
        if !(self.min_u > 0.0) {
            out.push(format!("min u = {:e} is not positive", self.min_u));
        }
        let (os, ms) = self.identity_scales;
        if !(self.kw_orthogonality.abs() <= tol.identity * (1.0 + os)) {
            out.push(format!(
                "orthogonality {:e} > {:e}",
                self.kw_orthogonality,
                tol.identity * (1.0 + os)
            ));
        }
        if !(self.kw_mean_identity_gap <= tol.identity * (1.0 + ms)) {
            out.push(format!(
                "mean identity gap {:e} > {:e}",
                self.kw_mean_identity_gap,
                tol.identity * (1.0 + ms)
            ));
        }
        out
    }

    pub fn is_valid(&self, tol: &CertificateTolerances) -> bool {
        self.failures(tol).is_empty()
    }
}

/// Recompute every certificate quantity from the raw fields.
pub fn certify(grid: &GridManifold, u: &ScalarField, data: &EquationData) -> Result<SolutionCertificate, ConformalError> {
    let c = ConformalConstants::for_grid(grid)?;
    data.validate(grid)?;
    grid.check_interior(u)?;
    let min_u = u.min();
    let rows = equation_rows(grid, data, u.values())?;
    let res = pointwise_residuals(grid, &rows)?;
    let kw = if min_u > 0.0 {
        kw_identities_for(grid, u, data)?
    } else {
        KwIdentities {
            orthogonality: f64::NAN,
            orthogonality_scale: 0.0,
            mean_gap: f64::NAN,
            mean_scale: 0.0,
        }
    };

    let uv = u.values();
    let lap = grid.laplacian(u)?;
    let recovered_s: Vec<f64> = (0..uv.len())
        .map(|i| {
            let q = grid.coeff_r().values()[i] + data.beta;
            uv[i].powf(1.0 - c.p) * (-c.a * lap.values()[i] + q * uv[i])
        })
        .collect();

    let (recovered_h, budget_ok) = if grid.has_boundary() {
        let target: Vec<f64> = grid
            .boundary_nodes()
            .iter()
            .map(|&i| {
                let q = grid.coeff_r().values()[i] + data.beta;
                (q * uv[i] - data.s.values()[i] * uv[i].max(0.0).powf(c.p - 1.0)) / c.a
            })
            .collect();
        let dn = grid.balanced_normal_derivative(u, &ScalarField::boundary(target))?;
        let ub = grid.restrict_to_boundary(u)?;
        let rh = mean_curvature_from(&c, &ub, &dn, grid.coeff_h());
        // Boundary half cells carry the curvature balanced into the normal
        // derivative, so the budget pairs exactly with the weak rows.
        let vol_s: Vec<f64> = (0..uv.len())
            .map(|i| if grid.is_boundary(i) { data.s.values()[i] } else { recovered_s[i] })
            .collect();
        let ok = conformal_budget(grid, &c, u, &vol_s, Some(rh.values()));
        (rh.into_values(), ok)
    } else {
        (Vec::new(), conformal_budget(grid, &c, u, &recovered_s, None))
    };

    Ok(SolutionCertificate {
        residual_interior: res.interior.sup_norm(),
        residual_boundary: res.boundary.sup_norm(),
        min_u,
        kw_orthogonality: kw.orthogonality,
        kw_mean_identity_gap: kw.mean_gap,
        recovered_s,
        recovered_h,
        budget_ok,
        identity_scales: (kw.orthogonality_scale, kw.mean_scale),
    })
}

/// Budget in the measures of the conformal metric:
/// `∫S̃ u^p dV ≥ −2(n−1)∮H̃ u^{p/2+1} dS`, with right side 0 on a torus.
fn conformal_budget(grid: &GridManifold, c: &ConformalConstants, u: &ScalarField, s: &[f64], h: Option<&[f64]>) -> bool {
    let uv = u.values();
    let w = grid.volume_weights();
    let terms: Vec<f64> = (0..uv.len()).map(|i| w[i] * s[i] * uv[i].powf(c.p)).collect();
    let abs_terms: Vec<f64> = terms.iter().map(|t| t.abs()).collect();
    let lhs = pairwise_sum(&terms);
    let mut scale = 1.0 + pairwise_sum(&abs_terms);
    let mut rhs = 0.0;
    if let Some(h) = h {
        let factor = -2.0 * (c.n as f64 - 1.0) * grid.boundary_weight();
        let bterms: Vec<f64> = grid
            .boundary_nodes()
            .iter()
            .zip(h)
            .map(|(&i, &hb)| hb * uv[i].powf(0.5 * c.p + 1.0))
            .collect();
        rhs = factor * pairwise_sum(&bterms);
        scale += factor.abs() * bterms.iter().map(|t| t.abs()).sum::<f64>();
    }
    lhs >= rhs - 1e-9 * scale
}

/// Discrepancy between `(−aΔ_φ + R_φ)u` in the metric `φ^{p−2}g` and
/// `φ^e(−aΔ + R)(φu)` for the exponent `e`, in sup norm over nodes off the
/// boundary.
pub fn invariance_residual_with_exponent(
    grid: &GridManifold,
    phi: &ScalarField,
    u: &ScalarField,
    exponent: f64,
) -> Result<f64, ConformalError> {
    let c = ConformalConstants::for_grid(grid)?;
    grid.check_interior(u)?;
    require_positive(phi)?;
    let r_phi = conformal_scalar_curvature(grid, phi)?;
    let lap_u = grid.laplacian(u)?;
    let phi_u = phi.zip_map(u, |a, b| a * b);
    let lap_phi_u = grid.laplacian(&phi_u)?;
    let mut cross = vec![0.0; grid.node_count()];
    for axis in 0..grid.dim() {
        let dp = grid.centered_derivative(phi, axis)?;
        let du = grid.centered_derivative(u, axis)?;
        for (x, (a, b)) in cross.iter_mut().zip(dp.values().iter().zip(du.values())) {
            *x += a * b;
        }
    }
    let (pv, uv) = (phi.values(), u.values());
    let r = grid.coeff_r().values();
    let mut worst: f64 = 0.0;
    for i in (0..grid.node_count()).filter(|&i| !grid.is_boundary(i)) {
        let lap_tilde = pv[i].powf(2.0 - c.p) * (lap_u.values()[i] + 2.0 * cross[i] / pv[i]);
        let lhs = -c.a * lap_tilde + r_phi.values()[i] * uv[i];
        let rhs = pv[i].powf(exponent) * (-c.a * lap_phi_u.values()[i] + r[i] * phi_u.values()[i]);
        worst = worst.max((lhs - rhs).abs());
    }
    Ok(worst)
}

/// The exponent for which constant conformal factors cancel exactly, chosen
/// between `1−p` and `(n−2)/(n+2)` by a constant-factor trial on this grid.
pub fn invariance_exponent(grid: &GridManifold) -> Result<f64, ConformalError> {
    let c = ConformalConstants::for_grid(grid)?;
    let n = c.n as f64;
    let phi = grid.constant(2.0);
    let len = grid.lengths()[0];
    let u = grid.field_from(|x| 1.0 + 0.25 * (2.0 * std::f64::consts::PI * x[0] / len).sin());
    let candidates = [1.0 - c.p, (n - 2.0) / (n + 2.0)];
    let mut best = (f64::INFINITY, candidates[0]);
    for e in candidates {
        let r = invariance_residual_with_exponent(grid, &phi, &u, e)?;
        if r < best.0 {
            best = (r, e);
        }
    }
    Ok(best.1)
}

pub fn invariance_residual(grid: &GridManifold, phi: &ScalarField, u: &ScalarField) -> Result<f64, ConformalError> {
    let e = invariance_exponent(grid)?;
    invariance_residual_with_exponent(grid, phi, u, e)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn constants_table() {
        for (n, a, p) in [(3, 8.0, 6.0), (4, 6.0, 4.0), (6, 5.0, 3.0)] {
            let c = ConformalConstants::new(n).unwrap();
            assert!((c.a - a).abs() < 1e-14 && (c.p - p).abs() < 1e-14);
            assert!((c.two_minus_p + 4.0 / (n as f64 - 2.0)).abs() < 1e-14);
            assert!((c.kappa - 2.0 / (p - 2.0)).abs() < 1e-14);
        }
        assert!(ConformalConstants::new(2).is_err());
    }

    #[test]
    fn scalar_curvature_of_constants() {
        let g = GridManifold::build_torus(3, &[6, 6, 6], &[1.0; 3]).unwrap();
        let s = conformal_scalar_curvature(&g, &g.constant(1.0)).unwrap();
        assert!(s.sup_norm() < 1e-12);
        let g = g.clone().with_coeff_r(g.constant(0.7)).unwrap();
        let s = conformal_scalar_curvature(&g, &g.constant(1.5)).unwrap();
        let expect = 0.7 * 1.5f64.powf(-4.0);
        assert!(s.values().iter().all(|v| (v - expect).abs() < 1e-12));
        let bad = g.field_from(|x| x[0] - 0.5);
        assert!(matches!(
            conformal_scalar_curvature(&g, &bad),
            Err(ConformalError::NonPositiveInput { index: 0, .. })
        ));
    }

    #[test]
    fn scalar_curvature_dense_oracle() {
        let n = 8;
        let g = GridManifold::build_torus(3, &[n, n, n], &[1.0; 3]).unwrap();
        let u = g.field_from(|x| 1.0 + 0.3 * (2.0 * PI * x[0]).sin());
        let s = conformal_scalar_curvature(&g, &u).unwrap();
        let h = 1.0 / n as f64;
        for i in 0..g.node_count() {
            let idx = g.multi_index(i);
            let mut lap = 0.0;
            for k in 0..3 {
                for d in [n - 1, 1] {
                    let mut j = idx.clone();
                    j[k] = (j[k] + d) % n;
                    lap += u.values()[g.node_of(&j)] - u.values()[i];
                }
            }
            lap /= h * h;
            let oracle = -8.0 * lap * u.values()[i].powf(-5.0);
            assert!((oracle - s.values()[i]).abs() < 1e-12 * (1.0 + oracle.abs()));
        }
    }

    #[test]
    fn mean_curvature_constants() {
        let g = GridManifold::build_cylinder(3, &[7, 4, 4], &[1.0; 3]).unwrap();
        assert!(conformal_mean_curvature(&g, &g.constant(1.0)).unwrap().sup_norm() < 1e-12);
        let g = g.clone().with_coeff_h(g.boundary_constant(0.4)).unwrap();
        let h = conformal_mean_curvature(&g, &g.constant(2.0)).unwrap();
        let expect = 0.4 * 2.0f64.powf(1.0 - 3.0);
        assert!(h.values().iter().all(|v| (v - expect).abs() < 1e-12));
        let t = GridManifold::build_torus(3, &[6, 6, 6], &[1.0; 3]).unwrap();
        assert!(matches!(
            conformal_mean_curvature(&t, &t.constant(1.0)),
            Err(ConformalError::Grid(GridError::NoBoundary))
        ));
    }

    #[test]
    fn gauss_identity_and_dimension() {
        let g = GridManifold::build_cylinder(2, &[9, 8], &[1.0, 1.0]).unwrap();
        let g = g.clone().with_coeff_k(g.field_from(|x| x[1])).unwrap();
        let k = conformal_gauss_curvature(&g, &g.constant(0.0)).unwrap();
        assert_eq!(&k, g.coeff_k());
        let s = conformal_geodesic_curvature(&g, &g.constant(0.0)).unwrap();
        assert!(s.sup_norm() == 0.0);
        let flat = GridManifold::build_torus(2, &[8, 8], &[1.0, 1.0]).unwrap();
        assert!(conformal_gauss_curvature(&flat, &flat.constant(0.3)).unwrap().sup_norm() < 1e-12);
        let g3 = GridManifold::build_torus(3, &[4, 4, 4], &[1.0; 3]).unwrap();
        assert!(matches!(
            conformal_gauss_curvature(&g3, &g3.constant(0.0)),
            Err(ConformalError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn verdicts() {
        let g = GridManifold::build_torus(3, &[8, 8, 8], &[1.0; 3]).unwrap();
        assert_eq!(check_necessary(&g, &g.constant(0.0)).unwrap().case, VerdictCase::IdenticallyZero);
        let s = g.field_from(|x| (2.0 * PI * x[0]).sin() - 0.2);
        let v = check_necessary(&g, &s).unwrap();
        assert_eq!(v.case, VerdictCase::Admissible);
        assert!((v.mean_s + 0.2).abs() < 1e-12);
        let v = check_necessary(&g, &g.constant(1.0)).unwrap();
        assert_eq!(v.case, VerdictCase::Violation);
        assert!(v.reason.contains("no sign change") && v.reason.contains("positive mean"));
    }

    #[test]
    fn kw_manufactured() {
        let g = GridManifold::build_torus(3, &[12, 12, 12], &[1.0; 3]).unwrap();
        let u = g.field_from(|x| 1.0 + 0.4 * (2.0 * PI * x[0]).sin() * (2.0 * PI * x[1]).sin());
        let s = conformal_scalar_curvature(&g, &u).unwrap();
        let (orth, gap) = kw_identities(&g, &u, &s).unwrap();
        assert!(orth.abs() < 1e-12, "{orth}");
        assert!(gap < 1e-11, "{gap}");
        let (o, m) = kw_identities(&g, &g.constant(1.0), &g.constant(0.0)).unwrap();
        assert_eq!((o, m), (0.0, 0.0));
    }

    #[test]
    fn budget_examples() {
        let g = GridManifold::build_cylinder(3, &[7, 4, 4], &[1.0; 3]).unwrap();
        let b = curvature_budget(&g, &g.constant(0.0), &g.boundary_constant(0.0)).unwrap();
        assert!(b.ok && b.lhs == 0.0 && b.rhs == 0.0);
        let b = curvature_budget(&g, &g.constant(-1.0), &g.boundary_constant(0.0)).unwrap();
        assert!(!b.ok);
    }

    #[test]
    fn invariance_exponent_is_critical() {
        let g = GridManifold::build_torus(3, &[8, 8, 8], &[1.0; 3]).unwrap();
        let e = invariance_exponent(&g).unwrap();
        assert!((e + 5.0).abs() < 1e-14);
        let u = g.field_from(|x| 1.0 + 0.2 * (2.0 * PI * x[1]).cos());
        assert_eq!(invariance_residual(&g, &g.constant(1.0), &u).unwrap(), 0.0);
        assert!(invariance_residual(&g, &g.constant(3.0), &u).unwrap() < 1e-10);
    }

    #[test]
    fn certificate_json_names() {
        let g = GridManifold::build_torus(3, &[4, 4, 4], &[1.0; 3]).unwrap();
        let cert = certify(&g, &g.constant(1.0), &EquationData::new(g.constant(0.0))).unwrap();
        let v = serde_json::to_value(&cert).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "budget_ok",
                "kw_mean_identity_gap",
                "kw_orthogonality",
                "min_u",
                "recovered_H",
                "recovered_S",
                "residual_boundary",
                "residual_interior"
            ]
        );
        assert!(cert.is_valid(&CertificateTolerances::for_data(&g.constant(0.0))));
    }
}
