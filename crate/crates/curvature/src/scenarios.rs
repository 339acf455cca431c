//! End-to-end drivers: each takes a manifold and prescribed data, runs the
//! full pipeline and returns a report whose outcome is a valid certificate, a
//! refusal from the necessary-condition check, or the stage that failed.

use std::collections::BTreeMap;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::conformal::{
    certify, check_necessary, conformal_mean_curvature, CertificateTolerances, ConformalConstants, EquationData,
    NecessaryVerdict, SolutionCertificate, VerdictCase,
};
use crate::grid::{GridManifold, ScalarField};
use crate::iterate::{run_monotone, IterateError, IterationTrace, MonotoneConfig};
use crate::linalg::first_eigenpair;
use crate::subsuper::{
    build_sandwich, build_upper_boundary, build_upper_closed, solve_local_dirichlet, build_lower, glue,
    GlueSchedule, LocalDomain, LocalOptions, SubSuperError, SubSuperPair,
};
use crate::surface2d::{
    feasible_start, minimize_constrained, recover_solution, trivial_solution, GaussCertificate, MinimizeOptions,
    OptimizerTrace,
};

/// Which existence result a run exercises.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioTag {
    ClosedZeroEigenvalue,
    MinimalBoundary,
    ScalarMeanPositive,
    ScalarMeanBalanced,
    ScalarMeanNegative,
    GaussSurface,
    HanLiNegative,
    HanLiPositive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum HanLiCase {
    NegEig,
    PosEig,
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Certificate {
    Conformal {
        certificate: SolutionCertificate,
        tolerances: CertificateTolerances,
    },
    Gauss {
        certificate: GaussCertificate,
        tolerance: f64,
    },
    Sweep { levels: Vec<SweepLevel> },
}

#[derive(Clone, Debug, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Outcome {
    Solved { certificate: Certificate },
    Refused { verdict: NecessaryVerdict },
    Failed { stage: String, error: String },
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepLevel {
    pub beta: f64,
    pub lambda: f64,
    pub zeta: f64,
    pub sup_norm: f64,
    pub p_norm: f64,
    pub certificate: Option<SolutionCertificate>,
    pub error: Option<String>,
}

/// Fields a run was judged against, kept for artifact dumps.
#[derive(Clone, Debug)]
pub struct SolvedFields {
    pub u: ScalarField,
    pub data: Option<EquationData>,
    pub gauss_target: Option<ScalarField>,
    /// Per-level solutions of a shift sweep, in level order.
    pub levels: Vec<ScalarField>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ScenarioReport {
    pub tag: ScenarioTag,
    pub inputs_digest: String,
    pub outcome: Outcome,
    pub scalars: BTreeMap<String, f64>,
    pub iteration_trace: Option<IterationTrace>,
    pub optimizer_trace: Option<OptimizerTrace>,
    #[serde(skip)]
    pub fields: Option<SolvedFields>,
}

impl ScenarioReport {
    fn new(tag: ScenarioTag, digest: String) -> Self {
        Self {
            tag,
            inputs_digest: digest,
            outcome: Outcome::Failed {
                stage: "start".into(),
                error: "not run".into(),
            },
            scalars: BTreeMap::new(),
            iteration_trace: None,
            optimizer_trace: None,
            fields: None,
        }
    }

    fn fail(mut self, stage: &str, error: impl ToString) -> Self {
        self.outcome = Outcome::Failed {
            stage: stage.into(),
            error: error.to_string(),
        };
        self
    }

    fn refuse(mut self, verdict: NecessaryVerdict) -> Self {
        self.outcome = Outcome::Refused { verdict };
        self
    }

    fn scalar(&mut self, name: &str, value: f64) {
        self.scalars.insert(name.into(), value);
    }

    pub fn is_solved(&self) -> bool {
        matches!(self.outcome, Outcome::Solved { .. })
    }

    pub fn is_refused(&self) -> bool {
        matches!(self.outcome, Outcome::Refused { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ScenarioOptions {
    #[serde(skip)]
    pub local: LocalOptions,
    #[serde(skip)]
    pub schedule: GlueSchedule,
    #[serde(skip)]
    pub minimize: MinimizeOptions,
    pub max_iter: usize,
    pub tol_residual: Option<f64>,
    /// Overrides the slack ladder.
    pub gamma0: Option<f64>,
    pub ladder_len: usize,
    /// Boundary eigenvalue shift for the negative case.
    pub neg_beta: f64,
    pub eps_margin: f64,
    /// First interior shift magnitude of the positive-case sweep.
    pub beta0: f64,
    pub levels: usize,
    pub c_halvings: usize,
    pub smallness_budget: f64,
    /// Tolerance for "the model eigenvalue vanishes".
    pub eigen_zero_tol: f64,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self {
            local: LocalOptions::default(),
            schedule: GlueSchedule::default(),
            minimize: MinimizeOptions::default(),
            max_iter: 2000,
            tol_residual: None,
            gamma0: None,
            ladder_len: 20,
            neg_beta: 0.05,
            eps_margin: 0.1,
            beta0: 0.1,
            levels: 7,
            c_halvings: 60,
            smallness_budget: MonotoneConfig::DEFAULT_BUDGET,
            eigen_zero_tol: 1e-8,
        }
    }
}

/// SHA-256 over the manifold, its coefficients, the prescribed fields and the
/// options, in a fixed byte layout.
pub fn inputs_digest(tag: ScenarioTag, grid: &GridManifold, fields: &[&ScalarField], opts: &ScenarioOptions) -> String {
    let mut h = Sha256::new();
    h.update(format!("{tag:?}|{:?}|{}|{:?}|{:?}", grid.topology(), grid.dim(), grid.shape(), grid.lengths()).as_bytes());
    for f in [grid.coeff_r(), grid.coeff_h(), grid.coeff_k(), grid.coeff_sigma()]
        .into_iter()
        .chain(fields.iter().copied())
    {
        h.update((f.len() as u64).to_le_bytes());
        for v in f.values() {
            h.update(v.to_le_bytes());
        }
    }
    h.update(format!("{opts:?}").as_bytes());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn tolerances(data: &EquationData, opts: &ScenarioOptions) -> CertificateTolerances {
    let mut tol = CertificateTolerances::for_data(&data.s);
    if let Some(t) = opts.tol_residual {
        tol.residual = t;
    }
    tol
}

/// The slack ladder: `2^{−j}|mean S|`, largest first.
fn slack_ladder(grid: &GridManifold, s: &ScalarField, opts: &ScenarioOptions) -> Vec<f64> {
    if let Some(g) = opts.gamma0 {
        return vec![g];
    }
    let mean = grid.mean(s).map(f64::abs).unwrap_or(0.0);
    (1..=opts.ladder_len).map(|j| mean * 0.5f64.powi(j as i32)).collect()
}

fn check_model_eigenvalue(grid: &GridManifold, report: &mut ScenarioReport, opts: &ScenarioOptions) -> Result<(), String> {
    let eig = first_eigenpair(grid, 0.0, 0.0).map_err(|e| e.to_string())?;
    report.scalar("eigenvalue", eig.eigenvalue);
    if eig.eigenvalue.abs() > opts.eigen_zero_tol {
        return Err(format!("first eigenvalue {:e} is not zero", eig.eigenvalue));
    }
    Ok(())
}

/// Monotone run from a verified pair, folded into the report.
fn finish_monotone(
    grid: &GridManifold,
    data: EquationData,
    pair: &SubSuperPair,
    mut report: ScenarioReport,
    opts: &ScenarioOptions,
) -> ScenarioReport {
    let mut cfg = match MonotoneConfig::for_pair(grid, &data, pair) {
        Ok(c) => c,
        Err(e) => return report.fail("configure", e),
    };
    cfg.max_iter = opts.max_iter;
    cfg.smallness_budget = opts.smallness_budget;
    let tol = tolerances(&data, opts);
    cfg.tol_residual = tol.residual;
    report.scalar("A", cfg.a_shift);
    report.scalar("B", cfg.b_shift);
    report.scalar("theta1", cfg.theta1);
    report.scalar("theta2", cfg.theta2);
    let run = run_monotone(grid, &data, pair, &cfg);
    report.iteration_trace = Some(run.trace);
    match run.result {
        Ok(sol) => {
            let failures = sol.certificate.failures(&tol);
            report.fields = Some(SolvedFields {
                u: sol.solution,
                data: Some(data),
                gauss_target: None,
                levels: Vec::new(),
            });
            if failures.is_empty() {
                report.outcome = Outcome::Solved {
                    certificate: Certificate::Conformal {
                        certificate: sol.certificate,
                        tolerances: tol,
                    },
                };
                report
            } else {
                report.fail("certificate", failures.join("; "))
            }
        }
        Err(e) => report.fail("iterate", e),
    }
}

fn constant_solution(grid: &GridManifold, data: EquationData, mut report: ScenarioReport, opts: &ScenarioOptions) -> ScenarioReport {
    let u = grid.constant(1.0);
    let tol = tolerances(&data, opts);
    match certify(grid, &u, &data) {
        Ok(cert) if cert.is_valid(&tol) => {
            report.fields = Some(SolvedFields {
                u,
                data: Some(data),
                gauss_target: None,
                levels: Vec::new(),
            });
            report.outcome = Outcome::Solved {
                certificate: Certificate::Conformal {
                    certificate: cert,
                    tolerances: tol,
                },
            };
            report
        }
        Ok(cert) => report.fail("certificate", cert.failures(&tol).join("; ")),
        Err(e) => report.fail("certificate", e),
    }
}

/// Closed manifold with vanishing first eigenvalue.
pub fn prescribe_closed(grid: &GridManifold, s: &ScalarField, opts: &ScenarioOptions) -> ScenarioReport {
    let mut report = ScenarioReport::new(ScenarioTag::ClosedZeroEigenvalue, inputs_digest(ScenarioTag::ClosedZeroEigenvalue, grid, &[s], opts));
    if grid.has_boundary() || ConformalConstants::for_grid(grid).is_err() {
        return report.fail("input", "needs a torus of dimension at least 3");
    }
    if let Err(e) = grid.check_interior(s) {
        return report.fail("input", e);
    }
    if let Err(e) = check_model_eigenvalue(grid, &mut report, opts) {
        return report.fail("eigenvalue", e);
    }
    let verdict = match check_necessary(grid, s) {
        Ok(v) => v,
        Err(e) => return report.fail("classify", e),
    };
    let data = EquationData::new(s.clone());
    match verdict.case {
        VerdictCase::Violation => return report.refuse(verdict),
        VerdictCase::IdenticallyZero => return constant_solution(grid, data, report, opts),
        VerdictCase::Admissible => {}
    }
    let domain = match LocalDomain::auto(grid, s) {
        Ok(d) => d,
        Err(e) => return report.fail("local domain", e),
    };
    let ladder = slack_ladder(grid, s, opts);
    let gamma0 = match ladder.iter().copied().find(|g| grid.integrate(&s.map(|x| x + g)).is_ok_and(|v| v < 0.0)) {
        Some(g) => g,
        None => return report.fail("slack", "no admissible slack on the ladder"),
    };
    report.scalar("gamma0", gamma0);
    let candidate = |g: f64| build_upper_closed(grid, s, g);
    let pair = match build_sandwich(grid, &data, domain, gamma0, &candidate, &opts.schedule, &opts.local) {
        Ok(p) => p,
        Err(e) => return report.fail("sandwich", e),
    };
    report.scalar("gamma0_used", pair.slack_gamma0);
    finish_monotone(grid, data, &pair, report, opts)
}

fn sandwich_boundary(
    grid: &GridManifold,
    s: &ScalarField,
    data: &EquationData,
    h_target: &ScalarField,
    g: f64,
    opts: &ScenarioOptions,
) -> Result<SubSuperPair, SubSuperError> {
    let domain = LocalDomain::auto(grid, s)?;
    let candidate = |gamma: f64| build_upper_boundary(grid, s, h_target, 0.5 * gamma, 0.5 * gamma).map(|(u, _)| u);
    build_sandwich(grid, data, domain, g, &candidate, &opts.schedule, &opts.local)
}

/// Cylinder with minimal boundary: `H ≡ 0`.
pub fn prescribe_minimal_boundary(grid: &GridManifold, s: &ScalarField, opts: &ScenarioOptions) -> ScenarioReport {
    let tag = ScenarioTag::MinimalBoundary;
    let mut report = ScenarioReport::new(tag, inputs_digest(tag, grid, &[s], opts));
    if !grid.has_boundary() || ConformalConstants::for_grid(grid).is_err() {
        return report.fail("input", "needs a cylinder of dimension at least 3");
    }
    if let Err(e) = grid.check_interior(s) {
        return report.fail("input", e);
    }
    if let Err(e) = check_model_eigenvalue(grid, &mut report, opts) {
        return report.fail("eigenvalue", e);
    }
    let verdict = match check_necessary(grid, s) {
        Ok(v) => v,
        Err(e) => return report.fail("classify", e),
    };
    let zero_h = grid.boundary_constant(0.0);
    let data = EquationData::new(s.clone()).with_boundary(zero_h.clone());
    match verdict.case {
        VerdictCase::Violation => return report.refuse(verdict),
        VerdictCase::IdenticallyZero => return constant_solution(grid, data, report, opts),
        VerdictCase::Admissible => {}
    }
    let ladder = slack_ladder(grid, s, opts);
    let g = ladder[0];
    report.scalar("gamma0", 0.5 * g);
    report.scalar("gamma_prime", 0.5 * g);
    let pair = match sandwich_boundary(grid, s, &data, &zero_h, g, opts) {
        Ok(p) => p,
        Err(e) => return report.fail("sandwich", e),
    };
    let report = finish_monotone(grid, data, &pair, report, opts);
    with_boundary_scalars(grid, report)
}

fn with_boundary_scalars(grid: &GridManifold, mut report: ScenarioReport) -> ScenarioReport {
    let Some(u) = report.fields.as_ref().map(|f| f.u.clone()) else {
        return report;
    };
    if let Ok(dn) = grid.normal_derivative(&u) {
        report.scalar("normal_derivative_sup", dn.sup_norm());
    }
    if let Ok(h) = conformal_mean_curvature(grid, &u) {
        report.scalar("recovered_mean_curvature_sup", h.sup_norm());
    }
    report
}

/// Cylinder with prescribed `S` and boundary curvature `cH` for some small
/// `c > 0`; the tag follows the sign of `∫H`.
pub fn prescribe_scalar_mean(grid: &GridManifold, s: &ScalarField, h_target: &ScalarField, opts: &ScenarioOptions) -> ScenarioReport {
    let total_h = grid.integrate_boundary(h_target).unwrap_or(f64::NAN);
    let scale = h_target.sup_norm() * grid.boundary_area();
    let tag = if total_h > 1e-12 * scale {
        ScenarioTag::ScalarMeanPositive
    } else if total_h < -1e-12 * scale {
        ScenarioTag::ScalarMeanNegative
    } else {
        ScenarioTag::ScalarMeanBalanced
    };
    let mut report = ScenarioReport::new(tag, inputs_digest(tag, grid, &[s, h_target], opts));
    if !grid.has_boundary() || ConformalConstants::for_grid(grid).is_err() {
        return report.fail("input", "needs a cylinder of dimension at least 3");
    }
    if let Err(e) = grid.check_interior(s).and_then(|_| grid.check_boundary(h_target)) {
        return report.fail("input", e);
    }
    if h_target.sup_norm() == 0.0 {
        return report.fail("input", "H vanishes identically");
    }
    report.scalar("boundary_integral_h", total_h);
    let verdict = match check_necessary(grid, s) {
        Ok(v) => v,
        Err(e) => return report.fail("classify", e),
    };
    if verdict.case != VerdictCase::Admissible {
        return report.refuse(verdict);
    }
    let g = slack_ladder(grid, s, opts)[0];
    report.scalar("gamma0", 0.5 * g);
    report.scalar("gamma_prime", 0.5 * g);
    let c_max = match build_upper_boundary(grid, s, h_target, 0.5 * g, 0.5 * g) {
        Ok((_, c)) => c,
        Err(e) => return report.fail("upper", e),
    };
    report.scalar("c_max", c_max);
    let mut c = c_max.min(1.0);
    let mut last_error = String::from("no attempt");
    for _ in 0..=opts.c_halvings {
        let scaled = h_target.map(|x| c * x);
        let data = EquationData::new(s.clone()).with_boundary(scaled.clone());
        let pair = match sandwich_boundary(grid, s, &data, &scaled, g, opts) {
            Ok(p) => p,
            Err(SubSuperError::GluingFailed { best_margin, node }) if !grid.is_boundary(node) => {
                // The worst row is interior, where c does not enter.
                report.scalar("c", c);
                return report.fail(
                    "sandwich",
                    SubSuperError::GluingFailed { best_margin, node },
                );
            }
            Err(e) => {
                last_error = e.to_string();
                c *= 0.5;
                continue;
            }
        };
        let attempt = finish_monotone(grid, data, &pair, report.clone(), opts);
        if attempt.is_solved() {
            let mut done = with_boundary_scalars(grid, attempt);
            done.scalar("c", c);
            return done;
        }
        if let Outcome::Failed { error, .. } = &attempt.outcome {
            last_error = error.clone();
        }
        c *= 0.5;
    }
    report.scalar("c", c);
    report.fail("c-shrink", format!("exhausted {} halvings; last error: {last_error}", opts.c_halvings))
}

fn sign_mismatch(report: ScenarioReport, eigenvalue: f64, case: HanLiCase) -> ScenarioReport {
    report.fail(
        "eigenvalue",
        format!("sign case mismatch: first eigenvalue {eigenvalue:e} for {case:?}"),
    )
}

fn p_norm(grid: &GridManifold, u: &ScalarField) -> f64 {
    let p = ConformalConstants::for_grid(grid).map(|c| c.p).unwrap_or(2.0);
    grid.integrate(&u.map(|x| x.abs().powf(p))).unwrap_or(f64::NAN).powf(1.0 / p)
}

/// Constant mean-curvature-type targets on a cylinder whose conformal class
/// has nonzero first eigenvalue.
pub fn han_li(grid: &GridManifold, case: HanLiCase, opts: &ScenarioOptions) -> ScenarioReport {
    let tag = match case {
        HanLiCase::NegEig => ScenarioTag::HanLiNegative,
        HanLiCase::PosEig => ScenarioTag::HanLiPositive,
    };
    let mut report = ScenarioReport::new(tag, inputs_digest(tag, grid, &[], opts));
    let c = match ConformalConstants::for_grid(grid) {
        Ok(c) if grid.has_boundary() => c,
        _ => return report.fail("input", "needs a cylinder of dimension at least 3"),
    };
    let h = grid.coeff_h();
    if h.min() < 0.0 || h.max() - h.min() > 1e-12 * (1.0 + h.sup_norm()) {
        return report.fail("input", "boundary mean curvature must be a non-negative constant");
    }
    let eig = match first_eigenpair(grid, 0.0, 0.0) {
        Ok(e) => e,
        Err(e) => return report.fail("eigenvalue", e),
    };
    report.scalar("eigenvalue", eig.eigenvalue);
    match case {
        HanLiCase::NegEig if eig.eigenvalue < -opts.eigen_zero_tol => han_li_negative(grid, &c, report, opts),
        HanLiCase::PosEig if eig.eigenvalue > opts.eigen_zero_tol => han_li_positive(grid, &c, report, opts),
        _ => sign_mismatch(report, eig.eigenvalue, case),
    }
}

fn han_li_negative(grid: &GridManifold, c: &ConformalConstants, mut report: ScenarioReport, opts: &ScenarioOptions) -> ScenarioReport {
    let beta = opts.neg_beta;
    let eig = match first_eigenpair(grid, 0.0, beta) {
        Ok(e) => e,
        Err(e) => return report.fail("eigenvalue", e),
    };
    report.scalar("beta", beta);
    report.scalar("shifted_eigenvalue", eig.eigenvalue);
    if !(eig.eigenvalue < 0.0) {
        return report.fail("eigenvalue", format!("shifted eigenvalue {:e} is not negative", eig.eigenvalue));
    }
    let sup = eig.eigenfunction.max();
    let phi = eig.eigenfunction.map(|x| x / sup);
    let lambda = eig.eigenvalue * (1.0 - opts.eps_margin);
    report.scalar("lambda", lambda);
    let s = grid.constant(lambda);
    let r_inf = grid.coeff_r().min();
    let big_c = 2.0f64.max(2.0 * (r_inf / lambda).max(0.0).powf(1.0 / c.p_minus_2));
    report.scalar("C", big_c);
    let upper = grid.constant(big_c);
    let pair_tol = 1e-9 * (1.0 + lambda.abs());

    // |ζ| halves until the lower boundary inequality and the smallness
    // budget both hold.
    let mut zeta_abs: f64 = 1.0;
    let mut last_error = String::new();
    for _ in 0..=opts.c_halvings {
        let zeta = -zeta_abs;
        let data = EquationData::new(s.clone()).with_boundary(grid.boundary_constant(zeta));
        let pair = match SubSuperPair::verify(grid, &data, phi.clone(), upper.clone(), 0.0, pair_tol) {
            Ok(p) => p,
            Err(e) => {
                last_error = e.to_string();
                zeta_abs *= 0.5;
                continue;
            }
        };
        let cfg = MonotoneConfig::for_pair(grid, &data, &pair);
        match cfg {
            Ok(cfg) if cfg.b_shift - c.kappa * grid.coeff_h().max() <= opts.smallness_budget => {}
            Ok(_) => {
                last_error = IterateError::SmallnessBudgetExceeded {
                    sup_h: zeta_abs,
                    budget: opts.smallness_budget,
                }
                .to_string();
                zeta_abs *= 0.5;
                continue;
            }
            Err(e) => {
                last_error = e.to_string();
                zeta_abs *= 0.5;
                continue;
            }
        }
        report.scalar("zeta", zeta);
        let done = finish_monotone(grid, data, &pair, report, opts);
        return with_boundary_scalars(grid, done);
    }
    report.fail("zeta search", last_error)
}

fn han_li_positive(grid: &GridManifold, c: &ConformalConstants, mut report: ScenarioReport, opts: &ScenarioOptions) -> ScenarioReport {
    let zeta = -opts.beta0;
    report.scalar("zeta", zeta);
    report.scalar("beta0", opts.beta0);
    let center: Vec<f64> = grid.lengths().iter().map(|l| 0.5 * l).collect();
    let radius = 0.25 * grid.lengths().iter().copied().fold(f64::INFINITY, f64::min);
    let domain = match LocalDomain::ball(grid, &center, radius) {
        Ok(d) => d,
        Err(e) => return report.fail("local domain", e),
    };
    let mut levels = Vec::new();
    let mut level_fields = Vec::new();
    let mut failure: Option<(String, String)> = None;
    for j in 0..opts.levels {
        let beta = -opts.beta0 * 0.5f64.powi(j as i32);
        let mut level = SweepLevel {
            beta,
            lambda: f64::NAN,
            zeta,
            sup_norm: f64::NAN,
            p_norm: f64::NAN,
            certificate: None,
            error: None,
        };
        match positive_level(grid, c, &domain, beta, zeta, opts) {
            Ok((lambda, u, cert)) => {
                level.lambda = lambda;
                level.sup_norm = u.sup_norm();
                level.p_norm = p_norm(grid, &u);
                level.certificate = Some(cert);
                level_fields.push(u);
            }
            Err((stage, lambda, e)) => {
                level.lambda = lambda;
                level.error = Some(e.clone());
                failure.get_or_insert((format!("level {j}: {stage}"), e));
            }
        }
        levels.push(level);
        if failure.is_some() {
            break;
        }
    }
    if let Some(last) = levels.last() {
        report.scalar("lambda", last.lambda);
    }
    let sups: Vec<f64> = levels.iter().map(|l| l.sup_norm).collect();
    if sups.len() >= 2 && sups.iter().all(|s| s.is_finite()) {
        let n = sups.len();
        report.scalar("extrapolated_sup_norm", 2.0 * sups[n - 1] - sups[n - 2]);
    }
    match failure {
        Some((stage, e)) => {
            let mut r = report.fail(&stage, e);
            if let Outcome::Failed { .. } = r.outcome {
                r.scalars.insert("levels_completed".into(), levels.iter().filter(|l| l.certificate.is_some()).count() as f64);
            }
            r
        }
        None => {
            report.fields = Some(SolvedFields {
                u: level_fields.last().cloned().unwrap_or_else(|| grid.constant(1.0)),
                data: None,
                gauss_target: None,
                levels: level_fields,
            });
            report.outcome = Outcome::Solved {
                certificate: Certificate::Sweep { levels },
            };
            report
        }
    }
}

type LevelResult = Result<(f64, ScalarField, SolutionCertificate), (&'static str, f64, String)>;

fn positive_level(
    grid: &GridManifold,
    c: &ConformalConstants,
    domain: &LocalDomain,
    beta: f64,
    zeta: f64,
    opts: &ScenarioOptions,
) -> LevelResult {
    let eig = first_eigenpair(grid, beta, 0.0).map_err(|e| ("eigenvalue", f64::NAN, e.to_string()))?;
    let sup = eig.eigenfunction.max();
    let phi = eig.eigenfunction.map(|x| x / sup);
    let inf = phi.min();
    let lambda = (1.0 - opts.eps_margin) * eig.eigenvalue * inf / (2f64.powf(c.p_minus_2) * phi.max().powf(c.p - 1.0));
    if !(lambda > 0.0) {
        return Err(("eigenvalue", lambda, format!("shifted eigenvalue {:e} is not positive", eig.eigenvalue)));
    }
    let s = grid.constant(lambda);
    let data = EquationData::new(s.clone())
        .with_boundary(grid.boundary_constant(zeta))
        .with_beta(beta);
    let local = solve_local_dirichlet(grid, &s, domain, beta, &opts.local).map_err(|e| ("local solve", lambda, e.to_string()))?;
    let lower_tol = 10.0 * opts.local.tol * (1.0 + lambda);
    let lower = build_lower(grid, &local.field, domain, &data, lower_tol).map_err(|e| ("lower", lambda, e.to_string()))?;
    let upper = glue(grid, &lower.field, &phi, domain, &data).map_err(|e| ("glue", lambda, e.to_string()))?;
    let pair = SubSuperPair::verify(grid, &data, lower.field, upper.field, 0.0, lower_tol)
        .map_err(|e| ("sandwich", lambda, e.to_string()))?;
    let mut cfg = MonotoneConfig::for_pair(grid, &data, &pair).map_err(|e| ("configure", lambda, e.to_string()))?;
    cfg.max_iter = opts.max_iter;
    cfg.smallness_budget = opts.smallness_budget;
    let tol = tolerances(&data, opts);
    cfg.tol_residual = tol.residual;
    let run = run_monotone(grid, &data, &pair, &cfg);
    let sol = run.result.map_err(|e| ("iterate", lambda, e.to_string()))?;
    let failures = sol.certificate.failures(&tol);
    if !failures.is_empty() {
        return Err(("certificate", lambda, failures.join("; ")));
    }
    Ok((lambda, sol.solution, sol.certificate))
}

/// Gauss curvature on a flat 2D torus or cylinder.
pub fn prescribe_gauss_2d(grid: &GridManifold, k: &ScalarField, opts: &ScenarioOptions) -> ScenarioReport {
    let tag = ScenarioTag::GaussSurface;
    let mut report = ScenarioReport::new(tag, inputs_digest(tag, grid, &[k], opts));
    if grid.dim() != 2 {
        return report.fail("input", format!("needs a 2D grid, got dimension {}", grid.dim()));
    }
    if let Err(e) = grid.check_interior(k) {
        return report.fail("input", e);
    }
    let verdict = match check_necessary(grid, k) {
        Ok(v) => v,
        Err(e) => return report.fail("classify", e),
    };
    let tolerance = 1e-6;
    let solution = match verdict.case {
        VerdictCase::Violation => return report.refuse(verdict),
        VerdictCase::IdenticallyZero => match trivial_solution(grid, k) {
            Ok(s) => s,
            Err(e) => return report.fail("certificate", e),
        },
        VerdictCase::Admissible => {
            let u0 = match feasible_start(grid, k) {
                Ok(u) => u,
                Err(e) => return report.fail("feasible start", e),
            };
            let (state, trace) = match minimize_constrained(grid, k, &u0, &opts.minimize) {
                Ok(r) => r,
                Err(e) => return report.fail("minimize", e),
            };
            report.optimizer_trace = Some(trace);
            report.scalar("J", state.j_value);
            match recover_solution(grid, k, &state) {
                Ok(s) => s,
                Err(e) => return report.fail("recover", e),
            }
        }
    };
    report.scalar("c1", solution.c1);
    report.scalar("gamma", solution.gamma);
    report.fields = Some(SolvedFields {
        u: solution.u.clone(),
        data: None,
        gauss_target: Some(k.clone()),
        levels: Vec::new(),
    });
    if solution.certificate.is_valid(tolerance) {
        report.outcome = Outcome::Solved {
            certificate: Certificate::Gauss {
                certificate: solution.certificate,
                tolerance,
            },
        };
        report
    } else {
        let r = solution.certificate.residual_interior;
        report.fail("certificate", format!("residual {r:e} > {tolerance:e}"))
    }
}
