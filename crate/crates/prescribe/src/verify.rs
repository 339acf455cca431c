use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use curvature::conformal::{certify, check_necessary, CertificateTolerances, EquationData, SolutionCertificate};
use curvature::surface2d::certify_gauss;
use curvature::{FieldKind, GridManifold, ScalarField, VerdictCase};
use serde_json::Value;
use thiserror::Error;

use crate::config::ManifoldSpec;

#[derive(Debug, Error)]
pub enum VerifyError {
    /// Missing or unreadable inputs.
    #[error("{0}")]
    Input(String),
    /// Recomputed quantities disagree with the report.
    #[error("{} mismatch(es):\n  {}", .0.len(), .0.join("\n  "))]
    Mismatch(Vec<String>),
}

impl VerifyError {
    pub fn exit_code(&self) -> i32 {
        match self {
            VerifyError::Input(_) => 4,
            VerifyError::Mismatch(_) => 5,
        }
    }
}

fn input(msg: impl Into<String>) -> VerifyError {
    VerifyError::Input(msg.into())
}

struct Context<'a> {
    report: &'a Value,
    dir: &'a Path,
    grid: GridManifold,
}

impl Context<'_> {
    fn file(&self, key: &str) -> Option<&str> {
        self.report["files"][key].as_str()
    }

    fn read(&self, key: &str, kind: FieldKind) -> Result<ScalarField, VerifyError> {
        let name = self.file(key).ok_or_else(|| input(format!("report lists no {key} dump")))?;
        let path = self.dir.join(name);
        let f = File::open(&path).map_err(|e| input(format!("cannot open {}: {e}", path.display())))?;
        self.grid
            .read_field(BufReader::new(f), kind)
            .map_err(|e| input(format!("{}: {e}", path.display())))
    }

    fn read_optional(&self, key: &str, kind: FieldKind) -> Result<Option<ScalarField>, VerifyError> {
        match self.file(key) {
            Some(_) => self.read(key, kind).map(Some),
            None => Ok(None),
        }
    }
}

/// Recompute the certificate of a finished run from its dumps and compare
/// with the report. Reports of failed runs carry nothing to check.
pub fn verify(report_path: &Path, dir: &Path) -> Result<String, VerifyError> {
    if !dir.is_dir() || dir.read_dir().map_or(true, |mut d| d.next().is_none()) {
        return Err(input(format!("{} is missing or empty", dir.display())));
    }
    let text = std::fs::read_to_string(report_path)
        .map_err(|e| input(format!("cannot read {}: {e}", report_path.display())))?;
    let report: Value = serde_json::from_str(&text).map_err(|e| input(format!("bad report: {e}")))?;
    let manifold: ManifoldSpec =
        serde_json::from_value(report["manifold"].clone()).map_err(|e| input(format!("bad manifold: {e}")))?;
    let grid = GridManifold::build(manifold.topology, manifold.n, &manifold.shape, &manifold.lengths)
        .map_err(|e| input(e.to_string()))?;
    let mut ctx = Context {
        report: &report,
        dir,
        grid,
    };
    if let Some(r) = ctx.read_optional("R", FieldKind::Interior)? {
        ctx.grid = ctx.grid.clone().with_coeff_r(r).map_err(|e| input(e.to_string()))?;
    }
    if let Some(h) = ctx.read_optional("h", FieldKind::Boundary)? {
        ctx.grid = ctx.grid.clone().with_coeff_h(h).map_err(|e| input(e.to_string()))?;
    }

    let outcome = &report["outcome"];
    match outcome["kind"].as_str() {
        Some("solved") => {
            let cert = &outcome["certificate"];
            match cert["kind"].as_str() {
                Some("conformal") => verify_conformal(&ctx, cert),
                Some("gauss") => verify_gauss(&ctx, cert),
                Some("sweep") => verify_sweep(&ctx, cert),
                other => Err(input(format!("unknown certificate kind {other:?}"))),
            }
        }
        Some("refused") => verify_refusal(&ctx, outcome),
        Some("failed") => Ok(format!(
            "run failed at {}; no certificate to check",
            outcome["stage"].as_str().unwrap_or("?")
        )),
        other => Err(input(format!("unknown outcome {other:?}"))),
    }
}

fn number(v: &Value, key: &str) -> Result<f64, VerifyError> {
    match &v[key] {
        Value::Null => Ok(f64::NAN),
        x => x.as_f64().ok_or_else(|| input(format!("{key} is not a number"))),
    }
}

fn numbers(v: &Value) -> Vec<f64> {
    v.as_array()
        .map(|a| a.iter().map(|x| x.as_f64().unwrap_or(f64::NAN)).collect())
        .unwrap_or_default()
}

fn close(name: &str, reported: f64, recomputed: f64, tol: f64, out: &mut Vec<String>) {
    let same_nan = reported.is_nan() && recomputed.is_nan();
    if !same_nan && !((reported - recomputed).abs() <= tol) {
        out.push(format!("{name}: report {reported:e}, recomputed {recomputed:e} (tolerance {tol:e})"));
    }
}

fn close_fields(name: &str, reported: &[f64], recomputed: &[f64], tol: f64, out: &mut Vec<String>) {
    if reported.len() != recomputed.len() {
        out.push(format!("{name}: report has {} values, recomputed {}", reported.len(), recomputed.len()));
        return;
    }
    let bad: Vec<usize> = (0..reported.len())
        .filter(|&i| !((reported[i] - recomputed[i]).abs() <= tol * (1.0 + reported[i].abs())))
        .collect();
    if let Some(&i) = bad.first() {
        out.push(format!(
            "{name}: {} node(s) differ, first at {i}: report {:e}, recomputed {:e}",
            bad.len(),
            reported[i],
            recomputed[i]
        ));
    }
}

fn compare_conformal(
    label: &str,
    reported: &Value,
    recomputed: &SolutionCertificate,
    tol: &CertificateTolerances,
    out: &mut Vec<String>,
) -> Result<(), VerifyError> {
    let wide = CertificateTolerances {
        residual: 2.0 * tol.residual,
        identity: 2.0 * tol.identity,
    };
    for f in recomputed.failures(&wide) {
        out.push(format!("{label}recomputed certificate invalid: {f}"));
    }
    let (os, ms) = recomputed.identity_scales;
    close(&format!("{label}residual_interior"), number(reported, "residual_interior")?, recomputed.residual_interior, wide.residual, out);
    close(&format!("{label}residual_boundary"), number(reported, "residual_boundary")?, recomputed.residual_boundary, wide.residual, out);
    let min_u = number(reported, "min_u")?;
    close(&format!("{label}min_u"), min_u, recomputed.min_u, wide.residual * (1.0 + min_u.abs()), out);
    close(&format!("{label}kw_orthogonality"), number(reported, "kw_orthogonality")?, recomputed.kw_orthogonality, wide.identity * (1.0 + os), out);
    close(
        &format!("{label}kw_mean_identity_gap"),
        number(reported, "kw_mean_identity_gap")?,
        recomputed.kw_mean_identity_gap,
        wide.identity * (1.0 + ms),
        out,
    );
    close_fields(&format!("{label}recovered_S"), &numbers(&reported["recovered_S"]), &recomputed.recovered_s, wide.residual, out);
    close_fields(&format!("{label}recovered_H"), &numbers(&reported["recovered_H"]), &recomputed.recovered_h, wide.residual, out);
    if reported["budget_ok"].as_bool() != Some(recomputed.budget_ok) {
        out.push(format!("{label}budget_ok: report {}, recomputed {}", reported["budget_ok"], recomputed.budget_ok));
    }
    Ok(())
}

fn finish(out: Vec<String>, summary: String) -> Result<String, VerifyError> {
    if out.is_empty() {
        Ok(summary)
    } else {
        Err(VerifyError::Mismatch(out))
    }
}

fn verify_conformal(ctx: &Context, cert: &Value) -> Result<String, VerifyError> {
    let tol: CertificateTolerances =
        serde_json::from_value(cert["tolerances"].clone()).map_err(|e| input(format!("bad tolerances: {e}")))?;
    let u = ctx.read("u", FieldKind::Interior)?;
    let s = ctx.read("S", FieldKind::Interior)?;
    let mut data = EquationData::new(s).with_beta(number(ctx.report, "beta")?);
    if let Some(h) = ctx.read_optional("H", FieldKind::Boundary)? {
        data = data.with_boundary(h);
    }
    let recomputed = certify(&ctx.grid, &u, &data).map_err(|e| input(format!("cannot certify: {e}")))?;
    let mut out = Vec::new();
    compare_conformal("", &cert["certificate"], &recomputed, &tol, &mut out)?;
    finish(
        out,
        format!(
            "certificate reproduced: residual {:e}, min u {:e}",
            recomputed.residual_interior, recomputed.min_u
        ),
    )
}

fn verify_gauss(ctx: &Context, cert: &Value) -> Result<String, VerifyError> {
    let tol = number(cert, "tolerance")?;
    let wide = 2.0 * tol;
    let u = ctx.read("u", FieldKind::Interior)?;
    let k = ctx.read("K", FieldKind::Interior)?;
    let recomputed = certify_gauss(&ctx.grid, &k, &u).map_err(|e| input(format!("cannot certify: {e}")))?;
    let reported = &cert["certificate"];
    let mut out = Vec::new();
    if !recomputed.is_valid(wide) {
        out.push(format!(
            "recomputed certificate invalid: residual {:e} > {wide:e}",
            recomputed.residual_interior.max(recomputed.residual_boundary.unwrap_or(0.0))
        ));
    }
    close("residual_interior", number(reported, "residual_interior")?, recomputed.residual_interior, wide, &mut out);
    if let Some(b) = recomputed.residual_boundary {
        close("residual_boundary", number(reported, "residual_boundary")?, b, wide, &mut out);
    }
    close("total_curvature", number(reported, "total_curvature")?, recomputed.total_curvature, wide, &mut out);
    close("min_u", number(reported, "min_u")?, recomputed.min_u, wide, &mut out);
    close("max_u", number(reported, "max_u")?, recomputed.max_u, wide, &mut out);
    close_fields(
        "recovered_k",
        &numbers(&reported["recovered_k"]["values"]),
        recomputed.recovered_k.values(),
        wide,
        &mut out,
    );
    finish(out, format!("certificate reproduced: residual {:e}", recomputed.residual_interior))
}

fn verify_sweep(ctx: &Context, cert: &Value) -> Result<String, VerifyError> {
    let levels = cert["levels"].as_array().ok_or_else(|| input("sweep without levels"))?;
    let mut out = Vec::new();
    for (j, level) in levels.iter().enumerate() {
        let Some(reported) = level.get("certificate").filter(|c| !c.is_null()) else {
            out.push(format!("level {j}: report carries no certificate"));
            continue;
        };
        let u = ctx.read(&format!("u_level_{j}"), FieldKind::Interior)?;
        let s = ctx.grid.constant(number(level, "lambda")?);
        let data = EquationData::new(s)
            .with_boundary(ctx.grid.boundary_constant(number(level, "zeta")?))
            .with_beta(number(level, "beta")?);
        let tol = CertificateTolerances::for_data(&data.s);
        let recomputed = certify(&ctx.grid, &u, &data).map_err(|e| input(format!("cannot certify level {j}: {e}")))?;
        compare_conformal(&format!("level {j}: "), reported, &recomputed, &tol, &mut out)?;
    }
    finish(out, format!("{} level certificates reproduced", levels.len()))
}

fn verify_refusal(ctx: &Context, outcome: &Value) -> Result<String, VerifyError> {
    let key = if ctx.file("K").is_some() { "K" } else { "S" };
    let f = ctx.read(key, FieldKind::Interior)?;
    let verdict = check_necessary(&ctx.grid, &f).map_err(|e| input(e.to_string()))?;
    if verdict.case != VerdictCase::Violation {
        return Err(VerifyError::Mismatch(vec![format!(
            "report refuses {key} but it classifies as {:?}",
            verdict.case
        )]));
    }
    let reported = outcome["verdict"]["reason"].as_str().unwrap_or("");
    Ok(format!("refusal reproduced: {reported}"))
}
