use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use curvature::conformal::{
    conformal_gauss_curvature, conformal_mean_curvature, conformal_scalar_curvature,
};
use curvature::scenarios::{
    han_li, prescribe_closed, prescribe_gauss_2d, prescribe_minimal_boundary, prescribe_scalar_mean, HanLiCase,
    Outcome, ScenarioOptions, ScenarioReport,
};
use curvature::{GridManifold, ScalarField};
use serde::Serialize;
use serde_json::Value;
use thiserror::Error;

use crate::config::{ConfigError, Expectation, ManifoldSpec, RunConfig, ScenarioKind};

pub const REPORT_FILE: &str = "report.json";
pub const TRACE_FILE: &str = "trace.csv";

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("cannot write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("cannot encode report: {0}")]
    Encode(#[from] serde_json::Error),
}

/// The on-disk report: everything `verify` needs without the config.
#[derive(Debug, Serialize)]
pub struct ReportDocument<'a> {
    pub scenario: ScenarioKind,
    pub tag: Value,
    pub expect: Expectation,
    pub inputs_digest: &'a str,
    pub manifold: &'a ManifoldSpec,
    pub beta: f64,
    pub outcome: &'a Outcome,
    pub scalars: &'a BTreeMap<String, f64>,
    pub files: BTreeMap<String, String>,
    pub trace: &'static str,
}

pub fn scenario_options(cfg: &RunConfig) -> ScenarioOptions {
    let mut opts = ScenarioOptions::default();
    let s = &cfg.solver;
    if let Some(v) = s.max_iter {
        opts.max_iter = v;
    }
    opts.tol_residual = s.tol_residual;
    opts.gamma0 = s.gamma0;
    if let Some(v) = s.beta0 {
        opts.beta0 = v;
    }
    if let Some(v) = s.levels {
        opts.levels = v;
    }
    if let Some(v) = s.neg_beta {
        opts.neg_beta = v;
    }
    if let Some(v) = s.eps_margin {
        opts.eps_margin = v;
    }
    if let Some(v) = s.c_halvings {
        opts.c_halvings = v;
    }
    if let Some(v) = s.smallness_budget {
        opts.smallness_budget = v;
    }
    opts
}

fn required(cfg: &RunConfig, grid: &GridManifold, name: &str) -> Result<ScalarField, ConfigError> {
    cfg.field(grid, name)?
        .ok_or_else(|| ConfigError::Invalid(format!("scenario needs field {name:?}")))
}

pub fn execute(cfg: &RunConfig) -> Result<(GridManifold, ScenarioReport), ConfigError> {
    let grid = cfg.build_grid()?;
    let opts = scenario_options(cfg);
    let report = match cfg.scenario {
        ScenarioKind::ClosedZeroEigenvalue => prescribe_closed(&grid, &required(cfg, &grid, "S")?, &opts),
        ScenarioKind::MinimalBoundary => prescribe_minimal_boundary(&grid, &required(cfg, &grid, "S")?, &opts),
        ScenarioKind::ScalarMean => {
            let s = required(cfg, &grid, "S")?;
            let h = required(cfg, &grid, "H")?;
            prescribe_scalar_mean(&grid, &s, &h, &opts)
        }
        ScenarioKind::Gauss2d => prescribe_gauss_2d(&grid, &required(cfg, &grid, "K")?, &opts),
        ScenarioKind::HanLiNegative => han_li(&grid, HanLiCase::NegEig, &opts),
        ScenarioKind::HanLiPositive => han_li(&grid, HanLiCase::PosEig, &opts),
    };
    Ok((grid, report))
}

fn dump(grid: &GridManifold, dir: &Path, name: &str, f: &ScalarField, files: &mut BTreeMap<String, String>) -> Result<(), RunError> {
    let file = format!("{name}.csv");
    let path = dir.join(&file);
    let werr = |source| RunError::Write {
        path: path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(&path).map_err(werr)?);
    grid.write_field(&mut out, f).map_err(|e| RunError::Write {
        path: path.display().to_string(),
        source: std::io::Error::other(e),
    })?;
    out.flush().map_err(werr)?;
    files.insert(name.into(), file);
    Ok(())
}

fn data_beta(report: &ScenarioReport) -> f64 {
    report
        .fields
        .as_ref()
        .and_then(|f| f.data.as_ref())
        .map_or(0.0, |d| d.beta)
}

/// Write `report.json`, `trace.csv` and the field dumps.
pub fn write_artifacts(cfg: &RunConfig, grid: &GridManifold, report: &ScenarioReport) -> Result<(), RunError> {
    let dir = &cfg.output;
    fs::create_dir_all(dir).map_err(|source| RunError::Write {
        path: dir.display().to_string(),
        source,
    })?;
    let mut files = BTreeMap::new();

    if grid.coeff_r().sup_norm() != 0.0 {
        dump(grid, dir, "R", grid.coeff_r(), &mut files)?;
    }
    if grid.has_boundary() && grid.coeff_h().sup_norm() != 0.0 {
        dump(grid, dir, "h", grid.coeff_h(), &mut files)?;
    }

    if let Some(fields) = &report.fields {
        dump(grid, dir, "u", &fields.u, &mut files)?;
        if let Some(data) = &fields.data {
            dump(grid, dir, "S", &data.s, &mut files)?;
            if let Some(h) = &data.boundary_h {
                dump(grid, dir, "H", h, &mut files)?;
            }
            if let Ok(s) = conformal_scalar_curvature(grid, &fields.u) {
                dump(grid, dir, "recovered_S", &s, &mut files)?;
            }
            if grid.has_boundary() {
                if let Ok(h) = conformal_mean_curvature(grid, &fields.u) {
                    dump(grid, dir, "recovered_H", &h, &mut files)?;
                }
            }
        }
        if fields.gauss_target.is_some() {
            if let Ok(k) = conformal_gauss_curvature(grid, &fields.u) {
                dump(grid, dir, "recovered_K", &k, &mut files)?;
            }
        }
        for (j, u) in fields.levels.iter().enumerate() {
            dump(grid, dir, &format!("u_level_{j}"), u, &mut files)?;
        }
    }
    // Config targets; the solved data may rescale them (`cH`).
    for name in ["S", "H", "K"] {
        if let Some(f) = cfg.field(grid, name)? {
            let key = if files.contains_key(name) { format!("{name}_target") } else { name.to_string() };
            dump(grid, dir, &key, &f, &mut files)?;
        }
    }

    let trace_path = dir.join(TRACE_FILE);
    let werr = |source| RunError::Write {
        path: trace_path.display().to_string(),
        source,
    };
    let mut out = BufWriter::new(File::create(&trace_path).map_err(werr)?);
    match (&report.iteration_trace, &report.optimizer_trace) {
        (Some(t), _) => t.write_csv(&mut out),
        (None, Some(t)) => t.write_csv(&mut out),
        (None, None) => writeln!(out, "k,residual,residual_boundary,min_u,max_u,monotone_margin"),
    }
    .and_then(|_| out.flush())
    .map_err(werr)?;

    let doc = ReportDocument {
        scenario: cfg.scenario,
        tag: serde_json::to_value(report.tag)?,
        expect: cfg.expect,
        inputs_digest: &report.inputs_digest,
        manifold: &cfg.manifold,
        beta: data_beta(report),
        outcome: &report.outcome,
        scalars: &report.scalars,
        files,
        trace: TRACE_FILE,
    };
    let path = dir.join(REPORT_FILE);
    let text = serde_json::to_string_pretty(&doc)?;
    fs::write(&path, text + "\n").map_err(|source| RunError::Write {
        path: path.display().to_string(),
        source,
    })?;
    Ok(())
}

/// Exit code for a finished run.
pub fn exit_code(report: &ScenarioReport, expect: Expectation) -> i32 {
    match (&report.outcome, expect) {
        (Outcome::Solved { .. }, Expectation::Refused) => {
            eprintln!("note: expected a refusal but the run was solved");
            0
        }
        (Outcome::Solved { .. }, _) => 0,
        (Outcome::Refused { .. }, Expectation::Refused | Expectation::Any) => 0,
        (Outcome::Refused { verdict }, Expectation::Solved) => {
            eprintln!("refused: {}", verdict.reason);
            2
        }
        (Outcome::Failed { stage, error }, _) => {
            eprintln!("failed at {stage}: {error}");
            3
        }
    }
}
