use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use cdti_core::dominance::{
    logistic_gaussian_boundary, orthant_dominance_test, pi_dom_condition_check, sd_box, zdom_condition_check, BoundaryRegion, Derivatives, PiDomConfig,
    PI_WINDOW,
};
use cdti_core::effect::estimate_ett;
use cdti_core::elicitation::{evaluate_pair, evaluate_pairs, extract_noisy, write_outcomes_csv};
use cdti_core::experiments::*;
use cdti_core::matching::{propose, RankedPairs, StrategyConfig, StrategyKind};
use cdti_core::rng::derive_seed;
use cdti_core::scm::{
    build_panel_scm, logistic_gaussian, rejection_sample_u, simulate, CrossCov, GaussianScm, OutcomeScm, StandInConfig, StandInScm, DEFAULT_PROPOSAL_CAP,
};
use cdti_core::Dataset;
use clap::parser::ValueSource;
use nalgebra::DMatrix;
use clap::{CommandFactory, FromArgMatches, Parser};
use serde::Serialize;
use serde_json::{json, Value};

use crate::args::*;

const SUBCOMMANDS: [&str; 11] =
    ["generate", "match", "elicit", "panel-zdom", "panel-pi", "budget-curve", "gap-strata", "ett", "check-dominance", "check-conditions", "serve"];

/// Parses, merges the config file, runs, and returns the process exit code.
pub fn main_with(argv: Vec<OsString>) -> i32 {
    let cli = match parse(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            return fail(anyhow::anyhow!(e));
        }
    }
    match dispatch(&cli) {
        Ok(v) => {
            let mut out = std::io::stdout().lock();
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&v).expect("summary serializes"));
            0
        }
        Err(e) => fail(e),
    }
}

fn fail(e: anyhow::Error) -> i32 {
    let code = match e.downcast_ref::<cdti_core::Error>() {
        Some(ce) => format!("{ce:?}").split(['(', ' ', '{']).next().unwrap_or("Error").to_string(),
        None => "Error".into(),
    };
    eprintln!("{}", json!({ "error": { "code": code, "message": format!("{e:#}") } }));
    1
}

fn config_args(v: &Value) -> std::result::Result<Vec<OsString>, clap::Error> {
    let Value::Object(map) = v else {
        return Err(clap::Error::raw(clap::error::ErrorKind::InvalidValue, "config file must hold a JSON object\n"));
    };
    let mut out = Vec::new();
    for (k, v) in map {
        if matches!(k.as_str(), "seed" | "jobs" | "config") {
            continue;
        }
        let flag = format!("--{}", k.replace('_', "-"));
        let text = match v {
            Value::Null | Value::Bool(false) => continue,
            Value::Bool(true) => {
                out.push(flag.into());
                continue;
            }
            Value::String(s) => s.clone(),
            Value::Array(items) => items.iter().map(|x| x.as_str().map(str::to_string).unwrap_or_else(|| x.to_string())).collect::<Vec<_>>().join(","),
            other => other.to_string(),
        };
        out.push(flag.into());
        out.push(text.into());
    }
    Ok(out)
}

/// Required flags may come from the file alone, so the path is found
/// before clap sees the arguments.
fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter().skip(1);
    while let Some(a) = it.next() {
        let a = a.to_string_lossy();
        if a == "--" {
            break;
        }
        if a == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(p) = a.strip_prefix("--config=") {
            return Some(PathBuf::from(p));
        }
    }
    None
}

/// Config-file values are inserted right after the subcommand name so that
/// flags given on the command line, which come later, override them.
fn parse(argv: Vec<OsString>) -> std::result::Result<Cli, clap::Error> {
    let Some(path) = config_path(&argv) else {
        return Cli::try_parse_from(&argv);
    };
    let text = fs::read_to_string(&path).map_err(|e| clap::Error::raw(clap::error::ErrorKind::Io, format!("reading {}: {e}\n", path.display())))?;
    let cfg: Value = serde_json::from_str(&text).map_err(|e| clap::Error::raw(clap::error::ErrorKind::InvalidValue, format!("{}: {e}\n", path.display())))?;
    let pos = argv.iter().skip(1).position(|a| SUBCOMMANDS.iter().any(|s| a == *s)).map(|p| p + 2).unwrap_or(argv.len());
    let mut merged = argv[..pos].to_vec();
    merged.extend(config_args(&cfg)?);
    merged.extend_from_slice(&argv[pos..]);
    let matches = Cli::command().try_get_matches_from(&merged)?;
    let mut cli = Cli::from_arg_matches(&matches)?;
    if matches.value_source("seed") != Some(ValueSource::CommandLine) {
        if let Some(s) = cfg.get("seed").and_then(Value::as_u64) {
            cli.seed = s;
        }
    }
    if cli.jobs.is_none() {
        cli.jobs = cfg.get("jobs").and_then(Value::as_u64).map(|j| j as usize);
    }
    Ok(cli)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_vec_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn write_resolved(dir: &Path, cli: &Cli) -> Result<()> {
    write_json(&dir.join("resolved-config.json"), cli)
}

fn load(data: &Path, roles: Option<&PathBuf>) -> Result<Dataset> {
    let roles = match roles {
        Some(r) => r.clone(),
        None => {
            let stem = data.file_stem().context("dataset path has no file name")?.to_string_lossy();
            data.with_file_name(format!("{stem}.roles.json"))
        }
    };
    Dataset::read(data, &roles).with_context(|| format!("loading {} with roles {}", data.display(), roles.display()))
}

fn gaussian_scm(a: &ScmArgs) -> Result<GaussianScm> {
    Ok(match a.scm {
        ScmChoice::Panel1 => build_panel_scm(CrossCov::RhoIdentity(a.rho.unwrap_or(0.05)), &[1.0; 3], &[1.0; 3])?,
        ScmChoice::Panel2 => build_panel_scm(CrossCov::RhoIdentity(a.rho.unwrap_or(0.55)), &[1.0; 3], &[1.0; 3])?,
        ScmChoice::PanelPi => build_panel_scm(CrossCov::AllOnes(a.c), &[0.2; 3], &[0.0; 3])?,
        ScmChoice::LogisticGaussian => logistic_gaussian(a.rho.unwrap_or(0.2), -1.0, 1.0, 1.0)?,
        ScmChoice::StandIn => bail!("the stand-in model is not Gaussian; choose panel1, panel2, panel-pi or logistic-gaussian"),
    })
}

fn dispatch(cli: &Cli) -> Result<Value> {
    let seed = cli.seed;
    match &cli.command {
        Command::Generate(a) => {
            let (ds, scm_json) = match a.scm.scm {
                ScmChoice::StandIn => {
                    let scm = StandInScm::new(StandInConfig::default(), seed);
                    (scm.simulate(a.n, seed)?, serde_json::to_value(&scm)?)
                }
                _ => {
                    let scm = gaussian_scm(&a.scm)?;
                    (simulate(&scm, a.n, seed)?, json!({ "spec": scm.spec, "spec_hash": scm.spec_hash() }))
                }
            };
            ds.write(&a.out, &a.stem)?;
            write_json(&a.out.join(format!("{}.scm.json", a.stem)), &scm_json)?;
            write_resolved(&a.out, cli)?;
            Ok(json!({ "csv": a.out.join(format!("{}.csv", a.stem)), "n": ds.n(), "treated": ds.treated().len(), "content_hash": ds.content_hash() }))
        }
        Command::Match(a) => {
            let ds = load(&a.data.data, a.data.roles.as_ref())?;
            let o = &a.strategy_opts;
            let cfg = StrategyConfig {
                kind: a.strategy,
                dominance_margin: o.margin,
                pi_gap_tolerance: o.pi_gap_tol,
                max_unit_reuse: o.max_reuse,
                seed,
                strict_dominance: o.strict,
                z_pair_limit: o.z_pair_limit,
            };
            let pi = if a.strategy.needs_propensity() { Some(cv_propensity(&ds, o.cv_folds, seed)?) } else { None };
            let sel = propose(&ds, pi.as_deref(), &cfg, a.budget)?;
            fs::create_dir_all(&a.out)?;
            sel.write_csv(&a.out.join("pairs.csv"))?;
            write_resolved(&a.out, cli)?;
            let mut summary = json!({ "pairs": sel.len(), "shortfall": sel.shortfall(), "candidates": sel.candidates, "subsampled": sel.subsampled });
            if a.strategy == StrategyKind::PiMatch {
                summary["fraction_above_tolerance"] = json!(sel.fraction_above(o.pi_gap_tol));
            }
            write_json(&a.out.join("match-summary.json"), &summary)?;
            Ok(summary)
        }
        Command::Elicit(a) => {
            let ds = load(&a.data.data, a.data.roles.as_ref())?;
            let pairs = RankedPairs::read_csv(&a.pairs, &ds.content_hash())?;
            let outcomes = match (a.hallucination_rate, a.omission_rate) {
                (Some(h), Some(o)) => pairs
                    .pairs
                    .iter()
                    .map(|p| evaluate_pair(&ds, &extract_noisy(&ds, p.i, p.j, h, o, seed)?))
                    .collect::<cdti_core::Result<Vec<_>>>()?,
                _ => evaluate_pairs(&ds, &pairs.pairs)?,
            };
            fs::create_dir_all(&a.out)?;
            write_outcomes_csv(&a.out.join("outcomes.csv"), &outcomes)?;
            write_resolved(&a.out, cli)?;
            let n = outcomes.len().max(1) as f64;
            let summary = json!({
                "pairs": outcomes.len(),
                "mean_lambda": outcomes.iter().map(|o| o.lambda).sum::<f64>() / n,
                "mean_n": outcomes.iter().map(|o| o.n as f64).sum::<f64>() / n,
                "mean_d": outcomes.iter().map(|o| o.d as f64).sum::<f64>() / n,
                "empty": outcomes.iter().filter(|o| o.empty).count(),
            });
            write_json(&a.out.join("elicit-summary.json"), &summary)?;
            Ok(summary)
        }
        Command::PanelZdom(a) => {
            let cfg = PanelZdomConfig { rho: a.rho, delta_grid: a.deltas.clone(), n_pairs: a.n_pairs, reps: a.reps, seed, proposal_cap: DEFAULT_PROPOSAL_CAP };
            finish_report(run_panel_zdom(&cfg)?, &a.out, cli)
        }
        Command::PanelPi(a) => {
            let mut cfg = PanelPiConfig { n_pop: a.n_pop, n_pairs: a.n_pairs, gap_tol: a.gap_tol, reps: a.reps, seed, ..Default::default() };
            if !a.c_grid.is_empty() {
                cfg.c_grid = a.c_grid.clone();
            }
            finish_report(run_panel_pi(&cfg)?, &a.out, cli)
        }
        Command::BudgetCurve(a) => {
            let ds = load(&a.data.data, a.data.roles.as_ref())?;
            let strategies = if a.strategies.is_empty() { StrategyKind::ALL.to_vec() } else { a.strategies.clone() };
            let cfg = BudgetCurveConfig { strategies, b_max: a.b_max, seed, cv_folds: a.cv_folds, dominance_margin: a.margin, max_unit_reuse: a.max_reuse };
            finish_report(run_budget_curve(&ds, &cfg)?, &a.out, cli)
        }
        Command::GapStrata(a) => {
            let ds = load(&a.data.data, a.data.roles.as_ref())?;
            let cfg = GapStrataConfig { n_bins: a.bins, pool_size: a.pool, seed, cv_folds: a.cv_folds };
            finish_report(run_gap_strata(&ds, None, &cfg)?, &a.out, cli)
        }
        Command::Ett(a) => {
            let ds = load(&a.data.data, a.data.roles.as_ref())?;
            let mut adjust = if a.adjust.is_empty() { ds.z_names.clone() } else { a.adjust.clone() };
            if a.with_hidden {
                adjust.extend(ds.u_names.iter().cloned());
            }
            let e = estimate_ett(&ds, &adjust, a.reps, seed)?;
            write_json(&a.out.join("ett.json"), &e)?;
            write_resolved(&a.out, cli)?;
            Ok(serde_json::to_value(e)?)
        }
        Command::CheckDominance(a) => {
            let report = match &a.data {
                Some(path) => {
                    let ds = load(path, a.roles.as_ref())?;
                    let u = ds.u.as_ref().context("dataset has no hidden columns to compare")?;
                    let rows = |idx: Vec<usize>| select_rows(u, &idx);
                    orthant_dominance_test(&rows(ds.treated()), &rows(ds.untreated()), None)?
                }
                None => {
                    let scm = gaussian_scm(&a.scm)?;
                    let z = if a.z.is_empty() { vec![0.0; scm.dz()] } else { a.z.clone() };
                    let t = rejection_sample_u(&scm, &z, 1, a.n, derive_seed(seed, 1), DEFAULT_PROPOSAL_CAP)?;
                    let c = rejection_sample_u(&scm, &z, 0, a.n, derive_seed(seed, 0), DEFAULT_PROPOSAL_CAP)?;
                    orthant_dominance_test(&t.samples, &c.samples, None)?
                }
            };
            write_json(&a.out.join("dominance.json"), &report)?;
            write_resolved(&a.out, cli)?;
            Ok(json!({ "verdict": report.verdict, "worst": report.worst_point(), "grid_points": report.grid.len() }))
        }
        Command::CheckConditions(a) => {
            let v = match a.kind {
                ConditionKind::Boundary => {
                    let region = a.level.map(BoundaryRegion::Level).unwrap_or(BoundaryRegion::Boundary);
                    json!({ "beta_gamma": a.beta_gamma, "region": region, "rho_max": logistic_gaussian_boundary(a.beta_gamma, region)? })
                }
                ConditionKind::Zdom => {
                    let scm = gaussian_scm(&a.scm)?;
                    let (lo, hi) = sd_box(&scm, a.box_sd);
                    let method = if a.fd { Derivatives::FiniteDifference } else { Derivatives::ClosedForm };
                    let r = zdom_condition_check(&scm, a.x, &lo, &hi, a.grid, method)?;
                    json!({ "holds": r.holds(), "report": r })
                }
                ConditionKind::Pidom => {
                    let scm = gaussian_scm(&a.scm)?;
                    let (lo, hi) = sd_box(&scm, a.box_sd);
                    let dz = scm.dz();
                    let cfg = PiDomConfig {
                        x: a.x,
                        p_grid: a.levels.clone(),
                        u_lo: lo[dz..].to_vec(),
                        u_hi: hi[dz..].to_vec(),
                        u_grid: a.grid,
                        window: PI_WINDOW,
                        n_pop: a.n_pop,
                        reps: a.reps,
                        seed,
                    };
                    let r = pi_dom_condition_check(&scm, &cfg)?;
                    json!({ "holds": r.holds, "report": r })
                }
            };
            write_json(&a.out.join("conditions.json"), &v)?;
            write_resolved(&a.out, cli)?;
            Ok(v)
        }
        Command::Serve(a) => {
            let svc = match &a.data_dir {
                Some(d) => cdti_session::Service::open(d.clone()),
                None => cdti_session::Service::from_env(),
            }
            .map_err(|e| anyhow::anyhow!(e))?;
            let addr: std::net::SocketAddr = format!("{}:{}", a.host, a.port).parse().context("bad listen address")?;
            eprintln!("serving {} on http://{addr}", svc.root().display());
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(cdti_session::serve(Arc::new(svc), addr))?;
            Ok(json!({ "stopped": true }))
        }
    }
}

fn select_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |r, c| m[(idx[r], c)])
}

fn finish_report(mut report: ExperimentReport, out: &Path, cli: &Cli) -> Result<Value> {
    let dir = report.write(out)?;
    write_resolved(&dir, cli)?;
    Ok(json!({ "run_dir": dir, "fingerprint": report.fingerprint(), "summary": report.summary, "notes": report.notes }))
}
