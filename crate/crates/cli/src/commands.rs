use std::collections::BTreeMap;

use randshift::audit::{audit, AuditOptions, FinenessReport};
use randshift::cone::{bowen_contraction_check, cone_invariance_check, derive_cone_constants, random_cone_elements};
use randshift::config::RunConfig;
use randshift::conformal::{conformality_residual, estimate_conformal, ConformalFamily};
use randshift::density::{
    fixed_point_residual, gap_fit, invariance_residual, invariant_measure, residual_curve, rho_estimate, GapStatus,
};
use randshift::environment::FiberPoint;
use randshift::models::{builtin, ModelSpec, Params, BUILTINS};
use randshift::stochastics::{clt_test, correlation, InvariantOrbit};
use randshift::{Engine, Error, Symbol, TruncationParams};
use serde_json::json;

use crate::args::{OutArgs, RunArgs};
use crate::output::{num, word, Writer};
use crate::CliError;

/// Exit status of a completed command.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    ConditionFailure,
    ConvergenceFailure,
}

type Ledger = BTreeMap<String, f64>;

fn ledger(items: &[(&str, f64)]) -> Ledger {
    items.iter().map(|(k, v)| (k.to_string(), *v)).collect()
}

fn indicator0(w: &[Symbol]) -> f64 {
    if w[0] == 0 {
        1.0
    } else {
        0.0
    }
}

struct Ctx {
    cfg: RunConfig,
    model: ModelSpec,
    trunc: TruncationParams,
}

impl Ctx {
    fn new(cfg: RunConfig) -> Result<Self, CliError> {
        let model = cfg.model_spec().map_err(CliError::from_core)?;
        let trunc = cfg.truncation_for(&model).map_err(CliError::from_core)?;
        Ok(Self { cfg, model, trunc })
    }

    fn engine(&self) -> Result<Engine<'_>, CliError> {
        Engine::new(&self.model, self.trunc).map_err(CliError::from_core)
    }

    /// Base fibers at time 0.
    fn bases(&self) -> Vec<FiberPoint> {
        self.cfg.samples_for(&self.model, 0).fibers
    }

    fn audit(&self) -> Result<FinenessReport, CliError> {
        let e = self.engine()?;
        let samples = self.cfg.samples_for(&self.model, 8);
        Ok(audit(
            &e,
            &samples,
            &AuditOptions::for_truncation(self.trunc.max_symbol),
        )?)
    }

    fn writer(&self, args: &RunArgs, command: &str) -> Result<Writer, CliError> {
        Writer::new(args.out.clone(), command, self.cfg.clone(), Some(self.model.describe()))
    }
}

/// Compute commands need a certified model; condition (B) is waived on
/// finite alphabets, where it concerns an escape of mass that cannot occur.
fn admissible(ctx: &Ctx, report: &FinenessReport) -> bool {
    let finite = ctx.model.environment.rule.alphabet_size().is_some();
    report
        .conditions
        .iter()
        .all(|c| c.certified || (finite && c.condition == "condition_b"))
}

fn gate(ctx: &Ctx, args: &RunArgs, command: &str) -> Result<Option<Outcome>, CliError> {
    let report = ctx.audit()?;
    if admissible(ctx, &report) || args.force {
        return Ok(None);
    }
    let mut w = ctx.writer(args, command)?;
    w.json("check.json", &report, &Ledger::new())?;
    w.finish()?;
    eprintln!("model is not certified; rerun with --force to proceed (see check.json)");
    Ok(Some(Outcome::ConditionFailure))
}

pub fn run(command: &str, args: &RunArgs) -> Result<Outcome, CliError> {
    let ctx = Ctx::new(args.resolve()?)?;
    if command == "check" {
        return check(&ctx, args);
    }
    if let Some(o) = gate(&ctx, args, command)? {
        return Ok(o);
    }
    match command {
        "conformal" => conformal(&ctx, args),
        "density" => density(&ctx, args),
        "gap" => gap(&ctx, args),
        "correlations" => correlations(&ctx, args),
        "clt" => clt(&ctx, args),
        "constants" => constants(&ctx, args),
        other => unreachable!("unknown command {other}"),
    }
}

fn check(ctx: &Ctx, args: &RunArgs) -> Result<Outcome, CliError> {
    let report = ctx.audit()?;
    let mut w = ctx.writer(args, "check")?;
    let tail = report
        .get("summable")
        .and_then(|c| c.detail.get("tail"))
        .and_then(|v| v.as_f64())
        .unwrap_or(f64::NAN);
    w.json("check.json", &report, &ledger(&[("summability_tail", tail)]))?;
    w.csv(
        "check.csv",
        &["condition", "certified"],
        report
            .conditions
            .iter()
            .map(|c| vec![c.condition.clone(), c.certified.to_string()]),
    )?;
    w.finish()?;
    println!("{}: {}", ctx.model.name, if report.fine { "fine" } else { "not fine" });
    for c in &report.conditions {
        println!(
            "  {:<16}{}",
            c.condition,
            if c.certified { "certified" } else { "FAILED" }
        );
    }
    println!("  kappa = {:.6}", report.kappa);
    Ok(if report.fine {
        Outcome::Ok
    } else {
        Outcome::ConditionFailure
    })
}

fn conformal(ctx: &Ctx, args: &RunArgs) -> Result<Outcome, CliError> {
    let e = ctx.engine()?;
    let mut w = ctx.writer(args, "conformal")?;
    let mut results = Vec::new();
    let mut nu_rows = Vec::new();
    let mut inc_rows = Vec::new();
    let mut converged = true;
    let (mut lam_err, mut tail): (f64, f64) = (0.0, 0.0);
    for x in ctx.bases() {
        let est = estimate_conformal(&e, x, ctx.cfg.pullback, ctx.cfg.tolerance)?;
        let next = estimate_conformal(&e, x.advance(1), ctx.cfg.pullback, ctx.cfg.tolerance)?;
        let residual = conformality_residual(&e, &est.measure, &next.measure)?;
        converged &= est.diagnostics.converged_at.is_some();
        lam_err = lam_err.max(est.lambda_error);
        tail = tail.max(est.measure.tail_mass_bound);
        for (wd, m) in est.measure.entries() {
            nu_rows.push(vec![x.base_seed.to_string(), word(wd), num(m)]);
        }
        for (k, inc) in est.diagnostics.increments.iter().enumerate() {
            inc_rows.push(vec![x.base_seed.to_string(), (k + 2).to_string(), num(*inc)]);
        }
        results.push(json!({
            "fiber": x,
            "lambda": est.lambda,
            "lambda_error": est.lambda_error,
            "anchor": est.anchor,
            "residual": residual.tv,
            "tail_allowance": residual.tail_allowance,
            "tail_mass_bound": est.measure.tail_mass_bound,
            "converged_at": est.diagnostics.converged_at,
            "rate": est.diagnostics.rate,
        }));
        println!(
            "fiber {}: lambda = {:.10} +- {:.2e}, residual = {:.2e}",
            x.base_seed, est.lambda, est.lambda_error, residual.tv
        );
    }
    let led = ledger(&[("lambda_error", lam_err), ("tail_mass_bound", tail)]);
    w.json(
        "lambda.json",
        &json!({ "fibers": results, "converged": converged }),
        &led,
    )?;
    w.csv("nu.csv", &["fiber", "word", "mass"], nu_rows)?;
    w.csv("increments.csv", &["fiber", "n", "increment"], inc_rows)?;
    w.finish()?;
    Ok(if converged {
        Outcome::Ok
    } else {
        Outcome::ConvergenceFailure
    })
}

/// Fixed-point residual level below which `ρ` is reported as converged.
const DENSITY_RESIDUAL: f64 = 1e-6;

fn density(ctx: &Ctx, args: &RunArgs) -> Result<Outcome, CliError> {
    let e = ctx.engine()?;
    let k = ctx.cfg.pullback;
    let mut w = ctx.writer(args, "density")?;
    let mut rows = Vec::new();
    let mut results = Vec::new();
    let mut converged = true;
    let (mut tail, mut led_op): (f64, f64) = (0.0, 0.0);
    for x in ctx.bases() {
        let fam = ConformalFamily::build(&e, x, -(k as i64), 1, k)?;
        let rho_x = rho_estimate(&e, &fam, 0, k)?;
        let rho_y = rho_estimate(&e, &fam, 1, k)?;
        let fixed = fixed_point_residual(&e, &rho_x, &rho_y, fam.lambdas.get(0)?)?;
        let mu_x = invariant_measure(&rho_x, fam.nu(0)?)?;
        let mu_y = invariant_measure(&rho_y, fam.nu(1)?)?;
        let inv = invariance_residual(&mu_x, &mu_y)?;
        let depths: Vec<usize> = [k / 4, k / 2, 3 * k / 4, k].into_iter().filter(|&d| d > 0).collect();
        let curve = residual_curve(&e, x, &depths)?;
        converged &= fixed.norm <= DENSITY_RESIDUAL;
        tail = tail.max(mu_x.tail_mass_bound);
        led_op = led_op.max(fixed.ledger);
        let nu = fam.nu(0)?;
        for (i, wd) in rho_x.space.words().enumerate() {
            rows.push(vec![
                x.base_seed.to_string(),
                word(wd),
                num(rho_x.values[i]),
                num(nu.masses[i]),
                num(mu_x.masses[i]),
            ]);
        }
        results.push(json!({
            "fiber": x,
            "fixed_point_residual": fixed.norm,
            "invariance_residual": inv,
            "rho_min": rho_x.min(),
            "rho_max": rho_x.max(),
            "residual_curve": curve,
        }));
        println!(
            "fiber {}: fixed-point residual = {:.2e}, invariance residual = {:.2e}",
            x.base_seed, fixed.norm, inv
        );
    }
    let led = ledger(&[("mu_tail_mass_bound", tail), ("operator_ledger", led_op)]);
    w.json(
        "density.json",
        &json!({ "fibers": results, "converged": converged }),
        &led,
    )?;
    w.csv("rho.csv", &["fiber", "word", "rho", "nu", "mu"], rows)?;
    w.finish()?;
    Ok(if converged {
        Outcome::Ok
    } else {
        Outcome::ConvergenceFailure
    })
}

fn gap(ctx: &Ctx, args: &RunArgs) -> Result<Outcome, CliError> {
    let e = ctx.engine()?;
    let k = ctx.cfg.pullback;
    let n = ctx.cfg.nmax;
    let mut w = ctx.writer(args, "gap")?;
    let mut rows = Vec::new();
    let mut fits = Vec::new();
    let mut certified = true;
    for x in ctx.bases() {
        let fam = ConformalFamily::build(&e, x, -(k as i64), n as i64, k)?;
        let rho = rho_estimate(&e, &fam, 0, k)?;
        let tests = [e.function(x, |w| w[0] as f64), e.function(x, indicator0)];
        let fit = gap_fit(&e, &fam, &rho, &tests, n)?;
        certified &= fit.status != GapStatus::NotCertified;
        for r in &fit.rows {
            rows.push(vec![
                x.base_seed.to_string(),
                r.n.to_string(),
                num(r.deviation),
                num(r.ledger),
            ]);
        }
        println!(
            "fiber {}: theta = {:?}, status = {:?}",
            x.base_seed, fit.theta, fit.status
        );
        fits.push(json!({ "fiber": x, "fit": fit }));
    }
    w.json("gap.json", &fits, &Ledger::new())?;
    w.csv("gap.csv", &["fiber", "n", "deviation", "ledger"], rows)?;
    w.finish()?;
    Ok(if certified {
        Outcome::Ok
    } else {
        Outcome::ConvergenceFailure
    })
}

fn orbits(ctx: &Ctx, e: &Engine<'_>, len: usize) -> Result<Vec<InvariantOrbit>, CliError> {
    ctx.bases()
        .into_iter()
        .map(|x| InvariantOrbit::build(e, x, len, ctx.cfg.pullback, ctx.cfg.pullback).map_err(CliError::from_core))
        .collect()
}

fn correlations(ctx: &Ctx, args: &RunArgs) -> Result<Outcome, CliError> {
    let e = ctx.engine()?;
    let n = ctx.cfg.nmax;
    let orbits = orbits(ctx, &e, n)?;
    let curve = correlation(&e, &orbits, &indicator0, &indicator0, n)?;
    let mut w = ctx.writer(args, "correlations")?;
    w.json(
        "correlations.json",
        &curve,
        &ledger(&[("operator_ledger", curve.ledger)]),
    )?;
    w.csv(
        "correlations.csv",
        &["n", "value"],
        curve
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| vec![i.to_string(), num(*v)]),
    )?;
    w.finish()?;
    println!("theta_corr = {:?}", curve.theta);
    Ok(Outcome::Ok)
}

fn clt(ctx: &Ctx, args: &RunArgs) -> Result<Outcome, CliError> {
    let e = ctx.engine()?;
    let n = ctx.cfg.clt_n;
    let window = ctx.cfg.nmax;
    let orbits = orbits(ctx, &e, n.max(window))?;
    let r = clt_test(
        &e,
        &orbits,
        &indicator0,
        n,
        ctx.cfg.samples,
        window,
        ctx.cfg.environment.seed,
    )?;
    let mut w = ctx.writer(args, "clt")?;
    let summary = json!({
        "sigma2_gk": r.sigma2_gk,
        "sigma2_emp": r.sigma2_emp,
        "ks_stat": r.ks_stat,
        "pass": r.pass,
        "detail": r,
    });
    w.json(
        "clt.json",
        &summary,
        &ledger(&[("resampled_paths", r.resampled as f64)]),
    )?;
    w.csv(
        "clt_variance.csv",
        &["m", "var_over_m"],
        r.var_curve.iter().map(|(m, v)| vec![m.to_string(), num(*v)]),
    )?;
    w.finish()?;
    println!(
        "sigma2_gk = {:.6}, sigma2_emp = {:.6}, ks = {:?}, pass = {}",
        r.sigma2_gk, r.sigma2_emp, r.ks_stat, r.pass
    );
    Ok(if r.var_stable || r.degenerate {
        Outcome::Ok
    } else {
        Outcome::ConvergenceFailure
    })
}

fn constants(ctx: &Ctx, args: &RunArgs) -> Result<Outcome, CliError> {
    let e = ctx.engine()?;
    let n = ctx.cfg.nmax;
    let k = ctx.cfg.pullback;
    let mut w = ctx.writer(args, "constants")?;
    let fams: Vec<ConformalFamily> = ctx
        .bases()
        .into_iter()
        .map(|x| ConformalFamily::build(&e, x, -(k as i64), 2 * n as i64 + 2, k))
        .collect::<Result<_, _>>()?;
    let samples = ctx.cfg.samples_for(&ctx.model, n as i64);
    let constants = match derive_cone_constants(&e, &fams, &samples, n) {
        Ok(c) => c,
        Err(err @ Error::StageInfeasible { .. }) => {
            w.json("constants.json", &json!({ "failure": err.to_string() }), &Ledger::new())?;
            w.finish()?;
            eprintln!("{err}");
            return Ok(Outcome::ConvergenceFailure);
        }
        Err(err) => return Err(err.into()),
    };
    let fam = &fams[0];
    let x = fam.fiber(0);
    let rho = rho_estimate(&e, fam, 0, k)?;
    let fit = gap_fit(&e, fam, &rho, &[e.function(x, |w| w[0] as f64)], n)?;
    let constants = constants.with_fit(fit.theta, fit.b);
    let y = fam.fiber(1);
    let elements = random_cone_elements(&e, fam, y, &constants, 50, ctx.cfg.environment.seed)?;
    let invariance = cone_invariance_check(&e, fam, &elements, &constants, constants.n0)?;
    let pairs: Vec<_> = elements.chunks(2).map(|p| (p[0].clone(), p[1].clone())).collect();
    let bowen = bowen_contraction_check(&e, fam, &constants, &pairs, n)?;
    w.json(
        "constants.json",
        &json!({ "constants": constants, "invariance": invariance, "bowen": bowen }),
        &ledger(&[(
            "lambda_error_max",
            fam.lambdas.errors.iter().copied().fold(0.0, f64::max),
        )]),
    )?;
    w.csv(
        "bowen.csv",
        &["n", "difference"],
        bowen
            .differences
            .iter()
            .enumerate()
            .map(|(i, v)| vec![i.to_string(), num(*v)]),
    )?;
    w.finish()?;
    println!(
        "k = {}, A = {:.4e}, H = {:.4e}, N0 = {}, eta_tilde = {:.3e}, invariance {}/{}, block factor {:?}",
        constants.k,
        constants.a_cone,
        constants.h_cone,
        constants.n0,
        constants.eta_tilde,
        invariance.passed,
        invariance.elements,
        bowen.per_block_factor
    );
    Ok(if invariance.pass() && bowen.contraction_ok && bowen.peeling_ok {
        Outcome::Ok
    } else {
        Outcome::ConvergenceFailure
    })
}

pub fn models(args: &OutArgs) -> Result<Outcome, CliError> {
    let list: Vec<_> = BUILTINS
        .iter()
        .map(|name| builtin(name, &Params::new()).map(|m| m.describe()))
        .collect::<Result<_, _>>()?;
    let mut w = Writer::new(args.out.clone(), "models", RunConfig::default(), None)?;
    w.json("models.json", &list, &Ledger::new())?;
    w.finish()?;
    for m in &list {
        println!("{:<22}{}", m.name, m.environment_description);
    }
    Ok(Outcome::Ok)
}
