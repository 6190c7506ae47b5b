//! Acceptance suite: one line per criterion, nonzero exit if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use randshift::audit::{audit, AuditOptions};
use randshift::cone::{bowen_contraction_check, cone_invariance_check, derive_cone_constants, random_cone_elements};
use randshift::conformal::{estimate_conformal, ConformalFamily};
use randshift::density::{
    gap_fit, invariant_measure, monotone_within, residual_curve, rho_estimate, GapFit, GapStatus, GAP_FLOOR,
};
use randshift::environment::{EnvironmentKind, SampleSet};
use randshift::models::{builtin, ModelSpec, Params, BUILTINS};
use randshift::operator::check_distortion_and_bounds;
use randshift::stochastics::{clt_test, correlation, InvariantOrbit};
use randshift::{Engine, FiberPoint, Symbol, SymbolCodec, TruncationParams};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn x0() -> FiberPoint {
    FiberPoint::new(0, 0)
}

fn model(name: &str) -> ModelSpec {
    builtin(name, &Params::new()).expect("builtin")
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(t: Instant, limit: u64) -> Result<Duration, String> {
    let el = t.elapsed();
    if el > Duration::from_secs(limit) {
        Err(format!("took {el:.2?}, limit {limit} s"))
    } else {
        Ok(el)
    }
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

/// Largest code of a decoded site `|i| <= r`.
fn radius(r: i64) -> Symbol {
    SymbolCodec::encode(r).max(SymbolCodec::encode(-r))
}

fn indicator0(w: &[Symbol]) -> f64 {
    if w[0] == 0 {
        1.0
    } else {
        0.0
    }
}

fn kappa_growing_walk() -> Outcome {
    let t = Instant::now();
    let m = model("growing_walk");
    let trunc = TruncationParams::new(radius(8), m.default_truncation.depth).map_err(e)?;
    let f: Vec<Symbol> = [-1, 0, 1].into_iter().map(SymbolCodec::encode).collect();
    let mut f_model = m.anchor_set.clone();
    f_model.sort_unstable();
    let mut f_sorted = f.clone();
    f_sorted.sort_unstable();
    if f_model != f_sorted {
        return Err(format!("model anchor set {f_model:?} differs from {f_sorted:?}"));
    }
    let eng = Engine::new(&m, trunc).map_err(e)?;
    let samples = SampleSet::for_env(&m.environment, 1, 0, 0, 8);
    let r = audit(&eng, &samples, &AuditOptions::for_truncation(trunc.max_symbol)).map_err(e)?;
    let el = within(t, 10)?;
    ensure(
        r.kappa <= 0.20 + 1e-3,
        format!("kappa = {:.6} (bound 0.201), {el:.2?}", r.kappa),
    )
}

fn golden_oracle() -> Outcome {
    let t = Instant::now();
    let m = model("golden_mean");
    let eng = Engine::new(&m, m.default_truncation).map_err(e)?;
    let est = estimate_conformal(&eng, x0(), 40, 1e-12).map_err(e)?;
    let g = (1.0 + 5f64.sqrt()) / 2.0;
    let d = m.default_truncation.depth as i32;
    // left Perron vector (1/g, 1/g²) propagated to cylinders by conformality
    let left = [1.0 / g, 1.0 / (g * g)];
    let tv = 0.5
        * est
            .measure
            .entries()
            .map(|(w, v)| (v - left[*w.last().unwrap() as usize] * g.powi(1 - d)).abs())
            .sum::<f64>();
    let fam = ConformalFamily::build(&eng, x0(), -40, 0, 40).map_err(e)?;
    let rho = rho_estimate(&eng, &fam, 0, 40).map_err(e)?;
    let c = g * g / (g * g + 1.0);
    let right = eng.function(x0(), |w| if w[0] == 0 { c * g } else { c });
    let alpha = m.potential.holder().alpha;
    let rho_err = rho.combine(1.0, &right, -1.0).map_err(e)?.holder_norm(alpha);
    let lam_err = (est.lambda - g).abs();
    let el = within(t, 5)?;
    ensure(
        lam_err <= 1e-8 && tv <= 1e-8 && rho_err <= 1e-7,
        format!("|dlambda| = {lam_err:.2e}, TV(nu) = {tv:.2e}, |drho|_alpha = {rho_err:.2e}, {el:.2?}"),
    )
}

fn full_shift_fixed_point() -> Outcome {
    let t = Instant::now();
    let m = model("full2");
    let eng = Engine::new(&m, m.default_truncation).map_err(e)?;
    if eng.trunc.depth != 3 {
        return Err(format!("default depth {} is not 3", eng.trunc.depth));
    }
    let fam = ConformalFamily::build(&eng, x0(), -20, 0, 20).map_err(e)?;
    let lam = fam.lambdas.get(0).map_err(e)?;
    let rho = rho_estimate(&eng, &fam, 0, 20).map_err(e)?;
    let mu = invariant_measure(&rho, fam.nu(0).map_err(e)?).map_err(e)?;
    let rho_dev = rho.values.iter().map(|v| (v - 1.0).abs()).fold(0.0, f64::max);
    let exact = mu.masses.iter().all(|&v| v == 0.125);
    let el = within(t, 1)?;
    ensure(
        (lam - 1.0).abs() <= 1e-12 && rho_dev <= 1e-12 && exact,
        format!(
            "|lambda - 1| = {:.1e}, |rho - 1| = {rho_dev:.1e}, mu Bernoulli(1/2) exact: {exact}, {el:.2?}",
            (lam - 1.0).abs()
        ),
    )
}

fn gap_of(m: &ModelSpec, pullback: usize, n: usize) -> Result<GapFit, String> {
    let eng = Engine::new(m, m.default_truncation).map_err(e)?;
    let samples = SampleSet::for_env(&m.environment, 1, 0, 0, 0);
    let x = samples.fibers[0];
    let fam = ConformalFamily::build(&eng, x, -(pullback as i64), n as i64, pullback).map_err(e)?;
    let rho = rho_estimate(&eng, &fam, 0, pullback).map_err(e)?;
    let tests = [eng.function(x, |w| w[0] as f64), eng.function(x, indicator0)];
    gap_fit(&eng, &fam, &rho, &tests, n).map_err(e)
}

/// `|λ₂/λ₁|` of a 2×2 nonnegative matrix.
fn ratio_2x2(m: [[f64; 2]; 2]) -> f64 {
    let tr = m[0][0] + m[1][1];
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    let disc = (tr * tr - 4.0 * det).sqrt();
    ((tr - disc) / (tr + disc)).abs()
}

fn spectral_gap() -> Outcome {
    let t = Instant::now();
    let target = (3.0 - 5f64.sqrt()) / 2.0;
    let fit = gap_of(&model("golden_mean"), 40, 30)?;
    let th = fit.theta.ok_or("golden mean: no fit")?;
    let q = fit.fit_quality.unwrap_or(f64::INFINITY);
    let mut ok = (th / target - 1.0).abs() <= 0.02 && q < 0.05;
    let mut detail = format!("golden_mean theta = {th:.5} (target {target:.5}), residual {q:.1e}");
    let periodic_eta = model("random_eta")
        .with_environment(EnvironmentKind::Periodic { period: 2 })
        .map_err(e)?;
    for m in [model("growing_walk"), periodic_eta] {
        let fit = gap_of(&m, 40, 30)?;
        let q = fit.fit_quality.unwrap_or(f64::INFINITY);
        ok &= matches!(fit.theta, Some(v) if v < 1.0) && q < 0.1;
        detail += &format!(
            "; {} {:?}: theta = {:.5}, residual {q:.1e}",
            m.name,
            m.environment.kind,
            fit.theta.unwrap_or(f64::NAN)
        );
    }
    // the alternating golden/full cycle has a rank-one 2-step product, so
    // its contraction factor is exactly 0 and the deviations must collapse
    let exact = ratio_2x2([[2.0, 1.0], [2.0, 1.0]]).sqrt();
    let fit = gap_of(&model("alternating"), 40, 30)?;
    let dev0 = fit.rows[0].deviation;
    let collapsed = fit.rows[1..].iter().all(|r| r.deviation <= GAP_FLOOR * dev0);
    ok &= exact == 0.0 && fit.status == GapStatus::BelowResolution && collapsed;
    detail += &format!(
        "; alternating: exact theta = {exact}, deviations below {GAP_FLOOR:e} dev_1 from n = 2 ({:?})",
        fit.status
    );
    let el = within(t, 60)?;
    ensure(ok, format!("{detail}, {el:.2?}"))
}

fn residual_decay() -> Outcome {
    let t = Instant::now();
    let depths = [5, 10, 20, 40];
    let mut detail = Vec::new();
    let mut ok = true;
    let mut fine = 0;
    for name in BUILTINS {
        let m = model(name);
        let eng = Engine::new(&m, m.default_truncation).map_err(e)?;
        let samples = SampleSet::for_env(&m.environment, 4, 0, 0, 8);
        let r = audit(&eng, &samples, &AuditOptions::for_truncation(eng.trunc.max_symbol)).map_err(e)?;
        if !r.fine {
            continue;
        }
        fine += 1;
        for x in samples.fibers.iter().copied() {
            let curve = residual_curve(&eng, x, &depths).map_err(e)?;
            let slack = curve.iter().map(|p| p.tail_allowance).fold(1e-12, f64::max);
            let conf: Vec<f64> = curve.iter().map(|p| p.conformality).collect();
            let inv: Vec<f64> = curve.iter().map(|p| p.invariance).collect();
            let last = curve.last().expect("depths");
            let pass = monotone_within(&conf, slack)
                && monotone_within(&inv, slack)
                && last.conformality <= 1e-6
                && last.invariance <= 1e-6;
            if !pass {
                detail.push(format!("{name} fiber {}: conf {:?} inv {:?}", x.base_seed, conf, inv));
            }
            ok &= pass;
        }
    }
    let el = within(t, 120)?;
    if fine == 0 {
        return Err("no fine built-in model".into());
    }
    ensure(
        ok,
        format!(
            "{fine} fine models checked at depths {depths:?}; {} failures {detail:?}, {el:.2?}",
            detail.len()
        ),
    )
}

fn distortion_suite() -> Outcome {
    let mut detail = Vec::new();
    let mut ok = true;
    for name in ["golden_mean", "growing_walk"] {
        let m = model(name);
        let trunc = TruncationParams::new(m.default_truncation.max_symbol, 4).map_err(e)?;
        let eng = Engine::new(&m, trunc).map_err(e)?;
        let fam = ConformalFamily::build(&eng, x0(), 0, 8, 40).map_err(e)?;
        let r = check_distortion_and_bounds(&eng, &[fam], 8).map_err(e)?;
        ok &= r.distortion_ok && r.distortion_worst <= r.k;
        detail.push(format!(
            "{name}: worst ratio {:.4} <= K = {:.4}",
            r.distortion_worst, r.k
        ));
    }
    ensure(ok, detail.join("; "))
}

fn cone_pipeline() -> Outcome {
    let m = model("growing_walk");
    let eng = Engine::new(&m, m.default_truncation).map_err(e)?;
    let (k, n) = (40usize, 30usize);
    let fam = ConformalFamily::build(&eng, x0(), -(k as i64), 2 * n as i64 + 2, k).map_err(e)?;
    let samples = SampleSet::for_env(&m.environment, 1, 0, 0, n as i64);
    let c = derive_cone_constants(&eng, std::slice::from_ref(&fam), &samples, n).map_err(e)?;
    let y = fam.fiber(1);
    let elements = random_cone_elements(&eng, &fam, y, &c, 50, 7).map_err(e)?;
    let inv = cone_invariance_check(&eng, &fam, &elements, &c, c.n0).map_err(e)?;
    let pairs: Vec<_> = elements.chunks(2).map(|p| (p[0].clone(), p[1].clone())).collect();
    let bowen = bowen_contraction_check(&eng, &fam, &c, &pairs, n).map_err(e)?;
    let factor = bowen.per_block_factor.unwrap_or(f64::INFINITY);
    ensure(
        inv.pass() && inv.elements == 50 && c.eta_tilde > 0.0 && factor <= 1.0 - c.eta_tilde && bowen.peeling_ok,
        format!(
            "invariance {}/{} at N0 = {}, block factor {factor:.3e} <= 1 - eta~ with eta~ = {:.3e}",
            inv.passed, inv.elements, c.n0, c.eta_tilde
        ),
    )
}

fn correlations() -> Outcome {
    let g = model("golden_mean");
    let eng = Engine::new(&g, g.default_truncation).map_err(e)?;
    let orbit = InvariantOrbit::build(&eng, x0(), 30, 40, 40).map_err(e)?;
    let curve = correlation(&eng, &[orbit], &indicator0, &indicator0, 30).map_err(e)?;
    let th = curve.theta.ok_or("golden mean: no correlation fit")?;
    let rel = (th / 0.382 - 1.0).abs();

    let f = model("full2");
    let eng = Engine::new(&f, f.default_truncation).map_err(e)?;
    let orbit = InvariantOrbit::build(&eng, x0(), 30, 20, 20).map_err(e)?;
    let centered = |w: &[Symbol]| w[0] as f64 - 0.5;
    let fc = correlation(&eng, std::slice::from_ref(&orbit), &centered, &centered, 30).map_err(e)?;
    let fi = correlation(&eng, &[orbit], &indicator0, &indicator0, 30).map_err(e)?;
    let worst = fc.values[1..]
        .iter()
        .chain(&fi.values[1..])
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    ensure(
        rel <= 0.05 && worst <= 1e-12,
        format!(
            "golden theta_corr = {th:.5} ({:.2}% off 0.382); full2 max |C(n)|, n >= 1: {worst:.1e}",
            100.0 * rel
        ),
    )
}

/// The CLI default seed.
const SEED: u64 = 0;

fn clt() -> Outcome {
    let t = Instant::now();
    let f = model("full2");
    let eng = Engine::new(&f, f.default_truncation).map_err(e)?;
    let orbit = InvariantOrbit::build(&eng, x0(), 1024, 20, 20).map_err(e)?;
    let centered = |w: &[Symbol]| w[0] as f64 - 0.5;
    let rf = clt_test(&eng, &[orbit], &centered, 1024, 10_000, 30, SEED).map_err(e)?;
    let ksf = rf.ks_stat.unwrap_or(f64::INFINITY);

    let g = model("golden_mean");
    let eng = Engine::new(&g, g.default_truncation).map_err(e)?;
    let orbit = InvariantOrbit::build(&eng, x0(), 1024, 40, 40).map_err(e)?;
    let rg = clt_test(&eng, &[orbit], &indicator0, 1024, 10_000, 30, SEED).map_err(e)?;
    let ksg = rg.ks_stat.unwrap_or(f64::INFINITY);
    let rel = (rg.sigma2_gk - rg.sigma2_emp).abs() / rg.sigma2_gk;
    let el = within(t, 120)?;
    ensure(
        (rf.sigma2_emp - 0.25).abs() <= 0.01 && ksf < 0.05 && rel <= 0.05 && ksg < 0.05,
        format!(
            "full2 sigma2 = {:.4}, KS = {ksf:.4}; golden sigma2_GK = {:.5}, sigma2_emp = {:.5} ({:.2}%), KS = {ksg:.4}, {el:.2?}",
            rf.sigma2_emp,
            rg.sigma2_gk,
            rg.sigma2_emp,
            100.0 * rel
        ),
    )
}

fn truncation_robustness() -> Outcome {
    let m = model("growing_walk");
    let lambda = |l: i64, d: usize| -> Result<(f64, f64), String> {
        let eng = Engine::new(&m, TruncationParams::new(radius(l), d).map_err(e)?).map_err(e)?;
        let est = estimate_conformal(&eng, x0(), 40, 1e-10).map_err(e)?;
        Ok((est.lambda, est.lambda_error))
    };
    let (a, ea) = lambda(8, 3)?;
    let (b, _) = lambda(10, 4)?;
    let bound = ea;
    ensure(
        (a - b).abs() < bound,
        format!(
            "lambda = {a:.12} -> {b:.12}, change {:.2e} < ledger {bound:.2e}",
            (a - b).abs()
        ),
    )
}

fn run_cli(dir: &Path, threads: Option<&str>, args: &[&str]) -> Result<(), String> {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_randshift"));
    cmd.args(args).arg("--out").arg(dir);
    match threads {
        Some(n) => cmd.env("RANDSHIFT_THREADS", n),
        None => cmd.env_remove("RANDSHIFT_THREADS"),
    };
    let out = cmd.output().map_err(e)?;
    match out.status.code() {
        Some(0 | 2 | 3) => Ok(()),
        c => Err(format!(
            "{args:?} exited with {c:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        )),
    }
}

fn dir_bytes(dir: &Path) -> Result<Vec<(String, Vec<u8>)>, String> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .map_err(e)?
        .map(|f| {
            let f = f.map_err(e)?;
            Ok((
                f.file_name().to_string_lossy().into_owned(),
                std::fs::read(f.path()).map_err(e)?,
            ))
        })
        .collect::<Result<_, String>>()?;
    files.sort();
    Ok(files)
}

fn reproducibility() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e)?;
    let max = std::thread::available_parallelism()
        .map_or(8, |n| n.get())
        .max(4)
        .to_string();
    let runs: [&[&str]; 9] = [
        &["check", "--model", "random_eta"],
        &["conformal", "--model", "growing_walk"],
        &["density", "--model", "random_eta"],
        &["gap", "--model", "golden_mean"],
        &["correlations", "--model", "nn_walk"],
        &["clt", "--model", "golden_mean", "--samples", "4000", "--n", "256"],
        &["clt", "--model", "random_eta", "--samples", "2000", "--n", "128"],
        &["constants", "--model", "growing_walk"],
        &["models"],
    ];
    let mut files = 0;
    for (i, args) in runs.iter().enumerate() {
        let a = tmp.path().join(format!("{i}a"));
        let b = tmp.path().join(format!("{i}b"));
        let c = tmp.path().join(format!("{i}c"));
        run_cli(&a, Some("1"), args)?;
        run_cli(&b, Some(&max), args)?;
        run_cli(&c, None, args)?;
        let (fa, fb, fc) = (dir_bytes(&a)?, dir_bytes(&b)?, dir_bytes(&c)?);
        if fa.is_empty() || fa != fb || fa != fc {
            return Err(format!("{args:?}: artifacts differ between runs"));
        }
        files += fa.len();
    }
    Ok(format!(
        "{} commands, {files} artifacts bitwise identical at 1, {max} and default threads",
        runs.len()
    ))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("condition (C) on the growing walk", kappa_growing_walk),
        ("golden mean matches the Perron oracle", golden_oracle),
        ("full 2-shift trivial fixed point", full_shift_fixed_point),
        ("spectral gap fit", spectral_gap),
        ("conformality and invariance residuals", residual_decay),
        ("distortion suite", distortion_suite),
        ("cone pipeline", cone_pipeline),
        ("decay of correlations", correlations),
        ("central limit theorem", clt),
        ("truncation robustness", truncation_robustness),
        ("CLI reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let res = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let (tag, detail) = match &res {
            Ok(d) => ("PASS", d),
            Err(d) => ("FAIL", d),
        };
        failed += res.is_err() as usize;
        println!("criterion {:>2} {tag} {name}: {detail} [{:.2?}]", i + 1, t.elapsed());
    }
    println!(
        "acceptance: {} of {} criteria pass",
        criteria.len() - failed,
        criteria.len()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
