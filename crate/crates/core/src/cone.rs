//! Cone constants, cone membership, and the block-contraction check.
//!
//! The pipeline is staged because `l₀` enters `𝒜` through `β` while `𝒜`
//! enters the contraction-stage level: first `l₀` from `2M̂ L̂1 <= 1`, then
//! `β`, `𝒜`, `H`, `N₀`, and last the contraction level `l₀'` with `𝒜` fixed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{beta_bound, log_linear_fit, ConformalFamily};
use crate::environment::{FiberPoint, SampleSet};
use crate::error::{Error, Result};
use crate::operator::{check_distortion_and_bounds, DepthFunction, Engine, FiberOperatorReport};
use crate::potential::check_summability;
use crate::shift::{check_finite_range, mixing_table, Symbol};

/// Target accuracy for the constructive contraction count.
pub const EPSILON_PRIME: f64 = 1.0 / 34.0;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConeConstants {
    pub alpha: f64,
    #[serde(rename = "V_alpha")]
    pub v_alpha: f64,
    #[serde(rename = "C_dist")]
    pub c_dist: f64,
    #[serde(rename = "K")]
    pub k_dist: f64,
    /// Summability bound `M`.
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "M_hat")]
    pub m_hat: f64,
    #[serde(rename = "S")]
    pub s: f64,
    pub k: usize,
    /// `l₀ … l_k`, each capped at the truncation.
    pub l_levels: Vec<Symbol>,
    pub l_saturated: bool,
    /// Set when `2M̂ L̂1 <= 1` also holds beyond the window by the column majorant.
    pub tail_certified: bool,
    pub beta: f64,
    pub beta_formula: f64,
    /// `Q_{l₀}`.
    pub q_l0: f64,
    #[serde(rename = "A_cone")]
    pub a_cone: f64,
    /// Which of `1`, `M_hat`, `1/beta` attains `𝒜/2`.
    pub a_cone_attained_by: String,
    #[serde(rename = "H_cone")]
    pub h_cone: f64,
    #[serde(rename = "N0")]
    pub n0: usize,
    /// Contraction-stage level from `2𝒜M̂ L̂1 < 1`; above the truncation
    /// when only the column majorant certifies it.
    pub l_bowen: Symbol,
    pub q_prefix: usize,
    /// `q` capped at `d - 1`.
    pub q_prefix_used: usize,
    #[serde(rename = "N_l")]
    pub n_block: usize,
    pub a_floor: f64,
    pub eta: f64,
    pub eta_tilde: f64,
    /// Constructive `n_ε` for `ε' = 1/34`.
    pub n_eps: f64,
    /// `log ϑ = -ln 2 / n_ε`.
    pub log_theta_certified: f64,
    pub theta_fit: Option<f64>,
    #[serde(rename = "B_fit")]
    pub b_fit: Option<f64>,
    pub operator: FiberOperatorReport,
}

impl ConeConstants {
    pub fn with_fit(mut self, theta: Option<f64>, b: Option<f64>) -> Self {
        self.theta_fit = theta;
        self.b_fit = b;
        self
    }
}

fn infeasible(stage: &'static str, reason: impl Into<String>) -> Error {
    Error::StageInfeasible {
        stage,
        reason: reason.into(),
    }
}

/// Least integer `n >= 0` with `f(n)`, searched up to `cap`.
fn least(cap: usize, f: impl Fn(usize) -> bool) -> Option<usize> {
    (0..=cap).find(|&n| f(n))
}

/// `sup_t (L_t 1|[e] + tail_t) / λ_t` per letter, and the dropped-column
/// bound `sup_t column_tail_t / λ_t`.
fn normalized_profile(engine: &Engine<'_>, families: &[ConformalFamily]) -> Result<(Vec<f64>, f64)> {
    let top = engine.trunc.max_symbol as usize;
    let mut profile = vec![0.0f64; top + 1];
    let mut beyond: f64 = 0.0;
    for fam in families {
        for t in fam.t0..=fam.lambdas.t1() {
            let step = engine.step(fam.fiber(t))?;
            let lam = fam.lambdas.get(t)?;
            let l1 = step.apply_values(&vec![1.0; step.source.len()]);
            for (w, &v) in step.target.words().zip(&l1) {
                let e = w[0] as usize;
                profile[e] = profile[e].max((v + step.tail) / lam);
            }
            beyond = beyond.max(step.column_tail / lam);
        }
    }
    Ok((profile, beyond))
}

/// First letter from which `c · profile <= bound` (strict if `strict`) holds
/// on the rest of the window; `L + 1` when no such letter exists.
fn level_from(profile: &[f64], c: f64, bound: f64, strict: bool) -> Symbol {
    let bad = |v: f64| if strict { c * v >= bound } else { c * v > bound };
    profile.iter().rposition(|&v| bad(v)).map_or(0, |i| i + 1) as Symbol
}

/// Least letter `l > L` with `c · column_tail(l) < 1` (or `<= 1`) at every
/// sampled state, by doubling and bisection along the column majorant.
fn analytic_level(engine: &Engine<'_>, samples: &SampleSet, c: f64, strict: bool) -> Option<Symbol> {
    let tails = &engine.model.tails;
    let states: Vec<_> = samples.points().map(|x| engine.state(x)).collect();
    let ok = |l: Symbol| -> bool {
        states.iter().all(|&s| match tails.column_tail(s, l) {
            Some(v) if strict => c * v < 1.0,
            Some(v) => c * v <= 1.0,
            None => false,
        })
    };
    let top = engine.trunc.max_symbol.max(1);
    let mut hi = top;
    while !ok(hi) {
        hi = hi.checked_mul(2).filter(|&h| h < 1 << 48)?;
    }
    // column_tail(l) bounds letters b > l, so the level is l + 1
    let mut lo = top;
    if hi == top {
        return Some(top + 1);
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if ok(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    Some(hi + 1)
}

/// Runs the whole pipeline over the orbits of `families`, which must cover
/// at least `n_max` steps from their start.
pub fn derive_cone_constants(
    engine: &Engine<'_>,
    families: &[ConformalFamily],
    samples: &SampleSet,
    n_max: usize,
) -> Result<ConeConstants> {
    let model = engine.model;
    let top = engine.trunc.max_symbol;
    let d = engine.trunc.depth;
    let holder = model.potential.holder();
    let alpha = holder.alpha;
    let fam0 = families
        .first()
        .ok_or_else(|| infeasible("input", "no conformal family"))?;

    let operator = check_distortion_and_bounds(engine, families, n_max)?;
    let summability = check_summability(engine, samples)?;
    let m_hat = operator.m_hat.max(operator.s_two_norm);
    if !m_hat.is_finite() {
        return Err(infeasible("M_hat", "uniform bound is not finite"));
    }

    let k = least(100_000, |k| {
        0.5 + (2.0 * m_hat + 4.0) * (-alpha * k as f64).exp() <= 1.0
    })
    .ok_or_else(|| infeasible("k", format!("alpha = {alpha} too small")))?;

    let (profile, beyond) = normalized_profile(engine, families)?;
    let l0 = level_from(&profile, 2.0 * m_hat, 1.0, false);
    let finite_alphabet = model.environment.rule.alphabet_size().is_some();
    let tail_certified = finite_alphabet || 2.0 * m_hat * beyond <= 1.0;
    let lambda_min = families
        .iter()
        .map(|f| f.lambdas.values.iter().copied().fold(f64::INFINITY, f64::min))
        .fold(f64::INFINITY, f64::min);
    let l0 = if l0 > top && !tail_certified {
        analytic_level(engine, samples, 2.0 * m_hat / lambda_min, false)
            .ok_or_else(|| infeasible("l0", "2 M_hat L1 <= 1 fails on the window and along the majorant"))?
    } else {
        l0
    };

    let letters: Vec<Symbol> = (0..=top).collect();
    let range = check_finite_range(&model.environment, &letters, samples, Symbol::MAX)?;
    let mut l_levels = vec![l0.min(top)];
    let mut l_saturated = l0 > top;
    for _ in 0..k {
        let next = range.l_hat_at(*l_levels.last().expect("nonempty"));
        l_saturated |= next > top;
        l_levels.push(next.min(top));
    }

    let d_set: Vec<Symbol> = (0..=l0.min(top)).collect();
    let horizon = 2 * (top as usize + 1) + 4;
    let t_lo = fam0.t0;
    let t_hi = fam0.lambdas.t1();
    let beta_report =
        beta_bound(engine, fam0, &d_set, 0, t_lo..=t_hi, horizon).map_err(|e| infeasible("beta", e.to_string()))?;
    let beta = beta_report.measured;
    if !(beta > 0.0) {
        return Err(infeasible("beta", "a cylinder over D has no mass"));
    }

    let candidates = [(1.0, "1"), (m_hat, "M_hat"), (1.0 / beta, "1/beta")];
    let (best, attained) = candidates
        .iter()
        .copied()
        .fold((f64::NEG_INFINITY, ""), |acc, c| if c.0 > acc.0 { c } else { acc });
    let a_cone = 2.0 * best;
    let h_cone = 2.0 * m_hat * a_cone + 4.0;
    let n0 = least(1_000_000, |n| m_hat * h_cone * (-alpha * n as f64).exp() <= 1.0)
        .ok_or_else(|| infeasible("N0", "no N0 within search range"))?;

    let l_bowen = level_from(&profile, 2.0 * a_cone * m_hat, 1.0, true).max(l0);
    let bowen_tail = finite_alphabet || 2.0 * a_cone * m_hat * beyond < 1.0;
    let l_bowen = if l_bowen > top && !bowen_tail {
        analytic_level(engine, samples, 2.0 * a_cone * m_hat / lambda_min, true).ok_or_else(|| {
            infeasible(
                "l0_bowen",
                "2 A M_hat L1 < 1 fails on the window and along the majorant",
            )
        })?
    } else {
        l_bowen.min(top)
    };
    let targets_top = l_bowen.min(top);

    let q_prefix = least(1_000_000, |q| h_cone * (-alpha * q as f64).exp() <= 0.5)
        .ok_or_else(|| infeasible("q", "no prefix length"))?;
    let q_prefix_used = q_prefix.min(d.saturating_sub(1));

    // connect every letter of F to every target letter in {0..=l_bowen}
    let targets: Vec<Symbol> = (0..=targets_top).collect();
    let table = mixing_table(&model.environment, &model.anchor_set, &targets, samples, horizon, top);
    let mut connector = 0usize;
    for row in &table {
        for v in row {
            let v = v.ok_or_else(|| infeasible("N_l", "F does not reach every target letter"))?;
            connector = connector.max(v + 1);
        }
    }
    let n_block = q_prefix_used + connector + 1;
    let path = best_path_weight(engine, samples, &model.anchor_set, &targets, n_block)?;
    let a_floor = 0.5 * path * (-(n_block as f64) * fam0.lambdas.log_bound()).exp();
    if !(a_floor > 0.0) {
        return Err(infeasible("a", "connecting weight underflows"));
    }

    let eta = (1.0f64 / 3.0).min(1.0 / h_cone).min(a_floor / (2.0 * m_hat));
    let q_l0 = beta_report.q_n;
    let eta_tilde = eta * q_l0 * beta;
    // blocks needed for 2𝒜(1 - η̃)^j <= ε'
    let per_block = (-eta_tilde).ln_1p();
    let blocks = if per_block < 0.0 {
        ((EPSILON_PRIME / (2.0 * a_cone)).ln() / per_block).ceil().max(1.0)
    } else {
        f64::INFINITY
    };
    let n_eps = blocks * n_block as f64;
    let log_theta_certified = -std::f64::consts::LN_2 / n_eps;

    Ok(ConeConstants {
        alpha,
        v_alpha: holder.v_alpha,
        c_dist: holder.c_dist,
        k_dist: holder.k,
        m: summability.m_bound,
        m_hat,
        s: operator.s_two_norm,
        k,
        l_levels,
        l_saturated,
        tail_certified,
        beta,
        beta_formula: beta_report.formula,
        q_l0,
        a_cone,
        a_cone_attained_by: attained.to_string(),
        h_cone,
        n0,
        l_bowen,
        q_prefix,
        q_prefix_used,
        n_block,
        a_floor,
        eta,
        eta_tilde,
        n_eps,
        log_theta_certified,
        theta_fit: None,
        b_fit: None,
        operator,
    })
}

/// Worst over fibers and targets of the best `Π_{i<n} e^{inf φ}(v_i)` over
/// admissible `v_0 … v_{n-1} e` with `v_0 ∈ F`.
fn best_path_weight(
    engine: &Engine<'_>,
    samples: &SampleSet,
    from: &[Symbol],
    targets: &[Symbol],
    n: usize,
) -> Result<f64> {
    let model = engine.model;
    let top = engine.trunc.max_symbol as usize;
    let floor: Vec<f64> = (0..=top as Symbol)
        .map(|e| model.potential.rule.letter_bounds(e).0)
        .collect();
    let mut worst = f64::INFINITY;
    for x in samples.points() {
        let mut cur = vec![0.0f64; top + 1];
        for &f in from {
            if (f as usize) <= top {
                cur[f as usize] = 1.0;
            }
        }
        for i in 0..n {
            let slice = model.environment.matrix_at(x.advance(i as i64));
            let mut next = vec![0.0f64; top + 1];
            for (u, &wu) in cur.iter().enumerate().filter(|(_, w)| **w > 0.0) {
                let w = wu * floor[u];
                for (v, slot) in next.iter_mut().enumerate() {
                    if w > *slot && slice.allows(u as Symbol, v as Symbol) {
                        *slot = w;
                    }
                }
            }
            cur = next;
        }
        for &e in targets {
            worst = worst.min(cur[e as usize]);
        }
    }
    if !(worst > 0.0) {
        return Err(infeasible(
            "N_l",
            format!("no admissible connecting path of length {n}"),
        ));
    }
    Ok(worst)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Membership {
    pub in_c: bool,
    pub in_c0: bool,
    pub integral: f64,
    /// `𝒜∫g - ‖g‖_∞`.
    pub sup_margin: f64,
    /// `H∫g - v_α(g)`.
    pub var_margin: f64,
    /// `min_ω [2M̂𝒜(∫g) L̂_{θ⁻¹x}1(ω) - g(ω)]`.
    pub slice_margin: f64,
    pub witness: Option<Vec<Symbol>>,
}

/// Relative slack absorbing floating-point roundoff in the cone inequalities.
const CONE_SLACK: f64 = 1e-12;

/// Evaluates the cone inequalities for `g` at its fiber `x`; the
/// pointwise bound uses `L̂_{θ⁻¹x}1` from `family`.
pub fn cone_membership(
    engine: &Engine<'_>,
    family: &ConformalFamily,
    g: &DepthFunction,
    constants: &ConeConstants,
) -> Result<Membership> {
    let x = g.fiber;
    let nu = family.nu(x.time)?;
    let integral = nu.integrate(g)?;
    if !(integral > 0.0) {
        return Err(Error::NonPositiveIntegral(integral));
    }
    let slack = CONE_SLACK * integral;
    let sup_margin = constants.a_cone * integral - g.sup_norm();
    let var_margin = constants.h_cone * integral - g.variation(constants.alpha);
    let prev = x.advance(-1);
    let l1 = engine.apply_normalized(&engine.constant(prev, 1.0), family.lambdas.get(prev.time)?)?;
    let c = 2.0 * constants.m_hat * constants.a_cone * integral;
    let mut slice_margin = f64::INFINITY;
    let mut witness = None;
    for (i, (&gv, &lv)) in g.values.iter().zip(&l1.values).enumerate() {
        let m = c * lv - gv;
        if m < slice_margin {
            slice_margin = m;
            witness = Some(g.space.word(i).to_vec());
        }
    }
    let in_c = g.min() >= -slack && sup_margin >= -slack && var_margin >= -slack;
    Ok(Membership {
        in_c,
        in_c0: in_c && slice_margin >= -slack,
        integral,
        sup_margin,
        var_margin,
        slice_margin,
        witness,
    })
}

/// `count` members of `𝒞_x` normalized to `∫g dν_x = 1`: random positive
/// functions blended toward the constant 1 until they enter the cone, at a
/// random depth inside the admissible blend interval.
pub fn random_cone_elements(
    engine: &Engine<'_>,
    family: &ConformalFamily,
    x: FiberPoint,
    constants: &ConeConstants,
    count: usize,
    seed: u64,
) -> Result<Vec<DepthFunction>> {
    let nu = family.nu(x.time)?;
    let one = engine.constant(x, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut raw = one.clone();
        raw.values.iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
        let raw = raw.scaled(1.0 / nu.integrate(&raw)?);
        let blend = |s: f64| one.combine(1.0 - s, &raw, s);
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        if cone_membership(engine, family, &blend(1.0)?, constants)?.in_c {
            lo = 1.0;
        } else {
            for _ in 0..50 {
                let mid = 0.5 * (lo + hi);
                if cone_membership(engine, family, &blend(mid)?, constants)?.in_c {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        let s = lo * rng.gen_range(0.0..1.0);
        out.push(blend(s)?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvarianceCheck {
    pub elements: usize,
    pub steps: usize,
    pub passed: usize,
    pub worst_slice_margin: f64,
    pub worst_sup_margin: f64,
    pub worst_var_margin: f64,
}

impl InvarianceCheck {
    pub fn pass(&self) -> bool {
        self.passed == self.elements
    }
}

/// Whether `L̂^{steps} g` lands in `𝒞_{θ^{steps}x,0}` for every `g`.
pub fn cone_invariance_check(
    engine: &Engine<'_>,
    family: &ConformalFamily,
    elements: &[DepthFunction],
    constants: &ConeConstants,
    steps: usize,
) -> Result<InvarianceCheck> {
    let mut report = InvarianceCheck {
        elements: elements.len(),
        steps,
        passed: 0,
        worst_slice_margin: f64::INFINITY,
        worst_sup_margin: f64::INFINITY,
        worst_var_margin: f64::INFINITY,
    };
    for g in elements {
        let image = engine.normalized_iterate(g, steps, &family.lambdas)?;
        let m = cone_membership(engine, family, &image, constants)?;
        let scale = m.integral;
        report.worst_slice_margin = report.worst_slice_margin.min(m.slice_margin / scale);
        report.worst_sup_margin = report.worst_sup_margin.min(m.sup_margin / scale);
        report.worst_var_margin = report.worst_var_margin.min(m.var_margin / scale);
        if m.in_c0 {
            report.passed += 1;
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BowenReport {
    pub block: usize,
    pub eta: f64,
    /// Whether `L̂^N g - ηχ` stays in `𝒞_{θᴺx,0}` for every tested `g`.
    pub peeling_ok: bool,
    pub peeling_margin: f64,
    pub peeling_witness: Option<Vec<Symbol>>,
    /// `max_pairs ‖L̂ⁿg - L̂ⁿh‖_α` for `n = 0..=n_max`.
    pub differences: Vec<f64>,
    /// Fitted per-step rate raised to the block length.
    pub per_block_factor: Option<f64>,
    pub bound: f64,
    pub contraction_ok: bool,
    /// First `n` with difference below `ε'`.
    pub n_eps_empirical: Option<usize>,
    pub n_eps_constructive: f64,
}

/// `χ = 1_{[0..=l]} · L̂_{θ⁻¹y}1` at fiber `y`.
fn chi(engine: &Engine<'_>, family: &ConformalFamily, y: FiberPoint, l: Symbol) -> Result<DepthFunction> {
    let prev = y.advance(-1);
    let l1 = engine.apply_normalized(&engine.constant(prev, 1.0), family.lambdas.get(prev.time)?)?;
    Ok(l1.map(|w, v| if w[0] <= l { v } else { 0.0 }))
}

/// Peeling step and block contraction for pairs of slice members at a
/// common fiber.
pub fn bowen_contraction_check(
    engine: &Engine<'_>,
    family: &ConformalFamily,
    constants: &ConeConstants,
    pairs: &[(DepthFunction, DepthFunction)],
    n_max: usize,
) -> Result<BowenReport> {
    let n_block = constants.n_block;
    let alpha = constants.alpha;
    let mut peeling_ok = true;
    let mut peeling_margin = f64::INFINITY;
    let mut peeling_witness = None;
    let mut differences = vec![0.0f64; n_max + 1];
    for (g, h) in pairs {
        for f in [g, h] {
            let image = engine.normalized_iterate(f, n_block, &family.lambdas)?;
            let c = chi(engine, family, image.fiber, constants.l_bowen)?;
            let peeled = image.combine(1.0, &c, -constants.eta)?;
            let m = cone_membership(engine, family, &peeled, constants)?;
            let margin = m.slice_margin.min(m.sup_margin).min(m.var_margin) / m.integral;
            if margin < peeling_margin {
                peeling_margin = margin;
                peeling_witness = m.witness.clone();
            }
            peeling_ok &= m.in_c0;
        }
        let mut diff = g.combine(1.0, h, -1.0)?;
        differences[0] = differences[0].max(diff.holder_norm(alpha));
        for slot in differences.iter_mut().skip(1) {
            let lam = family.lambdas.get(diff.fiber.time)?;
            diff = engine.apply_normalized(&diff, lam)?;
            *slot = slot.max(diff.holder_norm(alpha));
        }
    }
    let d0 = differences[0];
    let pts: Vec<(f64, f64)> = differences
        .iter()
        .enumerate()
        .take_while(|(_, v)| **v > d0 * 1e-12 && **v > 0.0)
        .map(|(n, v)| (n as f64, v.ln()))
        .collect();
    let per_block_factor = if d0 == 0.0 {
        Some(0.0)
    } else if pts.len() < 3 {
        // the difference collapsed to resolution within a couple of steps
        Some(0.0)
    } else {
        log_linear_fit(&pts).map(|(slope, _, _)| (slope * n_block as f64).exp())
    };
    let bound = 1.0 - constants.eta_tilde;
    let contraction_ok = per_block_factor.is_some_and(|f| f <= bound);
    Ok(BowenReport {
        block: n_block,
        eta: constants.eta,
        peeling_ok,
        peeling_margin,
        peeling_witness,
        n_eps_empirical: differences.iter().position(|&v| v <= EPSILON_PRIME * d0.max(1.0)),
        differences,
        per_block_factor,
        bound,
        contraction_ok,
        n_eps_constructive: constants.n_eps,
    })
}
