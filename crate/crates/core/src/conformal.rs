//! The random conformal family `ν` and normalizer `λ`, built by pulling a
//! Dirac anchor back through the dual operator, plus cylinder masses and the
//! tightness diagnostics that justify the construction.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::environment::FiberPoint;
use crate::error::{Error, Result};
use crate::operator::{DepthFunction, Engine, WordSpace};
use crate::potential::SummabilityReport;
use crate::shift::{Symbol, TruncationParams};

/// Pullback steps whose normalizer falls below this are treated as starved.
pub const NORMALIZER_FLOOR: f64 = 1e-300;

/// Finite approximation of `ν_x` on the depth-`d` cylinders of the window.
#[derive(Clone, Debug)]
pub struct RandomMeasureApprox {
    pub fiber: FiberPoint,
    pub trunc: TruncationParams,
    pub space: Arc<WordSpace>,
    /// Normalized to total 1 over the window.
    pub masses: Vec<f64>,
    /// `tail_terms[i]` bounds the mass of words whose `i`-th letter exceeds `L`.
    pub tail_terms: Vec<f64>,
    pub tail_mass_bound: f64,
    pub pullback_depth: usize,
}

impl RandomMeasureApprox {
    /// Dirac mass on the `index`-th word of the space at `x`.
    pub fn dirac(engine: &Engine<'_>, x: FiberPoint, index: usize) -> Result<Self> {
        let space = engine.space(x);
        if index >= space.len() {
            return Err(Error::InvalidParameter(format!("anchor index {index} out of range")));
        }
        let mut masses = vec![0.0; space.len()];
        masses[index] = 1.0;
        Ok(Self {
            fiber: x,
            trunc: engine.trunc,
            space,
            masses,
            tail_terms: vec![0.0; engine.trunc.depth],
            tail_mass_bound: 0.0,
            pullback_depth: 0,
        })
    }

    pub fn total(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// `ν([prefix])`; prefixes longer than `d` are not representable.
    pub fn mass_of(&self, prefix: &[Symbol]) -> f64 {
        self.space.prefix_range(prefix).map(|i| self.masses[i]).sum()
    }

    pub fn entries(&self) -> impl Iterator<Item = (&[Symbol], f64)> {
        self.space.words().zip(self.masses.iter().copied())
    }

    fn ensure_same(&self, other: &RandomMeasureApprox) -> Result<()> {
        self.trunc.ensure_eq(&other.trunc)?;
        if self.fiber != other.fiber {
            return Err(Error::FiberMismatch {
                expected: self.fiber.time,
                actual: other.fiber.time,
            });
        }
        if self.masses.len() != other.masses.len() {
            return Err(Error::TruncationMismatch("different word spaces".into()));
        }
        Ok(())
    }

    /// `½ Σ_w |ν(w) - ν'(w)|` on depth-`d` cylinders.
    pub fn tv_distance(&self, other: &RandomMeasureApprox) -> Result<f64> {
        self.ensure_same(other)?;
        Ok(0.5
            * self
                .masses
                .iter()
                .zip(&other.masses)
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>())
    }

    pub fn integrate(&self, g: &DepthFunction) -> Result<f64> {
        self.trunc.ensure_eq(&g.trunc)?;
        if g.fiber != self.fiber {
            return Err(Error::FiberMismatch {
                expected: self.fiber.time,
                actual: g.fiber.time,
            });
        }
        if g.values.len() != self.masses.len() {
            return Err(Error::TruncationMismatch("function not on this fiber's words".into()));
        }
        Ok(self.masses.iter().zip(&g.values).map(|(m, v)| m * v).sum())
    }

    /// Masses aggregated over the first `k` letters.
    pub fn marginal(&self, k: usize) -> BTreeMap<Vec<Symbol>, f64> {
        let mut out = BTreeMap::new();
        for (w, m) in self.entries() {
            *out.entry(w[..k.min(w.len())].to_vec()).or_insert(0.0) += m;
        }
        out
    }
}

/// `λ_t` for `t` in a window of one orbit, with error bars.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LambdaSequence {
    pub t0: i64,
    pub values: Vec<f64>,
    pub errors: Vec<f64>,
}

impl LambdaSequence {
    pub fn new(t0: i64, values: Vec<f64>, errors: Vec<f64>) -> Result<Self> {
        if values.len() != errors.len() {
            return Err(Error::InvalidParameter("values and errors differ in length".into()));
        }
        if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter(format!("lambda {v} is not positive")));
        }
        Ok(Self { t0, values, errors })
    }

    /// Constant sequence over `[t0, t1]`.
    pub fn constant(t0: i64, t1: i64, lambda: f64) -> Result<Self> {
        let n = (t1 - t0 + 1).max(0) as usize;
        Self::new(t0, vec![lambda; n], vec![0.0; n])
    }

    pub fn t1(&self) -> i64 {
        self.t0 + self.values.len() as i64 - 1
    }

    fn index(&self, t: i64) -> Result<usize> {
        if t < self.t0 || t > self.t1() {
            return Err(Error::WindowNotCovered {
                time: t,
                start: self.t0,
                end: self.t1(),
            });
        }
        Ok((t - self.t0) as usize)
    }

    pub fn get(&self, t: i64) -> Result<f64> {
        Ok(self.values[self.index(t)?])
    }

    pub fn error(&self, t: i64) -> Result<f64> {
        Ok(self.errors[self.index(t)?])
    }

    /// `log λ_t^n = Σ_{j<n} log λ_{t+j}`.
    pub fn log_product(&self, t: i64, n: usize) -> Result<f64> {
        (0..n as i64).map(|j| self.get(t + j).map(f64::ln)).sum()
    }

    /// `max |log λ|` over the window.
    pub fn log_bound(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.ln().abs()))
    }
}

/// One application of the map `Φ`.
#[derive(Clone, Debug)]
pub struct PhiStep {
    pub measure: RandomMeasureApprox,
    /// `λ_x = ∫ L_x 1 dν_{θx}` over the window.
    pub lambda: f64,
    /// Bound on what the window drops from `λ_x`.
    pub lambda_error: f64,
}

/// `Φ(ν)_x = L_x^* ν_{θx} / L_x^* ν_{θx}(1)` on depth-`d` cylinders.
pub fn phi_map(engine: &Engine<'_>, nu: &RandomMeasureApprox, x: FiberPoint) -> Result<PhiStep> {
    nu.trunc.ensure_eq(&engine.trunc)?;
    if nu.fiber != x.advance(1) {
        return Err(Error::FiberMismatch {
            expected: x.time + 1,
            actual: nu.fiber.time,
        });
    }
    let step = engine.step(x)?;
    if step.target.len() != nu.masses.len() {
        return Err(Error::TruncationMismatch("measure not on the target words".into()));
    }
    let raw = step.transpose_values(&nu.masses);
    let lambda: f64 = raw.iter().sum();
    if !(lambda > NORMALIZER_FLOOR) {
        return Err(Error::DegenerateNormalizer {
            time: x.time,
            value: lambda,
        });
    }
    let inv = 1.0 / lambda;
    let masses = raw.into_iter().map(|m| m * inv).collect();
    let m_hat = step.m_bound();
    let d = engine.trunc.depth;
    let mut tail_terms = Vec::with_capacity(d);
    tail_terms.push((step.tail * inv).min(1.0));
    for i in 1..d {
        tail_terms.push((m_hat * inv * nu.tail_terms[i - 1]).min(1.0));
    }
    let tail_mass_bound = tail_terms.iter().sum::<f64>().min(1.0);
    let lambda_error = step.tail + m_hat.max(step.column_tail) * nu.tail_mass_bound;
    Ok(PhiStep {
        measure: RandomMeasureApprox {
            fiber: x,
            trunc: engine.trunc,
            space: step.source.clone(),
            masses,
            tail_terms,
            tail_mass_bound,
            pullback_depth: nu.pullback_depth + 1,
        },
        lambda,
        lambda_error,
    })
}

/// Candidate anchors at `t`: indices of words whose first letter is in `F`,
/// in lexicographic order.
pub fn anchor_candidates(engine: &Engine<'_>, t: FiberPoint) -> Vec<usize> {
    let f = &engine.model.anchor_set;
    engine
        .space(t)
        .words()
        .enumerate()
        .filter(|(_, w)| f.contains(&w[0]))
        .map(|(i, _)| i)
        .collect()
}

/// Measures and normalizers over an orbit window `[t0, t1]`, all pulled back
/// from one anchor at `t1 + depth`.
#[derive(Clone, Debug)]
pub struct ConformalFamily {
    pub base: FiberPoint,
    pub t0: i64,
    pub measures: Vec<RandomMeasureApprox>,
    pub lambdas: LambdaSequence,
    pub anchor: Vec<Symbol>,
    pub anchor_time: i64,
}

impl ConformalFamily {
    /// Sweep back from an anchor at `base.time + t1 + depth` to `base.time + t0`.
    /// Times are absolute along the orbit of `base`.
    pub fn build(engine: &Engine<'_>, base: FiberPoint, t0: i64, t1: i64, depth: usize) -> Result<Self> {
        if t0 > t1 || depth == 0 {
            return Err(Error::InvalidParameter(format!(
                "window [{t0}, {t1}] with depth {depth}"
            )));
        }
        let root = FiberPoint::new(base.base_seed, 0);
        let anchor_time = t1 + depth as i64;
        let anchor_fiber = root.advance(anchor_time);
        let candidates = anchor_candidates(engine, anchor_fiber);
        'anchors: for idx in candidates {
            let mut nu = RandomMeasureApprox::dirac(engine, anchor_fiber, idx)?;
            let n = (anchor_time - t0) as usize;
            let keep = (t1 - t0 + 1) as usize;
            let mut measures = Vec::with_capacity(keep);
            let mut values = Vec::with_capacity(keep);
            let mut errors = Vec::with_capacity(keep);
            for j in 1..=n {
                let x = root.advance(anchor_time - j as i64);
                let step = match phi_map(engine, &nu, x) {
                    Ok(s) => s,
                    Err(Error::DegenerateNormalizer { .. }) => continue 'anchors,
                    Err(e) => return Err(e),
                };
                nu = step.measure;
                if x.time <= t1 {
                    measures.push(nu.clone());
                    values.push(step.lambda);
                    errors.push(step.lambda_error);
                }
            }
            measures.reverse();
            values.reverse();
            errors.reverse();
            return Ok(Self {
                base: root,
                t0,
                measures,
                lambdas: LambdaSequence::new(t0, values, errors)?,
                anchor: engine.space(anchor_fiber).word(idx).to_vec(),
                anchor_time,
            });
        }
        Err(Error::AnchorStarved { time: anchor_time })
    }

    pub fn t1(&self) -> i64 {
        self.t0 + self.measures.len() as i64 - 1
    }

    pub fn nu(&self, t: i64) -> Result<&RandomMeasureApprox> {
        if t < self.t0 || t > self.t1() {
            return Err(Error::WindowNotCovered {
                time: t,
                start: self.t0,
                end: self.t1(),
            });
        }
        Ok(&self.measures[(t - self.t0) as usize])
    }

    pub fn fiber(&self, t: i64) -> FiberPoint {
        self.base.advance(t)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConformalDiagnostics {
    /// `‖ν^{(k)} - ν^{(k-1)}‖_TV` for `k = 2..=n`.
    pub increments: Vec<f64>,
    /// First `k` after which three consecutive increments are below tolerance.
    pub converged_at: Option<usize>,
    pub tolerance: f64,
    /// Geometric rate fitted to the increments above resolution.
    pub rate: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct ConformalEstimate {
    pub measure: RandomMeasureApprox,
    pub lambda: f64,
    pub lambda_error: f64,
    pub anchor: Vec<Symbol>,
    pub diagnostics: ConformalDiagnostics,
}

/// Single pullback `ν_x^{(n)}` with its normalizer `λ_x`.
fn pullback(engine: &Engine<'_>, x: FiberPoint, n: usize) -> Result<(PhiStep, Vec<Symbol>)> {
    let fam = ConformalFamily::build(engine, x, x.time, x.time, n)?;
    let measure = fam.measures[0].clone();
    Ok((
        PhiStep {
            measure,
            lambda: fam.lambdas.values[0],
            lambda_error: fam.lambdas.errors[0],
        },
        fam.anchor,
    ))
}

/// `ν_x^{(n)}` from the first admissible anchor in `[F]` at `θⁿx`, with the
/// Cauchy increments of the pullbacks of depth `1..=n`.
pub fn estimate_conformal(engine: &Engine<'_>, x: FiberPoint, n: usize, tolerance: f64) -> Result<ConformalEstimate> {
    if n == 0 {
        return Err(Error::InvalidParameter("pullback depth must be at least 1".into()));
    }
    let mut prev: Option<RandomMeasureApprox> = None;
    let mut increments = Vec::new();
    let mut last = None;
    for k in 1..=n {
        let (step, anchor) = pullback(engine, x, k)?;
        if let Some(p) = &prev {
            increments.push(step.measure.tv_distance(p)?);
        }
        prev = Some(step.measure.clone());
        last = Some((step, anchor));
    }
    let (step, anchor) = last.expect("n >= 1");
    let converged_at = increments
        .windows(3)
        .position(|w| w.iter().all(|&v| v <= tolerance))
        .map(|i| i + 2);
    Ok(ConformalEstimate {
        measure: step.measure,
        lambda: step.lambda,
        lambda_error: step.lambda_error,
        anchor,
        diagnostics: ConformalDiagnostics {
            rate: geometric_rate(&increments, 1e-14),
            increments,
            converged_at,
            tolerance,
        },
    })
}

/// Least-squares slope of `log v_k` over entries above `floor`, as a rate.
pub fn geometric_rate(values: &[f64], floor: f64) -> Option<f64> {
    let pts: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .filter(|(_, &v)| v > floor)
        .map(|(k, &v)| (k as f64, v.ln()))
        .collect();
    let (slope, _, _) = log_linear_fit(&pts)?;
    Some(slope.exp())
}

/// `(slope, intercept, rms residual)` of a least-squares line.
pub fn log_linear_fit(pts: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (pts.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / n).sqrt();
    Some((slope, intercept, rms))
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LambdaEstimate {
    pub value: f64,
    pub error: f64,
    /// `(inf L_x 1, sup L_x 1)` over the window words at `θx`.
    pub bracket: (f64, f64),
}

/// `λ_x = ∫ L_x 1 dν_{θx}` with error bar and the trivial bracket.
pub fn lambda_estimate(
    engine: &Engine<'_>,
    x: FiberPoint,
    nu_at_thetax: &RandomMeasureApprox,
) -> Result<LambdaEstimate> {
    let step = phi_map(engine, nu_at_thetax, x)?;
    let l1 = engine.apply(&engine.constant(x, 1.0))?;
    Ok(LambdaEstimate {
        value: step.lambda,
        error: step.lambda_error,
        bracket: (l1.min(), l1.max()),
    })
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Residual {
    pub tv: f64,
    /// Tail masses of both measures, reported beside the distance.
    pub tail_allowance: f64,
}

/// TV distance between `Φ(ν_{θx})` and `ν_x`.
pub fn conformality_residual(
    engine: &Engine<'_>,
    nu_x: &RandomMeasureApprox,
    nu_at_thetax: &RandomMeasureApprox,
) -> Result<Residual> {
    let step = phi_map(engine, nu_at_thetax, nu_x.fiber)?;
    Ok(Residual {
        tv: step.measure.tv_distance(nu_x)?,
        tail_allowance: nu_x.tail_mass_bound + step.measure.tail_mass_bound,
    })
}

/// Residuals at `x` for pullback depths in `depths`: `ν_x` and `ν_{θx}` are
/// independent pullbacks of equal depth.
pub fn residual_curve(engine: &Engine<'_>, x: FiberPoint, depths: &[usize]) -> Result<Vec<(usize, Residual)>> {
    depths
        .iter()
        .map(|&n| {
            let (a, _) = pullback(engine, x, n)?;
            let (b, _) = pullback(engine, x.advance(1), n)?;
            Ok((n, conformality_residual(engine, &a.measure, &b.measure)?))
        })
        .collect()
}

/// `ν_x([w])` for any word: prefix sums up to depth `d`, the iterated
/// conformality relation beyond, in the log domain.
pub fn cylinder_mass(engine: &Engine<'_>, family: &ConformalFamily, x: FiberPoint, w: &[Symbol]) -> Result<f64> {
    if x.base_seed != family.base.base_seed {
        return Err(Error::FiberMismatch {
            expected: family.base.time,
            actual: x.time,
        });
    }
    if w.is_empty() {
        return Ok(1.0);
    }
    let d = engine.trunc.depth;
    if w.len() <= d {
        return Ok(family.nu(x.time)?.mass_of(w));
    }
    let env = &engine.model.environment;
    if !crate::shift::is_admissible(env, x, w) {
        return Ok(0.0);
    }
    let pot = &engine.model.potential;
    let k = w.len() - d;
    let mut log_mass = -family.lambdas.log_product(x.time, k)?;
    for i in 0..k {
        let end = (i + pot.depth()).min(w.len());
        log_mass += pot.rule.eval(engine.state(x.advance(i as i64)), &w[i..end]);
    }
    let tail = family.nu(x.time + k as i64)?.mass_of(&w[k..]);
    if tail <= 0.0 {
        return Ok(0.0);
    }
    Ok((log_mass + tail.ln()).exp())
}

/// Admissible words of length `len` over `letters` at `x`, capped at `cap`.
pub fn words_over(
    engine: &Engine<'_>,
    x: FiberPoint,
    letters: &[Symbol],
    len: usize,
    cap: usize,
) -> Result<Vec<Vec<Symbol>>> {
    let env = &engine.model.environment;
    let mut out: Vec<Vec<Symbol>> = vec![Vec::new()];
    for pos in 0..len {
        let mut next = Vec::new();
        for w in &out {
            for &b in letters {
                let ok = match w.last() {
                    None => true,
                    Some(&a) => env.matrix_at(x.advance(pos as i64 - 1)).allows(a, b),
                };
                if ok {
                    let mut v = w.clone();
                    v.push(b);
                    next.push(v);
                }
            }
        }
        if next.len() > cap {
            return Err(Error::TooLarge(format!("more than {cap} words of length {len}")));
        }
        out = next;
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BetaBound {
    pub d_set: Vec<Symbol>,
    pub n: usize,
    /// Connector length between `D` and `F`, from mixing.
    pub connector: usize,
    pub q: usize,
    pub log_lambda_bound: f64,
    /// `Q_n`.
    pub q_n: f64,
    pub formula: f64,
    pub measured: f64,
    pub witness: Option<Vec<Symbol>>,
    pub holds: bool,
}

/// `β_{D,n} = (2q)^{-1} e^{-m ‖log λ‖} Q_n` against the measured minimum of
/// `ν_x([ω])` over `ω ∈ D^{n+1}` and the family's fibers in `[t_lo, t_hi]`.
pub fn beta_bound(
    engine: &Engine<'_>,
    family: &ConformalFamily,
    d_set: &[Symbol],
    n: usize,
    times: std::ops::RangeInclusive<i64>,
    horizon: usize,
) -> Result<BetaBound> {
    let model = engine.model;
    let f = &model.anchor_set;
    let samples = crate::environment::SampleSet::new(vec![family.base], *times.start(), *times.end());
    let table = crate::shift::mixing_table(&model.environment, d_set, f, &samples, horizon, engine.trunc.max_symbol);
    // the heavy letter b ∈ F varies with the fiber, so every pair must connect
    let mut connector = 0usize;
    for (ia, row) in table.iter().enumerate() {
        for (ib, v) in row.iter().enumerate() {
            let v = v.ok_or(Error::NotMixing {
                a: d_set[ia],
                b: f[ib],
                horizon,
            })?;
            connector = connector.max(v + 1);
        }
    }
    let floor = |e: Symbol| model.potential.rule.letter_bounds(e).0;
    let c_d = d_set.iter().map(|&e| floor(e)).fold(f64::INFINITY, f64::min);
    let c_all = (0..=engine.trunc.max_symbol).map(floor).fold(f64::INFINITY, f64::min);
    let q_n = c_d.powi(n as i32 + 1) * c_all.powi(connector as i32);
    let m = n + 1 + connector;
    let log_lambda_bound = family.lambdas.log_bound();
    let q = f.len();
    let formula = (-(m as f64) * log_lambda_bound).exp() * q_n / (2.0 * q as f64);
    let mut measured = f64::INFINITY;
    let mut witness = None;
    for t in times {
        let x = family.fiber(t);
        for w in words_over(engine, x, d_set, n + 1, 1 << 20)? {
            let v = cylinder_mass(engine, family, x, &w)?;
            if v < measured {
                measured = v;
                witness = Some(w);
            }
        }
    }
    Ok(BetaBound {
        d_set: d_set.to_vec(),
        n,
        connector,
        q,
        log_lambda_bound,
        q_n,
        formula,
        measured,
        holds: formula <= measured,
        witness,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TightnessReport {
    /// `c = ½ inf L1|[F]`.
    pub c: f64,
    pub m_bound: f64,
    pub kappa: f64,
    /// `(¼ - κ)·inf L1|[F] / M`; the first step requires `γ₁` below it.
    pub gamma1_ceiling: f64,
    pub gammas: Vec<f64>,
    /// `N_n` for the computed levels.
    pub levels: Vec<Symbol>,
    /// `ν_x(K_{n,x}^c)` on the depth-`d` projection, per level.
    pub complement_mass: Vec<f64>,
    pub tail_allowance: f64,
    pub margins_ok: bool,
    /// Set when the recursion could not produce a positive `γ₁`.
    pub certified: bool,
    pub reason: String,
}

/// The `γ_n`/`N_n` recursion with uniform constants taken from the
/// summability and condition-(C) reports, and the measured masses of the
/// complements of the depth-`d` projections of `K_{n,x}`.
pub fn tightness_diagnostic(
    engine: &Engine<'_>,
    nu: &RandomMeasureApprox,
    summability: &SummabilityReport,
    inf_on_f: f64,
    kappa: f64,
    max_levels: usize,
) -> Result<TightnessReport> {
    let f = &engine.model.anchor_set;
    let q = f.iter().copied().max().unwrap_or(0);
    let top = engine.trunc.max_symbol;
    let c = 0.5 * inf_on_f;
    let m = summability.m_bound;
    let z = |l: Symbol| summability.z_profile[(l.min(top)) as usize];
    let ceiling = (0.25 - kappa) * inf_on_f / m;
    let mut gammas = vec![0.5];
    let mut levels = vec![q];
    let mut certified = true;
    let mut reason = String::from("recursion ran to the window");
    if !(ceiling > 0.0) || !(c > 0.0) {
        certified = false;
        reason = format!("no room for gamma_1: (1/4 - kappa) inf / M = {ceiling:e}");
    } else {
        let g1 = 0.5 * ceiling;
        if m * g1 + z(q) > c * 0.5 + 1e-15 {
            certified = false;
            reason = format!("first step fails: M gamma_1 + Z(q) = {:e} > c/2", m * g1 + z(q));
        }
        gammas.push(g1);
        while levels.len() < max_levels {
            let n = levels.len();
            let gn = gammas[n];
            let prev = levels[n - 1];
            let Some(level) = (prev..=top).find(|&l| z(l) <= 0.5 * c * gn) else {
                reason = format!("no level within L for gamma_{n} = {gn:e}");
                break;
            };
            let next = (c * gn - z(level)) / m;
            levels.push(level);
            if !(next > 0.0) {
                break;
            }
            gammas.push(next);
        }
    }
    let d = engine.trunc.depth;
    let complement_mass: Vec<f64> = (0..levels.len().min(gammas.len()))
        .map(|n| {
            nu.entries()
                .filter(|(w, _)| (0..d).any(|i| levels.get(n + i).is_some_and(|&bound| w[i] > bound)))
                .map(|(_, m)| m)
                .sum()
        })
        .collect();
    let tail_allowance = nu.tail_mass_bound;
    let margins_ok = complement_mass
        .iter()
        .zip(&gammas)
        .all(|(mass, g)| *mass <= g + tail_allowance);
    Ok(TightnessReport {
        c,
        m_bound: m,
        kappa,
        gamma1_ceiling: ceiling,
        gammas,
        levels,
        complement_mass,
        tail_allowance,
        margins_ok,
        certified,
        reason,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{builtin, Params};
    use approx::assert_relative_eq;

    fn x0() -> FiberPoint {
        FiberPoint::new(0, 0)
    }

    #[test]
    fn full_shift_is_a_fixed_point() {
        let m = builtin("full2", &Params::new()).unwrap();
        let e = Engine::new(&m, TruncationParams::new(1, 2).unwrap()).unwrap();
        let est = estimate_conformal(&e, x0(), 5, 1e-12).unwrap();
        for (_, v) in est.measure.entries() {
            assert_relative_eq!(v, 0.25, epsilon = 1e-15);
        }
        assert_relative_eq!(est.lambda, 1.0, epsilon = 1e-15);
        let again = phi_map(
            &e,
            &{
                let mut nu = est.measure.clone();
                nu.fiber = x0().advance(1);
                nu
            },
            x0(),
        )
        .unwrap();
        assert!(again.measure.tv_distance(&est.measure).unwrap() < 1e-15);
        assert_relative_eq!(again.measure.total(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn golden_mean_pullback_matches_perron() {
        let m = builtin("golden_mean", &Params::new()).unwrap();
        let e = Engine::new(&m, m.default_truncation).unwrap();
        let est = estimate_conformal(&e, x0(), 30, 1e-9).unwrap();
        let g = (1.0 + 5f64.sqrt()) / 2.0;
        assert!((est.measure.mass_of(&[0]) - 1.0 / g).abs() < 1e-8);
        assert!((est.measure.mass_of(&[1]) - 1.0 / (g * g)).abs() < 1e-8);
        assert!((est.lambda - g).abs() < 1e-8);
        assert!(est.diagnostics.converged_at.is_some());
        let rate = est.diagnostics.rate.unwrap();
        assert!(rate < 0.5, "rate {rate}");
    }

    #[test]
    fn phi_map_of_left_perron_masses() {
        let m = builtin("golden_mean", &Params::new()).unwrap();
        let e = Engine::new(&m, TruncationParams::new(1, 1).unwrap()).unwrap();
        let g = (1.0 + 5f64.sqrt()) / 2.0;
        let mut nu = RandomMeasureApprox::dirac(&e, x0().advance(1), 0).unwrap();
        nu.masses = vec![1.0 / g, 1.0 / (g * g)];
        let out = phi_map(&e, &nu, x0()).unwrap();
        assert!((out.measure.masses[0] - 1.0 / g).abs() < 1e-10);
        assert!((out.lambda - g).abs() < 1e-12);
        assert!(matches!(
            phi_map(&e, &nu, x0().advance(3)),
            Err(Error::FiberMismatch { .. })
        ));
    }

    #[test]
    fn family_agrees_with_phi_recursion() {
        let m = builtin("growing_walk", &Params::new()).unwrap();
        let e = Engine::new(&m, TruncationParams::new(8, 2).unwrap()).unwrap();
        let fam = ConformalFamily::build(&e, x0(), 0, 3, 20).unwrap();
        for t in 0..3 {
            let step = phi_map(&e, fam.nu(t + 1).unwrap(), fam.fiber(t)).unwrap();
            assert!(step.measure.tv_distance(fam.nu(t).unwrap()).unwrap() < 1e-12);
            assert_relative_eq!(step.lambda, fam.lambdas.get(t).unwrap(), max_relative = 1e-12);
        }
        assert!(fam.nu(4).is_err());
        let nu = fam.nu(0).unwrap();
        assert!(nu.tail_mass_bound > 0.0 && nu.tail_mass_bound < 1e-2);
    }

    #[test]
    fn cylinder_masses() {
        let m = builtin("golden_mean", &Params::new()).unwrap();
        let e = Engine::new(&m, TruncationParams::new(1, 1).unwrap()).unwrap();
        let fam = ConformalFamily::build(&e, x0(), 0, 4, 40).unwrap();
        let x = fam.fiber(0);
        assert_eq!(cylinder_mass(&e, &fam, x, &[1, 1]).unwrap(), 0.0);
        assert!((cylinder_mass(&e, &fam, x, &[0, 1]).unwrap() - 0.236_068).abs() < 1e-6);
        // additivity
        for w in [vec![0u64], vec![0, 0], vec![1, 0, 1]] {
            let parent = cylinder_mass(&e, &fam, x, &w).unwrap();
            let children: f64 = [0, 1]
                .iter()
                .map(|&b| {
                    let mut v = w.clone();
                    v.push(b);
                    cylinder_mass(&e, &fam, x, &v).unwrap()
                })
                .sum();
            assert!((parent - children).abs() < 1e-12, "{w:?}");
        }
        let full = builtin("full2", &Params::new()).unwrap();
        let e = Engine::new(&full, TruncationParams::new(1, 1).unwrap()).unwrap();
        let fam = ConformalFamily::build(&e, x0(), 0, 4, 5).unwrap();
        assert_relative_eq!(
            cylinder_mass(&e, &fam, x0(), &[0, 1, 1]).unwrap(),
            0.125,
            epsilon = 1e-15
        );
    }

    #[test]
    fn beta_bound_on_golden_mean() {
        let m = builtin("golden_mean", &Params::new()).unwrap();
        let e = Engine::new(&m, m.default_truncation).unwrap();
        let fam = ConformalFamily::build(&e, x0(), 0, 4, 40).unwrap();
        let b = beta_bound(&e, &fam, &[0, 1], 1, 0..=0, 8).unwrap();
        assert!(b.holds, "{b:?}");
        assert!((b.measured - 0.236_068).abs() < 1e-6);
        assert!(b.formula > 0.0);
    }

    #[test]
    fn lambda_sequence_window() {
        let l = LambdaSequence::new(-2, vec![1.0, 2.0, 4.0], vec![0.0; 3]).unwrap();
        assert_eq!(l.get(0).unwrap(), 4.0);
        assert!(matches!(l.get(1), Err(Error::WindowNotCovered { .. })));
        assert_relative_eq!(l.log_product(-2, 3).unwrap(), 8f64.ln(), epsilon = 1e-15);
        assert_relative_eq!(l.log_bound(), 4f64.ln(), epsilon = 1e-15);
        assert!(LambdaSequence::new(0, vec![0.0], vec![0.0]).is_err());
    }
}
