//! Decay of correlations by operator duality, forward sampling from `μ`,
//! and the Monte Carlo CLT check.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::conformal::{log_linear_fit, ConformalFamily, RandomMeasureApprox};
use crate::density::{invariant_measure, rho_estimate};
use crate::environment::FiberPoint;
use crate::error::{Error, Result};
use crate::operator::{DepthFunction, Engine};
use crate::shift::Symbol;

/// A fiber-independent observable on depth-`d` words.
pub type Observable<'a> = &'a (dyn Fn(&[Symbol]) -> f64 + Sync);

/// `ρ`, `ν` and `μ` along a forward orbit `x, θx, …, θⁿx`.
#[derive(Clone, Debug)]
pub struct InvariantOrbit {
    pub family: ConformalFamily,
    pub start: i64,
    pub rho: Vec<DepthFunction>,
    pub mu: Vec<RandomMeasureApprox>,
}

impl InvariantOrbit {
    /// `ρ_x` from `k` backward steps, then `ρ_{θʲx} = L̂ʲρ_x`; `ν` from
    /// anchors `pullback` steps beyond the end of the orbit.
    pub fn build(engine: &Engine<'_>, x: FiberPoint, len: usize, k: usize, pullback: usize) -> Result<Self> {
        let family = ConformalFamily::build(engine, x, x.time - k as i64, x.time + len as i64, pullback)?;
        let mut rho = Vec::with_capacity(len + 1);
        let mut mu = Vec::with_capacity(len + 1);
        let mut r = rho_estimate(engine, &family, x.time, k)?;
        for j in 0..=len {
            let t = x.time + j as i64;
            if j > 0 {
                r = engine.apply_normalized(&r, family.lambdas.get(t - 1)?)?;
            }
            mu.push(invariant_measure(&r, family.nu(t)?)?);
            rho.push(r.clone());
        }
        Ok(Self {
            family,
            start: x.time,
            rho,
            mu,
        })
    }

    pub fn len(&self) -> usize {
        self.mu.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn mu_at(&self, j: usize) -> &RandomMeasureApprox {
        &self.mu[j]
    }

    pub fn fiber(&self, j: usize) -> FiberPoint {
        self.family.fiber(self.start + j as i64)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorrelationCurve {
    /// Fiber-averaged `|∫(g∘σⁿ) h dμ_x|` for `n = 0..=n_max`.
    pub values: Vec<f64>,
    /// Signed per-fiber values, one row per sampled fiber.
    pub per_fiber: Vec<Vec<f64>>,
    /// Envelope constant `b` with `|C(n)| <= b ϑⁿ |g|_1 |h|_α`.
    pub b: Option<f64>,
    pub theta: Option<f64>,
    pub fit_quality: Option<f64>,
    /// `∫|g| dν` at the target fibers, worst case.
    pub g_norm: f64,
    /// `‖h‖_α` after centering, worst case.
    pub h_norm: f64,
    /// `μ_x(h)` removed from `h`, per fiber.
    pub centering: Vec<f64>,
    pub ledger: f64,
}

/// `C_x(n) = ∫ g · L̂ⁿ(h_c ρ_x) dν_{θⁿx}` with `h_c = h - μ_x(h)`.
fn fiber_correlations(
    engine: &Engine<'_>,
    orbit: &InvariantOrbit,
    g: Observable<'_>,
    h: Observable<'_>,
    n_max: usize,
) -> Result<(Vec<f64>, f64, f64, f64, f64)> {
    if orbit.len() < n_max {
        return Err(Error::WindowNotCovered {
            time: orbit.start + n_max as i64,
            start: orbit.start,
            end: orbit.start + orbit.len() as i64,
        });
    }
    let x = orbit.fiber(0);
    let alpha = engine.model.potential.alpha;
    let hf = engine.function(x, h);
    let shift = orbit.mu_at(0).integrate(&hf)?;
    let hc = hf.map(|_, v| v - shift);
    let h_norm = hc.holder_norm(alpha);
    let rho = &orbit.rho[0];
    hc.ensure_compatible(rho)?;
    let mut cur = hc.clone();
    cur.values = hc.values.iter().zip(&rho.values).map(|(a, b)| a * b).collect();
    let mut out = Vec::with_capacity(n_max + 1);
    let mut g_norm: f64 = 0.0;
    for n in 0..=n_max {
        let t = orbit.start + n as i64;
        if n > 0 {
            cur = engine.apply_normalized(&cur, orbit.family.lambdas.get(t - 1)?)?;
        }
        let nu = orbit.family.nu(t)?;
        let gf = engine.function(cur.fiber, g);
        g_norm = g_norm.max(nu.integrate(&gf.map(|_, v| v.abs()))?);
        let value: f64 = gf
            .values
            .iter()
            .zip(&cur.values)
            .zip(&nu.masses)
            .map(|((a, b), m)| a * b * m)
            .sum();
        out.push(value);
    }
    Ok((out, shift, g_norm, h_norm, cur.ledger))
}

/// Correlation curve averaged over the orbits; the fit uses the averaged
/// magnitudes above `1e-12` of the value at `n = 0`.
pub fn correlation(
    engine: &Engine<'_>,
    orbits: &[InvariantOrbit],
    g: Observable<'_>,
    h: Observable<'_>,
    n_max: usize,
) -> Result<CorrelationCurve> {
    let mut per_fiber = Vec::with_capacity(orbits.len());
    let mut centering = Vec::with_capacity(orbits.len());
    let (mut g_norm, mut h_norm, mut ledger) = (0.0f64, 0.0f64, 0.0f64);
    for orbit in orbits {
        let (vals, shift, gn, hn, led) = fiber_correlations(engine, orbit, g, h, n_max)?;
        per_fiber.push(vals);
        centering.push(shift);
        g_norm = g_norm.max(gn);
        h_norm = h_norm.max(hn);
        ledger = ledger.max(led);
    }
    let count = per_fiber.len().max(1) as f64;
    let values: Vec<f64> = (0..=n_max)
        .map(|n| per_fiber.iter().map(|row| row[n].abs()).sum::<f64>() / count)
        .collect();
    let floor = values[0] * 1e-12;
    let pts: Vec<(f64, f64)> = values
        .iter()
        .enumerate()
        .take_while(|(_, v)| **v > floor && **v > 0.0)
        .map(|(n, v)| (n as f64, v.ln()))
        .collect();
    let fit = if pts.len() >= 3 { log_linear_fit(&pts) } else { None };
    let theta = fit.map(|(slope, _, _)| slope.exp());
    let norms = g_norm * h_norm;
    let b = theta.filter(|_| norms > 0.0).map(|th| {
        values
            .iter()
            .enumerate()
            .map(|(n, v)| v / (th.powi(n as i32) * norms))
            .fold(0.0, f64::max)
    });
    Ok(CorrelationCurve {
        values,
        per_fiber,
        b,
        theta,
        fit_quality: fit.map(|f| f.2),
        g_norm,
        h_norm,
        centering,
        ledger,
    })
}

/// Green–Kubo sum `C(0) + 2 Σ_{j>=1} C(j)` of signed fiber-averaged
/// correlations, stopped after three consecutive terms below `1e-3·|C(0)|`.
pub fn green_kubo(curve: &CorrelationCurve) -> (f64, usize) {
    let count = curve.per_fiber.len().max(1) as f64;
    let signed: Vec<f64> = (0..curve.values.len())
        .map(|n| curve.per_fiber.iter().map(|row| row[n]).sum::<f64>() / count)
        .collect();
    let c0 = signed[0];
    let mut sum = c0;
    let mut small = 0;
    let mut used = 0;
    for (j, &c) in signed.iter().enumerate().skip(1) {
        sum += 2.0 * c;
        used = j;
        if c.abs() < 1e-3 * c0.abs() {
            small += 1;
            if small == 3 {
                break;
            }
        } else {
            small = 0;
        }
    }
    (sum, used)
}

/// Cumulative `μ` masses per fiber, used to draw from conditional laws.
struct Sampler<'o> {
    orbit: &'o InvariantOrbit,
    cumulative: Vec<Vec<f64>>,
}

impl<'o> Sampler<'o> {
    fn new(orbit: &'o InvariantOrbit) -> Self {
        let cumulative = orbit
            .mu
            .iter()
            .map(|mu| {
                let mut acc = 0.0;
                std::iter::once(0.0)
                    .chain(mu.masses.iter().map(|m| {
                        acc += m.max(0.0);
                        acc
                    }))
                    .collect()
            })
            .collect();
        Self { orbit, cumulative }
    }

    /// Index in `[a, b)` drawn proportionally to the masses at fiber `j`.
    fn draw(&self, j: usize, a: usize, b: usize, rng: &mut ChaCha8Rng) -> Option<usize> {
        let cum = &self.cumulative[j];
        let (lo, hi) = (cum[a], cum[b]);
        if !(hi > lo) {
            return None;
        }
        let target = lo + rng.gen_range(0.0..1.0) * (hi - lo);
        let i = cum[a + 1..=b].partition_point(|&c| c <= target);
        Some((a + i).min(b - 1))
    }

    /// A path of `len` symbols from the depth-`d` Markov approximation of `μ_x`.
    fn path(&self, len: usize, rng: &mut ChaCha8Rng) -> Option<Vec<Symbol>> {
        let d = self.orbit.mu[0].trunc.depth;
        let space0 = &self.orbit.mu[0].space;
        let first = self.draw(0, 0, space0.len(), rng)?;
        let mut path: Vec<Symbol> = space0.word(first).to_vec();
        while path.len() < len {
            // window starting at position j carries μ at fiber θʲx
            let j = path.len() + 1 - d;
            let space = &self.orbit.mu[j].space;
            let range = space.prefix_range(&path[j..]);
            let idx = self.draw(j, range.start, range.end, rng)?;
            path.push(space.word(idx)[d - 1]);
        }
        path.truncate(len);
        Some(path)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleBatch {
    pub paths: Vec<Vec<Symbol>>,
    /// Draws restarted because a conditional law had no mass.
    pub resampled: usize,
    pub witness: Option<Vec<Symbol>>,
}

fn path_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

const MAX_RESAMPLES: usize = 64;

fn draw_path(sampler: &Sampler<'_>, len: usize, seed: u64, index: u64) -> Result<(Vec<Symbol>, usize)> {
    let mut rng = path_rng(seed, index);
    for attempt in 0..MAX_RESAMPLES {
        if let Some(p) = sampler.path(len, &mut rng) {
            return Ok((p, attempt));
        }
    }
    Err(Error::InvalidParameter(format!(
        "path {index}: conditional laws keep vanishing after {MAX_RESAMPLES} attempts"
    )))
}

/// `count` paths of length `len` starting at the orbit's first fiber; the
/// orbit must cover `len - d + 1` steps. Path `i` uses stream `i` of `seed`.
pub fn sample_mu(orbit: &InvariantOrbit, len: usize, count: usize, seed: u64) -> Result<SampleBatch> {
    let d = orbit.mu[0].trunc.depth;
    if len + 1 > orbit.len() + d {
        return Err(Error::WindowNotCovered {
            time: orbit.start + (len - d) as i64,
            start: orbit.start,
            end: orbit.start + orbit.len() as i64,
        });
    }
    let sampler = Sampler::new(orbit);
    let drawn: Vec<_> = (0..count as u64)
        .into_par_iter()
        .map(|i| draw_path(&sampler, len, seed, i))
        .collect::<Result<_>>()?;
    let resampled = drawn.iter().map(|(_, r)| r).sum();
    let witness = drawn.iter().find(|(_, r)| *r > 0).map(|(p, _)| p.clone());
    Ok(SampleBatch {
        paths: drawn.into_iter().map(|(p, _)| p).collect(),
        resampled,
        witness,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CltResult {
    pub n: usize,
    pub samples: usize,
    pub sigma2_gk: f64,
    pub sigma2_emp: f64,
    /// Terms of the Green–Kubo sum actually used.
    pub gk_terms: usize,
    /// Pooled KS distance of `S_nψ/√n` against `Normal(0, σ²_GK)`.
    pub ks_stat: Option<f64>,
    pub ks_per_fiber: Vec<f64>,
    /// `(m, Var(S_m)/m)` at powers of two up to `n`.
    pub var_curve: Vec<(usize, f64)>,
    /// Relative change of `Var(S_m)/m` over the last doubling is below 2%.
    pub var_stable: bool,
    /// `σ²_GK` fell below the degeneracy floor; normality is not asserted.
    pub degenerate: bool,
    pub pass: bool,
    pub resampled: usize,
}

pub const KS_THRESHOLD: f64 = 0.05;
pub const DEGENERACY_FLOOR: f64 = 1e-10;

/// KS distance between a sample and a centered normal law.
pub fn ks_distance(values: &mut [f64], sigma: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let n = values.len() as f64;
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let f = normal.cdf(v);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// Birkhoff sums of `ψ_{θʲx}(σʲω) = ψ(ω_j … ω_{j+d-1}) - μ_{θʲx}(ψ)` along
/// sampled paths, checked against the Green–Kubo variance. `orbits` must
/// each cover `n + gk_window` steps; samples are split evenly across them.
pub fn clt_test(
    engine: &Engine<'_>,
    orbits: &[InvariantOrbit],
    psi: Observable<'_>,
    n: usize,
    samples: usize,
    gk_window: usize,
    seed: u64,
) -> Result<CltResult> {
    let d = engine.trunc.depth;
    let curve = correlation(engine, orbits, psi, psi, gk_window)?;
    let (sigma2_gk, gk_terms) = green_kubo(&curve);
    let degenerate = !(sigma2_gk > DEGENERACY_FLOOR);

    let checkpoints: Vec<usize> = std::iter::successors(Some(1usize), |m| Some(m * 2))
        .take_while(|&m| m <= n)
        .chain((!n.is_power_of_two()).then_some(n))
        .collect();
    let per = samples.div_ceil(orbits.len().max(1));
    let mut sums: Vec<Vec<f64>> = vec![Vec::new(); checkpoints.len()];
    let mut ks_per_fiber = Vec::new();
    let mut resampled = 0;
    for (o, orbit) in orbits.iter().enumerate() {
        let means: Vec<f64> = (0..n)
            .map(|j| orbit.mu_at(j).integrate(&engine.function(orbit.fiber(j), psi)))
            .collect::<Result<_>>()?;
        let batch = sample_mu(orbit, n + d - 1, per, seed.wrapping_add(o as u64))?;
        resampled += batch.resampled;
        let rows: Vec<Vec<f64>> = batch
            .paths
            .par_iter()
            .map(|p| {
                let mut acc = 0.0;
                let mut out = Vec::with_capacity(checkpoints.len());
                let mut next = 0;
                for j in 0..n {
                    acc += psi(&p[j..j + d]) - means[j];
                    if checkpoints[next] == j + 1 {
                        out.push(acc);
                        next += 1;
                    }
                }
                out
            })
            .collect();
        for row in &rows {
            for (slot, &v) in sums.iter_mut().zip(row) {
                slot.push(v);
            }
        }
        if !degenerate {
            let mut last: Vec<f64> = rows.iter().map(|r| r[r.len() - 1] / (n as f64).sqrt()).collect();
            ks_per_fiber.push(ks_distance(&mut last, sigma2_gk.sqrt()));
        }
    }
    let var_curve: Vec<(usize, f64)> = checkpoints
        .iter()
        .zip(&sums)
        .map(|(&m, s)| {
            let k = s.len() as f64;
            let mean = s.iter().sum::<f64>() / k;
            let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0).max(1.0);
            (m, var / m as f64)
        })
        .collect();
    let sigma2_emp = var_curve.last().map_or(0.0, |v| v.1);
    let var_stable = match var_curve.len() {
        0 | 1 => false,
        l => {
            let (a, b) = (var_curve[l - 2].1, var_curve[l - 1].1);
            (b - a).abs() <= 0.02 * b.abs().max(f64::MIN_POSITIVE)
                || (a.abs() < DEGENERACY_FLOOR && b.abs() < DEGENERACY_FLOOR)
        }
    };
    let ks_stat = (!degenerate).then(|| {
        let mut pooled: Vec<f64> = sums
            .last()
            .expect("checkpoint")
            .iter()
            .map(|v| v / (n as f64).sqrt())
            .collect();
        ks_distance(&mut pooled, sigma2_gk.sqrt())
    });
    let pass = ks_stat.is_some_and(|k| k < KS_THRESHOLD);
    Ok(CltResult {
        n,
        samples: per * orbits.len(),
        sigma2_gk,
        sigma2_emp,
        gk_terms,
        ks_stat,
        ks_per_fiber,
        var_curve,
        var_stable,
        degenerate,
        pass,
        resampled,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{builtin, Params};
    use crate::shift::TruncationParams;
    use approx::assert_relative_eq;

    fn x0() -> FiberPoint {
        FiberPoint::new(0, 0)
    }

    #[test]
    fn full_shift_correlations_vanish() {
        let m = builtin("full2", &Params::new()).unwrap();
        let e = Engine::new(&m, TruncationParams::new(1, 3).unwrap()).unwrap();
        let orbit = InvariantOrbit::build(&e, x0(), 10, 10, 10).unwrap();
        let c = |w: &[Symbol]| if w[0] == 0 { 0.5 } else { -0.5 };
        let curve = correlation(&e, std::slice::from_ref(&orbit), &c, &c, 10).unwrap();
        assert_relative_eq!(curve.values[0], 0.25, epsilon = 1e-12);
        assert!(curve.values[1..].iter().all(|v| *v <= 1e-12));
        let zero = |_: &[Symbol]| 0.0;
        let curve = correlation(&e, &[orbit], &c, &zero, 10).unwrap();
        assert!(curve.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn duality_matches_cylinder_sums() {
        // golden mean at depth 3: the n = 1 correlation of letter indicators is
        // a sum over depth-2 words of μ([w0 w1]) g(w1) h(w0)
        let m = builtin("golden_mean", &Params::new()).unwrap();
        let e = Engine::new(&m, TruncationParams::new(1, 3).unwrap()).unwrap();
        let orbit = InvariantOrbit::build(&e, x0(), 4, 40, 40).unwrap();
        let g = |w: &[Symbol]| if w[0] == 0 { 1.0 } else { 0.0 };
        let curve = correlation(&e, std::slice::from_ref(&orbit), &g, &g, 1).unwrap();
        let mu = orbit.mu_at(0);
        let p0 = mu.mass_of(&[0]);
        let direct = mu.mass_of(&[0, 0]) - p0 * p0;
        assert_relative_eq!(curve.per_fiber[0][1], direct, epsilon = 1e-12);
        assert_relative_eq!(curve.per_fiber[0][0], p0 - p0 * p0, epsilon = 1e-12);
    }

    #[test]
    fn golden_mean_correlation_rate() {
        let m = builtin("golden_mean", &Params::new()).unwrap();
        let e = Engine::new(&m, m.default_truncation).unwrap();
        let orbit = InvariantOrbit::build(&e, x0(), 30, 40, 40).unwrap();
        let g = |w: &[Symbol]| if w[0] == 0 { 1.0 } else { 0.0 };
        let curve = correlation(&e, &[orbit], &g, &g, 30).unwrap();
        let target = (3.0 - 5f64.sqrt()) / 2.0;
        assert!((curve.theta.unwrap() / target - 1.0).abs() < 0.05, "{curve:?}");
        let (b, th) = (curve.b.unwrap(), curve.theta.unwrap());
        for (n, v) in curve.values.iter().enumerate() {
            assert!(*v <= b * th.powi(n as i32) * curve.g_norm * curve.h_norm * (1.0 + 1e-12));
        }
    }

    #[test]
    fn golden_mean_paths_avoid_forbidden_word() {
        let m = builtin("golden_mean", &Params::new()).unwrap();
        let e = Engine::new(&m, m.default_truncation).unwrap();
        let orbit = InvariantOrbit::build(&e, x0(), 64, 40, 40).unwrap();
        let batch = sample_mu(&orbit, 64, 2000, 11).unwrap();
        assert!(batch.paths.iter().all(|p| p.windows(2).all(|w| w != [1, 1])));
        let zeros = batch.paths.iter().filter(|p| p[0] == 0).count() as f64 / 2000.0;
        let p = 0.723_607;
        assert!((zeros - p).abs() < 3.0 * (p * (1.0 - p) / 2000.0f64).sqrt() + 1e-9);
        let again = sample_mu(&orbit, 64, 2000, 11).unwrap();
        assert_eq!(batch.paths, again.paths);
    }

    #[test]
    fn constant_observable_is_degenerate() {
        let m = builtin("full2", &Params::new()).unwrap();
        let e = Engine::new(&m, TruncationParams::new(1, 2).unwrap()).unwrap();
        let orbit = InvariantOrbit::build(&e, x0(), 80, 10, 10).unwrap();
        let r = clt_test(&e, &[orbit], &|_: &[Symbol]| 3.0, 64, 200, 10, 1).unwrap();
        assert!(r.degenerate && !r.pass && r.ks_stat.is_none());
        assert!(r.sigma2_gk.abs() < 1e-12 && r.sigma2_emp < 1e-20);
    }

    #[test]
    fn ks_of_exact_quantiles_is_small() {
        let normal = Normal::new(0.0, 2.0).unwrap();
        let mut v: Vec<f64> = (0..1000)
            .map(|i| normal.inverse_cdf((i as f64 + 0.5) / 1000.0))
            .collect();
        assert!(ks_distance(&mut v, 2.0) < 6e-4);
    }
}
