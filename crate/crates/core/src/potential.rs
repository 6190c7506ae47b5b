//! Potentials, Birkhoff sums, Hölder variation, summability and distortion.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::environment::{EnvState, FiberPoint, SampleSet};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::operator::{DepthFunction, Engine};
use crate::shift::{first_disagreement, shift_metric, Symbol};

/// Value of `φ_x` on cylinders of depth at most `depth()`.
pub trait PotentialRule: Send + Sync + fmt::Debug {
    fn depth(&self) -> usize;

    /// `φ_x` on the cylinder `[word]`; `word` has length at least 1.
    fn eval(&self, state: EnvState, word: &[Symbol]) -> f64;

    /// `(c_e, C_e)` with `c_e <= exp φ_x|[e] <= C_e` for every state.
    fn letter_bounds(&self, e: Symbol) -> (f64, f64);
}

/// Analytic majorants for everything the alphabet window `{0, …, L}` drops.
pub trait TailMajorant: Send + Sync + fmt::Debug {
    /// Bound on `sup_ω Σ_{e > L, A_eω₀} exp φ(eω)`.
    fn operator_tail(&self, state: EnvState, l: Symbol) -> Option<f64>;

    /// Bound on `sup_{b > L} sup_{[b]} L_x 1`.
    fn column_tail(&self, state: EnvState, l: Symbol) -> Option<f64>;

    /// As [`TailMajorant::column_tail`], counting only letters `e ∉ excluded`.
    fn column_tail_outside(&self, state: EnvState, l: Symbol, excluded: &[Symbol]) -> Option<f64> {
        let _ = excluded;
        self.column_tail(state, l)
    }

    /// `Σ_{e > L} C_e`, `None` if the series diverges.
    fn letter_series_tail(&self, l: Symbol) -> Option<f64>;
}

/// Tails of a finite alphabet `{0, …, size-1}`: zero once the window covers it.
#[derive(Debug, Clone, Copy)]
pub struct FiniteTails {
    pub size: u64,
}

impl TailMajorant for FiniteTails {
    fn operator_tail(&self, _: EnvState, l: Symbol) -> Option<f64> {
        (l + 1 >= self.size).then_some(0.0)
    }
    fn column_tail(&self, _: EnvState, l: Symbol) -> Option<f64> {
        (l + 1 >= self.size).then_some(0.0)
    }
    fn letter_series_tail(&self, l: Symbol) -> Option<f64> {
        (l + 1 >= self.size).then_some(0.0)
    }
}

/// No majorant known.
#[derive(Debug, Clone, Copy)]
pub struct NoTails;

impl TailMajorant for NoTails {
    fn operator_tail(&self, _: EnvState, _: Symbol) -> Option<f64> {
        None
    }
    fn column_tail(&self, _: EnvState, _: Symbol) -> Option<f64> {
        None
    }
    fn letter_series_tail(&self, _: Symbol) -> Option<f64> {
        None
    }
}

#[derive(Clone)]
pub struct PotentialSpec {
    pub rule: Arc<dyn PotentialRule>,
    pub alpha: f64,
    /// Declared bound on `V_α(φ)`.
    pub variation: f64,
    pub label: String,
}

impl fmt::Debug for PotentialSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("PotentialSpec")
            .field("label", &self.label)
            .field("alpha", &self.alpha)
            .field("variation", &self.variation)
            .field("depth", &self.rule.depth())
            .finish()
    }
}

impl PotentialSpec {
    pub fn new(rule: Arc<dyn PotentialRule>, alpha: f64, variation: f64, label: impl Into<String>) -> Result<Self> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::InvalidParameter(format!("alpha {alpha} outside (0, 1]")));
        }
        if !(variation >= 0.0 && variation.is_finite()) {
            return Err(Error::InvalidParameter(format!("variation {variation}")));
        }
        Ok(Self {
            rule,
            alpha,
            variation,
            label: label.into(),
        })
    }

    pub fn depth(&self) -> usize {
        self.rule.depth()
    }

    pub fn holder(&self) -> HolderParams {
        HolderParams::new(self.alpha, self.variation)
    }
}

/// Distortion constants: `C = e^{-α}/(1-e^{-α})` for additive Birkhoff-sum
/// distortion, `C·exp(C·V_α)` for the multiplicative form, `K = 1 + C_exp·V_α`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HolderParams {
    pub alpha: f64,
    pub v_alpha: f64,
    pub c_dist: f64,
    pub c_exp: f64,
    #[serde(rename = "K")]
    pub k: f64,
}

impl HolderParams {
    pub fn new(alpha: f64, v_alpha: f64) -> Self {
        let q = (-alpha).exp();
        let c_dist = q / (1.0 - q);
        let c_exp = c_dist * (c_dist * v_alpha).exp();
        Self {
            alpha,
            v_alpha,
            c_dist,
            c_exp,
            k: 1.0 + c_exp * v_alpha,
        }
    }
}

/// Tabular potential: depth-`d` words with values, loaded from CSV rows
/// `s0,…,s{d-1},value`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TabularPotential {
    pub depth: usize,
    pub table: BTreeMap<Vec<Symbol>, f64>,
}

impl TabularPotential {
    pub fn new(table: BTreeMap<Vec<Symbol>, f64>) -> Result<Self> {
        let depth = table
            .keys()
            .next()
            .map(Vec::len)
            .ok_or_else(|| Error::Table("empty table".into()))?;
        if depth == 0 || table.keys().any(|k| k.len() != depth) {
            return Err(Error::Table("rows must share one positive depth".into()));
        }
        if let Some((k, v)) = table.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Table(format!("non-finite value {v} at {k:?}")));
        }
        Ok(Self { depth, table })
    }

    pub fn from_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_path(path)?;
        let mut table = BTreeMap::new();
        for row in reader.records() {
            let row = row?;
            if row.len() < 2 {
                return Err(Error::Table("rows need at least one symbol and a value".into()));
            }
            let parse_err = |s: &str| Error::Table(format!("cannot parse `{s}`"));
            let word = row
                .iter()
                .take(row.len() - 1)
                .map(|s| s.parse::<Symbol>().map_err(|_| parse_err(s)))
                .collect::<Result<Vec<_>>>()?;
            let value_str = &row[row.len() - 1];
            let value = value_str.parse::<f64>().map_err(|_| parse_err(value_str))?;
            table.insert(word, value);
        }
        Self::new(table)
    }

    /// Exact `V_α` of the table: sup over same-first-symbol pairs.
    pub fn variation(&self, alpha: f64) -> f64 {
        let entries: Vec<_> = self.table.iter().collect();
        let mut v: f64 = 0.0;
        for (i, (a, fa)) in entries.iter().enumerate() {
            for (b, fb) in &entries[i + 1..] {
                if a[0] != b[0] {
                    continue;
                }
                let s = first_disagreement(a, b).unwrap_or(self.depth);
                v = v.max((*fa - *fb).abs() * (alpha * s as f64).exp());
            }
        }
        v
    }
}

impl PotentialRule for TabularPotential {
    fn depth(&self) -> usize {
        self.depth
    }

    fn eval(&self, _: EnvState, word: &[Symbol]) -> f64 {
        if word.len() >= self.depth {
            return self
                .table
                .get(&word[..self.depth])
                .copied()
                .unwrap_or(f64::NEG_INFINITY);
        }
        // conditional average over the rows refining the shorter prefix
        let (sum, count) = self
            .table
            .iter()
            .filter(|(k, _)| k.starts_with(word))
            .fold((0.0, 0usize), |(s, c), (_, v)| (s + v, c + 1));
        if count == 0 {
            f64::NEG_INFINITY
        } else {
            sum / count as f64
        }
    }

    fn letter_bounds(&self, e: Symbol) -> (f64, f64) {
        let vals = self.table.iter().filter(|(k, _)| k[0] == e).map(|(_, v)| *v);
        let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if lo.is_finite() {
            (lo.exp(), hi.exp())
        } else {
            (0.0, 0.0)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BirkhoffSum {
    pub value: f64,
    /// Bound on the error from summands whose window runs past the word.
    pub ledger: f64,
}

/// `S_nφ(x, w) = Σ_{j<n} φ(θ^j x, σ^j w)`.
pub fn birkhoff_sum(model: &ModelSpec, x: FiberPoint, w: &[Symbol], n: usize) -> Result<BirkhoffSum> {
    if n > w.len() {
        return Err(Error::InvalidParameter(format!(
            "Birkhoff sum of length {n} on a word of length {}",
            w.len()
        )));
    }
    let pot = &model.potential;
    let dphi = pot.depth();
    let mut value = 0.0;
    let mut ledger = 0.0;
    for j in 0..n {
        let end = (j + dphi).min(w.len());
        let state = model.environment.state(x.advance(j as i64));
        value += pot.rule.eval(state, &w[j..end]);
        if end - j < dphi {
            ledger += pot.variation * (-pot.alpha * (end - j) as f64).exp();
        }
    }
    Ok(BirkhoffSum { value, ledger })
}

/// Exact `v_α(g)`: max over same-first-symbol word pairs of
/// `|g(w) - g(w')|·e^{α s(w, w')}` with `s` the common-prefix length.
pub fn variation_alpha(g: &DepthFunction, alpha: f64) -> f64 {
    let d = g.trunc.depth;
    if d < 2 || g.values.is_empty() {
        return 0.0;
    }
    let space = &g.space;
    let mut best: f64 = 0.0;
    // words are sorted, so each prefix class is a contiguous run
    for s in 1..d {
        let mut start = 0;
        while start < space.len() {
            let prefix = &space.word(start)[..s];
            let mut end = start + 1;
            let (mut lo, mut hi) = (g.values[start], g.values[start]);
            while end < space.len() && &space.word(end)[..s] == prefix {
                lo = lo.min(g.values[end]);
                hi = hi.max(g.values[end]);
                end += 1;
            }
            best = best.max((hi - lo) * (alpha * s as f64).exp());
            start = end;
        }
    }
    best
}

/// `‖g‖_α = ‖g‖_∞ + v_α(g)`.
pub fn holder_norm(g: &DepthFunction, alpha: f64) -> f64 {
    g.sup_norm() + variation_alpha(g, alpha)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistortionReport {
    pub n: usize,
    pub pairs: usize,
    pub c_dist: f64,
    pub c_exp: f64,
    pub v_alpha: f64,
    /// Worst `|ΔS_n| / (C V_α d^α)` over the pairs.
    pub worst_additive: f64,
    /// Worst `|e^{ΔS_n} - 1| / (C_exp V_α d^α)` over the pairs.
    pub worst_exponential: f64,
    pub witness: Option<(Vec<Symbol>, Vec<Symbol>)>,
}

/// Checks Birkhoff-sum distortion for pairs sharing their first `n` symbols.
/// The distance is taken between the tails after the shared block, which is
/// the form in which the geometric constant `C` is independent of `n`.
pub fn distortion_check(
    model: &ModelSpec,
    x: FiberPoint,
    n: usize,
    pairs: &[(Vec<Symbol>, Vec<Symbol>)],
) -> Result<DistortionReport> {
    let holder = model.potential.holder();
    let alpha = holder.alpha;
    let mut worst_add: f64 = 0.0;
    let mut worst_exp: f64 = 0.0;
    let mut witness = None;
    for (w, v) in pairs {
        if w.len() != v.len() || w.len() <= n || w[..n] != v[..n] {
            return Err(Error::InvalidParameter(format!(
                "pair {w:?}, {v:?} does not share a block of length {n}"
            )));
        }
        let delta = birkhoff_sum(model, x, w, n)?.value - birkhoff_sum(model, x, v, n)?.value;
        let d = shift_metric(&w[n..], &v[n..]).powf(alpha);
        let ratio = |lhs: f64, c: f64| {
            let rhs = c * holder.v_alpha * d;
            if lhs <= 1e-15 {
                0.0
            } else if rhs == 0.0 {
                f64::INFINITY
            } else {
                lhs / rhs
            }
        };
        let ra = ratio(delta.abs(), holder.c_dist);
        let re = ratio(delta.exp_m1().abs(), holder.c_exp);
        if ra > worst_add || re > worst_exp {
            witness = Some((w.clone(), v.clone()));
        }
        worst_add = worst_add.max(ra);
        worst_exp = worst_exp.max(re);
    }
    Ok(DistortionReport {
        n,
        pairs: pairs.len(),
        c_dist: holder.c_dist,
        c_exp: holder.c_exp,
        v_alpha: holder.v_alpha,
        worst_additive: worst_add,
        worst_exponential: worst_exp,
        witness,
    })
}

/// All distinct pairs from `words` that agree on their first `n` symbols.
pub fn prefix_pairs(words: &[Vec<Symbol>], n: usize) -> Vec<(Vec<Symbol>, Vec<Symbol>)> {
    let mut out = Vec::new();
    for (i, w) in words.iter().enumerate() {
        for v in &words[i + 1..] {
            if w[..n] == v[..n] {
                out.push((w.clone(), v.clone()));
            }
        }
    }
    out
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SummabilityReport {
    /// `Z_x(l)` for `l = 0..=L`, sup over samples.
    pub z_profile: Vec<f64>,
    /// Analytic bound for letters beyond `L`; equals `Z(L)`.
    pub tail: f64,
    /// Bound on `L_x 1` on cylinders `[b]`, `b > L`.
    pub beyond_window: f64,
    /// `M >= sup L_x 1`.
    pub m_bound: f64,
    pub strong_sum: Option<f64>,
    pub strong: bool,
}

impl SummabilityReport {
    /// Least `l` with `Z(l) <= bound`, if any inside the window.
    pub fn level_below(&self, bound: f64) -> Option<Symbol> {
        self.z_profile.iter().position(|&z| z <= bound).map(|l| l as Symbol)
    }
}

pub fn check_summability(engine: &Engine<'_>, samples: &SampleSet) -> Result<SummabilityReport> {
    let model = engine.model;
    let top = engine.trunc.max_symbol;
    let mut z = vec![0.0f64; top as usize + 1];
    let mut tail: f64 = 0.0;
    let mut beyond: f64 = 0.0;
    let mut m: f64 = 0.0;
    for x in samples.points() {
        let state = model.environment.state(x);
        let t = model
            .tails
            .operator_tail(state, top)
            .ok_or_else(|| Error::SummabilityUncertifiable("no operator tail majorant".into()))?;
        let c = model
            .tails
            .column_tail(state, top)
            .ok_or_else(|| Error::SummabilityUncertifiable("no column tail majorant".into()))?;
        let step = engine.step(x)?;
        let profile = step.tail_profile();
        for (zl, pl) in z.iter_mut().zip(&profile) {
            *zl = zl.max(pl + t);
        }
        tail = tail.max(t);
        beyond = beyond.max(c);
        m = m.max(step.sup_l1 + t).max(c);
    }
    let strong_sum = model
        .tails
        .letter_series_tail(top)
        .map(|rest| (0..=top).map(|e| model.potential.rule.letter_bounds(e).1).sum::<f64>() + rest);
    Ok(SummabilityReport {
        z_profile: z,
        tail,
        beyond_window: beyond,
        m_bound: m,
        strong: strong_sum.is_some_and(f64::is_finite),
        strong_sum,
    })
}

/// `Π c_e` along a word: lower bound for `exp S_nφ` on the cylinder.
pub fn letter_floor(model: &ModelSpec, word: &[Symbol]) -> f64 {
    word.iter().map(|&e| model.potential.rule.letter_bounds(e).0).product()
}
