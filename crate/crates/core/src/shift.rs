//! Symbols, words, the shift metric, and structural condition checkers.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::environment::{EnvironmentModel, FiberPoint, SampleSet};
use crate::error::{Error, Result};

pub type Symbol = u64;

/// Zig-zag bijection between ℤ and ℕ: 0↦0, 1↦1, −1↦2, 2↦3, −2↦4, …
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SymbolCodec;

impl SymbolCodec {
    pub fn encode(z: i64) -> Symbol {
        if z > 0 {
            2 * z as u64 - 1
        } else {
            2 * z.unsigned_abs()
        }
    }

    pub fn decode(s: Symbol) -> i64 {
        if s % 2 == 1 {
            (s / 2 + 1) as i64
        } else {
            -((s / 2) as i64)
        }
    }
}

/// Alphabet window `{0, …, L}` and cylinder depth `d`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TruncationParams {
    #[serde(rename = "L")]
    pub max_symbol: Symbol,
    #[serde(rename = "d")]
    pub depth: usize,
}

impl TruncationParams {
    pub fn new(max_symbol: Symbol, depth: usize) -> Result<Self> {
        if depth == 0 {
            return Err(Error::InvalidParameter("depth must be at least 1".into()));
        }
        let radix = u128::from(max_symbol) + 1;
        if radix
            .checked_pow(depth as u32 + 1)
            .is_none_or(|v| v > u128::from(u64::MAX))
        {
            return Err(Error::TooLarge(format!(
                "alphabet {} at depth {} overflows word codes",
                radix, depth
            )));
        }
        Ok(Self { max_symbol, depth })
    }

    pub fn radix(&self) -> u64 {
        self.max_symbol + 1
    }

    pub fn ensure_eq(&self, other: &TruncationParams) -> Result<()> {
        if self != other {
            return Err(Error::TruncationMismatch(format!("{self:?} vs {other:?}")));
        }
        Ok(())
    }
}

/// A word admissible at a fiber.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Word {
    pub symbols: Vec<Symbol>,
    pub fiber: FiberPoint,
}

impl Word {
    pub fn new(env: &EnvironmentModel, fiber: FiberPoint, symbols: Vec<Symbol>) -> Result<Self> {
        if symbols.is_empty() || !is_admissible(env, fiber, &symbols) {
            return Err(Error::NotAdmissible(symbols));
        }
        Ok(Self { symbols, fiber })
    }

    pub fn truncate(&self, m: usize) -> Word {
        Word {
            symbols: self.symbols[..m.clamp(1, self.symbols.len())].to_vec(),
            fiber: self.fiber,
        }
    }
}

/// `A_{w_i w_{i+1}}(θ^i x) = 1` for every consecutive pair.
pub fn is_admissible(env: &EnvironmentModel, x: FiberPoint, w: &[Symbol]) -> bool {
    w.windows(2)
        .enumerate()
        .all(|(i, p)| env.matrix_at(x.advance(i as i64)).allows(p[0], p[1]))
}

/// Admissible words of length `n + 1` over `{0, …, L}`, lexicographic.
pub fn admissible_words(env: &EnvironmentModel, x: FiberPoint, n: usize, trunc: &TruncationParams) -> Vec<Word> {
    let mut out = Vec::new();
    let mut stack: Vec<Symbol> = Vec::with_capacity(n + 1);
    fn rec(
        env: &EnvironmentModel,
        x: FiberPoint,
        len: usize,
        top: Symbol,
        stack: &mut Vec<Symbol>,
        out: &mut Vec<Word>,
    ) {
        if stack.len() == len {
            out.push(Word {
                symbols: stack.clone(),
                fiber: x,
            });
            return;
        }
        let pos = stack.len();
        for b in 0..=top {
            if let Some(&a) = stack.last() {
                if !env.matrix_at(x.advance(pos as i64 - 1)).allows(a, b) {
                    continue;
                }
            }
            stack.push(b);
            rec(env, x, len, top, stack, out);
            stack.pop();
        }
    }
    let top = match env.rule.alphabet_size() {
        Some(size) => trunc.max_symbol.min(size.saturating_sub(1)),
        None => trunc.max_symbol,
    };
    rec(env, x, n + 1, top, &mut stack, &mut out);
    out
}

/// Index of the first disagreement, or `None` if the prefixes agree.
pub fn first_disagreement(w: &[Symbol], v: &[Symbol]) -> Option<usize> {
    w.iter().zip(v).position(|(a, b)| a != b)
}

/// `exp(-min{n : ω_n ≠ τ_n})` on equal-length prefixes.
pub fn shift_metric(w: &[Symbol], v: &[Symbol]) -> f64 {
    assert_eq!(w.len(), v.len(), "metric needs equal-length prefixes");
    match first_disagreement(w, v) {
        None => 0.0,
        Some(s) => (-(s as f64)).exp(),
    }
}

/// Common output shape of every condition checker.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: String,
    pub certified: bool,
    /// Set when the environment is random: certification covers the sampled
    /// fibers only, not every environment state.
    pub sampled_not_uniform: bool,
    pub bounds: CheckBounds,
    pub witnesses: Vec<serde_json::Value>,
    pub detail: serde_json::Value,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckBounds {
    #[serde(rename = "L")]
    pub max_symbol: Symbol,
    pub horizon: Option<usize>,
    pub fibers: usize,
    pub window: (i64, i64),
}

impl CheckBounds {
    pub fn new(max_symbol: Symbol, horizon: Option<usize>, samples: &SampleSet) -> Self {
        Self {
            max_symbol,
            horizon,
            fibers: samples.fibers.len(),
            window: (samples.t_min, samples.t_max),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LetterRange {
    pub letter: Symbol,
    pub size: usize,
    pub min: Symbol,
    pub max: Symbol,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FiniteRangeReport {
    pub letters: Vec<LetterRange>,
    /// `l̂(l)` for `l = 0..=max letter`.
    pub l_hat: Vec<Symbol>,
    pub scan_bound: Symbol,
}

impl FiniteRangeReport {
    /// `l̂(l)`, saturating at the last scanned level.
    pub fn l_hat_at(&self, l: Symbol) -> Symbol {
        let i = (l as usize).min(self.l_hat.len() - 1);
        self.l_hat[i]
    }
}

/// Unions of out-sets over the samples and the level map `l ↦ l̂(l)`.
pub fn check_finite_range(
    env: &EnvironmentModel,
    letters: &[Symbol],
    samples: &SampleSet,
    scan_bound: Symbol,
) -> Result<FiniteRangeReport> {
    let mut sets: BTreeMap<Symbol, (usize, Symbol, Symbol)> = BTreeMap::new();
    for x in samples.points() {
        let slice = env.matrix_at(x);
        for &e in letters {
            let (size, lo, hi) = slice.out_summary(e).map_err(|_| Error::NotFiniteRange {
                letter: e,
                bound: scan_bound,
            })?;
            if size == 0 {
                continue;
            }
            if hi > scan_bound {
                return Err(Error::NotFiniteRange {
                    letter: e,
                    bound: scan_bound,
                });
            }
            let entry = sets.entry(e).or_insert((0, lo, hi));
            entry.0 = entry.0.max(size);
            entry.1 = entry.1.min(lo);
            entry.2 = entry.2.max(hi);
        }
    }
    let top = letters.iter().copied().max().unwrap_or(0);
    let mut l_hat = Vec::with_capacity(top as usize + 1);
    let mut running = 0;
    for l in 0..=top {
        if let Some(&(_, _, hi)) = sets.get(&l) {
            running = running.max(hi);
        }
        l_hat.push(running);
    }
    Ok(FiniteRangeReport {
        letters: sets
            .into_iter()
            .map(|(letter, (size, min, max))| LetterRange { letter, size, min, max })
            .collect(),
        l_hat,
        scan_bound,
    })
}

impl FiniteRangeReport {
    pub fn to_condition(&self, max_symbol: Symbol, samples: &SampleSet, random: bool) -> ConditionReport {
        ConditionReport {
            condition: "finite_range".into(),
            certified: true,
            sampled_not_uniform: random,
            bounds: CheckBounds::new(max_symbol, None, samples),
            witnesses: Vec::new(),
            detail: serde_json::to_value(self).expect("serializable"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundedAccessReport {
    /// `(b, b*)` pairs.
    pub b_star: Vec<(Symbol, Symbol)>,
    pub scan_bound: Symbol,
}

pub fn check_bounded_access(
    env: &EnvironmentModel,
    letters: &[Symbol],
    samples: &SampleSet,
    scan_bound: Symbol,
) -> Result<BoundedAccessReport> {
    let mut b_star = Vec::with_capacity(letters.len());
    for &b in letters {
        let mut worst = 0;
        for x in samples.points() {
            let first = env.matrix_at(x).predecessors(b, scan_bound).first().copied();
            match first {
                Some(a) => worst = worst.max(a),
                None => {
                    return Err(Error::NotBoundedAccess {
                        letter: b,
                        bound: scan_bound,
                    })
                }
            }
        }
        b_star.push((b, worst));
    }
    Ok(BoundedAccessReport { b_star, scan_bound })
}

/// Reachable-letter sets `S_i` (position `i`, fiber `θ^i x`) from `a` at
/// position 0 over `{0, …, L}`, for `i = 0..=steps`.
fn reach_sets(env: &EnvironmentModel, x: FiberPoint, a: Symbol, top: Symbol, steps: usize) -> Vec<Vec<bool>> {
    let n = top as usize + 1;
    let mut cur = vec![false; n];
    cur[a as usize] = true;
    let mut out = Vec::with_capacity(steps + 1);
    for i in 0..steps {
        let slice = env.matrix_at(x.advance(i as i64));
        let mut next = vec![false; n];
        for (u, _) in cur.iter().enumerate().filter(|(_, &on)| on) {
            for (v, slot) in next.iter_mut().enumerate() {
                if !*slot && slice.allows(u as Symbol, v as Symbol) {
                    *slot = true;
                }
            }
        }
        out.push(std::mem::replace(&mut cur, next));
    }
    out.push(cur);
    out
}

/// Least `N <= horizon` such that for every `n ∈ [N, horizon]` and every
/// sampled fiber some `ω ∈ E^n` over `{0, …, L}` makes `aωb` admissible.
pub fn mixing_n(
    env: &EnvironmentModel,
    a: Symbol,
    b: Symbol,
    samples: &SampleSet,
    horizon: usize,
    max_symbol: Symbol,
) -> Result<usize> {
    let table = mixing_table(env, &[a], &[b], samples, horizon, max_symbol);
    table[0][0].ok_or(Error::NotMixing { a, b, horizon })
}

/// `N_{a,b}` for all pairs, `None` where mixing fails at the horizon.
pub fn mixing_table(
    env: &EnvironmentModel,
    from: &[Symbol],
    to: &[Symbol],
    samples: &SampleSet,
    horizon: usize,
    max_symbol: Symbol,
) -> Vec<Vec<Option<usize>>> {
    let mut feasible = vec![vec![vec![true; horizon + 1]; to.len()]; from.len()];
    for x in samples.points() {
        for (ia, &a) in from.iter().enumerate() {
            if a > max_symbol {
                feasible[ia].iter_mut().for_each(|row| row.fill(false));
                continue;
            }
            // word aωb with |ω| = n + 1 puts b at position n + 2
            let sets = reach_sets(env, x, a, max_symbol, horizon + 2);
            for (ib, &b) in to.iter().enumerate() {
                for n in 0..=horizon {
                    let ok = b <= max_symbol && sets[n + 2][b as usize];
                    feasible[ia][ib][n] &= ok;
                }
            }
        }
    }
    feasible
        .into_iter()
        .map(|rows| {
            rows.into_iter()
                .map(|f| {
                    if !f[horizon] {
                        return None;
                    }
                    let mut n = horizon;
                    while n > 0 && f[n - 1] {
                        n -= 1;
                    }
                    Some(n)
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MixingReport {
    pub horizon: usize,
    /// Largest `N_{a,b}` over the checked pairs.
    pub n_max: Option<usize>,
    pub failures: Vec<(Symbol, Symbol)>,
}

pub fn check_mixing(
    env: &EnvironmentModel,
    letters: &[Symbol],
    samples: &SampleSet,
    horizon: usize,
    max_symbol: Symbol,
) -> MixingReport {
    let table = mixing_table(env, letters, letters, samples, horizon, max_symbol);
    let mut failures = Vec::new();
    let mut n_max = Some(0usize);
    for (ia, row) in table.iter().enumerate() {
        for (ib, n) in row.iter().enumerate() {
            match n {
                Some(n) => n_max = n_max.map(|m| m.max(*n)),
                None => failures.push((letters[ia], letters[ib])),
            }
        }
    }
    if !failures.is_empty() {
        n_max = None;
    }
    MixingReport {
        horizon,
        n_max,
        failures,
    }
}
