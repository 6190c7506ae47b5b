//! Truncated word spaces, depth-`d` cylinder functions and the fiberwise
//! transfer operator `L_x g(ω) = Σ_{e: A_{eω₀}(x)=1} e^{φ_x(eω)} g(eω)`.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::LambdaSequence;
use crate::environment::{EnvState, FiberPoint, SampleSet};
use crate::error::{Error, Result};
use crate::models::ModelSpec;
use crate::potential::{holder_norm, variation_alpha};
use crate::shift::{Symbol, TruncationParams};

/// Groups above this size are reduced in parallel.
const PAR_THRESHOLD: usize = 1 << 12;

/// Admissible depth-`d` words over `{0, …, L}` at one fiber, lexicographic.
#[derive(Debug)]
pub struct WordSpace {
    pub trunc: TruncationParams,
    symbols: Vec<Symbol>,
    codes: Vec<u64>,
}

impl WordSpace {
    /// `states[i]` is the environment state governing the transition from
    /// position `i` to `i + 1`.
    fn build(model: &ModelSpec, states: &[EnvState], trunc: TruncationParams) -> Self {
        let d = trunc.depth;
        let rule = model.environment.rule.as_ref();
        let top = match rule.alphabet_size() {
            Some(n) => trunc.max_symbol.min(n.saturating_sub(1)),
            None => trunc.max_symbol,
        };
        let mut symbols = Vec::new();
        let mut stack: Vec<Symbol> = Vec::with_capacity(d);
        // successor lists per position, computed once
        let succ: Vec<Vec<Vec<Symbol>>> = states
            .iter()
            .map(|&s| {
                (0..=top)
                    .map(|a| (0..=top).filter(|&b| rule.allows(s, a, b)).collect())
                    .collect()
            })
            .collect();
        fn rec(d: usize, top: Symbol, succ: &[Vec<Vec<Symbol>>], stack: &mut Vec<Symbol>, out: &mut Vec<Symbol>) {
            if stack.len() == d {
                out.extend_from_slice(stack);
                return;
            }
            let pos = stack.len();
            let next: Vec<Symbol> = match stack.last() {
                None => (0..=top).collect(),
                Some(&a) => succ[pos - 1][a as usize].clone(),
            };
            for b in next {
                stack.push(b);
                rec(d, top, succ, stack, out);
                stack.pop();
            }
        }
        rec(d, top, &succ, &mut stack, &mut symbols);
        let radix = trunc.radix();
        let codes = symbols.chunks(d).map(|w| code_of(w, radix)).collect();
        Self { trunc, symbols, codes }
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.trunc.depth
    }

    pub fn word(&self, i: usize) -> &[Symbol] {
        let d = self.trunc.depth;
        &self.symbols[i * d..(i + 1) * d]
    }

    pub fn words(&self) -> impl Iterator<Item = &[Symbol]> {
        self.symbols.chunks(self.trunc.depth)
    }

    pub fn index_of(&self, w: &[Symbol]) -> Option<usize> {
        if w.len() != self.trunc.depth || w.iter().any(|&s| s > self.trunc.max_symbol) {
            return None;
        }
        self.codes.binary_search(&code_of(w, self.trunc.radix())).ok()
    }

    /// Index range of the words starting with `prefix`.
    pub fn prefix_range(&self, prefix: &[Symbol]) -> std::ops::Range<usize> {
        let d = self.trunc.depth;
        if prefix.len() > d || prefix.iter().any(|&s| s > self.trunc.max_symbol) {
            return 0..0;
        }
        let radix = self.trunc.radix();
        let scale = radix.pow((d - prefix.len()) as u32);
        let lo = code_of(prefix, radix) * scale;
        let hi = lo + scale;
        let a = self.codes.partition_point(|&c| c < lo);
        let b = self.codes.partition_point(|&c| c < hi);
        a..b
    }
}

/// Mixed-radix code; lexicographic order on equal-length words.
pub fn code_of(w: &[Symbol], radix: u64) -> u64 {
    w.iter().fold(0u64, |acc, &s| acc * radix + s)
}

/// One application of `L_x` between the word spaces at `x` and `θx`.
///
/// Sources `u = (e, w₀, …, w_{d-2})` are grouped by the target prefix they
/// feed, so `L_x g(w) = Σ_{u ∈ G(w)} e^{φ_x(u)} g(u)`.
#[derive(Debug)]
pub struct Step {
    pub source: Arc<WordSpace>,
    pub target: Arc<WordSpace>,
    /// `e^{φ_x(u)}` per source word.
    pub weights: Vec<f64>,
    group_offsets: Vec<usize>,
    group_members: Vec<u32>,
    target_group: Vec<u32>,
    /// `Z_x(L)`: bound on the dropped letters `e > L`.
    pub tail: f64,
    /// Bound on `L_x 1` on cylinders `[b]`, `b > L`.
    pub column_tail: f64,
    /// `max_w L_x 1(w)` over the truncated system.
    pub sup_l1: f64,
}

impl Step {
    fn build(model: &ModelSpec, state: EnvState, source: Arc<WordSpace>, target: Arc<WordSpace>) -> Self {
        let trunc = source.trunc;
        let d = trunc.depth;
        let radix = trunc.radix();
        let pot = &model.potential.rule;
        let weights: Vec<f64> = source.words().map(|u| pot.eval(state, u).exp()).collect();

        let (target_group, members_of): (Vec<u32>, Vec<Vec<u32>>) = if d >= 2 {
            let mut keys: Vec<u64> = Vec::new();
            let mut tg = Vec::with_capacity(target.len());
            for w in target.words() {
                let k = code_of(&w[..d - 1], radix);
                if keys.last() != Some(&k) {
                    keys.push(k);
                }
                tg.push((keys.len() - 1) as u32);
            }
            let mut members = vec![Vec::new(); keys.len()];
            for (i, u) in source.words().enumerate() {
                if let Ok(g) = keys.binary_search(&code_of(&u[1..], radix)) {
                    members[g].push(i as u32);
                }
            }
            (tg, members)
        } else {
            let rule = model.environment.rule.as_ref();
            let tg = (0..target.len() as u32).collect();
            let members = target
                .words()
                .map(|w| {
                    source
                        .words()
                        .enumerate()
                        .filter(|(_, u)| rule.allows(state, u[0], w[0]))
                        .map(|(i, _)| i as u32)
                        .collect()
                })
                .collect();
            (tg, members)
        };
        let mut group_offsets = Vec::with_capacity(members_of.len() + 1);
        group_offsets.push(0);
        let mut group_members = Vec::new();
        for m in &members_of {
            group_members.extend_from_slice(m);
            group_offsets.push(group_members.len());
        }
        let top = trunc.max_symbol;
        let tail = model.tails.operator_tail(state, top).unwrap_or(f64::INFINITY);
        let column_tail = model.tails.column_tail(state, top).unwrap_or(f64::INFINITY);
        let mut step = Self {
            source,
            target,
            weights,
            group_offsets,
            group_members,
            target_group,
            tail,
            column_tail,
            sup_l1: 0.0,
        };
        step.sup_l1 = step
            .group_sums(&vec![1.0; step.source.len()])
            .into_iter()
            .fold(0.0, f64::max);
        step
    }

    pub fn groups(&self) -> usize {
        self.group_offsets.len() - 1
    }

    pub fn members(&self, g: usize) -> &[u32] {
        &self.group_members[self.group_offsets[g]..self.group_offsets[g + 1]]
    }

    pub fn group_of_target(&self, w: usize) -> usize {
        self.target_group[w] as usize
    }

    /// `M` bound for this step: sup of `L_x 1` including everything dropped.
    pub fn m_bound(&self) -> f64 {
        (self.sup_l1 + self.tail).max(self.column_tail)
    }

    fn group_sums(&self, g: &[f64]) -> Vec<f64> {
        let sum = |k: usize| {
            self.members(k)
                .iter()
                .map(|&u| self.weights[u as usize] * g[u as usize])
                .sum::<f64>()
        };
        if self.group_members.len() >= PAR_THRESHOLD {
            (0..self.groups()).into_par_iter().map(sum).collect()
        } else {
            (0..self.groups()).map(sum).collect()
        }
    }

    /// Values of `L_x g` on the target words.
    pub fn apply_values(&self, g: &[f64]) -> Vec<f64> {
        let sums = self.group_sums(g);
        self.target_group.iter().map(|&k| sums[k as usize]).collect()
    }

    /// Unnormalized pullback `u ↦ e^{φ(u)} ν([σu])` of target masses.
    pub fn transpose_values(&self, nu: &[f64]) -> Vec<f64> {
        let mut per_group = vec![0.0; self.groups()];
        for (w, &m) in nu.iter().enumerate() {
            per_group[self.target_group[w] as usize] += m;
        }
        let mut out = vec![0.0; self.source.len()];
        for (k, &mass) in per_group.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for &u in self.members(k) {
                out[u as usize] += self.weights[u as usize] * mass;
            }
        }
        out
    }

    /// `l ↦ max_G Σ_{u ∈ G, u₀ > l} e^{φ(u)}` for `l = 0..=L`.
    pub fn tail_profile(&self) -> Vec<f64> {
        let top = self.source.trunc.max_symbol as usize;
        let mut best = vec![0.0f64; top + 1];
        let mut by_letter = vec![0.0f64; top + 1];
        for k in 0..self.groups() {
            by_letter.iter_mut().for_each(|v| *v = 0.0);
            for &u in self.members(k) {
                by_letter[self.source.word(u as usize)[0] as usize] += self.weights[u as usize];
            }
            let mut acc = 0.0;
            for l in (0..=top).rev() {
                best[l] = best[l].max(acc);
                acc += by_letter[l];
            }
        }
        best
    }
}

/// A real function on the depth-`d` cylinders of one fiber.
#[derive(Clone, Debug)]
pub struct DepthFunction {
    pub fiber: FiberPoint,
    pub trunc: TruncationParams,
    pub space: Arc<WordSpace>,
    pub values: Vec<f64>,
    /// Accumulated bound on the truncation error (tail policy: zero extension).
    pub ledger: f64,
}

impl DepthFunction {
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn get(&self, w: &[Symbol]) -> Option<f64> {
        self.space.index_of(w).map(|i| self.values[i])
    }

    pub fn variation(&self, alpha: f64) -> f64 {
        variation_alpha(self, alpha)
    }

    pub fn holder_norm(&self, alpha: f64) -> f64 {
        holder_norm(self, alpha)
    }

    pub fn ensure_compatible(&self, other: &DepthFunction) -> Result<()> {
        self.trunc.ensure_eq(&other.trunc)?;
        if self.fiber != other.fiber {
            return Err(Error::FiberMismatch {
                expected: self.fiber.time,
                actual: other.fiber.time,
            });
        }
        if !Arc::ptr_eq(&self.space, &other.space) && self.space.codes != other.space.codes {
            return Err(Error::TruncationMismatch("different word spaces".into()));
        }
        Ok(())
    }

    /// `a·self + b·other`.
    pub fn combine(&self, a: f64, other: &DepthFunction, b: f64) -> Result<DepthFunction> {
        self.ensure_compatible(other)?;
        Ok(DepthFunction {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(x, y)| a * x + b * y)
                .collect(),
            ledger: a.abs() * self.ledger + b.abs() * other.ledger,
            ..self.clone()
        })
    }

    pub fn scaled(&self, c: f64) -> DepthFunction {
        DepthFunction {
            values: self.values.iter().map(|v| v * c).collect(),
            ledger: self.ledger * c.abs(),
            ..self.clone()
        }
    }

    pub fn map(&self, f: impl Fn(&[Symbol], f64) -> f64) -> DepthFunction {
        DepthFunction {
            values: self.space.words().zip(&self.values).map(|(w, &v)| f(w, v)).collect(),
            ..self.clone()
        }
    }
}

/// Shared, thread-safe cache of word spaces and operator steps for one model
/// and truncation. Spaces and steps are keyed by environment states, so all
/// fibers and times with equal states share them.
pub struct Engine<'m> {
    pub model: &'m ModelSpec,
    pub trunc: TruncationParams,
    spaces: Mutex<HashMap<Vec<EnvState>, Arc<WordSpace>>>,
    steps: Mutex<HashMap<Vec<EnvState>, Arc<Step>>>,
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m ModelSpec, trunc: TruncationParams) -> Result<Self> {
        if trunc.depth < model.potential.depth() {
            return Err(Error::InvalidParameter(format!(
                "depth {} below potential depth {}",
                trunc.depth,
                model.potential.depth()
            )));
        }
        Ok(Self {
            model,
            trunc,
            spaces: Mutex::new(HashMap::new()),
            steps: Mutex::new(HashMap::new()),
        })
    }

    pub fn state(&self, x: FiberPoint) -> EnvState {
        self.model.environment.state(x)
    }

    fn states(&self, x: FiberPoint, count: usize) -> Vec<EnvState> {
        (0..count as i64).map(|i| self.state(x.advance(i))).collect()
    }

    pub fn space(&self, x: FiberPoint) -> Arc<WordSpace> {
        let key = self.states(x, self.trunc.depth - 1);
        if let Some(s) = self.spaces.lock().expect("cache lock").get(&key) {
            return s.clone();
        }
        let built = Arc::new(WordSpace::build(self.model, &key, self.trunc));
        self.spaces
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_insert(built)
            .clone()
    }

    pub fn step(&self, x: FiberPoint) -> Result<Arc<Step>> {
        let key = self.states(x, self.trunc.depth);
        if let Some(s) = self.steps.lock().expect("cache lock").get(&key) {
            return Ok(s.clone());
        }
        let source = self.space(x);
        let target = self.space(x.advance(1));
        if source.is_empty() || target.is_empty() {
            return Err(Error::InvalidParameter(format!("empty word space at time {}", x.time)));
        }
        let built = Arc::new(Step::build(self.model, key[0], source, target));
        Ok(self
            .steps
            .lock()
            .expect("cache lock")
            .entry(key)
            .or_insert(built)
            .clone())
    }

    pub fn function(&self, x: FiberPoint, f: impl Fn(&[Symbol]) -> f64) -> DepthFunction {
        let space = self.space(x);
        let values = space.words().map(f).collect();
        DepthFunction {
            fiber: x,
            trunc: self.trunc,
            space,
            values,
            ledger: 0.0,
        }
    }

    pub fn constant(&self, x: FiberPoint, c: f64) -> DepthFunction {
        self.function(x, |_| c)
    }

    /// Indicator of the cylinder `[prefix]`.
    pub fn indicator(&self, x: FiberPoint, prefix: &[Symbol]) -> DepthFunction {
        self.function(x, |w| if w.starts_with(prefix) { 1.0 } else { 0.0 })
    }

    fn check(&self, g: &DepthFunction) -> Result<()> {
        g.trunc.ensure_eq(&self.trunc)
    }

    /// `L_x g` on the words at `θx`; ledger `← M·ledger + Z_x(L)·‖g‖_∞`.
    pub fn apply(&self, g: &DepthFunction) -> Result<DepthFunction> {
        self.check(g)?;
        let step = self.step(g.fiber)?;
        if !Arc::ptr_eq(&step.source, &g.space) && step.source.len() != g.values.len() {
            return Err(Error::TruncationMismatch("function not on this fiber's words".into()));
        }
        Ok(DepthFunction {
            fiber: g.fiber.advance(1),
            trunc: self.trunc,
            space: step.target.clone(),
            values: step.apply_values(&g.values),
            ledger: step.m_bound() * g.ledger + step.tail * g.sup_norm(),
        })
    }

    /// `L̂_x g = λ_x^{-1} L_x g`.
    pub fn apply_normalized(&self, g: &DepthFunction, lambda: f64) -> Result<DepthFunction> {
        let mut h = self.apply(g)?;
        let inv = 1.0 / lambda;
        h.values.iter_mut().for_each(|v| *v *= inv);
        h.ledger *= inv;
        Ok(h)
    }

    pub fn iterate(&self, g: &DepthFunction, n: usize) -> Result<DepthFunction> {
        let mut h = g.clone();
        for _ in 0..n {
            h = self.apply(&h)?;
        }
        Ok(h)
    }

    pub fn normalized_iterate(&self, g: &DepthFunction, n: usize, lambdas: &LambdaSequence) -> Result<DepthFunction> {
        let mut h = g.clone();
        for _ in 0..n {
            let lambda = lambdas.get(h.fiber.time)?;
            h = self.apply_normalized(&h, lambda)?;
        }
        Ok(h)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionA {
    /// `(e, M_e)`; `M_e = ∞` marks a failing letter.
    pub m_e: Vec<(Symbol, f64)>,
    pub pass: bool,
    pub witness: Option<(i64, Vec<Symbol>)>,
}

/// `M_e = 1 / min L_x 1` over sampled fibers and words at `θx` starting with `e`.
pub fn check_condition_a(engine: &Engine<'_>, samples: &SampleSet, floor: f64) -> Result<ConditionA> {
    let top = engine.trunc.max_symbol as usize;
    let mut inf = vec![f64::INFINITY; top + 1];
    let mut witness_word: Vec<Option<(i64, Vec<Symbol>)>> = vec![None; top + 1];
    for x in samples.points() {
        let l1 = engine.apply(&engine.constant(x, 1.0))?;
        for (w, &v) in l1.space.words().zip(&l1.values) {
            let e = w[0] as usize;
            if v < inf[e] {
                inf[e] = v;
                witness_word[e] = Some((x.time, w.to_vec()));
            }
        }
    }
    let mut pass = true;
    let mut witness = None;
    let m_e = inf
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .map(|(e, &v)| {
            if v <= floor {
                pass = false;
                witness = witness.take().or_else(|| witness_word[e].clone());
                (e as Symbol, f64::INFINITY)
            } else {
                (e as Symbol, 1.0 / v)
            }
        })
        .collect();
    Ok(ConditionA { m_e, pass, witness })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionB {
    /// `sup L_x 1|[e]` for `e = 0..=L`, with the dropped-letter tail added.
    pub profile: Vec<f64>,
    /// Non-increasing envelope from the right of the profile.
    pub envelope: Vec<f64>,
    /// Analytic bound beyond the window at `L, 2L, 4L, …`.
    pub majorant_ladder: Vec<(Symbol, f64)>,
    pub threshold: f64,
    pub pass: bool,
    pub reason: String,
}

/// Decay of `L_x 1` at infinity. Certified when the analytic majorant beyond
/// the window is below `threshold · max profile` and keeps decreasing along
/// the doubling ladder; finite alphabets fail by definition.
pub fn check_condition_b(engine: &Engine<'_>, samples: &SampleSet, threshold: f64) -> Result<ConditionB> {
    let model = engine.model;
    let top = engine.trunc.max_symbol;
    let mut profile = vec![0.0f64; top as usize + 1];
    for x in samples.points() {
        let step = engine.step(x)?;
        let l1 = step.apply_values(&vec![1.0; step.source.len()]);
        for (w, &v) in step.target.words().zip(&l1) {
            let e = w[0] as usize;
            profile[e] = profile[e].max(v + step.tail);
        }
    }
    let mut envelope = profile.clone();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let peak = envelope.first().copied().unwrap_or(0.0);
    if model.environment.rule.alphabet_size().is_some() {
        return Ok(ConditionB {
            profile,
            envelope,
            majorant_ladder: Vec::new(),
            threshold,
            pass: false,
            reason: "finite alphabet: L1 stays bounded below".into(),
        });
    }
    let mut ladder = Vec::new();
    let mut l = top.max(1);
    for _ in 0..11 {
        let mut worst: Option<f64> = Some(0.0);
        for x in samples.points() {
            let c = model.tails.column_tail(engine.state(x), l);
            worst = match (worst, c) {
                (Some(a), Some(b)) => Some(a.max(b)),
                _ => None,
            };
        }
        match worst {
            Some(v) => ladder.push((l, v)),
            None => {
                return Ok(ConditionB {
                    profile,
                    envelope,
                    majorant_ladder: ladder,
                    threshold,
                    pass: false,
                    reason: "no column-tail majorant".into(),
                })
            }
        }
        l = l.saturating_mul(2);
    }
    let first = ladder[0].1;
    let last = ladder[ladder.len() - 1].1;
    let monotone = ladder.windows(2).all(|w| w[1].1 <= w[0].1);
    let pass = first <= threshold * peak && monotone && last < first;
    let reason = if pass {
        "majorant below threshold at L and decreasing".into()
    } else {
        format!("majorant {first:e} vs threshold {:e}", threshold * peak)
    };
    Ok(ConditionB {
        profile,
        envelope,
        majorant_ladder: ladder,
        threshold,
        pass,
        reason,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConditionC {
    pub f_set: Vec<Symbol>,
    pub kappa_measured: f64,
    pub numerator: f64,
    pub inf_on_f: f64,
    pub pass: bool,
    pub witness: Option<(i64, Vec<Symbol>)>,
}

/// `κ = max_x [sup L_x 1_{[F]^c} + tail] / inf L_x 1|[F]`.
pub fn check_condition_c(engine: &Engine<'_>, samples: &SampleSet, f_set: &[Symbol]) -> Result<ConditionC> {
    if f_set.is_empty() {
        return Err(Error::InvalidParameter("F must be nonempty".into()));
    }
    let mut kappa: f64 = 0.0;
    let mut numerator_worst: f64 = 0.0;
    let mut inf_worst = f64::INFINITY;
    let mut witness = None;
    for x in samples.points() {
        let step = engine.step(x)?;
        let outside: Vec<f64> = step
            .source
            .words()
            .map(|u| if f_set.contains(&u[0]) { 0.0 } else { 1.0 })
            .collect();
        let num_vals = step.apply_values(&outside);
        let l1 = step.apply_values(&vec![1.0; step.source.len()]);
        let column = engine
            .model
            .tails
            .column_tail_outside(engine.state(x), engine.trunc.max_symbol, f_set)
            .unwrap_or(f64::INFINITY);
        let numerator = (num_vals.iter().fold(0.0f64, |m, &v| m.max(v)) + step.tail).max(column);
        let mut inf = f64::INFINITY;
        let mut arg = None;
        for (w, &v) in step.target.words().zip(&l1) {
            if f_set.contains(&w[0]) && v < inf {
                inf = v;
                arg = Some(w.to_vec());
            }
        }
        if inf <= 0.0 {
            return Ok(ConditionC {
                f_set: f_set.to_vec(),
                kappa_measured: f64::INFINITY,
                numerator,
                inf_on_f: 0.0,
                pass: false,
                witness: arg.map(|w| (x.time, w)),
            });
        }
        let k = numerator / inf;
        if k > kappa {
            kappa = k;
            witness = arg.map(|w| (x.time, w));
        }
        numerator_worst = numerator_worst.max(numerator);
        inf_worst = inf_worst.min(inf);
    }
    Ok(ConditionC {
        f_set: f_set.to_vec(),
        kappa_measured: kappa,
        numerator: numerator_worst,
        inf_on_f: inf_worst,
        pass: kappa < 0.25,
        witness,
    })
}

/// Uniform bounds along sampled orbits.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FiberOperatorReport {
    pub sup_l1: f64,
    /// `inf L_x 1|[e]` per letter.
    pub inf_l1_per_letter: Vec<(Symbol, f64)>,
    pub cond_c_ratio: f64,
    /// Worst `Lⁿ1(ω) / Lⁿ1(τ)` over same-first-symbol pairs.
    pub distortion_worst: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub distortion_ok: bool,
    /// Measured `sup_n ‖L̂ⁿ1‖_∞`.
    pub m_hat: f64,
    /// `K/β` with `β` the least `ν([e])` over the letters where `L̂1` may exceed 1.
    pub m_hat_analytic: f64,
    pub m_hat_level: Symbol,
    /// Worst `v_α(L̂ⁿg) / (‖g‖_∞ + e^{-αn} v_α(g))` over the test functions.
    pub s_two_norm: f64,
    /// `max(M̂·C·V_α, M̂)`.
    pub s_analytic: f64,
    pub n_max: usize,
    pub witness: Option<(i64, usize, Vec<Symbol>, Vec<Symbol>)>,
}

/// Test functions for the two-norm inequality: the constant, the indicator
/// of `[0]`, and the parity of the deepest letter.
fn two_norm_probes(engine: &Engine<'_>, x: FiberPoint) -> Vec<DepthFunction> {
    let d = engine.trunc.depth;
    vec![
        engine.constant(x, 1.0),
        engine.indicator(x, &[0]),
        engine.function(x, move |w| (w[d - 1] % 2) as f64),
    ]
}

/// Distortion of `Lⁿ1`, the uniform bound `‖L̂ⁿ1‖ <= M̂`, and the two-norm
/// constant along the orbit of each family, for `n <= n_max`.
pub fn check_distortion_and_bounds(
    engine: &Engine<'_>,
    families: &[crate::conformal::ConformalFamily],
    n_max: usize,
) -> Result<FiberOperatorReport> {
    let model = engine.model;
    let holder = model.potential.holder();
    let alpha = holder.alpha;
    let top = engine.trunc.max_symbol as usize;
    let mut sup_l1: f64 = 0.0;
    let mut inf_letter = vec![f64::INFINITY; top + 1];
    let mut worst_ratio: f64 = 1.0;
    let mut witness = None;
    let mut m_hat: f64 = 0.0;
    let mut s_emp: f64 = 0.0;
    let mut lambda_min = f64::INFINITY;
    let mut beyond: f64 = 0.0;
    let mut profile_hat = vec![0.0f64; top + 1];
    let mut nu_letter = vec![f64::INFINITY; top + 1];
    let mut kappa: f64 = 0.0;
    for fam in families {
        let x = fam.fiber(fam.t0);
        let span = fam.lambdas.t1() - fam.t0;
        if (span as usize) < n_max {
            return Err(Error::WindowNotCovered {
                time: fam.t0 + n_max as i64,
                start: fam.t0,
                end: fam.lambdas.t1(),
            });
        }
        for t in fam.t0..=fam.lambdas.t1() {
            let xt = fam.fiber(t);
            let lam = fam.lambdas.get(t)?;
            lambda_min = lambda_min.min(lam);
            let step = engine.step(xt)?;
            let l1 = step.apply_values(&vec![1.0; step.source.len()]);
            for (w, &v) in step.target.words().zip(&l1) {
                let e = w[0] as usize;
                sup_l1 = sup_l1.max(v);
                inf_letter[e] = inf_letter[e].min(v);
                profile_hat[e] = profile_hat[e].max((v + step.tail) / lam);
            }
            beyond = beyond.max(step.column_tail / lam);
            for (e, m) in fam.nu(t)?.marginal(1) {
                nu_letter[e[0] as usize] = nu_letter[e[0] as usize].min(m);
            }
        }
        let samples = SampleSet::new(vec![fam.base], fam.t0, fam.lambdas.t1());
        kappa = kappa.max(check_condition_c(engine, &samples, &model.anchor_set)?.kappa_measured);

        let mut h = engine.constant(x, 1.0);
        let mut probes = two_norm_probes(engine, x);
        let base: Vec<f64> = probes.iter().map(|g| g.sup_norm()).collect();
        let var0: Vec<f64> = probes.iter().map(|g| g.variation(alpha)).collect();
        for n in 1..=n_max {
            let lam = fam.lambdas.get(h.fiber.time)?;
            h = engine.apply_normalized(&h, lam)?;
            m_hat = m_hat.max(h.max());
            let space = h.space.clone();
            let mut start = 0;
            while start < space.len() {
                let e = space.word(start)[0];
                let range = space.prefix_range(&[e]);
                let (mut lo, mut hi) = (start, start);
                for i in range.clone() {
                    if h.values[i] < h.values[lo] {
                        lo = i;
                    }
                    if h.values[i] > h.values[hi] {
                        hi = i;
                    }
                }
                if h.values[lo] > 0.0 {
                    let r = h.values[hi] / h.values[lo];
                    if r > worst_ratio {
                        worst_ratio = r;
                        witness = Some((h.fiber.time, n, space.word(hi).to_vec(), space.word(lo).to_vec()));
                    }
                }
                start = range.end;
            }
            for (i, g) in probes.iter_mut().enumerate() {
                *g = engine.apply_normalized(g, lam)?;
                let denom = base[i] + (-alpha * n as f64).exp() * var0[i];
                if denom > 0.0 {
                    s_emp = s_emp.max(g.variation(alpha) / denom);
                }
            }
        }
    }
    // letters above `level` have L̂1 <= 1, so M̂ = K/β with β over 0..=level
    let level = (0..=top)
        .rev()
        .find(|&e| profile_hat[e] > 1.0)
        .map_or(0, |e| e + 1)
        .min(top);
    let beta = nu_letter[..=level]
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(f64::INFINITY, f64::min);
    let mut m_hat_analytic = holder.k / beta;
    if beyond > 1.0 {
        m_hat_analytic = f64::INFINITY;
    }
    let m_for_s = m_hat_analytic.max(m_hat);
    Ok(FiberOperatorReport {
        sup_l1,
        inf_l1_per_letter: inf_letter
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .map(|(e, &v)| (e as Symbol, v))
            .collect(),
        cond_c_ratio: kappa,
        distortion_worst: worst_ratio,
        k: holder.k,
        distortion_ok: worst_ratio <= holder.k * (1.0 + 1e-12),
        m_hat: m_hat.max(1.0),
        m_hat_analytic,
        m_hat_level: level as Symbol,
        s_two_norm: s_emp,
        s_analytic: m_for_s * (holder.c_dist * holder.v_alpha).max(1.0),
        n_max,
        witness,
    })
}
