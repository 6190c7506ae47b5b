//! Built-in model gallery: the two exactly solvable finite shifts, a
//! periodic alternation of them, the walks on ℤ (through the zig-zag codec)
//! and the sparse deterministic shift.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::environment::{EnvState, EnvironmentKind, EnvironmentModel, IncidenceRule};
use crate::error::{Error, Result};
use crate::potential::{FiniteTails, NoTails, PotentialRule, PotentialSpec, TabularPotential, TailMajorant};
use crate::shift::{Symbol, SymbolCodec, TruncationParams};

pub type Params = BTreeMap<String, f64>;

pub const BUILTINS: [&str; 7] = [
    "full2",
    "golden_mean",
    "alternating",
    "nn_walk",
    "growing_walk",
    "sparse_deterministic",
    "random_eta",
];

/// How a structural property is known to hold for a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Claim {
    /// Holds by a proof about the model; the checker must agree.
    Proof,
    /// Holds by bounded numerical certification only.
    Certified,
    /// Fails; the checker must report failure.
    Fails,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentedProperties {
    pub mixing: Claim,
    pub finite_range: Claim,
    pub bounded_access: Claim,
    pub condition_a: Claim,
    pub condition_b: Claim,
    pub condition_c: Claim,
    pub summable: Claim,
    pub strongly_summable: Claim,
}

impl DocumentedProperties {
    pub fn fine(&self) -> bool {
        [
            self.mixing,
            self.finite_range,
            self.bounded_access,
            self.condition_a,
            self.condition_b,
            self.condition_c,
            self.summable,
        ]
        .iter()
        .all(|c| *c != Claim::Fails)
    }
}

/// Exact Perron data of a finite deterministic model with a depth-1
/// potential, indexed by letter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Oracle {
    pub lambda: f64,
    pub nu: Vec<f64>,
    pub rho: Vec<f64>,
    pub mu: Vec<f64>,
    /// `|λ₂| / λ₁`.
    pub gap_ratio: f64,
}

impl Oracle {
    /// Perron data of `M_{je} = A_{ej} e^{φ(e)}` by a dense eigensolver.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        let eig = m.clone().complex_eigenvalues();
        let mut mods: Vec<(f64, f64)> = eig.iter().map(|c| (c.norm(), c.re)).collect();
        mods.sort_by(|a, b| b.0.total_cmp(&a.0));
        let lambda = mods[0].1;
        if !(lambda > 0.0) || (mods[0].0 - lambda).abs() > 1e-12 * lambda {
            return Err(Error::InvalidParameter("no positive Perron root".into()));
        }
        let gap_ratio = if n > 1 { mods[1].0 / lambda } else { 0.0 };
        let null = |a: DMatrix<f64>| -> Vec<f64> {
            let svd = a.svd(false, true);
            let vt = svd.v_t.expect("requested");
            let (idx, _) = svd
                .singular_values
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .expect("nonempty");
            let v: Vec<f64> = vt.row(idx).iter().copied().collect();
            let sign = if v.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
            v.into_iter().map(|x| x * sign).collect()
        };
        let shifted = m - DMatrix::identity(n, n) * lambda;
        let rho = null(shifted.clone());
        let nu = null(shifted.transpose());
        let total: f64 = nu.iter().sum();
        let nu: Vec<f64> = nu.iter().map(|v| v / total).collect();
        let scale: f64 = rho.iter().zip(&nu).map(|(r, v)| r * v).sum();
        let rho: Vec<f64> = rho.iter().map(|r| r / scale).collect();
        let mu = rho.iter().zip(&nu).map(|(r, v)| r * v).collect();
        Ok(Self {
            lambda,
            nu,
            rho,
            mu,
            gap_ratio,
        })
    }

    pub fn max_deviation(&self, other: &Oracle) -> f64 {
        let vec_dev = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        [
            (self.lambda - other.lambda).abs(),
            vec_dev(&self.nu, &other.nu),
            vec_dev(&self.rho, &other.rho),
            vec_dev(&self.mu, &other.mu),
            (self.gap_ratio - other.gap_ratio).abs(),
        ]
        .into_iter()
        .fold(0.0, f64::max)
    }
}

#[derive(Clone)]
pub struct ModelSpec {
    pub name: String,
    pub params: Params,
    pub environment: EnvironmentModel,
    pub potential: PotentialSpec,
    pub tails: Arc<dyn TailMajorant>,
    /// Letters are zig-zag encoded integers.
    pub codec: bool,
    /// The finite set `F` of conditions (C) and anchors.
    pub anchor_set: Vec<Symbol>,
    pub default_truncation: TruncationParams,
    pub documented: DocumentedProperties,
    pub oracle: Option<Oracle>,
}

impl fmt::Debug for ModelSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ModelSpec")
            .field("name", &self.name)
            .field("params", &self.params)
            .field("environment", &self.environment)
            .field("potential", &self.potential)
            .finish()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelDescription {
    pub name: String,
    pub params: Params,
    pub environment: EnvironmentKind,
    pub environment_description: String,
    pub potential: String,
    pub potential_depth: usize,
    pub alpha: f64,
    pub declared_variation: f64,
    pub codec: String,
    pub anchor_set: Vec<Symbol>,
    pub default_truncation: TruncationParams,
    pub documented: DocumentedProperties,
    pub oracle: Option<Oracle>,
}

impl ModelSpec {
    pub fn describe(&self) -> ModelDescription {
        ModelDescription {
            name: self.name.clone(),
            params: self.params.clone(),
            environment: self.environment.kind,
            environment_description: self.environment.description.clone(),
            potential: self.potential.label.clone(),
            potential_depth: self.potential.depth(),
            alpha: self.potential.alpha,
            declared_variation: self.potential.variation,
            codec: if self.codec { "zigzag" } else { "identity" }.into(),
            anchor_set: self.anchor_set.clone(),
            default_truncation: self.default_truncation,
            documented: self.documented,
            oracle: self.oracle.clone(),
        }
    }

    /// Same incidence rule and potential under another environment family.
    pub fn with_environment(mut self, kind: EnvironmentKind) -> Result<Self> {
        self.environment = EnvironmentModel::new(
            kind,
            self.environment.rule.clone(),
            self.environment.description.clone(),
        )?;
        if kind != EnvironmentKind::Deterministic {
            self.oracle = None;
        }
        Ok(self)
    }

    /// Replaces the potential by a table; tails are only known for finite
    /// alphabets covered by the window.
    pub fn with_table(mut self, table: TabularPotential) -> Result<Self> {
        let variation = table.variation(self.potential.alpha);
        let depth = table.depth;
        self.potential = PotentialSpec::new(Arc::new(table), self.potential.alpha, variation, "tabular")?;
        self.tails = match self.environment.rule.alphabet_size() {
            Some(size) => Arc::new(FiniteTails { size }),
            None => Arc::new(NoTails),
        };
        self.oracle = None;
        if self.default_truncation.depth < depth {
            self.default_truncation = TruncationParams::new(self.default_truncation.max_symbol, depth)?;
        }
        Ok(self)
    }

    /// Decoded value of a letter (identity without codec).
    pub fn decode(&self, s: Symbol) -> i64 {
        if self.codec {
            SymbolCodec::decode(s)
        } else {
            s as i64
        }
    }
}

fn param(params: &Params, key: &str, default: f64) -> f64 {
    params.get(key).copied().unwrap_or(default)
}

fn check_keys(params: &Params, allowed: &[&str]) -> Result<()> {
    match params.keys().find(|k| !allowed.contains(&k.as_str())) {
        Some(k) => Err(Error::InvalidParameter(format!("unknown parameter `{k}`"))),
        None => Ok(()),
    }
}

pub fn builtin(name: &str, params: &Params) -> Result<ModelSpec> {
    match name {
        "full2" => {
            check_keys(params, &["p"])?;
            let p = param(params, "p", 0.5);
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::InvalidParameter(format!("p = {p} must be positive")));
            }
            let m = FiniteMatrix::full(2);
            let pot = ConstPotential(p.ln());
            finite_model(name, params, vec![m], Arc::new(pot), EnvironmentKind::Deterministic, 3)
        }
        "golden_mean" => {
            check_keys(params, &[])?;
            let m = FiniteMatrix::golden();
            finite_model(
                name,
                params,
                vec![m],
                Arc::new(ConstPotential(0.0)),
                EnvironmentKind::Deterministic,
                2,
            )
        }
        "alternating" => {
            check_keys(params, &[])?;
            finite_model(
                name,
                params,
                vec![FiniteMatrix::golden(), FiniteMatrix::full(2)],
                Arc::new(ConstPotential(0.0)),
                EnvironmentKind::Periodic { period: 2 },
                2,
            )
        }
        "nn_walk" => {
            check_keys(params, &["eta", "decay"])?;
            let eta = param(params, "eta", 1.0);
            let decay = param(params, "decay", 1.0);
            if !(eta >= 1.0 && eta.fract() == 0.0 && eta <= 1e6) {
                return Err(Error::InvalidParameter(format!("eta = {eta} must be an integer >= 1")));
            }
            if !(decay > 0.0 && decay.is_finite()) {
                return Err(Error::InvalidParameter(format!("decay = {decay} must be positive")));
            }
            let walk = Arc::new(NnWalk { eta: eta as u64, decay });
            walk_model(
                name,
                params,
                walk.clone(),
                walk.clone(),
                walk,
                EnvironmentKind::Deterministic,
                TruncationParams::new(24, 2)?,
                Claim::Proof,
            )
        }
        "growing_walk" => {
            check_keys(params, &["beta"])?;
            let beta = param(params, "beta", 1.0);
            if !(beta > 0.0 && beta <= 4.0) {
                return Err(Error::InvalidParameter(format!("beta = {beta} outside (0, 4]")));
            }
            let walk = Arc::new(GrowingWalk { beta });
            walk_model(
                name,
                params,
                walk.clone(),
                walk.clone(),
                walk,
                EnvironmentKind::Deterministic,
                TruncationParams::new(16, 3)?,
                Claim::Certified,
            )
        }
        "random_eta" => {
            check_keys(params, &["low", "high"])?;
            let low = param(params, "low", 1.0);
            let high = param(params, "high", 2.0);
            if !(low >= 1.0 && high >= low && low.fract() == 0.0 && high.fract() == 0.0 && high <= 64.0) {
                return Err(Error::InvalidParameter(format!(
                    "multipliers low = {low}, high = {high} must be integers with 1 <= low <= high <= 64"
                )));
            }
            let walk = Arc::new(RandomEta {
                low: low as u64,
                high: high as u64,
            });
            walk_model(
                name,
                params,
                walk.clone(),
                walk.clone(),
                walk,
                EnvironmentKind::IidSeeded,
                TruncationParams::new(16, 2)?,
                Claim::Certified,
            )
        }
        "sparse_deterministic" => {
            check_keys(params, &[])?;
            let rule = Arc::new(Sparse);
            let environment = EnvironmentModel::new(
                EnvironmentKind::Deterministic,
                rule.clone(),
                "A_10 = 1, A_ij = 1 iff i = (j-1) + n^(j+1)",
            )?;
            Ok(ModelSpec {
                name: name.into(),
                params: params.clone(),
                environment,
                potential: PotentialSpec::new(rule.clone(), 1.0, 0.0, "phi(i) = -ln(1+i)")?,
                tails: rule,
                codec: false,
                anchor_set: vec![0, 1, 2, 3, 4],
                default_truncation: TruncationParams::new(64, 2)?,
                documented: DocumentedProperties {
                    mixing: Claim::Proof,
                    finite_range: Claim::Proof,
                    bounded_access: Claim::Proof,
                    condition_a: Claim::Certified,
                    condition_b: Claim::Certified,
                    condition_c: Claim::Fails,
                    summable: Claim::Certified,
                    strongly_summable: Claim::Fails,
                },
                oracle: None,
            })
        }
        other => Err(Error::UnknownModel(other.into())),
    }
}

fn finite_model(
    name: &str,
    params: &Params,
    mats: Vec<FiniteMatrix>,
    pot: Arc<ConstPotential>,
    kind: EnvironmentKind,
    depth: usize,
) -> Result<ModelSpec> {
    let size = mats[0].size;
    let desc = if mats.len() == 1 {
        format!("constant {size}x{size} matrix")
    } else {
        format!("cycle of {} matrices", mats.len())
    };
    let rule = Arc::new(MatrixCycle { mats });
    let environment = EnvironmentModel::new(kind, rule.clone(), desc)?;
    let oracle = if rule.mats.len() == 1 {
        let claimed = closed_form(name, pot.0)?;
        let computed = Oracle::from_matrix(&rule.mats[0].weighted(pot.0))?;
        if let Some(c) = &claimed {
            let dev = c.max_deviation(&computed);
            if dev > 1e-12 {
                return Err(Error::InvalidParameter(format!(
                    "closed-form oracle disagrees with eigensolver by {dev:e}"
                )));
            }
        }
        Some(claimed.unwrap_or(computed))
    } else {
        None
    };
    let label = format!("phi = {}", pot.0);
    Ok(ModelSpec {
        name: name.into(),
        params: params.clone(),
        environment,
        potential: PotentialSpec::new(pot, 1.0, 0.0, label)?,
        tails: Arc::new(FiniteTails { size: size as u64 }),
        codec: false,
        anchor_set: (0..size as Symbol).collect(),
        default_truncation: TruncationParams::new(size as Symbol - 1, depth)?,
        documented: DocumentedProperties {
            mixing: Claim::Proof,
            finite_range: Claim::Proof,
            bounded_access: Claim::Proof,
            condition_a: Claim::Proof,
            condition_b: Claim::Fails,
            condition_c: Claim::Proof,
            summable: Claim::Proof,
            strongly_summable: Claim::Proof,
        },
        oracle,
    })
}

/// Closed-form Perron data of the two exactly solvable shifts.
fn closed_form(name: &str, phi: f64) -> Result<Option<Oracle>> {
    Ok(match name {
        "full2" => Some(Oracle {
            lambda: 2.0 * phi.exp(),
            nu: vec![0.5, 0.5],
            rho: vec![1.0, 1.0],
            mu: vec![0.5, 0.5],
            gap_ratio: 0.0,
        }),
        "golden_mean" => {
            let g = (1.0 + 5f64.sqrt()) / 2.0;
            let c = g * g / (g * g + 1.0);
            Some(Oracle {
                lambda: g,
                nu: vec![1.0 / g, 1.0 / (g * g)],
                rho: vec![c * g, c],
                mu: vec![c, c / (g * g)],
                gap_ratio: 1.0 / (g * g),
            })
        }
        _ => None,
    })
}

#[allow(clippy::too_many_arguments)]
fn walk_model(
    name: &str,
    params: &Params,
    rule: Arc<dyn IncidenceRule>,
    pot: Arc<dyn PotentialRule>,
    tails: Arc<dyn TailMajorant>,
    kind: EnvironmentKind,
    trunc: TruncationParams,
    c_claim: Claim,
) -> Result<ModelSpec> {
    let desc = format!("{name} on Z, zig-zag encoded");
    Ok(ModelSpec {
        name: name.into(),
        params: params.clone(),
        environment: EnvironmentModel::new(kind, rule, desc)?,
        potential: PotentialSpec::new(pot, 1.0, 0.0, format!("{name} log-probability"))?,
        tails,
        codec: true,
        anchor_set: vec![0, 1, 2],
        default_truncation: trunc,
        documented: DocumentedProperties {
            mixing: Claim::Proof,
            finite_range: Claim::Proof,
            bounded_access: Claim::Proof,
            condition_a: Claim::Certified,
            condition_b: Claim::Certified,
            condition_c: c_claim,
            summable: Claim::Certified,
            strongly_summable: Claim::Certified,
        },
        oracle: None,
    })
}

#[derive(Clone, Debug)]
pub struct FiniteMatrix {
    pub size: usize,
    pub entries: Vec<bool>,
}

impl FiniteMatrix {
    pub fn full(size: usize) -> Self {
        Self {
            size,
            entries: vec![true; size * size],
        }
    }

    pub fn golden() -> Self {
        Self {
            size: 2,
            entries: vec![true, true, true, false],
        }
    }

    pub fn get(&self, i: Symbol, j: Symbol) -> bool {
        let n = self.size as Symbol;
        i < n && j < n && self.entries[(i * n + j) as usize]
    }

    /// `M_{je} = A_{ej} e^{φ}` for a constant potential.
    pub fn weighted(&self, phi: f64) -> DMatrix<f64> {
        let n = self.size;
        DMatrix::from_fn(n, n, |j, e| {
            if self.get(e as Symbol, j as Symbol) {
                phi.exp()
            } else {
                0.0
            }
        })
    }
}

/// Finite matrices selected by `state.index mod len`.
#[derive(Debug)]
pub struct MatrixCycle {
    pub mats: Vec<FiniteMatrix>,
}

impl MatrixCycle {
    fn at(&self, state: EnvState) -> &FiniteMatrix {
        &self.mats[state.index.rem_euclid(self.mats.len() as i64) as usize]
    }
}

impl IncidenceRule for MatrixCycle {
    fn allows(&self, state: EnvState, i: Symbol, j: Symbol) -> bool {
        self.at(state).get(i, j)
    }

    fn successors(&self, state: EnvState, e: Symbol) -> Option<Vec<Symbol>> {
        let m = self.at(state);
        Some((0..m.size as Symbol).filter(|&j| m.get(e, j)).collect())
    }

    fn predecessors(&self, state: EnvState, j: Symbol, upto: Symbol) -> Vec<Symbol> {
        let m = self.at(state);
        (0..=upto.min(m.size as Symbol - 1)).filter(|&i| m.get(i, j)).collect()
    }

    fn alphabet_size(&self) -> Option<u64> {
        Some(self.mats[0].size as u64)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConstPotential(pub f64);

impl PotentialRule for ConstPotential {
    fn depth(&self) -> usize {
        1
    }
    fn eval(&self, _: EnvState, _: &[Symbol]) -> f64 {
        self.0
    }
    fn letter_bounds(&self, _: Symbol) -> (f64, f64) {
        (self.0.exp(), self.0.exp())
    }
}

/// Decoded extent of the window: the letters `0..=L` cover decoded
/// `[-neg, pos]`.
fn covered(l: Symbol) -> (u64, u64) {
    let pos = l.div_ceil(2);
    let neg = l / 2;
    (neg, pos)
}

/// Decoded successor interval `[i - r, i + r]` of a walk, encoded summary.
fn interval_summary(i: i64, r: u64) -> (usize, Symbol, Symbol) {
    let r = r.min(1 << 40) as i64;
    let (lo, hi) = (i - r, i + r);
    // encoded min is the decoded value closest to 0; max the one farthest out
    let min = if lo <= 0 && hi >= 0 {
        0
    } else if lo > 0 {
        SymbolCodec::encode(lo)
    } else {
        SymbolCodec::encode(hi)
    };
    let max = SymbolCodec::encode(hi).max(SymbolCodec::encode(lo));
    ((2 * r + 1) as usize, min, max)
}

fn interval_successors(i: i64, r: u64) -> Option<Vec<Symbol>> {
    if r > 1 << 22 {
        return None;
    }
    let r = r as i64;
    Some((i - r..=i + r).map(SymbolCodec::encode).collect())
}

/// `Σ_{i ∈ ℤ, |i| >= k} w(|i|)` for a summand decaying at least
/// geometrically with ratio `q` from index `k` on: exact partial sum of 60
/// terms plus a geometric remainder.
fn symmetric_series(k: u64, w: impl Fn(u64) -> f64, q: f64) -> f64 {
    let mut sum = 0.0;
    let mut last = 0.0;
    for a in k..k + 60 {
        last = w(a);
        sum += if a == 0 { last } else { 2.0 * last };
    }
    sum + 2.0 * last * q / (1.0 - q)
}

/// Sites enumerated exactly by [`nearest_column`]; farther sites reach every
/// uncovered column and enter through a series remainder.
const EXACT_SITES: i64 = 48;

/// Column mass `Σ_{e ∉ excluded} w(e, b)` at the nearest uncovered sites
/// `b = pos + 1` and `b = -(neg + 1)`, maximized over the two. `w(e, b)` is
/// the largest weight with which `e` may step to `b` (0 if it cannot).
/// Columns farther out receive less, because reach sets only shrink with
/// `|b|` for the walks here.
fn nearest_column(
    l: Symbol,
    excluded: &[Symbol],
    sites: impl Fn(i64) -> std::ops::RangeInclusive<i64>,
    w: impl Fn(i64, i64) -> f64,
    rest: f64,
) -> f64 {
    let (neg, pos) = covered(l);
    [pos as i64 + 1, -(neg as i64) - 1]
        .into_iter()
        .map(|b| {
            sites(b)
                .filter(|&e| !excluded.contains(&SymbolCodec::encode(e)))
                .map(|e| w(e, b))
                .sum::<f64>()
                + rest
        })
        .fold(0.0, f64::max)
}

/// Nearest-neighbour walk `|i - j| <= η` with
/// `φ = -ln(2η+1) - decay·|i|`.
#[derive(Debug, Clone, Copy)]
pub struct NnWalk {
    pub eta: u64,
    pub decay: f64,
}

impl NnWalk {
    fn weight(&self, a: u64) -> f64 {
        (-((2 * self.eta + 1) as f64).ln() - self.decay * a as f64).exp()
    }
}

impl IncidenceRule for NnWalk {
    fn allows(&self, _: EnvState, i: Symbol, j: Symbol) -> bool {
        SymbolCodec::decode(i).abs_diff(SymbolCodec::decode(j)) <= self.eta
    }
    fn successors(&self, _: EnvState, e: Symbol) -> Option<Vec<Symbol>> {
        interval_successors(SymbolCodec::decode(e), self.eta)
    }
    fn successor_summary(&self, _: EnvState, e: Symbol) -> Option<(usize, Symbol, Symbol)> {
        Some(interval_summary(SymbolCodec::decode(e), self.eta))
    }
}

impl PotentialRule for NnWalk {
    fn depth(&self) -> usize {
        1
    }
    fn eval(&self, _: EnvState, w: &[Symbol]) -> f64 {
        -((2 * self.eta + 1) as f64).ln() - self.decay * SymbolCodec::decode(w[0]).unsigned_abs() as f64
    }
    fn letter_bounds(&self, e: Symbol) -> (f64, f64) {
        let v = self.weight(SymbolCodec::decode(e).unsigned_abs());
        (v, v)
    }
}

impl TailMajorant for NnWalk {
    fn operator_tail(&self, _: EnvState, l: Symbol) -> Option<f64> {
        self.letter_series_tail(l)
    }
    fn column_tail(&self, state: EnvState, l: Symbol) -> Option<f64> {
        self.column_tail_outside(state, l, &[])
    }
    fn column_tail_outside(&self, _: EnvState, l: Symbol, excluded: &[Symbol]) -> Option<f64> {
        let eta = self.eta as i64;
        Some(nearest_column(
            l,
            excluded,
            |b| b - eta..=b + eta,
            |e, _| self.weight(e.unsigned_abs()),
            0.0,
        ))
    }
    fn letter_series_tail(&self, l: Symbol) -> Option<f64> {
        let (neg, pos) = covered(l);
        let q = (-self.decay).exp();
        let one_side = |k: u64| self.weight(k) / (1.0 - q);
        Some(one_side(neg + 1) + one_side(pos + 1))
    }
}

fn pow4(a: u64) -> Option<u64> {
    4u64.checked_pow(a.try_into().ok()?)
}

/// Walk with reach `η(i) = 4^{|i|}` and `φ_β = β log p_{ω₀}`,
/// `p_i = 1/(2η(i)+1)`.
#[derive(Debug, Clone, Copy)]
pub struct GrowingWalk {
    pub beta: f64,
}

fn walk_p(a: u64, mult: u64) -> f64 {
    1.0 / (2.0 * mult as f64 * 4f64.powi(a.min(600) as i32) + 1.0)
}

impl IncidenceRule for GrowingWalk {
    fn allows(&self, _: EnvState, i: Symbol, j: Symbol) -> bool {
        let (a, b) = (SymbolCodec::decode(i), SymbolCodec::decode(j));
        pow4(a.unsigned_abs()).is_none_or(|r| a.abs_diff(b) <= r)
    }
    fn successors(&self, _: EnvState, e: Symbol) -> Option<Vec<Symbol>> {
        let i = SymbolCodec::decode(e);
        interval_successors(i, pow4(i.unsigned_abs())?)
    }
    fn successor_summary(&self, _: EnvState, e: Symbol) -> Option<(usize, Symbol, Symbol)> {
        let i = SymbolCodec::decode(e);
        Some(interval_summary(i, pow4(i.unsigned_abs())?))
    }
}

impl PotentialRule for GrowingWalk {
    fn depth(&self) -> usize {
        1
    }
    fn eval(&self, _: EnvState, w: &[Symbol]) -> f64 {
        self.beta * walk_p(SymbolCodec::decode(w[0]).unsigned_abs(), 1).ln()
    }
    fn letter_bounds(&self, e: Symbol) -> (f64, f64) {
        let v = walk_p(SymbolCodec::decode(e).unsigned_abs(), 1).powf(self.beta);
        (v, v)
    }
}

impl GrowingWalk {
    fn series_from(&self, k: u64) -> f64 {
        symmetric_series(k, |a| walk_p(a, 1).powf(self.beta), 4f64.powf(-self.beta))
    }
}

impl TailMajorant for GrowingWalk {
    fn operator_tail(&self, _: EnvState, l: Symbol) -> Option<f64> {
        self.letter_series_tail(l)
    }
    fn column_tail(&self, state: EnvState, l: Symbol) -> Option<f64> {
        self.column_tail_outside(state, l, &[])
    }
    fn column_tail_outside(&self, _: EnvState, l: Symbol, excluded: &[Symbol]) -> Option<f64> {
        let reaches = |e: i64, b: i64| pow4(e.unsigned_abs()).is_none_or(|r| e.abs_diff(b) <= r);
        Some(nearest_column(
            l,
            excluded,
            |_| -EXACT_SITES..=EXACT_SITES,
            |e, b| {
                if reaches(e, b) {
                    walk_p(e.unsigned_abs(), 1).powf(self.beta)
                } else {
                    0.0
                }
            },
            self.series_from(EXACT_SITES as u64 + 1),
        ))
    }
    fn letter_series_tail(&self, l: Symbol) -> Option<f64> {
        let (neg, pos) = covered(l);
        let one = |k: u64| 0.5 * (self.series_from(k) - if k == 0 { walk_p(0, 1).powf(self.beta) } else { 0.0 });
        Some(one(neg + 1) + one(pos + 1))
    }
}

/// Growing walk with random reach `η_x(i) = m·4^{|i|}`, `m` uniform on
/// `{low, high}` per (environment state, site), and `φ_x = log p_x(ω₀)`.
#[derive(Debug, Clone, Copy)]
pub struct RandomEta {
    pub low: u64,
    pub high: u64,
}

const ETA_STREAM: u64 = 0xe7a;

impl RandomEta {
    fn multiplier(&self, state: EnvState, e: Symbol) -> u64 {
        if self.low == self.high || state.uniform(ETA_STREAM, e) < 0.5 {
            self.low
        } else {
            self.high
        }
    }

    fn reach(&self, state: EnvState, e: Symbol) -> Option<u64> {
        pow4(SymbolCodec::decode(e).unsigned_abs())?.checked_mul(self.multiplier(state, e))
    }

    fn series_from(&self, k: u64) -> f64 {
        symmetric_series(k, |a| walk_p(a, self.low), 0.25)
    }

    /// `η_x(i)` at a state; `None` on overflow.
    pub fn eta(&self, state: EnvState, i: i64) -> Option<u64> {
        self.reach(state, SymbolCodec::encode(i))
    }
}

impl IncidenceRule for RandomEta {
    fn allows(&self, state: EnvState, i: Symbol, j: Symbol) -> bool {
        let d = SymbolCodec::decode(i).abs_diff(SymbolCodec::decode(j));
        self.reach(state, i).is_none_or(|r| d <= r)
    }
    fn successors(&self, state: EnvState, e: Symbol) -> Option<Vec<Symbol>> {
        interval_successors(SymbolCodec::decode(e), self.reach(state, e)?)
    }
    fn successor_summary(&self, state: EnvState, e: Symbol) -> Option<(usize, Symbol, Symbol)> {
        Some(interval_summary(SymbolCodec::decode(e), self.reach(state, e)?))
    }
}

impl PotentialRule for RandomEta {
    fn depth(&self) -> usize {
        1
    }
    fn eval(&self, state: EnvState, w: &[Symbol]) -> f64 {
        let a = SymbolCodec::decode(w[0]).unsigned_abs();
        walk_p(a, self.multiplier(state, w[0])).ln()
    }
    fn letter_bounds(&self, e: Symbol) -> (f64, f64) {
        let a = SymbolCodec::decode(e).unsigned_abs();
        (walk_p(a, self.high), walk_p(a, self.low))
    }
}

impl TailMajorant for RandomEta {
    fn operator_tail(&self, _: EnvState, l: Symbol) -> Option<f64> {
        self.letter_series_tail(l)
    }
    fn column_tail(&self, state: EnvState, l: Symbol) -> Option<f64> {
        self.column_tail_outside(state, l, &[])
    }
    /// Uniform over states: each site takes the heaviest multiplier that
    /// still reaches the column.
    fn column_tail_outside(&self, _: EnvState, l: Symbol, excluded: &[Symbol]) -> Option<f64> {
        let weight = |e: i64, b: i64| {
            let a = e.unsigned_abs();
            let Some(base) = pow4(a) else {
                return walk_p(a, self.low);
            };
            [self.low, self.high]
                .into_iter()
                .find(|&m| base.checked_mul(m).is_none_or(|r| e.abs_diff(b) <= r))
                .map_or(0.0, |m| walk_p(a, m))
        };
        Some(nearest_column(
            l,
            excluded,
            |_| -EXACT_SITES..=EXACT_SITES,
            weight,
            self.series_from(EXACT_SITES as u64 + 1),
        ))
    }
    fn letter_series_tail(&self, l: Symbol) -> Option<f64> {
        let (neg, pos) = covered(l);
        let one = |k: u64| 0.5 * (self.series_from(k) - if k == 0 { walk_p(0, self.low) } else { 0.0 });
        Some(one(neg + 1) + one(pos + 1))
    }
}

/// `A_10 = 1` and, for `j >= 1`, `A_ij = 1` iff `i = (j-1) + n^{j+1}` for
/// some `n >= 0`; `φ(i) = -ln(1+i)`.
#[derive(Debug, Clone, Copy)]
pub struct Sparse;

/// Whether `m = n^k` for some integer `n >= 0`.
fn is_perfect_power(m: u64, k: u32) -> bool {
    if m <= 1 {
        return true;
    }
    if k >= 64 {
        return false;
    }
    let guess = (m as f64).powf(1.0 / f64::from(k)).round() as u64;
    (guess.saturating_sub(1)..=guess + 1).any(|n| n.checked_pow(k) == Some(m))
}

impl Sparse {
    /// `Σ_{n >= 0, i_n > above} 1/(1+i_n)` with `i_n = (j-1) + n^{j+1}`,
    /// `j >= 1`, plus a rigorous remainder bound.
    fn column_sum(j: u64, above: Option<u64>) -> f64 {
        let k = j + 1;
        let keep = |i: f64| above.is_none_or(|a| i > a as f64);
        if j == 1 {
            // Σ_{n >= 0} 1/(1+n²) = (1 + π coth π)/2
            let total = 0.5 * (1.0 + PI / PI.tanh());
            let dropped: f64 = (0u64..)
                .map(|n| (n * n) as f64)
                .take_while(|&i| !keep(i))
                .map(|i| 1.0 / (1.0 + i))
                .sum();
            return total - dropped;
        }
        let mut sum = 0.0;
        let mut n: u64 = 0;
        loop {
            let i = (j - 1) as f64 + (n as f64).powi(k as i32);
            if keep(i) {
                sum += 1.0 / (1.0 + i);
            }
            n += 1;
            // remainder Σ_{m >= n} m^{-k} <= n^{-k} + n^{1-k}/(k-1)
            let rest = (n as f64).powi(-(k as i32)) + (n as f64).powi(1 - k as i32) / (k - 1) as f64;
            if n >= 2 && (rest < 1e-13 || n > 2_000_000) {
                let first_kept = above.is_none_or(|a| (j - 1) as f64 + (n as f64).powi(k as i32) > a as f64);
                return sum + if first_kept { rest } else { rest.min(sum.max(rest)) };
            }
        }
    }
}

impl IncidenceRule for Sparse {
    fn allows(&self, _: EnvState, i: Symbol, j: Symbol) -> bool {
        if j == 0 {
            return i == 1;
        }
        i + 1 >= j && is_perfect_power(i + 1 - j, (j + 1).min(64) as u32)
    }

    fn successors(&self, state: EnvState, i: Symbol) -> Option<Vec<Symbol>> {
        let mut out = Vec::new();
        if i == 1 {
            out.push(0);
        }
        // j <= i + 1 and 2^{j+1} <= i - j + 1 once n >= 2
        for j in 1..=i + 1 {
            if j > 64 && j < i {
                continue;
            }
            if self.allows(state, i, j) {
                out.push(j);
            }
        }
        Some(out)
    }

    fn successor_summary(&self, state: EnvState, i: Symbol) -> Option<(usize, Symbol, Symbol)> {
        let out = self.successors(state, i)?;
        Some((out.len(), *out.first()?, *out.last()?))
    }

    fn predecessors(&self, _: EnvState, j: Symbol, upto: Symbol) -> Vec<Symbol> {
        if j == 0 {
            return if upto >= 1 { vec![1] } else { Vec::new() };
        }
        let mut out = Vec::new();
        for n in 0u64.. {
            let p = match u32::try_from(j + 1).ok().and_then(|k| n.checked_pow(k)) {
                Some(p) => p,
                None => break,
            };
            match (j - 1).checked_add(p) {
                Some(i) if i <= upto => out.push(i),
                _ => break,
            }
            if n >= 1 && j + 1 >= 64 {
                break;
            }
        }
        out
    }
}

impl PotentialRule for Sparse {
    fn depth(&self) -> usize {
        1
    }
    fn eval(&self, _: EnvState, w: &[Symbol]) -> f64 {
        -((1 + w[0]) as f64).ln()
    }
    fn letter_bounds(&self, e: Symbol) -> (f64, f64) {
        let v = 1.0 / (1 + e) as f64;
        (v, v)
    }
}

impl TailMajorant for Sparse {
    fn operator_tail(&self, _: EnvState, l: Symbol) -> Option<f64> {
        // column 0 is fed by letter 1 only; columns j > l + 2 are dominated
        // by column l + 2
        let worst = (1..=l + 2)
            .map(|j| Self::column_sum(j, Some(l)))
            .fold(if l >= 1 { 0.0 } else { 0.5 }, f64::max);
        Some(worst)
    }
    fn column_tail(&self, _: EnvState, l: Symbol) -> Option<f64> {
        Some(Self::column_sum(l + 1, None))
    }
    fn letter_series_tail(&self, _: Symbol) -> Option<f64> {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn every_builtin_builds() {
        for name in BUILTINS {
            let m = builtin(name, &Params::new()).unwrap();
            assert_eq!(m.name, name);
            assert!(m.default_truncation.depth >= m.potential.depth());
            serde_json::to_string(&m.describe()).unwrap();
        }
        assert!(matches!(builtin("nope", &Params::new()), Err(Error::UnknownModel(_))));
    }

    #[test]
    fn invalid_parameters() {
        let p = |k: &str, v: f64| Params::from([(k.to_string(), v)]);
        assert!(builtin("nn_walk", &p("eta", 0.0)).is_err());
        assert!(builtin("nn_walk", &p("eta", 1.5)).is_err());
        assert!(builtin("growing_walk", &p("beta", -1.0)).is_err());
        assert!(builtin("growing_walk", &p("beta", 9.0)).is_err());
        assert!(builtin("golden_mean", &p("beta", 1.0)).is_err());
    }

    #[test]
    fn golden_oracle_closed_form() {
        let m = builtin("golden_mean", &Params::new()).unwrap();
        let o = m.oracle.unwrap();
        let g = (1.0 + 5f64.sqrt()) / 2.0;
        assert_relative_eq!(o.lambda, g, epsilon = 1e-15);
        assert_relative_eq!(o.nu[0], 0.618_034, epsilon = 1e-6);
        assert_relative_eq!(o.rho[0], 1.1708, epsilon = 1e-4);
        assert_relative_eq!(o.rho[1], 0.7236, epsilon = 1e-4);
        assert_relative_eq!(o.mu[0], 0.723_607, epsilon = 1e-6);
        assert_relative_eq!(o.gap_ratio, (3.0 - 5f64.sqrt()) / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn golden_incidence() {
        let m = builtin("golden_mean", &Params::new()).unwrap();
        let a = m.environment.matrix_at(crate::FiberPoint::new(0, 0));
        assert!(a.allows(0, 0) && a.allows(0, 1) && a.allows(1, 0) && !a.allows(1, 1));
    }

    #[test]
    fn walk_incidence_and_tails() {
        let x = crate::FiberPoint::new(0, 0);
        let m = builtin("nn_walk", &Params::new()).unwrap();
        let a = m.environment.matrix_at(x);
        for i in -5i64..5 {
            for j in -5i64..5 {
                let (ei, ej) = (SymbolCodec::encode(i), SymbolCodec::encode(j));
                assert_eq!(a.allows(ei, ej), (i - j).abs() <= 1);
            }
        }
        let gw = GrowingWalk { beta: 1.0 };
        // decoded |i| <= 8 covered by L = 16
        assert_eq!(covered(16), (8, 8));
        let direct: f64 = (9..200).map(|a| 2.0 * walk_p(a, 1)).sum();
        assert_relative_eq!(gw.letter_series_tail(16).unwrap(), direct, max_relative = 1e-12);
        // |e| <= 1 cannot reach |b| = 9; every |e| >= 2 can
        let col: f64 = (2..200).map(|a| 2.0 * walk_p(a, 1)).sum::<f64>();
        assert_relative_eq!(
            gw.column_tail(EnvState::CONSTANT, 16).unwrap(),
            col,
            max_relative = 1e-12
        );
    }

    type Walk = (Box<dyn IncidenceRule>, Box<dyn PotentialRule>, Box<dyn TailMajorant>);

    /// Brute-force column sums over uncovered `b` never exceed the majorants.
    #[test]
    fn column_majorants_dominate_far_columns() {
        let st = EnvState { seed: 5, index: 2 };
        let models: Vec<Walk> = vec![
            (
                Box::new(GrowingWalk { beta: 1.0 }),
                Box::new(GrowingWalk { beta: 1.0 }),
                Box::new(GrowingWalk { beta: 1.0 }),
            ),
            (
                Box::new(NnWalk { eta: 2, decay: 0.5 }),
                Box::new(NnWalk { eta: 2, decay: 0.5 }),
                Box::new(NnWalk { eta: 2, decay: 0.5 }),
            ),
            (
                Box::new(RandomEta { low: 1, high: 2 }),
                Box::new(RandomEta { low: 1, high: 2 }),
                Box::new(RandomEta { low: 1, high: 2 }),
            ),
        ];
        let f = [0u64, 1, 2];
        for (rule, pot, tails) in &models {
            for l in [6u64, 11, 16] {
                let bound = tails.column_tail_outside(st, l, &f).unwrap();
                for b in l + 1..l + 40 {
                    let sum: f64 = (0..400u64)
                        .filter(|e| !f.contains(e) && rule.allows(st, *e, b))
                        .map(|e| pot.eval(st, &[e]).exp())
                        .sum();
                    assert!(sum <= bound * (1.0 + 1e-12), "{rule:?} l={l} b={b}: {sum} > {bound}");
                }
            }
        }
    }

    #[test]
    fn sparse_structure() {
        let s = Sparse;
        let st = EnvState::CONSTANT;
        assert_eq!(s.predecessors(st, 1, 20), vec![0, 1, 4, 9, 16]);
        assert_eq!(s.predecessors(st, 2, 30), vec![1, 2, 9, 28]);
        assert_eq!(s.predecessors(st, 0, 30), vec![1]);
        for i in 0..40 {
            let succ = s.successors(st, i).unwrap();
            let brute: Vec<_> = (0..200).filter(|&j| s.allows(st, i, j)).collect();
            assert_eq!(succ, brute, "letter {i}");
        }
        assert!(is_perfect_power(27, 3) && !is_perfect_power(28, 3) && is_perfect_power(1 << 40, 2));
    }

    #[test]
    fn sparse_tails_match_direct_summation() {
        let s = Sparse;
        // direct summation over i <= 10^6 plus an integral tail bound
        let direct = |j: u64, above: u64| -> f64 {
            s.predecessors(EnvState::CONSTANT, j, 1_000_000)
                .into_iter()
                .filter(|&i| i > above)
                .map(|i| 1.0 / (1 + i) as f64)
                .sum::<f64>()
        };
        for j in [1u64, 2, 3, 10] {
            let closed = Sparse::column_sum(j, Some(5));
            let d = direct(j, 5);
            assert!(closed >= d - 1e-12, "j={j}: {closed} < {d}");
            assert!(closed - d < 2e-3, "j={j}: {closed} vs {d}");
        }
        let z = s.operator_tail(EnvState::CONSTANT, 64).unwrap();
        let z2 = s.operator_tail(EnvState::CONSTANT, 256).unwrap();
        assert!(z2 < z && z < 0.2);
    }

    #[test]
    fn random_eta_is_reproducible() {
        let m = RandomEta { low: 1, high: 2 };
        let st = EnvState { seed: 11, index: 4 };
        let draws: Vec<_> = (0..50).map(|e| m.multiplier(st, e)).collect();
        assert_eq!(draws, (0..50).map(|e| m.multiplier(st, e)).collect::<Vec<_>>());
        assert!(draws.contains(&1) && draws.contains(&2));
        for e in 0..10 {
            let (c, cc) = m.letter_bounds(e);
            let v = m.eval(st, &[e]).exp();
            assert!(c <= v * (1.0 + 1e-12) && v <= cc * (1.0 + 1e-12));
        }
    }
}
