//! Environment families, orbit points and incidence queries.
//!
//! The base system is one of three families: a constant matrix, a periodic
//! cycle of matrices, or matrices drawn i.i.d. from counter-based randomness.
//! Every query reduces a [`FiberPoint`] to an [`EnvState`], and incidence rules
//! only ever see the state, so equal states give identical matrices.

use std::collections::BTreeSet;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::shift::Symbol;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EnvironmentKind {
    Deterministic,
    Periodic { period: u32 },
    IidSeeded,
}

/// Position in the environment orbit. The environment model is passed
/// alongside; two points with equal fields are interchangeable.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FiberPoint {
    pub base_seed: u64,
    pub time: i64,
}

impl FiberPoint {
    pub fn new(base_seed: u64, time: i64) -> Self {
        Self { base_seed, time }
    }

    pub fn advance(self, n: i64) -> Self {
        Self {
            base_seed: self.base_seed,
            time: self.time + n,
        }
    }
}

/// Reduced environment state: everything an incidence rule or potential may
/// depend on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EnvState {
    pub seed: u64,
    pub index: i64,
}

impl EnvState {
    pub const CONSTANT: EnvState = EnvState { seed: 0, index: 0 };

    /// Counter-based uniform draw in `[0, 1)` for `(state, stream, counter)`.
    pub fn uniform(&self, stream: u64, counter: u64) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        rng.set_stream(self.index as u64);
        rng.set_word_pos(u128::from(counter) * 2);
        rng.gen::<f64>()
    }
}

/// The rule producing the incidence matrix `A(x)` from an environment state.
pub trait IncidenceRule: Send + Sync + fmt::Debug {
    fn allows(&self, state: EnvState, i: Symbol, j: Symbol) -> bool;

    /// `{j : A_ej = 1}` when the rule can bound it, `None` otherwise.
    fn successors(&self, state: EnvState, e: Symbol) -> Option<Vec<Symbol>>;

    /// `(|D_e|, min D_e, max D_e)`; rules with huge out-sets override this to
    /// avoid materializing them.
    fn successor_summary(&self, state: EnvState, e: Symbol) -> Option<(usize, Symbol, Symbol)> {
        let out = self.successors(state, e)?;
        let lo = out.iter().copied().min().unwrap_or(0);
        let hi = out.iter().copied().max().unwrap_or(0);
        Some((out.len(), lo, hi))
    }

    /// `{i <= upto : A_ij = 1}` in increasing order.
    fn predecessors(&self, state: EnvState, j: Symbol, upto: Symbol) -> Vec<Symbol> {
        (0..=upto).filter(|&i| self.allows(state, i, j)).collect()
    }

    /// Number of letters, for finite alphabets.
    fn alphabet_size(&self) -> Option<u64> {
        None
    }
}

#[derive(Clone)]
pub struct EnvironmentModel {
    pub kind: EnvironmentKind,
    pub rule: Arc<dyn IncidenceRule>,
    pub description: String,
}

impl fmt::Debug for EnvironmentModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EnvironmentModel")
            .field("kind", &self.kind)
            .field("description", &self.description)
            .finish()
    }
}

impl EnvironmentModel {
    pub fn new(kind: EnvironmentKind, rule: Arc<dyn IncidenceRule>, description: impl Into<String>) -> Result<Self> {
        if let EnvironmentKind::Periodic { period: 0 } = kind {
            return Err(Error::InvalidParameter("period must be at least 1".into()));
        }
        Ok(Self {
            kind,
            rule,
            description: description.into(),
        })
    }

    pub fn state(&self, x: FiberPoint) -> EnvState {
        match self.kind {
            EnvironmentKind::Deterministic => EnvState::CONSTANT,
            EnvironmentKind::Periodic { period } => EnvState {
                seed: x.base_seed,
                index: x.time.rem_euclid(i64::from(period)),
            },
            EnvironmentKind::IidSeeded => EnvState {
                seed: x.base_seed,
                index: x.time,
            },
        }
    }

    pub fn matrix_at(&self, x: FiberPoint) -> IncidenceSlice<'_> {
        IncidenceSlice {
            rule: self.rule.as_ref(),
            state: self.state(x),
        }
    }

    /// Whether results may differ between fibers with different base seeds.
    pub fn is_random(&self) -> bool {
        !matches!(self.kind, EnvironmentKind::Deterministic)
    }
}

/// `A(x)` for one fiber.
#[derive(Clone, Copy)]
pub struct IncidenceSlice<'a> {
    rule: &'a dyn IncidenceRule,
    pub state: EnvState,
}

impl IncidenceSlice<'_> {
    pub fn allows(&self, i: Symbol, j: Symbol) -> bool {
        self.rule.allows(self.state, i, j)
    }

    pub fn out_set(&self, e: Symbol) -> Result<Vec<Symbol>> {
        self.rule.successors(self.state, e).ok_or(Error::NotFiniteRange {
            letter: e,
            bound: Symbol::MAX,
        })
    }

    pub fn out_summary(&self, e: Symbol) -> Result<(usize, Symbol, Symbol)> {
        self.rule.successor_summary(self.state, e).ok_or(Error::NotFiniteRange {
            letter: e,
            bound: Symbol::MAX,
        })
    }

    pub fn predecessors(&self, j: Symbol, upto: Symbol) -> Vec<Symbol> {
        self.rule.predecessors(self.state, j, upto)
    }
}

/// `count` fibers at time 0 with distinct base seeds derived from
/// `master_seed` by counter; the i-th seed never depends on evaluation order.
pub fn sample_fibers(count: usize, master_seed: u64) -> Vec<FiberPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(0x5eed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(count);
    let mut counter: u128 = 0;
    while out.len() < count {
        rng.set_word_pos(counter * 2);
        counter += 1;
        let seed = rng.next_u64();
        if seen.insert(seed) {
            out.push(FiberPoint::new(seed, 0));
        }
    }
    out
}

/// Distinct environment states visited by `fibers` over the time window.
pub fn window_states(
    env: &EnvironmentModel,
    fibers: &[FiberPoint],
    window: std::ops::RangeInclusive<i64>,
) -> Vec<EnvState> {
    let mut set = BTreeSet::new();
    for x in fibers {
        for t in window.clone() {
            set.insert(env.state(x.advance(t)));
        }
    }
    set.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug)]
    struct Coin;

    impl IncidenceRule for Coin {
        fn allows(&self, state: EnvState, i: Symbol, j: Symbol) -> bool {
            i < 2 && j < 2 && (i + j < 2 || state.uniform(1, 0) < 0.5)
        }
        fn successors(&self, _: EnvState, e: Symbol) -> Option<Vec<Symbol>> {
            (e < 2).then(|| vec![0, 1])
        }
    }

    fn model(kind: EnvironmentKind) -> EnvironmentModel {
        EnvironmentModel::new(kind, Arc::new(Coin), "coin").unwrap()
    }

    #[test]
    fn advance_group_law() {
        let x = FiberPoint::new(9, 5);
        assert_eq!(x.advance(-5).time, 0);
        assert_eq!(FiberPoint::new(9, 0).advance(3).time, 3);
        assert_eq!(x.advance(2).advance(-2), x);
    }

    #[test]
    fn periodic_states_repeat() {
        let env = model(EnvironmentKind::Periodic { period: 3 });
        for x in sample_fibers(2, 17) {
            assert_eq!(env.state(x.advance(4)), env.state(x.advance(1)));
            assert_eq!(env.state(x.advance(-2)), env.state(x.advance(1)));
        }
    }

    #[test]
    fn deterministic_states_agree() {
        let env = model(EnvironmentKind::Deterministic);
        let fibers = sample_fibers(5, 3);
        let states: BTreeSet<_> = fibers
            .iter()
            .flat_map(|x| (-4..4).map(move |t| x.advance(t)))
            .map(|x| env.state(x))
            .collect();
        assert_eq!(states.len(), 1);
    }

    #[test]
    fn sampled_seeds_are_reproducible_and_distinct() {
        let a = sample_fibers(100, 42);
        let b = sample_fibers(100, 42);
        assert_eq!(a, b);
        let seeds: BTreeSet<_> = a.iter().map(|x| x.base_seed).collect();
        assert_eq!(seeds.len(), 100);
        assert!(a.iter().all(|x| x.time == 0));
        assert_ne!(sample_fibers(3, 43), a[..3]);
    }

    #[test]
    fn uniform_is_a_pure_function() {
        let s = EnvState { seed: 7, index: -3 };
        assert_eq!(s.uniform(2, 11).to_bits(), s.uniform(2, 11).to_bits());
        assert_ne!(s.uniform(2, 11), s.uniform(2, 12));
        assert_ne!(s.uniform(2, 11), EnvState { seed: 7, index: -2 }.uniform(2, 11));
        let u = s.uniform(0, 0);
        assert!((0.0..1.0).contains(&u));
    }

    #[test]
    fn zero_period_is_rejected() {
        assert!(EnvironmentModel::new(EnvironmentKind::Periodic { period: 0 }, Arc::new(Coin), "").is_err());
    }
}

/// Finite surrogate for essential sup/inf: sampled base seeds crossed with a
/// time window.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleSet {
    pub fibers: Vec<FiberPoint>,
    pub t_min: i64,
    pub t_max: i64,
}

impl SampleSet {
    pub fn new(fibers: Vec<FiberPoint>, t_min: i64, t_max: i64) -> Self {
        assert!(t_min <= t_max, "empty sample window");
        Self { fibers, t_min, t_max }
    }

    /// Sampled fibers for `env`: one fiber for deterministic environments,
    /// otherwise `count` seeded fibers.
    pub fn for_env(env: &EnvironmentModel, count: usize, master_seed: u64, t_min: i64, t_max: i64) -> Self {
        let count = if env.is_random() { count.max(1) } else { 1 };
        Self::new(sample_fibers(count, master_seed), t_min, t_max)
    }

    pub fn points(&self) -> impl Iterator<Item = FiberPoint> + '_ {
        self.fibers
            .iter()
            .flat_map(move |x| (self.t_min..=self.t_max).map(move |t| x.advance(t)))
    }

    pub fn count(&self) -> usize {
        self.fibers.len() * (self.t_max - self.t_min + 1) as usize
    }
}
