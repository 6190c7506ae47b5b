//! Run configuration shared by every front end; serialized verbatim into
//! each artifact.

use serde::{Deserialize, Serialize};

use crate::environment::{EnvironmentKind, SampleSet};
use crate::error::{Error, Result};
use crate::models::{builtin, ModelSpec, Params};
use crate::shift::{Symbol, TruncationParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvChoice {
    /// Whatever the model declares.
    Default,
    Deterministic,
    Periodic,
    Iid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvironmentConfig {
    pub kind: EnvChoice,
    pub period: u32,
    pub seed: u64,
}

impl Default for EnvironmentConfig {
    fn default() -> Self {
        Self {
            kind: EnvChoice::Default,
            period: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruncationConfig {
    #[serde(rename = "L")]
    pub max_symbol: Option<Symbol>,
    pub depth: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: String,
    pub params: Params,
    pub truncation: TruncationConfig,
    pub environment: EnvironmentConfig,
    /// Pullback depth for `ν`, also the backward depth for `ρ`.
    pub pullback: usize,
    /// Horizon for gap, correlation and operator-bound tables.
    pub nmax: usize,
    /// Sampled base fibers for random environments.
    pub fibers: usize,
    /// Monte Carlo paths for the CLT.
    pub samples: usize,
    /// Birkhoff-sum length for the CLT.
    pub clt_n: usize,
    /// Convergence tolerance on consecutive conformal increments.
    pub tolerance: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: "golden_mean".into(),
            params: Params::new(),
            truncation: TruncationConfig {
                max_symbol: None,
                depth: None,
            },
            environment: EnvironmentConfig::default(),
            pullback: 40,
            nmax: 30,
            fibers: 4,
            samples: 10_000,
            clt_n: 1024,
            tolerance: 1e-9,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.pullback == 0 {
            return bad("pullback must be positive".into());
        }
        if self.nmax == 0 {
            return bad("nmax must be positive".into());
        }
        if self.fibers == 0 || self.samples < 2 || self.clt_n == 0 {
            return bad("fibers, samples and clt_n must be positive (samples >= 2)".into());
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return bad(format!("tolerance = {} must be positive", self.tolerance));
        }
        if self.environment.kind == EnvChoice::Periodic && self.environment.period == 0 {
            return bad("period must be positive".into());
        }
        Ok(())
    }

    /// The configured model with its environment override applied.
    pub fn model_spec(&self) -> Result<ModelSpec> {
        self.validate()?;
        let m = builtin(&self.model, &self.params)?;
        let kind = match self.environment.kind {
            EnvChoice::Default => return Ok(m),
            EnvChoice::Deterministic => EnvironmentKind::Deterministic,
            EnvChoice::Periodic => EnvironmentKind::Periodic {
                period: self.environment.period,
            },
            EnvChoice::Iid => EnvironmentKind::IidSeeded,
        };
        m.with_environment(kind)
    }

    pub fn truncation_for(&self, model: &ModelSpec) -> Result<TruncationParams> {
        let def = model.default_truncation;
        TruncationParams::new(
            self.truncation.max_symbol.unwrap_or(def.max_symbol),
            self.truncation.depth.unwrap_or(def.depth),
        )
    }

    /// Sampled fibers over `[0, t_max]`, seeded by the environment seed.
    pub fn samples_for(&self, model: &ModelSpec, t_max: i64) -> SampleSet {
        SampleSet::for_env(&model.environment, self.fibers, self.environment.seed, 0, t_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let c = RunConfig::default();
        let m = c.model_spec().unwrap();
        assert_eq!(c.truncation_for(&m).unwrap(), m.default_truncation);
    }

    #[test]
    fn environment_override() {
        let c = RunConfig {
            model: "random_eta".into(),
            environment: EnvironmentConfig {
                kind: EnvChoice::Periodic,
                period: 2,
                seed: 3,
            },
            ..RunConfig::default()
        };
        let m = c.model_spec().unwrap();
        assert_eq!(m.environment.kind, EnvironmentKind::Periodic { period: 2 });
        let c = RunConfig {
            pullback: 0,
            ..RunConfig::default()
        };
        assert!(c.model_spec().is_err());
    }

    #[test]
    fn json_round_trip() {
        let c = RunConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<RunConfig>(&s).unwrap(), c);
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
    }
}
