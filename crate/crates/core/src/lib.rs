//! Quenched transfer-operator engine for random subshifts of finite type over
//! countable alphabets.
//!
//! The engine works on truncated word spaces (letters `0..=L`, cylinders of
//! depth `d`) along orbits of a reproducible environment, and carries a
//! rigorous ledger of everything the truncation drops.

// guards like `!(x > 0.0)` deliberately reject NaN as well
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod audit;
pub mod cone;
pub mod config;
pub mod conformal;
pub mod density;
pub mod environment;
pub mod error;
pub mod models;
pub mod operator;
pub mod potential;
pub mod shift;
pub mod stochastics;

pub use environment::{EnvState, EnvironmentKind, EnvironmentModel, FiberPoint, IncidenceRule};
pub use error::{Error, Result};
pub use models::ModelSpec;
pub use operator::{DepthFunction, Engine};
pub use shift::{Symbol, SymbolCodec, TruncationParams};
