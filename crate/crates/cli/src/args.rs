use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use randshift::config::{EnvChoice, RunConfig};

use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "randshift",
    version,
    about = "Quenched transfer-operator engine for random subshifts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Audit mixing, finite range, bounded access, summability and (A)(B)(C).
    Check(RunArgs),
    /// Conformal measure ν and the normalizers λ.
    Conformal(RunArgs),
    /// Invariant density ρ and the invariant measure μ = ρν.
    Density(RunArgs),
    /// Spectral-gap rate fit.
    Gap(RunArgs),
    /// Decay of correlations.
    Correlations(RunArgs),
    /// Monte Carlo central limit check.
    Clt(RunArgs),
    /// Cone constants and the contraction certificate.
    Constants(RunArgs),
    /// List the built-in models.
    Models(OutArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EnvFlag {
    Default,
    Deterministic,
    Periodic,
    Iid,
}

impl From<EnvFlag> for EnvChoice {
    fn from(e: EnvFlag) -> Self {
        match e {
            EnvFlag::Default => EnvChoice::Default,
            EnvFlag::Deterministic => EnvChoice::Deterministic,
            EnvFlag::Periodic => EnvChoice::Periodic,
            EnvFlag::Iid => EnvChoice::Iid,
        }
    }
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// TOML run configuration; explicit flags take precedence over it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<String>,
    /// Model parameter as `key=value`; repeatable.
    #[arg(long = "param", value_name = "KEY=VALUE")]
    pub params: Vec<String>,
    /// Largest letter kept by the truncation.
    #[arg(long = "L")]
    pub max_symbol: Option<u64>,
    /// Cylinder depth of the word space.
    #[arg(long)]
    pub depth: Option<usize>,
    #[arg(long, value_enum)]
    pub env: Option<EnvFlag>,
    #[arg(long)]
    pub period: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub pullback: Option<usize>,
    #[arg(long)]
    pub nmax: Option<usize>,
    /// Sampled base fibers for random environments.
    #[arg(long)]
    pub fibers: Option<usize>,
    /// Monte Carlo paths.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Birkhoff-sum length for the CLT.
    #[arg(long = "n")]
    pub clt_n: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Run even when the audit does not certify the model.
    #[arg(long)]
    pub force: bool,
}

fn read_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl RunArgs {
    /// Built-in defaults, then the config file, then explicit flags.
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => read_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(m) = &self.model {
            if self.config.is_some() && *m != cfg.model {
                cfg.params.clear();
            }
            cfg.model = m.clone();
        }
        for kv in &self.params {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--param `{kv}` is not KEY=VALUE")))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("--param `{kv}`: value is not a number")))?;
            cfg.params.insert(k.trim().to_string(), v);
        }
        if let Some(l) = self.max_symbol {
            cfg.truncation.max_symbol = Some(l);
        }
        if let Some(d) = self.depth {
            cfg.truncation.depth = Some(d);
        }
        if let Some(e) = self.env {
            cfg.environment.kind = e.into();
        }
        if let Some(p) = self.period {
            cfg.environment.period = p;
        }
        if let Some(s) = self.seed {
            cfg.environment.seed = s;
        }
        macro_rules! set {
            ($($field:ident),*) => {$(if let Some(v) = self.$field { cfg.$field = v; })*};
        }
        set!(pullback, nmax, fibers, samples, clt_n, tolerance);
        cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}
