//! Scenario files: JSON documents describing a rate system, an optional
//! initial measure, a time grid and run parameters.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};

use recomb_core::coefficient_dynamics::{default_step, uniform_grid};
use recomb_core::partition_lattice::bell_number;
use recomb_core::{GroundSet, Measure, Partition, RateSystem, TypeSpace};
use serde::Deserialize;

use crate::CliError;

/// Default degeneracy tolerance, relative to `max(ϱ_Σ, 1)`.
pub const DEFAULT_DEGENERACY_TOL: f64 = 1e-9;
/// Default bound on `|closed form − integration|`.
pub const DEFAULT_CLOSED_VS_INTEGRATED: f64 = 1e-6;
/// Maximum number of sites accepted in a scenario.
pub const MAX_SITES: usize = 10;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub n: usize,
    #[serde(default)]
    pub alphabet_sizes: Option<AlphabetSizes>,
    #[serde(default)]
    pub rates: BTreeMap<String, f64>,
    #[serde(default)]
    pub two_block_only: bool,
    #[serde(default)]
    pub initial_measure: Option<String>,
    #[serde(default)]
    pub grid: Option<GridSpec>,
    #[serde(default)]
    pub step: Option<f64>,
    #[serde(default)]
    pub monte_carlo: Option<MonteCarloSpec>,
    #[serde(default)]
    pub tolerances: ToleranceSpec,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
pub enum AlphabetSizes {
    Uniform(usize),
    PerSite(Vec<usize>),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    #[serde(default)]
    pub start: f64,
    pub end: f64,
    pub points: usize,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonteCarloSpec {
    pub samples: u64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub time: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceSpec {
    pub degeneracy: Option<f64>,
    pub closed_vs_integrated: Option<f64>,
    pub monte_carlo_tv: Option<f64>,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub step: Option<f64>,
    pub samples: Option<u64>,
}

/// A validated scenario.
#[derive(Debug)]
pub struct Scenario {
    pub ground: GroundSet,
    pub rates: RateSystem,
    pub initial_measure: Option<Measure>,
    pub grid: Vec<f64>,
    pub step: f64,
    pub monte_carlo: Option<MonteCarloSpec>,
    pub degeneracy_tol: f64,
    pub closed_vs_integrated: f64,
    monte_carlo_tv: Option<f64>,
}

fn config<T>(msg: impl Into<String>) -> Result<T, CliError> {
    Err(CliError::Config(msg.into()))
}

fn check_tolerance(name: &str, v: Option<f64>, default: f64) -> Result<f64, CliError> {
    match v {
        None => Ok(default),
        Some(x) if x.is_finite() && x >= 0.0 => Ok(x),
        Some(x) => config(format!("tolerance `{name}` = {x} must be nonnegative")),
    }
}

impl Scenario {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let file = File::open(path)
            .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
        let raw: ScenarioFile = serde_json::from_reader(file)
            .map_err(|e| CliError::Config(format!("invalid scenario {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_file(raw, &base, overrides)
    }

    pub fn from_file(raw: ScenarioFile, base: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        if raw.n == 0 || raw.n > MAX_SITES {
            return config(format!("n = {} must lie in 1..={MAX_SITES}", raw.n));
        }
        let ground = GroundSet::range(raw.n).map_err(|e| CliError::Config(e.to_string()))?;

        let mut entries = Vec::with_capacity(raw.rates.len());
        for (key, &rate) in &raw.rates {
            let p = Partition::parse(key, ground)
                .map_err(|e| CliError::Config(format!("rate key `{key}`: {e}")))?;
            if raw.two_block_only && p.block_count() != 2 {
                return config(format!("rate key `{key}` is not a two-block partition"));
            }
            if !(rate.is_finite() && rate >= 0.0) {
                return config(format!("rate for `{key}` = {rate} must be nonnegative"));
            }
            entries.push((p, rate));
        }
        let rates = RateSystem::new(ground, entries).map_err(|e| CliError::Config(e.to_string()))?;

        let sizes = match raw.alphabet_sizes {
            None => vec![2; raw.n],
            Some(AlphabetSizes::Uniform(k)) => vec![k; raw.n],
            Some(AlphabetSizes::PerSite(v)) => v,
        };
        let space = TypeSpace::new(ground, sizes).map_err(|e| CliError::Config(e.to_string()))?;
        let initial_measure = match &raw.initial_measure {
            None => None,
            Some(text) => Some(parse_measure(text, &space, base)?),
        };

        let grid = match raw.grid {
            None => uniform_grid(10.0, 11).expect("default grid is valid"),
            Some(g) => {
                if g.start != 0.0 {
                    return config(format!("grid must start at 0, not {}", g.start));
                }
                uniform_grid(g.end, g.points).map_err(|e| CliError::Config(e.to_string()))?
            }
        };

        let step = overrides.step.or(raw.step).unwrap_or_else(|| default_step(&rates));
        if !(step.is_finite() && step > 0.0) {
            return config(format!("step {step} must be positive"));
        }

        let mut monte_carlo = raw.monte_carlo;
        if monte_carlo.is_none() && overrides.samples.is_some() {
            monte_carlo = Some(MonteCarloSpec {
                samples: 0,
                seed: 0,
                time: None,
            });
        }
        if let Some(mc) = monte_carlo.as_mut() {
            if let Some(s) = overrides.samples {
                mc.samples = s;
            }
            if let Some(s) = overrides.seed {
                mc.seed = s;
            }
            if mc.samples == 0 {
                return config("monte_carlo.samples must be positive");
            }
            if let Some(t) = mc.time {
                if !(t.is_finite() && t >= 0.0) {
                    return config(format!("monte_carlo.time {t} must be nonnegative"));
                }
            }
        }

        let tol = &raw.tolerances;
        Ok(Self {
            ground,
            rates,
            initial_measure,
            grid,
            step,
            monte_carlo,
            degeneracy_tol: check_tolerance("degeneracy", tol.degeneracy, DEFAULT_DEGENERACY_TOL)?,
            closed_vs_integrated: check_tolerance(
                "closed_vs_integrated",
                tol.closed_vs_integrated,
                DEFAULT_CLOSED_VS_INTEGRATED,
            )?,
            monte_carlo_tv: match tol.monte_carlo_tv {
                None => None,
                Some(x) => Some(check_tolerance("monte_carlo_tv", Some(x), 0.0)?),
            },
        })
    }

    /// Total-variation gate for `samples` replicates: the configured value,
    /// or `max(0.01, 5·√(B(n)/N))`.
    pub fn monte_carlo_tv(&self, samples: u64) -> f64 {
        self.monte_carlo_tv.unwrap_or_else(|| {
            let bell = bell_number(self.ground.cardinality()) as f64;
            (5.0 * (bell / samples as f64).sqrt()).max(0.01)
        })
    }
}

/// `uniform`, `product:w11,w12;w21,w22;...` (one weight list per site) or
/// `file:<path>` (measure CSV, relative to the scenario file).
fn parse_measure(text: &str, space: &TypeSpace, base: &Path) -> Result<Measure, CliError> {
    let text = text.trim();
    if text == "uniform" {
        return Ok(Measure::uniform(space.clone()));
    }
    if let Some(rest) = text.strip_prefix("product:") {
        let mut factors = Vec::new();
        for site in rest.split(';') {
            let weights = site
                .split(',')
                .map(|w| {
                    w.trim()
                        .parse::<f64>()
                        .map_err(|e| CliError::Config(format!("bad weight `{w}`: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            factors.push(weights);
        }
        return Measure::product(space.clone(), &factors).map_err(|e| CliError::Config(e.to_string()));
    }
    if let Some(rest) = text.strip_prefix("file:") {
        let mut path = PathBuf::from(rest.trim());
        if path.is_relative() {
            path = base.join(path);
        }
        let file = File::open(&path)
            .map_err(|e| CliError::Config(format!("cannot open {}: {e}", path.display())))?;
        return Measure::read_csv(file, Some(space)).map_err(|e| CliError::Config(e.to_string()));
    }
    config(format!("unknown initial measure `{text}`"))
}
