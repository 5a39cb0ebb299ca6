use std::path::{Path, PathBuf};

use recproj::analytics::{ContinuationModel, SyntheticSpec, REFERENCE_FEE};
use recproj::calibration::CalibrationSettings;
use recproj::model::{DividendSpec, MarketEnv, ModelSpec};
use recproj::pricer::{Contract, LatticeConfig};
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MIN_LEVEL: u32 = 4;
pub const MAX_LEVEL: u32 = 14;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryRegime {
    #[default]
    Discrete,
    Yield,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundaryOpts {
    pub regime: BoundaryRegime,
    /// Decision dates for the yield regime.
    pub dates: Vec<f64>,
    pub dates_per_year: f64,
    /// Also trace the variance-matched Black-Scholes boundary.
    pub matched_bs: bool,
}

impl Default for BoundaryOpts {
    fn default() -> Self {
        BoundaryOpts {
            regime: BoundaryRegime::Discrete,
            dates: Vec::new(),
            dates_per_year: recproj::boundary::YIELD_DATES_PER_YEAR,
            matched_bs: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeOpts {
    pub events_file: Option<PathBuf>,
    /// Generate events instead of reading them.
    pub synthetic: Option<SyntheticSpec>,
    pub models: Vec<ContinuationModel>,
    pub fees: Vec<f64>,
}

impl Default for AnalyzeOpts {
    fn default() -> Self {
        AnalyzeOpts {
            events_file: None,
            synthetic: None,
            models: Vec::new(),
            fees: vec![0.0, REFERENCE_FEE],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchOpts {
    pub levels: Vec<u32>,
    pub tree_steps: Vec<usize>,
    pub lsm_paths: Vec<usize>,
    /// Reference price; by default the lattice two levels above the finest.
    pub reference: Option<f64>,
}

impl Default for BenchOpts {
    fn default() -> Self {
        BenchOpts {
            levels: vec![6, 7, 8, 9, 10],
            tree_steps: vec![100, 300, 1000],
            lsm_paths: vec![10_000, 50_000],
            reference: None,
        }
    }
}

/// One run's settings. Files named here are read relative to the working
/// directory and their contents replace the path before hashing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: Option<ModelSpec>,
    pub model_file: Option<PathBuf>,
    pub contract: Option<Contract>,
    pub contract_file: Option<PathBuf>,
    pub env: Option<MarketEnv>,
    pub spot: Option<f64>,
    pub lattice: LatticeConfig,
    /// Resolution levels for `converge`.
    pub levels: Vec<u32>,
    pub boundary: BoundaryOpts,
    pub calibration: CalibrationSettings,
    pub quotes_file: Option<PathBuf>,
    /// Starting point for `calibrate`; defaults to `model`.
    pub init: Option<ModelSpec>,
    pub analyze: AnalyzeOpts,
    pub bench: BenchOpts,
    pub seed: u64,
    pub threads: Option<usize>,
    pub output: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: None,
            model_file: None,
            contract: None,
            contract_file: None,
            env: None,
            spot: None,
            lattice: LatticeConfig::default(),
            levels: vec![6, 7, 8, 9],
            boundary: BoundaryOpts::default(),
            calibration: CalibrationSettings::default(),
            quotes_file: None,
            init: None,
            analyze: AnalyzeOpts::default(),
            bench: BenchOpts::default(),
            seed: 7,
            threads: None,
            output: None,
        }
    }
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<RunConfig, CliError> {
        match path {
            Some(p) => read_json(p),
            None => Ok(RunConfig::default()),
        }
    }

    /// Reads referenced model and contract files into the config.
    pub fn resolve_files(&mut self) -> Result<(), CliError> {
        if let Some(p) = self.model_file.take() {
            self.model = Some(read_json(&p)?);
        }
        if let Some(p) = self.contract_file.take() {
            self.contract = Some(read_json(&p)?);
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let check = |j: u32| {
            if (MIN_LEVEL..=MAX_LEVEL).contains(&j) {
                Ok(())
            } else {
                Err(CliError::Config(format!(
                    "resolution level {j} outside [{MIN_LEVEL}, {MAX_LEVEL}]"
                )))
            }
        };
        check(self.lattice.level)?;
        check(self.calibration.lattice.level)?;
        for &j in self.levels.iter().chain(&self.bench.levels) {
            check(j)?;
        }
        if self.threads == Some(0) {
            return Err(CliError::Config("thread count must be positive".into()));
        }
        for p in [&self.quotes_file, &self.analyze.events_file].into_iter().flatten() {
            if !p.exists() {
                return Err(CliError::Config(format!("{} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// SHA-256 of the resolved config, with the output location left out.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output = None;
        c.threads = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        format!("{:x}", Sha256::digest(bytes))
    }

    pub fn model(&self) -> Result<ModelSpec, CliError> {
        let m = self
            .model
            .ok_or_else(|| CliError::Config("config needs a model (model or model_file)".into()))?;
        m.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(m)
    }

    pub fn contract(&self) -> Result<Contract, CliError> {
        let c = self
            .contract
            .clone()
            .ok_or_else(|| CliError::Config("config needs a contract (contract or contract_file)".into()))?;
        c.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(c)
    }

    pub fn env(&self) -> Result<MarketEnv, CliError> {
        let e = self
            .env
            .clone()
            .ok_or_else(|| CliError::Config("config needs an env with the interest rate".into()))?;
        e.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(e)
    }

    pub fn spot(&self) -> Result<f64, CliError> {
        match self.spot {
            Some(s) if s > 0.0 && s.is_finite() => Ok(s),
            Some(s) => Err(CliError::Config(format!("spot must be positive, got {s}"))),
            None => Err(CliError::Config("config needs a spot".into())),
        }
    }

    pub fn drop_dividends(&mut self) {
        if let Some(e) = &mut self.env {
            e.dividend = DividendSpec::None;
        }
    }
}
