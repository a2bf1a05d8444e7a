//! JSON run configuration shared by all subcommands.

use std::path::Path;

use mldfm::montecarlo::ExperimentConfig;
use mldfm::mse::{MseOptions, SubsampleConfig, ThresholdConfig, Variant};
use mldfm::panel::{DesignSpec, GroupStructure};
use mldfm::pc::Estimator;
use mldfm::sls::SlsOptions;
use serde::Deserialize;

use crate::failure::{CliResult, Failure};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub schema_version: u32,
    #[serde(rename = "T")]
    pub t: Option<usize>,
    pub group_sizes: Vec<usize>,
    pub r_g: usize,
    pub r_s: Vec<usize>,
    #[serde(default = "default_phi")]
    pub phi: f64,
    #[serde(default = "default_c")]
    pub c: f64,
    #[serde(default)]
    pub tau: f64,
    #[serde(default)]
    pub heteroscedastic: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(rename = "M")]
    pub m: Option<usize>,
    pub estimator: Option<Estimator>,
    pub delta: Option<f64>,
    #[serde(default)]
    pub cross_validate: bool,
    #[serde(default)]
    pub subsample: SubsampleConfig,
    pub variants: Option<Vec<Variant>>,
    #[serde(default)]
    pub sls: SlsOptions,
    pub histogram_bins: Option<usize>,
    pub histogram_periods: Option<Vec<usize>>,
    pub alpha: Option<f64>,
}

fn default_phi() -> f64 {
    0.5
}

fn default_c() -> f64 {
    0.25
}

fn default_seed() -> u64 {
    1
}

impl ConfigFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::input(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|f| Failure::input(format!("{}: {}", path.display(), f.message)))
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Failure::input(e.to_string()))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(Failure::input(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                cfg.schema_version
            )));
        }
        cfg.structure()?;
        Ok(cfg)
    }

    pub fn structure(&self) -> CliResult<GroupStructure> {
        Ok(GroupStructure::new(
            self.group_sizes.clone(),
            self.r_g,
            self.r_s.clone(),
        )?)
    }

    /// Estimator named on the command line, else in the file, else PC for a
    /// plain factor model and SLS otherwise.
    pub fn estimator(&self, flag: Option<Estimator>) -> CliResult<Estimator> {
        let structure = self.structure()?;
        Ok(flag.or(self.estimator).unwrap_or(if structure.is_pooled() {
            Estimator::Pc
        } else {
            Estimator::Sls
        }))
    }

    pub fn mse_options(&self) -> CliResult<MseOptions> {
        let threshold = match self.delta {
            Some(d) => ThresholdConfig::new(d)?,
            None => ThresholdConfig::default(),
        };
        Ok(MseOptions {
            threshold,
            cross_validate: self.cross_validate,
            subsample: self.subsample,
        })
    }

    fn periods(&self) -> CliResult<usize> {
        self.t
            .ok_or_else(|| Failure::input("missing key `T` (number of periods)"))
    }

    /// Experiment description; `seed` overrides the file's seed.
    pub fn experiment(&self, seed: Option<u64>, m: usize) -> CliResult<ExperimentConfig> {
        let mut cfg = ExperimentConfig::ml(self.structure()?, self.periods()?, m);
        cfg.phi = self.phi;
        cfg.c = self.c;
        cfg.tau = self.tau;
        cfg.heteroscedastic = self.heteroscedastic;
        cfg.estimator = self.estimator(None)?;
        cfg.mse = self.mse_options()?;
        if let Some(v) = &self.variants {
            cfg.variants = v.clone();
        }
        cfg.sls = self.sls.clone();
        if let Some(b) = self.histogram_bins {
            cfg.histogram_bins = b;
        }
        cfg.histogram_periods = self.histogram_periods.clone();
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        cfg.seed = seed.unwrap_or(self.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn design(&self, seed: Option<u64>) -> CliResult<DesignSpec> {
        let cfg = self.experiment(seed, 1)?;
        Ok(DesignSpec {
            structure: cfg.structure,
            t: cfg.t,
            phi: cfg.phi,
            c: cfg.c,
            tau: cfg.tau,
            heteroscedastic: cfg.heteroscedastic,
            seed: cfg.seed,
        })
    }
}
