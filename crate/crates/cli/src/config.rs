use std::path::Path;

use serde::{Deserialize, Serialize};
use vsd_core::dataset::ToyConfig;
use vsd_core::denoiser::DenoiserConfig;
use vsd_core::diffusion::{make_schedule, NoiseSchedule, SamplerConfig, DEFAULT_EXPONENT, DEFAULT_OFFSET, DEFAULT_STEPS};
use vsd_core::rasterizer::SoftRasterConfig;
use vsd_core::seeds::derive_seed;
use vsd_core::strokeops::{InitConfig, SortConfig};
use vsd_core::training::{RefineConfig, TrainConfig};
use vsd_core::{Result, VsdError};

pub const RUN_CONFIG_FILE: &str = "run_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub exponent: f64,
    pub offset: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { steps: DEFAULT_STEPS, exponent: DEFAULT_EXPONENT, offset: DEFAULT_OFFSET }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        make_schedule(self.steps, self.exponent, self.offset)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataPaths {
    pub dataset: Option<String>,
    pub model: Option<String>,
    pub refiner: Option<String>,
}

/// Everything a subcommand may read. Stage seeds are derived from `seed`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: Option<usize>,
    pub data: DataPaths,
    pub toy: ToyConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub refine: RefineConfig,
    pub sampler: SamplerConfig,
    pub raster: SoftRasterConfig,
    pub init: InitConfig,
    pub sort: SortConfig,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else { return Ok(RunConfig::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| VsdError::Invalid(format!("cannot read config {}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage, 0)
    }

    /// Overwrites every stage seed with its derivation from the root seed.
    pub fn derive_seeds(&mut self) {
        self.train.seed = self.stage_seed("train");
        self.refine.seed = self.stage_seed("refine");
        self.sampler.seed = self.stage_seed("sample");
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(dir.join(RUN_CONFIG_FILE), text)?;
        Ok(())
    }
}
