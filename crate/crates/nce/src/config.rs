//! Experiment configuration: a commentable TOML document with nested
//! sections, strict unknown-key rejection, and full default materialization
//! so the resolved config echoed into a run directory re-parses to the same
//! experiment.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::arch::{self, ArchDesc};
use crate::costmodel::{budget_from_arch, CostBudget};
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::optim::{Adam, Sgd};
use crate::pipeline::{PipelineConfig, SearchMode};
use crate::quantize::QuantConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub run: RunSection,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub search: SearchSection,
    #[serde(default)]
    pub quant: QuantConfig,
    #[serde(default)]
    pub budget: BudgetSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Architecture preset name (resnet8/20/32/56, vgg16) or a path to an
    /// architecture JSON file.
    pub arch: String,
    #[serde(default = "default_mode")]
    pub mode: SearchMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_threads")]
    pub threads: usize,
    #[serde(default)]
    pub out_dir: Option<String>,
}

fn default_mode() -> SearchMode {
    SearchMode::Nce
}

fn default_threads() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSection {
    pub warmup_epochs: usize,
    pub search_epochs: usize,
    pub retrain_epochs: usize,
    pub batch_size: usize,
    pub threshold: f32,
    pub sample_size: usize,
    pub n0: usize,
    pub cap: usize,
    pub gamma: f64,
    pub weight_lr: f32,
    pub weight_momentum: f32,
    pub weight_decay: f32,
    pub alpha_lr: f32,
}

impl Default for SearchSection {
    fn default() -> Self {
        // desk-scale schedule; the reference CIFAR schedule is 200 warm-up /
        // 600 search epochs with the same threshold and optimizers
        SearchSection {
            warmup_epochs: 5,
            search_epochs: 30,
            retrain_epochs: 60,
            batch_size: 32,
            threshold: 0.3,
            sample_size: 2,
            n0: 8,
            cap: 16,
            gamma: 1.0,
            weight_lr: 0.05,
            weight_momentum: 0.9,
            weight_decay: 5e-4,
            alpha_lr: 0.001,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BudgetSection {
    /// Absent targets resolve to the seed architecture's exact cost.
    pub flop_target: Option<f64>,
    pub param_target: Option<f64>,
    pub lambda_flop: f64,
    pub lambda_param: f64,
    pub tolerance_band: f64,
}

impl Default for BudgetSection {
    fn default() -> Self {
        BudgetSection {
            flop_target: None,
            param_target: None,
            lambda_flop: 2.0,
            lambda_param: 2.0,
            tolerance_band: 0.0,
        }
    }
}

impl ConfigFile {
    /// Structural validation that needs no architecture: threshold bounds,
    /// quantizer settings, dataset sanity.
    pub fn validate(&self) -> Result<()> {
        let s = &self.search;
        if s.n0 < 1 {
            return Err(Error::Config("search.n0 must be at least 1".into()));
        }
        let floor = 1.0 / s.n0 as f32;
        if s.threshold <= floor {
            return Err(Error::Config(format!(
                "search.threshold {} must exceed 1/n0 = {floor}",
                s.threshold
            )));
        }
        if s.threshold >= 1.0 {
            return Err(Error::Config("search.threshold must be below 1".into()));
        }
        self.quant.validate()?;
        self.dataset.validate()?;
        if self.budget.lambda_flop < 0.0 || self.budget.lambda_param < 0.0 {
            return Err(Error::Config("budget.lambda coefficients must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Parse and validate a config file. Errors name the offending key.
pub fn parse_config(path: &Path) -> Result<ConfigFile> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
    parse_config_str(&text)
}

pub fn parse_config_str(text: &str) -> Result<ConfigFile> {
    let file: ConfigFile =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
    file.validate()?;
    Ok(file)
}

/// Load the architecture named by the config: a preset name first, then a
/// file path.
pub fn load_arch(name_or_path: &str) -> Result<ArchDesc> {
    if let Some(a) = arch::preset(name_or_path) {
        return Ok(a);
    }
    let p = Path::new(name_or_path);
    if p.exists() {
        return ArchDesc::load(p);
    }
    Err(Error::Config(format!(
        "arch '{name_or_path}' is neither a preset ({}) nor an existing file",
        arch::PRESET_NAMES.join("/")
    )))
}

#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    /// The fully materialized document (all defaults and targets filled in).
    pub file: ConfigFile,
    pub arch: ArchDesc,
    pub pipeline: PipelineConfig,
}

/// Materialize defaults and budget targets into a resolved config.
pub fn resolve(mut file: ConfigFile) -> Result<ResolvedConfig> {
    file.validate()?;
    let arch = load_arch(&file.run.arch)?;
    if file.budget.flop_target.is_none() || file.budget.param_target.is_none() {
        let anchored = budget_from_arch(
            &arch,
            file.budget.lambda_flop,
            file.budget.lambda_param,
            file.budget.tolerance_band,
        )?;
        file.budget.flop_target.get_or_insert(anchored.flop_target);
        file.budget.param_target.get_or_insert(anchored.param_target);
    }
    let s = &file.search;
    let pipeline = PipelineConfig {
        mode: file.run.mode,
        warmup_epochs: s.warmup_epochs,
        search_epochs: s.search_epochs,
        retrain_epochs: s.retrain_epochs,
        batch_size: s.batch_size,
        threshold: s.threshold,
        sample_size: s.sample_size,
        n0: s.n0,
        cap: s.cap,
        gamma: s.gamma,
        quant: file.quant.clone(),
        budget: CostBudget {
            flop_target: file.budget.flop_target.unwrap(),
            param_target: file.budget.param_target.unwrap(),
            lambda_flop: file.budget.lambda_flop,
            lambda_param: file.budget.lambda_param,
            tolerance_band: file.budget.tolerance_band,
        },
        weight_opt: Sgd { lr: s.weight_lr, momentum: s.weight_momentum, weight_decay: s.weight_decay },
        alpha_opt: Adam { lr: s.alpha_lr, ..Adam::default() },
        seed: file.run.seed,
    };
    pipeline.validate()?;
    Ok(ResolvedConfig { file, arch, pipeline })
}

/// Serialize the resolved document for echoing into the run directory.
pub fn to_toml(file: &ConfigFile) -> Result<String> {
    toml::to_string_pretty(file).map_err(|e| Error::Format(format!("config encode: {e}")))
}
