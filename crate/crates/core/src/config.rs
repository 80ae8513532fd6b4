//! Run configuration (TOML).
//!
//! Every section is optional except `model`; missing fields take their
//! defaults. [`RunConfig::resolve`] expands model-dependent defaults (design
//! bounds, random variables) so the resolved file is self-contained and
//! resolving it again changes nothing. Field names are documented in
//! `docs/config.md`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::benchmarks::{
    beam_design_space, beam_random_specs, toy_design_space, toy_random_specs, BoxBeamModel,
    ToyModel,
};
use crate::fpf::PipelineConfig;
use crate::optimize::{objective_mean_area, DesignFn, OptimizeSettings};
use crate::smooth::SmoothSettings;
use crate::stochastic::{
    AugmentedSpace, DesignSpace, LimitStateModel, MeanParam, RandomVariableSpec, SpreadParam,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ModelConfig {
    /// Fails iff `θ ≥ φ`; objective is `φ` itself.
    Toy {},
    /// Cantilever box beam; objective is the mean cross-section area.
    Beam {
        #[serde(default = "default_band")]
        band: [f64; 2],
        #[serde(default = "default_length")]
        length_mm: f64,
        /// Wall thickness used by the objective.
        #[serde(default = "default_thickness")]
        mean_thickness: f64,
    },
}

fn default_band() -> [f64; 2] {
    BoxBeamModel::default().band
}

fn default_length() -> f64 {
    BoxBeamModel::default().length_mm
}

fn default_thickness() -> f64 {
    2.0
}

/// Export grid for FPF values and gradients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExportSettings {
    pub grid_resolution: usize,
}

impl Default for ExportSettings {
    fn default() -> Self {
        Self {
            grid_resolution: 21,
        }
    }
}

/// Grid oracle and comparison settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSettings {
    pub resolution: usize,
    pub n_per_point: u64,
    /// Allowed `|log10(run / oracle)|`.
    pub tolerance: f64,
    /// Points with an oracle value below this are not scored.
    pub min_pf: f64,
    /// Fraction of scored points that must be within tolerance.
    pub pass_fraction: f64,
}

impl Default for OracleSettings {
    fn default() -> Self {
        Self {
            resolution: 21,
            n_per_point: 100_000,
            tolerance: 0.3,
            min_pf: 1e-4,
            pass_fraction: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    /// Design bounds; `None` takes the model's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<Vec<[f64; 2]>>,
    /// Random variables; `None` takes the model's.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random: Option<Vec<RandomVariableSpec>>,
    /// Allowable failure probabilities, one optimum each.
    #[serde(default = "default_allowable")]
    pub allowable: Vec<f64>,
    #[serde(default)]
    pub pipeline: PipelineConfig,
    #[serde(default)]
    pub smoother: SmoothSettings,
    #[serde(default)]
    pub optimizer: OptimizeSettings,
    #[serde(default)]
    pub export: ExportSettings,
    #[serde(default)]
    pub oracle: OracleSettings,
}

fn default_seed() -> u64 {
    1
}

fn default_allowable() -> Vec<f64> {
    vec![1e-2, 1e-3, 1e-4]
}

fn config_err(path: &str, msg: impl std::fmt::Display) -> Error {
    Error::Config(format!("{path}: {msg}"))
}

fn unit_open(path: &str, x: f64) -> Result<()> {
    if x > 0.0 && x < 1.0 {
        Ok(())
    } else {
        Err(config_err(path, format!("must lie in (0, 1), got {x}")))
    }
}

fn positive<T: PartialOrd + Default + std::fmt::Display>(path: &str, x: T) -> Result<()> {
    if x > T::default() {
        Ok(())
    } else {
        Err(config_err(path, format!("must be positive, got {x}")))
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn model_design(&self) -> Vec<[f64; 2]> {
        match self.model {
            ModelConfig::Toy {} => toy_design_space(),
            ModelConfig::Beam { .. } => beam_design_space(),
        }
        .bounds()
        .to_vec()
    }

    pub fn model_random(&self) -> Vec<RandomVariableSpec> {
        match self.model {
            ModelConfig::Toy {} => toy_random_specs(),
            ModelConfig::Beam { .. } => beam_random_specs(),
        }
    }

    /// Fills in model-dependent defaults. Idempotent.
    pub fn resolve(mut self) -> Self {
        if self.design.is_none() {
            self.design = Some(self.model_design());
        }
        if self.random.is_none() {
            self.random = Some(self.model_random());
        }
        self
    }

    /// Checks every field; errors name the offending field path.
    pub fn validate(&self) -> Result<()> {
        if let ModelConfig::Beam {
            band,
            length_mm,
            mean_thickness,
        } = &self.model
        {
            if !(band[0].is_finite() && band[1].is_finite() && 0.0 < band[0] && band[0] < band[1]) {
                return Err(config_err(
                    "model.band",
                    format!("need 0 < lo < hi, got {band:?}"),
                ));
            }
            positive("model.length_mm", *length_mm)?;
            positive("model.mean_thickness", *mean_thickness)?;
        }
        let design = self.design_space()?;
        let expected = self.model_design().len();
        if design.dim() != expected {
            return Err(config_err(
                "design",
                format!(
                    "model takes {expected} design variables, got {}",
                    design.dim()
                ),
            ));
        }
        let random = self.random.clone().unwrap_or_else(|| self.model_random());
        if random.len() != self.model_random().len() {
            return Err(config_err(
                "random",
                format!(
                    "model takes {} random variables, got {}",
                    self.model_random().len(),
                    random.len()
                ),
            ));
        }
        for (i, spec) in random.iter().enumerate() {
            let design_ref = |p: &str, d: usize| {
                if d >= design.dim() {
                    Err(config_err(
                        &format!("random[{i}].{p}.design"),
                        format!("index {d} out of range"),
                    ))
                } else {
                    Ok(())
                }
            };
            if let MeanParam::Design { design } = spec.mean {
                design_ref("mean", design)?;
            }
            match spec.std_dev {
                SpreadParam::Constant(s) => positive(&format!("random[{i}].std_dev"), s)?,
                SpreadParam::Cov { cov, design } => {
                    positive(&format!("random[{i}].std_dev.cov"), cov)?;
                    design_ref("std_dev", design)?;
                }
            }
        }
        if self.allowable.is_empty() {
            return Err(config_err("allowable", "needs at least one value"));
        }
        for (i, &a) in self.allowable.iter().enumerate() {
            unit_open(&format!("allowable[{i}]"), a)?;
        }
        let p = &self.pipeline;
        positive("pipeline.pilot_samples", p.pilot_samples)?;
        positive("pipeline.iteration_budget", p.iteration_budget)?;
        positive("pipeline.total_budget", p.total_budget)?;
        unit_open("pipeline.ratio", p.ratio)?;
        unit_open("pipeline.floor", p.floor)?;
        unit_open("pipeline.subset_p0", p.subset_p0)?;
        positive("pipeline.max_iterations", p.max_iterations)?;
        if p.pilot_samples + p.pilot_population > p.total_budget {
            return Err(config_err(
                "pipeline.total_budget",
                "smaller than pilot_samples + pilot_population",
            ));
        }
        unit_open("pipeline.target_acceptance", p.target_acceptance)?;
        positive("pipeline.adapt_batches", p.adapt_batches)?;
        if let Some(c) = p.max_chains {
            positive("pipeline.max_chains", c)?;
        }
        positive("pipeline.bsp.alpha", p.bsp.alpha)?;
        if let Some(b) = p.bsp.beta {
            if !(b >= 0.0) {
                return Err(config_err(
                    "pipeline.bsp.beta",
                    format!("must be non-negative, got {b}"),
                ));
            }
        }
        positive("pipeline.bsp.particles", p.bsp.particles)?;
        if p.bsp.max_leaves < 1 {
            return Err(config_err("pipeline.bsp.max_leaves", "must be at least 1"));
        }
        let s = &self.smoother;
        if let Some(ls) = &s.length_scales {
            if ls.len() != design.dim() {
                return Err(config_err(
                    "smoother.length_scales",
                    format!("need {} values, got {}", design.dim(), ls.len()),
                ));
            }
            for (i, &l) in ls.iter().enumerate() {
                positive(&format!("smoother.length_scales[{i}]"), l)?;
            }
        }
        positive("smoother.noise_floor", s.noise_floor)?;
        positive("smoother.grid_size", s.grid_size)?;
        positive("smoother.grid_min", s.grid_min)?;
        if !(s.grid_max >= s.grid_min) {
            return Err(config_err("smoother.grid_max", "must be at least grid_min"));
        }
        if s.nuggets.is_empty() || s.nuggets.iter().any(|n| !(*n >= 0.0 && n.is_finite())) {
            return Err(config_err(
                "smoother.nuggets",
                "need at least one finite non-negative value",
            ));
        }
        if !(s.min_support_fpf >= 0.0 && s.min_support_fpf < 1.0) {
            return Err(config_err(
                "smoother.min_support_fpf",
                format!("must lie in [0, 1), got {}", s.min_support_fpf),
            ));
        }
        let o = &self.optimizer;
        if o.grid_per_axis == 0 && o.random_starts == 0 {
            return Err(config_err(
                "optimizer",
                "needs grid_per_axis or random_starts > 0",
            ));
        }
        positive("optimizer.max_iterations", o.max_iterations)?;
        positive("optimizer.x_tolerance", o.x_tolerance)?;
        unit_open("optimizer.initial_step", o.initial_step)?;
        if self.export.grid_resolution < 2 {
            return Err(config_err("export.grid_resolution", "must be at least 2"));
        }
        let g = &self.oracle;
        if g.resolution < 2 {
            return Err(config_err("oracle.resolution", "must be at least 2"));
        }
        positive("oracle.n_per_point", g.n_per_point)?;
        positive("oracle.tolerance", g.tolerance)?;
        unit_open("oracle.min_pf", g.min_pf)?;
        if !(g.pass_fraction > 0.0 && g.pass_fraction <= 1.0) {
            return Err(config_err(
                "oracle.pass_fraction",
                format!("must lie in (0, 1], got {}", g.pass_fraction),
            ));
        }
        Ok(())
    }

    pub fn design_space(&self) -> Result<DesignSpace> {
        DesignSpace::new(self.design.clone().unwrap_or_else(|| self.model_design()))
    }

    pub fn limit_state(&self) -> LimitStateModel {
        match self.model {
            ModelConfig::Toy {} => LimitStateModel::from_state(ToyModel),
            ModelConfig::Beam {
                band, length_mm, ..
            } => LimitStateModel::from_state(BoxBeamModel {
                length_mm,
                ..BoxBeamModel::with_band(band)
            }),
        }
    }

    pub fn augmented_space(&self) -> Result<AugmentedSpace> {
        AugmentedSpace::new(
            self.design_space()?,
            self.random.clone().unwrap_or_else(|| self.model_random()),
        )
    }

    pub fn objective(&self) -> DesignFn {
        match self.model {
            ModelConfig::Toy {} => Arc::new(|phi: &[f64]| Ok(phi[0])),
            ModelConfig::Beam { mean_thickness, .. } => {
                Arc::new(move |phi: &[f64]| objective_mean_area(phi, mean_thickness))
            }
        }
    }
}
