//! The iterative region chain and the FPF it defines.
//!
//! Level 0 estimates the failure-conditional design density `p(φ | F)` on
//! the whole design space `D₀` from pilot failure samples. Each level `k`
//! then splits its region by a density threshold into a high part `S_{k+1}`
//! and a low part `D_{k+1}` holding probability `P_k*` of `D_k`, repopulates
//! `D_{k+1}` with region-restricted Markov chains and re-estimates there.
//! With weights `P(D_k | F) = ∏_{j<k} P_j*`, the composite density at `φ` is
//! `p̂_{D_k}(φ | F) · P(D_k | F)` for the deepest `k` with `φ ∈ D_k`, and the
//! FPF follows from Bayes' theorem as `P_F(φ) = p(φ | F) · P(F) / p(φ)`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bsp::{bsp_estimate, BspSettings, DensityRecord, PiecewiseConstantDensity};
use crate::error::{Error, Result};
use crate::region::{Cell, RegionIndicator};
use crate::reliability::{
    direct_mcs, populate_region, subset_simulation, Adaptation, ChainParams, EstimateStatus,
    SubsetSettings,
};
use crate::rng::{Stage, StreamSplitter};
use crate::smooth::RegressionSurface;
use crate::stochastic::{
    design_prior_density, AugmentedSample, AugmentedSpace, DesignSpace, LimitStateModel,
};

/// Tolerance of the per-estimator normalization check.
pub const DENSITY_NORMALIZATION_TOL: f64 = 1e-12;
/// Tolerance of the composite normalization check.
pub const COMPOSITE_NORMALIZATION_TOL: f64 = 1e-10;
/// Largest FPF value tolerated at a pilot failure sample.
pub const FPF_BOUND_TOL: f64 = 1.05;

/// Density threshold for a requested low-region probability.
///
/// Leaves are sorted by ascending density and their masses accumulated until
/// the running mass reaches `ratio`; leaves tied with the last included one
/// are included too. Returns the density of the first excluded leaf and the
/// accumulated mass.
pub fn threshold_from_ratio(d: &PiecewiseConstantDensity, ratio: f64) -> Result<(f64, f64)> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Argument(format!(
            "probability ratio must lie in (0,1), got {ratio}"
        )));
    }
    let volumes = d.partition().volumes();
    let mut leaves: Vec<(f64, f64)> = d
        .densities()
        .iter()
        .zip(d.masses())
        .zip(&volumes)
        .filter(|(_, &v)| v > 0.0)
        .map(|((&p, &m), _)| (p, m))
        .collect();
    leaves.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut acc = 0.0;
    let mut i = 0;
    while i < leaves.len() && acc < ratio {
        let level = leaves[i].0;
        while i < leaves.len() && leaves[i].0 == level {
            acc += leaves[i].1;
            i += 1;
        }
    }
    match leaves.get(i) {
        Some(&(p_star, _)) => Ok((p_star, acc)),
        None => Err(Error::DegenerateThreshold(format!(
            "no leaf lies above the density level that holds probability {ratio}; the low region would be all of the current region"
        ))),
    }
}

/// Splits the region of `d` into `(S, D)`: leaf pieces with density at
/// least `p_star`, and the rest.
pub fn split_region(
    d: &PiecewiseConstantDensity,
    p_star: f64,
) -> Result<(RegionIndicator, RegionIndicator)> {
    let partition = d.partition();
    let region = partition.region();
    let mut high = Vec::new();
    let mut low = Vec::new();
    for (i, cell) in partition.leaf_cells().into_iter().enumerate() {
        let pieces = if region.is_whole() {
            vec![cell]
        } else {
            region.clip(&cell)
        };
        if pieces.is_empty() {
            continue;
        }
        if d.densities()[i] < p_star {
            low.extend(pieces);
        } else {
            high.extend(pieces);
        }
    }
    if low.is_empty() {
        return Err(Error::DegenerateThreshold(format!(
            "threshold {p_star:e} lies below every leaf density"
        )));
    }
    if high.is_empty() {
        return Err(Error::DegenerateThreshold(format!(
            "threshold {p_star:e} lies above every leaf density"
        )));
    }
    Ok((
        RegionIndicator::from_disjoint_cells(high),
        RegionIndicator::from_disjoint_cells(low),
    ))
}

/// `P(D_k | F)` from realized ratios: `[1, P₀*, P₀*P₁*, …]`.
pub fn level_weights(ratios: &[f64]) -> Vec<f64> {
    let mut w = Vec::with_capacity(ratios.len() + 1);
    w.push(1.0);
    for r in ratios {
        w.push(w.last().unwrap() * r);
    }
    w
}

/// `P_F = density · P(F) / p(φ)`.
pub fn scale_to_fpf(density: f64, p_f: f64, prior: f64) -> Result<f64> {
    if !(prior > 0.0) {
        return Err(Error::UndefinedQuery(Vec::new()));
    }
    Ok(density * p_f / prior)
}

#[derive(Debug, Clone)]
pub struct PartitionLevel {
    pub k: usize,
    /// `D_k`.
    pub region: RegionIndicator,
    /// `p̂_{D_k}(φ | F)`, normalized over `D_k`.
    pub density: PiecewiseConstantDensity,
    /// `P(D_k | F)`.
    pub weight: f64,
    pub requested_ratio: f64,
    /// `p_k*`.
    pub threshold: f64,
    /// `P_k*`, the estimated mass of `D_{k+1}` within `D_k`.
    pub realized_ratio: f64,
    /// Factor on `density` over `S_{k+1}` that gives that piece the mass
    /// `1 - P_k*`; 1 when the ratio is the density's own mass of `D_{k+1}`.
    pub high_scale: f64,
    /// `S_{k+1}`.
    pub high: RegionIndicator,
    /// `D_{k+1}`.
    pub low: RegionIndicator,
    /// Failure samples the estimate was built from (empty after reload).
    pub samples: Vec<AugmentedSample>,
}

impl PartitionLevel {
    /// Threshold expressed as a composite density value.
    pub fn composite_threshold(&self) -> f64 {
        self.threshold * self.weight
    }

    pub fn to_record(&self) -> PartitionLevelRecord {
        PartitionLevelRecord {
            k: self.k,
            weight: self.weight,
            requested_ratio: self.requested_ratio,
            threshold: self.threshold,
            realized_ratio: self.realized_ratio,
            high_scale: self.high_scale,
            n_samples: self.density.partition().total(),
            region: self.region.clone(),
            high: self.high.clone(),
            low: self.low.clone(),
            density: self.density.to_record(),
        }
    }

    pub fn from_record(rec: &PartitionLevelRecord) -> Result<Self> {
        Ok(Self {
            k: rec.k,
            region: rec.region.clone(),
            density: PiecewiseConstantDensity::from_record(&rec.density)?,
            weight: rec.weight,
            requested_ratio: rec.requested_ratio,
            threshold: rec.threshold,
            realized_ratio: rec.realized_ratio,
            high_scale: rec.high_scale,
            high: rec.high.clone(),
            low: rec.low.clone(),
            samples: Vec::new(),
        })
    }
}

/// Serialized form of a [`PartitionLevel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionLevelRecord {
    pub k: usize,
    pub weight: f64,
    pub requested_ratio: f64,
    pub threshold: f64,
    pub realized_ratio: f64,
    pub high_scale: f64,
    pub n_samples: usize,
    pub region: RegionIndicator,
    pub high: RegionIndicator,
    pub low: RegionIndicator,
    pub density: DensityRecord,
}

/// Serialized form of a [`RegionChainResult`] (samples are not kept).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRecord {
    pub design: DesignSpace,
    pub p_f: f64,
    pub levels: Vec<PartitionLevelRecord>,
}

#[derive(Debug, Clone)]
pub struct RegionChainResult {
    pub design: DesignSpace,
    /// Levels `k = 0 … n_it`.
    pub levels: Vec<PartitionLevel>,
    /// Pilot estimate of `P(F)`.
    pub p_f: f64,
}

impl RegionChainResult {
    pub fn to_record(&self) -> ChainRecord {
        ChainRecord {
            design: self.design.clone(),
            p_f: self.p_f,
            levels: self.levels.iter().map(|l| l.to_record()).collect(),
        }
    }

    pub fn from_record(rec: &ChainRecord) -> Result<Self> {
        let levels = rec
            .levels
            .iter()
            .map(PartitionLevel::from_record)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            design: rec.design.clone(),
            levels,
            p_f: rec.p_f,
        })
    }

    pub fn n_it(&self) -> usize {
        self.levels.len().saturating_sub(1)
    }

    pub fn weights(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.weight).collect()
    }

    /// `S₁ … S_{n_it+1}` followed by `D_{n_it+1}`.
    pub fn final_regions(&self) -> Vec<(String, &RegionIndicator)> {
        let mut out: Vec<_> = self
            .levels
            .iter()
            .map(|l| (format!("S{}", l.k + 1), &l.high))
            .collect();
        if let Some(last) = self.levels.last() {
            out.push((format!("D{}", last.k + 1), &last.low));
        }
        out
    }

    /// Index of the deepest level whose region contains `phi`.
    pub fn deepest_level(&self, phi: &[f64]) -> Option<usize> {
        if !self.design.contains(phi) {
            return None;
        }
        let mut k = None;
        for level in &self.levels {
            if level.region.is_whole() || level.region.contains(phi) {
                k = Some(level.k);
            } else {
                break;
            }
        }
        k
    }

    /// Composite failure-conditional density at `phi`; zero outside `D₀`.
    pub fn compose_density(&self, phi: &[f64]) -> f64 {
        match self.deepest_level(phi) {
            Some(k) => {
                let level = &self.levels[k];
                let scale = if k + 1 < self.levels.len() {
                    level.high_scale
                } else {
                    1.0
                };
                level.density.density_value(phi) * level.weight * scale
            }
            None => 0.0,
        }
    }

    /// Exact cell-sum integral of the composite density: each non-final
    /// level over its `S_{k+1}` plus the final level over its whole region.
    pub fn composite_integral(&self) -> f64 {
        let last = self.levels.len() - 1;
        self.levels
            .iter()
            .map(|level| {
                if level.k == last {
                    level.density.integral() * level.weight
                } else {
                    level.density.mass_within(&level.high) * level.weight * level.high_scale
                }
            })
            .sum()
    }

    /// Structural and normalization checks run on every pipeline result.
    pub fn check_invariants(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::internal("empty region chain"));
        }
        let ratios: Vec<f64> = self.levels.iter().map(|l| l.realized_ratio).collect();
        let weights = level_weights(&ratios);
        for (level, w) in self.levels.iter().zip(&weights) {
            if level.weight != *w {
                return Err(Error::internal(format!(
                    "level {} weight {} != product of ratios {}",
                    level.k, level.weight, w
                )));
            }
            if !(level.realized_ratio > 0.0 && level.realized_ratio < 1.0) {
                return Err(Error::internal(format!(
                    "level {} ratio {} outside (0,1)",
                    level.k, level.realized_ratio
                )));
            }
            if !(level.high_scale.is_finite() && level.high_scale > 0.0) {
                return Err(Error::internal(format!(
                    "level {} has scale {} on its kept region",
                    level.k, level.high_scale
                )));
            }
            let integral = level.density.integral();
            if (integral - 1.0).abs() > DENSITY_NORMALIZATION_TOL {
                return Err(Error::internal(format!(
                    "level {} density integrates to {integral}",
                    level.k
                )));
            }
            let rel = 1e-9;
            let region_volume = level.region.volume();
            let split_volume = level.high.volume() + level.low.volume();
            if (region_volume - split_volume).abs() > rel * region_volume
                || !level.high.is_subset_of(&level.region, rel)
                || !level.low.is_subset_of(&level.region, rel)
            {
                return Err(Error::internal(format!(
                    "level {} split does not tile its region",
                    level.k
                )));
            }
        }
        for pair in self.levels.windows(2) {
            if pair[1].region != pair[0].low {
                return Err(Error::internal(format!(
                    "level {} region is not the low region of level {}",
                    pair[1].k, pair[0].k
                )));
            }
            if !(pair[1].weight < pair[0].weight) {
                return Err(Error::internal("level weights are not strictly decreasing"));
            }
        }
        let integral = self.composite_integral();
        if (integral - 1.0).abs() > COMPOSITE_NORMALIZATION_TOL {
            return Err(Error::internal(format!(
                "composite density integrates to {integral}"
            )));
        }
        Ok(())
    }
}

/// `P_F(φ)` from the composite density, with an optional smoothed surface.
#[derive(Debug, Clone)]
pub struct FpfApproximation {
    pub chain: RegionChainResult,
    pub p_f: f64,
    /// Uniform design prior density `1 / |design box|`.
    pub prior_density: f64,
    pub surface: Option<RegressionSurface>,
}

impl FpfApproximation {
    pub fn new(chain: RegionChainResult) -> Self {
        let prior_density = 1.0 / chain.design.volume();
        let p_f = chain.p_f;
        Self {
            chain,
            p_f,
            prior_density,
            surface: None,
        }
    }

    pub fn design(&self) -> &DesignSpace {
        &self.chain.design
    }

    fn check_query(&self, phi: &[f64]) -> Result<f64> {
        let prior = design_prior_density(phi, &self.chain.design);
        if prior > 0.0 {
            Ok(prior)
        } else {
            Err(Error::UndefinedQuery(phi.to_vec()))
        }
    }

    /// FPF from the piecewise-constant composite density.
    pub fn piecewise(&self, phi: &[f64]) -> Result<f64> {
        let prior = self.check_query(phi)?;
        scale_to_fpf(self.chain.compose_density(phi), self.p_f, prior)
    }

    /// FPF from the smoothed surface.
    pub fn smoothed(&self, phi: &[f64]) -> Result<f64> {
        let surface = self
            .surface
            .as_ref()
            .ok_or_else(|| Error::Fit("no smoothed surface has been fitted".into()))?;
        surface.fpf(phi, self.p_f, &self.chain.design)
    }

    /// Smoothed FPF when a surface is present, piecewise otherwise.
    pub fn value(&self, phi: &[f64]) -> Result<f64> {
        if self.surface.is_some() {
            self.smoothed(phi)
        } else {
            self.piecewise(phi)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PilotEngine {
    Dmcs,
    Subset,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub pilot_engine: PilotEngine,
    /// Pilot sample count (direct Monte Carlo) or samples per level (subset simulation).
    pub pilot_samples: usize,
    pub subset_p0: f64,
    pub subset_max_levels: usize,
    /// Evaluations spent growing the pilot failures into a larger `D_0`
    /// population by MMH before the level-0 estimate; 0 disables it.
    pub pilot_population: usize,
    /// Evaluations available to each repopulation.
    pub iteration_budget: usize,
    /// Cap on all pipeline evaluations.
    pub total_budget: usize,
    /// Requested `P_k*` per level.
    pub ratio: f64,
    /// Smallest failure probability of interest.
    pub floor: f64,
    pub max_iterations: usize,
    pub burn_in: usize,
    /// Chains per repopulation; `None` uses `iteration_budget / (10 · burn_in)`.
    pub max_chains: Option<usize>,
    /// Choose each split on half of the level's samples and count `P_k*` on
    /// the other half. Counting on the samples that chose the split biases
    /// `P_k*` low, because leaves that happen to be under-sampled are the
    /// ones that land in `D_{k+1}`.
    pub ratio_holdout: bool,
    /// Target MMH acceptance rate for adapting the design proposal widths.
    pub target_acceptance: f64,
    /// Sequential chain groups used by the adaptation; 1 keeps the widths
    /// at one seed standard deviation.
    pub adapt_batches: usize,
    pub bsp: BspSettings,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pilot_engine: PilotEngine::Dmcs,
            pilot_samples: 6000,
            subset_p0: 0.1,
            subset_max_levels: 10,
            pilot_population: 6000,
            iteration_budget: 6000,
            total_budget: 40_000,
            ratio: 0.1,
            floor: 1e-4,
            max_iterations: 10,
            burn_in: 10,
            max_chains: None,
            ratio_holdout: false,
            target_acceptance: 0.44,
            adapt_batches: 6,
            bsp: BspSettings::default(),
        }
    }
}

impl PipelineConfig {
    pub fn chain_params(&self) -> ChainParams {
        let max_chains = self
            .max_chains
            .unwrap_or_else(|| (self.iteration_budget / (10 * self.burn_in.max(1))).max(1));
        let adapt = (self.adapt_batches > 1).then_some(Adaptation {
            target: self.target_acceptance,
            batches: self.adapt_batches,
        });
        ChainParams {
            burn_in: self.burn_in,
            max_chains,
            adapt,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.pilot_samples == 0 || self.iteration_budget == 0 || self.total_budget == 0 {
            return bad("budgets must be positive".into());
        }
        if !(self.ratio > 0.0 && self.ratio < 1.0) {
            return bad(format!("ratio must lie in (0,1), got {}", self.ratio));
        }
        if !(self.floor > 0.0 && self.floor < 1.0) {
            return bad(format!("floor must lie in (0,1), got {}", self.floor));
        }
        if self.pilot_samples + self.pilot_population > self.total_budget {
            return bad("pilot budget exceeds the total budget".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// The FPF at the current threshold fell below the floor.
    Floor,
    MaxIterations,
    Budget,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::Floor => "floor",
            StopReason::MaxIterations => "max_iterations",
            StopReason::Budget => "budget",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageCount {
    pub stage: String,
    pub evaluations: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PilotSummary {
    pub engine: PilotEngine,
    pub p_hat: f64,
    pub cov: f64,
    pub evaluations: u64,
    pub failures: usize,
    pub subset_thresholds: Vec<f64>,
}

/// Per-level diagnostics alongside the chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDiagnostics {
    pub k: usize,
    pub samples: usize,
    pub seeds: usize,
    pub chains: usize,
    pub acceptance_rate: f64,
    pub leaves: usize,
    pub log_score: f64,
    /// FPF value at the composite threshold of this level.
    pub threshold_fpf: f64,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub chain: RegionChainResult,
    pub pilot: PilotSummary,
    pub stages: Vec<StageCount>,
    pub diagnostics: Vec<LevelDiagnostics>,
    pub stop_reason: StopReason,
}

impl PipelineOutput {
    pub fn total_evaluations(&self) -> u64 {
        self.stages.iter().map(|s| s.evaluations).sum()
    }
}

/// A pipeline failure with whatever was completed before it.
#[derive(Debug)]
pub struct PipelineAbort {
    pub error: Error,
    pub levels: Vec<PartitionLevel>,
    pub pilot: Option<PilotSummary>,
    pub stages: Vec<StageCount>,
}

impl fmt::Display for PipelineAbort {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "pipeline aborted after {} completed level(s): {}",
            self.levels.len(),
            self.error
        )
    }
}

impl std::error::Error for PipelineAbort {}

struct Partial {
    levels: Vec<PartitionLevel>,
    pilot: Option<PilotSummary>,
    stages: Vec<StageCount>,
}

impl Partial {
    fn abort(self, error: Error) -> Box<PipelineAbort> {
        Box::new(PipelineAbort {
            error,
            levels: self.levels,
            pilot: self.pilot,
            stages: self.stages,
        })
    }
}

/// Estimates the density on `region` from `samples` and splits it.
#[allow(clippy::too_many_arguments)]
fn build_level(
    k: usize,
    region: RegionIndicator,
    samples: Vec<AugmentedSample>,
    weight: f64,
    design: &DesignSpace,
    cfg: &PipelineConfig,
    streams: &StreamSplitter,
) -> Result<PartitionLevel> {
    let points: Vec<Vec<f64>> = samples.iter().map(|s| s.phi.clone()).collect();
    let (domain, restrict): (Cell, Option<&RegionIndicator>) = if region.is_whole() {
        (design.cell(), None)
    } else {
        (
            region.bounding_box().ok_or(Error::NoSeedInRegion)?,
            Some(&region),
        )
    };
    let mut rng = streams.stream(Stage::Partition(k), 0);
    let density = bsp_estimate(&points, &domain, restrict, &cfg.bsp, &mut rng)?;
    let (threshold, realized_ratio, high, low) = if cfg.ratio_holdout {
        let (fit, held) = holdout_split(&points);
        let mut rng = streams.stream(Stage::Partition(k), 1);
        let split_density = bsp_estimate(&fit, &domain, restrict, &cfg.bsp, &mut rng)?;
        let (threshold, _) = threshold_from_ratio(&split_density, cfg.ratio)?;
        let (high, low) = split_region(&split_density, threshold)?;
        let inside = held.iter().filter(|p| low.contains(p)).count();
        if inside == 0 || inside == held.len() {
            return Err(Error::DegenerateThreshold(format!(
                "{inside} of {} held-out samples fall in the low region",
                held.len()
            )));
        }
        (threshold, inside as f64 / held.len() as f64, high, low)
    } else {
        let (threshold, ratio) = threshold_from_ratio(&density, cfg.ratio)?;
        let (high, low) = split_region(&density, threshold)?;
        (threshold, ratio, high, low)
    };
    let high_scale = kept_scale(&density, &high, realized_ratio)?;
    Ok(PartitionLevel {
        k,
        region,
        density,
        weight,
        requested_ratio: cfg.ratio,
        threshold,
        realized_ratio,
        high_scale,
        high,
        low,
        samples,
    })
}

/// Factor that gives `high` the mass `1 - ratio` under `density`.
fn kept_scale(
    density: &PiecewiseConstantDensity,
    high: &RegionIndicator,
    ratio: f64,
) -> Result<f64> {
    let mass = density.mass_within(high);
    if !(mass > 0.0) {
        return Err(Error::DegenerateThreshold(
            "the kept region has no probability under the level estimate".into(),
        ));
    }
    Ok((1.0 - ratio) / mass)
}

/// Deals samples into two halves by alternating contiguous blocks, so that
/// each half draws on every part of the population while consecutive chain
/// states mostly stay together.
fn holdout_split(points: &[Vec<f64>]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    const BLOCKS: usize = 16;
    let block = points.len().div_ceil(BLOCKS).max(1);
    let (mut fit, mut held) = (Vec::new(), Vec::new());
    for (b, chunk) in points.chunks(block).enumerate() {
        if b % 2 == 0 {
            fit.extend_from_slice(chunk)
        } else {
            held.extend_from_slice(chunk)
        }
    }
    (fit, held)
}

/// Pilot simulation, level-0 estimate and the threshold / repopulate /
/// re-estimate loop.
pub fn run_pipeline(
    model: &LimitStateModel,
    space: &AugmentedSpace,
    cfg: &PipelineConfig,
    streams: &StreamSplitter,
) -> std::result::Result<PipelineOutput, Box<PipelineAbort>> {
    let mut partial = Partial {
        levels: Vec::new(),
        pilot: None,
        stages: Vec::new(),
    };
    if let Err(e) = cfg.validate().and_then(|_| space.check_model(model)) {
        return Err(partial.abort(e));
    }
    let design = &space.design;
    let prior = 1.0 / design.volume();
    let start = model.evaluations();

    let mut rng = streams.stream(Stage::Pilot, 0);
    let subset = |rng: &mut _| {
        let settings = SubsetSettings {
            n_per_level: cfg.pilot_samples,
            p0: cfg.subset_p0,
            max_levels: cfg.subset_max_levels,
        };
        subset_simulation(model, space, settings, rng)
    };
    let pilot = match cfg.pilot_engine {
        PilotEngine::Dmcs => match direct_mcs(model, space, cfg.pilot_samples, &mut rng) {
            Ok(est) if est.status == EstimateStatus::NoFailures => subset(&mut rng),
            other => other,
        },
        PilotEngine::Subset => subset(&mut rng),
    };
    let pilot = match pilot {
        Ok(p) => p,
        Err(e) => return Err(partial.abort(e)),
    };
    let pilot_evals = model.evaluations() - start;
    partial.stages.push(StageCount {
        stage: "pilot".into(),
        evaluations: pilot_evals,
    });
    let summary = PilotSummary {
        engine: if pilot.thresholds.is_empty() && cfg.pilot_engine == PilotEngine::Dmcs {
            PilotEngine::Dmcs
        } else {
            PilotEngine::Subset
        },
        p_hat: pilot.p_hat,
        cov: pilot.cov,
        evaluations: pilot_evals,
        failures: pilot.failure_samples.len(),
        subset_thresholds: pilot.thresholds.clone(),
    };
    partial.pilot = Some(summary.clone());
    let p_f = pilot.p_hat;
    let pilot_failures: Vec<Vec<f64>> = pilot
        .failure_samples
        .iter()
        .map(|s| s.phi.clone())
        .collect();

    let fpf_at = |composite: f64| composite * p_f / prior;
    let mut diagnostics = Vec::new();
    let d0 = RegionIndicator::whole(design.cell());
    let chain_params = cfg.chain_params();
    let seeds0 = pilot.failure_samples.len();
    let (samples0, chains0, acceptance0) = if cfg.pilot_population > 0 {
        let n_chains = crate::reliability::chain_count(seeds0, &chain_params);
        let states = cfg
            .pilot_population
            .saturating_sub(n_chains * chain_params.burn_in);
        let before = model.evaluations();
        let population = populate_region(
            &pilot.failure_samples,
            &d0,
            model,
            space,
            seeds0 + states,
            &chain_params,
            streams,
            Stage::Populate(0),
        );
        partial.stages.push(StageCount {
            stage: "populate_0".into(),
            evaluations: model.evaluations() - before,
        });
        match population {
            Ok(p) => (p.samples, p.chains, p.acceptance_rate),
            Err(e) => return Err(partial.abort(e)),
        }
    } else {
        (pilot.failure_samples, 0, 0.0)
    };
    let n0 = samples0.len();
    let level0 = match build_level(0, d0, samples0, 1.0, design, cfg, streams) {
        Ok(l) => l,
        Err(e) => return Err(partial.abort(e)),
    };
    diagnostics.push(LevelDiagnostics {
        k: 0,
        samples: n0,
        seeds: seeds0,
        chains: chains0,
        acceptance_rate: acceptance0,
        leaves: level0.density.leaf_count(),
        log_score: level0.density.log_score(),
        threshold_fpf: fpf_at(level0.composite_threshold()),
    });
    partial.levels.push(level0);

    let stop_reason = loop {
        let last = partial.levels.last().unwrap();
        if fpf_at(last.composite_threshold()) < cfg.floor {
            break StopReason::Floor;
        }
        if last.k >= cfg.max_iterations {
            break StopReason::MaxIterations;
        }
        let used = model.evaluations() - start;
        if used + cfg.iteration_budget as u64 > cfg.total_budget as u64 {
            break StopReason::Budget;
        }
        let k = last.k + 1;
        let region = last.low.clone();
        let weight = last.weight * last.realized_ratio;
        let seeds = crate::reliability::seeds_in_region(&last.samples, &region).len();
        let n_chains = crate::reliability::chain_count(seeds, &chain_params);
        let states = cfg
            .iteration_budget
            .saturating_sub(n_chains * chain_params.burn_in);
        let before = model.evaluations();
        let population = populate_region(
            &last.samples,
            &region,
            model,
            space,
            seeds + states,
            &chain_params,
            streams,
            Stage::Populate(k),
        );
        let evaluations = model.evaluations() - before;
        partial.stages.push(StageCount {
            stage: format!("populate_{k}"),
            evaluations,
        });
        let population = match population {
            Ok(p) => p,
            Err(e) => return Err(partial.abort(e)),
        };
        let n = population.samples.len();
        let level = match build_level(k, region, population.samples, weight, design, cfg, streams) {
            Ok(l) => l,
            Err(e) => return Err(partial.abort(e)),
        };
        diagnostics.push(LevelDiagnostics {
            k,
            samples: n,
            seeds,
            chains: population.chains,
            acceptance_rate: population.acceptance_rate,
            leaves: level.density.leaf_count(),
            log_score: level.density.log_score(),
            threshold_fpf: fpf_at(level.composite_threshold()),
        });
        partial.levels.push(level);
    };

    let chain = RegionChainResult {
        design: design.clone(),
        levels: partial.levels,
        p_f,
    };
    let partial_stages = partial.stages;
    let fail = |e: Error, chain: RegionChainResult, stages: Vec<StageCount>| {
        Box::new(PipelineAbort {
            error: e,
            levels: chain.levels,
            pilot: Some(summary.clone()),
            stages,
        })
    };
    if let Err(e) = chain.check_invariants() {
        return Err(fail(e, chain, partial_stages));
    }
    let counted: u64 = partial_stages.iter().map(|s| s.evaluations).sum();
    if counted != model.evaluations() - start {
        return Err(fail(
            Error::internal("stage evaluation counts do not sum to the model counter"),
            chain,
            partial_stages,
        ));
    }
    for phi in &pilot_failures {
        let value = fpf_at(chain.compose_density(phi));
        if !(value > 0.0 && value <= FPF_BOUND_TOL) {
            let e = Error::internal(format!(
                "FPF {value} at pilot failure sample {phi:?} is outside (0, {FPF_BOUND_TOL}]"
            ));
            return Err(fail(e, chain, partial_stages));
        }
    }
    Ok(PipelineOutput {
        chain,
        pilot: summary,
        stages: partial_stages,
        diagnostics,
        stop_reason,
    })
}
