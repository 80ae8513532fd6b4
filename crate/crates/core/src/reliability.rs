//! Failure probability estimation and failure-sample generation.
//!
//! All engines work in the augmented space `(φ, u)`: uniform design
//! coordinates and standard normal coordinates for the random variables.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::RegionIndicator;
use crate::rng::{Stage, Stream, StreamSplitter};
use crate::stochastic::{sample_augmented, AugmentedSample, AugmentedSpace, LimitStateModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EstimateStatus {
    Converged,
    /// No failure observed; escalate to subset simulation.
    NoFailures,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FailureEstimate {
    pub p_hat: f64,
    pub n_evals: u64,
    pub failure_samples: Vec<AugmentedSample>,
    pub cov: f64,
    pub status: EstimateStatus,
    /// Intermediate subset-simulation thresholds (empty for direct Monte Carlo).
    pub thresholds: Vec<f64>,
}

pub fn direct_mcs<R: Rng + ?Sized>(
    model: &LimitStateModel,
    space: &AugmentedSpace,
    n: usize,
    rng: &mut R,
) -> Result<FailureEstimate> {
    if n == 0 {
        return Err(Error::Argument("direct Monte Carlo needs n >= 1".into()));
    }
    space.check_model(model)?;
    let start = model.evaluations();
    let mut failures = Vec::new();
    for _ in 0..n {
        let s = sample_augmented(space, model, rng)?;
        if s.failed {
            failures.push(s);
        }
    }
    let p = failures.len() as f64 / n as f64;
    let (cov, status) = if failures.is_empty() {
        (f64::INFINITY, EstimateStatus::NoFailures)
    } else {
        (
            ((1.0 - p) / (n as f64 * p)).sqrt(),
            EstimateStatus::Converged,
        )
    };
    Ok(FailureEstimate {
        p_hat: p,
        n_evals: model.evaluations() - start,
        failure_samples: failures,
        cov,
        status,
        thresholds: Vec::new(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubsetSettings {
    pub n_per_level: usize,
    pub p0: f64,
    pub max_levels: usize,
}

impl Default for SubsetSettings {
    fn default() -> Self {
        Self {
            n_per_level: 1000,
            p0: 0.1,
            max_levels: 10,
        }
    }
}

/// Subset simulation with intermediate thresholds on the limit-state margin.
///
/// Level 0 is direct sampling. At each level the `n·p0` samples with the
/// largest margins seed Markov chains of length `1/p0` that are conditioned
/// on exceeding the current threshold; the procedure ends once at least
/// `n·p0` samples fail.
pub fn subset_simulation<R: Rng + ?Sized>(
    model: &LimitStateModel,
    space: &AugmentedSpace,
    settings: SubsetSettings,
    rng: &mut R,
) -> Result<FailureEstimate> {
    let SubsetSettings {
        n_per_level: n,
        p0,
        max_levels,
    } = settings;
    if !(p0 > 0.0 && p0 < 1.0) {
        return Err(Error::Argument(format!(
            "subset level probability must be in (0,1), got {p0}"
        )));
    }
    let n_seeds_f = n as f64 * p0;
    let n_seeds = n_seeds_f.round() as usize;
    if (n_seeds_f - n_seeds as f64).abs() > 1e-9 || n_seeds < 2 {
        return Err(Error::Argument(format!(
            "n_per_level * p0 must be an integer >= 2, got {n_seeds_f}"
        )));
    }
    if n % n_seeds != 0 {
        return Err(Error::Argument(format!(
            "n_per_level must be a multiple of n_per_level * p0 ({n_seeds})"
        )));
    }
    space.check_model(model)?;
    let start = model.evaluations();
    let whole = RegionIndicator::whole(space.design.cell());

    let mut samples = (0..n)
        .map(|_| sample_augmented(space, model, rng))
        .collect::<Result<Vec<_>>>()?;
    let mut thresholds = Vec::new();
    let mut cov_sq = 0.0;
    for level in 0..=max_levels {
        let n_failed = samples.iter().filter(|s| s.failed).count();
        if n_failed >= n_seeds {
            let frac = n_failed as f64 / n as f64;
            cov_sq += (1.0 - frac) / (n as f64 * frac);
            let p_hat = p0.powi(level as i32) * frac;
            let failure_samples: Vec<_> = samples.into_iter().filter(|s| s.failed).collect();
            return Ok(FailureEstimate {
                p_hat,
                n_evals: model.evaluations() - start,
                failure_samples,
                cov: cov_sq.sqrt(),
                status: EstimateStatus::Converged,
                thresholds,
            });
        }
        if level == max_levels {
            break;
        }
        samples.sort_by(|a, b| b.margin.total_cmp(&a.margin));
        let threshold = samples[n_seeds - 1].margin;
        thresholds.push(threshold);
        cov_sq += (1.0 - p0) / (n as f64 * p0);
        let seeds: Vec<_> = samples.drain(..n_seeds).collect();
        let fallback: Vec<f64> = (0..space.design_dim())
            .map(|d| 0.1 * space.design.width(d))
            .collect();
        // unit-width steps in standard normal space mix better than seed spreads in the tail
        let mut scales = ProposalScales::from_seeds(&seeds, &fallback);
        scales.standard.iter_mut().for_each(|s| *s = 1.0);
        let chain_len = n / n_seeds;
        let mut next = Vec::with_capacity(n);
        for seed in seeds {
            let steps = chain_len - 1;
            let run = run_chain(
                &seed, &whole, threshold, model, space, &scales, 0, steps, rng,
            )?;
            next.push(seed);
            next.extend(run.states);
        }
        samples = next;
    }
    Err(Error::MaxLevelsExceeded {
        max_levels,
        thresholds,
    })
}

/// Per-coordinate half-widths of the uniform random-walk proposal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalScales {
    pub design: Vec<f64>,
    pub standard: Vec<f64>,
}

fn sample_std(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n < 2 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    (values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

impl ProposalScales {
    /// One sample standard deviation of the seeds per coordinate. Design
    /// coordinates without spread fall back to `fallback_design`, standard
    /// normal coordinates to 1.
    pub fn from_seeds(seeds: &[AugmentedSample], fallback_design: &[f64]) -> Self {
        let nd = fallback_design.len();
        let nr = seeds.first().map_or(0, |s| s.standard.len());
        let design = (0..nd)
            .map(|d| {
                let s = sample_std(seeds.iter().map(move |x| x.phi[d]));
                if s > 0.0 {
                    s
                } else {
                    fallback_design[d]
                }
            })
            .collect();
        let standard = (0..nr)
            .map(|d| {
                let s = sample_std(seeds.iter().map(move |x| x.standard[d]));
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { design, standard }
    }

    pub fn uniform(design: f64, standard: f64, space: &AugmentedSpace) -> Self {
        Self {
            design: vec![design; space.design_dim()],
            standard: vec![standard; space.random_dim()],
        }
    }
}

/// Metropolis acceptance for a log target ratio.
pub(crate) fn metropolis_accept<R: Rng + ?Sized>(log_ratio: f64, rng: &mut R) -> bool {
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainRun {
    pub states: Vec<AugmentedSample>,
    pub steps: usize,
    /// Steps whose candidate was accepted as the new state.
    pub moves: usize,
    pub evaluations: u64,
}

impl ChainRun {
    pub fn acceptance_rate(&self) -> f64 {
        if self.steps == 0 {
            return 0.0;
        }
        self.moves as f64 / self.steps as f64
    }

    /// True when the chain has effectively not moved: every coordinate's
    /// range over the emitted states is below `1e-6·(1 + |x|)`.
    pub fn is_stuck(&self) -> bool {
        let Some(first) = self.states.first() else {
            return true;
        };
        let coords =
            |s: &AugmentedSample| s.phi.iter().chain(&s.standard).copied().collect::<Vec<_>>();
        let base = coords(first);
        let mut lo = base.clone();
        let mut hi = base.clone();
        for s in &self.states[1..] {
            for (i, x) in coords(s).into_iter().enumerate() {
                lo[i] = lo[i].min(x);
                hi[i] = hi[i].max(x);
            }
        }
        lo.iter()
            .zip(&hi)
            .zip(&base)
            .all(|((l, h), b)| h - l < 1e-6 * (1.0 + b.abs()))
    }
}

/// Component-wise modified Metropolis–Hastings targeting
/// `p(φ, u | margin >= level, φ ∈ region)`.
///
/// Each coordinate is proposed by a uniform random walk and accepted against
/// its own marginal: the uniform design prior (a bounds check) or the standard
/// normal. The assembled candidate is then rejected, and the chain stays put,
/// if its design leaves the region or its margin is below `level`.
#[allow(clippy::too_many_arguments)]
fn run_chain<R: Rng + ?Sized>(
    seed: &AugmentedSample,
    region: &RegionIndicator,
    level: f64,
    model: &LimitStateModel,
    space: &AugmentedSpace,
    scales: &ProposalScales,
    burn_in: usize,
    n_steps: usize,
    rng: &mut R,
) -> Result<ChainRun> {
    let mut current = seed.clone();
    let mut states = Vec::with_capacity(n_steps);
    let mut moves = 0;
    let mut evaluations = 0;
    let bounds = space.design.bounds();
    for step in 0..burn_in + n_steps {
        let mut phi = current.phi.clone();
        let mut u = current.standard.clone();
        let mut changed = false;
        for (d, x) in phi.iter_mut().enumerate() {
            let cand = *x + scales.design[d] * (2.0 * rng.random::<f64>() - 1.0);
            if cand >= bounds[d][0] && cand <= bounds[d][1] {
                changed |= cand != *x;
                *x = cand;
            }
        }
        for (d, x) in u.iter_mut().enumerate() {
            let cand = *x + scales.standard[d] * (2.0 * rng.random::<f64>() - 1.0);
            if metropolis_accept(0.5 * (*x * *x - cand * cand), rng) {
                changed |= cand != *x;
                *x = cand;
            }
        }
        if changed && region.contains(&phi) {
            if let Some(cand) = space.evaluate_at(model, phi, u)? {
                evaluations += 1;
                if cand.margin >= level {
                    current = cand;
                    if step >= burn_in {
                        moves += 1;
                    }
                }
            }
        }
        if step >= burn_in {
            states.push(current.clone());
        }
    }
    Ok(ChainRun {
        states,
        steps: n_steps,
        moves,
        evaluations,
    })
}

/// Markov chain of failure samples whose designs stay in `region`.
#[allow(clippy::too_many_arguments)]
pub fn mmh_chain<R: Rng + ?Sized>(
    seed: &AugmentedSample,
    region: &RegionIndicator,
    model: &LimitStateModel,
    space: &AugmentedSpace,
    scales: &ProposalScales,
    n_steps: usize,
    rng: &mut R,
) -> Result<ChainRun> {
    if !seed.failed || !region.contains(&seed.phi) {
        return Err(Error::Argument(
            "chain seed must be a failure sample inside the region".into(),
        ));
    }
    run_chain(seed, region, 0.0, model, space, scales, 0, n_steps, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    pub burn_in: usize,
    pub max_chains: usize,
    pub adapt: Option<Adaptation>,
}

impl Default for ChainParams {
    fn default() -> Self {
        Self {
            burn_in: 10,
            max_chains: usize::MAX,
            adapt: None,
        }
    }
}

/// Batch adaptation of the design proposal widths toward a target
/// acceptance rate: chains run in `batches` sequential groups, and after
/// group `g` the width factor is multiplied by `exp((a_g - target) / √(g+1))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adaptation {
    pub target: f64,
    pub batches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub samples: Vec<AugmentedSample>,
    pub evaluations: u64,
    pub chains: usize,
    pub acceptance_rate: f64,
    pub scales: Option<ProposalScales>,
}

/// Failure samples of `prev` whose designs lie in `region`.
pub fn seeds_in_region(prev: &[AugmentedSample], region: &RegionIndicator) -> Vec<AugmentedSample> {
    prev.iter()
        .filter(|s| s.failed && region.contains(&s.phi))
        .cloned()
        .collect()
}

/// Number of chains `populate_region` runs for a given seed count.
pub fn chain_count(n_seeds: usize, params: &ChainParams) -> usize {
    n_seeds.min(params.max_chains).max(1)
}

/// Grows the in-region failure samples of `prev` to at least `n_target`.
///
/// Chains start from seeds spread evenly over the in-region seed list, run
/// `burn_in` discarded steps each, and then share the remaining states
/// round-robin. Chain `c` draws from stream `(stage, c)` and results are
/// concatenated in chain order, so output does not depend on scheduling.
/// With [`Adaptation`], chain groups run one after another and each group's
/// acceptance rate rescales the design widths of the next.
#[allow(clippy::too_many_arguments)]
pub fn populate_region(
    prev: &[AugmentedSample],
    region: &RegionIndicator,
    model: &LimitStateModel,
    space: &AugmentedSpace,
    n_target: usize,
    params: &ChainParams,
    streams: &StreamSplitter,
    stage: Stage,
) -> Result<Population> {
    let seeds = seeds_in_region(prev, region);
    if seeds.is_empty() {
        return Err(Error::NoSeedInRegion);
    }
    if seeds.len() >= n_target {
        return Ok(Population {
            samples: seeds,
            evaluations: 0,
            chains: 0,
            acceptance_rate: 0.0,
            scales: None,
        });
    }
    let bbox = region.bounding_box().ok_or(Error::NoSeedInRegion)?;
    let fallback: Vec<f64> = (0..bbox.dim()).map(|d| 0.1 * bbox.width(d)).collect();
    let base = ProposalScales::from_seeds(&seeds, &fallback);
    let needed = n_target - seeds.len();
    let n_chains = chain_count(seeds.len(), params);
    let batches = params.adapt.map_or(1, |a| a.batches.clamp(1, n_chains));
    let start = model.evaluations();
    let mut factor = 1.0;
    let mut scales = base.clone();
    let mut runs = Vec::with_capacity(n_chains);
    for b in 0..batches {
        scales.design = base.design.iter().map(|s| s * factor).collect();
        let batch = (b * n_chains / batches..(b + 1) * n_chains / batches)
            .into_par_iter()
            .map(|c| {
                let seed = &seeds[c * seeds.len() / n_chains];
                let len = needed / n_chains + usize::from(c < needed % n_chains);
                let mut rng: Stream = streams.stream(stage, c as u64);
                run_chain(
                    seed,
                    region,
                    0.0,
                    model,
                    space,
                    &scales,
                    params.burn_in,
                    len,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(a) = params.adapt {
            let steps: usize = batch.iter().map(|r| r.steps).sum();
            if steps > 0 {
                let rate = batch.iter().map(|r| r.moves).sum::<usize>() as f64 / steps as f64;
                factor *= ((rate - a.target) / ((b + 1) as f64).sqrt()).exp();
            }
        }
        runs.extend(batch);
    }
    let evaluations = model.evaluations() - start;
    let counted: u64 = runs.iter().map(|r| r.evaluations).sum();
    if counted != evaluations {
        return Err(Error::internal(format!(
            "chain evaluation tally {counted} != model counter delta {evaluations}"
        )));
    }
    let steps: usize = runs.iter().map(|r| r.steps).sum();
    let moves: usize = runs.iter().map(|r| r.moves).sum();
    let mut samples = seeds;
    for run in runs {
        samples.extend(run.states);
    }
    if let Some(bad) = samples
        .iter()
        .find(|s| !s.failed || !region.contains(&s.phi))
    {
        return Err(Error::internal(format!(
            "populated sample violates the region/failure contract: {:?}",
            bad.phi
        )));
    }
    Ok(Population {
        samples,
        evaluations,
        chains: n_chains,
        acceptance_rate: if steps > 0 {
            moves as f64 / steps as f64
        } else {
            0.0
        },
        scales: Some(scales),
    })
}
