//! Design space, random-variable definitions and augmented-space sampling.
//!
//! In the augmented space the design vector `φ` is uniformly distributed on
//! the design box and the random vector `θ` is drawn from its definition
//! resolved at `φ`. Internally every random variable is represented by a
//! standard normal coordinate `u`, with `θ = mean(φ) + sd(φ)·u`; the pair
//! `(φ, u)` then has independent components, which is what the component-wise
//! Markov chain kernels in [`crate::reliability`] rely on.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::Cell;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpace {
    bounds: Vec<[f64; 2]>,
}

impl DesignSpace {
    pub fn new(bounds: Vec<[f64; 2]>) -> Result<Self> {
        if bounds.is_empty() {
            return Err(Error::Config(
                "design space needs at least one dimension".into(),
            ));
        }
        for (d, [lo, hi]) in bounds.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                return Err(Error::Config(format!(
                    "design.bounds[{d}]: need lo < hi, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(Self { bounds })
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn bounds(&self) -> &[[f64; 2]] {
        &self.bounds
    }

    pub fn lower(&self) -> Vec<f64> {
        self.bounds.iter().map(|b| b[0]).collect()
    }

    pub fn upper(&self) -> Vec<f64> {
        self.bounds.iter().map(|b| b[1]).collect()
    }

    pub fn width(&self, axis: usize) -> f64 {
        self.bounds[axis][1] - self.bounds[axis][0]
    }

    pub fn volume(&self) -> f64 {
        (0..self.dim()).map(|d| self.width(d)).product()
    }

    /// Closed-interval membership.
    pub fn contains(&self, phi: &[f64]) -> bool {
        phi.len() == self.dim()
            && phi
                .iter()
                .zip(&self.bounds)
                .all(|(x, [lo, hi])| *x >= *lo && *x <= *hi)
    }

    pub fn is_interior(&self, phi: &[f64]) -> bool {
        phi.len() == self.dim()
            && phi
                .iter()
                .zip(&self.bounds)
                .all(|(x, [lo, hi])| *x > *lo && *x < *hi)
    }

    pub fn cell(&self) -> Cell {
        Cell {
            lo: self.lower(),
            hi: self.upper(),
            closed_hi: vec![true; self.dim()],
        }
    }

    pub fn clamp(&self, phi: &mut [f64]) {
        for (x, [lo, hi]) in phi.iter_mut().zip(&self.bounds) {
            *x = x.clamp(*lo, *hi);
        }
    }

    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.bounds
            .iter()
            .map(|[lo, hi]| {
                let x = lo + (hi - lo) * rng.random::<f64>();
                x.min(*hi)
            })
            .collect()
    }
}

/// Uniform design prior: `1/volume` inside the (closed) box, zero outside.
pub fn design_prior_density(phi: &[f64], space: &DesignSpace) -> f64 {
    if space.contains(phi) {
        1.0 / space.volume()
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distribution {
    Normal,
}

/// Location parameter: a constant, or tied to a design coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeanParam {
    Constant(f64),
    Design { design: usize },
}

/// Scale parameter: a constant, or a coefficient of variation times a
/// design coordinate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SpreadParam {
    Constant(f64),
    Cov { cov: f64, design: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomVariableSpec {
    pub name: String,
    #[serde(default = "default_distribution")]
    pub distribution: Distribution,
    pub mean: MeanParam,
    pub std_dev: SpreadParam,
}

fn default_distribution() -> Distribution {
    Distribution::Normal
}

impl RandomVariableSpec {
    pub fn normal(name: &str, mean: MeanParam, std_dev: SpreadParam) -> Self {
        Self {
            name: name.to_string(),
            distribution: Distribution::Normal,
            mean,
            std_dev,
        }
    }

    /// `(mean, sd)` at design point `phi`.
    pub fn resolve(&self, phi: &[f64]) -> Result<(f64, f64)> {
        let coord = |i: usize| {
            phi.get(i).copied().ok_or_else(|| {
                Error::Config(format!(
                    "random variable `{}` references design coordinate {i} but the design has {} dimensions",
                    self.name,
                    phi.len()
                ))
            })
        };
        let mean = match self.mean {
            MeanParam::Constant(m) => m,
            MeanParam::Design { design } => coord(design)?,
        };
        let sd = match self.std_dev {
            SpreadParam::Constant(s) => s,
            SpreadParam::Cov { cov, design } => cov * coord(design)?,
        };
        if !(sd > 0.0 && sd.is_finite() && mean.is_finite()) {
            return Err(Error::Config(format!(
                "random variable `{}` has non-positive standard deviation {sd} at {phi:?}",
                self.name
            )));
        }
        Ok((mean, sd))
    }
}

/// Result of one limit-state evaluation. The system fails iff `margin >= 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub performance: f64,
    pub margin: f64,
}

impl Evaluation {
    pub fn failed(&self) -> bool {
        self.margin >= 0.0
    }
}

/// A pure limit-state function `(φ, θ) → performance, margin`.
pub trait LimitState: Send + Sync {
    fn design_dim(&self) -> usize;
    fn random_dim(&self) -> usize;
    fn evaluate(&self, phi: &[f64], theta: &[f64]) -> Result<Evaluation>;
    /// Closed-form FPF, where one exists.
    fn analytic_fpf(&self, _phi: &[f64]) -> Option<f64> {
        None
    }
}

/// A limit state plus a thread-safe evaluation counter.
pub struct LimitStateModel {
    inner: Arc<dyn LimitState>,
    count: AtomicU64,
}

impl std::fmt::Debug for LimitStateModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LimitStateModel")
            .field("evaluations", &self.evaluations())
            .finish()
    }
}

impl LimitStateModel {
    pub fn new(inner: Arc<dyn LimitState>) -> Self {
        Self {
            inner,
            count: AtomicU64::new(0),
        }
    }

    pub fn from_state<L: LimitState + 'static>(state: L) -> Self {
        Self::new(Arc::new(state))
    }

    /// Evaluates and counts. Calls rejected for invalid input are not counted.
    pub fn evaluate(&self, phi: &[f64], theta: &[f64]) -> Result<Evaluation> {
        let out = self.inner.evaluate(phi, theta)?;
        self.count.fetch_add(1, Ordering::Relaxed);
        Ok(out)
    }

    pub fn evaluations(&self) -> u64 {
        self.count.load(Ordering::Relaxed)
    }

    pub fn limit_state(&self) -> &dyn LimitState {
        self.inner.as_ref()
    }

    pub fn design_dim(&self) -> usize {
        self.inner.design_dim()
    }

    pub fn random_dim(&self) -> usize {
        self.inner.random_dim()
    }
}

/// One draw `[φ, θ]` of the augmented space with its evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedSample {
    pub phi: Vec<f64>,
    pub theta: Vec<f64>,
    /// Standard normal coordinates of `theta`.
    pub standard: Vec<f64>,
    pub performance: f64,
    pub margin: f64,
    pub failed: bool,
}

/// Design space plus random-variable definitions.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSpace {
    pub design: DesignSpace,
    pub specs: Vec<RandomVariableSpec>,
}

/// Invalid-geometry draws are resampled at most this many times.
const MAX_RESAMPLES: usize = 10_000;

impl AugmentedSpace {
    /// Checks that every definition resolves on the whole design box.
    /// Spreads are affine in one design coordinate, so the box corners in
    /// that coordinate suffice.
    pub fn new(design: DesignSpace, specs: Vec<RandomVariableSpec>) -> Result<Self> {
        for corner in [design.lower(), design.upper()] {
            for spec in &specs {
                spec.resolve(&corner)?;
            }
        }
        Ok(Self { design, specs })
    }

    pub fn design_dim(&self) -> usize {
        self.design.dim()
    }

    pub fn random_dim(&self) -> usize {
        self.specs.len()
    }

    pub fn check_model(&self, model: &LimitStateModel) -> Result<()> {
        if model.design_dim() != self.design_dim() || model.random_dim() != self.random_dim() {
            return Err(Error::Config(format!(
                "model expects {}+{} design/random variables, configuration defines {}+{}",
                model.design_dim(),
                model.random_dim(),
                self.design_dim(),
                self.random_dim()
            )));
        }
        Ok(())
    }

    /// `θ = mean(φ) + sd(φ)·u`.
    pub fn to_physical(&self, phi: &[f64], standard: &[f64]) -> Result<Vec<f64>> {
        self.specs
            .iter()
            .zip(standard)
            .map(|(spec, u)| spec.resolve(phi).map(|(m, s)| m + s * u))
            .collect()
    }

    pub fn draw_standard<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        (0..self.random_dim())
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect()
    }

    /// Evaluates the model at `(φ, u)`. `Ok(None)` signals an input outside
    /// the model's physical domain.
    pub fn evaluate_at(
        &self,
        model: &LimitStateModel,
        phi: Vec<f64>,
        standard: Vec<f64>,
    ) -> Result<Option<AugmentedSample>> {
        let theta = self.to_physical(&phi, &standard)?;
        match model.evaluate(&phi, &theta) {
            Ok(ev) => Ok(Some(AugmentedSample {
                phi,
                theta,
                standard,
                performance: ev.performance,
                margin: ev.margin,
                failed: ev.failed(),
            })),
            Err(Error::InvalidGeometry { .. }) => Ok(None),
            Err(e) => Err(e),
        }
    }

    /// Draws `θ` at a fixed design point, resampling physically invalid draws.
    pub fn sample_at<R: Rng + ?Sized>(
        &self,
        phi: &[f64],
        model: &LimitStateModel,
        rng: &mut R,
    ) -> Result<AugmentedSample> {
        for _ in 0..MAX_RESAMPLES {
            let u = self.draw_standard(rng);
            if let Some(s) = self.evaluate_at(model, phi.to_vec(), u)? {
                return Ok(s);
            }
        }
        Err(Error::Config(format!(
            "could not draw a physically valid sample at {phi:?}"
        )))
    }
}

/// One augmented draw: `φ` uniform on the design box, `θ` from the specs at
/// `φ`, one model evaluation.
pub fn sample_augmented<R: Rng + ?Sized>(
    space: &AugmentedSpace,
    model: &LimitStateModel,
    rng: &mut R,
) -> Result<AugmentedSample> {
    for _ in 0..MAX_RESAMPLES {
        let phi = space.design.sample_uniform(rng);
        let u = space.draw_standard(rng);
        if let Some(s) = space.evaluate_at(model, phi, u)? {
            return Ok(s);
        }
    }
    Err(Error::Config(
        "could not draw a physically valid augmented sample".into(),
    ))
}
