//! Deterministic design optimization with a reliability constraint.
//!
//! `minimize f(φ) subject to P_F(φ) ≤ [P_F]` over the design box, solved by
//! multistart Nelder–Mead. Vertices are ranked by a feasibility filter:
//! feasible points by objective, infeasible points after all feasible ones by
//! their log-violation `log10(P_F / [P_F])`. Nelder–Mead only compares
//! vertex values, so this ordering acts as an exact penalty with unbounded
//! weight. Vertices are projected onto the box.

use std::cmp::Ordering;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fpf::FpfApproximation;
use crate::rng::{Stage, StreamSplitter};
use crate::stochastic::DesignSpace;
use crate::{Error, Result};

/// Relative slack on the constraint: feasible iff `P_F ≤ [P_F]·(1 + 1e-6)`.
pub const CONSTRAINT_SLACK: f64 = 1e-6;

pub type DesignFn = Arc<dyn Fn(&[f64]) -> Result<f64> + Send + Sync>;

#[derive(Clone)]
pub struct DesignProblem {
    pub objective: DesignFn,
    /// Failure probability `P_F(φ)`.
    pub constraint: DesignFn,
    pub allowable: f64,
    pub bounds: DesignSpace,
}

impl std::fmt::Debug for DesignProblem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DesignProblem")
            .field("allowable", &self.allowable)
            .field("bounds", &self.bounds)
            .finish()
    }
}

impl DesignProblem {
    pub fn new(
        objective: DesignFn,
        constraint: DesignFn,
        allowable: f64,
        bounds: DesignSpace,
    ) -> Result<Self> {
        if !(allowable > 0.0 && allowable < 1.0) {
            return Err(Error::Argument(format!(
                "allowable failure probability must lie in (0, 1), got {allowable}"
            )));
        }
        Ok(Self {
            objective,
            constraint,
            allowable,
            bounds,
        })
    }

    /// Uses the approximation's preferred FPF (smoothed when fitted) as the constraint.
    pub fn with_fpf(
        objective: DesignFn,
        fpf: Arc<FpfApproximation>,
        allowable: f64,
    ) -> Result<Self> {
        let bounds = fpf.design().clone();
        Self::new(
            objective,
            Arc::new(move |phi: &[f64]| fpf.value(phi)),
            allowable,
            bounds,
        )
    }

    fn assess(&self, phi: &[f64]) -> Result<Assessed> {
        let objective = (self.objective)(phi)?;
        let constraint = (self.constraint)(phi)?;
        if !objective.is_finite() || !(constraint >= 0.0) {
            return Err(Error::Argument(format!(
                "objective {objective} or constraint {constraint} is invalid at {phi:?}"
            )));
        }
        let violation = if constraint <= self.allowable * (1.0 + CONSTRAINT_SLACK) {
            0.0
        } else {
            (constraint / self.allowable).log10()
        };
        Ok(Assessed {
            phi: phi.to_vec(),
            objective,
            constraint,
            violation,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizeSettings {
    /// Grid starts per axis (`n^d` starts including the box corners).
    pub grid_per_axis: usize,
    pub random_starts: usize,
    pub max_iterations: usize,
    /// Stop when the simplex fits in this fraction of the box width.
    pub x_tolerance: f64,
    /// Initial simplex edge as a fraction of the box width.
    pub initial_step: f64,
}

impl Default for OptimizeSettings {
    fn default() -> Self {
        Self {
            grid_per_axis: 3,
            random_starts: 8,
            max_iterations: 500,
            x_tolerance: 1e-9,
            initial_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StartRecord {
    pub start: Vec<f64>,
    pub phi: Vec<f64>,
    pub objective: f64,
    pub constraint: f64,
    pub feasible: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimalDesign {
    pub allowable: f64,
    pub phi: Vec<f64>,
    pub objective: f64,
    pub constraint: f64,
    /// Constraint within 1% (in log10) of the allowable value.
    pub active: bool,
    /// One record per start, in start order.
    pub trace: Vec<StartRecord>,
}

#[derive(Debug, Clone)]
struct Assessed {
    phi: Vec<f64>,
    objective: f64,
    constraint: f64,
    violation: f64,
}

impl Assessed {
    fn feasible(&self) -> bool {
        self.violation == 0.0
    }

    fn min_by(self, other: &Self) -> Self {
        if other.rank(&self).is_lt() {
            other.clone()
        } else {
            self
        }
    }

    /// Filter order, ties broken lexicographically on φ.
    fn rank(&self, other: &Self) -> Ordering {
        let key = |a: &Self| {
            if a.feasible() {
                (0u8, a.objective)
            } else {
                (1u8, a.violation)
            }
        };
        let (ka, kb) = (key(self), key(other));
        ka.0.cmp(&kb.0).then(ka.1.total_cmp(&kb.1)).then_with(|| {
            self.phi
                .iter()
                .zip(&other.phi)
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(Ordering::Equal)
        })
    }
}

/// Hollow-box area `b̄h̄ − (b̄−2t)(h̄−2t)` at wall thickness `t`.
pub fn objective_mean_area(phi: &[f64], t: f64) -> Result<f64> {
    let [b, h] = phi else {
        return Err(Error::Argument(format!(
            "mean area needs [b, h], got {phi:?}"
        )));
    };
    if !(t >= 0.0 && *b > 2.0 * t && *h > 2.0 * t) {
        return Err(Error::Argument(format!(
            "wall collapse: b={b}, h={h}, t={t}"
        )));
    }
    Ok(b * h - (b - 2.0 * t) * (h - 2.0 * t))
}

/// Mean beam area at the reference mean thickness of 2 mm.
pub fn beam_area_objective() -> DesignFn {
    Arc::new(|phi: &[f64]| objective_mean_area(phi, 2.0))
}

fn start_points(
    bounds: &DesignSpace,
    settings: &OptimizeSettings,
    streams: &StreamSplitter,
) -> Vec<Vec<f64>> {
    let dim = bounds.dim();
    let n = settings.grid_per_axis;
    let mut starts = Vec::new();
    if n > 0 {
        for mut idx in 0..n.pow(dim as u32) {
            let mut phi = vec![0.0; dim];
            for (d, x) in phi.iter_mut().enumerate().rev() {
                let i = idx % n;
                idx /= n;
                let [lo, hi] = bounds.bounds()[d];
                *x = if n == 1 {
                    0.5 * (lo + hi)
                } else {
                    lo + (hi - lo) * i as f64 / (n - 1) as f64
                };
            }
            starts.push(phi);
        }
    }
    let mut rng = streams.stream(Stage::Optimize, 0);
    for _ in 0..settings.random_starts {
        starts.push(
            bounds
                .bounds()
                .iter()
                .map(|&[lo, hi]| rng.random_range(lo..=hi))
                .collect(),
        );
    }
    starts
}

fn nelder_mead(
    problem: &DesignProblem,
    start: &[f64],
    settings: &OptimizeSettings,
) -> Result<(Assessed, usize)> {
    let bounds = &problem.bounds;
    let dim = bounds.dim();
    let project = |mut x: Vec<f64>| {
        bounds.clamp(&mut x);
        x
    };
    let mut simplex = vec![problem.assess(start)?];
    for d in 0..dim {
        let [lo, hi] = bounds.bounds()[d];
        let step = settings.initial_step * (hi - lo);
        let mut x = start.to_vec();
        // step inward so a start on the boundary keeps a full-dimensional simplex
        x[d] = if x[d] + step <= hi {
            x[d] + step
        } else {
            x[d] - step
        };
        simplex.push(problem.assess(&project(x))?);
    }
    let widths: Vec<f64> = (0..dim).map(|d| bounds.width(d)).collect();
    let mut iterations = 0;
    while iterations < settings.max_iterations {
        simplex.sort_by(|a, b| a.rank(b));
        let spread = (0..dim)
            .map(|d| {
                let (lo, hi) = simplex
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v.phi[d]), hi.max(v.phi[d]))
                    });
                (hi - lo) / widths[d]
            })
            .fold(0.0, f64::max);
        if spread <= settings.x_tolerance {
            break;
        }
        iterations += 1;
        let centroid: Vec<f64> = (0..dim)
            .map(|d| simplex[..dim].iter().map(|v| v.phi[d]).sum::<f64>() / dim as f64)
            .collect();
        let worst = simplex[dim].clone();
        let along = |c: f64| {
            project(
                centroid
                    .iter()
                    .zip(&worst.phi)
                    .map(|(m, w)| m + c * (m - w))
                    .collect(),
            )
        };
        let reflected = problem.assess(&along(1.0))?;
        if reflected.rank(&simplex[0]).is_lt() {
            let expanded = problem.assess(&along(2.0))?;
            simplex[dim] = if expanded.rank(&reflected).is_lt() {
                expanded
            } else {
                reflected
            };
            continue;
        }
        if reflected.rank(&simplex[dim - 1]).is_lt() {
            simplex[dim] = reflected;
            continue;
        }
        let contracted = if reflected.rank(&worst).is_lt() {
            problem.assess(&along(0.5))?
        } else {
            problem.assess(&along(-0.5))?
        };
        if contracted.rank(&worst.clone().min_by(&reflected)).is_lt() {
            simplex[dim] = contracted;
            continue;
        }
        let best = simplex[0].phi.clone();
        for v in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = best
                .iter()
                .zip(&v.phi)
                .map(|(b, x)| b + 0.5 * (x - b))
                .collect();
            *v = problem.assess(&project(x))?;
        }
    }
    simplex.sort_by(|a, b| a.rank(b));
    Ok((simplex.swap_remove(0), iterations))
}

/// Best feasible design over all starts. Starts run in parallel and are
/// merged in start order, so the result depends only on the seed.
pub fn optimize(
    problem: &DesignProblem,
    settings: &OptimizeSettings,
    streams: &StreamSplitter,
) -> Result<OptimalDesign> {
    let starts = start_points(&problem.bounds, settings, streams);
    if starts.is_empty() {
        return Err(Error::Argument("optimizer needs at least one start".into()));
    }
    let results = starts
        .par_iter()
        .map(|s| nelder_mead(problem, s, settings).map(|(a, it)| (s.clone(), a, it)))
        .collect::<Result<Vec<_>>>()?;
    let best = results
        .iter()
        .map(|(_, a, _)| a)
        .min_by(|a, b| a.rank(b))
        .expect("non-empty");
    if !best.feasible() {
        return Err(Error::Infeasible {
            phi: best.phi.clone(),
            constraint: best.constraint,
        });
    }
    let trace = results
        .iter()
        .map(|(start, a, iterations)| StartRecord {
            start: start.clone(),
            phi: a.phi.clone(),
            objective: a.objective,
            constraint: a.constraint,
            feasible: a.feasible(),
            iterations: *iterations,
        })
        .collect();
    Ok(OptimalDesign {
        allowable: problem.allowable,
        phi: best.phi.clone(),
        objective: best.objective,
        constraint: best.constraint,
        active: best.constraint > 0.0 && (problem.allowable / best.constraint).log10() < 0.01,
        trace,
    })
}
