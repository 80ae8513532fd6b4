//! Smoothing of the composite density.
//!
//! Support points sit at the centers of the cells that carry the final
//! composite density. A regression surface `s(φ)` is fitted to their log
//! values: a quadratic trend by weighted least squares plus
//! squared-exponential kernel ridge regression on the residuals, in
//! coordinates normalized to the unit box. Each point carries its own noise
//! variance, the larger of the noise floor and the sampling variance of the
//! log leaf mass, so sparsely populated leaves pull less on the fit. A common
//! nugget is added on top and chosen with the length scales by leave-one-out
//! score, which absorbs the extra scatter of correlated chain samples.
//!
//! Cells whose FPF lies far below the stopping floor carry little more than
//! the prior mass of an empty leaf; [`select_support`] drops them before the
//! fit. The smoothed FPF is `min(1, exp(s(φ)) · P(F) / p(φ))`: positive by
//! construction, clipped where extrapolation toward the box edge would exceed
//! a probability, with an analytic gradient (zero where clipped).

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpf::RegionChainResult;
use crate::region::Cell;
use crate::stochastic::{design_prior_density, DesignSpace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportPoint {
    pub location: Vec<f64>,
    /// Composite density at the location.
    pub value: f64,
    /// Level whose estimator supplied the value.
    pub level: usize,
    /// Approximate variance of `ln value`: `1 / (n + α)` for a leaf with
    /// `n` samples.
    pub log_variance: f64,
}

/// One point per piece of every `S_{k+1}` and of the final `D_{n_it+1}`,
/// valued by the composite density at the piece center.
pub fn extract_support_points(chain: &RegionChainResult) -> Vec<SupportPoint> {
    let last = chain.levels.len().saturating_sub(1);
    let mut out = Vec::new();
    for level in &chain.levels {
        let partition = level.density.partition();
        let region = partition.region();
        let counts = partition.counts();
        let alpha = level.density.alpha();
        let pieces: Vec<Cell> = if level.k != last {
            level.high.cells().to_vec()
        } else if region.is_whole() {
            partition.leaf_cells()
        } else {
            partition
                .leaf_cells()
                .iter()
                .flat_map(|c| region.clip(c))
                .collect()
        };
        for piece in pieces {
            let location = piece.center();
            let n = partition.locate(&location).map_or(0, |i| counts[i]);
            let value = chain.compose_density(&location);
            out.push(SupportPoint {
                location,
                value,
                level: level.k,
                log_variance: 1.0 / (n as f64 + alpha),
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothSettings {
    /// Fixed length scales in normalized units; `None` selects them by
    /// leave-one-out predictive score.
    pub length_scales: Option<Vec<f64>>,
    /// Lower bound on the per-point noise variance, in squared log units.
    pub noise_floor: f64,
    /// Candidate length scales per dimension for automatic selection.
    pub grid_size: usize,
    pub grid_min: f64,
    pub grid_max: f64,
    /// Candidate nuggets added to every point's noise variance.
    pub nuggets: Vec<f64>,
    /// Support points with a piecewise FPF below this are left out.
    pub min_support_fpf: f64,
}

impl Default for SmoothSettings {
    fn default() -> Self {
        Self {
            length_scales: None,
            noise_floor: 1e-4,
            grid_size: 10,
            grid_min: 0.02,
            grid_max: 2.0,
            nuggets: vec![0.0, 0.03, 0.1, 0.3, 1.0, 3.0],
            min_support_fpf: 1e-6,
        }
    }
}

/// Fitted log-density surface.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionSurface {
    pub lower: Vec<f64>,
    pub width: Vec<f64>,
    pub support: Vec<SupportPoint>,
    /// Coefficients of the quadratic trend, ordered as [`trend_features`].
    pub trend: Vec<f64>,
    pub length_scales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_floor: f64,
    pub nugget: f64,
    /// Kernel weights on the trend residuals.
    pub coefficients: Vec<f64>,
    /// Leave-one-out log predictive score at the chosen hyperparameters.
    pub loo_score: f64,
}

fn normalize(phi: &[f64], lower: &[f64], width: &[f64]) -> Vec<f64> {
    phi.iter()
        .zip(lower)
        .zip(width)
        .map(|((x, l), w)| (x - l) / w)
        .collect()
}

fn kernel(a: &[f64], b: &[f64], ls: &[f64], var: f64) -> f64 {
    let r2: f64 = a
        .iter()
        .zip(b)
        .zip(ls)
        .map(|((x, y), l)| ((x - y) / l).powi(2))
        .sum();
    var * (-0.5 * r2).exp()
}

/// `[1, z₁, …, z_d, z₁², z₁z₂, …, z_d²]`.
pub fn trend_features(z: &[f64]) -> Vec<f64> {
    let mut f = Vec::with_capacity(1 + z.len() + z.len() * (z.len() + 1) / 2);
    f.push(1.0);
    f.extend_from_slice(z);
    for i in 0..z.len() {
        for j in i..z.len() {
            f.push(z[i] * z[j]);
        }
    }
    f
}

fn trend_gradient(z: &[f64], coef: &[f64]) -> Vec<f64> {
    let d = z.len();
    let mut g = coef[1..=d].to_vec();
    let mut idx = d + 1;
    for i in 0..d {
        for j in i..d {
            let c = coef[idx];
            if i == j {
                g[i] += 2.0 * c * z[i];
            } else {
                g[i] += c * z[j];
                g[j] += c * z[i];
            }
            idx += 1;
        }
    }
    g
}

fn gram(z: &[Vec<f64>], ls: &[f64], var: f64, noise: &[f64]) -> DMatrix<f64> {
    let n = z.len();
    DMatrix::from_fn(n, n, |i, j| {
        kernel(&z[i], &z[j], ls, var) + if i == j { noise[i] } else { 0.0 }
    })
}

/// Diagonal of `K⁻¹` from the Cholesky factor: squared column norms of `L⁻¹`.
fn inverse_diagonal(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> Option<Vec<f64>> {
    let n = chol.l_dirty().nrows();
    let linv = chol.l().solve_lower_triangular(&DMatrix::identity(n, n))?;
    Some((0..n).map(|i| linv.column(i).norm_squared()).collect())
}

/// Cholesky solve plus the closed-form leave-one-out log predictive score.
fn loo_fit(
    z: &[Vec<f64>],
    r: &DVector<f64>,
    ls: &[f64],
    var: f64,
    noise: &[f64],
) -> Option<(DVector<f64>, f64)> {
    let chol = gram(z, ls, var, noise).cholesky()?;
    let alpha = chol.solve(r);
    let diag = inverse_diagonal(&chol)?;
    let mut score = 0.0;
    for i in 0..z.len() {
        let kii = diag[i];
        if !(kii > 0.0) {
            return None;
        }
        let var_i = 1.0 / kii;
        let err = alpha[i] / kii;
        score +=
            -0.5 * var_i.ln() - 0.5 * err * err / var_i - 0.5 * (2.0 * std::f64::consts::PI).ln();
    }
    score.is_finite().then_some((alpha, score))
}

fn candidate_scales(dim: usize, s: &SmoothSettings) -> Vec<Vec<f64>> {
    let m = s.grid_size.max(1);
    let axis: Vec<f64> = (0..m)
        .map(|i| {
            let t = if m == 1 {
                0.0
            } else {
                i as f64 / (m - 1) as f64
            };
            (s.grid_min.ln() + t * (s.grid_max.ln() - s.grid_min.ln())).exp()
        })
        .collect();
    if dim <= 2 {
        let mut out = vec![Vec::new()];
        for _ in 0..dim {
            out = out
                .into_iter()
                .flat_map(|p| axis.iter().map(move |&l| [p.clone(), vec![l]].concat()))
                .collect();
        }
        out
    } else {
        axis.iter().map(|&l| vec![l; dim]).collect()
    }
}

/// Whether the point's FPF `value · P(F) / p(φ)` is at least `min_fpf`.
pub fn keeps_support(point: &SupportPoint, p_f: f64, design: &DesignSpace, min_fpf: f64) -> bool {
    point.value * p_f / design_prior_density(&point.location, design) >= min_fpf
}

pub fn select_support(
    points: &[SupportPoint],
    p_f: f64,
    design: &DesignSpace,
    min_fpf: f64,
) -> Vec<SupportPoint> {
    points
        .iter()
        .filter(|p| keeps_support(p, p_f, design, min_fpf))
        .cloned()
        .collect()
}

/// Extracts, selects and fits the support points of a finished chain.
pub fn fit_chain_surface(
    chain: &RegionChainResult,
    settings: &SmoothSettings,
) -> Result<RegressionSurface> {
    let points = select_support(
        &extract_support_points(chain),
        chain.p_f,
        &chain.design,
        settings.min_support_fpf,
    );
    fit_surface(&points, &chain.design, settings)
}

struct Trend {
    coef: DVector<f64>,
    resid: DVector<f64>,
    var: f64,
}

/// Weighted least squares quadratic trend; with too few points for the
/// quadratic terms the minimum-norm solution is used.
fn fit_trend(features: &[Vec<f64>], y: &DVector<f64>, noise: &[f64], floor: f64) -> Result<Trend> {
    let n = features.len();
    let nf = features[0].len();
    let sw: Vec<f64> = noise.iter().map(|v| 1.0 / v.sqrt()).collect();
    let x = DMatrix::from_fn(n, nf, |i, j| features[i][j]);
    let xw = DMatrix::from_fn(n, nf, |i, j| features[i][j] * sw[i]);
    let yw = DVector::from_fn(n, |i, _| y[i] * sw[i]);
    let coef = xw
        .svd(true, true)
        .solve(&yw, 1e-10)
        .map_err(|e| Error::Fit(format!("trend least squares failed: {e}")))?;
    let resid = y - &x * &coef;
    let wsum: f64 = noise.iter().map(|v| 1.0 / v).sum();
    let var = (resid.iter().zip(noise).map(|(r, v)| r * r / v).sum::<f64>() / wsum).max(floor);
    Ok(Trend { coef, resid, var })
}

/// Fits the log-density surface to `points` over `design`.
pub fn fit_surface(
    points: &[SupportPoint],
    design: &DesignSpace,
    settings: &SmoothSettings,
) -> Result<RegressionSurface> {
    let dim = design.dim();
    if points.len() < dim + 1 {
        return Err(Error::Fit(format!(
            "need at least {} support points, got {}",
            dim + 1,
            points.len()
        )));
    }
    if !(settings.noise_floor > 0.0) {
        return Err(Error::Fit("noise floor must be positive".into()));
    }
    if settings.nuggets.is_empty()
        || settings
            .nuggets
            .iter()
            .any(|t| !(*t >= 0.0 && t.is_finite()))
    {
        return Err(Error::Fit(format!(
            "nuggets must be a non-empty list of non-negative values, got {:?}",
            settings.nuggets
        )));
    }
    if let Some(p) = points
        .iter()
        .find(|p| !(p.value > 0.0 && p.value.is_finite()) || p.location.len() != dim)
    {
        return Err(Error::Fit(format!(
            "support point at {:?} has value {} (must be positive and finite)",
            p.location, p.value
        )));
    }
    // drop exact duplicates, reject conflicting ones
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .location
            .iter()
            .zip(&points[b].location)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut support: Vec<SupportPoint> = Vec::with_capacity(points.len());
    let mut kept: Vec<usize> = Vec::with_capacity(points.len());
    for &i in &order {
        if let Some(&j) = kept.last() {
            if points[j].location == points[i].location {
                let (a, b) = (points[j].value, points[i].value);
                if (a - b).abs() > 1e-12 * a.max(b) {
                    return Err(Error::Fit(format!(
                        "duplicate support location {:?} with conflicting values {a:e} and {b:e}",
                        points[i].location
                    )));
                }
                continue;
            }
        }
        kept.push(i);
    }
    kept.sort_unstable();
    support.extend(kept.iter().map(|&i| points[i].clone()));

    let lower = design.lower();
    let width: Vec<f64> = (0..dim).map(|d| design.width(d)).collect();
    let z: Vec<Vec<f64>> = support
        .iter()
        .map(|p| normalize(&p.location, &lower, &width))
        .collect();
    let base: Vec<f64> = support
        .iter()
        .map(|p| p.log_variance.max(settings.noise_floor))
        .collect();
    let y = DVector::from_iterator(support.len(), support.iter().map(|p| p.value.ln()));
    let features: Vec<Vec<f64>> = z.iter().map(|zi| trend_features(zi)).collect();
    let noises: Vec<Vec<f64>> = settings
        .nuggets
        .iter()
        .map(|t| base.iter().map(|v| v + t).collect())
        .collect();
    let trends = noises
        .iter()
        .map(|noise| fit_trend(&features, &y, noise, settings.noise_floor))
        .collect::<Result<Vec<_>>>()?;

    let candidates = match &settings.length_scales {
        Some(ls) => {
            if ls.len() != dim || ls.iter().any(|l| !(*l > 0.0)) {
                return Err(Error::Fit(format!(
                    "need {dim} positive length scales, got {ls:?}"
                )));
            }
            vec![ls.clone()]
        }
        None => candidate_scales(dim, settings),
    };
    let pairs: Vec<(usize, usize)> = (0..trends.len())
        .flat_map(|t| (0..candidates.len()).map(move |c| (t, c)))
        .collect();
    let fits: Vec<Option<(DVector<f64>, f64)>> = pairs
        .par_iter()
        .map(|&(t, c)| {
            loo_fit(
                &z,
                &trends[t].resid,
                &candidates[c],
                trends[t].var,
                &noises[t],
            )
        })
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, f) in fits.iter().enumerate() {
        if let Some((_, s)) = f {
            if best.is_none_or(|(_, b)| *s > b) {
                best = Some((i, *s));
            }
        }
    }
    let (bi, loo_score) = best.ok_or_else(|| {
        Error::Fit("kernel matrix is not positive definite for any length scale".into())
    })?;
    let (t, c) = pairs[bi];
    let coefficients = fits[bi].as_ref().unwrap().0.iter().copied().collect();
    Ok(RegressionSurface {
        lower,
        width,
        support,
        trend: trends[t].coef.iter().copied().collect(),
        length_scales: candidates[c].clone(),
        signal_variance: trends[t].var,
        noise_floor: settings.noise_floor,
        nugget: settings.nuggets[t],
        coefficients,
        loo_score,
    })
}

/// Analytic gradient plus a flag for queries on the design-box boundary,
/// where only one-sided derivatives exist within the box.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub value: Vec<f64>,
    pub one_sided: bool,
}

impl RegressionSurface {
    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    fn support_z(&self) -> impl Iterator<Item = Vec<f64>> + '_ {
        self.support
            .iter()
            .map(|p| normalize(&p.location, &self.lower, &self.width))
    }

    /// `s(φ)`, the fitted log density.
    pub fn log_density(&self, phi: &[f64]) -> f64 {
        let z = normalize(phi, &self.lower, &self.width);
        let mut s: f64 = trend_features(&z)
            .iter()
            .zip(&self.trend)
            .map(|(a, b)| a * b)
            .sum();
        for (zi, c) in self.support_z().zip(&self.coefficients) {
            s += c * kernel(&z, &zi, &self.length_scales, self.signal_variance);
        }
        s
    }

    /// `∇_φ s(φ)`.
    pub fn log_density_gradient(&self, phi: &[f64]) -> Vec<f64> {
        let z = normalize(phi, &self.lower, &self.width);
        let mut g = trend_gradient(&z, &self.trend);
        for (zi, c) in self.support_z().zip(&self.coefficients) {
            let k = c * kernel(&z, &zi, &self.length_scales, self.signal_variance);
            for d in 0..g.len() {
                g[d] -= k * (z[d] - zi[d]) / (self.length_scales[d] * self.length_scales[d]);
            }
        }
        g.iter().zip(&self.width).map(|(g, w)| g / w).collect()
    }

    fn unclipped_fpf(&self, phi: &[f64], p_f: f64, design: &DesignSpace) -> Result<f64> {
        let prior = design_prior_density(phi, design);
        if !(prior > 0.0) {
            return Err(Error::UndefinedQuery(phi.to_vec()));
        }
        Ok(self.log_density(phi).exp() * p_f / prior)
    }

    /// `min(1, exp(s(φ)) · P(F) / p(φ))`.
    pub fn fpf(&self, phi: &[f64], p_f: f64, design: &DesignSpace) -> Result<f64> {
        Ok(self.unclipped_fpf(phi, p_f, design)?.min(1.0))
    }

    /// Gradient of the smoothed FPF: `FPF(φ) · ∇s(φ)`, zero where clipped.
    pub fn fpf_gradient(&self, phi: &[f64], p_f: f64, design: &DesignSpace) -> Result<Gradient> {
        let value = self.unclipped_fpf(phi, p_f, design)?;
        let g = if value >= 1.0 {
            vec![0.0; self.dim()]
        } else {
            self.log_density_gradient(phi)
                .into_iter()
                .map(|x| value * x)
                .collect()
        };
        Ok(Gradient {
            value: g,
            one_sided: !design.is_interior(phi),
        })
    }

    /// Largest |s(φᵢ) − log vᵢ| over the support points.
    pub fn max_support_residual(&self) -> f64 {
        self.support
            .iter()
            .map(|p| (self.log_density(&p.location) - p.value.ln()).abs())
            .fold(0.0, f64::max)
    }

    /// Per-point noise variances used in the fit.
    pub fn noise(&self) -> Vec<f64> {
        self.support
            .iter()
            .map(|p| p.log_variance.max(self.noise_floor) + self.nugget)
            .collect()
    }

    /// Leave-one-out log residuals at the fitted hyperparameters.
    pub fn loo_residuals(&self) -> Result<Vec<f64>> {
        let z: Vec<Vec<f64>> = self.support_z().collect();
        let chol = gram(&z, &self.length_scales, self.signal_variance, &self.noise())
            .cholesky()
            .ok_or_else(|| Error::Fit("kernel matrix lost positive definiteness".into()))?;
        let diag =
            inverse_diagonal(&chol).ok_or_else(|| Error::Fit("singular kernel factor".into()))?;
        Ok((0..z.len())
            .map(|i| self.coefficients[i] / diag[i])
            .collect())
    }
}

/// Smoothed FPF with the query checked against the design space.
pub fn smoothed_fpf(
    surface: &RegressionSurface,
    p_f: f64,
    design: &DesignSpace,
    phi: &[f64],
) -> Result<f64> {
    surface.fpf(phi, p_f, design)
}

pub fn fpf_gradient(
    surface: &RegressionSurface,
    p_f: f64,
    design: &DesignSpace,
    phi: &[f64],
) -> Result<Gradient> {
    surface.fpf_gradient(phi, p_f, design)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::normal_sf;
    use rand::Rng;

    fn line(n: usize, f: impl Fn(f64) -> f64) -> Vec<SupportPoint> {
        (0..n)
            .map(|i| {
                let x = 4.0 * (i as f64 + 0.5) / n as f64;
                SupportPoint {
                    location: vec![x],
                    value: f(x),
                    level: 0,
                    log_variance: 0.0,
                }
            })
            .collect()
    }

    fn toy_design() -> DesignSpace {
        DesignSpace::new(vec![[0.0, 4.0]]).unwrap()
    }

    #[test]
    fn constant_values_give_constant_surface() {
        let pts = line(12, |_| 0.3);
        let s = fit_surface(&pts, &toy_design(), &SmoothSettings::default()).unwrap();
        for i in 0..=40 {
            assert!((s.log_density(&[i as f64 / 10.0]) - 0.3f64.ln()).abs() < 1e-8);
        }
        let g = s.fpf_gradient(&[2.0], 0.1, &toy_design()).unwrap();
        assert!(g.value[0].abs() < 1e-8);
        assert!(!g.one_sided);
        assert!(
            s.fpf_gradient(&[0.0], 0.1, &toy_design())
                .unwrap()
                .one_sided
        );
    }

    #[test]
    fn interpolates_at_small_noise_floor() {
        let pts = line(15, |x| (1.0 + (2.0 * x).sin() * 0.5).exp());
        let settings = SmoothSettings {
            noise_floor: 1e-8,
            ..SmoothSettings::default()
        };
        let s = fit_surface(&pts, &toy_design(), &settings).unwrap();
        for p in &pts {
            let v = s.log_density(&p.location).exp();
            assert!((v / p.value - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn recovers_normal_tail_off_grid() {
        let pts = line(21, normal_sf);
        let s = fit_surface(&pts, &toy_design(), &SmoothSettings::default()).unwrap();
        let mut err = 0.0;
        let m = 40;
        for i in 0..m {
            let x = 0.1 + 3.8 * (i as f64 + 0.37) / m as f64;
            err += (s.log_density(&[x]) - normal_sf(x).ln()).abs();
        }
        assert!(err / (m as f64) < 0.05, "{}", err / m as f64);
        assert!(s.max_support_residual() < 3.0 * 1e-2);
    }

    #[test]
    fn conflicting_duplicates_rejected_exact_duplicates_dropped() {
        let mut pts = line(5, |_| 1.0);
        pts.push(pts[2].clone());
        assert_eq!(
            fit_surface(&pts, &toy_design(), &SmoothSettings::default())
                .unwrap()
                .support
                .len(),
            5
        );
        pts.push(SupportPoint {
            value: 2.0,
            ..pts[1].clone()
        });
        let err = fit_surface(&pts, &toy_design(), &SmoothSettings::default()).unwrap_err();
        assert!(matches!(err, Error::Fit(m) if m.contains("duplicate")));
        assert!(fit_surface(&pts[..1], &toy_design(), &SmoothSettings::default()).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences_2d() {
        let design = DesignSpace::new(vec![[30.0, 50.0], [30.0, 50.0]]).unwrap();
        let mut rng = crate::rng::StreamSplitter::new(9).stream(crate::rng::Stage::Custom(1), 0);
        let pts: Vec<SupportPoint> = (0..60)
            .map(|_| {
                let loc = design.sample_uniform(&mut rng);
                let v = (-(loc[0] - 30.0) / 5.0 - ((loc[1] - 38.0) / 4.0).powi(2)).exp();
                SupportPoint {
                    location: loc,
                    value: v,
                    level: 0,
                    log_variance: 0.0,
                }
            })
            .collect();
        let s = fit_surface(&pts, &design, &SmoothSettings::default()).unwrap();
        for _ in 0..100 {
            let phi: Vec<f64> = (0..2).map(|_| 30.5 + 19.0 * rng.random::<f64>()).collect();
            let g = s.fpf_gradient(&phi, 0.05, &design).unwrap().value;
            let fd: Vec<f64> = (0..2)
                .map(|d| {
                    let h = 1e-4 * design.width(d);
                    let (mut a, mut b) = (phi.clone(), phi.clone());
                    a[d] += h;
                    b[d] -= h;
                    (s.fpf(&a, 0.05, &design).unwrap() - s.fpf(&b, 0.05, &design).unwrap())
                        / (2.0 * h)
                })
                .collect();
            let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff = g
                .iter()
                .zip(&fd)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(diff <= 1e-4 * norm, "{g:?} vs {fd:?}");
        }
    }

    #[test]
    fn outside_design_is_undefined() {
        let s = fit_surface(&line(6, |_| 1.0), &toy_design(), &SmoothSettings::default()).unwrap();
        assert!(matches!(
            smoothed_fpf(&s, 0.1, &toy_design(), &[5.0]),
            Err(Error::UndefinedQuery(_))
        ));
    }

    #[test]
    fn serialization_round_trip() {
        let s = fit_surface(
            &line(9, normal_sf),
            &toy_design(),
            &SmoothSettings::default(),
        )
        .unwrap();
        let back: RegressionSurface =
            serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert_eq!(
            back.log_density(&[1.234]).to_bits(),
            s.log_density(&[1.234]).to_bits()
        );
    }

    #[test]
    fn clipped_at_one_with_zero_gradient() {
        // log density falls from +1 to -3 across the box, so the FPF exceeds 1 near φ = 0
        let pts = line(12, |x| (1.0 - x).exp());
        let design = toy_design();
        let s = fit_surface(
            &pts,
            &design,
            &SmoothSettings {
                noise_floor: 1e-8,
                ..SmoothSettings::default()
            },
        )
        .unwrap();
        let (p_f, prior) = (1.0, 0.25);
        assert!(s.log_density(&[0.1]).exp() * p_f / prior > 1.0);
        assert_eq!(s.fpf(&[0.1], p_f, &design).unwrap(), 1.0);
        assert_eq!(
            s.fpf_gradient(&[0.1], p_f, &design).unwrap().value,
            vec![0.0]
        );
        let v = s.fpf(&[3.0], p_f, &design).unwrap();
        assert!(v < 1.0);
        let g = s.fpf_gradient(&[3.0], p_f, &design).unwrap().value[0];
        assert!((g / v + 1.0).abs() < 1e-3, "{g} {v}");
    }

    #[test]
    fn support_selection_by_fpf() {
        let design = DesignSpace::new(vec![[0.0, 2.0]]).unwrap();
        let p = SupportPoint {
            location: vec![1.0],
            value: 1e-4,
            level: 0,
            log_variance: 0.1,
        };
        // FPF = 1e-4 · 0.1 / 0.5 = 2e-5
        assert!(keeps_support(&p, 0.1, &design, 2e-5 * (1.0 - 1e-12)));
        assert!(!keeps_support(&p, 0.1, &design, 2e-5 * (1.0 + 1e-12)));
        let q = SupportPoint {
            value: 1.0,
            ..p.clone()
        };
        assert_eq!(
            select_support(&[p.clone(), q.clone(), p], 0.1, &design, 1e-3),
            vec![q]
        );
    }

    #[test]
    fn nugget_tracks_scatter() {
        let mut rng = crate::rng::StreamSplitter::new(5).stream(crate::rng::Stage::Custom(2), 0);
        let clean = line(40, |x| (-0.5 * x * x).exp());
        let noisy: Vec<SupportPoint> = clean
            .iter()
            .map(|p| SupportPoint {
                value: p.value * (2.0 * rng.random::<f64>() - 1.0).exp(),
                ..p.clone()
            })
            .collect();
        let settings = SmoothSettings::default();
        let a = fit_surface(&clean, &toy_design(), &settings).unwrap();
        let b = fit_surface(&noisy, &toy_design(), &settings).unwrap();
        assert!(settings.nuggets.contains(&a.nugget) && settings.nuggets.contains(&b.nugget));
        assert!(a.nugget <= 0.03, "{}", a.nugget);
        assert!(b.nugget >= 0.1, "{}", b.nugget);
        assert!(b.noise().iter().all(|v| *v >= b.nugget));
        // the smoothed fit stays near the clean curve despite the scatter
        let err: f64 = (0..20)
            .map(|i| {
                (b.log_density(&[0.1 + 0.19 * i as f64]) + 0.5 * (0.1 + 0.19 * i as f64).powi(2))
                    .abs()
            })
            .sum::<f64>()
            / 20.0;
        assert!(err < 0.3, "{err}");
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
        #[test]
        fn smoothed_fpf_is_a_probability(x in 0.0f64..=4.0, p_f in 1e-6f64..1.0, scale in 0.1f64..20.0) {
            let pts = line(10, |t| scale * (-t).exp());
            let s = fit_surface(&pts, &toy_design(), &SmoothSettings::default()).unwrap();
            let v = s.fpf(&[x], p_f, &toy_design()).unwrap();
            proptest::prop_assert!(v > 0.0 && v <= 1.0);
            let g = s.fpf_gradient(&[x], p_f, &toy_design()).unwrap();
            proptest::prop_assert!(g.value.iter().all(|x| x.is_finite()));
        }
    }
}
