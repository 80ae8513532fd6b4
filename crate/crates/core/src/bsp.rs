//! Bayesian sequential partitioning (BSP) density estimation.
//!
//! A partition of a box domain is grown by binary midpoint cuts. Each
//! partition `x_t` with `t` leaves is scored by its log posterior
//!
//! ```text
//! -β t + log B(n₁+α, …, n_t+α) - log B(α, …, α) - Σ nᵢ log |Aᵢ|
//! ```
//!
//! and partitions are explored with sequential importance sampling: every
//! particle adds one cut per level, drawn in proportion to the posterior of
//! the resulting partition.
//!
//! When the estimate is restricted to a region (a union of cells inside the
//! domain box), `|Aᵢ|` is the volume of `Aᵢ ∩ region` and the concentration
//! of leaf `i` is `αᵢ = α fᵢ`, where `fᵢ = |Aᵢ ∩ region| / |Aᵢ|`. A leaf that
//! only grazes the region then gets the prior density of a full leaf of its
//! size instead of a full leaf's prior mass squeezed into a sliver. Leaves
//! that miss the region entirely carry zero mass and are left out of the
//! Dirichlet term, but still count toward `t` in the complexity prior. On an
//! unrestricted domain every `fᵢ` is 1.

use std::sync::{Arc, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::region::{Cell, RegionIndicator};
use crate::special::ln_gamma;

#[derive(Debug, Clone, PartialEq)]
struct Points {
    dim: usize,
    data: Vec<f64>,
}

impl Points {
    fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug)]
struct LeafStats {
    count: usize,
    /// Volume of the leaf inside the region.
    volume: f64,
    members: Vec<u32>,
    /// Per axis: members strictly below the midpoint.
    lower_counts: Vec<usize>,
    /// `volume / |cell|`, which scales the leaf's Dirichlet concentration.
    fraction: f64,
    /// Per axis: region volumes of the (lower, upper) halves.
    child_volumes: Vec<[f64; 2]>,
    child_fractions: Vec<[f64; 2]>,
    /// Per axis: two or more members, all with the same coordinate. MCMC
    /// populations repeat coordinates, and no cut along such an axis can
    /// separate them, so cutting it would only shrink the leaf without bound.
    coincident: Vec<bool>,
    /// Per-axis local score change of a cut, cached for one `α`.
    cut_terms: OnceLock<(u64, Vec<f64>)>,
}

fn inside_fraction(volume: f64, cell: &Cell) -> f64 {
    (volume / cell.volume()).min(1.0)
}

#[derive(Debug, Clone)]
enum NodeKind {
    Leaf(Arc<LeafStats>),
    Split {
        axis: usize,
        position: f64,
        lower: usize,
        upper: usize,
    },
}

#[derive(Debug)]
struct Node {
    cell: Cell,
    kind: NodeKind,
}

/// A binary midpoint partition of a domain box with per-leaf sample counts.
///
/// Leaves are kept in depth-first order with the lower child first; leaf
/// indices used by [`BinaryPartition::propose_cut`] refer to that order.
#[derive(Debug, Clone)]
pub struct BinaryPartition {
    domain: Cell,
    region: Arc<RegionIndicator>,
    points: Arc<Points>,
    nodes: Vec<Arc<Node>>,
    leaves: Vec<usize>,
    total: usize,
    effective: usize,
    /// `Σ fᵢ` over the leaves.
    fraction_sum: f64,
    detached: bool,
}

fn leaf_stats(
    cell: &Cell,
    members: Vec<u32>,
    points: &Points,
    region: &RegionIndicator,
) -> LeafStats {
    let dim = cell.dim();
    let mut lower_counts = vec![0usize; dim];
    for &m in &members {
        let x = points.get(m as usize);
        for (axis, lc) in lower_counts.iter_mut().enumerate() {
            if x[axis] < cell.midpoint(axis) {
                *lc += 1;
            }
        }
    }
    let region_volume = |c: &Cell| {
        if region.is_whole() {
            c.volume()
        } else {
            region.intersection_volume(c)
        }
    };
    let mut child_volumes = Vec::with_capacity(dim);
    let mut child_fractions = Vec::with_capacity(dim);
    for axis in 0..dim {
        let (l, u) = cell.split(axis);
        let (vl, vu) = (region_volume(&l), region_volume(&u));
        child_volumes.push([vl, vu]);
        child_fractions.push([inside_fraction(vl, &l), inside_fraction(vu, &u)]);
    }
    let volume = region_volume(cell);
    let coincident = (0..dim)
        .map(|axis| {
            members.len() >= 2 && {
                let first = points.get(members[0] as usize)[axis];
                members[1..]
                    .iter()
                    .all(|&m| points.get(m as usize)[axis] == first)
            }
        })
        .collect();
    LeafStats {
        count: members.len(),
        volume,
        members,
        lower_counts,
        fraction: inside_fraction(volume, cell),
        child_volumes,
        child_fractions,
        coincident,
        cut_terms: OnceLock::new(),
    }
}

impl BinaryPartition {
    /// Single-leaf partition of `domain`. Every sample must lie in the domain
    /// and, when given, in `region`.
    pub fn new(
        domain: Cell,
        region: Option<RegionIndicator>,
        samples: &[Vec<f64>],
    ) -> Result<Self> {
        let dim = domain.dim();
        let region = region.unwrap_or_else(|| RegionIndicator::whole(domain.clone()));
        if region.dim() != dim {
            return Err(Error::Argument(
                "region and domain dimensions differ".into(),
            ));
        }
        let mut data = Vec::with_capacity(samples.len() * dim);
        for (i, s) in samples.iter().enumerate() {
            if !domain.contains(s) {
                return Err(Error::Argument(format!(
                    "sample {i} at {s:?} lies outside the partition domain"
                )));
            }
            if !region.is_whole() && !region.contains(s) {
                return Err(Error::Argument(format!(
                    "sample {i} at {s:?} lies outside the estimation region"
                )));
            }
            data.extend_from_slice(s);
        }
        if samples.len() > u32::MAX as usize {
            return Err(Error::Argument("too many samples".into()));
        }
        let points = Points { dim, data };
        let members = (0..samples.len() as u32).collect();
        let stats = leaf_stats(&domain, members, &points, &region);
        if !(stats.volume > 0.0) {
            return Err(Error::Argument(
                "estimation region has zero volume inside the domain".into(),
            ));
        }
        let fraction_sum = stats.fraction;
        let root = Node {
            cell: domain.clone(),
            kind: NodeKind::Leaf(Arc::new(stats)),
        };
        Ok(Self {
            domain,
            region: Arc::new(region),
            points: Arc::new(points),
            nodes: vec![Arc::new(root)],
            leaves: vec![0],
            total: samples.len(),
            effective: 1,
            fraction_sum,
            detached: false,
        })
    }

    pub fn domain(&self) -> &Cell {
        &self.domain
    }

    pub fn region(&self) -> &RegionIndicator {
        &self.region
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    /// Total number of samples `N`.
    pub fn total(&self) -> usize {
        self.total
    }

    pub fn leaf_count(&self) -> usize {
        self.leaves.len()
    }

    pub fn internal_count(&self) -> usize {
        self.nodes.len() - self.leaves.len()
    }

    /// Leaves with positive volume inside the region.
    pub fn effective_leaf_count(&self) -> usize {
        self.effective
    }

    fn leaf(&self, pos: usize) -> (&Cell, &LeafStats) {
        let node = &self.nodes[self.leaves[pos]];
        match &node.kind {
            NodeKind::Leaf(s) => (&node.cell, s),
            NodeKind::Split { .. } => unreachable!("leaf list points at a split node"),
        }
    }

    /// Inside fractions `fᵢ = |Aᵢ ∩ region| / |Aᵢ|` of the leaves.
    pub fn fractions(&self) -> Vec<f64> {
        (0..self.leaf_count())
            .map(|i| self.leaf(i).1.fraction)
            .collect()
    }

    pub fn leaf_cell(&self, pos: usize) -> &Cell {
        self.leaf(pos).0
    }

    pub fn leaf_cells(&self) -> Vec<Cell> {
        (0..self.leaf_count())
            .map(|i| self.leaf(i).0.clone())
            .collect()
    }

    pub fn counts(&self) -> Vec<usize> {
        (0..self.leaf_count())
            .map(|i| self.leaf(i).1.count)
            .collect()
    }

    /// Region volumes `|Aᵢ ∩ region|` of the leaves.
    pub fn volumes(&self) -> Vec<f64> {
        (0..self.leaf_count())
            .map(|i| self.leaf(i).1.volume)
            .collect()
    }

    /// Leaf index containing `x`, by descending the cut tree.
    pub fn locate(&self, x: &[f64]) -> Option<usize> {
        if !self.domain.contains(x) {
            return None;
        }
        let mut id = 0;
        loop {
            match &self.nodes[id].kind {
                NodeKind::Leaf(_) => return self.leaves.iter().position(|&l| l == id),
                NodeKind::Split {
                    axis,
                    position,
                    lower,
                    upper,
                } => {
                    id = if x[*axis] < *position { *lower } else { *upper };
                }
            }
        }
    }

    /// Splits leaf `pos` at its midpoint along `axis`. Samples strictly below
    /// the cut go to the lower child, the rest (including the cut plane) to
    /// the upper child.
    pub fn propose_cut(&self, pos: usize, axis: usize) -> Result<BinaryPartition> {
        if pos >= self.leaf_count() || axis >= self.dim() {
            return Err(Error::Argument(format!(
                "no leaf {pos} / axis {axis} in this partition"
            )));
        }
        if self.detached {
            return Err(Error::Argument(
                "partition was reloaded without its samples and cannot be refined".into(),
            ));
        }
        let (cell, stats) = self.leaf(pos);
        let position = cell.midpoint(axis);
        let (lower_cell, upper_cell) = cell.split(axis);
        let (mut lo_members, mut up_members) =
            (Vec::with_capacity(stats.lower_counts[axis]), Vec::new());
        for &m in &stats.members {
            if self.points.get(m as usize)[axis] < position {
                lo_members.push(m);
            } else {
                up_members.push(m);
            }
        }
        let lower = leaf_stats(&lower_cell, lo_members, &self.points, &self.region);
        let upper = leaf_stats(&upper_cell, up_members, &self.points, &self.region);
        let fraction_sum = self.fraction_sum - stats.fraction + lower.fraction + upper.fraction;
        let was_effective = usize::from(stats.volume > 0.0);
        let now_effective = usize::from(lower.volume > 0.0) + usize::from(upper.volume > 0.0);

        let mut next = self.clone();
        let parent_id = self.leaves[pos];
        let lower_id = next.nodes.len();
        let upper_id = lower_id + 1;
        next.nodes.push(Arc::new(Node {
            cell: lower_cell,
            kind: NodeKind::Leaf(Arc::new(lower)),
        }));
        next.nodes.push(Arc::new(Node {
            cell: upper_cell,
            kind: NodeKind::Leaf(Arc::new(upper)),
        }));
        next.nodes[parent_id] = Arc::new(Node {
            cell: cell.clone(),
            kind: NodeKind::Split {
                axis,
                position,
                lower: lower_id,
                upper: upper_id,
            },
        });
        next.leaves[pos] = lower_id;
        next.leaves.insert(pos + 1, upper_id);
        next.effective = self.effective + now_effective - was_effective;
        next.fraction_sum = fraction_sum;
        Ok(next)
    }

    fn to_record_node(&self, id: usize, leaf_values: &dyn Fn(usize) -> (f64, f64)) -> NodeRecord {
        let node = &self.nodes[id];
        match &node.kind {
            NodeKind::Leaf(stats) => {
                let pos = self
                    .leaves
                    .iter()
                    .position(|&l| l == id)
                    .expect("leaf registered");
                let (mass, density) = leaf_values(pos);
                NodeRecord::Leaf {
                    lo: node.cell.lo.clone(),
                    hi: node.cell.hi.clone(),
                    count: stats.count,
                    volume: stats.volume,
                    mass,
                    density,
                }
            }
            NodeKind::Split {
                axis,
                position,
                lower,
                upper,
            } => NodeRecord::Split {
                axis: *axis,
                position: *position,
                lower: Box::new(self.to_record_node(*lower, leaf_values)),
                upper: Box::new(self.to_record_node(*upper, leaf_values)),
            },
        }
    }
}

/// `lnΓ(n + αf) - lnΓ(αf) - n ln v` for a leaf with positive volume.
fn leaf_term(count: usize, volume: f64, fraction: f64, alpha: f64) -> f64 {
    if !(volume > 0.0) {
        return 0.0;
    }
    let a = alpha * fraction;
    let t = ln_gamma(count as f64 + a) - ln_gamma(a);
    if count > 0 {
        t - count as f64 * volume.ln()
    } else {
        t
    }
}

/// `lnΓ(A) - lnΓ(N + A)` with total concentration `A`.
fn global_term(n: usize, concentration: f64) -> f64 {
    if concentration > 0.0 {
        ln_gamma(concentration) - ln_gamma(n as f64 + concentration)
    } else {
        0.0
    }
}

/// Log posterior of a partition, up to the global constant.
pub fn log_partition_score(p: &BinaryPartition, alpha: f64, beta: f64) -> f64 {
    let mut score = -beta * p.leaf_count() as f64;
    let mut f_sum = 0.0;
    for i in 0..p.leaf_count() {
        let (_, s) = p.leaf(i);
        if s.volume > 0.0 {
            f_sum += s.fraction;
            score += leaf_term(s.count, s.volume, s.fraction, alpha);
        }
    }
    score + global_term(p.total(), alpha * f_sum)
}

/// Incremental scoring for one estimation run.
struct ScoreTables {
    alpha: f64,
    beta: f64,
}

impl ScoreTables {
    fn new(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta }
    }

    /// Per-axis change of the leaf terms when leaf `s` is cut.
    fn local_term(&self, s: &LeafStats, axis: usize) -> f64 {
        let key = self.alpha.to_bits();
        let (k, terms) = s.cut_terms.get_or_init(|| (key, self.compute_local(s)));
        if *k == key {
            terms[axis]
        } else {
            self.compute_local(s)[axis]
        }
    }

    fn compute_local(&self, s: &LeafStats) -> Vec<f64> {
        let own = leaf_term(s.count, s.volume, s.fraction, self.alpha);
        (0..s.child_volumes.len())
            .map(|axis| {
                let [vl, vu] = s.child_volumes[axis];
                let [fl, fu] = s.child_fractions[axis];
                let nl = s.lower_counts[axis];
                leaf_term(nl, vl, fl, self.alpha) + leaf_term(s.count - nl, vu, fu, self.alpha)
                    - own
            })
            .collect()
    }

    fn global(&self, p: &BinaryPartition) -> f64 {
        global_term(p.total, self.alpha * p.fraction_sum)
    }

    /// Score change of cutting leaf `pos` along `axis`, given the current
    /// global term of `p`.
    fn cut_delta(&self, p: &BinaryPartition, current_global: f64, pos: usize, axis: usize) -> f64 {
        let (_, s) = p.leaf(pos);
        if !(s.volume > 0.0) {
            return -self.beta;
        }
        let [fl, fu] = s.child_fractions[axis];
        let f_next = p.fraction_sum - s.fraction + fl + fu;
        -self.beta + self.local_term(s, axis) + global_term(p.total, self.alpha * f_next)
            - current_global
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BspSettings {
    /// Dirichlet concentration `α`.
    pub alpha: f64,
    /// Complexity penalty `β`; `None` uses `ln N`.
    pub beta: Option<f64>,
    /// Number of SIS particles `m`.
    pub particles: usize,
    pub max_leaves: usize,
    /// Levels without a new best partition before stopping.
    pub stall_levels: usize,
}

impl Default for BspSettings {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: None,
            particles: 100,
            max_leaves: 128,
            stall_levels: 2,
        }
    }
}

impl BspSettings {
    pub fn resolved_beta(&self, n: usize) -> f64 {
        self.beta.unwrap_or_else(|| (n.max(2) as f64).ln())
    }
}

/// Piecewise-constant density `p(φ) = θᵢ / |Aᵢ|` on the leaves of a
/// partition, with posterior-mean masses `θᵢ = (nᵢ + αᵢ) / (N + Σαᵢ)`.
#[derive(Debug, Clone)]
pub struct PiecewiseConstantDensity {
    partition: BinaryPartition,
    alpha: f64,
    log_score: f64,
    masses: Vec<f64>,
    densities: Vec<f64>,
}

impl PiecewiseConstantDensity {
    pub fn from_partition(partition: BinaryPartition, alpha: f64, beta: f64) -> Self {
        let counts = partition.counts();
        let volumes = partition.volumes();
        let fractions = partition.fractions();
        let f_sum: f64 = fractions
            .iter()
            .zip(&volumes)
            .filter(|(_, &v)| v > 0.0)
            .map(|(f, _)| f)
            .sum();
        let denom = partition.total() as f64 + alpha * f_sum;
        let masses: Vec<f64> = (0..counts.len())
            .map(|i| {
                if volumes[i] > 0.0 {
                    (counts[i] as f64 + alpha * fractions[i]) / denom
                } else {
                    0.0
                }
            })
            .collect();
        let densities = masses
            .iter()
            .zip(&volumes)
            .map(|(&m, &v)| if v > 0.0 { m / v } else { 0.0 })
            .collect();
        let log_score = log_partition_score(&partition, alpha, beta);
        Self {
            partition,
            alpha,
            log_score,
            masses,
            densities,
        }
    }

    pub fn partition(&self) -> &BinaryPartition {
        &self.partition
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn log_score(&self) -> f64 {
        self.log_score
    }

    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn densities(&self) -> &[f64] {
        &self.densities
    }

    pub fn leaf_count(&self) -> usize {
        self.partition.leaf_count()
    }

    /// `Σ pᵢ |Aᵢ|`, which is 1 up to rounding.
    pub fn integral(&self) -> f64 {
        self.densities
            .iter()
            .zip(self.partition.volumes())
            .map(|(p, v)| p * v)
            .sum()
    }

    /// Probability of `region`, which must lie inside the estimate's own region.
    pub fn mass_within(&self, region: &RegionIndicator) -> f64 {
        (0..self.densities.len())
            .filter(|&i| self.densities[i] > 0.0)
            .map(|i| self.densities[i] * region.intersection_volume(self.partition.leaf_cell(i)))
            .sum()
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    /// Density of the leaf containing `phi`; zero outside the domain or region.
    pub fn density_value(&self, phi: &[f64]) -> f64 {
        if !self.partition.region.is_whole() && !self.partition.region.contains(phi) {
            return 0.0;
        }
        self.partition
            .locate(phi)
            .map_or(0.0, |i| self.densities[i])
    }

    pub fn to_record(&self) -> DensityRecord {
        let tree = self
            .partition
            .to_record_node(0, &|pos| (self.masses[pos], self.densities[pos]));
        DensityRecord {
            dim: self.partition.dim(),
            domain: self.partition.domain.clone(),
            region: (*self.partition.region).clone(),
            alpha: self.alpha,
            total: self.partition.total,
            log_score: self.log_score,
            tree,
        }
    }

    /// Rebuilds an evaluation-only estimator (samples are not stored).
    pub fn from_record(rec: &DensityRecord) -> Result<Self> {
        let mut nodes: Vec<Arc<Node>> = Vec::new();
        let mut leaves = Vec::new();
        let mut masses = Vec::new();
        let mut densities = Vec::new();
        fn build(
            rec: &NodeRecord,
            cell: Cell,
            dim: usize,
            nodes: &mut Vec<Arc<Node>>,
            leaves: &mut Vec<usize>,
            masses: &mut Vec<f64>,
            densities: &mut Vec<f64>,
        ) -> Result<usize> {
            let id = nodes.len();
            match rec {
                NodeRecord::Leaf {
                    count,
                    volume,
                    mass,
                    density,
                    ..
                } => {
                    let stats = LeafStats {
                        count: *count,
                        volume: *volume,
                        members: Vec::new(),
                        lower_counts: vec![0; dim],
                        fraction: inside_fraction(*volume, &cell),
                        child_volumes: vec![[0.0; 2]; dim],
                        child_fractions: vec![[0.0; 2]; dim],
                        coincident: vec![false; dim],
                        cut_terms: OnceLock::new(),
                    };
                    nodes.push(Arc::new(Node {
                        cell,
                        kind: NodeKind::Leaf(Arc::new(stats)),
                    }));
                    leaves.push(id);
                    masses.push(*mass);
                    densities.push(*density);
                }
                NodeRecord::Split {
                    axis,
                    position,
                    lower,
                    upper,
                } => {
                    if *axis >= dim {
                        return Err(Error::Argument(format!(
                            "partition record cuts axis {axis} of a {dim}-d domain"
                        )));
                    }
                    let (lc, uc) = cell.split(*axis);
                    if lc.hi[*axis] != *position {
                        return Err(Error::Argument(
                            "partition record cut is not at the cell midpoint".into(),
                        ));
                    }
                    nodes.push(Arc::new(Node {
                        cell: cell.clone(),
                        kind: NodeKind::Split {
                            axis: *axis,
                            position: *position,
                            lower: 0,
                            upper: 0,
                        },
                    }));
                    let l = build(lower, lc, dim, nodes, leaves, masses, densities)?;
                    let u = build(upper, uc, dim, nodes, leaves, masses, densities)?;
                    nodes[id] = Arc::new(Node {
                        cell,
                        kind: NodeKind::Split {
                            axis: *axis,
                            position: *position,
                            lower: l,
                            upper: u,
                        },
                    });
                }
            }
            Ok(id)
        }
        build(
            &rec.tree,
            rec.domain.clone(),
            rec.dim,
            &mut nodes,
            &mut leaves,
            &mut masses,
            &mut densities,
        )?;
        let leaf_stats: Vec<&LeafStats> = leaves
            .iter()
            .filter_map(|&id| match &nodes[id].kind {
                NodeKind::Leaf(s) => Some(s.as_ref()),
                NodeKind::Split { .. } => None,
            })
            .collect();
        let effective = leaf_stats.iter().filter(|s| s.volume > 0.0).count();
        let fraction_sum = leaf_stats.iter().map(|s| s.fraction).sum();
        let partition = BinaryPartition {
            domain: rec.domain.clone(),
            region: Arc::new(rec.region.clone()),
            points: Arc::new(Points {
                dim: rec.dim,
                data: Vec::new(),
            }),
            nodes,
            leaves,
            total: rec.total,
            effective,
            fraction_sum,
            detached: true,
        };
        Ok(Self {
            partition,
            alpha: rec.alpha,
            log_score: rec.log_score,
            masses,
            densities,
        })
    }
}

/// Nested record of a fitted estimator: cut tree, counts, volumes and masses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityRecord {
    pub dim: usize,
    pub domain: Cell,
    pub region: RegionIndicator,
    pub alpha: f64,
    pub total: usize,
    pub log_score: f64,
    pub tree: NodeRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeRecord {
    Leaf {
        lo: Vec<f64>,
        hi: Vec<f64>,
        count: usize,
        volume: f64,
        mass: f64,
        density: f64,
    },
    Split {
        axis: usize,
        position: f64,
        lower: Box<NodeRecord>,
        upper: Box<NodeRecord>,
    },
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn systematic_resample<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let m = weights.len();
    let total: f64 = weights.iter().sum();
    let step = total / m as f64;
    let mut u = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(m);
    let mut cum = weights[0];
    let mut i = 0;
    for _ in 0..m {
        while u > cum && i + 1 < m {
            i += 1;
            cum += weights[i];
        }
        out.push(i);
        u += step;
    }
    out
}

/// Minimum leaf width, relative to the domain, that may still be cut.
const MIN_RELATIVE_WIDTH: f64 = 1e-9;

/// Runs BSP on `samples` and returns the highest-posterior partition seen.
pub fn bsp_estimate<R: Rng + ?Sized>(
    samples: &[Vec<f64>],
    domain: &Cell,
    region: Option<&RegionIndicator>,
    settings: &BspSettings,
    rng: &mut R,
) -> Result<PiecewiseConstantDensity> {
    if samples.is_empty() {
        return Err(Error::Argument(
            "density estimation needs at least one sample".into(),
        ));
    }
    if settings.particles == 0 || settings.max_leaves == 0 || !(settings.alpha > 0.0) {
        return Err(Error::Argument(
            "BSP needs particles >= 1, max_leaves >= 1 and alpha > 0".into(),
        ));
    }
    let root = BinaryPartition::new(domain.clone(), region.cloned(), samples)?;
    let n = samples.len();
    let beta = settings.resolved_beta(n);
    let tables = ScoreTables::new(settings.alpha, beta);
    let min_width: Vec<f64> = (0..domain.dim())
        .map(|d| MIN_RELATIVE_WIDTH * domain.width(d))
        .collect();

    let m = settings.particles;
    let root_score = log_partition_score(&root, settings.alpha, beta);
    let mut particles = vec![root.clone(); m];
    let mut scores = vec![root_score; m];
    let mut log_w = vec![0.0; m];
    let mut best = (root_score, root);
    let mut stall = 0;
    let mut deltas = Vec::new();
    let mut cands = Vec::new();

    while particles[0].leaf_count() < settings.max_leaves {
        let mut grew = false;
        for i in 0..m {
            let p = &particles[i];
            deltas.clear();
            cands.clear();
            let g = tables.global(p);
            for pos in 0..p.leaf_count() {
                let (cell, stats) = p.leaf(pos);
                for (axis, &min) in min_width.iter().enumerate() {
                    if cell.width(axis) > min && !stats.coincident[axis] {
                        deltas.push(tables.cut_delta(p, g, pos, axis));
                        cands.push((pos, axis));
                    }
                }
            }
            if cands.is_empty() {
                continue;
            }
            let lse = log_sum_exp(&deltas);
            let mut u = rng.random::<f64>();
            let mut pick = cands.len() - 1;
            for (j, d) in deltas.iter().enumerate() {
                u -= (d - lse).exp();
                if u < 0.0 {
                    pick = j;
                    break;
                }
            }
            let (pos, axis) = cands[pick];
            particles[i] = particles[i].propose_cut(pos, axis)?;
            scores[i] += deltas[pick];
            log_w[i] += lse;
            grew = true;
        }
        if !grew {
            break;
        }
        if log_w.iter().any(|w| !w.is_finite()) {
            return Err(Error::internal("non-finite SIS weight"));
        }
        let (bi, &bs) = scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .expect("m >= 1");
        if bs > best.0 + 1e-9 * best.0.abs().max(1.0) {
            best = (bs, particles[bi].clone());
            stall = 0;
        } else {
            stall += 1;
            if stall >= settings.stall_levels {
                break;
            }
        }
        let wmax = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = log_w.iter().map(|l| (l - wmax).exp()).collect();
        let ess = w.iter().sum::<f64>().powi(2) / w.iter().map(|x| x * x).sum::<f64>();
        if ess < m as f64 / 2.0 {
            let idx = systematic_resample(&w, rng);
            particles = idx.iter().map(|&j| particles[j].clone()).collect();
            scores = idx.iter().map(|&j| scores[j]).collect();
            log_w = vec![0.0; m];
        }
    }
    Ok(PiecewiseConstantDensity::from_partition(
        best.1,
        settings.alpha,
        beta,
    ))
}
