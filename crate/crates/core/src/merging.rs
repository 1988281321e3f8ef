//! Anchor sampling and iterative merging of attention maps into proposals.
//!
//! Distances are the symmetric KL divergence (natural log) between maps
//! floored at `epsilon` and renormalized. The first pass compares each anchor
//! against every map of the aggregated tensor; refinement rounds then merge
//! proposals greedily in index order until a round merges nothing or the
//! iteration budget is spent.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregation::{normalize_distribution, AggregatedTensor};

pub const DEFAULT_GRID: usize = 16;
pub const DEFAULT_TAU: f64 = 1.0;
pub const DEFAULT_ITERATIONS: usize = 3;
pub const DEFAULT_EPSILON: f64 = 1e-12;
pub const MAX_EPSILON: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum MergeError {
    #[error("grid {grid} exceeds target resolution {target}")]
    GridTooLarge { grid: usize, target: usize },
    #[error("invalid parameter '{field}': {detail}")]
    InvalidParam { field: &'static str, detail: String },
    #[error("distribution shapes differ: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("no anchors to merge")]
    NoAnchors,
}

/// How a group of maps is averaged during refinement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    #[default]
    Mean,
    MemberWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MergeParams {
    pub grid: usize,
    pub tau: f64,
    pub iterations: usize,
    pub epsilon: f64,
    #[serde(default)]
    pub averaging: Averaging,
}

impl Default for MergeParams {
    fn default() -> Self {
        Self {
            grid: DEFAULT_GRID,
            tau: DEFAULT_TAU,
            iterations: DEFAULT_ITERATIONS,
            epsilon: DEFAULT_EPSILON,
            averaging: Averaging::Mean,
        }
    }
}

impl MergeParams {
    pub fn validate(&self, target: usize) -> Result<(), MergeError> {
        if self.grid < 1 {
            return Err(MergeError::InvalidParam {
                field: "grid",
                detail: "must be >= 1".into(),
            });
        }
        if self.grid > target {
            return Err(MergeError::GridTooLarge {
                grid: self.grid,
                target,
            });
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(MergeError::InvalidParam {
                field: "tau",
                detail: format!("must be a positive finite number, got {}", self.tau),
            });
        }
        if self.iterations < 1 {
            return Err(MergeError::InvalidParam {
                field: "iters",
                detail: "must be >= 1".into(),
            });
        }
        if !(self.epsilon > 0.0 && self.epsilon <= MAX_EPSILON) {
            return Err(MergeError::InvalidParam {
                field: "epsilon",
                detail: format!("must lie in (0, {MAX_EPSILON}], got {}", self.epsilon),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Proposal {
    pub map: Vec<f64>,
    pub members: usize,
    /// Flat grid indices (`i * R + j`) of the maps averaged into this proposal.
    pub provenance: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub side: usize,
    pub proposals: Vec<Proposal>,
    pub params: MergeParams,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AnchorMap<'a> {
    pub i: usize,
    pub j: usize,
    pub map: &'a [f64],
}

/// Anchor coordinate `m` on an `M`-point axis over `R` cells.
pub fn anchor_coordinate(m: usize, grid: usize, target: usize) -> usize {
    ((m as f64 + 0.5) * target as f64 / grid as f64).floor() as usize
}

/// `M x M` evenly spaced anchors in row-major order.
pub fn sample_anchors(agg: &AggregatedTensor, grid: usize) -> Result<Vec<AnchorMap<'_>>, MergeError> {
    let target = agg.side();
    if grid < 1 {
        return Err(MergeError::InvalidParam {
            field: "grid",
            detail: "must be >= 1".into(),
        });
    }
    if grid > target {
        return Err(MergeError::GridTooLarge { grid, target });
    }
    let coords: Vec<usize> = (0..grid).map(|m| anchor_coordinate(m, grid, target)).collect();
    Ok(coords
        .iter()
        .flat_map(|&i| coords.iter().map(move |&j| (i, j)))
        .map(|(i, j)| AnchorMap {
            i,
            j,
            map: agg.map(i, j),
        })
        .collect())
}

/// A distribution floored at epsilon and renormalized, kept with its logarithm.
struct Floored {
    values: Vec<f64>,
    logs: Vec<f64>,
}

impl Floored {
    fn new(map: &[f64], eps: f64) -> Self {
        let mut values: Vec<f64> = map.iter().map(|&v| if v > eps { v } else { eps }).collect();
        let total: f64 = values.iter().sum();
        let inv = 1.0 / total;
        values.iter_mut().for_each(|v| *v *= inv);
        let logs = values.iter().map(|v| v.ln()).collect();
        Self { values, logs }
    }
}

/// Symmetric KL over pre-floored inputs: `1/2 * sum (p - q)(ln p - ln q)`.
#[inline]
fn symmetric_kl(p: &[f64], lp: &[f64], q: &[f64], lq: &[f64]) -> f64 {
    const LANES: usize = 8;
    let mut acc = [0.0f64; LANES];
    let n = p.len() / LANES * LANES;
    for (((pc, lpc), qc), lqc) in p[..n]
        .chunks_exact(LANES)
        .zip(lp[..n].chunks_exact(LANES))
        .zip(q[..n].chunks_exact(LANES))
        .zip(lq[..n].chunks_exact(LANES))
    {
        for k in 0..LANES {
            acc[k] += (pc[k] - qc[k]) * (lpc[k] - lqc[k]);
        }
    }
    let mut tail = 0.0;
    for k in n..p.len() {
        tail += (p[k] - q[k]) * (lp[k] - lq[k]);
    }
    let lanes = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    0.5 * (lanes + tail)
}

pub fn kl_distance(p: &[f64], q: &[f64], eps: f64) -> Result<f64, MergeError> {
    if p.len() != q.len() {
        return Err(MergeError::ShapeMismatch(p.len(), q.len()));
    }
    let fp = Floored::new(p, eps);
    let fq = Floored::new(q, eps);
    Ok(symmetric_kl(&fp.values, &fp.logs, &fq.values, &fq.logs).max(0.0))
}

/// Flooring of every map in the aggregated tensor, computed once per pass.
struct FlooredTensor {
    cells: usize,
    values: Vec<f64>,
    logs: Vec<f64>,
}

impl FlooredTensor {
    fn new(agg: &AggregatedTensor, eps: f64) -> Self {
        let cells = agg.cells();
        let mut values = agg.data().to_vec();
        let mut logs = vec![0.0; values.len()];
        values
            .par_chunks_mut(cells)
            .zip(logs.par_chunks_mut(cells))
            .for_each(|(v, l)| {
                let f = Floored::new(v, eps);
                v.copy_from_slice(&f.values);
                l.copy_from_slice(&f.logs);
            });
        Self { cells, values, logs }
    }

    fn values(&self, flat: usize) -> &[f64] {
        &self.values[flat * self.cells..(flat + 1) * self.cells]
    }

    fn logs(&self, flat: usize) -> &[f64] {
        &self.logs[flat * self.cells..(flat + 1) * self.cells]
    }
}

fn mean_of<'a>(maps: impl Iterator<Item = (&'a [f64], f64)>, cells: usize) -> Vec<f64> {
    let mut sum = vec![0.0f64; cells];
    let mut total_weight = 0.0;
    for (map, w) in maps {
        for (s, v) in sum.iter_mut().zip(map) {
            *s += w * v;
        }
        total_weight += w;
    }
    for s in sum.iter_mut() {
        *s /= total_weight;
    }
    normalize_distribution(&mut sum);
    sum
}

/// First merge pass: each anchor averages every map within `tau` of it.
pub fn merge_first_pass(
    agg: &AggregatedTensor,
    anchors: &[AnchorMap<'_>],
    params: &MergeParams,
) -> Result<ProposalSet, MergeError> {
    if anchors.is_empty() {
        return Err(MergeError::NoAnchors);
    }
    let cells = agg.cells();
    let floored = FlooredTensor::new(agg, params.epsilon);
    let maps = agg.map_count();

    let proposals = anchors
        .par_iter()
        .map(|anchor| {
            let a = Floored::new(anchor.map, params.epsilon);
            let provenance: Vec<usize> = (0..maps)
                .filter(|&m| {
                    symmetric_kl(&a.values, &a.logs, floored.values(m), floored.logs(m)) < params.tau
                })
                .collect();
            // self-distance is exactly zero, so the anchor's own map is always in
            debug_assert!(provenance.contains(&(anchor.i * agg.side() + anchor.j)));
            let map = mean_of(provenance.iter().map(|&m| (agg.map_at(m), 1.0)), cells);
            Proposal {
                map,
                members: provenance.len(),
                provenance,
            }
        })
        .collect();

    Ok(ProposalSet {
        side: agg.side(),
        proposals,
        params: *params,
    })
}

/// Refinement rounds over proposals; `iterations` counts the first pass.
pub fn merge_refine(mut set: ProposalSet, tau: f64, iterations: usize, eps: f64) -> ProposalSet {
    let averaging = set.params.averaging;
    let cells = set.side * set.side;
    let mut cache: Vec<Floored> = set
        .proposals
        .par_iter()
        .map(|p| Floored::new(&p.map, eps))
        .collect();

    for _ in 1..iterations {
        let mut merged_any = false;
        let mut i = 0;
        while i < set.proposals.len() {
            let head = &cache[i];
            let group: Vec<usize> = ((i + 1)..set.proposals.len())
                .into_par_iter()
                .filter(|&j| {
                    symmetric_kl(&head.values, &head.logs, &cache[j].values, &cache[j].logs) < tau
                })
                .collect();
            if !group.is_empty() {
                merged_any = true;
                let members: Vec<usize> = std::iter::once(i).chain(group.iter().copied()).collect();
                let map = {
                    let parts = members.iter().map(|&m| {
                        let p = &set.proposals[m];
                        let w = match averaging {
                            Averaging::Mean => 1.0,
                            Averaging::MemberWeighted => p.members as f64,
                        };
                        (p.map.as_slice(), w)
                    });
                    mean_of(parts, cells)
                };
                let mut provenance = Vec::new();
                let mut count = 0;
                for &m in &members {
                    provenance.extend_from_slice(&set.proposals[m].provenance);
                    count += set.proposals[m].members;
                }
                for &j in group.iter().rev() {
                    set.proposals.remove(j);
                    cache.remove(j);
                }
                cache[i] = Floored::new(&map, eps);
                set.proposals[i] = Proposal {
                    map,
                    members: count,
                    provenance,
                };
            }
            i += 1;
        }
        if !merged_any {
            break;
        }
    }
    set.params.tau = tau;
    set.params.iterations = iterations;
    set.params.epsilon = eps;
    set
}

/// Full merge stage: the anchor pass followed by refinement rounds.
pub fn merge(agg: &AggregatedTensor, params: &MergeParams) -> Result<ProposalSet, MergeError> {
    params.validate(agg.side())?;
    let anchors = sample_anchors(agg, params.grid)?;
    let first = merge_first_pass(agg, &anchors, params)?;
    Ok(merge_refine(first, params.tau, params.iterations, params.epsilon))
}
