//! Independent reference implementations used by the integration tests.
//!
//! Nothing here calls into the library's numeric code: the bilinear kernel,
//! the aggregator, the KL distance and the merger are re-derived from their
//! definitions and written for clarity over speed.

#![allow(dead_code)]

use attnmask::stack::{
    AttentionStack, AttentionTensor, CaptureMetadata, CrossAttentionTensor, Resolution,
};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

/// Four-tap bilinear with half-pixel centers and edge clamping, one output
/// pixel at a time.
pub fn bilinear(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |d: usize, s: usize, o: usize| -> (usize, usize, f64) {
        let x = ((d as f64 + 0.5) * s as f64 / o as f64 - 0.5).clamp(0.0, (s - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(s - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let (y0, y1, fy) = coord(y, h, out_h);
        for x in 0..out_w {
            let (x0, x1, fx) = coord(x, w, out_w);
            let v = (1.0 - fy) * (1.0 - fx) * src[y0 * w + x0]
                + (1.0 - fy) * fx * src[y0 * w + x1]
                + fy * (1.0 - fx) * src[y1 * w + x0]
                + fy * fx * src[y1 * w + x1];
            out.push(v);
        }
    }
    out
}

pub fn proportional_weights(sides: &[usize]) -> Vec<f64> {
    let total: usize = sides.iter().sum();
    sides.iter().map(|&s| s as f64 / total as f64).collect()
}

/// Direct evaluation of the weighted multi-resolution sum, one target
/// location at a time, normalized once at the end. Returns `r^4` values.
pub fn aggregate(stack: &AttentionStack, weights: &[f64], r: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * r * r * r];
    for big_i in 0..r {
        for big_j in 0..r {
            let mut acc = vec![0.0; r * r];
            for (layer, &wk) in stack.self_attention.iter().zip(weights) {
                let s = layer.resolution.side();
                let delta = r / s;
                let (i, j) = (big_i / delta, big_j / delta);
                let base = (i * s + j) * s * s;
                let map: Vec<f64> = layer.data[base..base + s * s].iter().map(|&v| v as f64).collect();
                let up = bilinear(&map, s, s, r, r);
                for (a, u) in acc.iter_mut().zip(&up) {
                    *a += wk * u;
                }
            }
            let total: f64 = acc.iter().sum();
            let dst = &mut out[(big_i * r + big_j) * r * r..][..r * r];
            for (d, a) in dst.iter_mut().zip(&acc) {
                *d = if total > 0.0 { a / total } else { 1.0 / (r * r) as f64 };
            }
        }
    }
    out
}

fn floor_renorm(p: &[f64], eps: f64) -> Vec<f64> {
    let f: Vec<f64> = p.iter().map(|&v| v.max(eps)).collect();
    let s: f64 = f.iter().sum();
    f.into_iter().map(|v| v / s).collect()
}

/// Symmetric KL written as the average of the two one-sided divergences.
pub fn sym_kl(p: &[f64], q: &[f64], eps: f64) -> f64 {
    let p = floor_renorm(p, eps);
    let q = floor_renorm(q, eps);
    let kl = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| x * (x / y).ln()).sum() };
    0.5 * (kl(&p, &q) + kl(&q, &p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefProposal {
    pub map: Vec<f64>,
    pub members: usize,
    pub provenance: Vec<usize>,
}

fn normalized_mean(maps: &[&[f64]]) -> Vec<f64> {
    let cells = maps[0].len();
    let mut sum = vec![0.0; cells];
    for m in maps {
        for (s, v) in sum.iter_mut().zip(m.iter()) {
            *s += v;
        }
    }
    let total: f64 = sum.iter().sum();
    sum.into_iter().map(|v| v / total).collect()
}

/// Brute-force merger. Each round first tabulates every pairwise distance,
/// then groups greedily by index using only that table.
pub fn merge(
    agg: &[f64],
    r: usize,
    grid: usize,
    tau: f64,
    iterations: usize,
    eps: f64,
) -> Vec<RefProposal> {
    let cells = r * r;
    let map = |flat: usize| &agg[flat * cells..(flat + 1) * cells];
    let coords: Vec<usize> = (0..grid).map(|m| ((2 * m + 1) * r) / (2 * grid)).collect();
    let anchors: Vec<usize> = coords
        .iter()
        .flat_map(|&i| coords.iter().map(move |&j| i * r + j))
        .collect();

    let table: Vec<Vec<f64>> = anchors
        .iter()
        .map(|&a| (0..cells).map(|m| sym_kl(map(a), map(m), eps)).collect())
        .collect();
    let mut proposals: Vec<RefProposal> = table
        .iter()
        .map(|row| {
            let provenance: Vec<usize> = (0..cells).filter(|&m| row[m] < tau).collect();
            let maps: Vec<&[f64]> = provenance.iter().map(|&m| map(m)).collect();
            RefProposal {
                map: normalized_mean(&maps),
                members: provenance.len(),
                provenance,
            }
        })
        .collect();

    for _ in 1..iterations {
        let n = proposals.len();
        let d: Vec<Vec<f64>> = (0..n)
            .map(|a| (0..n).map(|b| sym_kl(&proposals[a].map, &proposals[b].map, eps)).collect())
            .collect();
        let mut absorbed = vec![false; n];
        let mut next = Vec::new();
        for i in 0..n {
            if absorbed[i] {
                continue;
            }
            let group: Vec<usize> = ((i + 1)..n).filter(|&j| !absorbed[j] && d[i][j] < tau).collect();
            if group.is_empty() {
                next.push(proposals[i].clone());
                continue;
            }
            let all: Vec<usize> = std::iter::once(i).chain(group.iter().copied()).collect();
            let maps: Vec<&[f64]> = all.iter().map(|&k| proposals[k].map.as_slice()).collect();
            next.push(RefProposal {
                map: normalized_mean(&maps),
                members: all.iter().map(|&k| proposals[k].members).sum(),
                provenance: all.iter().flat_map(|&k| proposals[k].provenance.clone()).collect(),
            });
            for j in group {
                absorbed[j] = true;
            }
        }
        let merged = next.len() < n;
        proposals = next;
        if !merged {
            break;
        }
    }
    proposals
}

/// A random distribution over `cells`, with a sprinkling of exact zeros.
pub fn random_distribution(rng: &mut StdRng, cells: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..cells)
        .map(|_| if rng.random_bool(0.1) { 0.0 } else { rng.random::<f64>().powi(3) })
        .collect();
    if v.iter().all(|&x| x == 0.0) {
        v[rng.random_range(0..cells)] = 1.0;
    }
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

fn f32_distribution(rng: &mut StdRng, cells: usize) -> Vec<f32> {
    random_distribution(rng, cells).into_iter().map(|v| v as f32).collect()
}

/// Random valid stack: target in {1,2,4,8}, up to four layers at sides
/// dividing it, optional cross-attention.
pub fn random_stack(rng: &mut StdRng, max_target: usize, max_layers: usize) -> (AttentionStack, usize) {
    let targets: Vec<usize> = [1, 2, 4, 8].into_iter().filter(|&t| t <= max_target).collect();
    let r = targets[rng.random_range(0..targets.len())];
    let sides: Vec<usize> = (1..=r).filter(|&s| r.is_multiple_of(s)).collect();
    let layers = rng.random_range(1..=max_layers);
    let mut self_attention = Vec::new();
    let mut cross = Vec::new();
    let tokens = rng.random_range(1..=4usize);
    let with_cross = rng.random_bool(0.5);
    for k in 0..layers {
        let s = sides[rng.random_range(0..sides.len())];
        let cells = s * s;
        let data: Vec<f32> = (0..cells).flat_map(|_| f32_distribution(rng, cells)).collect();
        let res = Resolution::new(s).unwrap();
        self_attention.push(AttentionTensor::new(2 * k as u32 + 1, res, data));
        if with_cross {
            let cd: Vec<f32> = (0..cells).flat_map(|_| f32_distribution(rng, tokens)).collect();
            cross.push(CrossAttentionTensor::new(2 * k as u32 + 1, res, tokens, cd));
        }
    }
    let metadata = CaptureMetadata {
        prompt: if with_cross { "wound".into() } else { String::new() },
        token_strings: if with_cross {
            (0..tokens).map(|t| format!("tok{t}")).collect()
        } else {
            Vec::new()
        },
        timestep: rng.random_range(1..1000),
        image_source: format!("random-{}", rng.random::<u32>()),
        latent_size: r as u32,
        ..CaptureMetadata::default()
    };
    (
        AttentionStack {
            self_attention,
            cross_attention: with_cross.then_some(cross),
            metadata,
        },
        r,
    )
}

/// Maps clustered around a few prototypes so that merges actually happen.
pub fn clustered_maps(rng: &mut StdRng, r: usize) -> Vec<f64> {
    let cells = r * r;
    let k = rng.random_range(1..=4usize);
    let protos: Vec<Vec<f64>> = (0..k).map(|_| random_distribution(rng, cells)).collect();
    let mut out = Vec::with_capacity(cells * cells);
    for _ in 0..cells {
        let p = &protos[rng.random_range(0..k)];
        let noise = random_distribution(rng, cells);
        let mix = rng.random_range(0.0..0.5);
        out.extend(p.iter().zip(&noise).map(|(a, b)| (1.0 - mix) * a + mix * b));
    }
    out
}

/// Object rectangles `(x0, y0, x1, y1)` in unit coordinates.
pub const OBJECTS: [(f64, f64, f64, f64); 3] =
    [(0.1, 0.1, 0.45, 0.5), (0.55, 0.2, 0.9, 0.6), (0.2, 0.65, 0.7, 0.95)];

/// 0 for background, else 1 + the object index.
pub fn object_at(x: f64, y: f64) -> usize {
    OBJECTS
        .iter()
        .position(|&(x0, y0, x1, y1)| x >= x0 && x < x1 && y >= y0 && y < y1)
        .map_or(0, |p| p + 1)
}

/// Structured capture at SD v1.4 scale: a few rectangular "objects", every
/// location attends mostly to its own object.
pub fn structured_stack(census: &[(usize, usize)], seed: u64) -> AttentionStack {
    let mut rng = rng(seed);
    let object_of = |y: f64, x: f64| object_at(x, y);
    let mut self_attention = Vec::new();
    let mut index = 0u32;
    for &(side, count) in census {
        let cells = side * side;
        let owner: Vec<usize> = (0..cells)
            .map(|c| object_of(((c / side) as f64 + 0.5) / side as f64, ((c % side) as f64 + 0.5) / side as f64))
            .collect();
        for _ in 0..count {
            let mut data = Vec::with_capacity(cells * cells);
            let mut row = vec![0.0f64; cells];
            for c in 0..cells {
                let own = owner[c];
                for (z, v) in row.iter_mut().enumerate() {
                    let base = if owner[z] == own { 1.0 } else { 0.02 };
                    *v = base * (0.5 + rng.random::<f64>());
                }
                let s: f64 = row.iter().sum();
                data.extend(row.iter().map(|v| (v / s) as f32));
            }
            self_attention.push(AttentionTensor::new(index, Resolution::new(side).unwrap(), data));
            index += 1;
        }
    }
    AttentionStack {
        self_attention,
        cross_attention: None,
        metadata: CaptureMetadata {
            image_source: format!("synthetic-seed-{seed}"),
            ..CaptureMetadata::default()
        },
    }
}
