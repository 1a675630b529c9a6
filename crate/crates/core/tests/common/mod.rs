//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::Rng;
use region_vlad::{FeatureTensor, Neighbourhood, RegionConfig, RegionSet};

pub type Cell = (usize, usize, usize);

/// Connected regions by explicit flood fill from every unvisited active cell.
pub fn flood_fill_partition(t: &FeatureTensor, cfg: &RegionConfig) -> BTreeSet<BTreeSet<Cell>> {
    let (k, h, w) = t.shape();
    let offsets: Vec<(isize, isize)> = match cfg.neighbourhood {
        Neighbourhood::Four => vec![(-1, 0), (1, 0), (0, -1), (0, 1)],
        Neighbourhood::Eight => (-1..=1)
            .flat_map(|dr| (-1..=1).map(move |dc| (dr, dc)))
            .filter(|&o| o != (0, 0))
            .collect(),
    };
    let mut partition = BTreeSet::new();
    for ch in 0..k {
        let active: Vec<f64> = (0..h)
            .flat_map(|r| (0..w).map(move |c| (r, c)))
            .map(|(r, c)| t.at(ch, r, c))
            .filter(|&v| v > cfg.activation_floor)
            .map(f64::from)
            .collect();
        if active.is_empty() {
            continue;
        }
        let hi = active.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = active.iter().cloned().fold(f64::INFINITY, f64::min);
        let tol = cfg.similarity_tau * (hi - lo);
        if hi == lo {
            let all = (0..h)
                .flat_map(|r| (0..w).map(move |c| (ch, r, c)))
                .filter(|&(_, r, c)| t.at(ch, r, c) > cfg.activation_floor)
                .collect();
            partition.insert(all);
            continue;
        }

        let mut seen = vec![vec![false; w]; h];
        for r in 0..h {
            for c in 0..w {
                if seen[r][c] || t.at(ch, r, c) <= cfg.activation_floor {
                    continue;
                }
                let mut region = BTreeSet::new();
                let mut stack = vec![(r, c)];
                seen[r][c] = true;
                while let Some((cr, cc)) = stack.pop() {
                    region.insert((ch, cr, cc));
                    let here = f64::from(t.at(ch, cr, cc));
                    for &(dr, dc) in &offsets {
                        let (nr, nc) = (cr as isize + dr, cc as isize + dc);
                        if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                            continue;
                        }
                        let (nr, nc) = (nr as usize, nc as usize);
                        let there = t.at(ch, nr, nc);
                        if !seen[nr][nc]
                            && there > cfg.activation_floor
                            && (here - f64::from(there)).abs() <= tol
                        {
                            seen[nr][nc] = true;
                            stack.push((nr, nc));
                        }
                    }
                }
                partition.insert(region);
            }
        }
    }
    partition
}

pub fn partition_of(set: &RegionSet) -> BTreeSet<BTreeSet<Cell>> {
    set.regions
        .iter()
        .map(|r| r.pixels.iter().map(|&(row, col)| (r.channel, row, col)).collect())
        .collect()
}

/// Nested-loop sum of local descriptors over an inclusive box.
pub fn bbox_sum(t: &FeatureTensor, rows: (usize, usize), cols: (usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; t.channels()];
    for i in rows.0..=rows.1 {
        for j in cols.0..=cols.1 {
            for (k, acc) in out.iter_mut().enumerate() {
                *acc += f64::from(t.at(k, i, j));
            }
        }
    }
    out
}

/// Brute-force nearest centroid, lowest index on ties.
pub fn nearest_brute(row: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (u, c) in centroids.iter().enumerate() {
        let d: f64 = row.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best_d {
            best = u;
            best_d = d;
        }
    }
    best
}

/// Straight-line VLAD: residual sums, signed power, per-row unit norm.
pub fn vlad_reference(rows: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>], gamma: f64) -> Vec<Vec<f64>> {
    let dim = centroids[0].len();
    let mut out = vec![vec![0.0; dim]; centroids.len()];
    for (row, &u) in rows.iter().zip(labels) {
        for d in 0..dim {
            out[u][d] += row[d] - centroids[u][d];
        }
    }
    for v in &mut out {
        for x in v.iter_mut() {
            *x = if *x < 0.0 { -(-*x).powf(gamma) } else { x.powf(gamma) };
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            for x in v.iter_mut() {
                *x /= norm;
            }
        }
    }
    out
}

/// Sum of per-row cosines, recomputed from scratch.
pub fn score_reference(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            if nx == 0.0 || ny == 0.0 {
                0.0
            } else {
                x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>() / (nx * ny)
            }
        })
        .sum()
}

pub fn random_tensor(rng: &mut impl Rng, id: &str, k: usize, h: usize, w: usize) -> FeatureTensor {
    let data = (0..k * h * w).map(|_| rng.random_range(0.0f32..10.0)).collect();
    FeatureTensor::new(id, k, h, w, data).unwrap()
}

pub fn quantized_tensor(rng: &mut impl Rng, id: &str, k: usize, h: usize, w: usize, levels: u32) -> FeatureTensor {
    let data = (0..k * h * w).map(|_| rng.random_range(0..levels) as f32).collect();
    FeatureTensor::new(id, k, h, w, data).unwrap()
}

pub fn relative_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(f64::MIN_POSITIVE)
}
