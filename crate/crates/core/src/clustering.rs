//! k-means (Lloyd iterations from k-means++ seeding) and automated elbow
//! selection of the number of means.

use std::collections::HashSet;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ITERATIONS: usize = 300;
pub const CENTER_TOLERANCE: f64 = 1e-8;

/// Above this many `n·k·d` multiply-adds the assignment step uses the
/// `|x|² - 2x·c + |c|²` expansion through a matrix product.
const GEMM_THRESHOLD: usize = 1 << 22;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    pub centers: Vec<Vec<f64>>,
    pub k: usize,
    /// Sum of squared distances of the fitted points to their nearest center.
    pub inertia: f64,
    /// Mean Euclidean distance of the fitted points to their nearest center.
    pub mean_center_distance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub cluster: usize,
    pub distance: f64,
    /// `distance / mean_center_distance`; 0 for a zero distance and +∞ for a
    /// positive distance when the mean distance is zero.
    pub normalized: f64,
}

impl ClusterSet {
    pub fn dim(&self) -> usize {
        self.centers.first().map_or(0, Vec::len)
    }

    /// Nearest center by Euclidean distance, lowest id on ties.
    pub fn assign(&self, point: &[f64]) -> Result<Assignment> {
        if point.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: point.len(),
            });
        }
        let mut best = 0;
        let mut best_sq = f64::INFINITY;
        for (id, c) in self.centers.iter().enumerate() {
            let sq = squared_distance(point, c);
            if sq < best_sq {
                best_sq = sq;
                best = id;
            }
        }
        let distance = best_sq.sqrt();
        Ok(Assignment {
            cluster: best,
            distance,
            normalized: normalize(distance, self.mean_center_distance),
        })
    }
}

fn normalize(distance: f64, mean: f64) -> f64 {
    if mean > 0.0 {
        distance / mean
    } else if distance == 0.0 {
        0.0
    } else {
        f64::INFINITY
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn row_sq_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Number of distinct rows, counting at most up to `cap`.
pub fn distinct_rows(points: ArrayView2<'_, f64>, cap: usize) -> usize {
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    for row in points.rows() {
        seen.insert(row.iter().map(|v| (v + 0.0).to_bits()).collect());
        if seen.len() >= cap {
            break;
        }
    }
    seen.len()
}

/// Best-of-`restarts` k-means fit. Each restart seeds with k-means++ and runs
/// Lloyd iterations until every center moves less than 1e-8 or 300
/// iterations pass.
pub fn kmeans(points: ArrayView2<'_, f64>, k: usize, seed: u64, restarts: usize) -> Result<ClusterSet> {
    Ok(kmeans_traced(points, k, seed, restarts)?.0)
}

/// As [`kmeans`], also returning the per-iteration inertia of the winning restart.
pub fn kmeans_traced(
    points: ArrayView2<'_, f64>,
    k: usize,
    seed: u64,
    restarts: usize,
) -> Result<(ClusterSet, Vec<f64>)> {
    if points.nrows() == 0 {
        return Err(Error::Empty("point set"));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    if restarts == 0 {
        return Err(Error::InvalidArgument("restarts must be positive".into()));
    }
    let distinct = distinct_rows(points, k);
    if distinct < k {
        return Err(Error::TooFewDistinctPoints { k, distinct });
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(seed);
    let seeds: Vec<u64> = (0..restarts).map(|_| seeder.gen()).collect();
    let norms: Array1<f64> = points.rows().into_iter().map(|r| r.dot(&r)).collect();

    let fits: Vec<(ClusterSet, Vec<f64>)> = seeds
        .par_iter()
        .map(|&s| lloyd(points, &norms, k, s))
        .collect();
    let (best, _) = fits
        .iter()
        .enumerate()
        .min_by(|(ia, a), (ib, b)| a.0.inertia.total_cmp(&b.0.inertia).then(ia.cmp(ib)))
        .map(|(i, f)| (f.clone(), i))
        .expect("at least one restart");
    Ok(best)
}

fn kmeanspp(points: ArrayView2<'_, f64>, k: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centers = Array2::zeros((k, points.ncols()));
    let first = rng.gen_range(0..n);
    centers.row_mut(0).assign(&points.row(first));
    let mut nearest: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|r| row_sq_distance(r, centers.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            if nearest[chosen] == 0.0 {
                // rounding pushed us past the last positive weight
                chosen = nearest.iter().rposition(|&d| d > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.gen_range(0..n)
        };
        centers.row_mut(c).assign(&points.row(pick));
        for (i, r) in points.rows().into_iter().enumerate() {
            let d = row_sq_distance(r, centers.row(c));
            if d < nearest[i] {
                nearest[i] = d;
            }
        }
    }
    centers
}

/// Nearest center and squared distance per point.
fn assign_all(
    points: ArrayView2<'_, f64>,
    norms: &Array1<f64>,
    centers: &Array2<f64>,
) -> (Vec<usize>, Vec<f64>) {
    let (n, d) = points.dim();
    let k = centers.nrows();
    let mut labels = vec![0usize; n];
    let mut dist = vec![f64::INFINITY; n];
    if n * k * d > GEMM_THRESHOLD {
        let dots = points.dot(&centers.t());
        let cn: Vec<f64> = centers.rows().into_iter().map(|c| c.dot(&c)).collect();
        for i in 0..n {
            for c in 0..k {
                let sq = (norms[i] - 2.0 * dots[[i, c]] + cn[c]).max(0.0);
                if sq < dist[i] {
                    dist[i] = sq;
                    labels[i] = c;
                }
            }
        }
    } else {
        for (i, r) in points.rows().into_iter().enumerate() {
            for (c, center) in centers.rows().into_iter().enumerate() {
                let sq = row_sq_distance(r, center);
                if sq < dist[i] {
                    dist[i] = sq;
                    labels[i] = c;
                }
            }
        }
    }
    (labels, dist)
}

fn lloyd(points: ArrayView2<'_, f64>, norms: &Array1<f64>, k: usize, seed: u64) -> (ClusterSet, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, d) = points.dim();
    let mut centers = kmeanspp(points, k, &mut rng);
    let mut history = Vec::new();

    for _ in 0..MAX_ITERATIONS {
        let (mut labels, mut dist) = assign_all(points, norms, &centers);
        history.push(dist.iter().sum::<f64>());

        let mut counts = vec![0usize; k];
        for &l in &labels {
            counts[l] += 1;
        }
        // reseed empty clusters at the point farthest from its center
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[labels[i]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)));
            let Some(far) = far else { continue };
            counts[labels[far]] -= 1;
            counts[c] = 1;
            labels[far] = c;
            dist[far] = 0.0;
        }

        // running means reproduce identical members exactly
        let mut means = Array2::<f64>::zeros((k, d));
        let mut seen = vec![0usize; k];
        for (i, r) in points.rows().into_iter().enumerate() {
            let c = labels[i];
            seen[c] += 1;
            let inv = 1.0 / seen[c] as f64;
            let mut m = means.row_mut(c);
            m.zip_mut_with(&r, |mv, &x| *mv += (x - *mv) * inv);
        }
        let mut moved: f64 = 0.0;
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            moved = moved.max(row_sq_distance(means.row(c), centers.row(c)).sqrt());
            centers.row_mut(c).assign(&means.row(c));
        }
        if moved < CENTER_TOLERANCE {
            break;
        }
    }

    // exact final statistics against the converged centers
    let centers_vec: Vec<Vec<f64>> = centers.rows().into_iter().map(|r| r.to_vec()).collect();
    let mut inertia = 0.0;
    let mut dist_sum = 0.0;
    for r in points.rows() {
        let best = centers
            .axis_iter(Axis(0))
            .map(|c| row_sq_distance(r, c))
            .fold(f64::INFINITY, f64::min);
        inertia += best;
        dist_sum += best.sqrt();
    }
    history.push(inertia);
    (
        ClusterSet {
            centers: centers_vec,
            k,
            inertia,
            mean_center_distance: dist_sum / n as f64,
        },
        history,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowCurve {
    pub candidates: Vec<usize>,
    pub inertia: Vec<f64>,
    pub selected: usize,
}

/// Index of the interior candidate with the largest discrete second
/// difference `I(k-1) - 2 I(k) + I(k+1)`; ties go to the smaller k. With two
/// candidates the smaller is returned, with one the only one.
pub fn select_elbow(inertia: &[f64]) -> usize {
    match inertia.len() {
        0 | 1 => 0,
        2 => {
            log::warn!("elbow selection over only two candidates; taking the smaller k");
            0
        }
        len => {
            let mut best = 1;
            let mut best_curv = f64::NEG_INFINITY;
            for i in 1..len - 1 {
                let curv = inertia[i - 1] - 2.0 * inertia[i] + inertia[i + 1];
                if curv > best_curv {
                    best_curv = curv;
                    best = i;
                }
            }
            best
        }
    }
}

/// Fits k-means for every candidate k (ascending; candidates exceeding the
/// number of distinct points are dropped) and picks the elbow.
pub fn elbow_select(
    points: ArrayView2<'_, f64>,
    candidates: &[usize],
    seed: u64,
    restarts: usize,
) -> Result<ElbowCurve> {
    if points.nrows() == 0 {
        return Err(Error::Empty("point set"));
    }
    if candidates.is_empty() {
        return Err(Error::Empty("candidate list"));
    }
    if candidates.windows(2).any(|w| w[0] >= w[1]) || candidates[0] == 0 {
        return Err(Error::InvalidArgument(
            "elbow candidates must be positive and strictly ascending".into(),
        ));
    }
    let max_k = *candidates.last().expect("nonempty");
    let distinct = distinct_rows(points, max_k);
    let usable: Vec<usize> = candidates.iter().copied().filter(|&k| k <= distinct).collect();
    if usable.len() < candidates.len() {
        log::debug!(
            "elbow: dropping {} candidates above the {distinct} distinct points",
            candidates.len() - usable.len()
        );
    }
    let inertia = usable
        .iter()
        .map(|&k| kmeans(points, k, seed.wrapping_add(k as u64), restarts).map(|c| c.inertia))
        .collect::<Result<Vec<f64>>>()?;
    let selected = usable[select_elbow(&inertia)];
    Ok(ElbowCurve {
        candidates: usable,
        inertia,
        selected,
    })
}
