use std::collections::HashSet;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::features::FeatureSequence;
use crate::{Error, Result, Scalar};

/// Magnitude of the uniform jitter applied to duplicated centroids when there
/// are fewer distinct samples than clusters.
const DUPLICATE_JITTER: f64 = 1e-4;

/// Result of [`kmeans`].
#[derive(Debug, Clone)]
pub struct KMeans<T> {
    /// `V·D` centroids, row-major.
    pub centroids: Vec<T>,
    /// Within-cluster squared distance after each assignment step.
    pub objective: Vec<f64>,
}

/// Lloyd's k-means with seeded random-sample initialization.
///
/// Empty clusters keep their previous centroid, and a centroid update is only
/// accepted when it does not increase its cluster's squared error, so the
/// recorded objective is non-increasing.
pub fn kmeans<T: Scalar>(
    samples: &FeatureSequence<T>,
    clusters: usize,
    iters: usize,
    seed: u64,
) -> Result<KMeans<T>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("k-means needs at least one sample".into()));
    }
    if clusters == 0 {
        return Err(Error::InvalidArgument("k-means needs at least one cluster".into()));
    }
    samples.check_finite("k-means samples")?;
    let dim = samples.dim();
    let data: Vec<f64> = samples.as_slice().iter().map(|v| v.as_f64()).collect();
    let n = samples.len();
    let point = |i: usize| &data[i * dim..(i + 1) * dim];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let distinct: Vec<usize> = (0..n)
        .filter(|&i| seen.insert(point(i).iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .collect();

    let mut centroids = Vec::with_capacity(clusters * dim);
    if distinct.len() >= clusters {
        for pick in sample(&mut rng, distinct.len(), clusters) {
            centroids.extend_from_slice(point(distinct[pick]));
        }
    } else {
        for &i in &distinct {
            centroids.extend_from_slice(point(i));
        }
        for _ in distinct.len()..clusters {
            let src = distinct[rng.random_range(0..distinct.len())];
            for &v in point(src) {
                centroids.push(v + rng.random_range(-DUPLICATE_JITTER..=DUPLICATE_JITTER));
            }
        }
    }

    let dist = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum() };

    let mut assignment = vec![0usize; n];
    let mut objective = Vec::with_capacity(iters + 1);
    for iter in 0..=iters {
        // assignment step
        let mut changed = false;
        for (i, slot) in assignment.iter_mut().enumerate() {
            let p = point(i);
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for c in 0..clusters {
                let d = dist(p, &centroids[c * dim..(c + 1) * dim]);
                if d < best_d {
                    best = c;
                    best_d = d;
                }
            }
            if iter == 0 || *slot != best {
                changed = true;
            }
            *slot = best;
        }
        let cluster_sse = |c: &[f64], members: &[usize]| -> f64 { members.iter().map(|&i| dist(point(i), c)).sum() };
        let mut members = vec![Vec::new(); clusters];
        for (i, &a) in assignment.iter().enumerate() {
            members[a].push(i);
        }
        objective.push(
            (0..clusters)
                .map(|c| cluster_sse(&centroids[c * dim..(c + 1) * dim], &members[c]))
                .sum(),
        );
        if iter == iters || (!changed && iter > 0) {
            break;
        }
        // update step
        for (c, m) in members.iter().enumerate() {
            if m.is_empty() {
                continue;
            }
            let mut mean = vec![0.0; dim];
            for &i in m {
                for (acc, &v) in mean.iter_mut().zip(point(i)) {
                    *acc += v;
                }
            }
            mean.iter_mut().for_each(|v| *v /= m.len() as f64);
            let old = &centroids[c * dim..(c + 1) * dim];
            if cluster_sse(&mean, m) <= cluster_sse(old, m) {
                centroids[c * dim..(c + 1) * dim].copy_from_slice(&mean);
            }
        }
    }

    Ok(KMeans {
        centroids: centroids.into_iter().map(T::from_f64).collect(),
        objective,
    })
}
