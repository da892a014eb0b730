//! Euclidean k-means with k-means++ seeding, used to initialize codebooks.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the closest centroid.
pub fn nearest(point: ArrayView1<'_, f64>, centroids: ArrayView2<'_, f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Sum of squared distances from each point to its nearest centroid.
pub fn inertia(points: ArrayView2<'_, f64>, centroids: ArrayView2<'_, f64>) -> f64 {
    points.rows().into_iter().map(|p| nearest(p, centroids).1).sum()
}

/// k-means++ seeding: first centre uniform, the rest proportional to D².
pub fn plus_plus_seeds<R: Rng>(points: ArrayView2<'_, f64>, k: usize, rng: &mut R) -> Array2<f64> {
    let n = points.nrows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = points
        .rows()
        .into_iter()
        .map(|p| sq_dist(p, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            // all remaining points coincide with a centre
            rng.random_range(0..n)
        } else {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        };
        chosen.push(next);
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(next)));
        }
    }
    points.select(Axis(0), &chosen)
}

/// Lloyd iterations from `centroids` until assignments stop changing or
/// `max_iter` is reached. Empty clusters keep their previous centre.
pub fn lloyd(points: ArrayView2<'_, f64>, mut centroids: Array2<f64>, max_iter: usize) -> Array2<f64> {
    let k = centroids.nrows();
    let mut labels = vec![usize::MAX; points.nrows()];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, p) in points.rows().into_iter().enumerate() {
            let (j, _) = nearest(p, centroids.view());
            if labels[i] != j {
                labels[i] = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros(centroids.dim());
        let mut counts = vec![0usize; k];
        for (i, p) in points.rows().into_iter().enumerate() {
            let mut row = sums.row_mut(labels[i]);
            row += &p;
            counts[labels[i]] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                let mean = &sums.row(j) / counts[j] as f64;
                centroids.row_mut(j).assign(&mean);
            }
        }
    }
    centroids
}

pub fn kmeans<R: Rng>(points: ArrayView2<'_, f64>, k: usize, max_iter: usize, rng: &mut R) -> Array2<f64> {
    let seeds = plus_plus_seeds(points, k, rng);
    lloyd(points, seeds, max_iter)
}
