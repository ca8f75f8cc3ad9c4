//! Lloyd's k-means with k-means++ seeding on row-major points.

use rand::Rng;

use crate::model::Points;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    pub centers: Points,
    pub labels: Vec<usize>,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest center; ties go to the lower index.
pub fn nearest(row: &[f64], centers: &Points) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.rows().enumerate() {
        let d = sq_dist(row, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// k-means++ seeds. Returns fewer than `k` centers when the points have
/// fewer distinct values.
pub fn seed_plus_plus<R: Rng + ?Sized>(points: &Points, k: usize, rng: &mut R) -> Points {
    let n = points.len();
    let mut centers = Points::empty(points.dim());
    if n == 0 || k == 0 {
        return centers;
    }
    centers.push(points.row(rng.random_range(0..n)));
    let mut dist: Vec<f64> = points.rows().map(|r| sq_dist(r, centers.row(0))).collect();
    while centers.len() < k {
        let total: f64 = dist.iter().sum();
        if total <= 0.0 {
            break;
        }
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = n - 1;
        for (i, d) in dist.iter().enumerate() {
            acc += d;
            if u < acc {
                pick = i;
                break;
            }
        }
        centers.push(points.row(pick));
        let c = centers.len() - 1;
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centers.row(c)));
        }
    }
    centers
}

pub fn kmeans<R: Rng + ?Sized>(points: &Points, k: usize, max_iter: usize, rng: &mut R) -> KMeans {
    let dim = points.dim();
    let mut centers = seed_plus_plus(points, k, rng);
    let mut labels: Vec<usize> = points.rows().map(|r| nearest(r, &centers)).collect();
    for _ in 0..max_iter {
        let m = centers.len();
        let mut sums = vec![0.0; m * dim];
        let mut counts = vec![0usize; m];
        for (row, &lab) in points.rows().zip(&labels) {
            counts[lab] += 1;
            for (s, v) in sums[lab * dim..(lab + 1) * dim].iter_mut().zip(row) {
                *s += v;
            }
        }
        let mut next = Points::empty(dim);
        for j in 0..m {
            if counts[j] == 0 {
                next.push(centers.row(j));
            } else {
                let c: Vec<f64> = sums[j * dim..(j + 1) * dim]
                    .iter()
                    .map(|s| s / counts[j] as f64)
                    .collect();
                next.push(&c);
            }
        }
        centers = next;
        let relabeled: Vec<usize> = points.rows().map(|r| nearest(r, &centers)).collect();
        if relabeled == labels {
            break;
        }
        labels = relabeled;
    }
    KMeans { centers, labels }
}
