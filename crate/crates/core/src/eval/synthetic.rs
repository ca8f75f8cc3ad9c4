//! Four-cluster, eight-component benchmark in two dimensions: a triangle, an
//! L, a cross and an ellipse.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{Gaussian, Matrix, Simplex, Vector};
use crate::model::Points;

#[derive(Debug, Clone)]
pub struct SyntheticSpec {
    pub means: Vec<[f64; 2]>,
    pub covariances: Vec<[f64; 4]>,
    pub cluster_weights: Simplex,
    /// Component indices per cluster, with their within-cluster weights.
    pub clusters: Vec<(Vec<usize>, Simplex)>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        let x = [6.0, 4.0, 8.0, 22.5, 20.0, 22.0, 22.0, 6.5];
        let y = [1.5, 6.0, 6.0, 1.5, 8.0, 31.0, 31.0, 29.0];
        let covariances = vec![
            [4.84, 0.0, 0.0, 2.89],
            [3.61, 5.05, 5.05, 14.44],
            [3.61, -5.05, -5.05, 14.44],
            [12.25, 0.0, 0.0, 3.24],
            [3.24, 0.0, 0.0, 12.25],
            [14.44, 0.0, 0.0, 2.25],
            [2.25, 0.0, 0.0, 17.64],
            [2.25, 4.20, 4.20, 16.00],
        ];
        SyntheticSpec {
            means: x.iter().zip(&y).map(|(a, b)| [*a, *b]).collect(),
            covariances,
            cluster_weights: Simplex::uniform(4),
            clusters: vec![
                (vec![0, 1, 2], Simplex::uniform(3)),
                (vec![3, 4], Simplex::uniform(2)),
                (vec![5, 6], Simplex::uniform(2)),
                (vec![7], Simplex::uniform(1)),
            ],
        }
    }
}

/// Generated points with one-based cluster labels.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub points: Points,
    pub labels: Vec<usize>,
}

impl SyntheticSpec {
    pub fn component(&self, j: usize) -> Result<Gaussian> {
        let m = Vector::from_row_slice(&self.means[j]);
        let c = Matrix::from_row_slice(2, 2, &self.covariances[j]);
        Gaussian::new(&m, &c)
    }

    pub fn generate<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<SyntheticData> {
        if n == 0 {
            return Err(Error::Parameter("sample size must be at least 1".into()));
        }
        let comps = (0..self.means.len())
            .map(|j| self.component(j))
            .collect::<Result<Vec<_>>>()?;
        let mut points = Points::empty(2);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let k = pick(self.cluster_weights.weights(), rng);
            let (members, weights) = &self.clusters[k];
            let j = members[pick(weights.weights(), rng)];
            points.push(&comps[j].sample(rng));
            labels.push(k + 1);
        }
        Ok(SyntheticData { points, labels })
    }
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

pub fn generate_synthetic<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<SyntheticData> {
    SyntheticSpec::default().generate(n, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::stream_rng;

    #[test]
    fn cluster_frequencies_are_quarter() {
        let data = generate_synthetic(100_000, &mut stream_rng(7, 0)).unwrap();
        for k in 1..=4 {
            let f = data.labels.iter().filter(|&&l| l == k).count() as f64 / 1e5;
            // sd of a proportion at p = 1/4 is about 0.00137
            assert!((f - 0.25).abs() < 4.0 * 0.00137, "cluster {k}: {f}");
        }
    }

    #[test]
    fn fourth_cluster_moments() {
        let data = generate_synthetic(100_000, &mut stream_rng(8, 0)).unwrap();
        let idx: Vec<usize> = (0..data.labels.len())
            .filter(|&i| data.labels[i] == 4)
            .collect();
        let pts = data.points.select(&idx);
        let m = pts.mean();
        let c = pts.covariance();
        assert!((m[0] - 6.5).abs() < 0.05 && (m[1] - 29.0).abs() < 0.1);
        let expected = [2.25, 4.20, 4.20, 16.0];
        for (got, want) in c.transpose().iter().zip(expected) {
            assert!(
                (got - want).abs() < 0.05 * want.abs().max(1.0),
                "{got} vs {want}"
            );
        }
    }

    #[test]
    fn zero_size_is_error() {
        assert!(generate_synthetic(0, &mut stream_rng(0, 0)).is_err());
    }
}
