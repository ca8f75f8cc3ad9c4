//! Random variate generators and log densities shared by every sampler.
//!
//! All densities are evaluated in log space. SPD work goes through a single
//! Cholesky routine that retries once with a small diagonal jitter and then
//! fails hard.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal, StandardUniform};

use crate::error::{Error, Result};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Counter-based generator. Streams are addressed by `(seed, stream)`, so a
/// worker's draws never depend on how other workers are scheduled.
pub type ChainRng = ChaCha8Rng;

pub fn stream_rng(seed: u64, stream: u64) -> ChainRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Probability vector: non-negative weights summing to one.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Simplex(Vec<f64>);

impl Simplex {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::Parameter("simplex needs at least one weight".into()));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Parameter(format!(
                "simplex weights must be finite and non-negative: {weights:?}"
            )));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "simplex weights sum to {total}, not 1"
            )));
        }
        Ok(Simplex(weights))
    }

    pub fn uniform(k: usize) -> Self {
        Simplex(vec![1.0 / k as f64; k])
    }

    pub fn from_log_weights(log_weights: &[f64]) -> Self {
        let lse = log_sum_exp(log_weights);
        Simplex(log_weights.iter().map(|w| (w - lse).exp()).collect())
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// Draws index `i` with probability `exp(lw[i] - logsumexp(lw))`.
pub fn log_categorical_sample<R: Rng + ?Sized>(log_weights: &[f64], rng: &mut R) -> Result<usize> {
    let max = log_weights
        .iter()
        .copied()
        .filter(|w| !w.is_nan())
        .fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Numerical(format!(
            "categorical draw needs a finite log weight, got {log_weights:?}"
        )));
    }
    let total: f64 = log_weights
        .iter()
        .map(|w| if w.is_nan() { 0.0 } else { (w - max).exp() })
        .sum();
    let u: f64 = rng.sample::<f64, _>(StandardUniform) * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in log_weights.iter().enumerate() {
        if w.is_nan() {
            continue;
        }
        let p = (w - max).exp();
        if p > 0.0 {
            last = i;
        }
        acc += p;
        if u < acc {
            return Ok(i);
        }
    }
    Ok(last)
}

/// Gamma draw with the given shape and rate, returned on the log scale so
/// that shapes far below one do not underflow.
pub fn sample_log_gamma<R: Rng + ?Sized>(shape: f64, rng: &mut R) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) {
        return Err(Error::Parameter(format!(
            "gamma shape must be positive, got {shape}"
        )));
    }
    if shape < 1.0 {
        // G(a) = G(a + 1) * U^(1/a)
        let g = Gamma::new(shape + 1.0, 1.0)
            .map_err(|e| Error::Parameter(e.to_string()))?
            .sample(rng);
        let u: f64 = rng.sample(rand_distr::OpenClosed01);
        Ok(g.ln() + u.ln() / shape)
    } else {
        let g = Gamma::new(shape, 1.0)
            .map_err(|e| Error::Parameter(e.to_string()))?
            .sample(rng);
        Ok(g.ln())
    }
}

pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> Result<f64> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(Error::Parameter(format!(
            "gamma rate must be positive, got {rate}"
        )));
    }
    Ok(sample_log_gamma(shape, rng)?.exp() / rate)
}

pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Result<Simplex> {
    if alpha.is_empty() {
        return Err(Error::Parameter(
            "dirichlet needs at least one concentration".into(),
        ));
    }
    if let Some(bad) = alpha.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
        return Err(Error::Parameter(format!(
            "dirichlet concentrations must be positive, got {bad}"
        )));
    }
    let logs = alpha
        .iter()
        .map(|&a| sample_log_gamma(a, rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(Simplex::from_log_weights(&logs))
}

/// Lower Cholesky factor stored row-major, for allocation-free solves in hot
/// loops.
#[derive(Debug, Clone, PartialEq)]
pub struct LowerFactor {
    dim: usize,
    entries: Vec<f64>,
    log_det: f64,
}

impl LowerFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// log |A| of the factored matrix A = L Lᵀ.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn matrix(&self) -> Matrix {
        Matrix::from_row_slice(self.dim, self.dim, &self.entries)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    /// Solves L z = v in place.
    #[inline]
    pub fn solve_lower_in_place(&self, v: &mut [f64]) {
        let d = self.dim;
        for i in 0..d {
            let row = &self.entries[i * d..i * d + i + 1];
            let mut s = v[i];
            for j in 0..i {
                s -= row[j] * v[j];
            }
            v[i] = s / row[i];
        }
    }

    /// Solves Lᵀ z = v in place.
    pub fn solve_upper_in_place(&self, v: &mut [f64]) {
        let d = self.dim;
        for i in (0..d).rev() {
            let mut s = v[i];
            for j in i + 1..d {
                s -= self.entries[j * d + i] * v[j];
            }
            v[i] = s / self.entries[i * d + i];
        }
    }

    /// (x - mean)ᵀ A⁻¹ (x - mean), with `scratch` of length `dim`.
    #[inline]
    pub fn mahalanobis(&self, x: &[f64], mean: &[f64], scratch: &mut [f64]) -> f64 {
        for i in 0..self.dim {
            scratch[i] = x[i] - mean[i];
        }
        self.solve_lower_in_place(scratch);
        scratch.iter().map(|z| z * z).sum()
    }

    /// Returns L z.
    pub fn mul_vec(&self, z: &[f64]) -> Vec<f64> {
        let d = self.dim;
        (0..d)
            .map(|i| (0..=i).map(|j| self.entries[i * d + j] * z[j]).sum())
            .collect()
    }

    /// A⁻¹ from the factor.
    pub fn inverse(&self) -> Matrix {
        let d = self.dim;
        let mut inv = Matrix::zeros(d, d);
        let mut col = vec![0.0; d];
        for c in 0..d {
            col.iter_mut().for_each(|x| *x = 0.0);
            col[c] = 1.0;
            self.solve_lower_in_place(&mut col);
            self.solve_upper_in_place(&mut col);
            for r in 0..d {
                inv[(r, c)] = col[r];
            }
        }
        symmetrize(&inv)
    }
}

pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

fn try_factor(m: &Matrix) -> Option<LowerFactor> {
    let d = m.nrows();
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    let log_det = 2.0 * (0..d).map(|i| l[i * d + i].ln()).sum::<f64>();
    Some(LowerFactor {
        dim: d,
        entries: l,
        log_det,
    })
}

/// Cholesky factorization of a symmetric positive definite matrix. One retry
/// adds `1e-10 * trace / d` to the diagonal; a second failure is an error.
pub fn cholesky(m: &Matrix) -> Result<LowerFactor> {
    let d = m.nrows();
    if d == 0 || m.ncols() != d {
        return Err(Error::Parameter(format!(
            "expected a non-empty square matrix, got {}x{}",
            m.nrows(),
            m.ncols()
        )));
    }
    let sym = symmetrize(m);
    if let Some(f) = try_factor(&sym) {
        return Ok(f);
    }
    let trace = sym.trace();
    if trace.is_finite() && trace > 0.0 {
        let mut jittered = sym.clone();
        let jitter = 1e-10 * trace / d as f64;
        for i in 0..d {
            jittered[(i, i)] += jitter;
        }
        if let Some(f) = try_factor(&jittered) {
            return Ok(f);
        }
    }
    let diag: Vec<f64> = (0..d).map(|i| sym[(i, i)]).collect();
    let min_diag = diag.iter().copied().fold(f64::INFINITY, f64::min);
    let max_diag = diag.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Err(Error::Numerical(format!(
        "cholesky failed on {d}x{d} matrix (trace {trace:.3e}, diagonal range [{min_diag:.3e}, {max_diag:.3e}])"
    )))
}

pub fn spd_inverse(m: &Matrix) -> Result<Matrix> {
    Ok(cholesky(m)?.inverse())
}

fn standard_normals<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Wishart draw with `df` degrees of freedom and scale matrix `scale`
/// (mean `df * scale`), via the Bartlett decomposition.
pub fn sample_wishart<R: Rng + ?Sized>(df: f64, scale: &Matrix, rng: &mut R) -> Result<Matrix> {
    let d = scale.nrows();
    if !(df > d as f64 - 1.0) {
        return Err(Error::Parameter(format!(
            "wishart degrees of freedom {df} must exceed d - 1 = {}",
            d as f64 - 1.0
        )));
    }
    let chol = cholesky(scale)?;
    sample_wishart_factored(df, &chol, rng)
}

pub fn sample_wishart_factored<R: Rng + ?Sized>(
    df: f64,
    scale_factor: &LowerFactor,
    rng: &mut R,
) -> Result<Matrix> {
    let d = scale_factor.dim();
    // Bartlett: A lower triangular, A_ii = sqrt(chi2(df - i)), A_ij ~ N(0,1).
    let mut a = Matrix::zeros(d, d);
    for i in 0..d {
        let chi2 = 2.0 * sample_gamma((df - i as f64) / 2.0, 1.0, rng)?;
        a[(i, i)] = chi2.sqrt();
        for j in 0..i {
            a[(i, j)] = rng.sample(StandardNormal);
        }
    }
    let la = scale_factor.matrix() * a;
    Ok(symmetrize(&(&la * la.transpose())))
}

/// Wishart draw parameterized by its inverse scale (rate) matrix, the form
/// in which the mixture conditionals are written: W(df, R) has mean df R⁻¹.
pub fn sample_wishart_rate<R: Rng + ?Sized>(df: f64, rate: &Matrix, rng: &mut R) -> Result<Matrix> {
    let scale = spd_inverse(rate)?;
    sample_wishart(df, &scale, rng)
}

pub fn sample_mvn<R: Rng + ?Sized>(mean: &Vector, cov: &Matrix, rng: &mut R) -> Result<Vector> {
    if cov.nrows() != mean.len() {
        return Err(Error::Parameter(format!(
            "mean has length {} but covariance is {}x{}",
            mean.len(),
            cov.nrows(),
            cov.ncols()
        )));
    }
    let chol = cholesky(cov)?;
    let z = standard_normals(mean.len(), rng);
    let lz = chol.mul_vec(&z);
    Ok(Vector::from_iterator(
        mean.len(),
        mean.iter().zip(lz).map(|(m, v)| m + v),
    ))
}

/// Draws from N(P⁻¹ h, P⁻¹) given the precision `P` and linear term `h`.
pub fn sample_mvn_canonical<R: Rng + ?Sized>(
    precision: &Matrix,
    linear: &Vector,
    rng: &mut R,
) -> Result<Vector> {
    let chol = cholesky(precision)?;
    let mut mean: Vec<f64> = linear.iter().copied().collect();
    chol.solve_lower_in_place(&mut mean);
    chol.solve_upper_in_place(&mut mean);
    let mut z = standard_normals(linear.len(), rng);
    chol.solve_upper_in_place(&mut z);
    Ok(Vector::from_iterator(
        linear.len(),
        mean.iter().zip(z).map(|(m, v)| m + v),
    ))
}

/// Gaussian with a cached factor of its covariance.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: Vec<f64>,
    factor: LowerFactor,
    log_norm: f64,
}

impl Gaussian {
    pub fn new(mean: &Vector, cov: &Matrix) -> Result<Self> {
        let factor = cholesky(cov)?;
        let d = mean.len() as f64;
        let log_norm = -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + factor.log_det());
        Ok(Gaussian {
            mean: mean.iter().copied().collect(),
            factor,
            log_norm,
        })
    }

    #[inline]
    pub fn log_pdf_with(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        self.log_norm - 0.5 * self.factor.mahalanobis(x, &self.mean, scratch)
    }

    pub fn log_pdf(&self, x: &[f64]) -> f64 {
        let mut scratch = vec![0.0; self.mean.len()];
        self.log_pdf_with(x, &mut scratch)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let z = standard_normals(self.mean.len(), rng);
        self.factor
            .mul_vec(&z)
            .into_iter()
            .zip(&self.mean)
            .map(|(v, m)| v + m)
            .collect()
    }
}

/// Multivariate Student-t with cached factor and normalizing constant.
#[derive(Debug, Clone)]
pub struct StudentT {
    loc: Vec<f64>,
    factor: LowerFactor,
    df: f64,
    log_norm: f64,
}

impl StudentT {
    pub fn new(loc: &Vector, scale: &Matrix, df: f64) -> Result<Self> {
        if !(df > 0.0 && df.is_finite()) {
            return Err(Error::Parameter(format!(
                "student-t df must be positive, got {df}"
            )));
        }
        let factor = cholesky(scale)?;
        let d = loc.len() as f64;
        let log_norm = ln_gamma(0.5 * (df + d))
            - ln_gamma(0.5 * df)
            - 0.5 * d * (df * std::f64::consts::PI).ln()
            - 0.5 * factor.log_det();
        Ok(StudentT {
            loc: loc.iter().copied().collect(),
            factor,
            df,
            log_norm,
        })
    }

    #[inline]
    pub fn log_pdf_with(&self, x: &[f64], scratch: &mut [f64]) -> f64 {
        let d = self.loc.len() as f64;
        let q = self.factor.mahalanobis(x, &self.loc, scratch);
        self.log_norm - 0.5 * (self.df + d) * (q / self.df).ln_1p()
    }
}

pub fn mvt_logpdf(x: &Vector, loc: &Vector, scale: &Matrix, df: f64) -> Result<f64> {
    let t = StudentT::new(loc, scale, df)?;
    let mut scratch = vec![0.0; loc.len()];
    Ok(t.log_pdf_with(x.as_slice(), &mut scratch))
}

pub fn mvn_logpdf(x: &Vector, mean: &Vector, cov: &Matrix) -> Result<f64> {
    Ok(Gaussian::new(mean, cov)?.log_pdf(x.as_slice()))
}

/// Generalized inverse Gaussian draw with density proportional to
/// `x^(p-1) exp(-(a x + b / x) / 2)`.
///
/// Uses the Hörmann–Leydold split: ratio-of-uniforms with mode shift for
/// large `p` or concentration, ratio-of-uniforms without shift in the middle
/// region, and the piecewise-envelope rejection sampler near the origin.
/// `b = 0` reduces to Gamma(p, rate a / 2).
pub fn sample_gig<R: Rng + ?Sized>(p: f64, a: f64, b: f64, rng: &mut R) -> Result<f64> {
    if !(a > 0.0 && a.is_finite()) || !(b >= 0.0 && b.is_finite()) || !p.is_finite() {
        return Err(Error::Parameter(format!(
            "GIG requires a > 0 and b >= 0, got p={p}, a={a}, b={b}"
        )));
    }
    let omega = (a * b).sqrt();
    if b == 0.0 || omega < 1e-12 {
        if p > 0.0 {
            return sample_gamma(p, a / 2.0, rng);
        }
        return Err(Error::Parameter(format!(
            "GIG with b = 0 needs p > 0, got p={p}"
        )));
    }
    let alpha = (b / a).sqrt();
    let lambda = p.abs();
    let x = if lambda > 2.0 || omega > 3.0 {
        gig_rou_shift(lambda, omega, rng)
    } else if lambda >= 1.0 - 2.25 * omega * omega || omega > 0.2 {
        gig_rou_noshift(lambda, omega, rng)
    } else {
        gig_concave(lambda, omega, rng)
    };
    Ok(if p < 0.0 { alpha / x } else { alpha * x })
}

fn gig_mode(lambda: f64, omega: f64) -> f64 {
    if lambda >= 1.0 {
        (((lambda - 1.0) * (lambda - 1.0) + omega * omega).sqrt() + (lambda - 1.0)) / omega
    } else {
        omega / (((1.0 - lambda) * (1.0 - lambda) + omega * omega).sqrt() + (1.0 - lambda))
    }
}

fn unif<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(rand_distr::OpenClosed01)
}

fn gig_rou_noshift<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = gig_mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);
    let ym = ((lambda + 1.0) + ((lambda + 1.0) * (lambda + 1.0) + omega * omega).sqrt()) / omega;
    let um = (0.5 * (lambda + 1.0) * ym.ln() - s * (ym + 1.0 / ym) - nc).exp();
    loop {
        let u = um * unif(rng);
        let v = unif(rng);
        let x = u / v;
        if x > 0.0 && v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

fn gig_rou_shift<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let t = 0.5 * (lambda - 1.0);
    let s = 0.25 * omega;
    let xm = gig_mode(lambda, omega);
    let nc = t * xm.ln() - s * (xm + 1.0 / xm);
    // extrema of (x - xm) sqrt(f(x)) are roots of y^3 + a y^2 + b y + c
    let a = -(2.0 * (lambda + 1.0) / omega + xm);
    let b = 2.0 * (lambda - 1.0) * xm / omega - 1.0;
    let c = xm;
    let p = b - a * a / 3.0;
    let q = (2.0 * a * a * a) / 27.0 - (a * b) / 3.0 + c;
    let fi = (-q / (2.0 * (-(p * p * p) / 27.0).sqrt())).acos();
    let fak = 2.0 * (-p / 3.0).sqrt();
    let y1 = fak * (fi / 3.0).cos() - a / 3.0;
    let y2 = fak * (fi / 3.0 + 4.0 / 3.0 * std::f64::consts::PI).cos() - a / 3.0;
    let uplus = (y1 - xm) * (t * y1.ln() - s * (y1 + 1.0 / y1) - nc).exp();
    let uminus = (y2 - xm) * (t * y2.ln() - s * (y2 + 1.0 / y2) - nc).exp();
    loop {
        let u = uminus + unif(rng) * (uplus - uminus);
        let v = unif(rng);
        let x = u / v + xm;
        if x > 0.0 && v.ln() <= t * x.ln() - s * (x + 1.0 / x) - nc {
            return x;
        }
    }
}

fn gig_concave<R: Rng + ?Sized>(lambda: f64, omega: f64, rng: &mut R) -> f64 {
    let xm = gig_mode(lambda, omega);
    let x0 = omega / (1.0 - lambda);
    let k0 = ((lambda - 1.0) * xm.ln() - 0.5 * omega * (xm + 1.0 / xm)).exp();
    let a0 = k0 * x0;
    let (k1, a1, k2, a2);
    if x0 >= 2.0 / omega {
        k1 = 0.0;
        a1 = 0.0;
        k2 = x0.powf(lambda - 1.0);
        a2 = k2 * 2.0 * (-omega * x0 / 2.0).exp() / omega;
    } else {
        k1 = (-omega).exp();
        a1 = if lambda == 0.0 {
            k1 * (2.0 / (omega * omega)).ln()
        } else {
            k1 / lambda * ((2.0 / omega).powf(lambda) - x0.powf(lambda))
        };
        k2 = (2.0 / omega).powf(lambda - 1.0);
        a2 = k2 * 2.0 * (-1.0f64).exp() / omega;
    }
    let total = a0 + a1 + a2;
    loop {
        let mut v = total * unif(rng);
        let (x, hx);
        if v <= a0 {
            x = x0 * v / a0;
            hx = k0;
        } else {
            v -= a0;
            if v <= a1 {
                if lambda == 0.0 {
                    x = omega * (omega.exp() * v).exp();
                    hx = k1 / x;
                } else {
                    x = (x0.powf(lambda) + lambda / k1 * v).powf(1.0 / lambda);
                    hx = k1 * x.powf(lambda - 1.0);
                }
            } else {
                v -= a1;
                let lo = x0.max(2.0 / omega);
                x = -2.0 / omega * ((-omega / 2.0 * lo).exp() - omega / (2.0 * k2) * v).ln();
                hx = k2 * (-omega / 2.0 * x).exp();
            }
        }
        let u = unif(rng) * hx;
        if x > 0.0 && u.ln() <= (lambda - 1.0) * x.ln() - omega / 2.0 * (x + 1.0 / x) {
            return x;
        }
    }
}
