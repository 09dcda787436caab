//! Gaussian-mixture modeling of point clouds, the Monte Carlo divergence
//! estimator, and the rigid / component-wise pushforwards used to analyze the
//! registration problem as alignment of two mixtures.

use nalgebra::{Matrix3, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::geom::{subsample_points, PointCloud, RigidTransform};

/// Relative covariance floor: 1e-6 * (bounding-box diagonal)^2 is added to
/// the covariance diagonal after every M-step.
pub const COV_FLOOR_REL: f64 = 1e-6;

const MAX_EM_ITERS: usize = 200;
const LL_TOL: f64 = 1e-6;

/// K weighted Gaussian components over R^3.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<Vector3<f64>>,
    covariances: Vec<Matrix3<f64>>,
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<Vector3<f64>>,
        covariances: Vec<Matrix3<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::InvalidMixture(
                "weights/means/covariances length mismatch".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidMixture(format!(
                "weights must be non-negative and sum to 1 (sum = {total})"
            )));
        }
        for (idx, cov) in covariances.iter().enumerate() {
            let asym = (cov - cov.transpose()).abs().max();
            if asym > 1e-9 {
                return Err(Error::InvalidMixture(format!(
                    "covariance {idx} asymmetric by {asym:.3e}"
                )));
            }
            let min_eig = cov.symmetric_eigenvalues().min();
            if min_eig <= 0.0 {
                return Err(Error::InvalidMixture(format!(
                    "covariance {idx} not positive definite (min eigenvalue {min_eig:.3e})"
                )));
            }
        }
        Ok(Self {
            weights,
            means,
            covariances,
        })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[Vector3<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[Matrix3<f64>] {
        &self.covariances
    }

    /// log of the mixture density at `x`, evaluated with log-sum-exp so far
    /// tails underflow gracefully.
    pub fn log_density(&self, x: &Vector3<f64>) -> f64 {
        let eval = MixtureEval::new(self);
        eval.log_density(x)
    }

    pub fn density(&self, x: &Vector3<f64>) -> f64 {
        self.log_density(x).exp()
    }

    /// Draws `n` points from the mixture.
    pub fn sample(&self, n: usize, seed: u64) -> Result<PointCloud> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let factors: Vec<Matrix3<f64>> = self
            .covariances
            .iter()
            .map(|c| {
                c.cholesky()
                    .map(|ch| ch.l())
                    .ok_or_else(|| Error::InvalidMixture("covariance not PD for sampling".into()))
            })
            .collect::<Result<_>>()?;
        let mut points = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut k = self.k() - 1;
            for (idx, w) in self.weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = idx;
                    break;
                }
            }
            let z = Vector3::new(
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
                rng.sample(StandardNormal),
            );
            points.push(self.means[k] + factors[k] * z);
        }
        PointCloud::new(points)
    }
}

/// Cached per-component precision and normalizer for repeated evaluation.
struct MixtureEval {
    log_weights: Vec<f64>,
    means: Vec<Vector3<f64>>,
    precisions: Vec<Matrix3<f64>>,
    log_norms: Vec<f64>,
}

impl MixtureEval {
    fn new(g: &GaussianMixture) -> Self {
        let mut precisions = Vec::with_capacity(g.k());
        let mut log_norms = Vec::with_capacity(g.k());
        for cov in &g.covariances {
            let chol = cov
                .cholesky()
                .expect("mixture invariant guarantees positive-definite covariance");
            let log_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            precisions.push(chol.inverse());
            log_norms.push(-0.5 * (3.0 * (2.0 * std::f64::consts::PI).ln() + log_det));
        }
        Self {
            log_weights: g.weights.iter().map(|w| w.ln()).collect(),
            means: g.means.clone(),
            precisions,
            log_norms,
        }
    }

    fn log_density(&self, x: &Vector3<f64>) -> f64 {
        let mut terms = Vec::with_capacity(self.means.len());
        for k in 0..self.means.len() {
            let d = x - self.means[k];
            let maha = (d.transpose() * self.precisions[k] * d)[0];
            terms.push(self.log_weights[k] + self.log_norms[k] - 0.5 * maha);
        }
        log_sum_exp(&terms)
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()
}

/// EM fit result with the per-iteration mean log-likelihood trace.
#[derive(Debug, Clone)]
pub struct EmFit {
    pub mixture: GaussianMixture,
    pub log_likelihood_trace: Vec<f64>,
}

/// Fits a K-component mixture to the cloud with EM, k-means++ seeding from
/// `seed`. Terminates when the mean log-likelihood improves by less than 1e-6
/// or after 200 iterations.
pub fn fit_em(cloud: &PointCloud, k: usize, seed: u64) -> Result<GaussianMixture> {
    Ok(fit_em_trace(cloud, k, seed)?.mixture)
}

pub fn fit_em_trace(cloud: &PointCloud, k: usize, seed: u64) -> Result<EmFit> {
    let n = cloud.len();
    if k == 0 || k > n {
        return Err(Error::KExceedsN { k, n });
    }
    let floor = cov_floor(cloud)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = kmeanspp_seeds(cloud, k, &mut rng);

    // initial assignment to nearest seed
    let mut weights = vec![0.0f64; k];
    let mut means = seeds.clone();
    let mut covs = vec![Matrix3::zeros(); k];
    {
        let mut counts = vec![0usize; k];
        let mut sums = vec![Vector3::zeros(); k];
        let mut assign = Vec::with_capacity(n);
        for p in cloud.iter() {
            let mut best = (0usize, f64::INFINITY);
            for (j, s) in seeds.iter().enumerate() {
                let d2 = (p - s).norm_squared();
                if d2 < best.1 {
                    best = (j, d2);
                }
            }
            counts[best.0] += 1;
            sums[best.0] += p;
            assign.push(best.0);
        }
        for j in 0..k {
            if counts[j] > 0 {
                means[j] = sums[j] / counts[j] as f64;
            }
            weights[j] = (counts[j].max(1)) as f64;
        }
        let wsum: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= wsum;
        }
        for (p, &j) in cloud.iter().zip(assign.iter()) {
            let d = p - means[j];
            covs[j] += d * d.transpose();
        }
        for j in 0..k {
            if counts[j] > 1 {
                covs[j] /= counts[j] as f64;
            }
            covs[j] += floor;
        }
    }

    let mut trace = Vec::new();
    let mut resp = vec![vec![0.0f64; k]; n];
    for _iter in 0..MAX_EM_ITERS {
        let g = GaussianMixture::new(weights.clone(), means.clone(), covs.clone())?;
        let eval = MixtureEval::new(&g);

        // E-step in log domain; also accumulates the mean log-likelihood
        let mut ll = 0.0;
        for (i, p) in cloud.iter().enumerate() {
            let mut terms = Vec::with_capacity(k);
            for j in 0..k {
                let d = p - eval.means[j];
                let maha = (d.transpose() * eval.precisions[j] * d)[0];
                terms.push(eval.log_weights[j] + eval.log_norms[j] - 0.5 * maha);
            }
            let lse = log_sum_exp(&terms);
            ll += lse / n as f64;
            for j in 0..k {
                resp[i][j] = (terms[j] - lse).exp();
            }
        }
        let converged = trace
            .last()
            .is_some_and(|prev: &f64| (ll - prev).abs() < LL_TOL);
        trace.push(ll);
        if converged {
            break;
        }

        // M-step with covariance floor
        for j in 0..k {
            let nk: f64 = resp.iter().map(|r| r[j]).sum();
            let nk_safe = nk.max(1e-12);
            let mut mu = Vector3::zeros();
            for (i, p) in cloud.iter().enumerate() {
                mu += resp[i][j] * p;
            }
            mu /= nk_safe;
            let mut cov = Matrix3::zeros();
            for (i, p) in cloud.iter().enumerate() {
                let d = p - mu;
                cov += resp[i][j] * d * d.transpose();
            }
            cov /= nk_safe;
            weights[j] = nk / n as f64;
            means[j] = mu;
            covs[j] = cov + floor;
        }
        let wsum: f64 = weights.iter().sum();
        for w in weights.iter_mut() {
            *w /= wsum;
        }
    }

    Ok(EmFit {
        mixture: GaussianMixture::new(weights, means, covs)?,
        log_likelihood_trace: trace,
    })
}

fn cov_floor(cloud: &PointCloud) -> Result<Matrix3<f64>> {
    let mut lo = *cloud.points().first().expect("non-empty");
    let mut hi = lo;
    for p in cloud.iter() {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let diag2 = (hi - lo).norm_squared();
    if diag2 == 0.0 {
        return Err(Error::DegenerateCloud("all points identical".into()));
    }
    Ok(Matrix3::identity() * (COV_FLOOR_REL * diag2))
}

fn kmeanspp_seeds(cloud: &PointCloud, k: usize, rng: &mut impl Rng) -> Vec<Vector3<f64>> {
    let n = cloud.len();
    let mut seeds = Vec::with_capacity(k);
    seeds.push(cloud.points()[rng.random_range(0..n)]);
    let mut d2: Vec<f64> = cloud
        .iter()
        .map(|p| (p - seeds[0]).norm_squared())
        .collect();
    while seeds.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            cloud.points()[rng.random_range(0..n)]
        } else {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, w) in d2.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    pick = i;
                    break;
                }
            }
            cloud.points()[pick]
        };
        seeds.push(next);
        for (i, p) in cloud.iter().enumerate() {
            d2[i] = d2[i].min((p - next).norm_squared());
        }
    }
    seeds
}

/// Monte Carlo divergence: mean over sample points of
/// log density(gx, s) - log density(gy, s). Zero exactly when gx and gy are
/// the same mixture, anti-symmetric in its mixture arguments.
pub fn mc_divergence(
    gx: &GaussianMixture,
    gy: &GaussianMixture,
    samples: &PointCloud,
) -> Result<f64> {
    let ex = MixtureEval::new(gx);
    let ey = MixtureEval::new(gy);
    let mean = samples
        .iter()
        .map(|s| ex.log_density(s) - ey.log_density(s))
        .sum::<f64>()
        / samples.len() as f64;
    if !mean.is_finite() {
        return Err(Error::NonFinite);
    }
    Ok(mean)
}

/// Labeled divergence matrix, serialized as CSV with label header row/column.
#[derive(Debug, Clone)]
pub struct DivergenceMatrix {
    pub labels: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl DivergenceMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            out.push_str(l);
            for v in &self.values[i] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Repetition/pick counts for [`divergence_matrix`].
#[derive(Debug, Clone, Copy)]
pub struct DivergenceProtocol {
    pub repetitions: usize,
    pub picks_per_repetition: usize,
}

impl Default for DivergenceProtocol {
    fn default() -> Self {
        Self {
            repetitions: 4,
            picks_per_repetition: 12,
        }
    }
}

/// Cross-label divergence matrix: for every label pair, averages the
/// symmetrized mc_divergence over randomly picked cloud pairs, repeated over
/// `protocol.repetitions` rounds of `picks_per_repetition` picks.
///
/// Each directed term evaluates both log-densities at (a subsample of) the
/// first cloud's own points, so the symmetrized cell is a KL-style quantity
/// and the matrix is symmetric by construction.
pub fn divergence_matrix(
    collections: &[(String, Vec<PointCloud>)],
    k: usize,
    samples_per_pair: usize,
    seed: u64,
    protocol: DivergenceProtocol,
) -> Result<DivergenceMatrix> {
    if collections.len() < 2 {
        return Err(Error::InvalidSpec("need at least 2 labels".into()));
    }
    for (label, clouds) in collections {
        if clouds.is_empty() {
            return Err(Error::InvalidSpec(format!("empty collection for {label}")));
        }
    }
    // one fit per cloud, reused across all cells
    let fits: Vec<Vec<GaussianMixture>> = collections
        .iter()
        .enumerate()
        .map(|(ci, (_, clouds))| {
            clouds
                .iter()
                .enumerate()
                .map(|(i, c)| fit_em(c, k.min(c.len()), seed ^ ((ci as u64) << 32) ^ i as u64))
                .collect()
        })
        .collect::<Result<_>>()?;

    let m = collections.len();
    let mut values = vec![vec![0.0f64; m]; m];
    for a in 0..m {
        for b in a..m {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((a as u64) << 16) ^ b as u64);
            let mut acc = 0.0;
            let mut count = 0usize;
            for _rep in 0..protocol.repetitions {
                for _pick in 0..protocol.picks_per_repetition {
                    let ia = rng.random_range(0..collections[a].1.len());
                    let mut ib = rng.random_range(0..collections[b].1.len());
                    if a == b && collections[a].1.len() > 1 {
                        while ib == ia {
                            ib = rng.random_range(0..collections[b].1.len());
                        }
                    }
                    let ca = &collections[a].1[ia];
                    let cb = &collections[b].1[ib];
                    let sa = mc_samples(ca, samples_per_pair, &mut rng)?;
                    let sb = mc_samples(cb, samples_per_pair, &mut rng)?;
                    let fwd = mc_divergence(&fits[a][ia], &fits[b][ib], &sa)?;
                    let bwd = mc_divergence(&fits[b][ib], &fits[a][ia], &sb)?;
                    acc += 0.5 * (fwd + bwd);
                    count += 1;
                }
            }
            values[a][b] = acc / count as f64;
            values[b][a] = values[a][b];
        }
    }
    Ok(DivergenceMatrix {
        labels: collections.iter().map(|(l, _)| l.clone()).collect(),
        values,
    })
}

fn mc_samples(cloud: &PointCloud, n: usize, rng: &mut ChaCha8Rng) -> Result<PointCloud> {
    if n >= cloud.len() {
        return Ok(cloud.clone());
    }
    subsample_points(cloud, n, rng)
}

/// Maps means to R mu + t and covariances to R Sigma R^T; weights unchanged.
pub fn rigid_pushforward(g: &GaussianMixture, xf: &RigidTransform) -> GaussianMixture {
    GaussianMixture {
        weights: g.weights.clone(),
        means: g.means.iter().map(|m| xf.apply_point(m)).collect(),
        covariances: g
            .covariances
            .iter()
            .map(|c| xf.rotation * c * xf.rotation.transpose())
            .collect(),
    }
}

/// Replaces each component's mean and covariance through the given per-index
/// maps; weights unchanged. Errors if a mapped covariance is no longer
/// symmetric positive definite.
pub fn componentwise_map(
    g: &GaussianMixture,
    mean_map: impl Fn(usize, &Vector3<f64>) -> Vector3<f64>,
    cov_map: impl Fn(usize, &Matrix3<f64>) -> Matrix3<f64>,
) -> Result<GaussianMixture> {
    let means: Vec<_> = g
        .means
        .iter()
        .enumerate()
        .map(|(k, m)| mean_map(k, m))
        .collect();
    let mut covariances = Vec::with_capacity(g.k());
    for (k, c) in g.covariances.iter().enumerate() {
        let mapped = cov_map(k, c);
        let asym = (mapped - mapped.transpose()).abs().max();
        if asym > 1e-9 || mapped.symmetric_eigenvalues().min() <= 0.0 {
            return Err(Error::CovarianceNotPd(k));
        }
        covariances.push(mapped);
    }
    GaussianMixture::new(g.weights.clone(), means, covariances)
}
