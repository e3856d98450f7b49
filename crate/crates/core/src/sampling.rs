//! Seeded samplers for synthetic clouds.
//!
//! Every random draw in the crate comes from [`ChaCha20Rng`] seeded through
//! [`Seed`]. Normal variates use the `rand_distr` ziggurat sampler. Both are
//! pure integer/IEEE arithmetic, so a seed reproduces the same bits on every
//! platform. Sub-streams are derived with a SplitMix64 counter scheme, see
//! [`Seed::derive`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;

/// Identifier of the random number pipeline, recorded in run manifests.
pub const PRNG_ID: &str = "chacha20(rand_chacha 0.9)+ziggurat-normal(rand_distr 0.5)+splitmix64-derive";

/// A 64-bit master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Seed(pub u64);

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl Seed {
    /// Child seed for the sub-stream identified by `path`.
    ///
    /// `h = splitmix64(seed)`, then for every component `c`:
    /// `h = splitmix64(h ^ splitmix64(c + 1))`. Distinct paths give
    /// statistically independent streams; the same path always gives the same seed.
    pub fn derive(self, path: &[u64]) -> Seed {
        let mut h = splitmix64(self.0);
        for &c in path {
            h = splitmix64(h ^ splitmix64(c.wrapping_add(1)));
        }
        Seed(h)
    }

    pub fn rng(self) -> ChaCha20Rng {
        ChaCha20Rng::seed_from_u64(self.0)
    }
}

impl From<u64> for Seed {
    fn from(v: u64) -> Self {
        Seed(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    /// Row-major `d x d` covariance.
    pub covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixtureSpec {
    pub components: Vec<MixtureComponent>,
}

impl GaussianMixtureSpec {
    /// Equal-weight mixture of isotropic Gaussians with standard deviation `std`.
    pub fn isotropic(means: &[Vec<f64>], std: f64) -> Self {
        let w = 1.0 / means.len() as f64;
        let components = means
            .iter()
            .map(|m| {
                let d = m.len();
                let covariance = (0..d)
                    .map(|i| (0..d).map(|j| if i == j { std * std } else { 0.0 }).collect())
                    .collect();
                MixtureComponent {
                    weight: w,
                    mean: m.clone(),
                    covariance,
                }
            })
            .collect();
        Self { components }
    }

    pub fn dim(&self) -> Option<usize> {
        self.components.first().map(|c| c.mean.len())
    }

    pub fn validate(&self) -> Result<()> {
        self.prepare().map(|_| ())
    }

    /// Validates the mixture and returns the Cholesky factor of each covariance.
    fn prepare(&self) -> Result<Vec<Vec<f64>>> {
        let d = self
            .dim()
            .ok_or_else(|| Error::invalid("components", "mixture needs at least one component"))?;
        if d == 0 {
            return Err(Error::invalid("components.mean", "mean must be nonempty"));
        }
        let mut total = 0.0;
        let mut factors = Vec::with_capacity(self.components.len());
        for (k, c) in self.components.iter().enumerate() {
            if !(c.weight.is_finite() && c.weight >= 0.0) {
                return Err(Error::invalid(
                    format!("components[{k}].weight"),
                    "weights must be finite and nonnegative",
                ));
            }
            total += c.weight;
            if c.mean.len() != d {
                return Err(Error::invalid(
                    format!("components[{k}].mean"),
                    format!("expected dimension {d}, got {}", c.mean.len()),
                ));
            }
            if c.mean.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("components[{k}].mean"), "non-finite entry"));
            }
            if c.covariance.len() != d || c.covariance.iter().any(|r| r.len() != d) {
                return Err(Error::invalid(
                    format!("components[{k}].covariance"),
                    format!("covariance must be {d}x{d}"),
                ));
            }
            let flat: Vec<f64> = c.covariance.iter().flatten().copied().collect();
            let factor = cholesky(&flat, d).ok_or_else(|| {
                Error::invalid(
                    format!("components[{k}].covariance"),
                    "covariance must be symmetric positive definite",
                )
            })?;
            factors.push(factor);
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::invalid(
                "components.weight",
                format!("weights sum to {total}, expected 1"),
            ));
        }
        Ok(factors)
    }
}

/// Lower Cholesky factor of a symmetric positive definite `d x d` matrix.
/// `None` if the matrix is not symmetric (to 1e-12 relative) or not positive definite.
fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    for i in 0..d {
        for j in 0..i {
            if (a[i * d + j] - a[j * d + i]).abs() > 1e-12 * scale.max(1.0) {
                return None;
            }
        }
    }
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
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
    Some(l)
}

/// Draws `n` points from the mixture. Deterministic in `seed`.
pub fn sample_gaussian_mixture(spec: &GaussianMixtureSpec, n: usize, seed: Seed) -> Result<PointCloud> {
    if n == 0 {
        return Err(Error::invalid("n", "sample count must be at least 1"));
    }
    let factors = spec.prepare()?;
    let d = spec.dim().expect("validated");
    let mut cumulative = Vec::with_capacity(spec.components.len());
    let mut acc = 0.0;
    for c in &spec.components {
        acc += c.weight;
        cumulative.push(acc);
    }

    let mut rng = seed.rng();
    let mut z = vec![0.0; d];
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        let u: f64 = rng.random::<f64>() * acc;
        let k = cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(spec.components.len() - 1);
        for zi in z.iter_mut() {
            *zi = rng.sample(StandardNormal);
        }
        let mean = &spec.components[k].mean;
        let l = &factors[k];
        for i in 0..d {
            let mut v = mean[i];
            for j in 0..=i {
                v += l[i * d + j] * z[j];
            }
            data.push(v);
        }
    }
    PointCloud::from_flat(n, d, data)
}

/// `n` i.i.d. draws from `N(0, I_d)`.
pub fn sample_standard_normal(dim: usize, n: usize, seed: Seed) -> Result<PointCloud> {
    if dim == 0 {
        return Err(Error::invalid("dim", "dimension must be at least 1"));
    }
    if n == 0 {
        return Err(Error::invalid("n", "sample count must be at least 1"));
    }
    let mut rng = seed.rng();
    let data = (0..n * dim).map(|_| rng.sample(StandardNormal)).collect();
    PointCloud::from_flat(n, dim, data)
}

/// Seeded partial Fisher-Yates: `k` distinct indices from `0..n`.
pub(crate) fn choose_indices(n: usize, k: usize, seed: Seed) -> Vec<usize> {
    let k = k.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = seed.rng();
    for i in 0..k {
        let j = rng.random_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(k);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_blobs() -> GaussianMixtureSpec {
        GaussianMixtureSpec::isotropic(&[vec![-5.0, 0.0], vec![5.0, 0.0]], 1.0)
    }

    #[test]
    fn identity_component_has_small_mean() {
        let spec = GaussianMixtureSpec::isotropic(&[vec![0.0, 0.0, 0.0]], 1.0);
        let small = sample_gaussian_mixture(&spec, 4, Seed(3)).unwrap();
        assert_eq!((small.len(), small.dim()), (4, 3));
        let big = sample_gaussian_mixture(&spec, 50_000, Seed(3)).unwrap();
        for m in big.mean() {
            // 4 standard errors at n = 50000
            assert!(m.abs() < 4.0 / (50_000f64).sqrt(), "mean {m}");
        }
    }

    #[test]
    fn half_plane_fractions() {
        let cloud = sample_gaussian_mixture(&two_blobs(), 10_000, Seed(11)).unwrap();
        let left = (0..cloud.len()).filter(|&i| cloud.row(i)[0] < 0.0).count();
        let frac = left as f64 / 10_000.0;
        assert!((0.48..=0.52).contains(&frac), "fraction {frac}");
    }

    #[test]
    fn component_frequencies_within_three_sigma() {
        let spec = GaussianMixtureSpec {
            components: vec![
                MixtureComponent { weight: 0.2, mean: vec![-100.0], covariance: vec![vec![1.0]] },
                MixtureComponent { weight: 0.5, mean: vec![0.0], covariance: vec![vec![1.0]] },
                MixtureComponent { weight: 0.3, mean: vec![100.0], covariance: vec![vec![1.0]] },
            ],
        };
        let n = 100_000;
        let cloud = sample_gaussian_mixture(&spec, n, Seed(5)).unwrap();
        let mut counts = [0usize; 3];
        for i in 0..n {
            let x = cloud.row(i)[0];
            counts[if x < -50.0 { 0 } else if x < 50.0 { 1 } else { 2 }] += 1;
        }
        for (k, w) in [0.2, 0.5, 0.3].into_iter().enumerate() {
            let f = counts[k] as f64 / n as f64;
            assert!((f - w).abs() <= 3.0 * (w * (1.0 - w) / n as f64).sqrt(), "component {k}: {f}");
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = sample_gaussian_mixture(&two_blobs(), 500, Seed(42)).unwrap();
        let b = sample_gaussian_mixture(&two_blobs(), 500, Seed(42)).unwrap();
        let c = sample_gaussian_mixture(&two_blobs(), 500, Seed(43)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(
            sample_standard_normal(4, 10, Seed(1)).unwrap(),
            sample_standard_normal(4, 10, Seed(1)).unwrap()
        );
    }

    #[test]
    fn standard_normal_moments() {
        let cloud = sample_standard_normal(1, 100_000, Seed(2024)).unwrap();
        let xs = cloud.as_slice();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        assert!(mean.abs() <= 0.02, "mean {mean}");
        assert!((0.97..=1.03).contains(&var), "variance {var}");
    }

    #[test]
    fn standard_normal_shape() {
        let cloud = sample_standard_normal(32, 10, Seed(0)).unwrap();
        assert_eq!((cloud.len(), cloud.dim()), (10, 32));
        assert!(sample_standard_normal(0, 10, Seed(0)).is_err());
        assert!(sample_standard_normal(2, 0, Seed(0)).is_err());
    }

    #[test]
    fn invalid_specs() {
        let mut spec = two_blobs();
        spec.components[0].weight = 0.6;
        assert!(spec.validate().is_err());

        let mut spec = two_blobs();
        spec.components[1].covariance = vec![vec![1.0, 2.0], vec![2.0, 1.0]];
        assert!(spec.validate().is_err());

        let mut spec = two_blobs();
        spec.components[1].covariance = vec![vec![1.0, 0.1], vec![0.0, 1.0]];
        assert!(spec.validate().is_err());

        assert!(GaussianMixtureSpec { components: vec![] }.validate().is_err());
        assert!(sample_gaussian_mixture(&two_blobs(), 0, Seed(0)).is_err());
    }

    #[test]
    fn correlated_covariance_is_reproduced() {
        let spec = GaussianMixtureSpec {
            components: vec![MixtureComponent {
                weight: 1.0,
                mean: vec![1.0, -1.0],
                covariance: vec![vec![2.0, 0.8], vec![0.8, 1.0]],
            }],
        };
        let n = 200_000;
        let c = sample_gaussian_mixture(&spec, n, Seed(9)).unwrap();
        let m = c.mean();
        let mut cov = [0.0; 4];
        for i in 0..n {
            let r = c.row(i);
            for a in 0..2 {
                for b in 0..2 {
                    cov[a * 2 + b] += (r[a] - m[a]) * (r[b] - m[b]);
                }
            }
        }
        let expected = [2.0, 0.8, 0.8, 1.0];
        for k in 0..4 {
            assert!((cov[k] / n as f64 - expected[k]).abs() < 0.03, "entry {k}");
        }
    }

    #[test]
    fn derived_seeds_differ_by_path() {
        let s = Seed(7);
        assert_eq!(s.derive(&[1, 2]), s.derive(&[1, 2]));
        assert_ne!(s.derive(&[1, 2]), s.derive(&[2, 1]));
        assert_ne!(s.derive(&[0]), s.derive(&[]));
    }

    #[test]
    fn choose_indices_are_distinct() {
        let idx = choose_indices(100, 30, Seed(1));
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(sorted.len(), 30);
        assert!(idx.iter().all(|&i| i < 100));
        assert_eq!(choose_indices(5, 10, Seed(1)).len(), 5);
    }
}
