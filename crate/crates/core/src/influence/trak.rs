//! Single-model TRAK: projected gradients with a damped Gram solve.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dot;
use crate::error::{Error, Result};
use crate::model::{self, Instance};
use crate::training::Checkpoint;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrakConfig {
    pub proj_dim: usize,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for TrakConfig {
    fn default() -> Self {
        Self {
            proj_dim: 256,
            lambda: 1e-3,
            seed: 17,
        }
    }
}

/// Dense `dim × k` Gaussian matrix with entries `N(0, 1/k)`, stored row-major.
#[derive(Clone, Debug)]
pub struct Projection {
    pub dim: usize,
    pub k: usize,
    entries: Vec<f64>,
}

impl Projection {
    pub fn new(dim: usize, k: usize, seed: u64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("projection dimension must be at least 1".into()));
        }
        let normal = Normal::new(0.0, (1.0 / k as f64).sqrt())
            .map_err(|e| Error::Config(format!("projection: {e}")))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entries = (0..dim * k).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self { dim, k, entries })
    }

    /// `Pᵀg`, skipping zero coordinates of `g`.
    pub fn project(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.dim {
            return Err(Error::Shape {
                expected: self.dim,
                got: g.len(),
            });
        }
        let mut out = vec![0.0; self.k];
        for (i, &gi) in g.iter().enumerate() {
            if gi == 0.0 {
                continue;
            }
            let row = &self.entries[i * self.k..(i + 1) * self.k];
            for (o, p) in out.iter_mut().zip(row) {
                *o += gi * p;
            }
        }
        Ok(out)
    }
}

/// Kernel scores `φ(z_e)ᵀ(ΦᵀΦ + λI)⁻¹φ(z_t)` for every training sample,
/// one row per test example.
pub fn trak_lite(
    final_ckpt: &Checkpoint,
    train: &[Instance],
    tests: &[Instance],
    cfg: &TrakConfig,
    workers: usize,
) -> Result<Vec<Vec<f64>>> {
    if cfg.lambda < 0.0 || !cfg.lambda.is_finite() {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", cfg.lambda)));
    }
    let proj = Projection::new(final_ckpt.arch.param_count(), cfg.proj_dim, cfg.seed)?;
    let project = |z: &Instance| -> Result<Vec<f64>> {
        let g = model::per_example_grad(&final_ckpt.arch, &final_ckpt.params, z)?;
        proj.project(&g.0)
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let phi: Vec<Vec<f64>> = pool.install(|| train.par_iter().map(project).collect::<Result<_>>())?;
    let k = cfg.proj_dim;
    let mut gram = nalgebra::DMatrix::<f64>::zeros(k, k);
    for row in &phi {
        for a in 0..k {
            let ra = row[a];
            if ra == 0.0 {
                continue;
            }
            for b in a..k {
                gram[(a, b)] += ra * row[b];
            }
        }
    }
    for a in 0..k {
        gram[(a, a)] += cfg.lambda;
        for b in 0..a {
            gram[(a, b)] = gram[(b, a)];
        }
    }
    let chol = gram.cholesky().ok_or_else(|| {
        Error::Singular(format!("projected Gram matrix is singular at lambda {}", cfg.lambda))
    })?;
    tests
        .iter()
        .map(|z| {
            let u = chol.solve(&nalgebra::DVector::from_vec(project(z)?));
            if u.iter().any(|v| !v.is_finite()) {
                return Err(Error::Singular("Gram solve produced non-finite values".into()));
            }
            Ok(phi.iter().map(|p| dot(p, u.as_slice())).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, InitMode, ModelArch};
    use rand::Rng;

    fn ckpt(arch: ModelArch) -> Checkpoint {
        Checkpoint {
            params: init_params(&arch, InitMode::SeededUniform(0.3), 1).unwrap(),
            epoch: 1,
            train_loss: 0.0,
            arch,
            config_hash: String::new(),
            optimizer: None,
        }
    }

    fn data(n: usize, d: usize, k: usize, seed: u64) -> Vec<Instance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| Instance {
                features: vec![(i % d, 1.0), ((i * 7 + 3) % d, rng.random_range(0.1..1.0))]
                    .into_iter()
                    .fold(Vec::new(), |mut v, (j, x)| {
                        if !v.iter().any(|&(a, _): &(usize, f64)| a == j) {
                            v.push((j, x));
                        }
                        v.sort_by_key(|p| p.0);
                        v
                    }),
                label: Some(rng.random_range(0..k)),
                id: i as u64,
            })
            .collect()
    }

    #[test]
    fn seeded_determinism() {
        let arch = ModelArch::convex(8, 3);
        let c = ckpt(arch);
        let train = data(30, 8, 3, 2);
        let cfg = TrakConfig {
            proj_dim: 8,
            lambda: 0.1,
            seed: 5,
        };
        let a = trak_lite(&c, &train, &train[..3], &cfg, 1).unwrap();
        let b = trak_lite(&c, &train, &train[..3], &cfg, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn johnson_lindenstrauss() {
        let dim = 400;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let ge: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let gt: Vec<f64> = ge.iter().map(|v| v + rng.random_range(-0.3..0.3)).collect();
        let exact = dot(&ge, &gt);
        let mut total = 0.0;
        for s in 0..100 {
            let p = Projection::new(dim, 512, s).unwrap();
            let approx = dot(&p.project(&ge).unwrap(), &p.project(&gt).unwrap());
            total += ((approx - exact) / exact).abs();
        }
        assert!(total / 100.0 < 0.1, "mean relative error {}", total / 100.0);
    }

    #[test]
    fn large_damping_limit() {
        let arch = ModelArch::convex(8, 3);
        let c = ckpt(arch);
        let train = data(20, 8, 3, 4);
        let lambda = 1e8;
        let cfg = TrakConfig {
            proj_dim: 16,
            lambda,
            seed: 3,
        };
        let scores = trak_lite(&c, &train, &train[..1], &cfg, 1).unwrap();
        let proj = Projection::new(arch.param_count(), 16, 3).unwrap();
        let g = |z: &Instance| model::per_example_grad(&arch, &c.params, z).unwrap().0;
        let pe = proj.project(&g(&train[0])).unwrap();
        for (t, z) in train.iter().enumerate() {
            let plain = dot(&pe, &proj.project(&g(z)).unwrap());
            let scaled = lambda * scores[0][t];
            assert!((scaled - plain).abs() <= 1e-3 * plain.abs().max(1e-12), "{scaled} vs {plain}");
        }
    }

    #[test]
    fn singular_gram_without_damping() {
        let arch = ModelArch::convex(8, 3);
        let c = ckpt(arch);
        // two training samples cannot span 16 projected dimensions
        let train = data(2, 8, 3, 1);
        let cfg = TrakConfig {
            proj_dim: 16,
            lambda: 0.0,
            seed: 3,
        };
        let err = trak_lite(&c, &train, &train[..1], &cfg, 1).unwrap_err();
        assert!(matches!(err, Error::Singular(_)));
    }
}
