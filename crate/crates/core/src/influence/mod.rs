//! Influence scorers.
//!
//! Sign convention: the test function is `f = −ℓ`, so the support score
//! `∇ℓ(z_e)·∇ℓ(z_t)` is positive when upweighting `z_t` lowers the test loss
//! (a proponent).

pub mod bm25;
pub mod engine;
pub mod trak;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, GradientVector, HessianMatrix, Instance};
use crate::training::{Checkpoint, CheckpointSet, ContrastiveTrajectories};

pub use engine::{attribute_testset, AttributionResult, Method, ScoreRecord};

/// Fixed-order dot product.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Hessian-free influence score `∇ℓ(z_e)·∇ℓ(z_t)`.
pub fn support_score(g_e: &GradientVector, g_t: &GradientVector) -> Result<f64> {
    if g_e.len() != g_t.len() {
        return Err(Error::Shape {
            expected: g_e.len(),
            got: g_t.len(),
        });
    }
    Ok(dot(&g_e.0, &g_t.0))
}

/// Exact influence `IF = −H⁻¹∇ℓ(z_t)` and score `∇ℓ(z_e)ᵀH⁻¹∇ℓ(z_t)`.
pub fn exact_influence(
    hessian: &HessianMatrix,
    g_t: &GradientVector,
    g_e: &GradientVector,
) -> Result<(GradientVector, f64)> {
    if g_t.len() != hessian.dim || g_e.len() != hessian.dim {
        return Err(Error::Shape {
            expected: hessian.dim,
            got: g_t.len().max(g_e.len()),
        });
    }
    let chol = hessian.to_matrix().cholesky().ok_or_else(|| {
        Error::Singular(format!(
            "Hessian is not positive definite at damping {}",
            hessian.damping
        ))
    })?;
    let rhs = nalgebra::DVector::from_column_slice(&g_t.0);
    let solved = chol.solve(&rhs);
    if solved.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular("solve produced non-finite values".into()));
    }
    let if_vec = GradientVector(solved.iter().map(|v| -v).collect());
    let is_val = dot(&g_e.0, solved.as_slice());
    Ok((if_vec, is_val))
}

/// Arithmetic mean of per-checkpoint scores.
pub fn denoise_mean(per_checkpoint: &[f64]) -> Result<f64> {
    if per_checkpoint.is_empty() {
        return Err(Error::InvalidInput("denoising needs at least one checkpoint".into()));
    }
    let mut s = 0.0;
    for v in per_checkpoint {
        s += v;
    }
    Ok(s / per_checkpoint.len() as f64)
}

/// Mean over `ckpts` of the support score with both gradients at each checkpoint.
pub fn denoise_score(ckpts: &[Checkpoint], z_t: &Instance, z_e: &Instance) -> Result<f64> {
    let scores = ckpts
        .iter()
        .map(|c| {
            let g_e = model::per_example_grad(&c.arch, &c.params, z_e)?;
            let g_t = model::per_example_grad(&c.arch, &c.params, z_t)?;
            support_score(&g_e, &g_t)
        })
        .collect::<Result<Vec<_>>>()?;
    denoise_mean(&scores)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DebiasConfig {
    pub beta: f64,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        Self { beta: 1.0 }
    }
}

/// `denoise − β·s0`; `β = 1` subtracts the base score wholesale.
pub fn debias_combine(denoise_val: f64, base_score: f64, cfg: &DebiasConfig) -> f64 {
    denoise_val - cfg.beta * base_score
}

/// Support score at a single checkpoint.
pub fn support_at(ckpt: &Checkpoint, z_t: &Instance, z_e: &Instance) -> Result<f64> {
    let g_e = model::per_example_grad(&ckpt.arch, &ckpt.params, z_e)?;
    let g_t = model::per_example_grad(&ckpt.arch, &ckpt.params, z_t)?;
    support_score(&g_e, &g_t)
}

/// Mean loss gradient over `subset` at `ckpt`, summed in slice order.
pub fn subset_gradient(ckpt: &Checkpoint, subset: &[Instance]) -> Result<GradientVector> {
    let grads = subset
        .iter()
        .map(|z| model::per_example_grad(&ckpt.arch, &ckpt.params, z))
        .collect::<Result<Vec<_>>>()?;
    GradientVector::mean(&grads)
}

/// Debiased-denoised score of `z_t` for one branch: the mean over the
/// branch's epoch checkpoints of `ḡ_subset·∇ℓ(z_t)`, minus `β` times the
/// same quantity at `anchor`.
pub fn dd_branch_score(
    branch: &CheckpointSet,
    anchor: &Checkpoint,
    z_t: &Instance,
    subset: &[Instance],
    cfg: &DebiasConfig,
) -> Result<f64> {
    if branch.epochs.is_empty() {
        return Err(Error::InvalidInput("branch has no epoch checkpoints".into()));
    }
    let per = branch
        .epochs
        .iter()
        .map(|c| {
            let g_e = subset_gradient(c, subset)?;
            let g_t = model::per_example_grad(&c.arch, &c.params, z_t)?;
            support_score(&g_e, &g_t)
        })
        .collect::<Result<Vec<_>>>()?;
    let base = support_score(
        &subset_gradient(anchor, subset)?,
        &model::per_example_grad(&anchor.arch, &anchor.params, z_t)?,
    )?;
    Ok(debias_combine(denoise_mean(&per)?, base, cfg))
}

/// Contrastive score: positive-branch DD minus negative-branch DD.
///
/// Hallucination supporters come out negative, so corrupted samples are
/// hunted by ranking on `−IS_DDA`.
pub fn dda_contrastive(
    traj: &ContrastiveTrajectories,
    anchor: &Checkpoint,
    z_t: &Instance,
    positives: &[Instance],
    negatives: &[Instance],
    cfg: &DebiasConfig,
) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::InvalidInput("both partition sides must be non-empty".into()));
    }
    let pos = dd_branch_score(&traj.positive, anchor, z_t, positives, cfg)?;
    let neg = dd_branch_score(&traj.negative, anchor, z_t, negatives, cfg)?;
    Ok(pos - neg)
}

/// Cosine similarity; zero when either vector vanishes.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot(a, b) / (na * nb)
}

/// Renormalized TracIN: summed per-checkpoint cosine of the two gradients.
pub fn tracin_renormalized(ckpts: &[Checkpoint], z_t: &Instance, z_e: &Instance) -> Result<f64> {
    if ckpts.is_empty() {
        return Err(Error::InvalidInput("TracIN needs at least one checkpoint".into()));
    }
    let mut s = 0.0;
    for c in ckpts {
        let g_e = model::per_example_grad(&c.arch, &c.params, z_e)?;
        let g_t = model::per_example_grad(&c.arch, &c.params, z_t)?;
        s += cosine(&g_e.0, &g_t.0);
    }
    Ok(s)
}
