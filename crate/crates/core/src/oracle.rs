//! Ground truth by retraining: leave-one-out and ε-upweighting on convex
//! models whose retrained optimum is unique, plus brute-force metrics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::pearson;
use crate::influence::exact_influence;
use crate::model::{self, ArchKind, Instance, ModelArch, ParameterVector};

/// Gradient-norm target for a retrained optimum.
pub const GRAD_TOL: f64 = 1e-10;
/// Iteration cap; hitting it marks the fit as non-converged.
pub const MAX_ITERS: usize = 10_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LooRecord {
    pub removed_train_id: u64,
    pub test_id: u64,
    pub delta_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub params: ParameterVector,
    pub iterations: usize,
    pub grad_norm: f64,
    pub converged: bool,
}

/// Minimizes `(1/n)Σ wᵢ ℓᵢ + (l2/2)‖θ‖²` for the logistic model by damped
/// Newton steps. `n` is the number of instances with non-zero weight.
pub fn fit_convex(
    arch: &ModelArch,
    data: &[Instance],
    weights: &[f64],
    l2: f64,
    start: &ParameterVector,
) -> Result<FitReport> {
    if arch.kind != ArchKind::ConvexLogistic {
        return Err(Error::UnsupportedArch(
            "retraining oracles require convex_logistic".into(),
        ));
    }
    if !(l2 > 0.0) {
        return Err(Error::Config("oracle fits need l2 > 0 for a unique optimum".into()));
    }
    let dim = arch.param_count();
    let objective = |p: &ParameterVector| -> Result<f64> {
        let mut s = 0.0;
        for (inst, &w) in data.iter().zip(weights) {
            if w != 0.0 {
                s += w * model::per_example_loss(arch, p, inst)?;
            }
        }
        Ok(s + 0.5 * l2 * p.0.iter().map(|v| v * v).sum::<f64>())
    };
    let mut params = start.clone();
    let mut iterations = 0;
    loop {
        // weighted gradient and Hessian of the objective
        let mut grad = DVector::from_column_slice(&params.0) * l2;
        let mut h = vec![0.0; dim * dim];
        for i in 0..dim {
            h[i * dim + i] = l2;
        }
        for (inst, &w) in data.iter().zip(weights) {
            if w == 0.0 {
                continue;
            }
            let g = model::per_example_grad(arch, &params, inst)?;
            for (a, b) in grad.iter_mut().zip(&g.0) {
                *a += w * b;
            }
            model::add_instance_hessian(arch, &params, inst, w, &mut h);
        }
        let hess = DMatrix::from_row_slice(dim, dim, &h);
        let grad_norm = grad.norm();
        if grad_norm <= GRAD_TOL || iterations >= MAX_ITERS {
            return Ok(FitReport {
                params,
                iterations,
                grad_norm,
                converged: grad_norm <= GRAD_TOL,
            });
        }
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::Singular("oracle Hessian is not positive definite".into()))?
            .solve(&grad);
        let f0 = objective(&params)?;
        let slope = -grad.dot(&step);
        if step.norm() <= 1e-15 * (1.0 + params.distance(&ParameterVector(vec![0.0; dim]))) {
            // no representable progress left
            return Ok(FitReport {
                params,
                iterations,
                grad_norm,
                converged: grad_norm <= 1e-8,
            });
        }
        // below roundoff the Armijo test is noise; near the optimum a pure
        // Newton step is safe
        let mut t = 1.0;
        if -slope < 1e-13 * f0.abs().max(1.0) {
            params = ParameterVector(params.0.iter().zip(step.iter()).map(|(p, s)| p - s).collect());
            iterations += 1;
            continue;
        }
        loop {
            let cand = ParameterVector(
                params
                    .0
                    .iter()
                    .zip(step.iter())
                    .map(|(p, s)| p - t * s)
                    .collect(),
            );
            let f1 = objective(&cand)?;
            if f1 <= f0 + 1e-4 * t * slope || t < 1e-12 {
                params = cand;
                break;
            }
            t *= 0.5;
        }
        iterations += 1;
    }
}

/// Uniform weights `1/n` over `data`.
pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n.max(1) as f64; n]
}

/// `ℓ(test; θ̂₋ᵢ) − ℓ(test; θ̂)` by retraining without `removed_id`.
pub fn loo_delta(
    arch: &ModelArch,
    train: &[Instance],
    removed_id: u64,
    test: &Instance,
    l2: f64,
    full_fit: &FitReport,
) -> Result<(LooRecord, FitReport)> {
    let pos = train
        .iter()
        .position(|t| t.id == removed_id)
        .ok_or(Error::NotFound(removed_id))?;
    let mut w = uniform_weights(train.len() - 1);
    w.insert(pos, 0.0);
    let fit = fit_convex(arch, train, &w, l2, &full_fit.params)?;
    let before = model::per_example_loss(arch, &full_fit.params, test)?;
    let after = model::per_example_loss(arch, &fit.params, test)?;
    Ok((
        LooRecord {
            removed_train_id: removed_id,
            test_id: test.id,
            delta_loss: after - before,
        },
        fit,
    ))
}

/// `(f(z_e; θ_ε) − f(z_e; θ̂))/ε` with `f = −ℓ`, retraining on `R + ε·ℓ(z_t)`.
pub fn upweight_estimate(
    arch: &ModelArch,
    train: &[Instance],
    target_id: u64,
    eps: f64,
    test: &Instance,
    l2: f64,
    full_fit: &FitReport,
) -> Result<f64> {
    if eps < 0.0 {
        return Err(Error::InvalidInput("eps must be non-negative".into()));
    }
    if eps == 0.0 {
        return Ok(0.0);
    }
    let pos = train
        .iter()
        .position(|t| t.id == target_id)
        .ok_or(Error::NotFound(target_id))?;
    let mut w = uniform_weights(train.len());
    w[pos] += eps;
    let fit = fit_convex(arch, train, &w, l2, &full_fit.params)?;
    let before = -model::per_example_loss(arch, &full_fit.params, test)?;
    let after = -model::per_example_loss(arch, &fit.params, test)?;
    Ok((after - before) / eps)
}

/// Exact influence of one training sample on one test sample next to the
/// retrained leave-one-out change in test loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BridgeRow {
    pub train_id: u64,
    pub test_id: u64,
    /// `∇ℓ(z_e)ᵀH⁻¹∇ℓ(z_t)` at the full fit.
    pub influence: f64,
    /// Removal is upweighting by `−1/n`, so the loss moves by `influence/n`.
    pub predicted_delta: f64,
    pub loo_delta: f64,
}

#[derive(Clone, Debug)]
pub struct BridgeReport {
    pub fit: FitReport,
    pub rows: Vec<BridgeRow>,
    pub pearson: f64,
    /// Every leave-one-out refit met the gradient tolerance.
    pub refits_converged: bool,
}

/// Compares first-order influence with retraining for every (train, test) pair.
pub fn influence_vs_loo(
    arch: &ModelArch,
    train: &[Instance],
    tests: &[Instance],
    l2: f64,
) -> Result<BridgeReport> {
    let start = model::init_params(arch, model::InitMode::Zeros, 0)?;
    let fit = fit_convex(arch, train, &uniform_weights(train.len()), l2, &start)?;
    let hessian = model::hessian_matrix(arch, &fit.params, train, l2)?;
    let n = train.len() as f64;
    let mut rows = Vec::new();
    let mut refits_converged = fit.converged;
    let test_grads = tests
        .iter()
        .map(|z| model::per_example_grad(arch, &fit.params, z))
        .collect::<Result<Vec<_>>>()?;
    let before = tests
        .iter()
        .map(|z| model::per_example_loss(arch, &fit.params, z))
        .collect::<Result<Vec<_>>>()?;
    for (i, z_t) in train.iter().enumerate() {
        let g_t = model::per_example_grad(arch, &fit.params, z_t)?;
        // one refit per removed sample serves every test example
        let mut w = uniform_weights(train.len() - 1);
        w.insert(i, 0.0);
        let refit = fit_convex(arch, train, &w, l2, &fit.params)?;
        refits_converged &= refit.converged;
        for ((z_e, g_e), l0) in tests.iter().zip(&test_grads).zip(&before) {
            let (_, influence) = exact_influence(&hessian, &g_t, g_e)?;
            rows.push(BridgeRow {
                train_id: z_t.id,
                test_id: z_e.id,
                influence,
                predicted_delta: influence / n,
                loo_delta: model::per_example_loss(arch, &refit.params, z_e)? - l0,
            });
        }
    }
    let x: Vec<f64> = rows.iter().map(|r| r.predicted_delta).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.loo_delta).collect();
    let pearson = pearson(&x, &y)?;
    Ok(BridgeReport {
        fit,
        rows,
        pearson,
        refits_converged,
    })
}

/// One-parameter mean-estimation model, `ℓ(z, θ) = ½(θ − z)²`.
pub mod mean_model {
    use crate::error::{Error, Result};

    pub fn loss(theta: f64, z: f64) -> f64 {
        0.5 * (theta - z) * (theta - z)
    }

    pub fn grad(theta: f64, z: f64) -> f64 {
        theta - z
    }

    /// Minimizer of `Σ wᵢ ℓ(zᵢ, θ)`.
    pub fn fit(data: &[f64], weights: &[f64]) -> Result<f64> {
        let wsum: f64 = weights.iter().sum();
        if !(wsum > 0.0) {
            return Err(Error::InvalidInput("weights must have positive sum".into()));
        }
        Ok(data.iter().zip(weights).map(|(z, w)| z * w).sum::<f64>() / wsum)
    }

    pub fn fit_uniform(data: &[f64]) -> Result<f64> {
        fit(data, &vec![1.0 / data.len() as f64; data.len()])
    }

    /// The Hessian of the mean loss is identically 1.
    pub fn influence(data: &[f64], z_t: f64) -> Result<f64> {
        Ok(-grad(fit_uniform(data)?, z_t))
    }

    pub fn loo_delta(data: &[f64], removed: usize, z_e: f64) -> Result<f64> {
        if removed >= data.len() {
            return Err(Error::NotFound(removed as u64));
        }
        let theta = fit_uniform(data)?;
        let rest: Vec<f64> = data
            .iter()
            .enumerate()
            .filter(|(i, _)| *i != removed)
            .map(|(_, z)| *z)
            .collect();
        let theta_loo = fit_uniform(&rest)?;
        Ok(loss(theta_loo, z_e) - loss(theta, z_e))
    }

    /// Retrains on `(1/n)Σℓ + ε·ℓ(z_t)` and differences `f = −ℓ(z_e)`.
    pub fn upweight_estimate(data: &[f64], target: usize, eps: f64, z_e: f64) -> Result<f64> {
        if eps == 0.0 {
            return Ok(0.0);
        }
        let n = data.len() as f64;
        let mut w = vec![1.0 / n; data.len()];
        w[target] += eps;
        let theta = fit_uniform(data)?;
        let theta_eps = fit(data, &w)?;
        Ok((-loss(theta_eps, z_e) + loss(theta, z_e)) / eps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BruteMetrics {
    pub auc: f64,
    pub r_at_k: f64,
}

/// Exhaustive pair counting for AUC (ties ½) and a direct top-`k` scan
/// under the descending-score, ascending-id rule.
pub fn brute_rank_metrics(scores: &[f64], labels: &[bool], k: usize) -> Result<BruteMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            expected: scores.len(),
            got: labels.len(),
        });
    }
    if k == 0 || k > scores.len() {
        return Err(Error::InvalidK {
            k,
            len: scores.len(),
        });
    }
    let (mut wins, mut pairs) = (0.0f64, 0.0f64);
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    if pairs == 0.0 {
        return Err(Error::UndefinedMetric("AUC needs both classes".into()));
    }
    // selection of the k best: repeatedly take the max score, lowest index first
    let mut taken = vec![false; scores.len()];
    let mut hits = 0usize;
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for i in 0..scores.len() {
            if taken[i] {
                continue;
            }
            match best {
                None => best = Some(i),
                Some(b) if scores[i] > scores[b] => best = Some(i),
                _ => {}
            }
        }
        let b = best.expect("k <= len");
        taken[b] = true;
        if labels[b] {
            hits += 1;
        }
    }
    Ok(BruteMetrics {
        auc: wins / pairs,
        r_at_k: hits as f64 / k as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::InitMode;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mean_model_closed_forms() {
        let data = [1.0, 2.0, 3.0];
        assert_eq!(mean_model::fit_uniform(&data).unwrap(), 2.0);
        assert!((mean_model::influence(&data, 3.0).unwrap() - 1.0).abs() < 1e-12);
        let d = mean_model::loo_delta(&data, 2, 1.0).unwrap();
        assert!((d + 0.375).abs() < 1e-12);
        assert!(mean_model::loo_delta(&data, 3, 1.0).is_err());
    }

    #[test]
    fn mean_model_upweighting() {
        let data = [1.0, 2.0, 3.0];
        let mut w = vec![1.0 / 3.0; 3];
        w[2] += 0.1;
        let theta = mean_model::fit(&data, &w).unwrap();
        assert!((theta - 2.3 / 1.1).abs() < 1e-12);
        assert_eq!(mean_model::upweight_estimate(&data, 2, 0.0, 1.0).unwrap(), 0.0);
        let exact = -1.0;
        let e1 = (mean_model::upweight_estimate(&data, 2, 0.1, 1.0).unwrap() - exact).abs();
        let e2 = (mean_model::upweight_estimate(&data, 2, 0.05, 1.0).unwrap() - exact).abs();
        let ratio = e1 / e2;
        assert!((1.5..=2.5).contains(&ratio), "{ratio}");
    }

    #[test]
    fn brute_metric_cases() {
        let m = brute_rank_metrics(&[0.9, 0.8, 0.7, 0.6], &[true, false, true, false], 2).unwrap();
        assert_eq!(m.auc, 0.75);
        assert_eq!(m.r_at_k, 0.5);
        assert_eq!(
            brute_rank_metrics(&[1.0; 4], &[true, false, true, false], 4).unwrap().auc,
            0.5
        );
        assert!(brute_rank_metrics(&[1.0, 2.0], &[false, false], 1).is_err());
    }

    fn convex_data(n: usize, seed: u64) -> Vec<Instance> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let y = rng.random_range(0..3);
                let mut f: Vec<(usize, f64)> = vec![(y, 1.0)];
                let j = rng.random_range(0..5);
                if j != y {
                    f.push((j, rng.random_range(0.2..1.0)));
                }
                f.sort_by_key(|x| x.0);
                Instance {
                    features: f,
                    label: Some(y),
                    id: 100 + i as u64,
                }
            })
            .collect()
    }

    #[test]
    fn newton_fit_converges_and_loo_properties() {
        let arch = ModelArch::convex(5, 3);
        let mut data = convex_data(20, 1);
        let dup = Instance {
            id: 999,
            ..data[3].clone()
        };
        data.push(dup);
        let l2 = 1e-2;
        let start = model::init_params(&arch, InitMode::Zeros, 0).unwrap();
        let fit = fit_convex(&arch, &data, &uniform_weights(data.len()), l2, &start).unwrap();
        assert!(fit.converged, "{fit:?}");
        let test = &data[0];
        let (a, _) = loo_delta(&arch, &data, data[3].id, test, l2, &fit).unwrap();
        let (b, _) = loo_delta(&arch, &data, 999, test, l2, &fit).unwrap();
        assert!((a.delta_loss - b.delta_loss).abs() < 1e-9);
        assert!(matches!(
            loo_delta(&arch, &data, 12345, test, l2, &fit),
            Err(Error::NotFound(12345))
        ));

        // permuting the training set does not move the optimum
        let mut rev = data.clone();
        rev.reverse();
        let fit_rev = fit_convex(&arch, &rev, &uniform_weights(rev.len()), l2, &start).unwrap();
        let (c, _) = loo_delta(&arch, &rev, data[5].id, test, l2, &fit_rev).unwrap();
        let (d, _) = loo_delta(&arch, &data, data[5].id, test, l2, &fit).unwrap();
        assert!((c.delta_loss - d.delta_loss).abs() < 1e-9);
    }

    #[test]
    fn first_order_influence_tracks_retraining() {
        let arch = ModelArch::convex(5, 3);
        let data = convex_data(24, 3);
        let r = influence_vs_loo(&arch, &data, &data[..2], 1e-2).unwrap();
        assert_eq!(r.rows.len(), 48);
        assert!(r.refits_converged);
        assert!(r.pearson >= 0.9, "{}", r.pearson);
        let (rec, _) = loo_delta(&arch, &data, data[5].id, &data[1], 1e-2, &r.fit).unwrap();
        let row = r.rows.iter().find(|x| x.train_id == data[5].id && x.test_id == data[1].id).unwrap();
        assert_eq!(row.loo_delta, rec.delta_loss);
    }

    #[test]
    fn oracle_rejects_mlp() {
        let arch = ModelArch::mlp(4, 2, 2, 3);
        let p = model::init_params(&arch, InitMode::Zeros, 0).unwrap();
        assert!(fit_convex(&arch, &[], &[], 1e-2, &p).is_err());
    }
}
