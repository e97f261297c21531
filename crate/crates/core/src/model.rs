//! Entity-prediction models with analytic losses and gradients.
//!
//! Both models map a sparse bag-of-words document to a softmax over `K`
//! entity classes and are trained with cross-entropy.
//!
//! Canonical parameter layouts (all row-major):
//!
//! * `convex_logistic`: `W[K][D]` then `b[K]`.
//! * `mlp_predictor`: `E[V][embed]`, `W1[embed][hidden]`, `b1[hidden]`,
//!   `W2[hidden][K]`, `b2[K]`, with `h = tanh(W1ᵀ Σⱼ xⱼ E[j] + b1)` and
//!   logits `W2ᵀ h + b2`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorruptedCorpus, Vocabulary};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    ConvexLogistic,
    MlpPredictor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelArch {
    pub kind: ArchKind,
    /// `D` for the logistic model, vocabulary size `V` for the MLP.
    pub feature_dim: usize,
    pub class_count: usize,
    #[serde(default)]
    pub embed_dim: usize,
    #[serde(default)]
    pub hidden_dim: usize,
}

impl ModelArch {
    pub fn convex(feature_dim: usize, class_count: usize) -> Self {
        Self {
            kind: ArchKind::ConvexLogistic,
            feature_dim,
            class_count,
            embed_dim: 0,
            hidden_dim: 0,
        }
    }

    pub fn mlp(vocab: usize, embed_dim: usize, hidden_dim: usize, class_count: usize) -> Self {
        Self {
            kind: ArchKind::MlpPredictor,
            feature_dim: vocab,
            class_count,
            embed_dim,
            hidden_dim,
        }
    }

    pub fn param_count(&self) -> usize {
        let (d, k) = (self.feature_dim, self.class_count);
        match self.kind {
            ArchKind::ConvexLogistic => k * d + k,
            ArchKind::MlpPredictor => {
                let (e, h) = (self.embed_dim, self.hidden_dim);
                d * e + e * h + h + h * k + k
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.class_count < 2 {
            return Err(Error::Config(
                "feature_dim must be positive and class_count at least 2".into(),
            ));
        }
        if self.kind == ArchKind::MlpPredictor && (self.embed_dim == 0 || self.hidden_dim == 0) {
            return Err(Error::Config("mlp needs positive embed_dim and hidden_dim".into()));
        }
        Ok(())
    }
}

/// Flat parameter values in the architecture's canonical layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector(pub Vec<f64>);

/// Gradient in the same layout as [`ParameterVector`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

impl ParameterVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn distance(&self, other: &ParameterVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

impl GradientVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// In-place `self += scale * other`.
    pub fn axpy(&mut self, scale: f64, other: &GradientVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.0 {
            *a *= s;
        }
    }

    /// Mean of equally-shaped gradients, accumulated in slice order.
    pub fn mean(grads: &[GradientVector]) -> Result<GradientVector> {
        let first = grads
            .first()
            .ok_or_else(|| Error::InvalidInput("mean of zero gradients".into()))?;
        let mut acc = GradientVector::zeros(first.len());
        for g in grads {
            if g.len() != acc.len() {
                return Err(Error::Shape {
                    expected: acc.len(),
                    got: g.len(),
                });
            }
            acc.axpy(1.0, g);
        }
        acc.scale(1.0 / grads.len() as f64);
        Ok(acc)
    }
}

/// One scorable input: sparse document features and an optional class label.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    /// `(feature index, value)` pairs with distinct, ascending indices.
    pub features: Vec<(usize, f64)>,
    pub label: Option<usize>,
    /// Source example id, used in error messages.
    pub id: u64,
}

impl Instance {
    fn label_or_err(&self, k: usize) -> Result<usize> {
        match self.label {
            Some(y) if y < k => Ok(y),
            Some(y) => Err(Error::InvalidInput(format!(
                "label {y} out of range for {k} classes"
            ))),
            None => Err(Error::NotScorable(self.id)),
        }
    }
}

/// Maps token sequences onto model inputs and entity tokens onto classes.
#[derive(Clone, Debug, PartialEq)]
pub struct Featurizer {
    pub vocabulary: Vocabulary,
    pub classes: Vec<String>,
}

impl Featurizer {
    pub fn new(vocabulary: Vocabulary, classes: Vec<String>) -> Self {
        Self {
            vocabulary,
            classes,
        }
    }

    pub fn class_index(&self, token: &str) -> Option<usize> {
        self.classes.iter().position(|c| c == token)
    }

    /// Token counts scaled by `1/sqrt(len)`.
    pub fn features(&self, document: &[String]) -> Vec<(usize, f64)> {
        if document.is_empty() {
            return Vec::new();
        }
        let mut ids: Vec<usize> = document.iter().map(|t| self.vocabulary.id(t)).collect();
        ids.sort_unstable();
        let scale = 1.0 / (document.len() as f64).sqrt();
        let mut out: Vec<(usize, f64)> = Vec::new();
        for id in ids {
            match out.last_mut() {
                Some((last, v)) if *last == id => *v += scale,
                _ => out.push((id, scale)),
            }
        }
        out
    }

    /// Instances labelled with each example's summary entity.
    pub fn corpus_instances(&self, corpus: &CorruptedCorpus) -> Vec<Instance> {
        corpus
            .examples
            .iter()
            .map(|e| self.instance(e.id, &e.document, e.summary_entity(&self.classes)))
            .collect()
    }

    pub fn instance(&self, id: u64, document: &[String], label: Option<&str>) -> Instance {
        Instance {
            features: self.features(document),
            label: label.and_then(|l| self.class_index(l)),
            id,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "scale")]
pub enum InitMode {
    SeededUniform(f64),
    Zeros,
}

pub fn init_params(arch: &ModelArch, mode: InitMode, seed: u64) -> Result<ParameterVector> {
    let n = arch.param_count();
    match mode {
        InitMode::Zeros => Ok(ParameterVector(vec![0.0; n])),
        InitMode::SeededUniform(a) => {
            if !(a > 0.0) {
                return Err(Error::Config(format!("init scale must be positive, got {a}")));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            Ok(ParameterVector(
                (0..n).map(|_| rng.random_range(-a..a)).collect(),
            ))
        }
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for v in z.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in z.iter_mut() {
        *v /= s;
    }
}

/// Numerically stable `-log softmax(z)[y]`.
fn cross_entropy(z: &[f64], y: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    (lse - z[y]).max(0.0)
}

struct MlpForward {
    embed: Vec<f64>,
    hidden: Vec<f64>,
    logits: Vec<f64>,
}

fn check_len(arch: &ModelArch, params: &ParameterVector) -> Result<()> {
    if params.len() != arch.param_count() {
        return Err(Error::Shape {
            expected: arch.param_count(),
            got: params.len(),
        });
    }
    Ok(())
}

fn mlp_forward(arch: &ModelArch, p: &[f64], features: &[(usize, f64)]) -> MlpForward {
    let (v, e, h, k) = (
        arch.feature_dim,
        arch.embed_dim,
        arch.hidden_dim,
        arch.class_count,
    );
    let w1 = v * e;
    let b1 = w1 + e * h;
    let w2 = b1 + h;
    let b2 = w2 + h * k;

    let mut embed = vec![0.0; e];
    for &(j, x) in features {
        let row = &p[(j % v) * e..(j % v) * e + e];
        for (acc, w) in embed.iter_mut().zip(row) {
            *acc += x * w;
        }
    }
    let mut hidden = p[b1..b1 + h].to_vec();
    for (d, &ed) in embed.iter().enumerate() {
        let row = &p[w1 + d * h..w1 + d * h + h];
        for (acc, w) in hidden.iter_mut().zip(row) {
            *acc += ed * w;
        }
    }
    for a in &mut hidden {
        *a = a.tanh();
    }
    let mut logits = p[b2..b2 + k].to_vec();
    for (i, &hi) in hidden.iter().enumerate() {
        let row = &p[w2 + i * k..w2 + i * k + k];
        for (acc, w) in logits.iter_mut().zip(row) {
            *acc += hi * w;
        }
    }
    MlpForward {
        embed,
        hidden,
        logits,
    }
}

/// Unnormalized class scores for one document.
pub fn logits(arch: &ModelArch, params: &ParameterVector, features: &[(usize, f64)]) -> Vec<f64> {
    let p = params.as_slice();
    match arch.kind {
        ArchKind::ConvexLogistic => {
            let (d, k) = (arch.feature_dim, arch.class_count);
            let mut z = p[k * d..k * d + k].to_vec();
            for (c, zc) in z.iter_mut().enumerate() {
                for &(j, x) in features {
                    *zc += p[c * d + j % d] * x;
                }
            }
            z
        }
        ArchKind::MlpPredictor => mlp_forward(arch, p, features).logits,
    }
}

pub fn per_example_loss(arch: &ModelArch, params: &ParameterVector, inst: &Instance) -> Result<f64> {
    check_len(arch, params)?;
    let y = inst.label_or_err(arch.class_count)?;
    Ok(cross_entropy(&logits(arch, params, &inst.features), y))
}

/// Loss and its analytic gradient in one pass.
pub fn loss_and_grad(
    arch: &ModelArch,
    params: &ParameterVector,
    inst: &Instance,
) -> Result<(f64, GradientVector)> {
    check_len(arch, params)?;
    let y = inst.label_or_err(arch.class_count)?;
    let p = params.as_slice();
    let k = arch.class_count;
    let mut grad = vec![0.0; p.len()];
    match arch.kind {
        ArchKind::ConvexLogistic => {
            let d = arch.feature_dim;
            let z = logits(arch, params, &inst.features);
            let loss = cross_entropy(&z, y);
            let mut r = z;
            softmax_in_place(&mut r);
            r[y] -= 1.0;
            for (c, &rc) in r.iter().enumerate() {
                for &(j, x) in &inst.features {
                    grad[c * d + j % d] += rc * x;
                }
                grad[k * d + c] = rc;
            }
            Ok((loss, GradientVector(grad)))
        }
        ArchKind::MlpPredictor => {
            let (v, e, h) = (arch.feature_dim, arch.embed_dim, arch.hidden_dim);
            let w1 = v * e;
            let b1 = w1 + e * h;
            let w2 = b1 + h;
            let b2 = w2 + h * k;
            let fwd = mlp_forward(arch, p, &inst.features);
            let loss = cross_entropy(&fwd.logits, y);
            let mut dz = fwd.logits;
            softmax_in_place(&mut dz);
            dz[y] -= 1.0;

            grad[b2..b2 + k].copy_from_slice(&dz);
            let mut da = vec![0.0; h];
            for i in 0..h {
                let hi = fwd.hidden[i];
                let row = &p[w2 + i * k..w2 + i * k + k];
                let mut dh = 0.0;
                for c in 0..k {
                    grad[w2 + i * k + c] = hi * dz[c];
                    dh += row[c] * dz[c];
                }
                da[i] = dh * (1.0 - hi * hi);
            }
            grad[b1..b1 + h].copy_from_slice(&da);
            let mut de = vec![0.0; e];
            for dd in 0..e {
                let ed = fwd.embed[dd];
                let row = &p[w1 + dd * h..w1 + dd * h + h];
                let mut acc = 0.0;
                for i in 0..h {
                    grad[w1 + dd * h + i] = ed * da[i];
                    acc += row[i] * da[i];
                }
                de[dd] = acc;
            }
            for &(j, x) in &inst.features {
                let base = (j % v) * e;
                for dd in 0..e {
                    grad[base + dd] += x * de[dd];
                }
            }
            Ok((loss, GradientVector(grad)))
        }
    }
}

pub fn per_example_grad(
    arch: &ModelArch,
    params: &ParameterVector,
    inst: &Instance,
) -> Result<GradientVector> {
    loss_and_grad(arch, params, inst).map(|(_, g)| g)
}

/// Gradient of the test function `f(z, θ) = -ℓ(z, θ)`.
pub fn test_fn_grad(
    arch: &ModelArch,
    params: &ParameterVector,
    inst: &Instance,
) -> Result<GradientVector> {
    let mut g = per_example_grad(arch, params, inst)?;
    for v in &mut g.0 {
        *v = -*v;
    }
    Ok(g)
}

/// Mean training loss `R(θ)`, summed in slice order.
pub fn risk(arch: &ModelArch, params: &ParameterVector, data: &[Instance]) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for inst in data {
        s += per_example_loss(arch, params, inst)?;
    }
    Ok(s / data.len() as f64)
}

/// Dense Hessian of the mean training loss plus `λ·I`.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianMatrix {
    pub dim: usize,
    pub damping: f64,
    /// Row-major `dim × dim` entries.
    pub entries: Vec<f64>,
}

impl HessianMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.dim + j]
    }

    pub fn to_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.dim, self.dim, &self.entries)
    }
}

pub const MAX_DENSE_HESSIAN: usize = 2000;

/// Adds `w·∇²ℓ(inst)` of the logistic model into the row-major buffer `h`.
pub(crate) fn add_instance_hessian(
    arch: &ModelArch,
    params: &ParameterVector,
    inst: &Instance,
    w: f64,
    h: &mut [f64],
) {
    let (d, k) = (arch.feature_dim, arch.class_count);
    let n = arch.param_count();
    let mut prob = logits(arch, params, &inst.features);
    softmax_in_place(&mut prob);
    // augmented features: document entries followed by the bias slot
    let mut coords: Vec<(Option<usize>, f64)> = inst.features.iter().map(|&(j, x)| (Some(j % d), x)).collect();
    coords.push((None, 1.0));
    let idx = |c: usize, f: Option<usize>| match f {
        Some(j) => c * d + j,
        None => k * d + c,
    };
    for a in 0..k {
        for b in 0..k {
            let s = if a == b {
                prob[a] * (1.0 - prob[a])
            } else {
                -prob[a] * prob[b]
            };
            if s == 0.0 {
                continue;
            }
            for &(fi, xi) in &coords {
                let r = idx(a, fi);
                for &(fj, xj) in &coords {
                    h[r * n + idx(b, fj)] += w * s * xi * xj;
                }
            }
        }
    }
}

pub fn hessian_matrix(
    arch: &ModelArch,
    params: &ParameterVector,
    data: &[Instance],
    damping: f64,
) -> Result<HessianMatrix> {
    if arch.kind != ArchKind::ConvexLogistic {
        return Err(Error::UnsupportedArch(
            "exact Hessians are only defined for convex_logistic".into(),
        ));
    }
    check_len(arch, params)?;
    let n = arch.param_count();
    if n > MAX_DENSE_HESSIAN {
        return Err(Error::Config(format!(
            "{n} parameters exceed the dense Hessian budget of {MAX_DENSE_HESSIAN}"
        )));
    }
    if !(damping >= 0.0) {
        return Err(Error::Config("damping must be non-negative".into()));
    }
    let mut h = vec![0.0; n * n];
    let w = 1.0 / data.len().max(1) as f64;
    for inst in data {
        add_instance_hessian(arch, params, inst, w, &mut h);
    }
    for i in 0..n {
        h[i * n + i] += damping;
    }
    // exact symmetry regardless of summation order
    for i in 0..n {
        for j in i + 1..n {
            let m = 0.5 * (h[i * n + j] + h[j * n + i]);
            h[i * n + j] = m;
            h[j * n + i] = m;
        }
    }
    Ok(HessianMatrix {
        dim: n,
        damping,
        entries: h,
    })
}

/// Returns the argmax class (lowest index on ties) and the softmax distribution.
pub fn predict_entity(
    arch: &ModelArch,
    params: &ParameterVector,
    features: &[(usize, f64)],
) -> (usize, Vec<f64>) {
    let mut prob = logits(arch, params, features);
    softmax_in_place(&mut prob);
    let mut best = 0;
    for (i, &p) in prob.iter().enumerate() {
        if p > prob[best] {
            best = i;
        }
    }
    (best, prob)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1)`.
    pub max_rel_err: f64,
    pub worst_coordinate: usize,
    pub coordinates_checked: usize,
}

/// Number of coordinates above which only a seeded sample is checked.
pub const FULL_CHECK_LIMIT: usize = 10_000;
const SAMPLED_COORDS: usize = 2_000;

/// Compares `grad` with central differences of `loss` at `x`.
pub fn check_gradient_with<F>(loss: F, grad: &[f64], x: &[f64], h: f64, seed: u64) -> GradCheckReport
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let coords: Vec<usize> = if x.len() > FULL_CHECK_LIMIT {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..SAMPLED_COORDS)
            .map(|_| rng.random_range(0..x.len()))
            .collect()
    } else {
        (0..x.len()).collect()
    };
    let mut probe = x.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_coordinate: 0,
        coordinates_checked: coords.len(),
    };
    for &i in &coords {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = loss(&probe);
        probe[i] = orig - h;
        let down = loss(&probe);
        probe[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = grad[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1.0);
        if err > report.max_rel_err {
            report.max_rel_err = err;
            report.worst_coordinate = i;
        }
    }
    report
}

pub fn check_gradient(
    arch: &ModelArch,
    params: &ParameterVector,
    inst: &Instance,
    h: f64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidInput("h must be positive".into()));
    }
    let g = per_example_grad(arch, params, inst)?;
    let y = inst.label_or_err(arch.class_count)?;
    let loss = |x: &[f64]| {
        let z = logits(arch, &ParameterVector(x.to_vec()), &inst.features);
        cross_entropy(&z, y)
    };
    Ok(check_gradient_with(loss, &g.0, params.as_slice(), h, inst.id))
}
