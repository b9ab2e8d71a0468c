//! Latent-to-action heads and few-shot evaluation.
//!
//! Two decoding strategies:
//!
//! - direct projection: a small MLP (single linear layer by default) from the
//!   latent to the action, regressed on the labelled subset;
//! - quantized index: k-means codes over the latents, a classifier that
//!   predicts the code from frozen encoder features (self-supervised; the
//!   targets are the code assignments, never the actions), and a per-code
//!   action table built from labelled rows only.
//!
//! Only the `M` labelled rows of a [`FewShotSplit`] ever touch true actions;
//! codebook construction and classifier training are label-free.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{mlp_backward, mlp_forward, mlp_forward_trace, Activation, MlpSpec};
use crate::optim::{adam_step, AdamState};
use crate::rng::Rng;
use crate::tensor::DenseMatrix;

/// Disjoint labelled / held-out row indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotSplit {
    pub labeled: Vec<usize>,
    pub heldout: Vec<usize>,
    pub seed: u64,
}

impl FewShotSplit {
    /// Random split: `m` labelled rows, the rest held out (optionally capped).
    pub fn sample(n: usize, m: usize, heldout_cap: Option<usize>, seed: u64) -> Result<Self> {
        if m == 0 {
            return Err(Error::InvalidConfig("few-shot split needs m >= 1".into()));
        }
        if m >= n {
            return Err(Error::InvalidConfig(format!(
                "m = {m} must leave held-out rows out of n = {n}"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = Rng::derive(seed, "few-shot-split");
        rng.shuffle(&mut order);
        let labeled = order[..m].to_vec();
        let mut heldout = order[m..].to_vec();
        if let Some(cap) = heldout_cap {
            heldout.truncate(cap);
        }
        Ok(FewShotSplit {
            labeled,
            heldout,
            seed,
        })
    }
}

/// Optimizer settings for head fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadTrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Hidden widths of the head MLP; empty means one linear layer.
    pub hidden: Vec<usize>,
    pub seed: u64,
}

impl Default for HeadTrainConfig {
    fn default() -> Self {
        HeadTrainConfig {
            steps: 400,
            lr: 1e-2,
            hidden: vec![],
            seed: 0,
        }
    }
}

pub trait ActionPredictor {
    fn predict(&self, inputs: &DenseMatrix) -> Result<DenseMatrix>;
}

/// MSE of a predictor on the indexed rows, overall and per action channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadEval {
    pub mse: f64,
    pub per_channel_mse: Vec<f64>,
}

pub fn evaluate_head<P: ActionPredictor>(
    head: &P,
    inputs: &DenseMatrix,
    actions: &DenseMatrix,
    indices: &[usize],
) -> Result<HeadEval> {
    if indices.is_empty() {
        return Err(Error::InvalidConfig("evaluate_head: empty index set".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= inputs.rows()) {
        return Err(Error::InvalidConfig(format!(
            "evaluate_head: index {bad} out of range ({} rows)",
            inputs.rows()
        )));
    }
    let picked = inputs.select_rows(indices);
    let truth = actions.select_rows(indices);
    let pred = head.predict(&picked)?;
    let d = truth.cols();
    let mut per_channel = vec![0.0; d];
    for r in 0..truth.rows() {
        for (c, acc) in per_channel.iter_mut().enumerate() {
            let e = pred.get(r, c) - truth.get(r, c);
            *acc += e * e;
        }
    }
    let n = truth.rows() as f64;
    for acc in &mut per_channel {
        *acc /= n;
    }
    let mse = per_channel.iter().sum::<f64>() / d as f64;
    Ok(HeadEval {
        mse,
        per_channel_mse: per_channel,
    })
}

// ---------------------------------------------------------------------------
// Direct projection
// ---------------------------------------------------------------------------

/// Regression head `z -> a`.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectProjectionHead {
    pub spec: MlpSpec,
    pub params: Vec<f64>,
}

impl ActionPredictor for DirectProjectionHead {
    fn predict(&self, inputs: &DenseMatrix) -> Result<DenseMatrix> {
        mlp_forward(&self.params, &self.spec, inputs)
    }
}

/// Fit metrics of a direct head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectFit {
    pub train_mse: f64,
    pub heldout_mse: f64,
}

/// Regress actions from latents on the labelled rows via full-batch Adam.
pub fn fit_direct(
    latents: &DenseMatrix,
    actions: &DenseMatrix,
    split: &FewShotSplit,
    cfg: &HeadTrainConfig,
) -> Result<(DirectProjectionHead, DirectFit)> {
    if latents.rows() != actions.rows() {
        return Err(Error::ShapeMismatch {
            op: "fit_direct",
            expected: format!("{} rows", latents.rows()),
            got: format!("{}", actions.rows()),
        });
    }
    let mut widths = vec![latents.cols()];
    widths.extend_from_slice(&cfg.hidden);
    widths.push(actions.cols());
    let spec = MlpSpec::new(widths, Activation::Tanh)?;
    let mut rng = Rng::derive(cfg.seed, "direct-head-init");
    let mut params = spec.init_params(&mut rng);
    let mut adam = AdamState::new(params.len());

    // Only the labelled rows ever feed the regression.
    let x = latents.select_rows(&split.labeled);
    let y = actions.select_rows(&split.labeled);
    let n = x.rows() as f64;
    let d = y.cols() as f64;

    let mut train_mse = f64::INFINITY;
    for _ in 0..cfg.steps {
        let trace = mlp_forward_trace(&params, &spec, &x)?;
        let out = trace.output();
        let mut g = DenseMatrix::zeros(out.rows(), out.cols());
        let mut mse = 0.0;
        for ((gv, &p), &t) in g.data_mut().iter_mut().zip(out.data()).zip(y.data()) {
            let e = p - t;
            mse += e * e;
            *gv = 2.0 * e / (n * d);
        }
        train_mse = mse / (n * d);
        if !train_mse.is_finite() {
            return Err(Error::Diverged {
                epoch: adam.step as usize,
                detail: "direct head loss went non-finite".into(),
            });
        }
        let (grad, _) = mlp_backward(&params, &spec, &trace, &g)?;
        adam_step(&mut params, &grad, &mut adam, cfg.lr, 0.9, 0.999, 1e-8)?;
    }

    let head = DirectProjectionHead { spec, params };
    let heldout_mse = evaluate_head(&head, latents, actions, &split.heldout)?.mse;
    Ok((head, DirectFit {
        train_mse,
        heldout_mse,
    }))
}

// ---------------------------------------------------------------------------
// Quantized index
// ---------------------------------------------------------------------------

/// K-means centroids over latents; `empty` marks centroids that ended up
/// with no members (degenerate data).
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: DenseMatrix,
    pub empty: Vec<bool>,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    /// Nearest centroid by squared distance; ties break to the lowest index.
    pub fn assign_one(&self, point: &[f64]) -> usize {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..self.k() {
            let row = self.centroids.row(c);
            let mut d = 0.0;
            for (&a, &b) in row.iter().zip(point) {
                let e = a - b;
                d += e * e;
            }
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        best
    }

    pub fn assign(&self, points: &DenseMatrix) -> Vec<usize> {
        (0..points.rows()).map(|r| self.assign_one(points.row(r))).collect()
    }
}

/// K-means with k-means++ seeding and a fixed iteration cap (100 sweeps,
/// stop early when assignments are stable). Deterministic given the seed.
pub fn build_codebook(latents: &DenseMatrix, k: usize, seed: u64) -> Result<Codebook> {
    if k < 1 {
        return Err(Error::InvalidConfig("codebook needs k >= 1".into()));
    }
    let n = latents.rows();
    if n < k {
        return Err(Error::InvalidConfig(format!(
            "codebook needs at least k = {k} points, got {n}"
        )));
    }
    let d = latents.cols();
    let mut rng = Rng::derive(seed, "kmeans");
    let mut centroids = DenseMatrix::zeros(k, d);

    // k-means++: first pick uniform, then distance-squared weighted.
    let first = rng.below(n);
    centroids.row_mut(0).copy_from_slice(latents.row(first));
    let mut dist2 = vec![f64::INFINITY; n];
    for c in 1..k {
        let prev = centroids.row(c - 1).to_vec();
        let mut total = 0.0;
        for (r, dv) in dist2.iter_mut().enumerate() {
            let mut dd = 0.0;
            for (&a, &b) in latents.row(r).iter().zip(&prev) {
                let e = a - b;
                dd += e * e;
            }
            *dv = dv.min(dd);
            total += *dv;
        }
        let pick = if total > 0.0 {
            let threshold = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (r, &dv) in dist2.iter().enumerate() {
                acc += dv;
                if acc >= threshold {
                    chosen = r;
                    break;
                }
            }
            chosen
        } else {
            // all points identical to an existing centroid
            rng.below(n)
        };
        centroids.row_mut(c).copy_from_slice(latents.row(pick));
    }

    let book = |cmat: DenseMatrix| Codebook {
        centroids: cmat,
        empty: vec![false; k],
    };
    let mut code = book(centroids);
    let mut assignments = code.assign(latents);
    for _ in 0..100 {
        let mut sums = DenseMatrix::zeros(k, d);
        let mut counts = vec![0u64; k];
        for (r, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums.row_mut(a).iter_mut().zip(latents.row(r)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                let src: Vec<f64> = sums.row(c).iter().map(|&v| v * inv).collect();
                code.centroids.row_mut(c).copy_from_slice(&src);
            }
            // empty clusters keep their previous centroid
        }
        let next = code.assign(latents);
        let stable = next == assignments;
        assignments = next;
        if stable {
            break;
        }
    }
    let mut seen = vec![false; k];
    for &a in &assignments {
        seen[a] = true;
    }
    for c in 0..k {
        code.empty[c] = !seen[c];
    }
    Ok(code)
}

/// Discrete-index head: classifier over frozen features plus a per-code
/// action table.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedIndexHead {
    pub codebook: Codebook,
    pub classifier_spec: MlpSpec,
    pub classifier_params: Vec<f64>,
    /// Mean labelled action per code, `k x d_action`.
    pub action_table: DenseMatrix,
    /// Codes whose table row fell back to the global labelled mean.
    pub fallback: Vec<bool>,
}

impl QuantizedIndexHead {
    /// Argmax code per row.
    pub fn predict_indices(&self, features: &DenseMatrix) -> Result<Vec<usize>> {
        let logits = mlp_forward(&self.classifier_params, &self.classifier_spec, features)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect())
    }
}

impl ActionPredictor for QuantizedIndexHead {
    fn predict(&self, features: &DenseMatrix) -> Result<DenseMatrix> {
        let idx = self.predict_indices(features)?;
        let mut out = DenseMatrix::zeros(features.rows(), self.action_table.cols());
        for (r, &code) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(self.action_table.row(code));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexFit {
    /// Held-out fraction of rows whose predicted code matches the assignment.
    pub index_accuracy: f64,
    /// Held-out action MSE of the table lookup.
    pub action_mse: f64,
}

/// Train the classifier on all rows against the code assignments and build
/// the per-code action table from the labelled rows.
pub fn fit_index_head(
    features: &DenseMatrix,
    codebook: Codebook,
    assignments: &[usize],
    actions: &DenseMatrix,
    split: &FewShotSplit,
    cfg: &HeadTrainConfig,
) -> Result<(QuantizedIndexHead, IndexFit)> {
    let k = codebook.k();
    if k == 0 {
        return Err(Error::InvalidConfig("empty codebook".into()));
    }
    if assignments.len() != features.rows() {
        return Err(Error::ShapeMismatch {
            op: "fit_index_head",
            expected: format!("{} assignments", features.rows()),
            got: format!("{}", assignments.len()),
        });
    }

    let mut widths = vec![features.cols()];
    widths.extend_from_slice(&cfg.hidden);
    widths.push(k);
    let spec = MlpSpec::new(widths, Activation::Tanh)?;
    let mut rng = Rng::derive(cfg.seed, "index-head-init");
    let mut params = spec.init_params(&mut rng);
    let mut adam = AdamState::new(params.len());
    let n = features.rows();
    let n_f = n as f64;

    // Softmax cross-entropy against the self-supervised targets.
    for _ in 0..cfg.steps {
        let trace = mlp_forward_trace(&params, &spec, features)?;
        let logits = trace.output();
        let mut g = DenseMatrix::zeros(n, k);
        for r in 0..n {
            let row = logits.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut zsum = 0.0;
            for &v in row {
                zsum += (v - max).exp();
            }
            let gr = g.row_mut(r);
            for (i, &v) in row.iter().enumerate() {
                let p = (v - max).exp() / zsum;
                gr[i] = (p - if assignments[r] == i { 1.0 } else { 0.0 }) / n_f;
            }
        }
        let (grad, _) = mlp_backward(&params, &spec, &trace, &g)?;
        adam_step(&mut params, &grad, &mut adam, cfg.lr, 0.9, 0.999, 1e-8)?;
    }

    // Per-code mean of the labelled actions; unseen codes fall back to the
    // global labelled mean and get flagged.
    let d_a = actions.cols();
    let mut table = DenseMatrix::zeros(k, d_a);
    let mut counts = vec![0u64; k];
    let mut global = vec![0.0; d_a];
    for &r in &split.labeled {
        let code = assignments[r];
        counts[code] += 1;
        for ((t, g), &v) in table
            .row_mut(code)
            .iter_mut()
            .zip(global.iter_mut())
            .zip(actions.row(r))
        {
            *t += v;
            *g += v;
        }
    }
    let m = split.labeled.len() as f64;
    for g in &mut global {
        *g /= m;
    }
    let mut fallback = vec![false; k];
    for c in 0..k {
        if counts[c] > 0 {
            let inv = 1.0 / counts[c] as f64;
            for t in table.row_mut(c) {
                *t *= inv;
            }
        } else {
            table.row_mut(c).copy_from_slice(&global);
            fallback[c] = true;
        }
    }

    let head = QuantizedIndexHead {
        codebook,
        classifier_spec: spec,
        classifier_params: params,
        action_table: table,
        fallback,
    };

    let predicted = head.predict_indices(&features.select_rows(&split.heldout))?;
    let hits = predicted
        .iter()
        .zip(split.heldout.iter())
        .filter(|(p, &r)| **p == assignments[r])
        .count();
    let index_accuracy = hits as f64 / split.heldout.len().max(1) as f64;
    let action_mse = evaluate_head(&head, features, actions, &split.heldout)?.mse;
    Ok((head, IndexFit {
        index_accuracy,
        action_mse,
    }))
}

/// Baseline that always predicts one fixed action row (typically the
/// labelled mean); the floor every head must beat.
pub struct ConstantPredictor(pub Vec<f64>);

impl ActionPredictor for ConstantPredictor {
    fn predict(&self, inputs: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = DenseMatrix::zeros(inputs.rows(), self.0.len());
        for r in 0..inputs.rows() {
            out.row_mut(r).copy_from_slice(&self.0);
        }
        Ok(out)
    }
}

/// Mean of the labelled action rows.
pub fn labeled_mean(actions: &DenseMatrix, split: &FewShotSplit) -> Vec<f64> {
    let picked = actions.select_rows(&split.labeled);
    picked.col_mean()
}
