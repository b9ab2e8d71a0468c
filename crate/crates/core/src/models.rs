//! Latent-action models: the information-bottleneck model and the
//! inverse-dynamics baseline.
//!
//! Both share the same ingredients: a Gaussian encoder producing per-sample
//! `(mu, log_var)`, reparameterized sampling `z = mu + exp(log_var / 2) * eps`,
//! a squared-error decoder, and the loss
//!
//! ```text
//! total = rec + beta * kl
//! rec   = mean over batch and features of (decoded - target)^2
//! kl    = mean over batch of sum over latent dims of
//!         (mu^2 + sigma^2 - 1 - log sigma^2) / 2
//! ```
//!
//! They differ only in wiring. The bottleneck model encodes the current
//! observation alone and reconstructs the next observation from the latent
//! alone; the baseline encodes the concatenated pair and reconstructs
//! conditioned on the current observation, which gives it a copy path around
//! the latent.
//!
//! Training is plain minibatch Adam, deterministic given the seed. Analysis
//! uses the posterior mean, never a sample.

use serde::{Deserialize, Serialize};

use crate::env::ObservationPairs;
use crate::error::{Error, Result};
use crate::mlp::{mlp_backward, mlp_forward, mlp_forward_trace, Activation, MlpSpec};
use crate::optim::{adam_step, AdamState};
use crate::rng::Rng;
use crate::tensor::DenseMatrix;

pub const DEFAULT_LV_CLAMP: (f64, f64) = (-8.0, 4.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vib,
    Idm,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Vib => write!(f, "vib"),
            ModelKind::Idm => write!(f, "idm"),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vib" => Ok(ModelKind::Vib),
            "idm" => Ok(ModelKind::Idm),
            other => Err(Error::InvalidConfig(format!("unknown model kind {other:?}"))),
        }
    }
}

/// Batched diagonal-Gaussian posterior: row `i` holds `(mu_i, log_var_i)`.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mu: DenseMatrix,
    pub log_var: DenseMatrix,
}

impl GaussianPosterior {
    pub fn len(&self) -> usize {
        self.mu.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }
}

/// Hyperparameters for a training run.
///
/// `d_z`, `hidden` and `activation` describe the architecture the run
/// instantiates; everything else steers the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub beta: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "default_lv_clamp")]
    pub lv_clamp: (f64, f64),
    #[serde(default = "default_d_z")]
    pub d_z: usize,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_lv_clamp() -> (f64, f64) {
    DEFAULT_LV_CLAMP
}
fn default_d_z() -> usize {
    8
}
fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}
fn default_activation() -> Activation {
    Activation::Tanh
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beta: 1e-3,
            lr: 1e-3,
            epochs: 60,
            batch_size: 256,
            seed: 0,
            lv_clamp: DEFAULT_LV_CLAMP,
            d_z: default_d_z(),
            hidden: default_hidden(),
            activation: default_activation(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beta < 0.0 {
            return Err(Error::InvalidConfig(format!("beta must be >= 0, got {}", self.beta)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.d_z == 0 {
            return Err(Error::InvalidConfig("d_z must be >= 1".into()));
        }
        if self.lv_clamp.0 >= self.lv_clamp.1 {
            return Err(Error::InvalidConfig(format!(
                "lv_clamp must satisfy min < max, got {:?}",
                self.lv_clamp
            )));
        }
        Ok(())
    }
}

/// Bottleneck model: encoder `O_t -> (mu, log_var)`, decoder `z -> O_{t+k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct VibModel {
    pub encoder_spec: MlpSpec,
    pub decoder_spec: MlpSpec,
    pub encoder_params: Vec<f64>,
    pub decoder_params: Vec<f64>,
    pub d_z: usize,
    pub lv_clamp: (f64, f64),
}

/// Inverse-dynamics baseline: encoder `[O_t; O_{t+k}] -> (mu, log_var)`,
/// decoder `[O_t; z] -> O_{t+k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdmModel {
    pub encoder_spec: MlpSpec,
    pub decoder_spec: MlpSpec,
    pub encoder_params: Vec<f64>,
    pub decoder_params: Vec<f64>,
    pub d_z: usize,
    pub lv_clamp: (f64, f64),
}

fn build_specs(
    enc_in: usize,
    dec_in: usize,
    d_obs: usize,
    cfg: &TrainConfig,
) -> Result<(MlpSpec, MlpSpec)> {
    let mut enc_widths = vec![enc_in];
    enc_widths.extend_from_slice(&cfg.hidden);
    enc_widths.push(2 * cfg.d_z);
    let mut dec_widths = vec![dec_in];
    dec_widths.extend_from_slice(&cfg.hidden);
    dec_widths.push(d_obs);
    Ok((
        MlpSpec::new(enc_widths, cfg.activation)?,
        MlpSpec::new(dec_widths, cfg.activation)?,
    ))
}

impl VibModel {
    /// Seeded initialization for observations of width `d_obs`.
    pub fn init(d_obs: usize, cfg: &TrainConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (encoder_spec, decoder_spec) = build_specs(d_obs, cfg.d_z, d_obs, cfg)?;
        let encoder_params = encoder_spec.init_params(rng);
        let decoder_params = decoder_spec.init_params(rng);
        Ok(VibModel {
            encoder_spec,
            decoder_spec,
            encoder_params,
            decoder_params,
            d_z: cfg.d_z,
            lv_clamp: cfg.lv_clamp,
        })
    }

    pub fn d_obs(&self) -> usize {
        self.encoder_spec.input_dim()
    }

    /// Posterior for a batch of current observations. Consumes `O_t` only.
    pub fn encode(&self, obs: &DenseMatrix) -> Result<GaussianPosterior> {
        let out = mlp_forward(&self.encoder_params, &self.encoder_spec, obs)?;
        Ok(split_posterior(&out, self.d_z, self.lv_clamp))
    }

    /// Reconstruction from the latent alone.
    pub fn decode(&self, z: &DenseMatrix) -> Result<DenseMatrix> {
        mlp_forward(&self.decoder_params, &self.decoder_spec, z)
    }
}

impl IdmModel {
    pub fn init(d_obs: usize, cfg: &TrainConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (encoder_spec, decoder_spec) = build_specs(2 * d_obs, d_obs + cfg.d_z, d_obs, cfg)?;
        let encoder_params = encoder_spec.init_params(rng);
        let decoder_params = decoder_spec.init_params(rng);
        Ok(IdmModel {
            encoder_spec,
            decoder_spec,
            encoder_params,
            decoder_params,
            d_z: cfg.d_z,
            lv_clamp: cfg.lv_clamp,
        })
    }

    pub fn d_obs(&self) -> usize {
        self.encoder_spec.input_dim() / 2
    }

    /// Posterior from the concatenated pair `[O_t; O_{t+k}]`.
    pub fn encode_pair(&self, obs_t: &DenseMatrix, obs_next: &DenseMatrix) -> Result<GaussianPosterior> {
        let pair = obs_t.hcat(obs_next)?;
        let out = mlp_forward(&self.encoder_params, &self.encoder_spec, &pair)?;
        Ok(split_posterior(&out, self.d_z, self.lv_clamp))
    }

    /// Reconstruction conditioned on the current observation.
    pub fn decode(&self, obs_t: &DenseMatrix, z: &DenseMatrix) -> Result<DenseMatrix> {
        let input = obs_t.hcat(z)?;
        mlp_forward(&self.decoder_params, &self.decoder_spec, &input)
    }
}

fn split_posterior(enc_out: &DenseMatrix, d_z: usize, clamp: (f64, f64)) -> GaussianPosterior {
    let n = enc_out.rows();
    let mut mu = DenseMatrix::zeros(n, d_z);
    let mut lv = DenseMatrix::zeros(n, d_z);
    for r in 0..n {
        let row = enc_out.row(r);
        mu.row_mut(r).copy_from_slice(&row[..d_z]);
        for (dst, &raw) in lv.row_mut(r).iter_mut().zip(&row[d_z..]) {
            *dst = raw.clamp(clamp.0, clamp.1);
        }
    }
    GaussianPosterior { mu, log_var: lv }
}

/// `z = mu + exp(log_var / 2) * eps`, with `eps` drawn row-major from `rng`.
pub fn reparameterize(posterior: &GaussianPosterior, rng: &mut Rng) -> DenseMatrix {
    let mut eps = DenseMatrix::zeros(posterior.len(), posterior.dim());
    rng.fill_normal(eps.data_mut());
    reparameterize_with(posterior, &eps)
}

/// Deterministic variant used by the loss gradients: caller supplies `eps`.
pub fn reparameterize_with(posterior: &GaussianPosterior, eps: &DenseMatrix) -> DenseMatrix {
    let mut z = eps.clone();
    for ((zv, &m), &lv) in z
        .data_mut()
        .iter_mut()
        .zip(posterior.mu.data())
        .zip(posterior.log_var.data())
    {
        *zv = m + (0.5 * lv).exp() * *zv;
    }
    z
}

/// Closed-form `KL(N(mu, diag sigma^2) || N(0, I))` per batch row, in nats.
pub fn kl_standard_normal(posterior: &GaussianPosterior) -> Vec<f64> {
    let d = posterior.dim();
    (0..posterior.len())
        .map(|r| {
            let mu = posterior.mu.row(r);
            let lv = posterior.log_var.row(r);
            let mut acc = 0.0;
            for i in 0..d {
                acc += mu[i] * mu[i] + lv[i].exp() - 1.0 - lv[i];
            }
            0.5 * acc
        })
        .collect()
}

/// Loss values for one batch (or one epoch when averaged).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub rec: f64,
    pub kl: f64,
}

fn check_batch(op: &'static str, d_obs: usize, o_t: &DenseMatrix, o_next: &DenseMatrix) -> Result<()> {
    if o_t.rows() != o_next.rows() || o_t.cols() != o_next.cols() || o_t.cols() != d_obs {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("two aligned batches of width {d_obs}"),
            got: format!(
                "{}x{} and {}x{}",
                o_t.rows(),
                o_t.cols(),
                o_next.rows(),
                o_next.cols()
            ),
        });
    }
    if o_t.rows() == 0 {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    Ok(())
}

fn finite_or_divergence(terms: LossTerms, batch_rows: usize) -> Result<LossTerms> {
    if terms.total.is_finite() {
        Ok(terms)
    } else {
        Err(Error::Diverged {
            epoch: 0,
            detail: format!("non-finite loss on a {batch_rows}-row batch"),
        })
    }
}

/// Bottleneck loss; draws the reparameterization noise from `rng`.
pub fn vib_loss(
    model: &VibModel,
    o_t: &DenseMatrix,
    o_next: &DenseMatrix,
    beta: f64,
    rng: &mut Rng,
) -> Result<LossTerms> {
    let mut eps = DenseMatrix::zeros(o_t.rows(), model.d_z);
    rng.fill_normal(eps.data_mut());
    let (terms, _, _) = vib_loss_grad(model, o_t, o_next, beta, &eps)?;
    finite_or_divergence(terms, o_t.rows())
}

/// Baseline loss; same contract as [`vib_loss`].
pub fn idm_loss(
    model: &IdmModel,
    o_t: &DenseMatrix,
    o_next: &DenseMatrix,
    beta: f64,
    rng: &mut Rng,
) -> Result<LossTerms> {
    let mut eps = DenseMatrix::zeros(o_t.rows(), model.d_z);
    rng.fill_normal(eps.data_mut());
    let (terms, _, _) = idm_loss_grad(model, o_t, o_next, beta, &eps)?;
    finite_or_divergence(terms, o_t.rows())
}

/// Shared loss-and-gradient core.
///
/// `enc_input` feeds the encoder; the decoder input is `z` either alone or
/// prefixed with `O_t`. Returns loss terms plus gradients for the encoder and
/// decoder parameter vectors.
fn gaussian_vae_loss_grad(
    enc_spec: &MlpSpec,
    enc_params: &[f64],
    dec_spec: &MlpSpec,
    dec_params: &[f64],
    d_z: usize,
    lv_clamp: (f64, f64),
    enc_input: &DenseMatrix,
    dec_prefix: Option<&DenseMatrix>,
    target: &DenseMatrix,
    beta: f64,
    eps: &DenseMatrix,
) -> Result<(LossTerms, Vec<f64>, Vec<f64>)> {
    let n = enc_input.rows();
    let d_obs = target.cols();
    let n_f = n as f64;

    let enc_trace = mlp_forward_trace(enc_params, enc_spec, enc_input)?;
    let enc_out = enc_trace.output();
    let posterior = split_posterior(enc_out, d_z, lv_clamp);
    let z = reparameterize_with(&posterior, eps);

    let dec_input = match dec_prefix {
        Some(prefix) => prefix.hcat(&z)?,
        None => z.clone(),
    };
    let dec_trace = mlp_forward_trace(dec_params, dec_spec, &dec_input)?;
    let dec_out = dec_trace.output();

    // rec = mean over batch x features of squared error
    let mut rec = 0.0;
    for (&d, &t) in dec_out.data().iter().zip(target.data()) {
        let e = d - t;
        rec += e * e;
    }
    rec /= (n * d_obs) as f64;
    let kl = kl_standard_normal(&posterior).iter().sum::<f64>() / n_f;
    let terms = LossTerms {
        total: rec + beta * kl,
        rec,
        kl,
    };

    // d rec / d dec_out
    let mut g_dec_out = DenseMatrix::zeros(n, d_obs);
    let scale = 2.0 / (n * d_obs) as f64;
    for ((g, &d), &t) in g_dec_out
        .data_mut()
        .iter_mut()
        .zip(dec_out.data())
        .zip(target.data())
    {
        *g = scale * (d - t);
    }
    let (dec_grad, g_dec_in) = mlp_backward(dec_params, dec_spec, &dec_trace, &g_dec_out)?;

    // Slice off the gradient belonging to z.
    let prefix_cols = dec_prefix.map_or(0, |p| p.cols());
    let mut g_z = DenseMatrix::zeros(n, d_z);
    for r in 0..n {
        g_z.row_mut(r)
            .copy_from_slice(&g_dec_in.row(r)[prefix_cols..prefix_cols + d_z]);
    }

    // Assemble the gradient at the encoder output [mu | log_var_raw].
    let mut g_enc_out = DenseMatrix::zeros(n, 2 * d_z);
    let kl_scale = beta / n_f;
    for r in 0..n {
        let mu = posterior.mu.row(r);
        let lv = posterior.log_var.row(r);
        let raw = &enc_out.row(r)[d_z..];
        let gz = g_z.row(r);
        let e = eps.row(r);
        let out = g_enc_out.row_mut(r);
        for i in 0..d_z {
            // z = mu + exp(lv/2) eps ; kl term d/dmu = mu, d/dlv = (e^lv - 1)/2
            out[i] = gz[i] + kl_scale * mu[i];
            let mut glv = gz[i] * 0.5 * (0.5 * lv[i]).exp() * e[i]
                + kl_scale * 0.5 * (lv[i].exp() - 1.0);
            // The clamp gates the gradient of everything downstream of log_var.
            if raw[i] <= lv_clamp.0 || raw[i] >= lv_clamp.1 {
                glv = 0.0;
            }
            out[d_z + i] = glv;
        }
    }
    let (enc_grad, _) = mlp_backward(enc_params, enc_spec, &enc_trace, &g_enc_out)?;
    Ok((terms, enc_grad, dec_grad))
}

/// Loss and analytic parameter gradients for the bottleneck model with fixed
/// reparameterization noise.
pub fn vib_loss_grad(
    model: &VibModel,
    o_t: &DenseMatrix,
    o_next: &DenseMatrix,
    beta: f64,
    eps: &DenseMatrix,
) -> Result<(LossTerms, Vec<f64>, Vec<f64>)> {
    check_batch("vib_loss", model.d_obs(), o_t, o_next)?;
    gaussian_vae_loss_grad(
        &model.encoder_spec,
        &model.encoder_params,
        &model.decoder_spec,
        &model.decoder_params,
        model.d_z,
        model.lv_clamp,
        o_t,
        None,
        o_next,
        beta,
        eps,
    )
}

/// Loss and analytic parameter gradients for the baseline with fixed noise.
pub fn idm_loss_grad(
    model: &IdmModel,
    o_t: &DenseMatrix,
    o_next: &DenseMatrix,
    beta: f64,
    eps: &DenseMatrix,
) -> Result<(LossTerms, Vec<f64>, Vec<f64>)> {
    check_batch("idm_loss", model.d_obs(), o_t, o_next)?;
    let pair = o_t.hcat(o_next)?;
    gaussian_vae_loss_grad(
        &model.encoder_spec,
        &model.encoder_params,
        &model.decoder_spec,
        &model.decoder_params,
        model.d_z,
        model.lv_clamp,
        &pair,
        Some(o_t),
        o_next,
        beta,
        eps,
    )
}

/// A trained (or freshly initialized) model of either wiring.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainedModel {
    Vib(VibModel),
    Idm(IdmModel),
}

impl TrainedModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            TrainedModel::Vib(_) => ModelKind::Vib,
            TrainedModel::Idm(_) => ModelKind::Idm,
        }
    }

    pub fn d_obs(&self) -> usize {
        match self {
            TrainedModel::Vib(m) => m.d_obs(),
            TrainedModel::Idm(m) => m.d_obs(),
        }
    }

    pub fn d_z(&self) -> usize {
        match self {
            TrainedModel::Vib(m) => m.d_z,
            TrainedModel::Idm(m) => m.d_z,
        }
    }
}

/// Training output: the model, the per-epoch mean loss curve, and whether the
/// run was cut short by a non-finite loss (the model then holds the last
/// parameters that still produced finite losses).
#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: TrainedModel,
    pub curve: Vec<LossTerms>,
    pub diverged_at: Option<usize>,
}

/// Minibatch Adam over the chosen wiring.
///
/// Deterministic in `(kind, pairs, cfg)`: the initialization and the training
/// stream are derived from `cfg.seed` through fixed labels, so `epochs = 0`
/// returns exactly the seeded initialization.
pub fn train(kind: ModelKind, pairs: &ObservationPairs, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let n = pairs.len();
    if n == 0 {
        return Err(Error::InvalidConfig("empty dataset".into()));
    }
    let d_obs = pairs.obs_t.cols();

    let mut init_rng = Rng::derive(cfg.seed, "model-init");
    let mut model = match kind {
        ModelKind::Vib => TrainedModel::Vib(VibModel::init(d_obs, cfg, &mut init_rng)?),
        ModelKind::Idm => TrainedModel::Idm(IdmModel::init(d_obs, cfg, &mut init_rng)?),
    };
    let mut rng = Rng::derive(cfg.seed, "train-loop");

    let (enc_len, dec_len) = match &model {
        TrainedModel::Vib(m) => (m.encoder_params.len(), m.decoder_params.len()),
        TrainedModel::Idm(m) => (m.encoder_params.len(), m.decoder_params.len()),
    };
    let mut adam = AdamState::new(enc_len + dec_len);
    let mut grads = vec![0.0; enc_len + dec_len];
    let mut order: Vec<usize> = (0..n).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut sums = LossTerms {
            total: 0.0,
            rec: 0.0,
            kl: 0.0,
        };
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let bt = pairs.obs_t.select_rows(chunk);
            let bn = pairs.obs_next.select_rows(chunk);
            let mut eps = DenseMatrix::zeros(chunk.len(), cfg.d_z);
            rng.fill_normal(eps.data_mut());

            let (terms, enc_grad, dec_grad) = match &model {
                TrainedModel::Vib(m) => vib_loss_grad(m, &bt, &bn, cfg.beta, &eps)?,
                TrainedModel::Idm(m) => idm_loss_grad(m, &bt, &bn, cfg.beta, &eps)?,
            };
            if !terms.total.is_finite() {
                return Ok(TrainOutput {
                    model,
                    curve,
                    diverged_at: Some(epoch),
                });
            }
            grads[..enc_len].copy_from_slice(&enc_grad);
            grads[enc_len..].copy_from_slice(&dec_grad);

            let step = match &mut model {
                TrainedModel::Vib(m) => {
                    let mut params = Vec::with_capacity(enc_len + dec_len);
                    params.extend_from_slice(&m.encoder_params);
                    params.extend_from_slice(&m.decoder_params);
                    let r = adam_step(&mut params, &grads, &mut adam, cfg.lr, 0.9, 0.999, 1e-8);
                    if r.is_ok() {
                        m.encoder_params.copy_from_slice(&params[..enc_len]);
                        m.decoder_params.copy_from_slice(&params[enc_len..]);
                    }
                    r
                }
                TrainedModel::Idm(m) => {
                    let mut params = Vec::with_capacity(enc_len + dec_len);
                    params.extend_from_slice(&m.encoder_params);
                    params.extend_from_slice(&m.decoder_params);
                    let r = adam_step(&mut params, &grads, &mut adam, cfg.lr, 0.9, 0.999, 1e-8);
                    if r.is_ok() {
                        m.encoder_params.copy_from_slice(&params[..enc_len]);
                        m.decoder_params.copy_from_slice(&params[enc_len..]);
                    }
                    r
                }
            };
            if step.is_err() {
                return Ok(TrainOutput {
                    model,
                    curve,
                    diverged_at: Some(epoch),
                });
            }
            sums.total += terms.total;
            sums.rec += terms.rec;
            sums.kl += terms.kl;
            batches += 1;
        }
        let b = batches as f64;
        curve.push(LossTerms {
            total: sums.total / b,
            rec: sums.rec / b,
            kl: sums.kl / b,
        });
    }
    Ok(TrainOutput {
        model,
        curve,
        diverged_at: None,
    })
}

/// Posterior-mean latents, one row per transition.
///
/// The bottleneck model reads only `O_t`; the baseline reads the pair.
pub fn extract_latents(model: &TrainedModel, pairs: &ObservationPairs) -> Result<DenseMatrix> {
    match model {
        TrainedModel::Vib(m) => Ok(m.encode(&pairs.obs_t)?.mu),
        TrainedModel::Idm(m) => Ok(m.encode_pair(&pairs.obs_t, &pairs.obs_next)?.mu),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::grad_check;

    fn tiny_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            beta: 2e-2,
            lr: 1e-3,
            epochs: 0,
            batch_size: 4,
            seed,
            d_z: 3,
            hidden: vec![6, 5],
            ..TrainConfig::default()
        }
    }

    fn random_batch(rng: &mut Rng, n: usize, d: usize) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(n, d);
        rng.fill_normal(m.data_mut());
        m
    }

    #[test]
    fn zero_encoder_gives_standard_posterior() {
        let cfg = tiny_cfg(1);
        let mut rng = Rng::new(1);
        let mut model = VibModel::init(4, &cfg, &mut rng).unwrap();
        model.encoder_params.iter_mut().for_each(|p| *p = 0.0);
        let obs = random_batch(&mut rng, 5, 4);
        let post = model.encode(&obs).unwrap();
        assert!(post.mu.data().iter().all(|&v| v == 0.0));
        assert!(post.log_var.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn encode_is_deterministic() {
        let cfg = tiny_cfg(7);
        let mut rng = Rng::new(7);
        let model = VibModel::init(4, &cfg, &mut rng).unwrap();
        let obs = random_batch(&mut rng, 8, 4);
        let a = model.encode(&obs).unwrap();
        let b = model.encode(&obs).unwrap();
        assert_eq!(a.mu.data(), b.mu.data());
        assert_eq!(a.log_var.data(), b.log_var.data());
    }

    #[test]
    fn log_var_always_clamped() {
        let cfg = tiny_cfg(3);
        let mut rng = Rng::new(3);
        let mut model = VibModel::init(4, &cfg, &mut rng).unwrap();
        // Inflate the weights so raw log-var outputs regularly leave the clamp range.
        model.encoder_params.iter_mut().for_each(|p| *p *= 40.0);
        for _ in 0..50 {
            let obs = random_batch(&mut rng, 20, 4);
            let post = model.encode(&obs).unwrap();
            for &lv in post.log_var.data() {
                assert!((DEFAULT_LV_CLAMP.0..=DEFAULT_LV_CLAMP.1).contains(&lv));
            }
        }
    }

    #[test]
    fn reparameterize_degenerate_variance_returns_mean() {
        let mu = DenseMatrix::from_vec(2, 2, vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let lv = DenseMatrix::from_vec(2, 2, vec![-60.0; 4]).unwrap();
        let post = GaussianPosterior { mu: mu.clone(), log_var: lv };
        let mut rng = Rng::new(0);
        let z = reparameterize(&post, &mut rng);
        for (a, b) in z.data().iter().zip(mu.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn reparameterize_same_seed_identical() {
        let post = GaussianPosterior {
            mu: DenseMatrix::zeros(4, 3),
            log_var: DenseMatrix::zeros(4, 3),
        };
        let a = reparameterize(&post, &mut Rng::new(5));
        let b = reparameterize(&post, &mut Rng::new(5));
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn reparameterize_standard_normal_moments() {
        let n = 100_000;
        let post = GaussianPosterior {
            mu: DenseMatrix::zeros(n, 1),
            log_var: DenseMatrix::zeros(n, 1),
        };
        let z = reparameterize(&post, &mut Rng::new(17));
        let mean: f64 = z.data().iter().sum::<f64>() / n as f64;
        let var: f64 = z.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        assert!(mean.abs() < 0.02, "{mean}");
        assert!((var - 1.0).abs() < 0.03, "{var}");
    }

    #[test]
    fn kl_zero_for_standard_posterior() {
        let post = GaussianPosterior {
            mu: DenseMatrix::zeros(3, 4),
            log_var: DenseMatrix::zeros(3, 4),
        };
        for kl in kl_standard_normal(&post) {
            assert_eq!(kl, 0.0);
        }
    }

    #[test]
    fn kl_unit_mean_is_half() {
        let post = GaussianPosterior {
            mu: DenseMatrix::from_vec(1, 1, vec![1.0]).unwrap(),
            log_var: DenseMatrix::zeros(1, 1),
        };
        assert!((kl_standard_normal(&post)[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_matches_monte_carlo_oracle() {
        // E_q[log q - log r] estimated by sampling, for mu=0.3, log_var=0.7.
        let (mu, lv) = (0.3, 0.7);
        let post = GaussianPosterior {
            mu: DenseMatrix::from_vec(1, 1, vec![mu]).unwrap(),
            log_var: DenseMatrix::from_vec(1, 1, vec![lv]).unwrap(),
        };
        let closed = kl_standard_normal(&post)[0];
        let mut rng = Rng::new(314);
        let sigma = (0.5 * lv).exp();
        let n = 1_000_000;
        let mut acc = 0.0;
        for _ in 0..n {
            let z = mu + sigma * rng.normal();
            let log_q = -0.5 * lv - (z - mu) * (z - mu) / (2.0 * lv.exp());
            let log_r = -0.5 * z * z;
            acc += log_q - log_r;
        }
        let mc = acc / n as f64;
        assert!(
            (closed - mc).abs() / closed.abs() < 1e-2,
            "closed {closed} vs mc {mc}"
        );
    }

    #[test]
    fn zero_model_zero_target_has_zero_loss() {
        let cfg = tiny_cfg(2);
        let mut rng = Rng::new(2);
        let mut model = VibModel::init(4, &cfg, &mut rng).unwrap();
        model.encoder_params.iter_mut().for_each(|p| *p = 0.0);
        model.decoder_params.iter_mut().for_each(|p| *p = 0.0);
        let o_t = random_batch(&mut rng, 6, 4);
        let o_next = DenseMatrix::zeros(6, 4);
        let terms = vib_loss(&model, &o_t, &o_next, 0.5, &mut rng).unwrap();
        assert_eq!(terms.rec, 0.0);
        assert_eq!(terms.kl, 0.0);
        assert_eq!(terms.total, 0.0);
    }

    #[test]
    fn perfect_constant_decoder_beta_zero_gives_zero_total() {
        let cfg = tiny_cfg(4);
        let mut rng = Rng::new(4);
        let mut model = VibModel::init(4, &cfg, &mut rng).unwrap();
        // Decoder chain must be wiped so only the final bias row survives.
        model.decoder_params.iter_mut().for_each(|p| *p = 0.0);
        let target_row = [0.25, -1.5, 2.0, 0.75];
        let pc = model.decoder_spec.param_count();
        model.decoder_params[pc - 4..].copy_from_slice(&target_row);
        let o_t = random_batch(&mut rng, 5, 4);
        let mut o_next = DenseMatrix::zeros(5, 4);
        for r in 0..5 {
            o_next.row_mut(r).copy_from_slice(&target_row);
        }
        let terms = vib_loss(&model, &o_t, &o_next, 0.0, &mut rng).unwrap();
        assert!(terms.rec < 1e-24, "{}", terms.rec);
        assert_eq!(terms.total, terms.rec);
    }

    #[test]
    fn idm_copy_shortcut_reconstructs_exactly() {
        // Decoder = identity on its O_t half; with O_next = O_t the
        // reconstruction is perfect regardless of z. This is the leakage
        // path the bottleneck wiring removes.
        let mut cfg = tiny_cfg(5);
        cfg.hidden = vec![]; // single linear decoder layer [d_obs + d_z -> d_obs]
        let mut rng = Rng::new(5);
        let mut model = IdmModel::init(3, &cfg, &mut rng).unwrap();
        model.decoder_params.iter_mut().for_each(|p| *p = 0.0);
        for i in 0..3 {
            // weight rows are inputs: row i, col i of the (3 + d_z) x 3 matrix
            model.decoder_params[i * 3 + i] = 1.0;
        }
        let o_t = random_batch(&mut rng, 7, 3);
        let o_next = o_t.clone();
        let terms = idm_loss(&model, &o_t, &o_next, 0.0, &mut rng).unwrap();
        assert!(terms.rec < 1e-28, "{}", terms.rec);
    }

    #[test]
    fn beta_zero_reduces_to_reconstruction_error() {
        let cfg = tiny_cfg(6);
        let mut rng = Rng::new(6);
        let model = VibModel::init(4, &cfg, &mut rng).unwrap();
        let o_t = random_batch(&mut rng, 6, 4);
        let o_next = random_batch(&mut rng, 6, 4);
        let mut eps = DenseMatrix::zeros(6, cfg.d_z);
        rng.fill_normal(eps.data_mut());
        let (terms, _, _) = vib_loss_grad(&model, &o_t, &o_next, 0.0, &eps).unwrap();
        assert_eq!(terms.total, terms.rec);
    }

    #[test]
    fn loss_is_linear_in_beta() {
        let cfg = tiny_cfg(8);
        let mut rng = Rng::new(8);
        let model = VibModel::init(4, &cfg, &mut rng).unwrap();
        let o_t = random_batch(&mut rng, 6, 4);
        let o_next = random_batch(&mut rng, 6, 4);
        let mut eps = DenseMatrix::zeros(6, cfg.d_z);
        rng.fill_normal(eps.data_mut());
        let (t0, _, _) = vib_loss_grad(&model, &o_t, &o_next, 0.0, &eps).unwrap();
        let (t1, _, _) = vib_loss_grad(&model, &o_t, &o_next, 0.5, &eps).unwrap();
        let (t2, _, _) = vib_loss_grad(&model, &o_t, &o_next, 1.0, &eps).unwrap();
        assert!(t0.kl > 0.0);
        assert!((t1.total - (t0.total + 0.5 * t0.kl)).abs() < 1e-12);
        assert!(t2.total > t1.total && t1.total > t0.total);
    }

    #[test]
    fn vib_gradients_match_finite_differences() {
        let cfg = tiny_cfg(9);
        let mut rng = Rng::new(9);
        let model = VibModel::init(3, &cfg, &mut rng).unwrap();
        let o_t = random_batch(&mut rng, 4, 3);
        let o_next = random_batch(&mut rng, 4, 3);
        let mut eps = DenseMatrix::zeros(4, cfg.d_z);
        rng.fill_normal(eps.data_mut());

        let (_, enc_grad, dec_grad) = vib_loss_grad(&model, &o_t, &o_next, 0.02, &eps).unwrap();
        let mut analytic = enc_grad;
        analytic.extend(dec_grad);
        let enc_len = model.encoder_params.len();
        let mut point = model.encoder_params.clone();
        point.extend_from_slice(&model.decoder_params);

        let err = grad_check(
            |p| {
                let mut m = model.clone();
                m.encoder_params.copy_from_slice(&p[..enc_len]);
                m.decoder_params.copy_from_slice(&p[enc_len..]);
                vib_loss_grad(&m, &o_t, &o_next, 0.02, &eps).unwrap().0.total
            },
            &analytic,
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn idm_gradients_match_finite_differences() {
        let cfg = tiny_cfg(10);
        let mut rng = Rng::new(10);
        let model = IdmModel::init(3, &cfg, &mut rng).unwrap();
        let o_t = random_batch(&mut rng, 4, 3);
        let o_next = random_batch(&mut rng, 4, 3);
        let mut eps = DenseMatrix::zeros(4, cfg.d_z);
        rng.fill_normal(eps.data_mut());

        let (_, enc_grad, dec_grad) = idm_loss_grad(&model, &o_t, &o_next, 0.02, &eps).unwrap();
        let mut analytic = enc_grad;
        analytic.extend(dec_grad);
        let enc_len = model.encoder_params.len();
        let mut point = model.encoder_params.clone();
        point.extend_from_slice(&model.decoder_params);

        let err = grad_check(
            |p| {
                let mut m = model.clone();
                m.encoder_params.copy_from_slice(&p[..enc_len]);
                m.decoder_params.copy_from_slice(&p[enc_len..]);
                idm_loss_grad(&m, &o_t, &o_next, 0.02, &eps).unwrap().0.total
            },
            &analytic,
            &point,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn perturbing_next_obs_leaves_vib_posterior_unchanged() {
        let cfg = tiny_cfg(11);
        let mut rng = Rng::new(11);
        let model = VibModel::init(4, &cfg, &mut rng).unwrap();
        let obs = random_batch(&mut rng, 5, 4);
        let a = model.encode(&obs).unwrap();
        // "O_{t+1}" does not even enter the signature; encoding twice with any
        // other data in scope cannot change the result.
        let _unrelated = random_batch(&mut rng, 5, 4);
        let b = model.encode(&obs).unwrap();
        assert_eq!(a.mu.data(), b.mu.data());
    }

    #[test]
    fn extract_latents_zero_model_is_zero() {
        let cfg = tiny_cfg(12);
        let mut rng = Rng::new(12);
        let mut model = VibModel::init(4, &cfg, &mut rng).unwrap();
        model.encoder_params.iter_mut().for_each(|p| *p = 0.0);
        let pairs = ObservationPairs {
            obs_t: random_batch(&mut rng, 6, 4),
            obs_next: random_batch(&mut rng, 6, 4),
            offset: 1,
        };
        let z = extract_latents(&TrainedModel::Vib(model), &pairs).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(z.rows(), 6);
        assert_eq!(z.cols(), cfg.d_z);
    }
}
