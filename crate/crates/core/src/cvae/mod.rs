//! Conditional variational autoencoder student policy.
//!
//! The encoder maps a flattened proprioception history plus a text embedding
//! to the mean and log standard deviation of a diagonal Gaussian over
//! latents; the decoder maps a latent sample concatenated with the current
//! observation to an action. Training samples latents with the
//! reparameterization trick; inference uses the mean and is fully
//! deterministic. Gradients are hand-written reverse-mode accumulation (see
//! [`train`]).

pub mod layer;
mod train;

pub use layer::{Layer, Mlp};
pub use train::{
    adam_update, adam_update_layers, loss_and_gradients, AdamHyper, AdamState, Gradients,
    LossStats, TrainSample,
};

use nalgebra::{DMatrix, DVector};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network and input-layout configuration of the student.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvaeConfig {
    /// Proprioceptive observation dimension.
    pub obs_dim: usize,
    /// Action dimension (joint targets).
    pub action_dim: usize,
    /// Number of history entries fed to the encoder.
    pub history_len: usize,
    /// Control steps between history entries (5 at 50 Hz gives 10 Hz).
    pub history_stride: usize,
    /// Append the previous action to each history entry.
    pub include_past_actions: bool,
    /// Text embedding dimension.
    pub text_dim: usize,
    pub latent_dim: usize,
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    /// Weight of the KL term in the training objective.
    pub lambda_kl: f64,
    /// Bounds on the log standard deviation head.
    pub log_sigma_clamp: [f64; 2],
    /// Initial bias of the log-sigma head; a narrow initial posterior keeps
    /// early latent samples close to the mean.
    #[serde(default = "default_log_sigma_init")]
    pub log_sigma_init: f64,
}

fn default_log_sigma_init() -> f64 {
    -2.0
}

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig {
            obs_dim: 90,
            action_dim: 27,
            history_len: 20,
            history_stride: 5,
            include_past_actions: true,
            text_dim: crate::textenc::EMBED_DIM,
            latent_dim: 128,
            encoder_hidden: vec![2048, 1024, 512],
            decoder_hidden: vec![512, 1024, 2048],
            lambda_kl: 1e-3,
            log_sigma_clamp: [-5.0, 2.0],
            log_sigma_init: default_log_sigma_init(),
        }
    }
}

impl CvaeConfig {
    /// Dimension of one history entry.
    pub fn history_entry_dim(&self) -> usize {
        self.obs_dim
            + if self.include_past_actions {
                self.action_dim
            } else {
                0
            }
    }

    /// Dimension of the flattened history block (time-major, oldest first).
    pub fn history_flat_dim(&self) -> usize {
        self.history_len * self.history_entry_dim()
    }

    pub fn encoder_input_dim(&self) -> usize {
        self.history_flat_dim() + self.text_dim
    }

    pub fn decoder_input_dim(&self) -> usize {
        self.latent_dim + self.obs_dim
    }

    pub fn validate(&self) -> Result<()> {
        let dims_ok = self.obs_dim >= 1
            && self.action_dim >= 1
            && self.history_len >= 1
            && self.history_stride >= 1
            && self.text_dim >= 1
            && self.latent_dim >= 1;
        if !dims_ok {
            return Err(Error::validation("all CVAE dimensions must be >= 1"));
        }
        if self.lambda_kl < 0.0 {
            return Err(Error::validation("lambda_kl must be >= 0"));
        }
        if self.log_sigma_clamp[0] >= self.log_sigma_clamp[1] {
            return Err(Error::validation("log-sigma clamp bounds are inverted"));
        }
        Ok(())
    }
}

/// Encoder trunk, Gaussian heads, and decoder weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CvaeParams {
    pub trunk: Mlp,
    pub mu_head: Layer,
    pub log_sigma_head: Layer,
    pub decoder: Mlp,
}

impl CvaeParams {
    /// Seeded fan-in-uniform initialization matching `config`.
    pub fn init(config: &CvaeConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        if config.encoder_hidden.is_empty() || config.decoder_hidden.is_empty() {
            return Err(Error::validation("hidden layer lists must be non-empty"));
        }
        let mut enc_dims = vec![config.encoder_input_dim()];
        enc_dims.extend_from_slice(&config.encoder_hidden);
        let trunk = Mlp::init(&enc_dims, true, rng);
        let trunk_out = *config.encoder_hidden.last().unwrap();
        let mu_head = Layer::init(config.latent_dim, trunk_out, rng);
        let mut log_sigma_head = Layer::init(config.latent_dim, trunk_out, rng);
        log_sigma_head.b.fill(config.log_sigma_init.clamp(
            config.log_sigma_clamp[0],
            config.log_sigma_clamp[1],
        ));
        let mut dec_dims = vec![config.decoder_input_dim()];
        dec_dims.extend_from_slice(&config.decoder_hidden);
        dec_dims.push(config.action_dim);
        let decoder = Mlp::init(&dec_dims, false, rng);
        Ok(CvaeParams {
            trunk,
            mu_head,
            log_sigma_head,
            decoder,
        })
    }

    /// Layers in canonical order: trunk, mu head, log-sigma head, decoder.
    pub fn flat_layers(&self) -> Vec<&Layer> {
        let mut v: Vec<&Layer> = self.trunk.layers.iter().collect();
        v.push(&self.mu_head);
        v.push(&self.log_sigma_head);
        v.extend(self.decoder.layers.iter());
        v
    }

    pub fn flat_layers_mut(&mut self) -> Vec<&mut Layer> {
        let mut v: Vec<&mut Layer> = self.trunk.layers.iter_mut().collect();
        v.push(&mut self.mu_head);
        v.push(&mut self.log_sigma_head);
        v.extend(self.decoder.layers.iter_mut());
        v
    }

    pub fn param_count(&self) -> usize {
        self.flat_layers().iter().map(|l| l.param_count()).sum()
    }

    /// Validate tensor shapes against a configuration.
    pub fn check_shapes(&self, config: &CvaeConfig) -> Result<()> {
        let mut enc_dims = vec![config.encoder_input_dim()];
        enc_dims.extend_from_slice(&config.encoder_hidden);
        if self.trunk.layers.len() + 1 != enc_dims.len() {
            return Err(Error::validation("encoder depth mismatch"));
        }
        for (i, layer) in self.trunk.layers.iter().enumerate() {
            if layer.w.ncols() != enc_dims[i] || layer.w.nrows() != enc_dims[i + 1] {
                return Err(Error::validation(format!("encoder layer {i} shape mismatch")));
            }
        }
        let trunk_out = *config.encoder_hidden.last().unwrap();
        for (name, head) in [("mu", &self.mu_head), ("log_sigma", &self.log_sigma_head)] {
            if head.w.nrows() != config.latent_dim || head.w.ncols() != trunk_out {
                return Err(Error::validation(format!("{name} head shape mismatch")));
            }
        }
        let mut dec_dims = vec![config.decoder_input_dim()];
        dec_dims.extend_from_slice(&config.decoder_hidden);
        dec_dims.push(config.action_dim);
        if self.decoder.layers.len() + 1 != dec_dims.len() {
            return Err(Error::validation("decoder depth mismatch"));
        }
        for (i, layer) in self.decoder.layers.iter().enumerate() {
            if layer.w.ncols() != dec_dims[i] || layer.w.nrows() != dec_dims[i + 1] {
                return Err(Error::validation(format!("decoder layer {i} shape mismatch")));
            }
        }
        Ok(())
    }
}

/// Gaussian posterior parameters produced by the encoder.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    pub mu: DVector<f64>,
    /// Componentwise standard deviation; strictly positive by construction.
    pub sigma: DVector<f64>,
}

fn check_finite(name: &str, m: &DMatrix<f64>) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(format!("non-finite activations in {name}")))
    }
}

/// Forward-pass record of a batched encoder evaluation.
pub(crate) struct EncodeCache {
    pub trunk_cache: layer::MlpCache,
    pub mu: DMatrix<f64>,
    /// Log-sigma head output before clamping (for the clamp gradient mask).
    pub log_sigma_raw: DMatrix<f64>,
    /// Clamped log standard deviations.
    pub log_sigma: DMatrix<f64>,
}

/// Batched encoder pass retaining activations; columns are samples.
pub(crate) fn encode_batch_cached(
    params: &CvaeParams,
    config: &CvaeConfig,
    input: &DMatrix<f64>,
) -> Result<EncodeCache> {
    if input.nrows() != config.encoder_input_dim() {
        return Err(Error::invalid(format!(
            "encoder input rows {} != {}",
            input.nrows(),
            config.encoder_input_dim()
        )));
    }
    let trunk_cache = params.trunk.forward_cached(input);
    let mu = params.mu_head.forward(trunk_cache.output());
    let log_sigma_raw = params.log_sigma_head.forward(trunk_cache.output());
    let [lo, hi] = config.log_sigma_clamp;
    let log_sigma = log_sigma_raw.map(|v| v.clamp(lo, hi));
    check_finite("encoder", &mu)?;
    check_finite("encoder log-sigma", &log_sigma)?;
    Ok(EncodeCache {
        trunk_cache,
        mu,
        log_sigma_raw,
        log_sigma,
    })
}

/// Batched decoder pass retaining activations; columns are samples.
pub(crate) fn decode_batch_cached(
    params: &CvaeParams,
    config: &CvaeConfig,
    input: &DMatrix<f64>,
) -> Result<layer::MlpCache> {
    if input.nrows() != config.decoder_input_dim() {
        return Err(Error::invalid(format!(
            "decoder input rows {} != {}",
            input.nrows(),
            config.decoder_input_dim()
        )));
    }
    let cache = params.decoder.forward_cached(input);
    check_finite("decoder", cache.output())?;
    Ok(cache)
}

/// Encode an observation history and text embedding into the posterior.
pub fn encode(
    params: &CvaeParams,
    config: &CvaeConfig,
    obs_history: &DVector<f64>,
    text: &DVector<f64>,
) -> Result<EncoderOutput> {
    if obs_history.len() != config.history_flat_dim() {
        return Err(Error::invalid(format!(
            "history length {} != {}",
            obs_history.len(),
            config.history_flat_dim()
        )));
    }
    if text.len() != config.text_dim {
        return Err(Error::invalid("text embedding dimension mismatch"));
    }
    let mut input = DMatrix::zeros(config.encoder_input_dim(), 1);
    input.view_mut((0, 0), (obs_history.len(), 1)).copy_from(obs_history);
    input
        .view_mut((obs_history.len(), 0), (text.len(), 1))
        .copy_from(text);
    let cache = encode_batch_cached(params, config, &input)?;
    Ok(EncoderOutput {
        mu: cache.mu.column(0).into_owned(),
        sigma: cache.log_sigma.map(f64::exp).column(0).into_owned(),
    })
}

/// `z = mu + sigma .* eps`.
pub fn reparameterize(out: &EncoderOutput, eps: &DVector<f64>) -> DVector<f64> {
    assert_eq!(eps.len(), out.mu.len(), "eps dimension mismatch");
    &out.mu + out.sigma.component_mul(eps)
}

/// Decode a latent and the current observation into an action.
pub fn decode(
    params: &CvaeParams,
    config: &CvaeConfig,
    z: &DVector<f64>,
    obs: &DVector<f64>,
) -> Result<DVector<f64>> {
    if z.len() != config.latent_dim {
        return Err(Error::invalid("latent dimension mismatch"));
    }
    if obs.len() != config.obs_dim {
        return Err(Error::invalid("observation dimension mismatch"));
    }
    let mut input = DMatrix::zeros(config.decoder_input_dim(), 1);
    input.view_mut((0, 0), (z.len(), 1)).copy_from(z);
    input.view_mut((z.len(), 0), (obs.len(), 1)).copy_from(obs);
    Ok(decode_batch_cached(params, config, &input)?
        .output()
        .column(0)
        .into_owned())
}

/// Closed-form KL divergence of the posterior from the standard normal:
/// `0.5 * sum(mu^2 + sigma^2 - 1 - 2 ln sigma)`.
pub fn kl_divergence(out: &EncoderOutput) -> Result<f64> {
    if out.sigma.iter().any(|&s| s <= 0.0) {
        return Err(Error::invalid("sigma must be strictly positive"));
    }
    Ok(out
        .mu
        .iter()
        .zip(out.sigma.iter())
        .map(|(&m, &s)| 0.5 * (m * m + s * s - 1.0 - 2.0 * s.ln()))
        .sum())
}

/// Deterministic action: decode the posterior mean, skipping the sampling
/// step.
pub fn inference_act(
    params: &CvaeParams,
    config: &CvaeConfig,
    obs_history: &DVector<f64>,
    text: &DVector<f64>,
    obs: &DVector<f64>,
) -> Result<DVector<f64>> {
    let out = encode(params, config, obs_history, text)?;
    decode(params, config, &out.mu, obs)
}
