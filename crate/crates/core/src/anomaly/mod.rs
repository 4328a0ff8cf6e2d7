//! Two-head LSTM variational autoencoder for telemetry anomaly detection.
//!
//! The encoder runs one LSTM over the excavation channels and one over the
//! geology columns of a window, concatenates their final hidden states and
//! maps them to a latent Gaussian. The decoder reconstructs the excavation
//! channels only. Windows whose reconstruction error exceeds a threshold
//! calibrated on normal data are flagged.

mod train;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::preprocess::PreprocessError;
use crate::tensor::{
    bce_term, seeded_rng, xavier_uniform, Graph, LstmState, LstmWeights, ParamId, ParamSet, Tensor,
    TensorError, Var,
};

pub use train::{
    calibrate_threshold, detect, detection_rate, false_positive_rate, fit_anomaly_model,
    make_anomaly_windows, pretrain_lstm_ae, score_windows, train_vae, write_verdicts,
    AnomalyFit, AnomalySplits, AnomalyVerdict, VaeTrainingReport, Windows,
};

/// Bounds applied to the encoder's log-variance.
pub const LOG_VAR_BOUND: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AnomalyError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("value {value} at index {index} is outside [0, 1]")]
    RangeViolation { index: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("no scores to calibrate on")]
    EmptyScores,
    #[error("no labeled anomalies")]
    NoLabels,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

pub type Result<T> = std::result::Result<T, AnomalyError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeModelConfig {
    pub seq_len: usize,
    pub lstm_hidden: usize,
    pub latent_dim: usize,
    pub decoder_hidden: usize,
    pub pretrain_epochs: usize,
    pub train_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub threshold_quantile: f64,
    /// Per-channel BCE weights; empty means `seq_len * d_exc` for every
    /// channel, which puts the mean reconstruction term on the scale of a
    /// per-window sum. With unit weights the KL term dominates and the
    /// posterior collapses onto the prior.
    pub feature_weights: Vec<f64>,
}

impl Default for VaeModelConfig {
    fn default() -> Self {
        Self {
            seq_len: 32,
            lstm_hidden: 64,
            latent_dim: 16,
            decoder_hidden: 64,
            pretrain_epochs: 20,
            train_epochs: 40,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
            threshold_quantile: 0.99,
            feature_weights: Vec::new(),
        }
    }
}

impl VaeModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(AnomalyError::ConfigInvalid(m));
        if self.seq_len == 0 || self.lstm_hidden == 0 || self.latent_dim == 0 || self.decoder_hidden == 0 {
            return bad("seq_len, lstm_hidden, latent_dim and decoder_hidden must be >= 1".into());
        }
        if self.latent_dim > self.lstm_hidden {
            return bad(format!(
                "latent_dim {} exceeds lstm_hidden {}",
                self.latent_dim, self.lstm_hidden
            ));
        }
        if !(self.threshold_quantile > 0.0 && self.threshold_quantile < 1.0) {
            return bad(format!("threshold_quantile {} outside (0, 1)", self.threshold_quantile));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return bad("lr and batch_size must be positive".into());
        }
        if self.feature_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return bad("feature_weights must be finite and non-negative".into());
        }
        Ok(())
    }

    /// Weights for `d_exc` channels.
    pub fn weights(&self, d_exc: usize) -> Result<Vec<f64>> {
        if self.feature_weights.is_empty() {
            return Ok(vec![(self.seq_len * d_exc) as f64; d_exc]);
        }
        if self.feature_weights.len() != d_exc {
            return Err(AnomalyError::ShapeMismatch(format!(
                "{} feature weights for {d_exc} channels",
                self.feature_weights.len()
            )));
        }
        Ok(self.feature_weights.clone())
    }
}

/// Posterior of one window, each `[latent_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentDistribution {
    pub mu: Tensor,
    pub log_var: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct LstmIds {
    w_ih: ParamId,
    w_hh: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Ids {
    exc: LstmIds,
    geo: LstmIds,
    mu: (ParamId, ParamId),
    log_var: (ParamId, ParamId),
    dec_hidden: (ParamId, ParamId),
    dec_out: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
pub struct VaeModel {
    pub config: VaeModelConfig,
    pub params: ParamSet,
    pub d_exc: usize,
    pub d_geo: usize,
    ids: Ids,
}

/// Prefixes of the parameters shared with the pretraining autoencoder.
pub const ENCODER_PREFIXES: [&str; 3] = ["encoder.exc.", "encoder.geo.", "encoder.mu."];

fn lstm_params<R: Rng>(p: &mut ParamSet, rng: &mut R, prefix: &str, d_in: usize, h: usize) {
    p.insert(format!("{prefix}.w_ih"), xavier_uniform(rng, vec![d_in, 4 * h], d_in, 4 * h));
    p.insert(format!("{prefix}.w_hh"), xavier_uniform(rng, vec![h, 4 * h], h, 4 * h));
    // forget gate starts open
    let mut bias = vec![0.0; 4 * h];
    bias[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
    p.insert(format!("{prefix}.bias"), Tensor::from_vec(vec![4 * h], bias).expect("bias shape"));
}

fn build_params(config: &VaeModelConfig, d_exc: usize, d_geo: usize, seed: u64) -> ParamSet {
    let mut rng = seeded_rng(seed);
    let mut p = ParamSet::new();
    let h = config.lstm_hidden;
    let z = config.latent_dim;
    let dh = config.decoder_hidden;
    let out = config.seq_len * d_exc;
    lstm_params(&mut p, &mut rng, "encoder.exc", d_exc, h);
    lstm_params(&mut p, &mut rng, "encoder.geo", d_geo, h);
    p.insert("encoder.mu.weight", xavier_uniform(&mut rng, vec![2 * h, z], 2 * h, z));
    p.insert("encoder.mu.bias", Tensor::zeros(vec![z]));
    p.insert("encoder.log_var.weight", xavier_uniform(&mut rng, vec![2 * h, z], 2 * h, z));
    p.insert("encoder.log_var.bias", Tensor::zeros(vec![z]));
    p.insert("decoder.hidden.weight", xavier_uniform(&mut rng, vec![z, dh], z, dh));
    p.insert("decoder.hidden.bias", Tensor::zeros(vec![dh]));
    p.insert("decoder.out.weight", xavier_uniform(&mut rng, vec![dh, out], dh, out));
    p.insert("decoder.out.bias", Tensor::zeros(vec![out]));
    p
}

/// Builds a freshly initialised model for `d_exc` excavation channels and
/// `d_geo` geology columns.
pub fn build_vae_model(config: &VaeModelConfig, d_exc: usize, d_geo: usize, seed: u64) -> Result<VaeModel> {
    config.validate()?;
    if d_exc == 0 || d_geo == 0 {
        return Err(AnomalyError::ConfigInvalid("both heads need at least one column".into()));
    }
    let params = build_params(config, d_exc, d_geo, seed);
    VaeModel::wire(config.clone(), d_exc, d_geo, params)
}

impl VaeModel {
    fn wire(config: VaeModelConfig, d_exc: usize, d_geo: usize, params: ParamSet) -> Result<Self> {
        let expected = build_params(&config, d_exc, d_geo, 0);
        let shapes = |p: &ParamSet| -> Vec<(String, Vec<usize>)> {
            p.iter().map(|x| (x.name.clone(), x.tensor.shape().to_vec())).collect()
        };
        if shapes(&expected) != shapes(&params) {
            return Err(AnomalyError::ConfigInvalid(
                "parameter shapes do not match the config".into(),
            ));
        }
        let id = |n: &str| params.find(n).expect("checked above");
        let lstm = |prefix: &str| LstmIds {
            w_ih: id(&format!("{prefix}.w_ih")),
            w_hh: id(&format!("{prefix}.w_hh")),
            bias: id(&format!("{prefix}.bias")),
        };
        let pair = |prefix: &str| (id(&format!("{prefix}.weight")), id(&format!("{prefix}.bias")));
        let ids = Ids {
            exc: lstm("encoder.exc"),
            geo: lstm("encoder.geo"),
            mu: pair("encoder.mu"),
            log_var: pair("encoder.log_var"),
            dec_hidden: pair("decoder.hidden"),
            dec_out: pair("decoder.out"),
        };
        Ok(Self {
            config,
            params,
            d_exc,
            d_geo,
            ids,
        })
    }

    /// Rebuilds a model around existing parameters, checking their shapes.
    pub fn from_params(config: VaeModelConfig, d_exc: usize, d_geo: usize, params: ParamSet) -> Result<Self> {
        config.validate()?;
        Self::wire(config, d_exc, d_geo, params)
    }

    /// Copies the encoder weights of a pretrained autoencoder by name.
    pub fn load_encoder(&mut self, encoder: &ParamSet) -> Result<()> {
        for p in encoder.iter() {
            let id = self
                .params
                .find(&p.name)
                .ok_or_else(|| AnomalyError::ShapeMismatch(format!("unknown parameter {}", p.name)))?;
            let dst = &mut self.params.get_mut(id).tensor;
            if dst.shape() != p.tensor.shape() {
                return Err(AnomalyError::ShapeMismatch(format!(
                    "{}: {:?} vs {:?}",
                    p.name,
                    dst.shape(),
                    p.tensor.shape()
                )));
            }
            dst.data_mut().copy_from_slice(p.tensor.data());
        }
        Ok(())
    }

    fn run_lstm(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        ids: LstmIds,
        data: &[f64],
        batch: usize,
        d: usize,
    ) -> Result<Var> {
        let (l, h) = (self.config.seq_len, self.config.lstm_hidden);
        let w = LstmWeights {
            w_ih: g.param(params, ids.w_ih),
            w_hh: g.param(params, ids.w_hh),
            bias: g.param(params, ids.bias),
        };
        let mut state = LstmState {
            hidden: g.constant(Tensor::zeros(vec![batch, h])),
            cell: g.constant(Tensor::zeros(vec![batch, h])),
        };
        for t in 0..l {
            let mut x = Vec::with_capacity(batch * d);
            for b in 0..batch {
                let start = (b * l + t) * d;
                x.extend_from_slice(&data[start..start + d]);
            }
            let x = g.constant(Tensor::from_vec(vec![batch, d], x)?);
            state = g.lstm_step(x, state, &w)?;
        }
        Ok(state.hidden)
    }

    /// Encoder on a batch of `batch` windows stored row-major as
    /// `[batch, seq_len, d]`. Returns `(mu, log_var)`, each `[batch, latent_dim]`,
    /// with the log-variance clamped.
    pub fn encode_graph(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        exc: &[f64],
        geo: &[f64],
        batch: usize,
    ) -> Result<(Var, Var)> {
        let l = self.config.seq_len;
        if exc.len() != batch * l * self.d_exc || geo.len() != batch * l * self.d_geo {
            return Err(AnomalyError::ShapeMismatch(format!(
                "{} excavation and {} geology values for {batch} windows of {l}x{} / {l}x{}",
                exc.len(),
                geo.len(),
                self.d_exc,
                self.d_geo
            )));
        }
        let he = self.run_lstm(g, params, self.ids.exc, exc, batch, self.d_exc)?;
        let hg = self.run_lstm(g, params, self.ids.geo, geo, batch, self.d_geo)?;
        let h = g.concat_last(he, hg)?;
        let (mw, mb) = (g.param(params, self.ids.mu.0), g.param(params, self.ids.mu.1));
        let mu = g.linear(h, mw, mb)?;
        let (vw, vb) = (g.param(params, self.ids.log_var.0), g.param(params, self.ids.log_var.1));
        let log_var = g.linear(h, vw, vb)?;
        let log_var = g.clamp(log_var, -LOG_VAR_BOUND, LOG_VAR_BOUND);
        Ok((mu, log_var))
    }

    /// Decoder: `z[batch, latent_dim]` to `[batch, seq_len * d_exc]` in (0, 1).
    pub fn decode_graph(&self, g: &mut Graph, params: &ParamSet, z: Var) -> Result<Var> {
        let (w1, b1) = (g.param(params, self.ids.dec_hidden.0), g.param(params, self.ids.dec_hidden.1));
        let h = g.linear(z, w1, b1)?;
        let h = g.relu(h);
        let (w2, b2) = (g.param(params, self.ids.dec_out.0), g.param(params, self.ids.dec_out.1));
        let o = g.linear(h, w2, b2)?;
        Ok(g.sigmoid(o))
    }

    fn bce_weights(&self) -> Result<Vec<f64>> {
        let w = self.config.weights(self.d_exc)?;
        Ok(w.iter().copied().cycle().take(self.config.seq_len * self.d_exc).collect())
    }

    /// Plain autoencoder loss: reconstruction BCE through `z = mu`.
    pub fn ae_loss_graph(&self, g: &mut Graph, params: &ParamSet, exc: &[f64], geo: &[f64], batch: usize) -> Result<Var> {
        let (mu, _) = self.encode_graph(g, params, exc, geo, batch)?;
        let x_hat = self.decode_graph(g, params, mu)?;
        Ok(g.bce(x_hat, exc, &self.bce_weights()?)?)
    }

    /// VAE loss with fixed noise `eps[batch, latent_dim]`. Returns
    /// `(total, recon, kl)`.
    pub fn vae_loss_graph(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        exc: &[f64],
        geo: &[f64],
        batch: usize,
        eps: &Tensor,
    ) -> Result<(Var, Var, Var)> {
        let (mu, log_var) = self.encode_graph(g, params, exc, geo, batch)?;
        let z = reparameterize_graph(g, mu, log_var, eps)?;
        let x_hat = self.decode_graph(g, params, z)?;
        let recon = g.bce(x_hat, exc, &self.bce_weights()?)?;
        let kl = kl_graph(g, mu, log_var)?;
        let total = g.add(recon, kl)?;
        Ok((total, recon, kl))
    }
}

fn check_window(t: &Tensor, rows: usize, cols: usize, what: &str) -> Result<()> {
    if t.shape() != [rows, cols] {
        return Err(AnomalyError::ShapeMismatch(format!(
            "{what} window {:?}, expected [{rows}, {cols}]",
            t.shape()
        )));
    }
    Ok(())
}

/// Posterior of a single window, `exc[seq_len, d_exc]` and `geo[seq_len, d_geo]`.
pub fn encode(exc: &Tensor, geo: &Tensor, model: &VaeModel) -> Result<LatentDistribution> {
    check_window(exc, model.config.seq_len, model.d_exc, "excavation")?;
    check_window(geo, model.config.seq_len, model.d_geo, "geology")?;
    let mut g = Graph::new();
    let (mu, log_var) = model.encode_graph(&mut g, &model.params, exc.data(), geo.data(), 1)?;
    let z = model.config.latent_dim;
    Ok(LatentDistribution {
        mu: Tensor::from_vec(vec![z], g.value(mu).to_vec())?,
        log_var: Tensor::from_vec(vec![z], g.value(log_var).to_vec())?,
    })
}

/// `z = mu + exp(log_var / 2) * eps` on the tape, with `eps` held fixed.
pub fn reparameterize_graph(g: &mut Graph, mu: Var, log_var: Var, eps: &Tensor) -> Result<Var> {
    if g.shape(mu) != eps.shape() {
        return Err(AnomalyError::ShapeMismatch(format!(
            "eps {:?} for mu {:?}",
            eps.shape(),
            g.shape(mu)
        )));
    }
    let half = g.scale(log_var, 0.5);
    let std = g.exp(half);
    let e = g.constant(eps.clone());
    let noise = g.mul(std, e)?;
    Ok(g.add(mu, noise)?)
}

/// Standard normal noise of the given shape.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_vec(shape, data).expect("shape matches data")
}

/// Draws one latent sample from `dist`.
pub fn reparameterize<R: Rng + ?Sized>(dist: &LatentDistribution, rng: &mut R) -> Tensor {
    let eps = standard_normal(rng, dist.mu.shape().to_vec());
    let data = dist
        .mu
        .data()
        .iter()
        .zip(dist.log_var.data())
        .zip(eps.data())
        .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
        .collect();
    Tensor::from_vec(dist.mu.shape().to_vec(), data).expect("shape matches data")
}

/// Reconstruction `[seq_len, d_exc]` of a latent vector `z[latent_dim]`.
pub fn decode(z: &Tensor, model: &VaeModel) -> Result<Tensor> {
    if z.shape() != [model.config.latent_dim] {
        return Err(AnomalyError::ShapeMismatch(format!(
            "latent {:?}, expected [{}]",
            z.shape(),
            model.config.latent_dim
        )));
    }
    let mut g = Graph::new();
    let zv = g.constant(z.clone().reshape(vec![1, model.config.latent_dim])?);
    let out = model.decode_graph(&mut g, &model.params, zv)?;
    Ok(Tensor::from_vec(
        vec![model.config.seq_len, model.d_exc],
        g.value(out).to_vec(),
    )?)
}

/// KL divergence to the standard normal prior, summed over latent
/// dimensions and averaged over the batch (`mu`, `log_var` are `[batch, latent]`).
pub fn kl_graph(g: &mut Graph, mu: Var, log_var: Var) -> Result<Var> {
    let shape = g.shape(mu).to_vec();
    if shape.len() != 2 || g.shape(log_var) != shape.as_slice() {
        return Err(AnomalyError::ShapeMismatch(format!(
            "kl on mu {shape:?} and log_var {:?}",
            g.shape(log_var)
        )));
    }
    let var = g.exp(log_var);
    let mu2 = g.mul(mu, mu)?;
    let a = g.add(mu2, var)?;
    let a = g.sub(a, log_var)?;
    let a = g.add_scalar(a, -1.0);
    let s = g.sum(a);
    Ok(g.scale(s, 0.5 / shape[0] as f64))
}

/// KL divergence of one posterior to the standard normal prior.
pub fn kl_loss(dist: &LatentDistribution) -> f64 {
    0.5 * dist
        .mu
        .data()
        .iter()
        .zip(dist.log_var.data())
        .map(|(m, lv)| -lv + m * m + lv.exp() - 1.0)
        .sum::<f64>()
}

/// Mean weighted BCE of `x_hat` against targets `x`. `weights` has one
/// entry per element of the last axis.
pub fn bce_loss(x_hat: &Tensor, x: &Tensor, weights: &[f64]) -> Result<f64> {
    if x_hat.shape() != x.shape() {
        return Err(AnomalyError::ShapeMismatch(format!(
            "prediction {:?} vs target {:?}",
            x_hat.shape(),
            x.shape()
        )));
    }
    let last = x.shape().last().copied().unwrap_or(1);
    if weights.len() != last {
        return Err(AnomalyError::ShapeMismatch(format!(
            "{} weights for last axis {last}",
            weights.len()
        )));
    }
    check_unit_range(x.data())?;
    let n = x.numel();
    if n == 0 {
        return Err(AnomalyError::EmptyDataset);
    }
    let total: f64 = x_hat
        .data()
        .iter()
        .zip(x.data())
        .enumerate()
        .map(|(i, (&p, &t))| weights[i % last] * bce_term(p, t))
        .sum();
    Ok(total / n as f64)
}

pub fn total_loss(recon: f64, kl: f64) -> f64 {
    recon + kl
}

pub(crate) fn check_unit_range(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !(0.0..=1.0).contains(v)) {
        Some(index) => Err(AnomalyError::RangeViolation {
            index,
            value: data[index],
        }),
        None => Ok(()),
    }
}
