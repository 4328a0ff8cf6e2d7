//! Convolutional advance-rate regressor with channel attention and
//! residual blocks.

mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::preprocess::PreprocessError;
use crate::tensor::{seeded_rng, xavier_uniform, Graph, ParamId, ParamSet, Tensor, TensorError, Var};

pub use train::{
    evaluate, feature_columns, fit_rate_model, predict_set, make_windows, mse, predict_rate, r_squared, rate_splits,
    run_ablation, smooth_l1_loss, train_rate_model, AblationReport, AblationRow, Metrics,
    RateSplits, TrainingReport, WindowSet,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RateError {
    #[error("invalid config: {0}")]
    ConfigInvalid(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("expected {expected} features, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("target is constant")]
    ConstantTarget,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

pub type Result<T> = std::result::Result<T, RateError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateModelConfig {
    pub window_len: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
    /// Bottleneck width of the attention scorer.
    pub attention_reduction: usize,
    pub dropout_p: f64,
    pub use_attention: bool,
    pub use_residual: bool,
    pub use_geology: bool,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for RateModelConfig {
    fn default() -> Self {
        Self {
            window_len: 16,
            channels: vec![32, 32, 32],
            kernel: 3,
            attention_reduction: 8,
            dropout_p: 0.1,
            use_attention: true,
            use_residual: true,
            use_geology: true,
            lr: 1e-3,
            epochs: 60,
            batch_size: 64,
            patience: 10,
            seed: 0,
        }
    }
}

impl RateModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(RateError::ConfigInvalid(m));
        if self.channels.is_empty() || self.channels.contains(&0) {
            return bad(format!("channel widths must be >= 1, got {:?}", self.channels));
        }
        if self.kernel == 0 || self.window_len <= self.kernel {
            return bad(format!(
                "need window_len > kernel >= 1, got {} and {}",
                self.window_len, self.kernel
            ));
        }
        let shrink = self.channels.len() * (self.kernel - 1);
        if self.window_len <= shrink {
            return bad(format!(
                "{} blocks of kernel {} leave no timesteps of window {}",
                self.channels.len(),
                self.kernel,
                self.window_len
            ));
        }
        if self.attention_reduction == 0 {
            return bad("attention_reduction must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 {
            return bad("lr and batch_size must be positive".into());
        }
        Ok(())
    }

    /// Name of the module combination, as used in ablation reports.
    pub fn modules(&self) -> &'static str {
        match (self.use_attention, self.use_residual) {
            (true, true) => "attention+residual",
            (true, false) => "attention",
            (false, true) => "residual",
            (false, false) => "cnn",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct BlockIds {
    conv_w: ParamId,
    conv_b: ParamId,
    attn: Option<(ParamId, ParamId)>,
    proj: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
pub struct RateModel {
    pub config: RateModelConfig,
    pub params: ParamSet,
    pub input_dim: usize,
    blocks: Vec<BlockIds>,
    head: (ParamId, ParamId),
}

impl RateModel {
    fn wire(config: RateModelConfig, input_dim: usize, params: ParamSet) -> Result<Self> {
        let id = |name: String| {
            params
                .find(&name)
                .ok_or_else(|| RateError::ConfigInvalid(format!("missing parameter {name}")))
        };
        let mut blocks = Vec::new();
        let mut c_in = input_dim;
        for (i, &c_out) in config.channels.iter().enumerate() {
            let attn = if config.use_attention {
                Some((id(format!("block{i}.attn.w1"))?, id(format!("block{i}.attn.w2"))?))
            } else {
                None
            };
            let proj = if config.use_residual && c_in != c_out {
                Some((id(format!("block{i}.proj.weight"))?, id(format!("block{i}.proj.bias"))?))
            } else {
                None
            };
            blocks.push(BlockIds {
                conv_w: id(format!("block{i}.conv.weight"))?,
                conv_b: id(format!("block{i}.conv.bias"))?,
                attn,
                proj,
            });
            c_in = c_out;
        }
        let head = (id("head.weight".into())?, id("head.bias".into())?);
        let model = Self {
            config,
            params,
            input_dim,
            blocks,
            head,
        };
        let expected = build_params(&model.config, input_dim, 0)?;
        let shapes = |p: &ParamSet| -> Vec<(String, Vec<usize>)> {
            p.iter().map(|x| (x.name.clone(), x.tensor.shape().to_vec())).collect()
        };
        if shapes(&expected) != shapes(&model.params) {
            return Err(RateError::ConfigInvalid(
                "parameter shapes do not match the config".into(),
            ));
        }
        Ok(model)
    }

    /// Rebuilds a model around existing parameters, checking their shapes
    /// against `config`.
    pub fn from_params(config: RateModelConfig, input_dim: usize, params: ParamSet) -> Result<Self> {
        config.validate()?;
        Self::wire(config, input_dim, params)
    }

    /// Forward pass on `x[batch, input_dim, window_len]`, giving `[batch, 1]`.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph,
        params: &ParamSet,
        x: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != self.input_dim {
            return Err(RateError::DimMismatch {
                expected: self.input_dim,
                got: shape.get(1).copied().unwrap_or(0),
            });
        }
        let mut h = x;
        for b in &self.blocks {
            let w = g.param(params, b.conv_w);
            let bias = g.param(params, b.conv_b);
            let mut y = g.conv1d(h, w, bias)?;
            y = g.relu(y);
            if let Some((w1, w2)) = b.attn {
                let (w1, w2) = (g.param(params, w1), g.param(params, w2));
                y = g.channel_attention(y, w1, w2)?;
            }
            if self.config.use_residual {
                let out_len = g.shape(y)[2];
                let in_len = g.shape(h)[2];
                let mut skip = g.slice_last(h, in_len - out_len, out_len)?;
                if let Some((pw, pb)) = b.proj {
                    let (pw, pb) = (g.param(params, pw), g.param(params, pb));
                    skip = g.conv1d(skip, pw, pb)?;
                }
                y = g.add(y, skip)?;
            }
            h = y;
        }
        let pooled = g.mean_last(h);
        let pooled = g.dropout(pooled, self.config.dropout_p, training, rng)?;
        let (hw, hb) = (g.param(params, self.head.0), g.param(params, self.head.1));
        Ok(g.linear(pooled, hw, hb)?)
    }
}

fn build_params(config: &RateModelConfig, input_dim: usize, seed: u64) -> Result<ParamSet> {
    let mut rng = seeded_rng(seed);
    let mut p = ParamSet::new();
    let mut c_in = input_dim;
    let k = config.kernel;
    for (i, &c_out) in config.channels.iter().enumerate() {
        p.insert(
            format!("block{i}.conv.weight"),
            xavier_uniform(&mut rng, vec![c_out, c_in, k], c_in * k, c_out * k),
        );
        p.insert(format!("block{i}.conv.bias"), Tensor::zeros(vec![c_out]));
        if config.use_attention {
            let r = config.attention_reduction;
            p.insert(format!("block{i}.attn.w1"), xavier_uniform(&mut rng, vec![c_out, r], c_out, r));
            p.insert(format!("block{i}.attn.w2"), xavier_uniform(&mut rng, vec![r, c_out], r, c_out));
        }
        if config.use_residual && c_in != c_out {
            p.insert(
                format!("block{i}.proj.weight"),
                xavier_uniform(&mut rng, vec![c_out, c_in, 1], c_in, c_out),
            );
            p.insert(format!("block{i}.proj.bias"), Tensor::zeros(vec![c_out]));
        }
        c_in = c_out;
    }
    p.insert("head.weight", xavier_uniform(&mut rng, vec![c_in, 1], c_in, 1));
    p.insert("head.bias", Tensor::zeros(vec![1]));
    Ok(p)
}

/// Builds the network: per block conv → ReLU → optional channel attention
/// → optional residual, then time mean-pool → dropout → linear.
///
/// Valid convolution shortens the sequence by `kernel − 1` per block, so
/// the residual branch takes the trailing timesteps of the block input,
/// through a 1×1 convolution when the channel count changes.
pub fn build_rate_model(config: &RateModelConfig, input_dim: usize, seed: u64) -> Result<RateModel> {
    config.validate()?;
    if input_dim == 0 {
        return Err(RateError::ConfigInvalid("input_dim must be >= 1".into()));
    }
    let params = build_params(config, input_dim, seed)?;
    RateModel::wire(config.clone(), input_dim, params)
}
