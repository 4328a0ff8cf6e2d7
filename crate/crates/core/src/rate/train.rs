//! Windowing, training with early stopping, metrics and the ablation grid.

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{build_rate_model, RateError, RateModel, RateModelConfig, Result};
use crate::preprocess::{split_dataset, ColumnGroup, FusedDataset, FusedSample, Manifest, SplitRatios};
use crate::tensor::{adam_step, seeded_rng, AdamConfig, Graph, Tensor};

const EVAL_BATCH: usize = 256;

/// Model inputs `[n, features, window_len]` with one target each.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSet {
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub features: usize,
    pub window_len: usize,
}

impl WindowSet {
    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    fn stride(&self) -> usize {
        self.features * self.window_len
    }

    /// Inputs `[idx.len(), features, window_len]` and targets `[idx.len(), 1]`.
    pub fn batch(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let s = self.stride();
        let mut x = Vec::with_capacity(idx.len() * s);
        for &i in idx {
            x.extend_from_slice(&self.inputs[i * s..(i + 1) * s]);
        }
        let y = idx.iter().map(|&i| self.targets[i]).collect();
        (
            Tensor::from_vec(vec![idx.len(), self.features, self.window_len], x).expect("batch shape"),
            Tensor::from_vec(vec![idx.len(), 1], y).expect("batch shape"),
        )
    }
}

/// Columns fed to the model: everything, or only telemetry when geology
/// is switched off.
pub fn feature_columns(manifest: &Manifest, use_geology: bool) -> Vec<usize> {
    if use_geology {
        (0..manifest.feature_dim()).collect()
    } else {
        manifest.group_indices(ColumnGroup::Excavation)
    }
}

/// Each sample from `window_len − 1` onwards becomes one window holding its
/// trailing `window_len` rows of the selected columns, channel-major.
pub fn make_windows(samples: &[FusedSample], columns: &[usize], window_len: usize) -> WindowSet {
    let f = columns.len();
    let n = samples.len().saturating_sub(window_len.saturating_sub(1));
    let mut inputs = Vec::with_capacity(n * f * window_len);
    let mut targets = Vec::with_capacity(n);
    for end in window_len.saturating_sub(1)..samples.len() {
        let rows = &samples[end + 1 - window_len..=end];
        for &c in columns {
            inputs.extend(rows.iter().map(|s| s.features[c]));
        }
        targets.push(samples[end].target);
    }
    WindowSet {
        inputs,
        targets,
        features: f,
        window_len,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateSplits {
    pub train: WindowSet,
    pub valid: WindowSet,
    pub test: WindowSet,
}

/// Chronological 7:2:1 split of the samples, windowed within each part.
pub fn rate_splits(samples: &[FusedSample], columns: &[usize], window_len: usize) -> Result<RateSplits> {
    let (train, valid, test) = split_dataset(samples, SplitRatios::default())?;
    let w = |s: &[FusedSample]| make_windows(s, columns, window_len);
    let out = RateSplits {
        train: w(&train),
        valid: w(&valid),
        test: w(&test),
    };
    if out.train.is_empty() || out.valid.is_empty() || out.test.is_empty() {
        return Err(RateError::EmptyDataset);
    }
    Ok(out)
}

/// Mean Smooth-L1 of `pred − target`.
pub fn smooth_l1_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(pred.clone());
    let t = g.constant(target.clone());
    let l = g.smooth_l1(p, t)?;
    Ok(g.item(l).expect("scalar"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    pub train_loss: Vec<f64>,
    pub valid_loss: Vec<f64>,
    /// Zero-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

fn check_dim(model: &RateModel, set: &WindowSet) -> Result<()> {
    if set.features != model.input_dim {
        return Err(RateError::DimMismatch {
            expected: model.input_dim,
            got: set.features,
        });
    }
    if set.window_len != model.config.window_len {
        return Err(RateError::ConfigInvalid(format!(
            "windows of {} steps for a model of {}",
            set.window_len, model.config.window_len
        )));
    }
    Ok(())
}

/// Predictions for every window of `set`, dropout off.
pub fn predict_set(model: &RateModel, set: &WindowSet) -> Result<Vec<f64>> {
    check_dim(model, set)?;
    let mut out = Vec::with_capacity(set.len());
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, _) = set.batch(chunk);
        out.extend(predict_rate(model, &x)?);
    }
    Ok(out)
}

/// Deterministic forward pass on `windows[batch, features, window_len]`.
pub fn predict_rate(model: &RateModel, windows: &Tensor) -> Result<Vec<f64>> {
    let mut g = Graph::new();
    let x = g.constant(windows.clone());
    let y = model.forward(&mut g, &model.params, x, false, &mut seeded_rng(0))?;
    Ok(g.value(y).to_vec())
}

fn mean_loss(model: &RateModel, set: &WindowSet) -> Result<f64> {
    let pred = predict_set(model, set)?;
    let n = pred.len();
    let p = Tensor::from_vec(vec![n, 1], pred)?;
    let t = Tensor::from_vec(vec![n, 1], set.targets.clone())?;
    smooth_l1_loss(&p, &t)
}

/// Adam on Smooth-L1 over shuffled mini-batches. Stops once validation
/// loss has not improved for `patience` epochs and restores the best
/// parameters seen.
pub fn train_rate_model(model: &mut RateModel, train: &WindowSet, valid: &WindowSet) -> Result<TrainingReport> {
    if train.is_empty() || valid.is_empty() {
        return Err(RateError::EmptyDataset);
    }
    check_dim(model, train)?;
    check_dim(model, valid)?;
    let cfg = model.config.clone();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut rng = seeded_rng(cfg.seed.wrapping_add(0x5eed));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut report = TrainingReport {
        train_loss: Vec::new(),
        valid_loss: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = train.batch(chunk);
            let mut g = Graph::new();
            let x = g.constant(x);
            let y = g.constant(y);
            let pred = model.forward(&mut g, &model.params, x, true, &mut rng)?;
            let loss = g.smooth_l1(pred, y)?;
            total += g.item(loss).expect("scalar") * chunk.len() as f64;
            g.backward(loss)?;
            model.params.accumulate_grads(&g);
            adam_step(model.params.iter_mut(), &adam)?;
        }
        let v = mean_loss(model, valid)?;
        report.train_loss.push(total / train.len() as f64);
        report.valid_loss.push(v);
        log::debug!("epoch {epoch}: train {:.6} valid {v:.6}", total / train.len() as f64);
        if v < best.0 {
            best = (v, epoch, model.params.clone());
        } else if epoch - best.1 >= cfg.patience {
            report.stopped_early = true;
            break;
        }
    }
    model.params = best.2;
    report.best_epoch = best.1;
    Ok(report)
}

fn check_lengths(y: &[f64], y_hat: &[f64]) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(RateError::LengthMismatch(y.len(), y_hat.len()));
    }
    if y.is_empty() {
        return Err(RateError::EmptyDataset);
    }
    Ok(())
}

/// Coefficient of determination `1 − SS_res / SS_tot`.
pub fn r_squared(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_lengths(y, y_hat)?;
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    if ss_tot == 0.0 {
        return Err(RateError::ConstantTarget);
    }
    let ss_res: f64 = y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

pub fn mse(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    check_lengths(y, y_hat)?;
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / y.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub r2: f64,
    pub mse: f64,
}

pub fn evaluate(model: &RateModel, set: &WindowSet) -> Result<Metrics> {
    let pred = predict_set(model, set)?;
    Ok(Metrics {
        r2: r_squared(&set.targets, &pred)?,
        mse: mse(&set.targets, &pred)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub geology: bool,
    pub modules: String,
    pub r2: f64,
    pub mse: f64,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn get(&self, geology: bool, modules: &str) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.geology == geology && r.modules == modules)
    }
}

/// Builds, trains and tests one configuration on a preprocessed dataset.
pub fn fit_rate_model(config: &RateModelConfig, dataset: &FusedDataset) -> Result<(RateModel, TrainingReport, Metrics)> {
    let cols = feature_columns(&dataset.manifest, config.use_geology);
    let splits = rate_splits(&dataset.samples, &cols, config.window_len)?;
    let mut model = build_rate_model(config, cols.len(), config.seed)?;
    let report = train_rate_model(&mut model, &splits.train, &splits.valid)?;
    let metrics = evaluate(&model, &splits.test)?;
    Ok((model, report, metrics))
}

/// Trains geology on/off × {attention+residual, attention, residual, cnn}
/// from the same seed and reports test metrics for each cell.
pub fn run_ablation(base: &RateModelConfig, dataset: &FusedDataset) -> Result<AblationReport> {
    let mut cells = Vec::new();
    for geology in [true, false] {
        for (attention, residual) in [(true, true), (true, false), (false, true), (false, false)] {
            cells.push(RateModelConfig {
                use_geology: geology,
                use_attention: attention,
                use_residual: residual,
                ..base.clone()
            });
        }
    }
    let rows = cells
        .par_iter()
        .map(|cfg| {
            let (_, report, m) = fit_rate_model(cfg, dataset)?;
            log::info!(
                "ablation geology={} modules={}: r2 {:.4} mse {:.5}",
                cfg.use_geology,
                cfg.modules(),
                m.r2,
                m.mse
            );
            Ok(AblationRow {
                geology: cfg.use_geology,
                modules: cfg.modules().to_string(),
                r2: m.r2,
                mse: m.mse,
                best_epoch: report.best_epoch,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { rows })
}
