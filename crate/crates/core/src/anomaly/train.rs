use std::collections::BTreeSet;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    build_vae_model, check_unit_range, standard_normal, AnomalyError, Result, VaeModel, VaeModelConfig,
    ENCODER_PREFIXES,
};
use crate::preprocess::{split_sizes, ColumnGroup, FusedDataset, SplitRatios};
use crate::tensor::{adam_step, bce_term, seeded_rng, AdamConfig, Graph, ParamSet};

/// Fixed-length windows `[n, seq_len, d]` for both encoder heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Windows {
    pub seq_len: usize,
    pub d_exc: usize,
    pub d_geo: usize,
    pub exc: Vec<f64>,
    pub geo: Vec<f64>,
    /// Position of each window in the full series.
    pub index: Vec<usize>,
    pub start_timestamps: Vec<i64>,
}

impl Windows {
    /// Checks lengths and that every value lies in `[0, 1]`.
    pub fn new(
        seq_len: usize,
        d_exc: usize,
        d_geo: usize,
        exc: Vec<f64>,
        geo: Vec<f64>,
        start_timestamps: Vec<i64>,
    ) -> Result<Self> {
        let n = start_timestamps.len();
        if exc.len() != n * seq_len * d_exc || geo.len() != n * seq_len * d_geo {
            return Err(AnomalyError::ShapeMismatch(format!(
                "{} excavation and {} geology values for {n} windows",
                exc.len(),
                geo.len()
            )));
        }
        check_unit_range(&exc)?;
        check_unit_range(&geo)?;
        Ok(Self {
            seq_len,
            d_exc,
            d_geo,
            exc,
            geo,
            index: (0..n).collect(),
            start_timestamps,
        })
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    fn exc_size(&self) -> usize {
        self.seq_len * self.d_exc
    }

    fn geo_size(&self) -> usize {
        self.seq_len * self.d_geo
    }

    pub fn exc_window(&self, i: usize) -> &[f64] {
        &self.exc[i * self.exc_size()..(i + 1) * self.exc_size()]
    }

    pub fn geo_window(&self, i: usize) -> &[f64] {
        &self.geo[i * self.geo_size()..(i + 1) * self.geo_size()]
    }

    /// The windows at positions `idx` of this set.
    pub fn subset(&self, idx: &[usize]) -> Windows {
        let mut exc = Vec::with_capacity(idx.len() * self.exc_size());
        let mut geo = Vec::with_capacity(idx.len() * self.geo_size());
        for &i in idx {
            exc.extend_from_slice(self.exc_window(i));
            geo.extend_from_slice(self.geo_window(i));
        }
        Windows {
            seq_len: self.seq_len,
            d_exc: self.d_exc,
            d_geo: self.d_geo,
            exc,
            geo,
            index: idx.iter().map(|&i| self.index[i]).collect(),
            start_timestamps: idx.iter().map(|&i| self.start_timestamps[i]).collect(),
        }
    }
}

/// Cuts the fused rows into consecutive non-overlapping windows; a short
/// tail is dropped. Columns are split by their manifest group.
pub fn make_anomaly_windows(ds: &FusedDataset, seq_len: usize) -> Result<Windows> {
    if seq_len == 0 {
        return Err(AnomalyError::ConfigInvalid("seq_len must be >= 1".into()));
    }
    let exc_cols = ds.manifest.group_indices(ColumnGroup::Excavation);
    let geo_cols = ds.manifest.group_indices(ColumnGroup::Geology);
    let n = ds.samples.len() / seq_len;
    if n == 0 {
        return Err(AnomalyError::EmptyDataset);
    }
    let mut exc = Vec::with_capacity(n * seq_len * exc_cols.len());
    let mut geo = Vec::with_capacity(n * seq_len * geo_cols.len());
    let mut starts = Vec::with_capacity(n);
    for w in ds.samples.chunks_exact(seq_len) {
        starts.push(w[0].timestamp);
        for s in w {
            if s.features.len() != ds.manifest.feature_dim() {
                return Err(AnomalyError::ShapeMismatch(format!(
                    "sample with {} features, manifest has {}",
                    s.features.len(),
                    ds.manifest.feature_dim()
                )));
            }
            exc.extend(exc_cols.iter().map(|&c| s.features[c]));
            geo.extend(geo_cols.iter().map(|&c| s.features[c]));
        }
    }
    Windows::new(seq_len, exc_cols.len(), geo_cols.len(), exc, geo, starts)
}

/// Window roles for one run. The leading `normal_windows` windows are split
/// chronologically 7:2:1 into training, calibration and held-out normals;
/// everything after them is the abnormal segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnomalySplits {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test_normal: Vec<usize>,
    pub abnormal: Vec<usize>,
}

impl AnomalySplits {
    pub fn new(total_windows: usize, normal_windows: usize) -> Result<Self> {
        if normal_windows > total_windows {
            return Err(AnomalyError::ConfigInvalid(format!(
                "{normal_windows} normal windows out of {total_windows}"
            )));
        }
        let (tr, va, _) = split_sizes(normal_windows, SplitRatios::default())?;
        Ok(Self {
            train: (0..tr).collect(),
            valid: (tr..tr + va).collect(),
            test_normal: (tr + va..normal_windows).collect(),
            abnormal: (normal_windows..total_windows).collect(),
        })
    }

    /// Number of leading rows the normalisation statistics may be fit on.
    pub fn fit_rows(&self, seq_len: usize) -> usize {
        self.train.len() * seq_len
    }

    /// Windows that are known normal and were not used for fitting or
    /// calibration: the held-out normals plus unlabeled abnormal-segment windows.
    pub fn held_out_normal(&self, labeled: &BTreeSet<usize>) -> BTreeSet<usize> {
        self.test_normal
            .iter()
            .chain(self.abnormal.iter().filter(|i| !labeled.contains(i)))
            .copied()
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainingReport {
    pub pretrain_loss: Vec<f64>,
    pub recon_loss: Vec<f64>,
    pub kl_loss: Vec<f64>,
    pub total_loss: Vec<f64>,
}

fn check_dims(model: &VaeModel, w: &Windows) -> Result<()> {
    if w.seq_len != model.config.seq_len || w.d_exc != model.d_exc || w.d_geo != model.d_geo {
        return Err(AnomalyError::ShapeMismatch(format!(
            "windows {}x{}/{} for model {}x{}/{}",
            w.seq_len, w.d_exc, w.d_geo, model.config.seq_len, model.d_exc, model.d_geo
        )));
    }
    Ok(())
}

fn is_encoder(name: &str) -> bool {
    ENCODER_PREFIXES.iter().any(|p| name.starts_with(p))
}

/// Trains the encoder and decoder as a plain autoencoder (`z = mu`) on
/// reconstruction BCE. Returns the encoder parameters and the per-epoch loss.
pub fn pretrain_lstm_ae(config: &VaeModelConfig, train: &Windows) -> Result<(ParamSet, Vec<f64>)> {
    if train.is_empty() {
        return Err(AnomalyError::EmptyDataset);
    }
    check_unit_range(&train.exc)?;
    check_unit_range(&train.geo)?;
    let mut model = build_vae_model(config, train.d_exc, train.d_geo, config.seed)?;
    check_dims(&model, train)?;
    let adam = AdamConfig::with_lr(config.lr);
    let mut rng = seeded_rng(config.seed.wrapping_add(0xae));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(config.pretrain_epochs);
    for epoch in 0..config.pretrain_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for idx in order.chunks(config.batch_size) {
            let b = train.subset(idx);
            let mut g = Graph::new();
            let loss = model.ae_loss_graph(&mut g, &model.params, &b.exc, &b.geo, idx.len())?;
            sum += g.item(loss).expect("scalar loss") * idx.len() as f64;
            g.backward(loss)?;
            model.params.accumulate_grads(&g);
            adam_step(
                model.params.iter_mut().filter(|p| !p.name.starts_with("encoder.log_var")),
                &adam,
            )?;
        }
        let mean = sum / train.len() as f64;
        log::debug!("pretrain epoch {epoch}: bce {mean:.6}");
        curve.push(mean);
    }
    let mut encoder = ParamSet::new();
    for p in model.params.iter().filter(|p| is_encoder(&p.name)) {
        encoder.insert(p.name.clone(), p.tensor.clone().with_requires_grad(true));
    }
    Ok((encoder, curve))
}

/// Trains the VAE on normal windows with Adam on BCE + KL. The encoder
/// starts from `encoder` when given.
pub fn train_vae(
    config: &VaeModelConfig,
    train: &Windows,
    encoder: Option<&ParamSet>,
) -> Result<(VaeModel, VaeTrainingReport)> {
    if train.is_empty() {
        return Err(AnomalyError::EmptyDataset);
    }
    let mut model = build_vae_model(config, train.d_exc, train.d_geo, config.seed.wrapping_add(1))?;
    check_dims(&model, train)?;
    if let Some(enc) = encoder {
        model.load_encoder(enc)?;
    }
    let adam = AdamConfig::with_lr(config.lr);
    let mut rng = seeded_rng(config.seed.wrapping_add(0x7ae));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut report = VaeTrainingReport::default();
    for epoch in 0..config.train_epochs {
        order.shuffle(&mut rng);
        let (mut rs, mut ks, mut ts) = (0.0, 0.0, 0.0);
        for idx in order.chunks(config.batch_size) {
            let b = train.subset(idx);
            let eps = standard_normal(&mut rng, vec![idx.len(), config.latent_dim]);
            let mut g = Graph::new();
            let (total, recon, kl) = model.vae_loss_graph(&mut g, &model.params, &b.exc, &b.geo, idx.len(), &eps)?;
            let w = idx.len() as f64;
            rs += g.item(recon).expect("scalar") * w;
            ks += g.item(kl).expect("scalar") * w;
            ts += g.item(total).expect("scalar") * w;
            g.backward(total)?;
            model.params.accumulate_grads(&g);
            adam_step(model.params.iter_mut(), &adam)?;
        }
        let n = train.len() as f64;
        log::debug!(
            "vae epoch {epoch}: bce {:.6} kl {:.6}",
            rs / n,
            ks / n
        );
        report.recon_loss.push(rs / n);
        report.kl_loss.push(ks / n);
        report.total_loss.push(ts / n);
    }
    Ok((model, report))
}

const SCORE_CHUNK: usize = 64;

/// Mean weighted excess BCE between each window and `decode(mu)`: the BCE
/// minus the input's own Bernoulli entropy, so a perfect reconstruction
/// scores 0 whatever the input level. No sampling.
pub fn score_windows(model: &VaeModel, windows: &Windows) -> Result<Vec<f64>> {
    check_dims(model, windows)?;
    let weights = model.config.weights(model.d_exc)?;
    let idx: Vec<usize> = (0..windows.len()).collect();
    let chunks: Vec<Result<Vec<f64>>> = idx
        .par_chunks(SCORE_CHUNK)
        .map(|c| {
            let b = windows.subset(c);
            let mut g = Graph::new();
            let (mu, _) = model.encode_graph(&mut g, &model.params, &b.exc, &b.geo, c.len())?;
            let x_hat = model.decode_graph(&mut g, &model.params, mu)?;
            let size = windows.exc_size();
            Ok(g.value(x_hat)
                .chunks(size)
                .zip(b.exc.chunks(size))
                .map(|(p, x)| {
                    p.iter()
                        .zip(x)
                        .enumerate()
                        .map(|(i, (&p, &x))| weights[i % model.d_exc] * (bce_term(p, x) - bce_term(x, x)))
                        .sum::<f64>()
                        / size as f64
                })
                .collect())
        })
        .collect();
    let mut out = Vec::with_capacity(windows.len());
    for c in chunks {
        out.extend(c?);
    }
    Ok(out)
}

/// Nearest-rank quantile: the element at `ceil(q n) - 1` of the sorted scores.
pub fn calibrate_threshold(scores: &[f64], q: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(AnomalyError::EmptyScores);
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(AnomalyError::ConfigInvalid(format!("quantile {q} outside (0, 1)")));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = ((q * s.len() as f64).ceil() as usize).max(1);
    Ok(s[rank - 1])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyVerdict {
    pub window_index: usize,
    pub start_timestamp: i64,
    pub score: f64,
    pub threshold: f64,
    pub is_anomaly: bool,
}

/// Scores every window and flags those above `threshold`.
pub fn detect(model: &VaeModel, threshold: f64, windows: &Windows) -> Result<Vec<AnomalyVerdict>> {
    let scores = score_windows(model, windows)?;
    Ok(scores
        .into_iter()
        .enumerate()
        .map(|(i, score)| AnomalyVerdict {
            window_index: windows.index[i],
            start_timestamp: windows.start_timestamps[i],
            score,
            threshold,
            is_anomaly: score > threshold,
        })
        .collect())
}

pub fn write_verdicts<W: Write>(out: W, verdicts: &[AnomalyVerdict]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let io = |e: csv::Error| AnomalyError::Preprocess(e.into());
    for v in verdicts {
        w.serialize(v).map_err(io)?;
    }
    w.flush().map_err(|e| AnomalyError::Preprocess(e.into()))?;
    Ok(())
}

/// Share of labeled anomalies that were flagged.
pub fn detection_rate(labeled: &BTreeSet<usize>, flagged: &BTreeSet<usize>) -> Result<f64> {
    if labeled.is_empty() {
        return Err(AnomalyError::NoLabels);
    }
    Ok(labeled.intersection(flagged).count() as f64 / labeled.len() as f64)
}

/// Share of known-normal windows that were flagged.
pub fn false_positive_rate(normal: &BTreeSet<usize>, flagged: &BTreeSet<usize>) -> Result<f64> {
    if normal.is_empty() {
        return Err(AnomalyError::EmptyDataset);
    }
    Ok(normal.intersection(flagged).count() as f64 / normal.len() as f64)
}

#[derive(Debug, Clone)]
pub struct AnomalyFit {
    pub model: VaeModel,
    pub threshold: f64,
    pub report: VaeTrainingReport,
}

/// Pretrains, trains on the training split and calibrates the threshold on
/// the validation split.
pub fn fit_anomaly_model(config: &VaeModelConfig, windows: &Windows, splits: &AnomalySplits) -> Result<AnomalyFit> {
    let train = windows.subset(&splits.train);
    let valid = windows.subset(&splits.valid);
    let (encoder, pretrain_loss) = pretrain_lstm_ae(config, &train)?;
    let (model, mut report) = train_vae(config, &train, Some(&encoder))?;
    report.pretrain_loss = pretrain_loss;
    let threshold = calibrate_threshold(&score_windows(&model, &valid)?, config.threshold_quantile)?;
    Ok(AnomalyFit {
        model,
        threshold,
        report,
    })
}
