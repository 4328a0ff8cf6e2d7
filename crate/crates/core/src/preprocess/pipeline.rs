//! End-to-end preprocessing for the two tasks, the manifest that records
//! every fitted statistic, and the fused CSV format.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::clean::{fill_missing, remove_discrete_points, window_smooth};
use super::fuse::{fused_columns, geology_index, merge_indexed, row_features, split_sizes, ColumnGroup, FusedSample, SplitRatios};
use super::normalize::{boxcox_fit_lambda, boxcox_transform, MinMaxStats, ZScoreStats};
use super::records::{fmt_f64, Channel, ExcavationRecord, GeologyRecord};
use super::word2vec::{train_word2vec, TextEmbedding, Word2VecConfig};
use super::PreprocessError;

pub const MANIFEST_VERSION: u32 = 1;
/// Lower bound applied after the Box-Cox shift, for values below the fit minimum.
pub const BOXCOX_FLOOR: f64 = 1e-6;
const N_EXCAVATION: usize = Channel::ALL.len();

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Rate,
    Anomaly,
}

impl std::str::FromStr for Task {
    type Err = PreprocessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rate" => Ok(Task::Rate),
            "anomaly" => Ok(Task::Anomaly),
            other => Err(PreprocessError::InvalidConfig(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub task: Task,
    pub embedding: Word2VecConfig,
    pub despike_window: usize,
    pub despike_k: f64,
    /// Moving-average window used by the anomaly task.
    pub smooth_window: usize,
    /// Anomaly task: smoothing runs separately inside consecutive blocks of
    /// this many rows, the scoring windows, so no window sees a neighbour's
    /// rows. 0 smooths the whole series.
    pub smooth_block: usize,
    /// Anomaly task: how many leading stable rows are known-normal and used
    /// to fit transforms. `None` fits on every row.
    pub fit_rows: Option<usize>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            task: Task::Rate,
            embedding: Word2VecConfig::default(),
            despike_window: 11,
            despike_k: 5.0,
            smooth_window: 3,
            smooth_block: 32,
            fit_rows: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxCoxFit {
    pub shift: f64,
    pub lambda: f64,
}

/// The fitted transforms of one column, applied in field order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ColumnTransform {
    pub zscore: Option<ZScoreStats>,
    pub boxcox: Option<BoxCoxFit>,
    pub minmax: Option<MinMaxStats>,
}

impl ColumnTransform {
    pub fn apply(&self, x: f64) -> f64 {
        let mut v = x;
        if let Some(z) = self.zscore {
            v = z.apply(v);
        }
        if let Some(b) = self.boxcox {
            v = boxcox_transform((v + b.shift).max(BOXCOX_FLOOR), b.lambda);
        }
        if let Some(m) = self.minmax {
            v = m.apply_clipped(v);
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnInfo {
    pub name: String,
    pub group: ColumnGroup,
    pub transform: ColumnTransform,
}

/// Everything needed to replay preprocessing bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub task: Task,
    pub config: PreprocessConfig,
    pub embedding_dim: usize,
    pub embedding: TextEmbedding,
    pub columns: Vec<ColumnInfo>,
    pub target: ColumnTransform,
    /// Rows (after phase filtering) the statistics were fit on.
    pub fit_rows: usize,
    pub rows: usize,
}

impl Manifest {
    pub fn to_json(&self) -> Vec<u8> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        bytes
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, PreprocessError> {
        let m: Manifest = serde_json::from_slice(bytes)
            .map_err(|e| PreprocessError::InvalidRecord(format!("manifest: {e}")))?;
        if m.format_version != MANIFEST_VERSION {
            return Err(PreprocessError::InvalidRecord(format!(
                "manifest format_version {} unsupported",
                m.format_version
            )));
        }
        Ok(m)
    }

    /// Hex SHA-256 of [`Manifest::to_json`].
    pub fn hash(&self) -> String {
        sha256_hex(&self.to_json())
    }

    pub fn feature_dim(&self) -> usize {
        self.columns.len()
    }

    pub fn group_indices(&self, group: ColumnGroup) -> Vec<usize> {
        self.columns
            .iter()
            .enumerate()
            .filter(|(_, c)| c.group == group)
            .map(|(i, _)| i)
            .collect()
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusedDataset {
    pub samples: Vec<FusedSample>,
    pub manifest: Manifest,
}

/// Runs the task's pipeline. With `fitted`, the embedding and all column
/// statistics come from that manifest instead of being fit on the data.
///
/// Rate task: embed geology text, join on ring with next-step target, fill
/// gaps, despike telemetry and target, keep stable rows, z-score with
/// statistics from the chronological train portion.
///
/// Anomaly task: keep stable rows, join geology, fill gaps, despike the
/// fit rows, smooth and Box-Cox the telemetry, then min-max every column
/// into `[0, 1]`. The target column is the transformed propulsion speed.
pub fn preprocess(
    geo: &[GeologyRecord],
    exc: &[ExcavationRecord],
    cfg: &PreprocessConfig,
    fitted: Option<&Manifest>,
) -> Result<FusedDataset, PreprocessError> {
    let cfg = fitted.map_or(cfg, |m| &m.config);
    let emb = match fitted {
        Some(m) => m.embedding.clone(),
        None => {
            let corpus: Vec<Vec<String>> = geo.iter().map(GeologyRecord::text_tokens).collect();
            train_word2vec(&corpus, &cfg.embedding)?
        }
    };
    match cfg.task {
        Task::Rate => rate_pipeline(geo, exc, cfg, emb, fitted),
        Task::Anomaly => anomaly_pipeline(geo, exc, cfg, emb, fitted),
    }
}

fn columns_of(rows: &[Vec<f64>], width: usize) -> Vec<Vec<f64>> {
    (0..width)
        .map(|j| rows.iter().map(|r| r[j]).collect())
        .collect()
}

fn fill_named(col: &[f64], name: &str) -> Result<Vec<f64>, PreprocessError> {
    fill_missing(col).map_err(|e| match e {
        PreprocessError::AllMissing => PreprocessError::ColumnAllMissing(name.to_string()),
        other => other,
    })
}

fn despike(col: &mut [f64], cfg: &PreprocessConfig) -> Result<(), PreprocessError> {
    if col.len() >= cfg.despike_window {
        let cleaned = remove_discrete_points(col, cfg.despike_window, cfg.despike_k)?;
        col.copy_from_slice(&cleaned);
    }
    Ok(())
}

fn fitted_transform(fitted: Option<&Manifest>, j: usize) -> Result<&ColumnTransform, PreprocessError> {
    let m = fitted.expect("only called with a manifest");
    m.columns
        .get(j)
        .map(|c| &c.transform)
        .ok_or_else(|| PreprocessError::InvalidRecord(format!("manifest lacks column {j}")))
}

fn check_width(fitted: Option<&Manifest>, width: usize) -> Result<(), PreprocessError> {
    match fitted {
        Some(m) if m.columns.len() != width => Err(PreprocessError::InvalidRecord(format!(
            "manifest has {} columns, data has {width}",
            m.columns.len()
        ))),
        _ => Ok(()),
    }
}

fn rate_pipeline(
    geo: &[GeologyRecord],
    exc: &[ExcavationRecord],
    cfg: &PreprocessConfig,
    emb: TextEmbedding,
    fitted: Option<&Manifest>,
) -> Result<FusedDataset, PreprocessError> {
    let merged = merge_indexed(geo, exc, &emb)?;
    let names = fused_columns(emb.dim());
    let width = names.len();
    check_width(fitted, width)?;

    let rows: Vec<Vec<f64>> = merged.iter().map(|(_, s)| s.features.clone()).collect();
    let mut cols = columns_of(&rows, width);
    let mut target: Vec<f64> = merged.iter().map(|(_, s)| s.target).collect();
    for (col, (name, _)) in cols.iter_mut().zip(&names) {
        *col = fill_named(col, name)?;
    }
    target = fill_named(&target, "target")?;
    for col in cols.iter_mut().take(N_EXCAVATION) {
        despike(col, cfg)?;
    }
    despike(&mut target, cfg)?;

    let keep: Vec<usize> = (0..merged.len())
        .filter(|&i| exc[merged[i].0].phase.is_operating())
        .collect();
    let n = keep.len();
    let fit = match fitted {
        Some(m) => m.fit_rows,
        None => split_sizes(n, SplitRatios::default())?.0,
    };

    let mut columns = Vec::with_capacity(width);
    for (j, (name, group)) in names.iter().enumerate() {
        let transform = if fitted.is_some() {
            fitted_transform(fitted, j)?.clone()
        } else {
            let fit_values: Vec<f64> = keep[..fit].iter().map(|&i| cols[j][i]).collect();
            let stats = match ZScoreStats::fit(&fit_values) {
                Ok(s) => s,
                // A constant training column carries no information; centre it only.
                Err(PreprocessError::ZeroVariance) => ZScoreStats {
                    mean: fit_values[0],
                    std: 1.0,
                },
                Err(e) => return Err(e),
            };
            ColumnTransform {
                zscore: Some(stats),
                ..Default::default()
            }
        };
        columns.push(ColumnInfo {
            name: name.clone(),
            group: *group,
            transform,
        });
    }
    let target_transform = match fitted {
        Some(m) => m.target.clone(),
        None => columns[Channel::PropulsionSpeed.index()].transform.clone(),
    };

    let samples = keep
        .iter()
        .map(|&i| {
            let s = &merged[i].1;
            FusedSample {
                ring: s.ring,
                timestamp: s.timestamp,
                features: (0..width).map(|j| columns[j].transform.apply(cols[j][i])).collect(),
                target: target_transform.apply(target[i]),
            }
        })
        .collect();

    Ok(FusedDataset {
        samples,
        manifest: Manifest {
            format_version: MANIFEST_VERSION,
            task: Task::Rate,
            config: cfg.clone(),
            embedding_dim: emb.dim(),
            embedding: emb,
            columns,
            target: target_transform,
            fit_rows: fit,
            rows: n,
        },
    })
}

fn anomaly_pipeline(
    geo: &[GeologyRecord],
    exc: &[ExcavationRecord],
    cfg: &PreprocessConfig,
    emb: TextEmbedding,
    fitted: Option<&Manifest>,
) -> Result<FusedDataset, PreprocessError> {
    let by_ring = geology_index(geo);
    let stable: Vec<&ExcavationRecord> = exc.iter().filter(|r| r.phase.is_operating()).collect();
    let n = stable.len();
    if n < 2 {
        return Err(PreprocessError::TooFewSamples(n));
    }
    let mut rows = Vec::with_capacity(n);
    for r in &stable {
        let g = by_ring
            .get(&r.ring)
            .ok_or(PreprocessError::MissingGeology(r.ring))?;
        rows.push(row_features(r, g, &emb));
    }
    let names = fused_columns(emb.dim());
    let width = names.len();
    check_width(fitted, width)?;
    let mut cols = columns_of(&rows, width);
    for (col, (name, _)) in cols.iter_mut().zip(&names) {
        *col = fill_named(col, name)?;
    }

    let fit = match fitted {
        Some(m) => m.fit_rows,
        None => cfg.fit_rows.unwrap_or(n).min(n),
    };
    if fit < 2 {
        return Err(PreprocessError::TooFewSamples(fit));
    }

    let mut columns = Vec::with_capacity(width);
    for (j, (name, group)) in names.iter().enumerate() {
        let col = &mut cols[j];
        if j < N_EXCAVATION {
            // Only the known-normal rows are despiked: on the rest, isolated
            // extremes are exactly what the detector must see.
            despike(&mut col[..fit], cfg)?;
            let block = if cfg.smooth_block == 0 { col.len() } else { cfg.smooth_block };
            for chunk in col.chunks_mut(block.max(1)) {
                if chunk.len() >= cfg.smooth_window {
                    let smoothed = window_smooth(chunk, cfg.smooth_window)?;
                    chunk.copy_from_slice(&smoothed);
                }
            }
        }
        let transform = if fitted.is_some() {
            fitted_transform(fitted, j)?.clone()
        } else {
            let mut t = ColumnTransform::default();
            if j < N_EXCAVATION {
                let min = col[..fit].iter().copied().fold(f64::INFINITY, f64::min);
                let shift = 1.0 - min;
                let shifted: Vec<f64> = col[..fit].iter().map(|x| (x + shift).max(BOXCOX_FLOOR)).collect();
                let lambda = boxcox_fit_lambda(&shifted)?;
                t.boxcox = Some(BoxCoxFit { shift, lambda });
            }
            let partial: Vec<f64> = col[..fit].iter().map(|&x| t.apply(x)).collect();
            t.minmax = Some(match MinMaxStats::fit(&partial) {
                Ok(m) => m,
                // Constant column: maps to 0.
                Err(PreprocessError::ZeroRange) => MinMaxStats {
                    min: partial[0],
                    max: partial[0] + 1.0,
                },
                Err(e) => return Err(e),
            });
            t
        };
        columns.push(ColumnInfo {
            name: name.clone(),
            group: *group,
            transform,
        });
    }

    let speed = Channel::PropulsionSpeed.index();
    let samples = stable
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let features: Vec<f64> = (0..width).map(|j| columns[j].transform.apply(cols[j][i])).collect();
            FusedSample {
                ring: r.ring,
                timestamp: r.timestamp,
                target: features[speed],
                features,
            }
        })
        .collect();
    let target = columns[speed].transform.clone();

    Ok(FusedDataset {
        samples,
        manifest: Manifest {
            format_version: MANIFEST_VERSION,
            task: Task::Anomaly,
            config: cfg.clone(),
            embedding_dim: emb.dim(),
            embedding: emb,
            columns,
            target,
            fit_rows: fit,
            rows: n,
        },
    })
}

/// Writes `ring,timestamp,target,f0..fN`. Values round-trip exactly.
pub fn write_fused_csv<W: Write>(writer: W, samples: &[FusedSample]) -> Result<(), PreprocessError> {
    let mut w = csv::Writer::from_writer(writer);
    let width = samples.first().map_or(0, |s| s.features.len());
    let mut header = vec!["ring".to_string(), "timestamp".to_string(), "target".to_string()];
    header.extend((0..width).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for s in samples {
        let mut row = vec![s.ring.to_string(), s.timestamp.to_string(), fmt_f64(s.target)];
        row.extend(s.features.iter().map(|&v| fmt_f64(v)));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_fused_csv<R: Read>(reader: R) -> Result<Vec<FusedSample>, PreprocessError> {
    let mut rdr = csv::Reader::from_reader(reader);
    let headers = rdr.headers()?.clone();
    for (i, name) in ["ring", "timestamp", "target"].iter().enumerate() {
        if headers.get(i) != Some(*name) {
            return Err(PreprocessError::MissingColumn(name.to_string()));
        }
    }
    for (i, h) in headers.iter().skip(3).enumerate() {
        if h != format!("f{i}") {
            return Err(PreprocessError::MissingColumn(format!("f{i}")));
        }
    }
    let bad = |line: u64, what: &str| PreprocessError::InvalidRecord(format!("line {line}: {what}"));
    let mut out = Vec::new();
    for row in rdr.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let num = |cell: &str| -> Result<f64, PreprocessError> {
            cell.parse().map_err(|_| bad(line, &format!("`{cell}` is not a number")))
        };
        out.push(FusedSample {
            ring: row[0].parse().map_err(|_| bad(line, "ring"))?,
            timestamp: row[1].parse().map_err(|_| bad(line, "timestamp"))?,
            target: num(&row[2])?,
            features: row.iter().skip(3).map(num).collect::<Result<_, _>>()?,
        });
    }
    Ok(out)
}
