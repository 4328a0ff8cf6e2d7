//! Joining geology onto telemetry, and chronological dataset splits.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::records::{Channel, ExcavationRecord, GeologyRecord};
use super::word2vec::{embed_category, TextEmbedding};
use super::PreprocessError;

/// One model-ready row: excavation features, geology features and text
/// embeddings, with the next-step propulsion speed as target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedSample {
    pub ring: u32,
    pub timestamp: i64,
    pub features: Vec<f64>,
    pub target: f64,
}

/// Whether a fused column comes from telemetry or from the survey.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnGroup {
    Excavation,
    Geology,
}

/// Column names and groups of the fused feature vector for an embedding
/// of dimension `dim`.
pub fn fused_columns(dim: usize) -> Vec<(String, ColumnGroup)> {
    let mut cols: Vec<(String, ColumnGroup)> = Channel::ALL
        .iter()
        .map(|c| (c.name().to_string(), ColumnGroup::Excavation))
        .collect();
    cols.extend(
        GeologyRecord::NUMERIC_FEATURES
            .iter()
            .map(|n| (n.to_string(), ColumnGroup::Geology)),
    );
    for field in ["plasticity", "density"] {
        cols.extend((0..dim).map(|i| (format!("{field}_emb{i}"), ColumnGroup::Geology)));
    }
    cols
}

pub(crate) fn geology_index(
    geo: &[GeologyRecord],
) -> HashMap<u32, &GeologyRecord> {
    geo.iter().map(|g| (g.ring, g)).collect()
}

/// Feature vector for one telemetry row joined with its ring's survey.
pub(crate) fn row_features(exc: &ExcavationRecord, geo: &GeologyRecord, emb: &TextEmbedding) -> Vec<f64> {
    let mut f = exc.channels().to_vec();
    f.extend(geo.numeric_features());
    f.extend(embed_category(&geo.plasticity, emb));
    f.extend(embed_category(&geo.density, emb));
    f
}

/// Like [`merge_geology_excavation`] but also returns, for every sample,
/// the index of the excavation row it was built from.
pub fn merge_indexed(
    geo: &[GeologyRecord],
    exc: &[ExcavationRecord],
    emb: &TextEmbedding,
) -> Result<Vec<(usize, FusedSample)>, PreprocessError> {
    let by_ring = geology_index(geo);
    let mut out = Vec::with_capacity(exc.len());
    for (i, row) in exc.iter().enumerate() {
        let g = by_ring
            .get(&row.ring)
            .ok_or(PreprocessError::MissingGeology(row.ring))?;
        let Some(next) = exc.get(i + 1).filter(|n| n.ring == row.ring) else {
            continue;
        };
        out.push((
            i,
            FusedSample {
                ring: row.ring,
                timestamp: row.timestamp,
                features: row_features(row, g, emb),
                target: next.propulsion_speed,
            },
        ));
    }
    Ok(out)
}

/// Joins each telemetry row with its ring's geology. The target is the
/// propulsion speed of the following row of the same ring, so the last row
/// of every ring yields no sample.
pub fn merge_geology_excavation(
    geo: &[GeologyRecord],
    exc: &[ExcavationRecord],
    emb: &TextEmbedding,
) -> Result<Vec<FusedSample>, PreprocessError> {
    Ok(merge_indexed(geo, exc, emb)?
        .into_iter()
        .map(|(_, s)| s)
        .collect())
}

/// Train/valid/test proportions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: u32,
    pub valid: u32,
    pub test: u32,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 7,
            valid: 2,
            test: 1,
        }
    }
}

pub const MIN_SPLIT_SAMPLES: usize = 10;

/// Sizes of a chronological split: valid and test are floored, the
/// remainder goes to train.
pub fn split_sizes(n: usize, ratios: SplitRatios) -> Result<(usize, usize, usize), PreprocessError> {
    if n < MIN_SPLIT_SAMPLES {
        return Err(PreprocessError::TooFewSamples(n));
    }
    let total = (ratios.train + ratios.valid + ratios.test) as usize;
    let valid = n * ratios.valid as usize / total;
    let test = n * ratios.test as usize / total;
    Ok((n - valid - test, valid, test))
}

/// Contiguous, unshuffled split into train, valid and test.
pub fn split_dataset<T: Clone>(
    samples: &[T],
    ratios: SplitRatios,
) -> Result<(Vec<T>, Vec<T>, Vec<T>), PreprocessError> {
    let (train, valid, _) = split_sizes(samples.len(), ratios)?;
    Ok((
        samples[..train].to_vec(),
        samples[train..train + valid].to_vec(),
        samples[train + valid..].to_vec(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::preprocess::records::Phase;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    pub(crate) fn geo(ring: u32) -> GeologyRecord {
        GeologyRecord {
            ring,
            plasticity: "Soft plastic".into(),
            density: "Loose".into(),
            ucs: 27.8,
            permeability: 0.0115740740740741,
            rock_level: 5,
            layer_number: 3,
            accounting: 0.0087,
            integrity_low: 0.36,
            integrity_high: 0.51,
            standard_penetration: 9.8,
        }
    }

    fn exc(ring: u32, ts: i64, speed: f64) -> ExcavationRecord {
        ExcavationRecord {
            timestamp: ts,
            ring,
            propulsion_speed: speed,
            cutter_speed: 1.5,
            cutter_torque: 2080.6,
            total_propulsion: 40784.81,
            cutter_power: 322.0,
            displacement: 680.0,
            propulsion_pressure: 65.93,
            propulsion_thrust: 9488.69,
            phase: Phase::Stable,
        }
    }

    fn emb() -> TextEmbedding {
        let mut vocab = BTreeMap::new();
        vocab.insert("soft".to_string(), 0);
        vocab.insert("loose".to_string(), 1);
        TextEmbedding {
            vocab,
            vectors: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
        }
    }

    #[test]
    fn one_ring_three_rows() {
        let rows = [exc(1, 0, 3.0), exc(1, 1, 3.5), exc(1, 2, 4.0)];
        let s = merge_geology_excavation(&[geo(1)], &rows, &emb()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].target, 3.5);
        assert_eq!(s[1].target, 4.0);
        assert_eq!(s[0].features.len(), fused_columns(2).len());
        // "Soft plastic" -> mean(soft, <unknown>) = [0.5, 0]
        assert_eq!(&s[0].features[16..18], &[0.5, 0.0]);
        assert_eq!(&s[0].features[18..20], &[0.0, 1.0]);
    }

    #[test]
    fn missing_geology_ring() {
        let rows = [exc(2, 0, 3.0), exc(2, 1, 3.0)];
        assert_eq!(
            merge_geology_excavation(&[geo(1)], &rows, &emb()).unwrap_err(),
            PreprocessError::MissingGeology(2)
        );
    }

    #[test]
    fn sample_count_loses_one_row_per_ring() {
        let (rings, per_ring) = (400u32, 7usize);
        let geos: Vec<_> = (1..=rings).map(geo).collect();
        let rows: Vec<_> = (1..=rings)
            .flat_map(|r| (0..per_ring).map(move |j| exc(r, (r as i64) * 100 + j as i64, 1.0)))
            .collect();
        // naive join oracle: count rows that have a successor in the same ring
        let oracle = rows
            .iter()
            .enumerate()
            .filter(|(i, r)| rows.get(i + 1).is_some_and(|n| n.ring == r.ring))
            .count();
        let merged = merge_geology_excavation(&geos, &rows, &emb()).unwrap();
        assert_eq!(merged.len(), oracle);
        assert_eq!(merged.len(), rows.len() - rings as usize);
    }

    #[test]
    fn split_sizes_follow_floor_rule() {
        let r = SplitRatios::default();
        assert_eq!(split_sizes(400, r).unwrap(), (280, 80, 40));
        assert_eq!(split_sizes(10, r).unwrap(), (7, 2, 1));
        assert_eq!(split_sizes(103, r).unwrap(), (73, 20, 10));
        assert_eq!(split_sizes(9, r).unwrap_err(), PreprocessError::TooFewSamples(9));
    }

    proptest! {
        #[test]
        fn split_partitions_in_order(n in 10usize..500) {
            let v: Vec<usize> = (0..n).collect();
            let (a, b, c) = split_dataset(&v, SplitRatios::default()).unwrap();
            let joined: Vec<usize> = a.iter().chain(&b).chain(&c).copied().collect();
            prop_assert_eq!(joined, v);
        }
    }
}
