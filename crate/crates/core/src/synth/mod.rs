//! Geology-driven synthetic telemetry with labelled fault injection.
//!
//! Geology follows a Markov chain over [`GeologyRegime`]s, one state per
//! ring. Within ring `r` with strength `ucs` and blow count `spt`, stable
//! rows are generated at one-minute spacing as
//!
//! ```text
//! μ        = 60·exp(−ucs/40) + 10·spt/60
//! v        = μ + e_t,   e_t = 0.8·e_{t−1} + σ·ε_t
//! cutter   = 1.2 + 0.01·v + 0.02·s·n₁                               rpm
//! torque   = (800 + 25·ucs + 25·v)·(1 + 0.08·s·n₂)                   kN·m
//! total    = (20000 + 300·ucs + 200·v)·(1 + 0.08·s·n₃)               kN
//! power    = torque·cutter·2π/60                                     kW
//! thrust   = 0.23·total·(1 + 0.05·s·n₄)                              kN
//! pressure = thrust / 144                                            bar
//! disp     = Σ v·1 min over the ring so far                          mm
//! ```
//!
//! with `σ = noise_sigma`, `s = noise_sigma / SENSOR_NOISE_REFERENCE` and
//! `ε, n₁..n₄` standard normal. `e` starts each ring from its stationary
//! distribution, so rings are independent given their seed stream. The
//! first tenth of each ring is the `Rising` phase, with speed ramped up
//! linearly; the rest is `Stable`. All values are clamped at zero.
//!
//! Faults are placed on windows of `window_len` consecutive stable rows.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::preprocess::{Channel, ExcavationRecord, GeologyRecord, Phase};

pub const AR_PHI: f64 = 0.8;
/// Innovation scale at which sensor noise has the relative sizes below.
pub const SENSOR_NOISE_REFERENCE: f64 = 1.0;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.5;
pub const STEP_SECONDS: i64 = 60;
pub const RING_GAP_SECONDS: i64 = 1800;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SynthError {
    #[error("no geology regimes given")]
    NoRegimes,
    #[error("no geology records given")]
    EmptyGeology,
    #[error("fault {index} covers windows {start}..{end} but only {available} exist")]
    FaultOutOfBounds {
        index: usize,
        start: usize,
        end: usize,
        available: usize,
    },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeologyRegime {
    pub name: String,
    pub ucs_range: (f64, f64),
    pub permeability_range: (f64, f64),
    pub penetration_range: (f64, f64),
    pub plasticity: String,
    pub density: String,
    pub rock_level: u8,
}

fn regime(
    name: &str,
    ucs: (f64, f64),
    perm: (f64, f64),
    spt: (f64, f64),
    plasticity: &str,
    density: &str,
    rock_level: u8,
) -> GeologyRegime {
    GeologyRegime {
        name: name.into(),
        ucs_range: ucs,
        permeability_range: perm,
        penetration_range: spt,
        plasticity: plasticity.into(),
        density: density.into(),
        rock_level,
    }
}

/// Soft clay, silty sand, weathered rock and hard rock.
pub fn default_regimes() -> Vec<GeologyRegime> {
    vec![
        regime("soft clay", (5.0, 15.0), (1e-9, 1e-7), (5.0, 12.0), "Soft plastic", "Loose", 6),
        regime("silty sand", (15.0, 30.0), (1e-6, 1e-5), (12.0, 25.0), "Hard plastic", "Slightly dense", 5),
        regime("weathered rock", (30.0, 50.0), (1e-7, 1e-6), (25.0, 40.0), "Plastic", "Medium dense", 4),
        regime("hard rock", (50.0, 80.0), (1e-10, 1e-8), (40.0, 60.0), "Hard", "Dense", 3),
    ]
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<(), SynthError> {
    if lo <= hi {
        Ok(())
    } else {
        Err(SynthError::InvalidConfig(format!("{name}: low {lo} > high {hi}")))
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.gen::<f64>()
}

/// One geology record per ring `1..=rings`. The regime starts at index 0
/// and, at each following ring, switches with probability `change_prob`
/// to a different regime chosen uniformly.
pub fn gen_geology(
    rings: u32,
    regimes: &[GeologyRegime],
    change_prob: f64,
    seed: u64,
) -> Result<Vec<GeologyRecord>, SynthError> {
    if regimes.is_empty() {
        return Err(SynthError::NoRegimes);
    }
    if !(0.0..=1.0).contains(&change_prob) {
        return Err(SynthError::InvalidConfig(format!(
            "change_prob {change_prob} outside [0, 1]"
        )));
    }
    for r in regimes {
        check_range(&r.name, r.ucs_range)?;
        check_range(&r.name, r.permeability_range)?;
        check_range(&r.name, r.penetration_range)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = 0usize;
    let mut out = Vec::with_capacity(rings as usize);
    for ring in 1..=rings {
        if ring > 1 && regimes.len() > 1 && rng.gen::<f64>() < change_prob {
            let step = rng.gen_range(1..regimes.len());
            state = (state + step) % regimes.len();
        }
        let g = &regimes[state];
        let integrity_low = uniform(&mut rng, (0.3, 0.5));
        out.push(GeologyRecord {
            ring,
            plasticity: g.plasticity.clone(),
            density: g.density.clone(),
            ucs: uniform(&mut rng, g.ucs_range),
            permeability: uniform(&mut rng, g.permeability_range),
            rock_level: g.rock_level,
            layer_number: state as u32 + 1,
            accounting: uniform(&mut rng, (0.001, 0.02)),
            integrity_low,
            integrity_high: integrity_low + uniform(&mut rng, (0.05, 0.2)),
            standard_penetration: uniform(&mut rng, g.penetration_range),
        });
    }
    Ok(out)
}

/// Mean stable speed implied by a ring's geology, mm/min.
pub fn base_speed(ucs: f64, standard_penetration: f64) -> f64 {
    60.0 * (-ucs / 40.0).exp() + 10.0 * standard_penetration / 60.0
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gen_ring(
    index: usize,
    g: &GeologyRecord,
    rows_per_ring: usize,
    noise_sigma: f64,
    seed: u64,
) -> Vec<ExcavationRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(g.ring));
    let s = noise_sigma / SENSOR_NOISE_REFERENCE;
    let rising = rows_per_ring / 10;
    let mean = base_speed(g.ucs, g.standard_penetration);
    let mut e = noise_sigma / (1.0 - AR_PHI * AR_PHI).sqrt() * normal(&mut rng);
    let ring_start = index as i64 * (rows_per_ring as i64 * STEP_SECONDS + RING_GAP_SECONDS);
    let mut displacement = 0.0;
    let mut rows = Vec::with_capacity(rows_per_ring);
    for j in 0..rows_per_ring {
        if j > 0 {
            e = AR_PHI * e + noise_sigma * normal(&mut rng);
        }
        let ramp = if j < rising {
            (j + 1) as f64 / (rising + 1) as f64
        } else {
            1.0
        };
        let v = ((mean + e) * ramp).max(0.0);
        let cutter = (1.2 + 0.01 * v + 0.02 * s * normal(&mut rng)).max(0.0);
        let torque = ((800.0 + 25.0 * g.ucs + 25.0 * v) * (1.0 + 0.08 * s * normal(&mut rng))).max(0.0);
        let total = ((20000.0 + 300.0 * g.ucs + 200.0 * v) * (1.0 + 0.08 * s * normal(&mut rng))).max(0.0);
        let thrust = (0.23 * total * (1.0 + 0.05 * s * normal(&mut rng))).max(0.0);
        displacement += v * STEP_SECONDS as f64 / 60.0;
        rows.push(ExcavationRecord {
            timestamp: ring_start + j as i64 * STEP_SECONDS,
            ring: g.ring,
            propulsion_speed: v,
            cutter_speed: cutter,
            cutter_torque: torque,
            total_propulsion: total,
            cutter_power: torque * cutter * 2.0 * std::f64::consts::PI / 60.0,
            displacement,
            propulsion_pressure: thrust / 144.0,
            propulsion_thrust: thrust,
            phase: if j < rising { Phase::Rising } else { Phase::Stable },
        });
    }
    rows
}

/// Telemetry for every geology ring, in ring order. Each ring draws from
/// its own ChaCha stream, so rings are generated in parallel.
pub fn gen_excavation(
    geo: &[GeologyRecord],
    rows_per_ring: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<ExcavationRecord>, SynthError> {
    if geo.is_empty() {
        return Err(SynthError::EmptyGeology);
    }
    if rows_per_ring < 2 {
        return Err(SynthError::InvalidConfig(format!(
            "rows_per_ring must be at least 2, got {rows_per_ring}"
        )));
    }
    if !(noise_sigma >= 0.0) {
        return Err(SynthError::InvalidConfig(format!(
            "noise_sigma must be non-negative, got {noise_sigma}"
        )));
    }
    let rings: Vec<Vec<ExcavationRecord>> = geo
        .par_iter()
        .enumerate()
        .map(|(i, g)| gen_ring(i, g, rows_per_ring, noise_sigma, seed))
        .collect();
    Ok(rings.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Adds `magnitude` channel standard deviations at the middle row of
    /// every covered window.
    Spike,
    /// Adds a ramp rising linearly from 0 to `magnitude` standard deviations.
    Drift,
    /// Holds the channel at the value it had just before the fault.
    StuckSensor,
    /// Reads zero.
    Dropout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaultSpec {
    pub kind: FaultKind,
    pub channel: Channel,
    pub start_window: usize,
    pub duration: usize,
    pub magnitude: f64,
}

/// Contents of `labels.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultLabels {
    pub window_len: usize,
    pub fault_windows: Vec<usize>,
    pub faults: Vec<FaultSpec>,
    /// Leading windows that contain no faults; the normal segment.
    pub normal_windows: usize,
    pub total_windows: usize,
}

/// Indices of stable rows, in order.
pub fn stable_rows(records: &[ExcavationRecord]) -> Vec<usize> {
    (0..records.len())
        .filter(|&i| records[i].phase.is_operating())
        .collect()
}

/// Number of complete windows over the stable rows.
pub fn window_count(records: &[ExcavationRecord], window_len: usize) -> usize {
    stable_rows(records).len() / window_len.max(1)
}

fn channel_std(records: &[ExcavationRecord], rows: &[usize], c: Channel) -> f64 {
    let n = rows.len() as f64;
    let mean = rows.iter().map(|&i| records[i].channel(c)).sum::<f64>() / n;
    let var = rows
        .iter()
        .map(|&i| (records[i].channel(c) - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    var.sqrt()
}

/// Applies `faults` to the stable-row windows of `records` and returns the
/// set of windows touched. Spike magnitudes are scaled by the channel's
/// standard deviation over all stable rows of the input.
pub fn inject_faults(
    records: &[ExcavationRecord],
    faults: &[FaultSpec],
    window_len: usize,
) -> Result<(Vec<ExcavationRecord>, BTreeSet<usize>), SynthError> {
    if window_len == 0 {
        return Err(SynthError::InvalidConfig("window_len must be positive".into()));
    }
    let rows = stable_rows(records);
    let available = rows.len() / window_len;
    let mut out = records.to_vec();
    let mut labels = BTreeSet::new();
    for (index, f) in faults.iter().enumerate() {
        let end = f.start_window + f.duration;
        if f.duration == 0 || end > available {
            return Err(SynthError::FaultOutOfBounds {
                index,
                start: f.start_window,
                end,
                available,
            });
        }
        let span = &rows[f.start_window * window_len..end * window_len];
        let std = channel_std(records, &rows, f.channel);
        match f.kind {
            FaultKind::Spike => {
                for w in span.chunks(window_len) {
                    *out[w[window_len / 2]].channel_mut(f.channel) += f.magnitude * std;
                }
            }
            FaultKind::Drift => {
                let last = (span.len() - 1).max(1) as f64;
                for (k, &i) in span.iter().enumerate() {
                    *out[i].channel_mut(f.channel) += f.magnitude * std * k as f64 / last;
                }
            }
            FaultKind::StuckSensor => {
                let before = span[0].checked_sub(1).unwrap_or(span[0]);
                let held = out[before].channel(f.channel);
                for &i in span {
                    *out[i].channel_mut(f.channel) = held;
                }
            }
            FaultKind::Dropout => {
                for &i in span {
                    *out[i].channel_mut(f.channel) = 0.0;
                }
            }
        }
        labels.extend(f.start_window..end);
    }
    Ok((out, labels))
}

/// How [`plan_faults`] lays out the default abnormal segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultPlan {
    /// Number of distinct faulty windows.
    pub count: usize,
    /// Trailing share of windows forming the abnormal segment.
    pub abnormal_fraction: f64,
    /// Channels faulted together in each faulty window.
    pub channels_per_window: usize,
    /// Size of spikes and drifts, in channel standard deviations.
    pub magnitude: f64,
    pub kinds: Vec<FaultKind>,
}

impl Default for FaultPlan {
    fn default() -> Self {
        Self {
            count: 114,
            abnormal_fraction: 0.4,
            channels_per_window: 3,
            magnitude: 6.0,
            kinds: vec![
                FaultKind::Drift,
                FaultKind::Dropout,
                FaultKind::Spike,
                FaultKind::StuckSensor,
            ],
        }
    }
}

/// First window of the abnormal segment.
pub fn abnormal_start(total_windows: usize, abnormal_fraction: f64) -> usize {
    total_windows - (total_windows as f64 * abnormal_fraction).floor() as usize
}

/// Picks `plan.count` distinct windows of the abnormal segment and, for
/// each, `plan.channels_per_window` distinct channels other than
/// propulsion speed. Kinds cycle through `plan.kinds` by window. Spikes and
/// drifts push away from the channel's median level, so a fault never
/// hides inside the normal range.
pub fn plan_faults(
    records: &[ExcavationRecord],
    window_len: usize,
    plan: &FaultPlan,
    seed: u64,
) -> Result<Vec<FaultSpec>, SynthError> {
    let total = window_count(records, window_len);
    let start = abnormal_start(total, plan.abnormal_fraction);
    let candidates: Vec<usize> = (start..total).collect();
    let faultable: Vec<Channel> = Channel::ALL[1..].to_vec();
    if plan.count > candidates.len() {
        return Err(SynthError::InvalidConfig(format!(
            "{} faulty windows requested, abnormal segment has {}",
            plan.count,
            candidates.len()
        )));
    }
    if plan.count > 0 && (plan.kinds.is_empty() || plan.channels_per_window == 0 || plan.channels_per_window > faultable.len()) {
        return Err(SynthError::InvalidConfig(
            "fault plan needs kinds and 1..=7 channels per window".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut windows = rand::seq::index::sample(&mut rng, candidates.len(), plan.count)
        .into_iter()
        .map(|i| candidates[i])
        .collect::<Vec<_>>();
    windows.sort_unstable();

    let rows = stable_rows(records);
    let medians: Vec<f64> = faultable
        .iter()
        .map(|&c| {
            let mut v: Vec<f64> = rows.iter().map(|&i| records[i].channel(c)).collect();
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        })
        .collect();

    let mut faults = Vec::with_capacity(plan.count * plan.channels_per_window);
    for (k, &w) in windows.iter().enumerate() {
        let kind = plan.kinds[k % plan.kinds.len()];
        let picks = rand::seq::index::sample(&mut rng, faultable.len(), plan.channels_per_window);
        let mut picks: Vec<usize> = picks.into_iter().collect();
        picks.sort_unstable();
        for ci in picks {
            let c = faultable[ci];
            let span = &rows[w * window_len..(w + 1) * window_len];
            let level = span.iter().map(|&i| records[i].channel(c)).sum::<f64>() / window_len as f64;
            let sign = if level > medians[ci] { -1.0 } else { 1.0 };
            faults.push(FaultSpec {
                kind,
                channel: c,
                start_window: w,
                duration: 1,
                magnitude: sign * plan.magnitude,
            });
        }
    }
    Ok(faults)
}

/// Settings of a full synthetic run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub rings: u32,
    pub rows_per_ring: usize,
    pub change_prob: f64,
    pub noise_sigma: f64,
    pub window_len: usize,
    pub faults: FaultPlan,
    pub regimes: Vec<GeologyRegime>,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            rings: 400,
            rows_per_ring: 50,
            change_prob: 0.1,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            window_len: 32,
            faults: FaultPlan::default(),
            regimes: default_regimes(),
            seed: 42,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub geology: Vec<GeologyRecord>,
    /// Telemetry with faults applied.
    pub excavation: Vec<ExcavationRecord>,
    /// The same telemetry before fault injection.
    pub excavation_clean: Vec<ExcavationRecord>,
    pub labels: FaultLabels,
}

/// Geology, clean telemetry, fault plan and injection, each stage seeded
/// from `cfg.seed`.
pub fn simulate(cfg: &SimConfig) -> Result<SimOutput, SynthError> {
    let geology = gen_geology(cfg.rings, &cfg.regimes, cfg.change_prob, cfg.seed)?;
    let clean = gen_excavation(&geology, cfg.rows_per_ring, cfg.noise_sigma, cfg.seed.wrapping_add(1))?;
    let faults = plan_faults(&clean, cfg.window_len, &cfg.faults, cfg.seed.wrapping_add(2))?;
    let (excavation, windows) = inject_faults(&clean, &faults, cfg.window_len)?;
    let total = window_count(&clean, cfg.window_len);
    let labels = FaultLabels {
        window_len: cfg.window_len,
        fault_windows: windows.into_iter().collect(),
        faults,
        normal_windows: abnormal_start(total, cfg.faults.abnormal_fraction),
        total_windows: total,
    };
    Ok(SimOutput {
        geology,
        excavation,
        excavation_clean: clean,
        labels,
    })
}
