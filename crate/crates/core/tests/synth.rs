use std::collections::BTreeSet;

use tbm_core::preprocess::{Channel, ExcavationRecord, Phase};
use tbm_core::synth::*;

fn stable_windows(records: &[ExcavationRecord], len: usize) -> Vec<Vec<&ExcavationRecord>> {
    let rows: Vec<&ExcavationRecord> = records.iter().filter(|r| r.phase == Phase::Stable).collect();
    rows.chunks_exact(len).map(|c| c.to_vec()).collect()
}

#[test]
fn default_run_labels_114_windows_soundly() {
    let sim = simulate(&SimConfig::default()).unwrap();
    assert_eq!(sim.geology.len(), 400);
    assert_eq!(sim.excavation.len(), 400 * 50);
    assert_eq!(sim.labels.fault_windows.len(), 114);
    assert_eq!(sim.labels.total_windows, window_count(&sim.excavation_clean, 32));

    let labeled: BTreeSet<usize> = sim.labels.fault_windows.iter().copied().collect();
    assert!(labeled.iter().all(|&w| w >= sim.labels.normal_windows));
    let faulty = stable_windows(&sim.excavation, 32);
    let clean = stable_windows(&sim.excavation_clean, 32);
    for (w, (a, b)) in faulty.iter().zip(&clean).enumerate() {
        let differs = a
            .iter()
            .zip(b)
            .any(|(x, y)| Channel::ALL.iter().any(|&c| x.channel(c) != y.channel(c)));
        assert_eq!(differs, labeled.contains(&w), "window {w}");
    }
    // rows outside the stable windows are never touched
    let in_windows = faulty.len() * 32;
    let stable: Vec<usize> = (0..sim.excavation.len())
        .filter(|&i| sim.excavation[i].phase == Phase::Stable)
        .collect();
    let touched: BTreeSet<usize> = (0..sim.excavation.len())
        .filter(|&i| sim.excavation[i] != sim.excavation_clean[i])
        .collect();
    assert!(touched.iter().all(|i| stable[..in_windows].contains(i)));
}

#[test]
fn fault_kinds_behave_as_documented() {
    let geo = gen_geology(20, &default_regimes(), 0.2, 1).unwrap();
    let clean = gen_excavation(&geo, 50, 0.5, 2).unwrap();
    let c = Channel::CutterTorque;
    let fault = |kind, magnitude| FaultSpec {
        kind,
        channel: c,
        start_window: 3,
        duration: 2,
        magnitude,
    };
    let rows: Vec<usize> = (0..clean.len()).filter(|&i| clean[i].phase == Phase::Stable).collect();
    let span = &rows[3 * 16..5 * 16];

    let (out, labels) = inject_faults(&clean, &[fault(FaultKind::Dropout, 0.0)], 16).unwrap();
    assert_eq!(labels, BTreeSet::from([3, 4]));
    assert!(span.iter().all(|&i| out[i].channel(c) == 0.0));

    let (out, _) = inject_faults(&clean, &[fault(FaultKind::StuckSensor, 0.0)], 16).unwrap();
    let held = clean[span[0] - 1].channel(c);
    assert!(span.iter().all(|&i| out[i].channel(c) == held));

    let (out, _) = inject_faults(&clean, &[fault(FaultKind::Spike, 4.0)], 16).unwrap();
    let changed: Vec<usize> = span.iter().copied().filter(|&i| out[i] != clean[i]).collect();
    assert_eq!(changed, [span[8], span[24]]);

    let (out, _) = inject_faults(&clean, &[fault(FaultKind::Drift, 2.0)], 16).unwrap();
    let d: Vec<f64> = span.iter().map(|&i| out[i].channel(c) - clean[i].channel(c)).collect();
    assert_eq!(d[0], 0.0);
    assert!(d.windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn generation_is_seed_deterministic() {
    let cfg = SimConfig {
        rings: 80,
        ..Default::default()
    };
    let mut small = cfg.clone();
    small.faults.count = 20;
    assert_eq!(simulate(&small).unwrap(), simulate(&small).unwrap());
    let mut other = small.clone();
    other.seed += 1;
    assert_ne!(simulate(&small).unwrap().excavation, simulate(&other).unwrap().excavation);
}

#[test]
fn rising_phase_is_the_first_tenth_of_each_ring() {
    let geo = gen_geology(5, &default_regimes(), 0.5, 9).unwrap();
    let exc = gen_excavation(&geo, 50, 0.5, 9).unwrap();
    for ring in exc.chunks(50) {
        assert!(ring[..5].iter().all(|r| r.phase == Phase::Rising));
        assert!(ring[5..].iter().all(|r| r.phase == Phase::Stable));
    }
}
