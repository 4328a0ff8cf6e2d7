use std::collections::BTreeSet;

use proptest::prelude::*;
use tbm_core::anomaly::*;
use tbm_core::checkpoint::Checkpoint;
use tbm_core::preprocess::{preprocess, PreprocessConfig, Task};
use tbm_core::synth::{simulate, SimConfig};
use tbm_core::tensor::Tensor;

fn t(v: &[f64]) -> Tensor {
    Tensor::from_vec(vec![v.len()], v.to_vec()).unwrap()
}

fn tiny() -> VaeModelConfig {
    VaeModelConfig {
        seq_len: 8,
        lstm_hidden: 6,
        latent_dim: 3,
        decoder_hidden: 6,
        pretrain_epochs: 1,
        train_epochs: 2,
        ..Default::default()
    }
}

fn windows(cfg: &VaeModelConfig) -> (Windows, AnomalySplits, BTreeSet<usize>) {
    let mut sim_cfg = SimConfig {
        rings: 30,
        window_len: cfg.seq_len,
        seed: 21,
        ..Default::default()
    };
    sim_cfg.faults.count = 8;
    let sim = simulate(&sim_cfg).unwrap();
    let splits = AnomalySplits::new(sim.labels.total_windows, sim.labels.normal_windows).unwrap();
    let pcfg = PreprocessConfig {
        task: Task::Anomaly,
        fit_rows: Some(splits.fit_rows(cfg.seq_len)),
        ..Default::default()
    };
    let ds = preprocess(&sim.geology, &sim.excavation, &pcfg, None).unwrap();
    let w = make_anomaly_windows(&ds, cfg.seq_len).unwrap();
    assert_eq!(w.len(), sim.labels.total_windows);
    (w, splits, sim.labels.fault_windows.iter().copied().collect())
}

proptest! {
    #[test]
    fn kl_is_non_negative_and_matches_the_closed_form(
        mu in prop::collection::vec(-6.0f64..6.0, 1..8),
        seed in prop::collection::vec(-LOG_VAR_BOUND..LOG_VAR_BOUND, 8),
    ) {
        let lv = &seed[..mu.len()];
        let kl = kl_loss(&LatentDistribution { mu: t(&mu), log_var: t(lv) });
        let oracle: f64 = mu.iter().zip(lv).map(|(m, l)| 0.5 * (m * m + l.exp() - 1.0 - l)).sum();
        prop_assert!(kl >= 0.0);
        prop_assert!((kl - oracle).abs() <= 1e-9 * oracle.max(1.0));
    }

    #[test]
    fn nearest_rank_threshold_bounds_the_flag_share(
        scores in prop::collection::vec(0.0f64..5.0, 1..300),
        q in 0.5f64..0.999,
    ) {
        let th = calibrate_threshold(&scores, q).unwrap();
        prop_assert!(scores.contains(&th));
        let above = scores.iter().filter(|&&s| s > th).count() as f64;
        prop_assert!(above <= (1.0 - q) * scores.len() as f64 + 1e-9);
        let lower = calibrate_threshold(&scores, q - 0.4).unwrap();
        prop_assert!(lower <= th);
    }
}

#[test]
fn weighted_bce_matches_a_direct_sum() {
    let x_hat = [0.2, 0.9, 0.5, 0.7];
    let x = [0.0, 1.0, 0.3, 0.6];
    let w = [2.0, 0.5];
    let m = |v: &[f64]| Tensor::from_vec(vec![2, 2], v.to_vec()).unwrap();
    let got = bce_loss(&m(&x_hat), &m(&x), &w).unwrap();
    let want = x_hat
        .iter()
        .zip(&x)
        .enumerate()
        .map(|(i, (p, y))| -w[i % 2] * (y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
        .sum::<f64>()
        / 4.0;
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn splits_partition_the_windows() {
    let s = AnomalySplits::new(150, 100).unwrap();
    assert_eq!((s.train.len(), s.valid.len(), s.test_normal.len(), s.abnormal.len()), (70, 20, 10, 50));
    let all: BTreeSet<usize> = [&s.train, &s.valid, &s.test_normal, &s.abnormal].into_iter().flatten().copied().collect();
    assert_eq!(all, (0..150).collect());
    let labeled: BTreeSet<usize> = [100, 120, 149].into();
    let held = s.held_out_normal(&labeled);
    assert_eq!(held.len(), 10 + 47);
    assert!(held.is_disjoint(&labeled));
    assert_eq!(s.fit_rows(32), 70 * 32);
    assert!(AnomalySplits::new(10, 11).is_err());
}

#[test]
fn rates_count_set_overlap() {
    let labeled: BTreeSet<usize> = [1, 2, 3, 4].into();
    let normal: BTreeSet<usize> = (10..30).collect();
    let flagged: BTreeSet<usize> = [2, 3, 4, 10, 50].into();
    assert_eq!(detection_rate(&labeled, &flagged).unwrap(), 0.75);
    assert_eq!(false_positive_rate(&normal, &flagged).unwrap(), 0.05);
    assert!(detection_rate(&BTreeSet::new(), &flagged).is_err());
}

#[test]
fn trained_model_scores_deterministically_and_survives_a_checkpoint() {
    let cfg = tiny();
    let (w, splits, labeled) = windows(&cfg);
    let fit = fit_anomaly_model(&cfg, &w, &splits).unwrap();
    assert_eq!(fit.report.pretrain_loss.len(), 1);
    assert_eq!(fit.report.total_loss.len(), 2);

    let a = score_windows(&fit.model, &w).unwrap();
    let b = score_windows(&fit.model, &w).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(a.iter().all(|s| s.is_finite() && *s >= 0.0));

    // a window scores the same alone as in a batch
    let picks = [0, 5, w.len() - 1];
    let sub = score_windows(&fit.model, &w.subset(&picks)).unwrap();
    for (k, &i) in picks.iter().enumerate() {
        assert!((sub[k] - a[i]).abs() < 1e-12);
    }

    let valid: Vec<f64> = splits.valid.iter().map(|&i| a[i]).collect();
    assert_eq!(fit.threshold, calibrate_threshold(&valid, cfg.threshold_quantile).unwrap());

    let ck = Checkpoint::from_json(&Checkpoint::from_anomaly(&fit.model, fit.threshold, "m").to_json()).unwrap();
    let (model, threshold) = ck.to_anomaly_model().unwrap();
    assert_eq!(threshold.to_bits(), fit.threshold.to_bits());
    let verdicts = detect(&model, threshold, &w).unwrap();
    for (v, s) in verdicts.iter().zip(&a) {
        assert_eq!(v.score.to_bits(), s.to_bits());
        assert_eq!(v.is_anomaly, *s > threshold);
    }
    let flagged: BTreeSet<usize> = verdicts.iter().filter(|v| v.is_anomaly).map(|v| v.window_index).collect();
    let rate = detection_rate(&labeled, &flagged).unwrap();
    assert!((0.0..=1.0).contains(&rate));

    let mut csv = Vec::new();
    write_verdicts(&mut csv, &verdicts).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert_eq!(text.lines().next().unwrap(), "window_index,start_timestamp,score,threshold,is_anomaly");
    assert_eq!(text.lines().count(), w.len() + 1);
}

#[test]
fn out_of_range_windows_are_rejected() {
    assert!(Windows::new(2, 1, 1, vec![0.5, 1.5], vec![0.0, 0.0], vec![0]).is_err());
    assert!(Windows::new(2, 1, 1, vec![0.5], vec![0.0, 0.0], vec![0]).is_err());
    assert!(VaeModelConfig { latent_dim: 99, ..tiny() }.validate().is_err());
}

/// Bernoulli KL between target `x` and prediction `p`, clamped like the loss.
fn bernoulli_kl(x: f64, p: f64) -> f64 {
    let c = |v: f64| v.clamp(1e-7, 1.0 - 1e-7);
    let (p, q) = (c(p), c(x));
    x * (q.ln() - p.ln()) + (1.0 - x) * ((1.0 - q).ln() - (1.0 - p).ln())
}

#[test]
fn score_is_weighted_excess_bce_of_the_mean_reconstruction() {
    let cfg = VaeModelConfig {
        feature_weights: vec![2.0, 0.5, 1.0],
        ..tiny()
    };
    let model = build_vae_model(&cfg, 3, 2, 4).unwrap();
    let n = 5;
    let (se, sg) = (8 * 3, 8 * 2);
    let exc: Vec<f64> = (0..n * se).map(|i| ((i * 37 % 101) as f64) / 100.0).collect();
    let geo: Vec<f64> = (0..n * sg).map(|i| ((i * 13 % 29) as f64) / 28.0).collect();
    let w = Windows::new(8, 3, 2, exc.clone(), geo.clone(), (0..n as i64).collect()).unwrap();
    let got = score_windows(&model, &w).unwrap();
    for k in 0..n {
        let x = Tensor::from_vec(vec![8, 3], exc[k * se..(k + 1) * se].to_vec()).unwrap();
        let g = Tensor::from_vec(vec![8, 2], geo[k * sg..(k + 1) * sg].to_vec()).unwrap();
        let recon = decode(&encode(&x, &g, &model).unwrap().mu, &model).unwrap();
        let want = x
            .data()
            .iter()
            .zip(recon.data())
            .enumerate()
            .map(|(i, (&x, &p))| cfg.feature_weights[i % 3] * bernoulli_kl(x, p))
            .sum::<f64>()
            / se as f64;
        assert!((got[k] - want).abs() < 1e-12, "{} vs {want}", got[k]);
        assert!(got[k] >= 0.0);
    }
}

#[test]
fn default_weights_scale_with_the_window_size() {
    let cfg = tiny();
    assert_eq!(cfg.weights(3).unwrap(), vec![24.0; 3]);
    assert!(VaeModelConfig { feature_weights: vec![1.0; 2], ..tiny() }.weights(3).is_err());
}
