use std::ffi::CStr;
use std::ptr;

use tbm_core::anomaly::{build_vae_model, score_windows, VaeModelConfig, Windows};
use tbm_core::checkpoint::Checkpoint;
use tbm_core::rate::{build_rate_model, predict_rate, RateModelConfig};
use tbm_core::tensor::{seeded_rng, Tensor};
use tbm_ffi::*;

use rand::Rng;

const HASH: &str = "abc123";

fn last_error() -> String {
    let p = tbm_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn rate_json() -> (String, tbm_core::rate::RateModel) {
    let cfg = RateModelConfig {
        window_len: 6,
        channels: vec![4, 4],
        attention_reduction: 2,
        ..Default::default()
    };
    let model = build_rate_model(&cfg, 3, 11).unwrap();
    (Checkpoint::from_rate(&model, HASH).to_json(), model)
}

fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = seeded_rng(seed);
    (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()
}

#[test]
fn rate_handle_predicts_like_the_library() {
    let (json, model) = rate_json();
    let mut h = ptr::null_mut();
    let s = unsafe { tbm_rate_model_load(json.as_ptr(), json.len(), HASH.as_ptr(), HASH.len(), &mut h) };
    assert_eq!(s, TbmStatus::Ok);
    assert!(tbm_last_error().is_null());

    let (mut f, mut w) = (0, 0);
    assert_eq!(unsafe { tbm_rate_model_dims(h, &mut f, &mut w) }, TbmStatus::Ok);
    assert_eq!((f, w), (3, 6));

    let x = uniform(5 * 3 * 6, 1);
    let mut out = [0.0; 5];
    let s = unsafe { tbm_rate_model_predict(h, x.as_ptr(), 5, 3, 6, out.as_mut_ptr()) };
    assert_eq!(s, TbmStatus::Ok);
    let want = predict_rate(&model, &Tensor::from_vec(vec![5, 3, 6], x.clone()).unwrap()).unwrap();
    assert_eq!(out.to_vec(), want);

    let s = unsafe { tbm_rate_model_predict(h, x.as_ptr(), 3, 5, 6, out.as_mut_ptr()) };
    assert_eq!(s, TbmStatus::ShapeMismatch);
    let s = unsafe { tbm_rate_model_predict(h, x.as_ptr(), 6, 3, 5, out.as_mut_ptr()) };
    assert_eq!(s, TbmStatus::ShapeMismatch);
    assert!(last_error().contains("window length"));
    unsafe { tbm_rate_model_free(h) };
}

#[test]
fn load_reports_bad_input() {
    let (json, _) = rate_json();
    let mut h = ptr::null_mut();
    let other = "fff";
    let s = unsafe { tbm_rate_model_load(json.as_ptr(), json.len(), other.as_ptr(), other.len(), &mut h) };
    assert_eq!(s, TbmStatus::ManifestMismatch);
    assert!(h.is_null());
    assert!(last_error().contains("fff"));

    let junk = b"{ nope";
    let s = unsafe { tbm_rate_model_load(junk.as_ptr(), junk.len(), ptr::null(), 0, &mut h) };
    assert_eq!(s, TbmStatus::ParseError);

    let mut a = ptr::null_mut();
    let s = unsafe { tbm_anomaly_model_load(json.as_ptr(), json.len(), ptr::null(), 0, &mut a) };
    assert_eq!(s, TbmStatus::InvalidArgument);

    let s = unsafe { tbm_rate_model_load(ptr::null(), 0, ptr::null(), 0, &mut h) };
    assert_eq!(s, TbmStatus::NullPointer);
    let s = unsafe { tbm_rate_model_load(json.as_ptr(), json.len(), ptr::null(), 0, ptr::null_mut()) };
    assert_eq!(s, TbmStatus::NullPointer);
    unsafe { tbm_rate_model_free(ptr::null_mut()) };
}

#[test]
fn anomaly_handle_scores_like_the_library() {
    let cfg = VaeModelConfig {
        seq_len: 4,
        lstm_hidden: 5,
        latent_dim: 2,
        decoder_hidden: 5,
        ..Default::default()
    };
    let model = build_vae_model(&cfg, 3, 2, 4).unwrap();
    let exc = uniform(6 * 4 * 3, 2);
    let geo = uniform(6 * 4 * 2, 3);
    let want = score_windows(&model, &Windows::new(4, 3, 2, exc.clone(), geo.clone(), vec![0; 6]).unwrap()).unwrap();
    let mut sorted = want.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold = sorted[3];
    let json = Checkpoint::from_anomaly(&model, threshold, HASH).to_json();

    let mut h = ptr::null_mut();
    let s = unsafe { tbm_anomaly_model_load(json.as_ptr(), json.len(), ptr::null(), 0, &mut h) };
    assert_eq!(s, TbmStatus::Ok);
    let (mut seq, mut de, mut dg, mut th) = (0, 0, 0, 0.0);
    assert_eq!(unsafe { tbm_anomaly_model_dims(h, &mut seq, &mut de, &mut dg, &mut th) }, TbmStatus::Ok);
    assert_eq!((seq, de, dg, th), (4, 3, 2, threshold));

    let mut scores = [0.0; 6];
    let mut flags = [9u8; 6];
    let s = unsafe { tbm_anomaly_model_score(h, exc.as_ptr(), geo.as_ptr(), 6, scores.as_mut_ptr(), flags.as_mut_ptr()) };
    assert_eq!(s, TbmStatus::Ok);
    assert_eq!(scores.to_vec(), want);
    assert_eq!(flags.iter().filter(|&&f| f == 1).count(), 2);
    for (f, s) in flags.iter().zip(&scores) {
        assert_eq!(*f == 1, *s > threshold);
    }

    let mut bad = exc.clone();
    bad[0] = 1.5;
    let s = unsafe { tbm_anomaly_model_score(h, bad.as_ptr(), geo.as_ptr(), 6, scores.as_mut_ptr(), ptr::null_mut()) };
    assert_eq!(s, TbmStatus::InvalidArgument);
    unsafe { tbm_anomaly_model_free(h) };
}

#[test]
fn kernels_match_closed_forms() {
    let x = [2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0];
    let mut z = [0.0; 8];
    let (mut mean, mut std) = (0.0, 0.0);
    assert_eq!(unsafe { tbm_zscore(x.as_ptr(), 8, z.as_mut_ptr(), &mut mean, &mut std) }, TbmStatus::Ok);
    assert_eq!(mean, 5.0);
    assert!((std - (32.0f64 / 7.0).sqrt()).abs() < 1e-12);
    assert!((z[0] + 3.0 / std).abs() < 1e-12);

    let mut y = [0.0; 8];
    assert_eq!(unsafe { tbm_minmax(x.as_ptr(), 8, y.as_mut_ptr()) }, TbmStatus::Ok);
    assert_eq!((y[0], y[7]), (0.0, 1.0));
    assert!((y[4] - 3.0 / 7.0).abs() < 1e-15);

    let flat = [3.0; 4];
    assert_eq!(unsafe { tbm_zscore(flat.as_ptr(), 4, z.as_mut_ptr(), ptr::null_mut(), ptr::null_mut()) }, TbmStatus::InvalidArgument);

    let (p, t) = ([0.5, -3.0], [0.0, 0.0]);
    let mut l = 0.0;
    assert_eq!(unsafe { tbm_smooth_l1(p.as_ptr(), t.as_ptr(), 2, &mut l) }, TbmStatus::Ok);
    assert!((l - (0.125 + 2.5) / 2.0).abs() < 1e-15);

    let (mu, lv) = ([1.0, 0.0], [0.0, 2f64.ln()]);
    let mut kl = 0.0;
    assert_eq!(unsafe { tbm_kl(mu.as_ptr(), lv.as_ptr(), 2, &mut kl) }, TbmStatus::Ok);
    assert!((kl - (0.5 + 0.5 * (1.0 - 2f64.ln()))).abs() < 1e-12);
}

#[test]
fn header_declares_the_interface() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/tbm.h")).unwrap();
    for name in [
        "TBM_H",
        "TBM_STATUS_OK",
        "TBM_STATUS_MANIFEST_MISMATCH",
        "typedef struct TbmRateModel TbmRateModel",
        "typedef struct TbmAnomalyModel TbmAnomalyModel",
        "tbm_last_error(void)",
        "tbm_rate_model_load(",
        "tbm_rate_model_predict(",
        "tbm_rate_model_free(",
        "tbm_anomaly_model_score(",
        "tbm_zscore(",
        "tbm_kl(",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"tbm.h\"\nint main(void) { TbmRateModel *m = 0; size_t f, w;\n\
         return tbm_rate_model_dims(m, &f, &w) == TBM_STATUS_NULL_POINTER ? 0 : 1; }\n",
    )
    .unwrap();
    let out = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .output()
        .expect("a C compiler on PATH");
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
