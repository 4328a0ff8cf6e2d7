//! Central finite-difference checks (h = 1e-5) of every layer and of both
//! full models, at ten random points each. Each case returns its worst
//! relative error.

use rand::Rng;
use tbm_core::anomaly::{build_vae_model, kl_graph, reparameterize_graph, standard_normal, VaeModelConfig};
use tbm_core::rate::{build_rate_model, RateModelConfig};
use tbm_core::tensor::gradcheck::check_params;
use tbm_core::tensor::{seeded_rng, Graph, LstmState, LstmWeights, ParamId, ParamSet, Tensor, Var};

const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;
const POINTS: u64 = 10;

fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Reduces any output to a scalar with fixed random weights, so every
/// output element gets its own upstream gradient.
fn project(g: &mut Graph, out: Var, seed: u64) -> Var {
    let shape = g.shape(out).to_vec();
    let w = random(&mut seeded_rng(seed), &shape, -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(out, w).unwrap();
    g.sum(p)
}

/// Worst relative error over all coordinates.
fn grad_error<F>(params: &mut ParamSet, loss: F) -> f64
where
    F: Fn(&ParamSet, &mut Graph) -> tbm_core::tensor::Result<Var>,
{
    let r = check_params(params, H, None, loss).unwrap();
    assert!(r.checked > 0, "nothing checked");
    r.max_rel_error
}

/// Worst error of `build` over the random points.
fn layer<B, F>(build: B) -> f64
where
    B: Fn(&mut rand_chacha::ChaCha8Rng) -> (ParamSet, F),
    F: Fn(&ParamSet, &mut Graph) -> tbm_core::tensor::Result<Var>,
{
    (0..POINTS)
        .map(|point| {
            let mut rng = seeded_rng(1000 + point);
            let (mut params, loss) = build(&mut rng);
            grad_error(&mut params, loss)
        })
        .fold(0.0, f64::max)
}

pub fn linear() -> f64 {
    layer(|rng| {
        let mut p = ParamSet::new();
        let x = p.insert("x", random(rng, &[3, 4], -1.0, 1.0));
        let w = p.insert("w", random(rng, &[4, 2], -1.0, 1.0));
        let b = p.insert("b", random(rng, &[2], -1.0, 1.0));
        (p, move |ps: &ParamSet, g: &mut Graph| {
            let (x, w, b) = (g.param(ps, x), g.param(ps, w), g.param(ps, b));
            let y = g.linear(x, w, b)?;
            Ok(project(g, y, 1))
        })
    })
}

pub fn conv1d() -> f64 {
    layer(|rng| {
        let mut p = ParamSet::new();
        let x = p.insert("x", random(rng, &[2, 3, 7], -1.0, 1.0));
        let k = p.insert("k", random(rng, &[4, 3, 3], -1.0, 1.0));
        let b = p.insert("b", random(rng, &[4], -1.0, 1.0));
        (p, move |ps: &ParamSet, g: &mut Graph| {
            let (x, k, b) = (g.param(ps, x), g.param(ps, k), g.param(ps, b));
            let y = g.conv1d(x, k, b)?;
            Ok(project(g, y, 2))
        })
    })
}

pub fn elementwise_activations() -> f64 {
    layer(|rng| {
        let mut p = ParamSet::new();
        // keep clear of the ReLU and clamp kinks by more than h
        let x = p.insert("x", {
            let t = random(rng, &[12], 0.05, 2.0);
            let signs: Vec<f64> = (0..12).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
            Tensor::from_vec(vec![12], t.data().iter().zip(&signs).map(|(a, s)| a * s).collect()).unwrap()
        });
        let y = p.insert("y", random(rng, &[12], -1.0, 1.0));
        (p, move |ps: &ParamSet, g: &mut Graph| {
            let (x, y) = (g.param(ps, x), g.param(ps, y));
            let parts = [
                g.relu(x),
                g.sigmoid(x),
                g.tanh(x),
                g.exp(x),
                g.clamp(x, -1.0 + 0.025, 1.0 + 0.025),
                g.scale(x, -1.7),
                g.add_scalar(x, 0.3),
            ];
            let mut acc = g.mul(x, y)?;
            let d = g.sub(x, y)?;
            acc = g.add(acc, d)?;
            for (i, part) in parts.into_iter().enumerate() {
                let s = project(g, part, 10 + i as u64);
                let s = g.reshape(s, vec![1])?;
                let m = g.mean(acc);
                acc = g.add(s, m)?;
            }
            Ok(g.sum(acc))
        })
    })
}

pub fn shape_ops() -> f64 {
    layer(|rng| {
        let mut p = ParamSet::new();
        let a = p.insert("a", random(rng, &[2, 3, 5], -1.0, 1.0));
        let b = p.insert("b", random(rng, &[2, 3, 2], -1.0, 1.0));
        (p, move |ps: &ParamSet, g: &mut Graph| {
            let (a, b) = (g.param(ps, a), g.param(ps, b));
            let c = g.concat_last(a, b)?;
            let s = g.slice_last(c, 2, 4)?;
            let m = g.mean_last(s);
            let r = g.reshape(m, vec![6])?;
            let l1 = project(g, r, 3);
            let l2 = project(g, c, 4);
            Ok(g.add(l1, l2)?)
        })
    })
}

pub fn softmax_and_channel_attention() -> f64 {
    layer(|rng| {
        let mut p = ParamSet::new();
        let x = p.insert("x", random(rng, &[2, 4, 6], -1.0, 1.0));
        let w1 = p.insert("w1", random(rng, &[4, 3], -1.0, 1.0));
        let w2 = p.insert("w2", random(rng, &[3, 4], -1.0, 1.0));
        let z = p.insert("z", random(rng, &[3, 5], -2.0, 2.0));
        (p, move |ps: &ParamSet, g: &mut Graph| {
            let (x, w1, w2, z) = (g.param(ps, x), g.param(ps, w1), g.param(ps, w2), g.param(ps, z));
            let y = g.channel_attention(x, w1, w2)?;
            let sm = g.softmax(z);
            let a = project(g, y, 5);
            let b = project(g, sm, 6);
            Ok(g.add(a, b)?)
        })
    })
}

pub fn dropout_with_fixed_mask() -> f64 {
    layer(|rng| {
        let mut p = ParamSet::new();
        let x = p.insert("x", random(rng, &[3, 8], -1.0, 1.0));
        (p, move |ps: &ParamSet, g: &mut Graph| {
            let x = g.param(ps, x);
            let y = g.dropout(x, 0.3, true, &mut seeded_rng(77))?;
            Ok(project(g, y, 7))
        })
    })
}

pub fn lstm_step_over_a_sequence() -> f64 {
    layer(|rng| {
        let (d, h, b) = (3, 4, 2);
        let mut p = ParamSet::new();
        let xs: Vec<ParamId> = (0..3)
            .map(|t| p.insert(format!("x{t}"), random(rng, &[b, d], -1.0, 1.0)))
            .collect();
        let wih = p.insert("w_ih", random(rng, &[d, 4 * h], -0.8, 0.8));
        let whh = p.insert("w_hh", random(rng, &[h, 4 * h], -0.8, 0.8));
        let bias = p.insert("bias", random(rng, &[4 * h], -0.5, 0.5));
        let h0 = p.insert("h0", random(rng, &[b, h], -0.5, 0.5));
        let c0 = p.insert("c0", random(rng, &[b, h], -0.5, 0.5));
        (p, move |ps: &ParamSet, g: &mut Graph| {
            let w = LstmWeights {
                w_ih: g.param(ps, wih),
                w_hh: g.param(ps, whh),
                bias: g.param(ps, bias),
            };
            let mut s = LstmState {
                hidden: g.param(ps, h0),
                cell: g.param(ps, c0),
            };
            for &x in &xs {
                let x = g.param(ps, x);
                s = g.lstm_step(x, s, &w)?;
            }
            let a = project(g, s.hidden, 8);
            let c = project(g, s.cell, 9);
            Ok(g.add(a, c)?)
        })
    })
}

pub fn losses() -> f64 {
    layer(|rng| {
        let mut p = ParamSet::new();
        // differences spread over both Smooth-L1 branches
        let pred = p.insert("pred", random(rng, &[2, 5], -3.0, 3.0));
        let logits = p.insert("logits", random(rng, &[2, 5], -3.0, 3.0));
        let target: Vec<f64> = (0..10).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y = random(rng, &[2, 5], -0.5, 0.5);
        let weights: Vec<f64> = (0..5).map(|_| rng.gen_range(0.5..2.0)).collect();
        (p, move |ps: &ParamSet, g: &mut Graph| {
            let pr = g.param(ps, pred);
            let yv = g.constant(y.clone());
            let s = g.smooth_l1(pr, yv)?;
            let l = g.param(ps, logits);
            let x_hat = g.sigmoid(l);
            let b = g.bce(x_hat, &target, &weights)?;
            Ok(g.add(s, b)?)
        })
    })
}

pub fn kl_and_reparameterization() -> f64 {
    layer(|rng| {
        let mut p = ParamSet::new();
        let mu = p.insert("mu", random(rng, &[3, 4], -1.5, 1.5));
        let lv = p.insert("log_var", random(rng, &[3, 4], -2.0, 2.0));
        let eps = standard_normal(rng, vec![3, 4]);
        (p, move |ps: &ParamSet, g: &mut Graph| {
            let (mu, lv) = (g.param(ps, mu), g.param(ps, lv));
            let kl = kl_graph(g, mu, lv).map_err(|e| tbm_core::tensor::TensorError::ShapeMismatch(e.to_string()))?;
            let z = reparameterize_graph(g, mu, lv, &eps)
                .map_err(|e| tbm_core::tensor::TensorError::ShapeMismatch(e.to_string()))?;
            let zs = project(g, z, 12);
            Ok(g.add(kl, zs)?)
        })
    })
}

pub fn full_rate_model() -> f64 {
    let cfg = RateModelConfig {
        window_len: 9,
        channels: vec![4, 6],
        kernel: 3,
        attention_reduction: 2,
        dropout_p: 0.2,
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for point in 0..POINTS {
        let model = build_rate_model(&cfg, 5, point).unwrap();
        let mut rng = seeded_rng(500 + point);
        let x = random(&mut rng, &[3, 5, 9], -2.0, 2.0);
        let y = random(&mut rng, &[3, 1], -1.0, 1.0);
        let mut params = model.params.clone();
        let e = grad_error(&mut params, |ps, g| {
            let xv = g.constant(x.clone());
            let out = model
                .forward(g, ps, xv, true, &mut seeded_rng(point))
                .map_err(|e| tbm_core::tensor::TensorError::ShapeMismatch(e.to_string()))?;
            let yv = g.constant(y.clone());
            g.smooth_l1(out, yv)
        });
        worst = worst.max(e);
    }
    worst
}

pub fn full_vae_model() -> f64 {
    let cfg = VaeModelConfig {
        seq_len: 5,
        lstm_hidden: 4,
        latent_dim: 2,
        decoder_hidden: 5,
        feature_weights: vec![1.0, 2.0, 0.5],
        ..Default::default()
    };
    let mut worst = 0.0f64;
    for point in 0..POINTS {
        let model = build_vae_model(&cfg, 3, 2, point).unwrap();
        let mut rng = seeded_rng(700 + point);
        let batch = 2;
        let exc: Vec<f64> = (0..batch * 5 * 3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let geo: Vec<f64> = (0..batch * 5 * 2).map(|_| rng.gen_range(0.0..1.0)).collect();
        let eps = standard_normal(&mut rng, vec![batch, 2]);
        let mut params = model.params.clone();
        let e = grad_error(&mut params, |ps, g| {
            let (total, _, _) = model
                .vae_loss_graph(g, ps, &exc, &geo, batch, &eps)
                .map_err(|e| tbm_core::tensor::TensorError::ShapeMismatch(e.to_string()))?;
            Ok(total)
        });
        worst = worst.max(e);
    }
    worst
}

pub const CASES: &[(&str, fn() -> f64)] = &[
    ("linear", linear),
    ("conv1d", conv1d),
    ("elementwise_activations", elementwise_activations),
    ("shape_ops", shape_ops),
    ("softmax_and_channel_attention", softmax_and_channel_attention),
    ("dropout_with_fixed_mask", dropout_with_fixed_mask),
    ("lstm_step_over_a_sequence", lstm_step_over_a_sequence),
    ("losses", losses),
    ("kl_and_reparameterization", kl_and_reparameterization),
    ("full_rate_model", full_rate_model),
    ("full_vae_model", full_vae_model),
];
