//! Central finite-difference checks for analytic gradients.
//!
//! The numeric side only ever evaluates the forward pass, so it stays
//! independent of the backward rules it is checking.

use super::{Graph, ParamId, ParamSet, Result, Var};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst: Option<(String, usize)>,
}

/// Relative error with an absolute floor so that gradients that are zero
/// on both sides compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares the analytic gradient of `loss` with central differences of
/// step `h` on the coordinates selected by `coords` (all when `None`).
///
/// `loss` must build a fresh graph from the given parameters and return its
/// scalar loss node; it is called `1 + 2 * coordinates` times and must be
/// deterministic.
pub fn check_params<F>(
    params: &mut ParamSet,
    h: f64,
    coords: Option<&[(ParamId, usize)]>,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamSet, &mut Graph) -> Result<Var>,
{
    params.zero_grad();
    let mut g = Graph::new();
    let l = loss(params, &mut g)?;
    g.backward(l)?;
    params.accumulate_grads(&g);

    let all: Vec<(ParamId, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..params.len())
                .flat_map(|p| {
                    let n = params.get(ParamId(p)).tensor.numel();
                    (0..n).map(move |i| (ParamId(p), i))
                })
                .collect();
            &all
        }
    };

    let eval = |params: &ParamSet| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss(params, &mut g)?;
        Ok(g.item(l).expect("scalar loss"))
    };

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst: None,
    };
    for &(id, i) in coords {
        let analytic = params
            .get(id)
            .tensor
            .grad()
            .map_or(0.0, |grad| grad[i]);
        let orig = params.get(id).tensor.data()[i];
        params.get_mut(id).tensor.data_mut()[i] = orig + h;
        let up = eval(params)?;
        params.get_mut(id).tensor.data_mut()[i] = orig - h;
        let down = eval(params)?;
        params.get_mut(id).tensor.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= report.max_rel_error {
                report.worst = Some((params.get(id).name.clone(), i));
            }
        }
    }
    params.zero_grad();
    Ok(report)
}
