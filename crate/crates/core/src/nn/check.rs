use crate::error::Result;
use crate::io::SeededRng;

use super::graph::{Graph, Var};
use super::params::ParamStore;

/// Settings for [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub eps: f64,
    /// Coordinates compared; every coordinate when the model has fewer.
    pub samples: usize,
    pub seed: u64,
    /// Builds training-mode graphs with this dropout seed.
    pub dropout_seed: Option<u64>,
    /// Coordinates where both gradients are below this magnitude are
    /// skipped and replaced by further samples: central differences cannot
    /// resolve them against the round-off of an O(1) loss.
    pub resolvable: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        Self { eps: 1e-5, samples: 64, seed: 0, dropout_seed: None, resolvable: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates passed over as below the resolvable magnitude.
    pub skipped: usize,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
}

/// Relative error used by the checker.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares reverse-mode gradients with central finite differences on
/// sampled parameter coordinates. `build` must construct the same scalar
/// loss every time it is called. Straight-through offsets recorded in the
/// base pass are replayed in the perturbed passes, so the check runs on the
/// surrogate the gradient is defined for.
pub fn grad_check<F>(params: &ParamStore<f64>, build: F, cfg: GradCheck) -> Result<GradCheckReport>
where
    F: for<'a> Fn(&mut Graph<'a, f64>) -> Result<Var>,
{
    fn graph(p: &ParamStore<f64>, dropout_seed: Option<u64>) -> Graph<'_, f64> {
        match dropout_seed {
            Some(s) => Graph::training(p, s),
            None => Graph::new(p),
        }
    }
    let mut base = graph(params, cfg.dropout_seed);
    let loss = build(&mut base)?;
    let grads = base.backward(loss)?;
    let offsets = base.ste_offsets().clone();

    let mut coords: Vec<(String, usize)> =
        params.iter().flat_map(|(name, t)| (0..t.len()).map(move |i| (name.to_string(), i))).collect();
    if coords.len() > cfg.samples {
        SeededRng::new(cfg.seed).shuffle(&mut coords);
    }

    let eval = |name: &str, i: usize, delta: f64| -> Result<f64> {
        let mut p = params.clone();
        p.get_mut(name)?.data_mut()[i] += delta;
        let mut g = graph(&p, cfg.dropout_seed).with_ste_offsets(offsets.clone());
        let l = build(&mut g)?;
        Ok(g.value(l).item())
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0, worst: None };
    for (name, i) in coords {
        if report.checked == cfg.samples {
            break;
        }
        let analytic = grads.param(&name).map(|g| g.data()[i]).unwrap_or(0.0);
        let numeric = (eval(&name, i, cfg.eps)? - eval(&name, i, -cfg.eps)?) / (2.0 * cfg.eps);
        if analytic.abs().max(numeric.abs()) < cfg.resolvable {
            report.skipped += 1;
            continue;
        }
        let err = rel_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((name, i));
        }
    }
    Ok(report)
}
