//! Central-difference gradient checking in 64-bit.

use super::graph::{Graph, Mode, Var};
use super::params::ParameterStore;
use crate::error::Result;

/// Denominator floor for the relative error of near-zero gradients.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    /// `max|analytic - numeric| / max(max|analytic|, max|numeric|, 1e-6)`.
    pub rel_err: f64,
    pub analytic_max: f64,
    pub numeric_max: f64,
    pub finite: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub params: Vec<ParamCheck>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.params
            .iter()
            .map(|p| if p.finite { p.rel_err } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.finite && p.rel_err <= self.tolerance)
    }

    pub fn worst(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

/// Compares reverse-mode gradients of `loss` with central differences for
/// every updatable parameter of `store` that `loss` reads (parameters that
/// never reach the tape cannot influence it and are skipped). `loss` is evaluated on a
/// fresh [`Mode::GradCheck`] graph each time, so it must be deterministic.
pub fn gradcheck<F>(
    store: &ParameterStore<f64>,
    epsilon: f64,
    tolerance: f64,
    loss: F,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph<f64>, &ParameterStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParameterStore<f64>| -> Result<f64> {
        let mut g = Graph::new(Mode::GradCheck, 0);
        let l = loss(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let mut g = Graph::new(Mode::GradCheck, 0);
    let l = loss(&mut g, store)?;
    let grads = g.backward(l)?.into_map();

    let mut probe = store.clone();
    let mut params = Vec::new();
    for (name, p) in store.iter() {
        if !p.updates() {
            continue;
        }
        let Some(analytic) = grads.get(name).cloned() else {
            continue;
        };
        let mut numeric = vec![0.0; p.value.len()];
        let mut finite = true;
        for (i, slot) in numeric.iter_mut().enumerate() {
            let orig = p.value.data()[i];
            probe.get_mut(name)?.value.data_mut()[i] = orig + epsilon;
            let up = eval(&probe)?;
            probe.get_mut(name)?.value.data_mut()[i] = orig - epsilon;
            let down = eval(&probe)?;
            probe.get_mut(name)?.value.data_mut()[i] = orig;
            *slot = (up - down) / (2.0 * epsilon);
            finite &= slot.is_finite();
        }
        finite &= analytic.all_finite();
        let analytic_max = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let numeric_max = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let diff = analytic
            .data()
            .iter()
            .zip(&numeric)
            .fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        let rel_err = diff / analytic_max.max(numeric_max).max(REL_ERR_FLOOR);
        params.push(ParamCheck {
            name: name.clone(),
            rel_err,
            analytic_max,
            numeric_max,
            finite,
        });
    }
    Ok(GradcheckReport { params, tolerance })
}
