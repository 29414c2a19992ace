//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::params::{Bound, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Denominator floor for relative error, so that exactly-zero gradients
/// compare on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub tensor: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    pub tensors: usize,
    pub max_rel_err: f64,
    pub worst: Option<Mismatch>,
}

/// Compares analytic gradients of `loss_fn` against central differences with
/// step `h` on up to `per_tensor` randomly chosen entries of every trainable
/// tensor in `store`.
pub fn check_param_gradients<F>(
    store: &ParamStore,
    loss_fn: F,
    h: f64,
    per_tensor: usize,
    rng: &mut impl Rng,
) -> Result<GradReport>
where
    F: Fn(&ParamStore, &mut Tape, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let loss = loss_fn(store, &mut tape, &bound)?;
    tape.backward(loss)?;
    let analytic: Vec<Option<Vec<f64>>> = bound
        .grads(&tape)
        .into_iter()
        .map(|g| g.map(<[f64]>::to_vec))
        .collect();
    drop(tape);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let b = s.bind(&mut t);
        let l = loss_fn(s, &mut t, &b)?;
        Ok(t.value(l).item())
    };

    let mut report = GradReport::default();
    let mut work = store.clone();
    for (k, id) in store.ids().enumerate() {
        let t = store.get(id);
        if !t.requires_grad || t.numel() == 0 {
            continue;
        }
        report.tensors += 1;
        let picks = sample(rng, t.numel(), per_tensor.min(t.numel())).into_vec();
        for idx in picks {
            let orig = t.data()[idx];
            work.get_mut(id).data_mut()[idx] = orig + h;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[idx] = orig - h;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[idx] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[k].as_ref().map_or(0.0, |g| g[idx]);
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(Mismatch {
                    tensor: store.name(id).to_string(),
                    index: idx,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
