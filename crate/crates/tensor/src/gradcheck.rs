//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;

use crate::error::{invalid, Result, TensorError};
use crate::params::{Bound, ParamSet};
use crate::rng;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter name, flat index)` of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates sampled per parameter tensor; `None` checks all of them.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-3,
            coords_per_param: Some(6),
            seed: 0,
        }
    }
}

/// Compares the analytic gradient of `f` with central differences.
///
/// Error per coordinate is `|a − cd| / max(|a|, |cd|, 1e-8)`; the report
/// carries the maximum over sampled coordinates.
pub fn grad_check<T, F>(params: &ParamSet<T>, f: F, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &Bound) -> Result<Var>,
{
    if !(1e-4..=1e-2).contains(&opts.eps) {
        return Err(invalid("grad_check", format!("eps {} outside [1e-4, 1e-2]", opts.eps)));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let loss = f(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;

    let eval = |p: &ParamSet<T>| -> Result<f64> {
        let mut t = Tape::new();
        let b = p.bind(&mut t);
        let l = f(&mut t, &b)?;
        Ok(t.value(l).item().f64())
    };

    let mut rng = rng::substream(opts.seed, "grad_check");
    let mut work = params.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (id, name, tensor) in params.iter() {
        let n = tensor.numel();
        let analytic: Vec<f64> = match grads.raw(bound[id]) {
            Some(g) => g.iter().map(|v| v.f64()).collect(),
            None => vec![0.0; n],
        };
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in coords {
            let a = analytic[i];
            if !a.is_finite() {
                return Err(TensorError::NonFiniteGradient {
                    param: name.to_string(),
                    index: i,
                });
            }
            let orig = tensor.data()[i];
            work.get_mut(id).data_mut()[i] = orig + T::of(opts.eps);
            let plus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig - T::of(opts.eps);
            let minus = eval(&work)?;
            work.get_mut(id).data_mut()[i] = orig;
            let cd = (plus - minus) / (2.0 * opts.eps);
            let rel = (a - cd).abs() / a.abs().max(cd.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((name.to_string(), i));
                }
            }
        }
    }
    Ok(report)
}
