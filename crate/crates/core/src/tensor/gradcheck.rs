//! Central finite differences against the reverse-mode gradient.

use rand::seq::index::sample;

use super::params::ParamStore;
use super::tape::{Tape, Var};
use super::{Result, Tensor, TensorError};

#[derive(Clone, Copy, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Tensors with more elements than this are checked on a seeded random
    /// subsample of exactly this many elements.
    pub max_elements: usize,
    pub seed: u64,
    /// Elements whose absolute error is at or below this are counted as
    /// checked but never reported as worst. Guards gradients so small that
    /// the finite difference is dominated by round-off.
    pub atol: f64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_elements: 200,
            seed: 0,
            atol: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Parameter name and flat index of the worst element.
    pub worst: Option<(String, usize)>,
    /// Analytic and finite-difference values at the worst element.
    pub worst_values: (f64, f64),
    pub max_abs_error: f64,
    /// Largest analytic gradient magnitude seen, for scale.
    pub max_abs_grad: f64,
}

pub fn rel_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8)
}

/// Checks a scalar function of plain input tensors.
pub fn gradcheck<F>(inputs: &[Tensor], f: F, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let ids: Vec<_> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| store.add(format!("input{i}"), t.clone()))
        .collect();
    gradcheck_store(
        &store,
        |tape, s| {
            let vars: Vec<Var> = ids.iter().map(|&id| tape.param(s, id)).collect();
            f(tape, &vars)
        },
        opts,
    )
}

/// Checks a scalar function of every parameter in `store`.
pub fn gradcheck_store<F>(store: &ParamStore, f: F, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    if tape.value(out).len() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "gradcheck",
            left: tape.shape(out).to_vec(),
            right: vec![1],
        });
    }
    let analytic = tape.backward(out)?.param_grads(&tape, store);
    drop(tape);

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::inference();
        let o = f(&mut t, s)?;
        Ok(t.value(o).item())
    };

    let mut rng = crate::rng::seeded(opts.seed);
    let mut work = store.clone();
    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
        worst_values: (0.0, 0.0),
        max_abs_error: 0.0,
        max_abs_grad: 0.0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.get(id).len();
        let idx: Vec<usize> = if n > opts.max_elements {
            let mut v = sample(&mut rng, n, opts.max_elements).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..n).collect()
        };
        for j in idx {
            let x0 = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = x0 + opts.eps;
            let fp = eval(&work)?;
            work.get_mut(id).data_mut()[j] = x0 - opts.eps;
            let fm = eval(&work)?;
            work.get_mut(id).data_mut()[j] = x0;
            let fd = (fp - fm) / (2.0 * opts.eps);
            let ad = analytic[id.index()].as_ref().map_or(0.0, |g| g[j]);
            let e = if (ad - fd).abs() <= opts.atol { 0.0 } else { rel_error(ad, fd) };
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max((ad - fd).abs());
            report.max_abs_grad = report.max_abs_grad.max(ad.abs());
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(e);
                report.worst = Some((store.name(id).to_string(), j));
                report.worst_values = (ad, fd);
            }
        }
    }
    Ok(report)
}
