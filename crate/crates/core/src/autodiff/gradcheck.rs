//! Central-difference gradient oracle.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::ParamSet;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct FdOptions {
    pub epsilon: f64,
    /// Check at most this many randomly chosen coordinates per tensor.
    /// `None` checks every coordinate.
    pub coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-5,
            coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdWorst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst: Option<FdWorst>,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-12)
}

/// Compares the analytic gradient of `f` against central differences.
///
/// `f` receives one var per tensor in `params`, in order, and must return a
/// scalar. It has to be deterministic.
pub fn finite_diff_check<F>(f: F, params: &ParamSet, opts: &FdOptions) -> Result<FdReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    finite_diff_check_with(&f, &f, params, opts)
}

/// Like [`finite_diff_check`], but differentiates `analytic` on the tape and
/// takes central differences of `numeric`. The two must agree in gradient
/// at `params`, which lets a stop-gradient surrogate be checked against the
/// function whose gradient it is meant to produce.
pub fn finite_diff_check_with<A, N>(
    analytic: A,
    numeric: N,
    params: &ParamSet,
    opts: &FdOptions,
) -> Result<FdReport>
where
    A: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    N: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let f = analytic;
    if !(1e-7..=1e-3).contains(&opts.epsilon) {
        return Err(Error::InvalidValue(format!(
            "finite-difference epsilon {} outside [1e-7, 1e-3]",
            opts.epsilon
        )));
    }

    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars = params.bind(&tape);
        let loss = f(&tape, &vars)?;
        if !loss.item().is_finite() {
            return Err(Error::NonFinite {
                context: "loss at unperturbed parameters".into(),
            });
        }
        tape.backward(loss)?;
        vars.iter()
            .zip(params.tensors())
            .map(|(v, t)| v.grad().map_or_else(|| vec![0.0; t.numel()], |g| g.data().to_vec()))
            .collect()
    };

    let eval = |p: &ParamSet| -> Result<f64> {
        let tape = Tape::new();
        let vars = p.bind_frozen(&tape);
        Ok(numeric(&tape, &vars)?.item())
    };

    let mut work = params.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for p in 0..params.len() {
        let numel = params.tensors()[p].numel();
        let coords: Vec<usize> = match opts.coords_per_param {
            Some(k) if k < numel => {
                let mut c = index::sample(&mut rng, numel, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..numel).collect(),
        };
        for i in coords {
            let orig = params.tensors()[p].data()[i];
            work.tensors_mut()[p].data_mut()[i] = orig + opts.epsilon;
            let plus = eval(&work)?;
            work.tensors_mut()[p].data_mut()[i] = orig - opts.epsilon;
            let minus = eval(&work)?;
            work.tensors_mut()[p].data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("perturbed {}[{i}]", params.names()[p]),
                });
            }
            let numeric = (plus - minus) / (2.0 * opts.epsilon);
            let a = analytic[p][i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some(FdWorst {
                    param: params.names()[p].clone(),
                    index: i,
                    analytic: a,
                    numeric,
                });
            }
        }
    }
    Ok(report)
}
