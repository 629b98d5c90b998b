use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::graph::{Gradients, Graph, NodeId};
use super::params::Params;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor of the relative error, so coordinates with
    /// vanishing gradients are judged on an absolute scale.
    pub floor: f64,
    /// Coordinates checked per tensor; `None` checks every coordinate.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamError {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FdReport {
    pub per_param: Vec<ParamError>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of a scalar graph against central finite
/// differences. `build` must construct the same graph for any parameter
/// values and return the scalar output node.
pub fn finite_diff_check<F>(
    build: F,
    params: &Params,
    tolerance: f64,
    opts: &FdOptions,
) -> Result<FdReport>
where
    F: Fn(&mut Graph, &Params) -> Result<NodeId>,
{
    let analytic = |p: &Params| -> Result<Gradients> {
        let mut g = Graph::new();
        let out = build(&mut g, p)?;
        g.backward(out)
    };
    let loss = |p: &Params| -> Result<f64> {
        let mut g = Graph::new();
        let out = build(&mut g, p)?;
        Ok(g.value(out).item())
    };
    check_gradients(analytic, loss, params, tolerance, opts)
}

/// Same comparison with the analytic gradient supplied separately, so a
/// gradient rule can be checked independently of the tape.
pub fn check_gradients<A, L>(
    analytic: A,
    loss: L,
    params: &Params,
    tolerance: f64,
    opts: &FdOptions,
) -> Result<FdReport>
where
    A: Fn(&Params) -> Result<Gradients>,
    L: Fn(&Params) -> Result<f64>,
{
    let grads = analytic(params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work = params.clone();
    let mut per_param = Vec::new();

    for (name, t) in params.iter() {
        let n = t.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let g = grads.get(name);
        let mut worst: f64 = 0.0;
        for &i in &coords {
            let orig = t.data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + opts.step;
            let up = loss(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - opts.step;
            let down = loss(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * opts.step);
            let a = g.map_or(0.0, |g| g.data()[i]);
            worst = worst.max(relative_error(a, numeric, opts.floor));
        }
        per_param.push(ParamError {
            name: name.clone(),
            checked: coords.len(),
            max_rel_error: worst,
        });
    }

    let max_rel_error = per_param.iter().fold(0.0f64, |m, p| m.max(p.max_rel_error));
    Ok(FdReport {
        per_param,
        max_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}
