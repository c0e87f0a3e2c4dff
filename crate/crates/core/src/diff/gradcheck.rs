use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, Mode, Var};
use super::params::Params;
use crate::error::{Error, Result};

/// Outcome of comparing analytic adjoints against central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat coordinate of the worst disagreement.
    pub worst: Option<(String, usize)>,
    pub coordinates_checked: usize,
    /// Coordinates whose one-sided slopes disagree, i.e. the probe interval
    /// straddles a ReLU or max-pool kink. These are not scored.
    pub kinks_skipped: usize,
}

const KINK_TOLERANCE: f64 = 1e-2;

/// Denominator floor. Central differences of an O(1) loss carry roundoff
/// near 1e-11, so slopes below this are compared almost absolutely.
const SCALE_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(SCALE_FLOOR)
}

fn eval_loss<F>(params: &Params, f: &F, seed: u64) -> Result<f64>
where
    F: Fn(&mut Graph, &Params) -> Result<Var>,
{
    let mut g = Graph::new(Mode::Eval, seed);
    let loss = f(&mut g, params)?;
    Ok(g.value(loss).data()[0])
}

/// Checks `f`'s parameter adjoints at up to `coordinates` sampled scalars.
///
/// Sampling cycles through the parameter tensors so every tensor is probed
/// when `coordinates >= params.len()`; when the model has fewer scalars than
/// requested, every scalar is checked.
pub fn grad_check<F>(params: &Params, f: F, coordinates: usize, seed: u64, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &Params) -> Result<Var>,
{
    if params.is_empty() {
        return Err(Error::Contract("grad_check needs at least one parameter".into()));
    }
    let mut g = Graph::new(Mode::Eval, seed);
    let loss = f(&mut g, params)?;
    g.backward(loss)?;
    let analytic = g.param_grads(params);
    drop(g);

    let mut coords: Vec<(usize, usize)> = Vec::new();
    if params.num_scalars() <= coordinates {
        for id in 0..params.len() {
            coords.extend((0..params.tensor(id).len()).map(|i| (id, i)));
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        for s in 0..coordinates {
            let id = s % params.len();
            coords.push((id, rng.random_range(0..params.tensor(id).len())));
        }
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates_checked: 0,
        kinks_skipped: 0,
    };
    let base = eval_loss(params, &f, seed)?;
    let mut probe = params.clone();
    for (id, i) in coords {
        let orig = probe.tensor(id).data()[i];
        probe.tensor_mut(id).data_mut()[i] = orig + step;
        let up = eval_loss(&probe, &f, seed)?;
        probe.tensor_mut(id).data_mut()[i] = orig - step;
        let down = eval_loss(&probe, &f, seed)?;
        probe.tensor_mut(id).data_mut()[i] = orig;
        let (fwd, bwd) = ((up - base) / step, (base - down) / step);
        if relative_error(fwd, bwd) > KINK_TOLERANCE {
            report.kinks_skipped += 1;
            continue;
        }
        report.coordinates_checked += 1;
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(analytic[id].data()[i], numeric);
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((params.name(id).to_string(), i));
        }
    }
    Ok(report)
}
