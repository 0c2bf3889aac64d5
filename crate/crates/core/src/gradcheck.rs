//! Central finite-difference check of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

pub const FD_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub probes: usize,
    /// Parameter name and flat index of the worst probe.
    pub worst: Option<(String, usize)>,
}

/// Compare tape gradients with central differences on sampled coordinates.
///
/// Probes cycle over the parameter tensors so every tensor is visited when
/// `probes >= store.len()`. The relative error of one probe is
/// `|a − b| / max(|a|, |b|, 1e-8)`.
pub fn grad_check<F>(loss_fn: F, store: &ParamStore<f64>, probes: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
{
    if store.is_empty() {
        return contract("grad_check needs at least one parameter");
    }
    let mut g = Graph::new();
    let loss = loss_fn(&mut g, store)?;
    let grads = g.backward(loss)?;

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let l = loss_fn(&mut g, s)?;
        Ok(g.value(l).item())
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: 0,
        worst: None,
    };
    for p in 0..probes {
        let id = ParamId(p % store.len());
        let n = store.get(id).len();
        let j = rng.random_range(0..n);
        let analytic = grads.param(id).map_or(0.0, |t| t.data()[j]);
        let orig = store.get(id).data()[j];
        work.get_mut(id).data_mut()[j] = orig + FD_STEP;
        let up = eval(&work)?;
        work.get_mut(id).data_mut()[j] = orig - FD_STEP;
        let down = eval(&work)?;
        work.get_mut(id).data_mut()[j] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let denom = analytic.abs().max(numeric.abs()).max(1e-8);
        let rel = (analytic - numeric).abs() / denom;
        report.probes += 1;
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel.max(report.max_rel_error);
            report.worst = Some((store.name(id).to_string(), j));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::Linear;
    use crate::params::Initializer;
    use crate::tensor::Tensor;

    #[test]
    fn linear_layer_gradients_are_exact() {
        let mut store = ParamStore::<f64>::new();
        let lin = Linear::new(&mut Initializer::new(&mut store, 3), "lin", 4, 3);
        let x = Tensor::<f64>::from_fn(&[5, 4], |i| ((i as f64) * 0.7).sin());
        let report = grad_check(
            |g, s| {
                let xv = g.constant(x.clone());
                let y = lin.forward(g, s, xv)?;
                let sq = g.mul(y, y)?;
                g.mean(sq)
            },
            &store,
            24,
            1,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }
}
