use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |analytic|, |numeric|)` over probes.
    pub max_rel_error: f64,
    pub probes: usize,
    /// Worst coordinate as (tensor index, flat offset, analytic, numeric).
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares the tape gradient of the scalar returned by `f` against central
/// differences at `probes` coordinates drawn uniformly from all of `params`.
///
/// `f` receives a fresh graph and one trainable leaf per entry of `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], probes: usize, h: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<(Graph, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let (graph, vars, out) = eval(params)?;
    let grads = graph.backward(out);
    let analytic: Vec<Tensor> = params
        .iter()
        .zip(&vars)
        .map(|(p, &v)| grads.get(v).cloned().unwrap_or_else(|| p.zeros_like()))
        .collect();
    drop(grads);
    drop(graph);

    let total: usize = params.iter().map(Tensor::len).sum();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        probes: 0,
        worst: None,
    };
    if total == 0 {
        return Ok(report);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor> = params.to_vec();
    for _ in 0..probes {
        let mut flat = rng.gen_range(0..total);
        let mut which = 0;
        while flat >= work[which].len() {
            flat -= work[which].len();
            which += 1;
        }
        let orig = work[which].data()[flat];
        work[which].data_mut()[flat] = orig + h;
        let plus = eval(&work)?;
        let f_plus = plus.0.value(plus.2).item();
        drop(plus);
        work[which].data_mut()[flat] = orig - h;
        let minus = eval(&work)?;
        let f_minus = minus.0.value(minus.2).item();
        drop(minus);
        work[which].data_mut()[flat] = orig;

        let numeric = (f_plus - f_minus) / (2.0 * h);
        let a = analytic[which].data()[flat];
        let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        report.probes += 1;
        if err > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(err);
            report.worst = Some((which, flat, a, numeric));
        }
    }
    Ok(report)
}
