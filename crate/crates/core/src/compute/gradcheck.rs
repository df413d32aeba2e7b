use rand::seq::index;

use super::{ComputeError, Graph, Grads, ParamId, ParamStore, Var};
use crate::seed;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen elements per parameter.
    pub max_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { eps: 1e-5, tol: 1e-4, max_per_param: None, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// (parameter name, element, analytic, numeric) at the worst element.
    pub worst: Option<(String, usize, f64, f64)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tol
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
}

/// Compares backward gradients of the scalar built by `f` against central
/// finite differences, perturbing parameters of `store` in place (restored
/// afterwards). `f` must be deterministic: random draws have to be supplied
/// as explicit inputs. Outputs of `stop_gradient` are held at their
/// unperturbed values during the finite-difference passes, which is exactly
/// the function whose derivative backward computes.
pub fn grad_check<F, E>(store: &mut ParamStore, ids: &[ParamId], cfg: GradCheckConfig, mut f: F) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Graph) -> Result<Var, E>,
    E: From<ComputeError>,
{
    let mut grads = Grads::new(store);
    let stopped = {
        let mut g = Graph::new(store);
        let loss = f(&mut g)?;
        if g.is_stochastic() {
            return Err(ComputeError::UnfrozenNoise.into());
        }
        g.backward(loss, &mut grads)?;
        g.stopped_values().to_vec()
    };
    let mut eval = |store: &ParamStore| -> Result<f64, E> {
        let mut g = Graph::inference(store);
        g.replay_stopped(stopped.clone());
        let v = f(&mut g)?;
        Ok(g.scalar(v))
    };
    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None, tol: cfg.tol };
    for &id in ids {
        let n = store.value(id).numel();
        let elems: Vec<usize> = match cfg.max_per_param {
            Some(m) if m < n => {
                let mut rng = seed::rng(cfg.seed, id.index() as u64);
                let mut e = index::sample(&mut rng, n, m).into_vec();
                e.sort_unstable();
                e
            }
            _ => (0..n).collect(),
        };
        for e in elems {
            let orig = store.value(id).data()[e];
            store.value_mut(id).data_mut()[e] = orig + cfg.eps;
            let plus = eval(store);
            store.value_mut(id).data_mut()[e] = orig - cfg.eps;
            let minus = eval(store);
            store.value_mut(id).data_mut()[e] = orig;
            let numeric = (plus? - minus?) / (2.0 * cfg.eps);
            let analytic = grads.get(id)[e];
            let rel = relative_error(analytic, numeric);
            report.checked += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some((store.get(id).name.clone(), e, analytic, numeric));
            }
        }
    }
    Ok(report)
}
