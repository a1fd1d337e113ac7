//! Finite-difference verification of analytic gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Trainable, Var};

/// Finite-difference stencil.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(w+h) − f(w−h)) / 2h`
    Central,
    /// Fourth-order central difference over `w±h`, `w±2h`.
    Central4,
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub stencil: Stencil,
    pub threshold: f64,
    /// Parameters with more elements than this are checked on a seeded subsample of that size.
    pub max_elements: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            stencil: Stencil::Central,
            threshold: 1e-4,
            max_elements: 10_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub frozen: bool,
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub params: Vec<ParamReport>,
    pub max_rel_err: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// `|a − f| / max(|a|, |f|, 1e−8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval<F>(f: &F, store: &ParamStore) -> Result<f64>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::inference();
    let v = f(&mut g, store)?;
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(Error::NonScalarLoss(t.shape().to_vec()));
    }
    Ok(t.data()[0])
}

/// Compares analytic gradients of `f` against finite differences for each
/// element of `params`. Parameters outside `trainable` are frozen: they are
/// reported with error 0 and not perturbed.
pub fn grad_check<F>(
    store: &ParamStore,
    params: &[ParamId],
    trainable: &Trainable,
    f: F,
    cfg: &GradCheckConfig,
) -> Result<GradReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(1e-6..=1e-4).contains(&cfg.step) {
        return Err(Error::BadStep(cfg.step));
    }
    let active: Vec<ParamId> = params.iter().copied().filter(|id| trainable.contains(*id)).collect();
    let mut graph = Graph::with_trainable(Trainable::only(active.iter().copied()));
    let loss = f(&mut graph, store)?;
    let grads = graph.backward(loss)?;
    let analytic: std::collections::HashMap<ParamId, crate::numerics::Tensor> =
        grads.params(&graph).into_iter().collect();

    let first = eval(&f, store)?;
    let second = eval(&f, store)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministicFunction { first, second });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = store.clone();
    let mut reports = Vec::with_capacity(params.len());
    let h = cfg.step;
    for &id in params {
        let name = store.name(id).to_string();
        if !trainable.contains(id) {
            reports.push(ParamReport {
                name,
                checked: 0,
                max_rel_err: 0.0,
                frozen: true,
            });
            continue;
        }
        let numel = store.get(id).numel();
        let elements: Vec<usize> = if numel > cfg.max_elements {
            let mut v = index::sample(&mut rng, numel, cfg.max_elements).into_vec();
            v.sort_unstable();
            v
        } else {
            (0..numel).collect()
        };
        let zero = crate::numerics::Tensor::zeros(1, 1);
        let grad = analytic.get(&id);
        let mut worst: f64 = 0.0;
        for &k in &elements {
            let orig = store.get(id).data()[k];
            let mut at = |delta: f64| -> Result<f64> {
                work.get_mut(id).data_mut()[k] = orig + delta;
                let v = eval(&f, &work);
                work.get_mut(id).data_mut()[k] = orig;
                v
            };
            let numeric = match cfg.stencil {
                Stencil::Central => (at(h)? - at(-h)?) / (2.0 * h),
                // Differences first, so equal evaluations give exactly zero.
                Stencil::Central4 => {
                    let near = at(h)? - at(-h)?;
                    let far = at(2.0 * h)? - at(-2.0 * h)?;
                    (8.0 * near - far) / (12.0 * h)
                }
            };
            let a = grad.map_or(zero.data()[0], |g| g.data()[k]);
            worst = worst.max(relative_error(a, numeric));
        }
        reports.push(ParamReport {
            name,
            checked: elements.len(),
            max_rel_err: worst,
            frozen: false,
        });
    }
    let max_rel_err = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    Ok(GradReport {
        params: reports,
        max_rel_err,
        threshold: cfg.threshold,
        passed: max_rel_err < cfg.threshold,
    })
}
