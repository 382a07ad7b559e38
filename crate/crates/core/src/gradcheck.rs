//! Central finite-difference checks of parameter gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::nn::{ParamId, ParamStore, Session};

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub sampling: Sampling,
    pub seed: u64,
    /// Batch-norm layers use batch statistics when set, running statistics
    /// otherwise.
    pub train_mode: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sampling {
    /// Up to this many entries from every learnable tensor.
    PerTensor(usize),
    /// This many scalars drawn uniformly from all learnable entries.
    Total(usize),
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_tol: 1e-7,
            sampling: Sampling::PerTensor(6),
            seed: 0,
            train_mode: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Mismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub mismatches: Vec<Mismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.mismatches.is_empty()
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} entries checked, max rel error {:.3e}, {} mismatches",
            self.checked,
            self.max_rel_error,
            self.mismatches.len()
        )?;
        for m in self.mismatches.iter().take(5) {
            write!(
                f,
                "\n  {}[{}]: analytic {:.6e} numeric {:.6e}",
                m.param, m.index, m.analytic, m.numeric
            )?;
        }
        Ok(())
    }
}

/// Compare the analytic gradient of `loss` (built in a training session)
/// against central differences at sampled learnable entries. An entry
/// passes when the absolute error is within `abs_tol` or the relative error
/// within `rel_tol`. `loss` must be deterministic in the parameters.
pub fn check_param_gradients<F>(store: &ParamStore, cfg: &GradCheckConfig, loss: F) -> GradCheckReport
where
    F: Fn(&Session) -> Var,
{
    let analytic = {
        let s = session(store, cfg.train_mode);
        let l = loss(&s);
        s.param_grads(l)
    };
    let eval = |st: &ParamStore| {
        let s = session(st, cfg.train_mode);
        let l = loss(&s);
        s.value(l).item()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let ids: Vec<ParamId> = store.learnable_ids().collect();
    let mut probes: Vec<(ParamId, usize)> = Vec::new();
    match cfg.sampling {
        Sampling::PerTensor(m) => {
            for &id in &ids {
                let n = store.get(id).numel();
                if n <= m {
                    probes.extend((0..n).map(|i| (id, i)));
                } else {
                    probes.extend(sample(&mut rng, n, m).into_iter().map(|i| (id, i)));
                }
            }
        }
        Sampling::Total(m) => {
            let sizes: Vec<usize> = ids.iter().map(|&id| store.get(id).numel()).collect();
            let total: usize = sizes.iter().sum();
            let mut flat = sample(&mut rng, total, m.min(total)).into_vec();
            flat.sort_unstable();
            let mut base = 0;
            let mut k = 0;
            for (&id, &n) in ids.iter().zip(&sizes) {
                while k < flat.len() && flat[k] < base + n {
                    probes.push((id, flat[k] - base));
                    k += 1;
                }
                base += n;
            }
        }
    }
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for (id, i) in probes {
        let grad = analytic.iter().find(|(g, _)| *g == id).map(|(_, t)| t);
        let orig = store.get(id).data()[i];
        work.get_mut(id).data_mut()[i] = orig + cfg.step;
        let up = eval(&work);
        work.get_mut(id).data_mut()[i] = orig - cfg.step;
        let down = eval(&work);
        work.get_mut(id).data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * cfg.step);
        let a = grad.map_or(0.0, |g| g.data()[i]);
        let err = (a - numeric).abs();
        report.checked += 1;
        let scale = a.abs().max(numeric.abs());
        let rel = if scale > 0.0 { err / scale } else { 0.0 };
        report.max_rel_error = report.max_rel_error.max(rel);
        if err > cfg.abs_tol && rel > cfg.rel_tol {
            report.mismatches.push(Mismatch {
                param: store.entry(id).name.clone(),
                index: i,
                analytic: a,
                numeric,
            });
        }
    }
    report
}

fn session(store: &ParamStore, train: bool) -> Session<'_> {
    if train {
        Session::train(store)
    } else {
        Session::frozen(store)
    }
}

/// Add `N(0, std²)` noise to every learnable parameter, moving a freshly
/// initialised model off exact symmetries (zero biases, unit BN scales).
pub fn jitter(store: &mut ParamStore, std: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in store.learnable_ids().collect::<Vec<_>>() {
        let t = store.get_mut(id);
        let noise = crate::Tensor::rand_normal(t.shape(), std, &mut rng);
        t.add_assign(&noise);
    }
}
