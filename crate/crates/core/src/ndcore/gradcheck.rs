//! Central finite-difference gradient checking.
//!
//! Only forward values are used here, so a check is independent of the
//! backward rules it validates.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ParamStore, Tape, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst per-parameter relative error over gradient vectors (Euclidean
    /// norms): `|a - n| / max(|a|, |n|, 1e-3 * |A|)`, where `|A|` is the norm
    /// of the whole analytic gradient. The floor keeps parameters whose true
    /// gradient is zero (e.g. attention key biases) from measuring only
    /// finite-difference rounding noise.
    pub max_rel_error: f64,
    pub worst_param: String,
    pub checked_scalars: usize,
}

/// Compare analytic gradients of `f` against central differences with
/// step `h` for every trainable parameter in `store`.
pub fn check_gradients<F>(store: &mut ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        Ok(tape.value(loss).data()[0])
    };

    let global = norm(analytic.iter().flat_map(|(_, g)| g.iter().copied()));
    let floor = (1e-3 * global).max(1e-12);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked_scalars: 0,
    };
    for id in ids {
        let n = store.value(id).len();
        let mut numeric = vec![0.0; n];
        for i in 0..n {
            let orig = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + h;
            let up = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig - h;
            let down = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = orig;
            numeric[i] = (up - down) / (2.0 * h);
        }
        let zeros = vec![0.0; n];
        let a = analytic.get(id).unwrap_or(&zeros);
        let diff = norm(a.iter().zip(&numeric).map(|(x, y)| x - y));
        let scale = norm(a.iter().copied()).max(norm(numeric.iter().copied()));
        let rel = diff / scale.max(floor);
        if rel >= report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = store.get(id).name.clone();
        }
        report.checked_scalars += n;
    }
    Ok(report)
}

fn norm(it: impl Iterator<Item = f64>) -> f64 {
    it.map(|v| v * v).sum::<f64>().sqrt()
}

/// Tensor of i.i.d. `N(0, std^2)` entries.
pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}
