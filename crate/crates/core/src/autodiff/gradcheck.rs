use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
    pub max_rel_error: f64,
    /// Coordinates compared.
    pub checked: usize,
    /// Coordinates whose `+-h` perturbation moved a non-smooth primitive to
    /// another branch (or changed the graph), where central differences say
    /// nothing about the derivative.
    pub skipped: usize,
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<(f64, u64)>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let root = f(&mut tape, store)?;
    let v = tape.scalar_value(root);
    if !v.is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    Ok((v, tape.kink_signature()))
}

/// Compares reverse-mode gradients of `f` against central differences on up
/// to `max_samples` randomly chosen trainable coordinates.
pub fn grad_check<F>(store: &mut ParamStore, h: f64, max_samples: usize, seed: u64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if h <= 0.0 || !h.is_finite() {
        return Err(Error::Precondition(format!("finite-difference step {h} must be positive")));
    }
    store.zero_grads();
    let signature = {
        let mut tape = Tape::new();
        let root = f(&mut tape, store)?;
        if !tape.scalar_value(root).is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        tape.backward_into(root, store)?;
        tape.kink_signature()
    };

    let coords: Vec<(ParamId, usize)> = store
        .ids()
        .filter(|&id| store.is_trainable(id))
        .flat_map(|id| (0..store.value(id).len()).map(move |i| (id, i)))
        .collect();
    let picked: Vec<(ParamId, usize)> = if coords.len() <= max_samples {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..max_samples).map(|_| coords[rng.gen_range(0..coords.len())]).collect()
    };

    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, skipped: 0 };
    for (id, i) in picked {
        let analytic = store.grad(id).data()[i];
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + h;
        let plus = evaluate(store, &f);
        store.value_mut(id).data_mut()[i] = orig - h;
        let minus = evaluate(store, &f);
        store.value_mut(id).data_mut()[i] = orig;
        let ((fp, sp), (fm, sm)) = (plus?, minus?);
        if sp != signature || sm != signature {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}
