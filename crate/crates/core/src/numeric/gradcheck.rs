//! Central finite-difference verification of tape gradients.

use super::params::{ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::Result;

/// Denominator floor of [`relative_error`]. Entries whose true gradient is
/// smaller than this are compared in absolute terms, since the central
/// difference itself carries roundoff of order `eps * |f| / step`.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckEntry {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GradCheckEntry> {
        self.entries.iter().filter(|e| e.rel_error >= self.tolerance)
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

/// Compares the tape gradient of the scalar built by `f` against
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every entry of the selected parameters
/// (all parameters when `only` is `None`). Parameter values are restored
/// afterwards; `grad` slots are left untouched.
pub fn grad_check<F>(
    store: &mut ParamStore,
    only: Option<&[ParamId]>,
    step: f64,
    tolerance: f64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &ParamStore) -> Result<Var>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    let grads = tape.backward(loss)?;

    let ids: Vec<ParamId> = match only {
        Some(ids) => ids.to_vec(),
        None => store.iter().map(|(id, _)| id).collect(),
    };

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, store)?;
        Ok(t.scalar(l))
    };

    let mut entries = Vec::new();
    for id in ids {
        let n = store.value(id).len();
        for i in 0..n {
            let original = store.value(id).data()[i];
            store.get_mut(id).value.data_mut()[i] = original + step;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = original - step;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[i] = original;

            let numeric = (plus - minus) / (2.0 * step);
            let analytic = grads.get(id).map_or(0.0, |g| g.data()[i]);
            entries.push(GradCheckEntry {
                param: store.get(id).name.clone(),
                index: i,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric),
            });
        }
    }
    Ok(GradCheckReport { tolerance, entries })
}
