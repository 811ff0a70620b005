//! Finite-difference gradient checking.
//!
//! Used by the layer unit tests and the acceptance suite: analytic gradients
//! must agree with central differences of the loss under small perturbations
//! of individual parameter scalars.

use super::{ParamId, ParamStore};

/// Read one scalar of a parameter tensor by flat (row-major) index.
pub fn get_scalar(store: &ParamStore, id: ParamId, flat: usize) -> f64 {
    store.val(id).as_slice().expect("standard layout")[flat]
}

/// Overwrite one scalar of a parameter tensor by flat index.
pub fn set_scalar(store: &mut ParamStore, id: ParamId, flat: usize, v: f64) {
    store.val_mut(id).as_slice_mut().expect("standard layout")[flat] = v;
}

/// Central difference `(loss(p+h) - loss(p-h)) / 2h` for one scalar,
/// restoring the original value afterwards.
pub fn central_diff(
    store: &mut ParamStore,
    id: ParamId,
    flat: usize,
    h: f64,
    loss: &mut dyn FnMut(&ParamStore) -> f64,
) -> f64 {
    let orig = get_scalar(store, id, flat);
    set_scalar(store, id, flat, orig + h);
    let up = loss(store);
    set_scalar(store, id, flat, orig - h);
    let down = loss(store);
    set_scalar(store, id, flat, orig);
    (up - down) / (2.0 * h)
}

/// Relative error with a floor on the denominator.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Agreement test used across the crate: relative error below `rel_tol`, or
/// both values negligibly small in absolute terms.
pub fn grad_close(analytic: f64, numeric: f64, rel_tol: f64) -> bool {
    (analytic - numeric).abs() < 1e-8 || rel_err(analytic, numeric) < rel_tol
}
