//! Central finite-difference gradient verification.
//!
//! The checker only ever evaluates a loss closure at perturbed parameter
//! values; it knows nothing about analytic backward passes, so it stays an
//! independent oracle for them.

use crate::store::ParameterStore;

/// Central difference `(f(θ+h) - f(θ-h)) / 2h` for one scalar entry.
pub fn central_diff<F: FnMut(&ParameterStore) -> f64>(
    store: &mut ParameterStore,
    name: &str,
    index: usize,
    h: f64,
    f: &mut F,
) -> f64 {
    let original = store.expect(name).data[index];
    store.expect_mut(name).data[index] = original + h;
    let plus = f(store);
    store.expect_mut(name).data[index] = original - h;
    let minus = f(store);
    store.expect_mut(name).data[index] = original;
    (plus - minus) / (2.0 * h)
}

/// Worst relative mismatch found by [`compare_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub checked: usize,
}

/// Symmetric relative error with an absolute floor for near-zero pairs.
///
/// The floor keeps the comparison meaningful where the true derivative is
/// essentially zero: central differences of an O(1) loss carry ~1e-9 of
/// cancellation noise, which no relative tolerance can rank.
pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-4);
    (a - b).abs() / denom
}

/// Compares analytic gradients against central differences for every entry
/// of every tensor accepted by `filter`. `grad_of` returns the analytic
/// gradient slice for a tensor name, or `None` to skip it.
pub fn compare_gradients<F, G>(
    store: &mut ParameterStore,
    h: f64,
    filter: impl Fn(&str) -> bool,
    grad_of: G,
    f: &mut F,
) -> GradCheckReport
where
    F: FnMut(&ParameterStore) -> f64,
    G: Fn(&str) -> Option<Vec<f64>>,
{
    compare_gradients_sampled(store, h, usize::MAX, filter, grad_of, f)
}

/// Like [`compare_gradients`] but probing at most `max_per_tensor` entries of
/// each tensor, on a deterministic stride covering the whole index range.
/// Large models stay checkable in seconds while every tensor is still hit.
pub fn compare_gradients_sampled<F, G>(
    store: &mut ParameterStore,
    h: f64,
    max_per_tensor: usize,
    filter: impl Fn(&str) -> bool,
    grad_of: G,
    f: &mut F,
) -> GradCheckReport
where
    F: FnMut(&ParameterStore) -> f64,
    G: Fn(&str) -> Option<Vec<f64>>,
{
    let names: Vec<String> = store.names().filter(|n| filter(n)).cloned().collect();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        checked: 0,
    };
    for name in names {
        let analytic = match grad_of(&name) {
            Some(g) => g,
            None => continue,
        };
        let n = analytic.len();
        let take = n.min(max_per_tensor);
        if take == 0 {
            continue;
        }
        for j in 0..take {
            // Stride sample with an index-dependent offset so consecutive
            // tensors probe different residues.
            let i = if take == n { j } else { (j * n / take + j * 131) % n };
            let fd = central_diff(store, &name, i, h, f);
            let e = rel_err(analytic[i], fd);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_tensor = name.clone();
                report.worst_index = i;
            }
        }
    }
    report
}
