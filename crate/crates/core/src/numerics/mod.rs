//! Dense tensors with reverse-mode differentiation, sized for single-video
//! forward/backward passes.

mod tape;
mod tensor;

pub use tape::{Gradients, Tape, Var};
pub use tensor::{conv1d, exp_clipped, sigmoid, topk_indices, Padding, Tensor, EXP_CLAMP};

/// Central-difference gradient `(f(x+h) - f(x-h)) / 2h` for every coordinate.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let plus = f(&probe);
            probe[i] = orig - step;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps near-zero coordinates
/// from turning round-off into large relative errors.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}
