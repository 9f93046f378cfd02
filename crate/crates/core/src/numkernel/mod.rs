//! Dense matrices, seeded randomness and reverse-mode gradients.

mod gradcheck;
mod matrix;
mod rng;
mod tape;

pub use gradcheck::{gradient_check, relative_error, GradCheckReport, ParamCheck, REL_DENOM_FLOOR};
pub use matrix::{exact_sum, row_softmax, safe_ln, sigmoid, sigmoid_scalar, Matrix, LOG_FLOOR};
pub use rng::Rng;
pub use tape::{Gradients, NamedMatrix, ParamId, ParamStore, Tape, Var, SHIFT_EPS, SUM_GUARD};

/// Xavier-uniform weights: entries uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Matrix::from_fn(fan_in, fan_out, |_, _| rng.uniform_range(-bound, bound))
}
