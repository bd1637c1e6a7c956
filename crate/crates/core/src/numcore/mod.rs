//! Dense matrices, a reverse-mode tape, and finite-difference checking.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{
    grad_check, relative_error, relative_error_with_floor, resolution_floor, GradCheckReport, Objective,
    FD_ROUNDOFF_FACTOR, REL_ERROR_FLOOR,
};
pub(crate) use matrix::hex_digest;
pub use matrix::Matrix;
pub use tape::{Activation, Gradients, Tape, Var};
