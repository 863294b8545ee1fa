//! Dense matrices, named parameters and a reverse-mode tape.

mod mat;
mod params;
pub mod tape;

pub use mat::{log_sum_exp, neg_log_sigmoid, sigmoid, softmax_in_place, Mat};
pub use params::{ParamId, ParamStore};
pub use tape::{rbf, Grads, Tape, Var, NO_ROW, STD_FLOOR};
