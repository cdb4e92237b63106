//! Minimal dense-tensor math with analytic gradients for every layer used by
//! the matchers and the rescoring head.

pub mod gradcheck;
pub mod layers;
pub mod matrix;
pub mod tape;

pub use gradcheck::grad_check;
pub use layers::{
    attention_forward, linear_forward, mlp_forward, Attention, FeedForward, Linear,
    TransformerLayer,
};
pub use matrix::{softmax_row, Matrix};
pub use tape::{NllTerm, Tape, Var};
