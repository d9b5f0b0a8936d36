//! Dense 64-bit linear algebra, reverse-mode tape and finite-difference audit.

pub mod fd;
pub mod kernels;
mod matrix;
mod params;
mod real;
pub mod tape;

pub use matrix::RealMatrix;
pub use params::{inner, ParamVector};
pub use real::{Dual, Real};
pub use tape::{Tape, Var};
