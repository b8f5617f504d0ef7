//! Small-amplitude time-periodic solutions of the completely resonant wave
//! equation `u_tt − u_xx + f(x,u) = 0` on (0,π) with Dirichlet conditions.
//!
//! The solver follows a Lyapunov-Schmidt splitting `u = v₁ + v₂ + w`:
//! a contraction for the infinite-dimensional kernel tail `v₂`, a Nash-Moser
//! Newton scheme on nested Galerkin spaces for the range component `w`, and a
//! finite-dimensional variational bifurcation problem for `v₁`.

pub mod bifurcation;
pub mod cantor;
pub mod cli;
pub mod config;
pub mod continuation;
pub mod error;
pub mod field;
pub mod grid;
pub(crate) mod iteration;
pub mod linearized;
pub mod nash_moser;
pub mod nonlinearity;
pub mod pipeline;
pub mod q2;

pub use error::{Error, Result};
