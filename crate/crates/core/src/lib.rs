//! Numerical toolkit for stationary problems `F(x, Du, D2u) = lambda` in a
//! bounded domain with nonlinear oblique boundary condition `L(x, Du) = mu`:
//! the boundary ergodic cost `mu(lambda)`, the associated parabolic long-time
//! behaviour, and a reflected-diffusion Monte Carlo cross-check.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod domain;
pub mod evolution;
pub mod linalg;
pub mod models;
pub mod reflected_sde;
pub mod scheme;
pub mod stationary;
