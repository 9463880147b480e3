//! Contraction-certified modular neural control.
//!
//! A latent model `ẏ = f(y, u, t)` is split by [`transform`] into scalar
//! subsystems coupled one way only. Each subsystem gets a sign-constrained
//! tanh policy from [`policy`], whose Jacobian margins [`verifier`] checks
//! pointwise and along simulated trajectories. [`envs`] supplies plants and
//! closed-loop simulation, and [`trainer`] improves banks with evolution
//! strategies without leaving the feasible set.

// Guards such as `!(x > 0.0)` are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod envs;
pub mod latent;
pub mod numerics;
pub mod policy;
pub mod trainer;
pub mod transform;
pub mod verifier;

// Book chapters and the README run as doctests so their listings stay in
// sync with the code. One module per chapter keeps failures attributable.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/transforms.md")]
    mod transforms {}
    #[doc = include_str!("../../../book/src/policies.md")]
    mod policies {}
    #[doc = include_str!("../../../book/src/verification.md")]
    mod verification {}
    #[doc = include_str!("../../../book/src/environments.md")]
    mod environments {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../README.md")]
    mod readme {}
}
