//! Two-timescale Q-learning for mean-field games and mean-field control on
//! finite state and action spaces.
//!
//! The same coupled iteration on a Q table and a population distribution
//! reaches the game equilibrium or the control optimum depending on the ratio
//! of its two learning rates. The crate contains the exact-operator iteration
//! ([`engine`]), the sample-based tabular learner ([`learner`]), reference
//! fixed-point solvers ([`oracles`]) and the contraction diagnostics
//! ([`diagnostics`]).

pub mod diagnostics;
pub mod engine;
pub mod environments;
pub mod error;
pub mod io;
pub mod learner;
pub mod model;
pub mod oracles;

pub use error::{Error, Result};
pub use model::{
    argmin, bellman_image, greedy_policy, induced_transition, op_p, op_t, policy_transition,
    push_forward, sup_norm, tv_distance, tv_norm, CostFunction, FnCost, FnKernel, Grid,
    LearningRates, Policy, ProbabilityVector, ProblemSpec, QTable, TransitionKernel,
};
