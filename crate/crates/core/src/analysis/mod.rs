//! Numerical checks of the model's structural guarantees.

mod bounds;
pub mod fd;
mod jacobian;
mod probes;
mod trace;
pub mod verify;

pub use bounds::{beta, gradient_bound, state_bound_check, state_bounds, BoundReport, StateBoundReport};
pub use fd::{compare_gradients, finite_difference_gradients, relative_error, FdScheme, GradientComparison};
pub use jacobian::{
    blocks_to_matrix, jacobian_chain, step_jacobian, step_jacobian_drive, trace_jacobian, JacobianBlock,
};
pub use probes::{
    contribution_k_profile, deep_contribution, effective_timesteps, fit_power_law, gradient_contribution, leading_term,
    multilayer_scaling_probe, predicted_exponent, reference_instance, residual_hops, same_step_jacobian,
    vanishing_gradient_probe, KProfile, ProbeTask, ScalingProbe, ScalingReport, VanishingProbe, VanishingReport,
};
pub use trace::{trace_model, LayerTrace};
pub use verify::{
    check_fd_match, check_gradient_bound, check_inversion, check_scaling, check_state_bounds, check_vanishing,
    check_volume, format_table, run_suite, CheckRecord, Fault, Suite, VerifyOptions,
};
