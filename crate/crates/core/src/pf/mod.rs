//! Inducing-point selection by the preconditioned Fisher (pF) divergence
//! between the exact and DTC posteriors, plus the error bounds it certifies.

pub mod auxiliary;
pub mod bounds;
pub mod objective;

pub use auxiliary::{
    build_aux, build_aux_sor, build_aux_subset, build_aux_subset_capped, AuxKind, AuxiliaryDistribution,
    DEFAULT_VALIDATION_CAP,
};
pub use bounds::{
    eps_bound, eps_bound_any_aux, eps_importance_estimate, log_density_ratio_bound, pointwise_bounds, ImportanceEstimate,
    PointwiseBounds,
};
pub use objective::{
    pf_constant_term, pf_dtc_objective, pf_dtc_objective_full, pf_dtc_objective_with_gradient, pf_value_from_full,
    PfObjective, PfTerms,
};
