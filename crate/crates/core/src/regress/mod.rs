//! Trait regression methods (RLR, RF, ELM, KRR, GPR), the hold-out
//! evaluation protocol and residual summaries.

pub mod elm;
pub mod eval;
pub mod kernel;
pub mod linalg;
pub mod linear;
pub mod residuals;

pub use elm::{fit_elm, fit_elm_keyed, Activation, ElmModel, DEFAULT_HIDDEN};
pub use eval::{
    evaluate_method, fit_gpr_method, fit_method, robustness_curve, select_hyper, EvalReport, Hyper, Method,
    MethodGrids, ModelBody, Protocol, RealizationResult, RobustnessRow, ScatterPoint, TrainedModel,
};
pub use kernel::{
    ard_kernel, ard_kernel_train, fit_gpr, fit_gpr_fixed, fit_krr, fit_krr_linear, log_marginal_likelihood, ArdParams,
    GprOptions, Kernel, KernelKind, KernelModel, LmlEval,
};
pub use linalg::{cholesky_jitter, ridge_solve, SpdFactor};
pub use linear::{fit_rlr, LinearModel};
pub use residuals::{dominant_pft, latitudinal_profile, residuals_by_pft, LatBin, ResidualGroup};
