//! Cox proportional hazards with temporal covariates whose paths follow a
//! parametric drift ODE.
//!
//! Only the terminal pair `(Z_T, T)` of each subject is needed: the path is
//! recovered by integrating the drift backwards, the initial covariate law is
//! estimated by a Gaussian kernel over the back-propagated points, and the
//! baseline hazard is a step function profiled out of the likelihood.

pub mod cli;
pub mod density;
pub mod drift;
pub mod forecast;
pub mod hazard;
pub mod io;
pub mod likelihood;
pub mod optimize;
pub mod par;
pub mod report;
pub mod simulate;

pub use density::{build_initial_density, KernelDensity};
pub use drift::{
    jacobian_logdet, solve_g, solve_g_inverse, DriftFamily, DriftModel, SolverConfig, Trajectory,
};
pub use hazard::{profile_thetas, StepwiseHazard};
pub use likelihood::{
    conditional_loglik, full_loglik, penalized_loglik, LikelihoodValue, ParameterProfile,
    TerminalRecord,
};
pub use forecast::{ltsr, ltsr_batch, Forecast, ForecastQuery};
pub use optimize::{fit_alasso, fit_mle, fit_two_step, DriftSpec, FitConfig, FitMethod, FitResult};
pub use report::{run_study, StudyConfig, StudyResult};
pub use simulate::{simulate_panel, simulate_terminal, Baseline, SimDesign};
