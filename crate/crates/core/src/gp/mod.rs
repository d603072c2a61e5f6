//! Gaussian-process layer: RBF kernel, exact GP regression and the sparse
//! variational head used on top of the encoder.

mod exact;
mod kernel;
mod svgp;

pub use exact::{log_marginal_on_tape, ExactGp, FitOptions, FitTrace};
pub use kernel::{kernel_matrix, kernel_matrix_with, kernel_on_tape, RbfKernel};
pub use svgp::{
    elbo_on_tape, label_moments, marginals_on_tape, optimal_variational_head, ElboTerms, ElboVars, GpPrediction,
    HeadVars, MarginalVars, SvgpHead, HEAD_FORMAT_VERSION, INITIAL_NOISE_VARIANCE,
};
