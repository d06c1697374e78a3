//! Information-competing objective: a representation split into a
//! capacity-limited part ζ and an informative part y that solve the task
//! jointly, compete through a JS mutual-information bound, and are kept
//! mutually unpredictable by adversarial cross-predictors.

mod model;
mod objective;

pub use model::{Arch, Encoded, IcpModel, Linear, Mlp, ModelSpec, Stage};
pub use objective::{
    assemble_loss, inference_loss, mi_max_js, mi_min_bound, predictability_min, standardize, IcpCoefficients, JsTerms,
    LossTerms, PmTerms, TermReport,
};
