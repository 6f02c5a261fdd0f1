//! Gradients, the three-step procedure and Adam.

pub mod adam;
pub mod grad;
pub mod oracle;
pub mod three_step;

pub use adam::{adam_train, AdamHyper, AdamRun, AdamSnapshot};
pub use grad::{grad, grad_with_loss, mean_loss, BatchGrad, GradPair, GradTarget};
pub use oracle::{closed_form_first_value_grad, finite_difference, FdProbe, ParamBlock};
pub use three_step::{
    resolve_auto_rates, three_step_train, ResolvedRates, StepRecord, ThreeStepHyper, ThreeStepResult, ThreeStepTrace,
};
