use alloc::string::String;

use crate::tensor::Shape;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs} vs {rhs}")]
    Shape {
        op: &'static str,
        lhs: Shape,
        rhs: Shape,
    },
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("non-finite value produced at stage `{stage}`")]
    NonFinite { stage: String },
    #[error("non-finite gradient for parameter `{param}`, optimizer step aborted")]
    NonFiniteGrad { param: String },
    #[error("unknown ablation switch `{name}` (valid: {valid})")]
    UnknownAblation { name: String, valid: String },
    #[error("training diverged at step {step}: total loss is not finite")]
    Diverged {
        step: u64,
        last_finite: Option<alloc::boxed::Box<crate::pipeline::LossReport>>,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}
