use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
    #[error("unknown class label {0}")]
    UnknownLabel(u32),
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("empty gallery")]
    EmptyGallery,
    #[error("non-finite gradient for parameter `{param}` at step {step}")]
    NonFiniteGradient { param: String, step: u64 },
    #[error("query {query} has no ground-truth match in its gallery")]
    MissingMatch { query: u32 },
}

impl Error {
    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::Shape(alloc::format!("expected {:?}, got {:?}", expected, got))
    }
}

pub(crate) fn shape_list(shapes: &[&[usize]]) -> String {
    let v: Vec<String> = shapes.iter().map(|s| alloc::format!("{:?}", s)).collect();
    v.join(", ")
}
