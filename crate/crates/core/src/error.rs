use std::fmt;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An op received operands whose shapes it cannot combine.
    Shape { op: &'static str, detail: String },
    DTypeMismatch { op: &'static str, expected: String, found: String },
    EmptyAxis { op: &'static str },
    EvenKernel { size: usize },
    NonScalarLoss { shape: Vec<usize> },
    /// The loss does not depend on any trainable parameter.
    DetachedLoss,
    UnknownNode(usize),
    /// A backward rule asked for a tensor it did not retain.
    NotRetained { op: &'static str, node: usize },
    MissingParam(String),
    NonFinite { param: String },
    Config(Vec<String>),
    Manifest(Vec<String>),
    Io(String),
    NoForward,
    EmptyDataset,
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Self::DTypeMismatch { op, expected, found } => {
                write!(f, "{op}: dtype mismatch, expected {expected}, found {found}")
            }
            Self::EmptyAxis { op } => write!(f, "{op}: reduction over an empty axis"),
            Self::EvenKernel { size } => {
                write!(f, "depthwise_conv2d: kernel side {size} is even; size-preserving padding needs an odd kernel")
            }
            Self::NonScalarLoss { shape } => write!(f, "backward: loss must be a scalar, got shape {shape:?}"),
            Self::DetachedLoss => write!(f, "backward: loss does not depend on any trainable parameter"),
            Self::UnknownNode(id) => write!(f, "unknown graph node {id}"),
            Self::NotRetained { op, node } => {
                write!(f, "{op}: backward read node {node}, which was not retained for backward")
            }
            Self::MissingParam(name) => write!(f, "missing parameter {name}"),
            Self::NonFinite { param } => write!(f, "non-finite value in parameter {param}"),
            Self::Config(items) => write!(f, "invalid config: {}", items.join("; ")),
            Self::Manifest(items) => write!(f, "weight manifest: {}", items.join("; ")),
            Self::Io(msg) => write!(f, "io: {msg}"),
            Self::NoForward => write!(f, "no recorded forward pass to measure"),
            Self::EmptyDataset => write!(f, "dataset is empty"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Self::Io(err.to_string())
    }
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape { op, detail: detail.into() }
}

pub(crate) fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(vec![msg.into()])
}
