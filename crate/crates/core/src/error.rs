use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{0}: empty input")]
    EmptyInput(&'static str),

    #[error("numeric instability: {0}")]
    NumericInstability(String),

    #[error("insufficient points: need more than {k} points, got {got}")]
    InsufficientPoints { k: usize, got: usize },

    #[error("degenerate cloud: all points coincide")]
    DegenerateCloud,

    #[error("{op}: requested {requested} out of {available}")]
    Size {
        op: &'static str,
        requested: usize,
        available: usize,
    },

    #[error("layer {layer}: injection shape {got:?} does not match hidden shape {expected:?}")]
    LayerShape {
        layer: usize,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("config: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
