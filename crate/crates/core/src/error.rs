use crate::{baseline, crossfit, dataio, dml, net, quantities, simulate};

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Top-level error covering every pipeline stage.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] dataio::DataError),
    #[error(transparent)]
    Net(#[from] net::NetError),
    #[error(transparent)]
    CrossFit(#[from] crossfit::CrossFitError),
    #[error(transparent)]
    Dml(#[from] dml::DmlError),
    #[error(transparent)]
    Baseline(#[from] baseline::BaselineError),
    #[error(transparent)]
    Quantity(#[from] quantities::QuantityError),
    #[error(transparent)]
    Sim(#[from] simulate::SimError),
}

/// Coarse classification used by the CLI to pick exit codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ErrorKind {
    Load,
    Train,
    Inference,
    Usage,
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Data(_) => ErrorKind::Load,
            Error::Net(_) | Error::CrossFit(_) => ErrorKind::Train,
            Error::Dml(_) | Error::Baseline(_) => ErrorKind::Inference,
            Error::Quantity(_) => ErrorKind::Usage,
            Error::Sim(e) => match e {
                simulate::SimError::Pipeline(inner) => inner.kind(),
                simulate::SimError::Spec(_) => ErrorKind::Usage,
                simulate::SimError::Io { .. } => ErrorKind::Load,
            },
        }
    }
}
