use std::path::PathBuf;

use pcm_autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{what} at byte {offset}: {detail}")]
    Format { what: &'static str, offset: u64, detail: String },
    #[error("wavelength {wavelength_um} um outside [{min_um}, {max_um}]")]
    OutOfRange { wavelength_um: f64, min_um: f64, max_um: f64 },
    #[error("effective-medium mixing is singular (|1 - F| = {0:e})")]
    Singular(f64),
    #[error("degenerate shape: {0}")]
    DegenerateShape(String),
    #[error("measurement has zero signal power; SNR is undefined")]
    ZeroSignal,
    #[error("data error: {0}")]
    Data(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step} (last finite epoch: {last_finite_epoch:?})")]
    NonFinite { epoch: usize, step: usize, last_finite_epoch: Option<usize> },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
