//! Multi-view audio embeddings.
//!
//! Four per-chunk views of 1 s of 16 kHz audio (a binary constant-Q peak map,
//! MFCCs, raw waveform patches and a neuralogram) each train an identical
//! small transformer encoder. The 64-dim pooled embeddings are then
//! concatenated and a shallow head is retrained on top.
//!
//! Modules are layered bottom-up: [`autodiff`] is the tensor substrate,
//! [`dataset`] and [`features`] turn audio into view matrices, [`encoder`] and
//! [`trainer`] fit one view, [`fusion`] combines them and [`eval`] scores the
//! result.

use std::path::PathBuf;

pub mod autodiff;
pub mod dataset;
pub mod encoder;
pub mod eval;
pub mod features;
pub mod fusion;
pub mod trainer;

mod view;

pub use view::View;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] autodiff::AutodiffError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: byte {offset}: {msg}", path.display())]
    Wav { path: PathBuf, offset: u64, msg: String },
    #[error("{}: line {line}: {msg}", path.display())]
    Manifest { path: PathBuf, line: usize, msg: String },
    #[error("{}: {msg}", path.display())]
    Corrupt { path: PathBuf, msg: String },
    /// A prerequisite artifact or cache entry does not exist.
    #[error("{0}")]
    Missing(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Diverged(String),
}

impl Error {
    /// True for errors caused by bad input or configuration rather than by a
    /// failure during computation.
    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Manifest { .. } | Error::Missing(_) | Error::Invalid(_))
    }

    pub(crate) fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
