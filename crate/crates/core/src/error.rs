//! Crate-wide error umbrella. Each module defines its own error enum; this
//! type exists so cross-module drivers (the game runner, the CLI) can carry
//! one error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] crate::latentface::DataError),
    #[error(transparent)]
    Extractor(#[from] crate::extractor::ExtractorError),
    #[error(transparent)]
    Attack(#[from] crate::attack::AttackError),
    #[error(transparent)]
    Recognizer(#[from] crate::recognizer::RecognizerError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Game(#[from] crate::game::GameError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}
