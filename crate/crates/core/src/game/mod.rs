//! Executable semantics of the static and dynamic poisoning games, plus the
//! named scenario catalogue.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GameError {
    #[error("placeholder")]
    Placeholder,
}
