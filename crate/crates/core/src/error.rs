//! Crate-wide error type and the single mapping from error kinds to
//! HTTP status codes used by the gateway.

use serde::Serialize;

use crate::acl::AclError;
use crate::agent::AgentError;
use crate::audit::AuditError;
use crate::corpus::CorpusError;
use crate::dialog::DialogError;
use crate::embed::EmbedError;
use crate::feedback::TicketError;
use crate::guardrail::PolicyError;
use crate::history::HistoryError;
use crate::tools::ToolError;

/// Stable error classification shared by every module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Unauthenticated,
    Forbidden,
    NotFound,
    IllegalState,
    Validation,
    BackendUnavailable,
    Internal,
}

impl ErrorKind {
    pub const ALL: [ErrorKind; 7] = [
        ErrorKind::Unauthenticated,
        ErrorKind::Forbidden,
        ErrorKind::NotFound,
        ErrorKind::IllegalState,
        ErrorKind::Validation,
        ErrorKind::BackendUnavailable,
        ErrorKind::Internal,
    ];

    pub fn http_status(self) -> u16 {
        match self {
            ErrorKind::Unauthenticated => 401,
            ErrorKind::Forbidden => 403,
            ErrorKind::NotFound => 404,
            ErrorKind::IllegalState => 409,
            ErrorKind::Validation => 422,
            ErrorKind::BackendUnavailable => 502,
            ErrorKind::Internal => 500,
        }
    }

    pub fn code(self) -> &'static str {
        match self {
            ErrorKind::Unauthenticated => "unauthenticated",
            ErrorKind::Forbidden => "forbidden",
            ErrorKind::NotFound => "not_found",
            ErrorKind::IllegalState => "illegal_state",
            ErrorKind::Validation => "validation",
            ErrorKind::BackendUnavailable => "backend_unavailable",
            ErrorKind::Internal => "internal",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Acl(#[from] AclError),
    #[error(transparent)]
    Audit(#[from] AuditError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Tool(#[from] ToolError),
    #[error(transparent)]
    Dialog(#[from] DialogError),
    #[error(transparent)]
    History(#[from] HistoryError),
    #[error(transparent)]
    Ticket(#[from] TicketError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    Validation(String),
    #[error("{0}")]
    Conflict(String),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Acl(e) => e.kind(),
            Error::Audit(e) => e.kind(),
            Error::Corpus(e) => e.kind(),
            Error::Embed(e) => e.kind(),
            Error::Policy(e) => e.kind(),
            Error::Agent(e) => e.kind(),
            Error::Tool(e) => e.kind(),
            Error::Dialog(e) => e.kind(),
            Error::History(e) => e.kind(),
            Error::Ticket(e) => e.kind(),
            Error::Config(_) => ErrorKind::Internal,
            Error::Validation(_) => ErrorKind::Validation,
            Error::Conflict(_) => ErrorKind::IllegalState,
            Error::Io(_) => ErrorKind::Internal,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
