//! Failure classes and their process exit codes.

use std::fmt;

use e11_core::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Config,
    /// Missing upstream artifact, fingerprint mismatch, busy output directory
    /// or unavailable provider.
    Dependency,
    Data,
}

impl Kind {
    pub fn code(self) -> i32 {
        match self {
            Kind::Config => 2,
            Kind::Dependency => 3,
            Kind::Data => 4,
        }
    }
}

#[derive(Debug)]
pub struct Failure {
    pub kind: Kind,
    pub error: anyhow::Error,
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

pub fn config_err(msg: impl Into<String>) -> Failure {
    Failure { kind: Kind::Config, error: anyhow::anyhow!(msg.into()) }
}

pub fn dependency_err(msg: impl Into<String>) -> Failure {
    Failure { kind: Kind::Dependency, error: anyhow::anyhow!(msg.into()) }
}

pub fn data_err(msg: impl Into<String>) -> Failure {
    Failure { kind: Kind::Data, error: anyhow::anyhow!(msg.into()) }
}

pub fn classify(e: &Error) -> Kind {
    match e {
        Error::Config(_) => Kind::Config,
        Error::FingerprintMismatch { .. }
        | Error::Artifact { .. }
        | Error::CacheMiss(_)
        | Error::Provider(_) => Kind::Dependency,
        _ => Kind::Data,
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure { kind: classify(&e), error: e.into() }
    }
}

pub trait Context<T> {
    /// Prefixes the error message, keeping its class.
    fn context(self, msg: impl fmt::Display) -> Result<T, Failure>;
}

impl<T> Context<T> for Result<T, Error> {
    fn context(self, msg: impl fmt::Display) -> Result<T, Failure> {
        self.map_err(|e| {
            let kind = classify(&e);
            Failure { kind, error: anyhow::Error::from(e).context(msg.to_string()) }
        })
    }
}

impl<T> Context<T> for Result<T, Failure> {
    fn context(self, msg: impl fmt::Display) -> Result<T, Failure> {
        self.map_err(|f| Failure { kind: f.kind, error: f.error.context(msg.to_string()) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codes() {
        assert_eq!(Failure::from(Error::Config("x".into())).kind.code(), 2);
        let fp = Error::FingerprintMismatch { what: "bank".into(), expected: "a".into(), found: "b".into() };
        assert_eq!(Failure::from(fp).kind.code(), 3);
        assert_eq!(Failure::from(Error::SingleClass).kind.code(), 4);
    }

    #[test]
    fn context_keeps_class() {
        let r: Result<(), Error> = Err(Error::CacheMiss(vec!["k".into()]));
        let f = r.context("scoring").unwrap_err();
        assert_eq!(f.kind, Kind::Dependency);
        assert!(f.to_string().starts_with("scoring: "));
    }
}
