//! Maps errors to exit codes and a one-line, prefix-tagged message.

use minor_sft_core::Error;

use crate::config::ConfigError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Other,
    Config,
    Data,
    Numeric,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Other => 1,
            Kind::Config => 2,
            Kind::Data => 3,
            Kind::Numeric => 4,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Kind::Other => "io",
            Kind::Config => "config",
            Kind::Data => "data",
            Kind::Numeric => "numeric",
        }
    }
}

/// Raised when a check completes but does not pass.
#[derive(Debug)]
pub struct NumericFailure(pub String);

impl std::fmt::Display for NumericFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for NumericFailure {}

fn core_kind(e: &Error) -> Kind {
    match e {
        Error::ModelConfig(_) | Error::ConfigMismatch | Error::InvalidValue(_) | Error::StepOutOfRange { .. } => {
            Kind::Config
        }
        Error::Record { .. }
        | Error::EmptyCorpus
        | Error::EmptyBatch
        | Error::SchemaMismatch { .. }
        | Error::ContextOverflow { .. }
        | Error::AnswerLengthMismatch { .. }
        | Error::Checkpoint(_)
        | Error::Csv(_)
        | Error::Json(_)
        | Error::Io { .. } => Kind::Data,
        Error::NonFinite { .. } | Error::NonFiniteLoss { .. } | Error::Domain { .. } => Kind::Numeric,
        Error::Shape { .. } | Error::NonScalarLoss(_) => Kind::Other,
    }
}

pub fn classify(err: &anyhow::Error) -> Kind {
    for cause in err.chain() {
        if cause.is::<ConfigError>() {
            return Kind::Config;
        }
        if cause.is::<NumericFailure>() {
            return Kind::Numeric;
        }
        if let Some(e) = cause.downcast_ref::<Error>() {
            return core_kind(e);
        }
    }
    Kind::Other
}

/// `error[<tag>]: <context>: <cause>` on a single line.
pub fn render(err: &anyhow::Error) -> String {
    let kind = classify(err);
    let mut parts: Vec<String> = Vec::new();
    for c in err.chain() {
        let s = c.to_string();
        // Library errors often already embed their source's message.
        if !parts.last().is_some_and(|p| p.ends_with(&s)) {
            parts.push(s);
        }
    }
    let msg = parts.join(": ").replace(['\n', '\r'], " ");
    format!("error[{}]: {msg}", kind.tag())
}
