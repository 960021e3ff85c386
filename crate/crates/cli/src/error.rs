use serde_json::json;

/// A failed run: usage problems exit with 1, everything else with 2.
#[derive(Debug)]
pub enum CliError {
    Usage { code: &'static str, message: String },
    Runtime { code: &'static str, message: String },
}

impl CliError {
    pub fn usage(code: &'static str, message: impl Into<String>) -> Self {
        CliError::Usage {
            code,
            message: message.into(),
        }
    }

    pub fn code(&self) -> &'static str {
        match self {
            CliError::Usage { code, .. } | CliError::Runtime { code, .. } => code,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Usage { message, .. } | CliError::Runtime { message, .. } => message,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage { .. } => 1,
            CliError::Runtime { .. } => 2,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({ "error": { "code": self.code(), "message": self.message() } })
    }
}

impl<E: Into<scomp_core::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        let e = e.into();
        match e {
            scomp_core::Error::Metrics(scomp_core::metrics::MetricsError::Unsupported(_)) => CliError::Usage {
                code: e.code(),
                message: e.to_string(),
            },
            _ => CliError::Runtime {
                code: e.code(),
                message: e.to_string(),
            },
        }
    }
}
