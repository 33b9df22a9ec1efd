use std::fmt;

/// Failure of a subcommand, carrying its process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CliError {
    /// Bad configuration, unreadable or malformed data, incompatible checkpoint.
    Config(String),
    /// Failure while computing.
    Runtime(String),
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError::Config(msg.into())
    }

    pub fn runtime(msg: impl Into<String>) -> Self {
        CliError::Runtime(msg.into())
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {}

impl From<advtext::Error> for CliError {
    fn from(e: advtext::Error) -> Self {
        use advtext::Error as E;
        let msg = e.to_string();
        match e {
            E::Shape { .. }
            | E::NoPositions
            | E::UnknownLeaf(_)
            | E::NotScalar(_)
            | E::BankIndex { .. }
            | E::BankUninitialized
            | E::MissingComponent(_) => CliError::Runtime(msg),
            _ => CliError::Config(msg),
        }
    }
}
