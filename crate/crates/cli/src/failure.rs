use std::fmt;

/// A command failure and the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    /// Bad flags, config or spec: exit 2.
    Usage(String),
    /// Anything that fails while doing the work: exit 1.
    Runtime(String),
}

impl Failure {
    pub fn usage(e: impl fmt::Display) -> Self {
        Self::Usage(e.to_string())
    }

    pub fn runtime(e: impl fmt::Display) -> Self {
        Self::Runtime(e.to_string())
    }

    pub fn code(&self) -> u8 {
        match self {
            Self::Usage(_) => 2,
            Self::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(m) | Self::Runtime(m) => f.write_str(m),
        }
    }
}
