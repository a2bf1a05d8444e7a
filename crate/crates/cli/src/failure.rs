use std::fmt;

/// Exit code for unreadable, malformed or inconsistent input.
pub const EXIT_INPUT: u8 = 2;
/// Exit code for estimation and other numerical failures.
pub const EXIT_NUMERICAL: u8 = 3;

/// A command failure carrying the process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_INPUT,
            message: message.into(),
        }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_NUMERICAL,
            message: message.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<mldfm::Error> for Failure {
    fn from(e: mldfm::Error) -> Self {
        match e {
            mldfm::Error::Parameter { .. } | mldfm::Error::Dimension(_) => {
                Self::input(e.to_string())
            }
            _ => Self::numerical(e.to_string()),
        }
    }
}

pub type CliResult<T> = Result<T, Failure>;
