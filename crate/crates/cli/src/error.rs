use std::fmt;

use llc_core::ErrorKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Numeric,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 2,
            Category::Data => 3,
            Category::Numeric => 4,
        }
    }

    fn label(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Data => "data",
            Category::Numeric => "numeric",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            category: Category::Config,
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    /// One line: `error[<category>]: <message>`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let flat = self.message.replace('\n', " ");
        write!(f, "error[{}]: {flat}", self.category.label())
    }
}

impl From<llc_core::Error> for CliError {
    fn from(e: llc_core::Error) -> Self {
        let category = match e.kind() {
            ErrorKind::Data => Category::Data,
            ErrorKind::Numeric => Category::Numeric,
        };
        Self {
            category,
            message: e.to_string(),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;
