use std::fmt;

/// A failure detected by the command layer itself, with a stable code.
#[derive(Debug)]
pub struct CliError {
    pub code: &'static str,
    pub message: String,
}

impl CliError {
    pub fn new(code: &'static str, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError::new("usage", message)
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError::new("invalid_config", message)
    }

    pub fn missing(message: impl Into<String>) -> Self {
        CliError::new("missing_input", message)
    }

    pub fn invalid_output(message: impl Into<String>) -> Self {
        CliError::new("invalid_output", message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

/// Code of the innermost error in the chain that carries one.
pub fn code_of(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CliError>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<uacal::Error>() {
            return e.code();
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
    }
    "internal"
}

/// `error[code]: message`, on one line.
pub fn render(err: &anyhow::Error) -> String {
    let text = format!("{err:#}");
    let flat: Vec<&str> = text.split_whitespace().collect();
    format!("error[{}]: {}", code_of(err), flat.join(" "))
}
