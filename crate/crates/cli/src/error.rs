use mixar_core::MixarError;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Core(MixarError),
}

impl From<MixarError> for CliError {
    fn from(e: MixarError) -> Self {
        match e {
            MixarError::Config(m) => CliError::Usage(m),
            other => CliError::Core(other),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    /// Category label and process exit code.
    pub fn category(&self) -> (&'static str, i32) {
        match self {
            CliError::Usage(_) => ("usage", 2),
            CliError::Core(MixarError::Dependency(_)) => ("dependency", 3),
            CliError::Core(MixarError::Numerical(_)) => ("numerical", 4),
            CliError::Core(_) => ("runtime", 1),
        }
    }

    /// `error[<category>]: <message>` on a single line.
    pub fn line(&self) -> String {
        let msg = match self {
            CliError::Usage(m) => m.clone(),
            CliError::Core(e) => e.to_string(),
        };
        format!("error[{}]: {}", self.category().0, msg.replace('\n', " "))
    }
}
