use std::fmt;

/// Pipeline stage names used to tag errors and diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Partition,
    LocalSampling,
    Refinement,
    Estimation,
    ParamSampling,
    Collect,
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Step::Partition => "partition",
            Step::LocalSampling => "local sampling",
            Step::Refinement => "global cluster refinement",
            Step::Estimation => "global clustering estimation",
            Step::ParamSampling => "model parameter sampling",
            Step::Collect => "result collection",
        };
        f.write_str(name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical error: {0}")]
    Numerical(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{step} failed: {source}")]
    Pipeline {
        step: Step,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn at(self, step: Step) -> Self {
        match self {
            e @ Error::Pipeline { .. } => e,
            other => Error::Pipeline {
                step,
                source: Box::new(other),
            },
        }
    }

    /// Rebuilds an error reported by a remote peer from its exit code.
    pub fn from_code(code: i32, message: String) -> Self {
        match code {
            2 => Error::Data(message),
            3 => Error::io("remote", std::io::Error::other(message)),
            4 => Error::Numerical(message),
            _ => Error::Transport(message),
        }
    }

    /// Innermost error, skipping pipeline step wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Pipeline { source, .. } => source.root(),
            other => other,
        }
    }

    /// Process exit code: 2 config, 3 io, 4 numerical, 5 transport.
    pub fn exit_code(&self) -> i32 {
        match self.root() {
            Error::Parameter(_) | Error::Config(_) | Error::Data(_) => 2,
            Error::Io { .. } => 3,
            Error::Numerical(_) => 4,
            Error::Transport(_) => 5,
            Error::Pipeline { .. } => unreachable!("root() strips pipeline wrappers"),
        }
    }
}

pub trait StepExt<T> {
    fn at(self, step: Step) -> Result<T>;
}

impl<T> StepExt<T> for Result<T> {
    fn at(self, step: Step) -> Result<T> {
        self.map_err(|e| e.at(step))
    }
}
