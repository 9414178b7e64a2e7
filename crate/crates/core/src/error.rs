use thiserror::Error;

/// Errors surfaced by every stage of the pipeline.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unsupported pass: {0}")]
    UnsupportedPass(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("format error: {0}")]
    Format(String),
    #[error("encoding error: field `{field}` value {value} exceeds {bits} bits")]
    Encoding { field: &'static str, value: u64, bits: u32 },
    #[error("illegal instruction: opcode nibble {0:#x}")]
    IllegalInstruction(u8),
    #[error("not mergeable: {0}")]
    NotMergeable(String),
    #[error("capacity error: length {len} exceeds max_len {max_len}")]
    Capacity { len: usize, max_len: usize },
    #[error("allocation error in {region}: need {needed} bytes, have {available}")]
    Allocation { region: String, needed: u64, available: u64 },
    #[error("compile error: {0}")]
    Compile(String),
    #[error("tiling error: {0}")]
    Tiling(String),
    #[error("datapath fault: {0}")]
    Datapath(String),
    #[error("fault at pc {pc} (core {core}): {msg}")]
    Fault { core: usize, pc: usize, msg: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Format(e.to_string())
    }
}

impl Error {
    /// Prefixes the message of string-carrying variants with `ctx`.
    pub fn context(self, ctx: &str) -> Error {
        match self {
            Error::Config(m) => Error::Config(format!("{ctx}: {m}")),
            Error::Data(m) => Error::Data(format!("{ctx}: {m}")),
            Error::Format(m) => Error::Format(format!("{ctx}: {m}")),
            Error::Compile(m) => Error::Compile(format!("{ctx}: {m}")),
            Error::Tiling(m) => Error::Tiling(format!("{ctx}: {m}")),
            Error::Datapath(m) => Error::Datapath(format!("{ctx}: {m}")),
            Error::Allocation { region, needed, available } => {
                Error::Allocation { region: format!("{ctx}: {region}"), needed, available }
            }
            other => other,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
