use thiserror::Error;

/// Errors produced anywhere in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Shapes or element counts do not line up.
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// A layer or model was built with inconsistent settings.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// A backward pass was requested without a cached forward.
    #[error("no cached forward state: {0}")]
    StateMissing(&'static str),

    /// A matrix entry handed to the bit packer was not exactly +/-1.
    #[error("bad value at index {index}: {value} is not +/-1")]
    BadValue { index: usize, value: f32 },

    /// Alpha vector length does not match the tiling factor.
    #[error("alpha count mismatch: got {got}, expected 1 or {expected}")]
    AlphaCountMismatch { got: usize, expected: usize },

    /// A class label fell outside the logit range.
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// An IDX or TBN1 file carried the wrong magic number.
    #[error("bad magic in {path}: got {got:#x}, expected {expected:#x}")]
    BadMagic {
        path: String,
        got: u32,
        expected: u32,
    },

    /// A file ended before the declared payload.
    #[error("truncated file: {0}")]
    Truncated(String),

    /// Image and label files disagree on the sample count.
    #[error("count mismatch: {images} images vs {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    /// The TBN1 trailer CRC did not match the file contents.
    #[error("crc mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    CrcMismatch { stored: u32, computed: u32 },

    /// The TBN1 format version is newer than this build understands.
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
