use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid road model: {0}")]
    InvalidRoad(String),

    #[error("position ({x:.3}, {y:.3}) lies outside every lane corridor")]
    OutOfRoad { x: f64, y: f64 },

    #[error("sample {index}: position ({x:.3}, {y:.3}) lies outside every lane corridor")]
    OutOfRoadAt { index: usize, x: f64, y: f64 },

    #[error("vehicle `{vehicle_id}`, sample {index}: position lies outside every lane corridor")]
    VehicleOutOfRoad { vehicle_id: String, index: usize },

    #[error("recording: {0}")]
    InvalidRecording(String),

    #[error("recording, line {line}: {message}")]
    MalformedRow { line: u64, message: String },

    #[error("segmentation config: {0}")]
    InvalidConfig(String),

    #[error("track `{0}` is empty")]
    EmptyTrack(String),

    #[error("internal invariant violated: {0}")]
    Invariant(String),

    #[error("fit: {0}")]
    Fit(String),

    #[error("fit of {vehicle_id} {channel} action #{index}: {source}")]
    ActionFit {
        vehicle_id: String,
        channel: String,
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("unknown vehicle `{0}`")]
    UnknownVehicle(String),

    #[error("pattern `{0}`: {1}")]
    InvalidPattern(String, String),

    #[error("payload: bad magic {0:02x?}")]
    BadMagic([u8; 4]),

    #[error("payload: unknown version {0}")]
    UnknownVersion(u8),

    #[error("payload truncated: {missing} more byte(s) needed at offset {offset}")]
    Truncated { offset: usize, missing: usize },

    #[error("payload crc mismatch: expected {expected:#010x}, found {found:#010x}")]
    CrcMismatch { expected: u32, found: u32 },

    #[error("payload: {0}")]
    MalformedPayload(String),

    #[error("statistics: {0}")]
    Statistics(String),

    #[error("zero-variance column `{0}`")]
    ZeroVariance(String),

    #[error("unresolvable action reference: {0}")]
    UnresolvedAction(String),

    #[error("export: {0}")]
    Export(String),

    #[error("drive script: {0}")]
    InvalidScript(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors that indicate a bug rather than bad input.
    pub fn is_internal(&self) -> bool {
        match self {
            Error::Invariant(_) => true,
            Error::ActionFit { source, .. } => source.is_internal(),
            _ => false,
        }
    }
}
