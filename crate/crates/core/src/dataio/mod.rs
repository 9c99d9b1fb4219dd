//! Charging-session ingestion, demand discretization, windows, splits and the
//! distance-based station graph.

mod calendar;
mod graph;
mod sessions;
mod window;

use std::ops::Range;

use chrono::NaiveDateTime;
use thiserror::Error;

pub use calendar::{calendar_features, scale_calendar, CALENDAR_FEATURES, CALENDAR_RANGES};
pub use graph::{build_spatial_graph, read_coords_csv, SpatialGraph};
pub use sessions::{
    discretize_sessions, parse_timestamp, read_sessions_csv, write_sessions_csv, ChargingSession, DemandPanel,
};
pub use window::{
    make_windows, normalize_panel, split_dataset, train_slot_range, windows_for_len, NormalizedPanel, Split,
    StationScaler, WindowSample, INPUT_FEATURES,
};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("no input records")]
    EmptyInput,
    #[error("station {station}: energy {energy} is negative or not finite")]
    NegativeEnergy { station: String, energy: f64 },
    #[error("station {station}: session starting {start} does not end after it starts")]
    InvertedInterval { station: String, start: NaiveDateTime },
    #[error("interval of {0} minutes does not divide a day")]
    BadInterval(u32),
    #[error("series of {len} slots is shorter than the {needed} a window needs")]
    SeriesTooShort { len: usize, needed: usize },
    #[error("window history {history} / horizon {horizon} must both be positive")]
    BadWindow { history: usize, horizon: usize },
    #[error("split ratios ({0}, {1}, {2}) must be in [0,1] and sum to 1")]
    BadRatios(f64, f64, f64),
    #[error("slot range {0:?} is empty or out of bounds")]
    BadRange(Range<usize>),
    #[error("distance threshold {0} must be positive")]
    BadThreshold(f64),
    #[error("no coordinates for station {0}")]
    MissingStation(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
