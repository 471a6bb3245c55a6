//! Dataset manifests: where a series lives and how to cut it up.
//!
//! ```toml
//! path = "load.csv"
//! region = "cn"
//! granularity = 24
//! split = [0.7, 0.1, 0.2]
//! tables = "calendars/"     # optional
//! timestamp_column = "date" # optional
//! variates = ["north", "south"] # optional
//! ```
//!
//! Relative paths are resolved against the manifest's directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calendar::{load_calendar_tables, CalendarTables};
use crate::data::{self, CsvSchema, SeriesDataset};
use crate::error::{Error, Result};

fn default_split() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub path: PathBuf,
    #[serde(default)]
    pub region: String,
    pub granularity: Option<usize>,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    pub tables: Option<PathBuf>,
    pub timestamp_column: Option<String>,
    pub variates: Option<Vec<String>>,
}

/// A split, normalized dataset with the calendar tables for its region.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub dataset: SeriesDataset,
    pub tables: CalendarTables,
}

impl DatasetManifest {
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut m: DatasetManifest =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad manifest: {e}")))?;
        m.path = base.join(&m.path);
        if let Some(t) = &m.tables {
            m.tables = Some(base.join(t));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading manifest {}", path.display()), e))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        Self::from_toml(&text, base)
    }

    pub fn schema(&self) -> CsvSchema {
        CsvSchema {
            timestamp_column: self.timestamp_column.clone(),
            variates: self.variates.clone(),
            granularity: self.granularity,
            region: self.region.clone(),
        }
    }

    pub fn load_tables(&self) -> Result<CalendarTables> {
        match &self.tables {
            Some(p) => load_calendar_tables(p),
            None => Ok(CalendarTables::empty()),
        }
    }

    /// Ingests, splits and normalizes the series and loads its tables.
    pub fn prepare(&self) -> Result<PreparedData> {
        let raw = data::ingest_csv(&self.path, &self.schema())?;
        let dataset = data::normalize(data::split(raw, self.split)?)?;
        Ok(PreparedData {
            dataset,
            tables: self.load_tables()?,
        })
    }
}
