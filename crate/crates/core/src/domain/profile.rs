//! Offline model profiles: per-class batch latency and utilization tables,
//! memory footprints, and per-query IO sizes.
//!
//! Profiles are measured offline per (model, device class, batch size) and
//! loaded from two CSV files: a latency table and a per-model constants
//! table. The schedulers only ever look numbers up; nothing here is
//! interpolated, and asking for an unprofiled (class, batch) pair is an
//! error surfaced to the caller.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DeviceClass, ModelId};

/// Everything the schedulers know about one model.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ModelProfile {
    pub model_id: ModelId,
    /// Resident weight footprint of one instance, in MiB.
    pub weight_mib: f64,
    /// Peak intermediate-activation footprint while a batch executes, keyed
    /// by batch size. Shared across device classes: activations depend on
    /// the model and batch, not on the GPU running it.
    pub intermediate_mib: BTreeMap<u32, f64>,
    /// Batch execution latency in milliseconds, keyed by device class and
    /// batch size.
    pub batch_latency_ms: BTreeMap<DeviceClass, BTreeMap<u32, f64>>,
    /// Fraction of a GPU's compute the model occupies while executing one
    /// batch, keyed like [`Self::batch_latency_ms`]. In (0, 1].
    pub utilization: BTreeMap<DeviceClass, BTreeMap<u32, f64>>,
    /// Serialized input size of one query, in bytes.
    pub in_bytes: f64,
    /// Serialized output size of one query, in bytes.
    pub out_bytes: f64,
    /// Mean number of downstream queries one query spawns (e.g. detected
    /// boxes per frame). May be fractional.
    pub fanout: f64,
}

impl ModelProfile {
    /// Batch execution latency for `(class, batch_size)`, if profiled.
    pub fn latency_ms(&self, class: &str, batch_size: u32) -> Option<f64> {
        self.batch_latency_ms.get(class)?.get(&batch_size).copied()
    }

    /// GPU utilization for `(class, batch_size)`, if profiled.
    pub fn util(&self, class: &str, batch_size: u32) -> Option<f64> {
        self.utilization.get(class)?.get(&batch_size).copied()
    }

    /// Intermediate-activation footprint for `batch_size`, if profiled.
    pub fn intermediate_mib(&self, batch_size: u32) -> Option<f64> {
        self.intermediate_mib.get(&batch_size).copied()
    }

    /// Batch sizes profiled for `class`, ascending.
    pub fn batch_sizes(&self, class: &str) -> Vec<u32> {
        self.batch_latency_ms
            .get(class)
            .map(|m| m.keys().copied().collect())
            .unwrap_or_default()
    }

    /// True if the model can run on `class` at all.
    pub fn supports_class(&self, class: &str) -> bool {
        self.batch_latency_ms.contains_key(class)
    }
}

/// All model profiles for a scenario, keyed by model id.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct ProfileSet {
    pub models: BTreeMap<ModelId, ModelProfile>,
}

impl ProfileSet {
    pub fn get(&self, model_id: &str) -> Option<&ModelProfile> {
        self.models.get(model_id)
    }

    /// Lookup that turns a missing model into an error instead of an Option.
    pub fn require(&self, model_id: &str) -> Result<&ModelProfile, ProfileError> {
        self.models
            .get(model_id)
            .ok_or_else(|| ProfileError::UnknownModel {
                model_id: model_id.to_string(),
            })
    }
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {source}")]
    Csv {
        path: String,
        line: u64,
        #[source]
        source: csv::Error,
    },
    #[error("{path}:{line}: {message}")]
    Invalid {
        path: String,
        line: u64,
        message: String,
    },
    #[error("model {model_id} has a latency table but no row in the models file")]
    MissingConstants { model_id: String },
    #[error("model {model_id} appears in the models file but has no latency rows")]
    MissingLatency { model_id: String },
    #[error("model {model_id}: batch latency not non-decreasing in batch size for class {device_class}")]
    NonMonotoneLatency {
        model_id: String,
        device_class: String,
    },
    #[error("unknown model {model_id}")]
    UnknownModel { model_id: String },
}

#[derive(Debug, Deserialize)]
struct LatencyRow {
    model_id: String,
    device_class: String,
    batch_size: u32,
    latency_ms: f64,
    util: f64,
    intermediate_mib: f64,
}

#[derive(Debug, Deserialize)]
struct ModelRow {
    model_id: String,
    weight_mib: f64,
    in_bytes: f64,
    out_bytes: f64,
    fanout: f64,
}

/// Loads a [`ProfileSet`] from the latency table and the per-model constants
/// table, validating as it goes.
///
/// Checks, with file/line in every error: positive numbers where required,
/// `util` in (0, 1], batch sizes unique per (model, class), batch latency
/// non-decreasing in batch size within each class, intermediate footprints
/// consistent when a batch size is profiled on several classes, and that the
/// two files cover the same set of models.
pub fn load_profiles(
    latency_csv: &Path,
    models_csv: &Path,
) -> Result<ProfileSet, ProfileError> {
    let mut set = ProfileSet::default();

    // Per-model constants first so latency rows can attach to them.
    let models_path = models_csv.display().to_string();
    let mut rdr = csv::Reader::from_path(models_csv).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => ProfileError::Io {
            path: models_path.clone(),
            source: std::io::Error::other(e.to_string()),
        },
        _ => ProfileError::Csv {
            path: models_path.clone(),
            line: 0,
            source: e,
        },
    })?;
    let headers = rdr
        .headers()
        .map_err(|e| ProfileError::Csv { path: models_path.clone(), line: 1, source: e })?
        .clone();
    for result in rdr.records() {
        let record = result.map_err(|e| ProfileError::Csv {
            path: models_path.clone(),
            line: 0,
            source: e,
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: ModelRow = record.deserialize(Some(&headers)).map_err(|e| ProfileError::Csv {
            path: models_path.clone(),
            line,
            source: e,
        })?;
        let invalid = |message: String| ProfileError::Invalid {
            path: models_path.clone(),
            line,
            message,
        };
        if row.weight_mib <= 0.0 || !row.weight_mib.is_finite() {
            return Err(invalid(format!("weight_mib must be positive, got {}", row.weight_mib)));
        }
        if row.in_bytes < 0.0 || row.out_bytes < 0.0 {
            return Err(invalid("in_bytes/out_bytes must be non-negative".into()));
        }
        if row.fanout < 0.0 || !row.fanout.is_finite() {
            return Err(invalid(format!("fanout must be non-negative, got {}", row.fanout)));
        }
        if set.models.contains_key(&row.model_id) {
            return Err(invalid(format!("duplicate model row for {}", row.model_id)));
        }
        set.models.insert(
            row.model_id.clone(),
            ModelProfile {
                model_id: row.model_id,
                weight_mib: row.weight_mib,
                intermediate_mib: BTreeMap::new(),
                batch_latency_ms: BTreeMap::new(),
                utilization: BTreeMap::new(),
                in_bytes: row.in_bytes,
                out_bytes: row.out_bytes,
                fanout: row.fanout,
            },
        );
    }

    let latency_path = latency_csv.display().to_string();
    let mut rdr = csv::Reader::from_path(latency_csv).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => ProfileError::Io {
            path: latency_path.clone(),
            source: std::io::Error::other(e.to_string()),
        },
        _ => ProfileError::Csv {
            path: latency_path.clone(),
            line: 0,
            source: e,
        },
    })?;
    let headers = rdr
        .headers()
        .map_err(|e| ProfileError::Csv { path: latency_path.clone(), line: 1, source: e })?
        .clone();
    for result in rdr.records() {
        let record = result.map_err(|e| ProfileError::Csv {
            path: latency_path.clone(),
            line: 0,
            source: e,
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: LatencyRow = record.deserialize(Some(&headers)).map_err(|e| ProfileError::Csv {
            path: latency_path.clone(),
            line,
            source: e,
        })?;
        let invalid = |message: String| ProfileError::Invalid {
            path: latency_path.clone(),
            line,
            message,
        };
        if row.batch_size == 0 {
            return Err(invalid("batch_size must be >= 1".into()));
        }
        if row.latency_ms <= 0.0 || !row.latency_ms.is_finite() {
            return Err(invalid(format!("latency_ms must be positive, got {}", row.latency_ms)));
        }
        if row.util <= 0.0 || row.util > 1.0 {
            return Err(invalid(format!("util must be in (0, 1], got {}", row.util)));
        }
        if row.intermediate_mib < 0.0 {
            return Err(invalid("intermediate_mib must be non-negative".into()));
        }
        let profile = set.models.get_mut(&row.model_id).ok_or(ProfileError::MissingConstants {
            model_id: row.model_id.clone(),
        })?;
        let lat = profile
            .batch_latency_ms
            .entry(row.device_class.clone())
            .or_default();
        if lat.insert(row.batch_size, row.latency_ms).is_some() {
            return Err(invalid(format!(
                "duplicate latency row for ({}, {}, {})",
                row.model_id, row.device_class, row.batch_size
            )));
        }
        profile
            .utilization
            .entry(row.device_class.clone())
            .or_default()
            .insert(row.batch_size, row.util);
        match profile.intermediate_mib.get(&row.batch_size) {
            Some(prev) if (prev - row.intermediate_mib).abs() > 1e-9 => {
                return Err(invalid(format!(
                    "model {} batch {}: intermediate_mib {} conflicts with earlier value {}",
                    row.model_id, row.batch_size, row.intermediate_mib, prev
                )));
            }
            _ => {
                profile.intermediate_mib.insert(row.batch_size, row.intermediate_mib);
            }
        }
    }

    // Cross-file consistency.
    for (id, profile) in &set.models {
        if profile.batch_latency_ms.is_empty() {
            return Err(ProfileError::MissingLatency { model_id: id.clone() });
        }
        for (class, table) in &profile.batch_latency_ms {
            let mut prev = 0.0f64;
            for (_, &lat) in table.iter() {
                if lat + 1e-12 < prev {
                    return Err(ProfileError::NonMonotoneLatency {
                        model_id: id.clone(),
                        device_class: class.clone(),
                    });
                }
                prev = lat;
            }
        }
    }

    Ok(set)
}
