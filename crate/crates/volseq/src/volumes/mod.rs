//! Longitudinal volume data model: multi-series 3D visits per patient, a
//! bit-exact on-disk volume format, a deterministic synthetic cohort
//! generator, and the record subsetting / split logic used for training.

mod lsv;
pub mod manifest;
mod synth;

pub use lsv::{load_volume, save_volume};
pub use synth::{generate_cohort, generate_cohort_detailed, LesionInfo};

use std::sync::Arc;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::rng;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("truncated payload: expected {expected} bytes, got {got}")]
    TruncatedPayload { expected: u64, got: u64 },
    #[error("payload has {extra} unexpected trailing bytes")]
    TrailingData { extra: u64 },
    #[error("dimension overflow: {channels}x{d}x{h}x{w} voxels exceeds the supported size")]
    DimensionOverflow { channels: u64, d: u64, h: u64, w: u64 },
    #[error("non-finite intensity at flat index {index}")]
    NonFinite { index: usize },
    #[error("volume data length {got} does not match shape ({expected})")]
    SizeMismatch { expected: usize, got: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("dev fraction {0} outside (0, 1)")]
    InvalidFraction(f64),
    #[error("manifest error: {0}")]
    Manifest(String),
}

/// A multi-channel 3D scalar field with voxel spacing in millimeters.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub channels: usize,
    /// `(depth, height, width)`.
    pub dims: [usize; 3],
    /// Millimeters per voxel, `(sz, sy, sx)`.
    pub spacing: [f32; 3],
    /// Channel-major, then depth-major: `data[((c*d + z)*h + y)*w + x]`.
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(
        channels: usize,
        dims: [usize; 3],
        spacing: [f32; 3],
        data: Vec<f32>,
    ) -> Result<Self, VolumeError> {
        let expected = channels * dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(VolumeError::SizeMismatch { expected, got: data.len() });
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::NonFinite { index });
        }
        Ok(Volume { channels, dims, spacing, data })
    }

    pub fn zeros(channels: usize, dims: [usize; 3], spacing: [f32; 3]) -> Self {
        Volume { channels, dims, spacing, data: vec![0.0; channels * dims[0] * dims[1] * dims[2]] }
    }

    /// Voxels per channel.
    pub fn voxels_per_channel(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, c: usize, z: usize, y: usize, x: usize) -> usize {
        ((c * self.dims[0] + z) * self.dims[1] + y) * self.dims[2] + x
    }

    /// One channel as a standalone single-channel volume.
    pub fn channel(&self, c: usize) -> Volume {
        let n = self.voxels_per_channel();
        Volume {
            channels: 1,
            dims: self.dims,
            spacing: self.spacing,
            data: self.data[c * n..(c + 1) * n].to_vec(),
        }
    }

    /// Min and max intensity over all channels.
    pub fn intensity_range(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    pub fn bytes_eq(&self, other: &Volume) -> bool {
        self.channels == other.channels
            && self.dims == other.dims
            && self.spacing.iter().zip(&other.spacing).all(|(a, b)| a.to_bits() == b.to_bits())
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// One imaging visit: several registered series of the same anatomy plus a
/// timestamp in months since the patient's first visit.
#[derive(Clone, Debug)]
pub struct StudyVisit {
    pub timestamp: f64,
    pub series: Vec<Volume>,
    pub series_labels: Vec<String>,
}

impl StudyVisit {
    pub fn new(
        timestamp: f64,
        series: Vec<Volume>,
        series_labels: Vec<String>,
    ) -> Result<Self, VolumeError> {
        if series.is_empty() {
            return Err(VolumeError::InvalidRecord("visit has no series".into()));
        }
        if series.len() != series_labels.len() {
            return Err(VolumeError::InvalidRecord(format!(
                "{} series but {} labels",
                series.len(),
                series_labels.len()
            )));
        }
        for i in 0..series_labels.len() {
            for j in i + 1..series_labels.len() {
                if series_labels[i] == series_labels[j] {
                    return Err(VolumeError::InvalidRecord(format!(
                        "duplicate series label {}",
                        series_labels[i]
                    )));
                }
            }
        }
        let dims = series[0].dims;
        let spacing = series[0].spacing;
        for s in &series {
            if s.channels != 1 {
                return Err(VolumeError::InvalidRecord("series must be single-channel".into()));
            }
            if s.dims != dims || s.spacing != spacing {
                return Err(VolumeError::InvalidRecord(
                    "series dims/spacing differ within a visit".into(),
                ));
            }
        }
        if !timestamp.is_finite() || timestamp < 0.0 {
            return Err(VolumeError::InvalidRecord("timestamp must be non-negative".into()));
        }
        Ok(StudyVisit { timestamp, series, series_labels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.series[0].dims
    }
}

/// One subject's ordered visit history plus an optional diagnosis date
/// (months, same epoch as the visit timestamps).
#[derive(Clone, Debug)]
pub struct PatientRecord {
    pub patient_id: String,
    pub visits: Vec<Arc<StudyVisit>>,
    pub diagnosis_date: Option<f64>,
}

impl PatientRecord {
    pub fn new(
        patient_id: impl Into<String>,
        visits: Vec<StudyVisit>,
        diagnosis_date: Option<f64>,
    ) -> Result<Self, VolumeError> {
        let visits: Vec<Arc<StudyVisit>> = visits.into_iter().map(Arc::new).collect();
        Self::from_shared(patient_id, visits, diagnosis_date)
    }

    pub fn from_shared(
        patient_id: impl Into<String>,
        visits: Vec<Arc<StudyVisit>>,
        diagnosis_date: Option<f64>,
    ) -> Result<Self, VolumeError> {
        for pair in visits.windows(2) {
            if pair[1].timestamp <= pair[0].timestamp {
                return Err(VolumeError::InvalidRecord(
                    "visit timestamps must be strictly increasing".into(),
                ));
            }
        }
        if let (Some(diag), Some(first)) = (diagnosis_date, visits.first()) {
            if diag < first.timestamp {
                return Err(VolumeError::InvalidRecord(
                    "diagnosis date precedes the first visit".into(),
                ));
            }
        }
        Ok(PatientRecord { patient_id: patient_id.into(), visits, diagnosis_date })
    }
}

/// Fine-tuning unit: the retained visit subset, its binary label and the
/// anchor used as the zero-distance reference for time deltas.
#[derive(Clone, Debug)]
pub struct LabeledSequence {
    pub patient_id: String,
    pub visits: Vec<Arc<StudyVisit>>,
    pub label: bool,
    pub anchor: f64,
}

impl LabeledSequence {
    pub fn new(
        patient_id: impl Into<String>,
        visits: Vec<Arc<StudyVisit>>,
        label: bool,
        anchor: f64,
    ) -> Result<Self, VolumeError> {
        for v in &visits {
            if label && v.timestamp >= anchor {
                return Err(VolumeError::InvalidRecord(
                    "positive sequence has a visit at or after the anchor".into(),
                ));
            }
            if v.timestamp > anchor {
                return Err(VolumeError::InvalidRecord("visit after the anchor".into()));
            }
        }
        Ok(LabeledSequence { patient_id: patient_id.into(), visits, label, anchor })
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.visits.iter().map(|v| v.timestamp).collect()
    }
}

/// Synthetic cohort layout.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct SyntheticConfig {
    pub patient_count: usize,
    pub positive_fraction: f64,
    pub visits_min: usize,
    pub visits_max: usize,
    /// Uniform screening-interval bounds in months.
    pub interval_min_months: f64,
    pub interval_max_months: f64,
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
    pub series_labels: Vec<String>,
    /// Peak added lesion contrast at the diagnosis date.
    pub lesion_amplitude: f64,
    /// Exponent of the normalized time-to-diagnosis contrast ramp.
    pub lesion_growth_exponent: f64,
    /// Standard deviation of per-voxel acquisition noise.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            patient_count: 16,
            positive_fraction: 0.25,
            visits_min: 1,
            visits_max: 6,
            interval_min_months: 1.0,
            interval_max_months: 18.0,
            dims: [48, 48, 48],
            spacing: [1.5, 1.5, 1.5],
            series_labels: vec!["b0".into(), "b150".into(), "b400".into(), "b800".into()],
            lesion_amplitude: 1.5,
            lesion_growth_exponent: 1.5,
            noise_level: 0.05,
            seed: 17,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), VolumeError> {
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return Err(VolumeError::InvalidConfig("positive_fraction outside [0, 1]".into()));
        }
        if self.patient_count == 0 {
            return Err(VolumeError::InvalidConfig("patient_count must be positive".into()));
        }
        if self.visits_min < 1 || self.visits_max < self.visits_min {
            return Err(VolumeError::InvalidConfig("need visits_max >= visits_min >= 1".into()));
        }
        if !(self.interval_min_months > 0.0 && self.interval_max_months >= self.interval_min_months)
        {
            return Err(VolumeError::InvalidConfig("invalid screening interval bounds".into()));
        }
        if self.dims.iter().any(|&d| d == 0 || d % 3 != 0) {
            return Err(VolumeError::InvalidConfig(
                "dims must be positive and divisible by 3 (stem compatibility)".into(),
            ));
        }
        if self.series_labels.is_empty() {
            return Err(VolumeError::InvalidConfig("need at least one series label".into()));
        }
        if self.lesion_amplitude < 0.0 || self.lesion_growth_exponent <= 0.0 {
            return Err(VolumeError::InvalidConfig("invalid lesion parameters".into()));
        }
        if self.noise_level < 0.0 {
            return Err(VolumeError::InvalidConfig("noise_level must be non-negative".into()));
        }
        Ok(())
    }
}

/// Patient-level split into development and test parts.
///
/// `|dev| = round(dev_fraction * n)`; deterministic in `seed`.
pub fn split_dataset(
    records: &[PatientRecord],
    dev_fraction: f64,
    seed: u64,
) -> Result<(Vec<PatientRecord>, Vec<PatientRecord>), VolumeError> {
    if records.is_empty() {
        return Err(VolumeError::InvalidRecord("cannot split an empty record set".into()));
    }
    if !(dev_fraction > 0.0 && dev_fraction < 1.0) {
        return Err(VolumeError::InvalidFraction(dev_fraction));
    }
    let n = records.len();
    let n_dev = ((dev_fraction * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed));
    let mut dev: Vec<usize> = order[..n_dev].to_vec();
    let mut test: Vec<usize> = order[n_dev..].to_vec();
    dev.sort_unstable();
    test.sort_unstable();
    Ok((
        dev.into_iter().map(|i| records[i].clone()).collect(),
        test.into_iter().map(|i| records[i].clone()).collect(),
    ))
}

/// Builds the fine-tuning view of a record.
///
/// Diagnosed records drop every visit at or after the diagnosis date and
/// anchor at that date with label 1; undiagnosed records keep all visits and
/// anchor at the last one with label 0. `None` when nothing remains.
pub fn subset_for_finetune(record: &PatientRecord) -> Option<LabeledSequence> {
    match record.diagnosis_date {
        Some(diag) => {
            let kept: Vec<Arc<StudyVisit>> =
                record.visits.iter().filter(|v| v.timestamp < diag).cloned().collect();
            if kept.is_empty() {
                None
            } else {
                Some(LabeledSequence {
                    patient_id: record.patient_id.clone(),
                    visits: kept,
                    label: true,
                    anchor: diag,
                })
            }
        }
        None => {
            let last = record.visits.last()?;
            Some(LabeledSequence {
                patient_id: record.patient_id.clone(),
                visits: record.visits.clone(),
                label: false,
                anchor: last.timestamp,
            })
        }
    }
}

/// Keeps the `max_len` most recent visits; label and anchor are unchanged.
pub fn truncate_sequence(seq: &LabeledSequence, max_len: usize) -> LabeledSequence {
    assert!(max_len >= 1, "max_len must be at least 1");
    let skip = seq.visits.len().saturating_sub(max_len);
    LabeledSequence {
        patient_id: seq.patient_id.clone(),
        visits: seq.visits[skip..].to_vec(),
        label: seq.label,
        anchor: seq.anchor,
    }
}
