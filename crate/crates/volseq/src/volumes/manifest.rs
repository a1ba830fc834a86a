//! Cohort manifest: one JSON document describing every patient, visit and
//! series, with relative paths to the `.lsv` volume files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{load_volume, save_volume, PatientRecord, StudyVisit, VolumeError};

pub const MANIFEST_NAME: &str = "cohort.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CohortManifest {
    pub format_version: u32,
    pub patients: Vec<ManifestPatient>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestPatient {
    pub patient_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diagnosis_date: Option<f64>,
    pub visits: Vec<ManifestVisit>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestVisit {
    pub timestamp: f64,
    pub series_labels: Vec<String>,
    /// `.lsv` paths relative to the manifest directory, one per series.
    pub paths: Vec<String>,
}

/// Writes all volumes plus the manifest under `dir`; returns the manifest.
pub fn write_cohort(records: &[PatientRecord], dir: impl AsRef<Path>) -> Result<CohortManifest, VolumeError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    let mut patients = Vec::with_capacity(records.len());
    for record in records {
        std::fs::create_dir_all(dir.join(&record.patient_id))?;
        let mut visits = Vec::with_capacity(record.visits.len());
        for (vi, visit) in record.visits.iter().enumerate() {
            let mut paths = Vec::with_capacity(visit.series.len());
            for (si, series) in visit.series.iter().enumerate() {
                let rel = format!("{}/v{vi:03}_s{si}.lsv", record.patient_id);
                save_volume(series, dir.join(&rel))?;
                paths.push(rel);
            }
            visits.push(ManifestVisit {
                timestamp: visit.timestamp,
                series_labels: visit.series_labels.clone(),
                paths,
            });
        }
        patients.push(ManifestPatient {
            patient_id: record.patient_id.clone(),
            diagnosis_date: record.diagnosis_date,
            visits,
        });
    }
    let manifest = CohortManifest { format_version: MANIFEST_VERSION, patients };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| VolumeError::Manifest(e.to_string()))?;
    std::fs::write(dir.join(MANIFEST_NAME), json)?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<CohortManifest, VolumeError> {
    let path: PathBuf = dir.as_ref().join(MANIFEST_NAME);
    let json = std::fs::read_to_string(&path)?;
    let manifest: CohortManifest =
        serde_json::from_str(&json).map_err(|e| VolumeError::Manifest(e.to_string()))?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(VolumeError::Manifest(format!(
            "unsupported manifest version {} (expected {MANIFEST_VERSION})",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

/// Loads the full cohort (manifest plus every referenced volume).
pub fn read_cohort(dir: impl AsRef<Path>) -> Result<Vec<PatientRecord>, VolumeError> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    let mut records = Vec::with_capacity(manifest.patients.len());
    for p in &manifest.patients {
        let mut visits = Vec::with_capacity(p.visits.len());
        for v in &p.visits {
            if v.paths.len() != v.series_labels.len() {
                return Err(VolumeError::Manifest(format!(
                    "visit of {} lists {} paths but {} labels",
                    p.patient_id,
                    v.paths.len(),
                    v.series_labels.len()
                )));
            }
            let mut series = Vec::with_capacity(v.paths.len());
            for rel in &v.paths {
                series.push(load_volume(dir.join(rel))?);
            }
            visits.push(StudyVisit::new(v.timestamp, series, v.series_labels.clone())?);
        }
        records.push(PatientRecord::new(p.patient_id.clone(), visits, p.diagnosis_date)?);
    }
    Ok(records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volumes::{generate_cohort, SyntheticConfig};

    #[test]
    fn cohort_round_trips_through_disk() {
        let cfg = SyntheticConfig {
            patient_count: 3,
            positive_fraction: 0.34,
            visits_min: 1,
            visits_max: 3,
            dims: [9, 9, 9],
            series_labels: vec!["b0".into(), "b800".into()],
            seed: 5,
            ..SyntheticConfig::default()
        };
        let records = generate_cohort(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_cohort(&records, dir.path()).unwrap();
        let back = read_cohort(dir.path()).unwrap();
        assert_eq!(back.len(), records.len());
        for (a, b) in records.iter().zip(&back) {
            assert_eq!(a.patient_id, b.patient_id);
            assert_eq!(a.diagnosis_date, b.diagnosis_date);
            assert_eq!(a.visits.len(), b.visits.len());
            for (va, vb) in a.visits.iter().zip(&b.visits) {
                assert_eq!(va.timestamp, vb.timestamp);
                for (sa, sb) in va.series.iter().zip(&vb.series) {
                    assert!(sa.bytes_eq(sb));
                }
            }
        }
    }
}
