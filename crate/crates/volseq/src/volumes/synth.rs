//! Deterministic synthetic cohort generator.
//!
//! Each patient gets a smooth random anatomy field shared by all visits.
//! Every configured series renders that field through its own intensity
//! remapping plus acquisition noise. Patients drawn as positive carry one
//! ellipsoidal lesion precursor whose added contrast ramps up as the visit
//! timestamp approaches the diagnosis date:
//! `amplitude * ((t - t_first) / (t_diag - t_first))^growth`.
//!
//! All randomness derives from per-patient substreams of the config seed, so
//! output is a pure function of the config and independent of generation
//! order.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{PatientRecord, StudyVisit, SyntheticConfig, Volume, VolumeError};
use crate::rng::{self, SeedRng};

/// Geometry of one synthetic lesion precursor, in voxel coordinates.
#[derive(Clone, Debug)]
pub struct LesionInfo {
    pub center: [f64; 3],
    pub radii: [f64; 3],
}

impl LesionInfo {
    /// Normalized squared ellipsoidal distance of a voxel from the center.
    fn r2(&self, z: usize, y: usize, x: usize) -> f64 {
        let dz = (z as f64 - self.center[0]) / self.radii[0];
        let dy = (y as f64 - self.center[1]) / self.radii[1];
        let dx = (x as f64 - self.center[2]) / self.radii[2];
        dz * dz + dy * dy + dx * dx
    }

    /// Smooth profile in [0, 1]: `max(0, 1 - r^2)`.
    pub fn profile(&self, z: usize, y: usize, x: usize) -> f64 {
        (1.0 - self.r2(z, y, x)).max(0.0)
    }

    /// Voxel mask of the lesion support (`r < 1`).
    pub fn mask(&self, dims: [usize; 3]) -> Vec<bool> {
        let mut out = vec![false; dims[0] * dims[1] * dims[2]];
        let mut i = 0;
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    out[i] = self.r2(z, y, x) < 1.0;
                    i += 1;
                }
            }
        }
        out
    }
}

/// Per-series intensity remapping of the shared anatomy field:
/// `out = offset + linear*a + quadratic*a^2`. Coefficients cycle with the
/// series index so each channel looks like a different acquisition.
fn series_coefficients(series_idx: usize) -> (f64, f64, f64) {
    const LINEAR: [f64; 4] = [1.0, 0.7, 0.55, 0.4];
    const QUAD: [f64; 4] = [0.0, 0.25, 0.4, 0.55];
    const OFFSET: [f64; 4] = [0.0, 0.05, 0.1, 0.15];
    let k = series_idx % 4;
    (OFFSET[k], LINEAR[k], QUAD[k])
}

/// Smooth random anatomy in [0, 1]: a handful of low-frequency cosine modes.
fn anatomy_field(dims: [usize; 3], rng: &mut SeedRng) -> Vec<f64> {
    const MODES: usize = 6;
    let mut freqs = [[0.0f64; 3]; MODES];
    let mut phases = [0.0f64; MODES];
    let mut amps = [0.0f64; MODES];
    for m in 0..MODES {
        for a in 0..3 {
            freqs[m][a] = rng.random_range(0.5..2.5);
        }
        phases[m] = rng.random_range(0.0..std::f64::consts::TAU);
        amps[m] = rng.random_range(0.4..1.0);
    }
    let mut field = vec![0.0; dims[0] * dims[1] * dims[2]];
    let mut i = 0;
    for z in 0..dims[0] {
        let fz = z as f64 / dims[0] as f64;
        for y in 0..dims[1] {
            let fy = y as f64 / dims[1] as f64;
            for x in 0..dims[2] {
                let fx = x as f64 / dims[2] as f64;
                let mut v = 0.0;
                for m in 0..MODES {
                    let arg = std::f64::consts::TAU
                        * (freqs[m][0] * fz + freqs[m][1] * fy + freqs[m][2] * fx)
                        + phases[m];
                    v += amps[m] * arg.cos();
                }
                field[i] = v;
                i += 1;
            }
        }
    }
    let lo = field.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = field.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let scale = if hi > lo { 1.0 / (hi - lo) } else { 1.0 };
    for v in &mut field {
        *v = (*v - lo) * scale;
    }
    field
}

/// Generates the cohort together with each record's lesion geometry
/// (`None` for negatives). [`generate_cohort`] is the plain view.
pub fn generate_cohort_detailed(
    cfg: &SyntheticConfig,
) -> Result<(Vec<PatientRecord>, Vec<Option<LesionInfo>>), VolumeError> {
    cfg.validate()?;
    let n = cfg.patient_count;
    let n_pos = (n as f64 * cfg.positive_fraction).round() as usize;

    // Positive assignment comes from its own substream so that patient
    // streams stay index-stable under config changes.
    let mut assign_rng = rng::substream(cfg.seed, u64::MAX - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut assign_rng);
    let mut is_positive = vec![false; n];
    for &i in order.iter().take(n_pos) {
        is_positive[i] = true;
    }

    let mut records = Vec::with_capacity(n);
    let mut lesions = Vec::with_capacity(n);
    for p in 0..n {
        let mut prng = rng::substream(cfg.seed, p as u64);
        let (record, lesion) = generate_patient(cfg, p, is_positive[p], &mut prng)?;
        records.push(record);
        lesions.push(lesion);
    }
    Ok((records, lesions))
}

pub fn generate_cohort(cfg: &SyntheticConfig) -> Result<Vec<PatientRecord>, VolumeError> {
    generate_cohort_detailed(cfg).map(|(records, _)| records)
}

fn generate_patient(
    cfg: &SyntheticConfig,
    index: usize,
    positive: bool,
    rng: &mut SeedRng,
) -> Result<(PatientRecord, Option<LesionInfo>), VolumeError> {
    let dims = cfg.dims;
    let n_visits = rng.random_range(cfg.visits_min..=cfg.visits_max);
    let mut timestamps = Vec::with_capacity(n_visits);
    let mut t = 0.0;
    for i in 0..n_visits {
        if i > 0 {
            t += rng.random_range(cfg.interval_min_months..=cfg.interval_max_months);
        }
        timestamps.push(t);
    }
    // Diagnosis strictly after the last visit keeps every visit usable for
    // fine-tuning while the contrast ramp still peaks near the end.
    let diagnosis = if positive {
        Some(timestamps.last().unwrap() + rng.random_range(1.0..=6.0))
    } else {
        None
    };

    let anatomy = anatomy_field(dims, rng);
    let lesion = if positive {
        let center = [
            rng.random_range(0.38 * dims[0] as f64..0.62 * dims[0] as f64),
            rng.random_range(0.38 * dims[1] as f64..0.62 * dims[1] as f64),
            rng.random_range(0.38 * dims[2] as f64..0.62 * dims[2] as f64),
        ];
        let radii = [
            rng.random_range(0.08 * dims[0] as f64..0.13 * dims[0] as f64).max(2.0),
            rng.random_range(0.08 * dims[1] as f64..0.13 * dims[1] as f64).max(2.0),
            rng.random_range(0.08 * dims[2] as f64..0.13 * dims[2] as f64).max(2.0),
        ];
        Some(LesionInfo { center, radii })
    } else {
        None
    };

    let noise = Normal::new(0.0, cfg.noise_level.max(f64::MIN_POSITIVE)).expect("valid noise");
    let n_vox = dims[0] * dims[1] * dims[2];
    let t_first = timestamps[0];
    let mut visits = Vec::with_capacity(n_visits);
    for &ts in &timestamps {
        // Visit field = anatomy plus the time-ramped lesion contrast.
        let contrast = match (&lesion, diagnosis) {
            (Some(_), Some(diag)) if diag > t_first => {
                let frac = ((ts - t_first) / (diag - t_first)).clamp(0.0, 1.0);
                cfg.lesion_amplitude * frac.powf(cfg.lesion_growth_exponent)
            }
            _ => 0.0,
        };
        let mut field = anatomy.clone();
        if let Some(les) = &lesion {
            if contrast > 0.0 {
                let mut i = 0;
                for z in 0..dims[0] {
                    for y in 0..dims[1] {
                        for x in 0..dims[2] {
                            let p = les.profile(z, y, x);
                            if p > 0.0 {
                                field[i] += contrast * p;
                            }
                            i += 1;
                        }
                    }
                }
            }
        }
        let mut series = Vec::with_capacity(cfg.series_labels.len());
        for s_idx in 0..cfg.series_labels.len() {
            let (offset, linear, quad) = series_coefficients(s_idx);
            let mut data = Vec::with_capacity(n_vox);
            for &a in &field {
                let v = offset + linear * a + quad * a * a
                    + if cfg.noise_level > 0.0 { noise.sample(rng) } else { 0.0 };
                data.push(v as f32);
            }
            series.push(Volume::new(1, dims, cfg.spacing, data)?);
        }
        visits.push(StudyVisit::new(ts, series, cfg.series_labels.clone())?);
    }

    let record = PatientRecord::new(format!("patient_{index:04}"), visits, diagnosis)?;
    Ok((record, lesion))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SyntheticConfig {
        SyntheticConfig {
            patient_count: 10,
            positive_fraction: 0.2,
            visits_min: 1,
            visits_max: 4,
            dims: [12, 12, 12],
            seed: 7,
            ..SyntheticConfig::default()
        }
    }

    fn cohorts_bytes_eq(a: &[PatientRecord], b: &[PatientRecord]) -> bool {
        a.len() == b.len()
            && a.iter().zip(b).all(|(ra, rb)| {
                ra.patient_id == rb.patient_id
                    && ra.diagnosis_date == rb.diagnosis_date
                    && ra.visits.len() == rb.visits.len()
                    && ra.visits.iter().zip(&rb.visits).all(|(va, vb)| {
                        va.timestamp.to_bits() == vb.timestamp.to_bits()
                            && va.series.len() == vb.series.len()
                            && va.series.iter().zip(&vb.series).all(|(sa, sb)| sa.bytes_eq(sb))
                    })
            })
    }

    #[test]
    fn positive_count_and_determinism() {
        let cfg = small_cfg();
        let a = generate_cohort(&cfg).unwrap();
        assert_eq!(a.iter().filter(|r| r.diagnosis_date.is_some()).count(), 2);
        let b = generate_cohort(&cfg).unwrap();
        assert!(cohorts_bytes_eq(&a, &b));
    }

    #[test]
    fn zero_positive_fraction_means_no_diagnoses() {
        let cfg = SyntheticConfig { positive_fraction: 0.0, ..small_cfg() };
        let records = generate_cohort(&cfg).unwrap();
        assert!(records.iter().all(|r| r.diagnosis_date.is_none()));
    }

    #[test]
    fn lesion_contrast_grows_between_first_and_last_visit() {
        let cfg = SyntheticConfig {
            patient_count: 6,
            positive_fraction: 0.5,
            visits_min: 3,
            visits_max: 5,
            lesion_amplitude: 2.0,
            noise_level: 0.01,
            dims: [12, 12, 12],
            seed: 21,
            ..SyntheticConfig::default()
        };
        let (records, lesions) = generate_cohort_detailed(&cfg).unwrap();
        let mut checked = 0;
        for (r, les) in records.iter().zip(&lesions) {
            let (Some(les), Some(_)) = (les, r.diagnosis_date) else { continue };
            if r.visits.len() < 2 {
                continue;
            }
            let mask = les.mask(cfg.dims);
            let masked_mean = |v: &Volume| {
                let mut sum = 0.0;
                let mut n = 0usize;
                for (i, &m) in mask.iter().enumerate() {
                    if m {
                        sum += v.data[i] as f64;
                        n += 1;
                    }
                }
                sum / n as f64
            };
            let first = masked_mean(&r.visits.first().unwrap().series[0]);
            let last = masked_mean(&r.visits.last().unwrap().series[0]);
            assert!(
                (last - first).abs() > 0.0,
                "no masked intensity change for {}",
                r.patient_id
            );
            assert!(last > first, "lesion should brighten toward diagnosis");
            checked += 1;
        }
        assert!(checked > 0, "cohort produced no multi-visit positives");
    }

    #[test]
    fn invalid_config_rejected_before_generation() {
        let cfg = SyntheticConfig { positive_fraction: 1.5, ..small_cfg() };
        assert!(matches!(generate_cohort(&cfg), Err(VolumeError::InvalidConfig(_))));
        let cfg = SyntheticConfig { dims: [10, 12, 12], ..small_cfg() };
        assert!(matches!(generate_cohort(&cfg), Err(VolumeError::InvalidConfig(_))));
    }
}
