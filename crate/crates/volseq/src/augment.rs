//! Training-time augmentation: random crops, series selection or stacking,
//! intensity jitter, axis flips and 90-degree rotations.
//!
//! Self-distillation consumes four single-series views per visit (two global,
//! two local crops); order prediction and fine-tuning consume one multi-
//! channel crop of all series stacked. Fixed pipeline order: series select /
//! stack, crop, intensity, flip/rotate.

use rand::Rng;
use thiserror::Error;

use crate::volumes::{StudyVisit, Volume};

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("crop of {requested}^3 exceeds volume dims {dims:?}")]
    CropTooLarge { requested: usize, dims: [usize; 3] },
    #[error("rotation requested on non-cubic volume with dims {dims:?}")]
    NonCubicRotation { dims: [usize; 3] },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ViewKind {
    Global,
    Local,
}

/// Cubic crop specification for one view.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct ViewSpec {
    pub crop_size: usize,
    pub kind: ViewKind,
}

impl ViewSpec {
    pub fn global() -> Self {
        ViewSpec { crop_size: 72, kind: ViewKind::Global }
    }

    pub fn local() -> Self {
        ViewSpec { crop_size: 48, kind: ViewKind::Local }
    }

    pub fn sized(self, crop_size: usize) -> Self {
        ViewSpec { crop_size, ..self }
    }
}

/// Probabilities and magnitudes of the stochastic transforms.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AugmentConfig {
    /// Per-axis flip probability.
    pub p_flip: f64,
    pub p_rot90: f64,
    pub p_intensity: f64,
    /// Multiplicative intensity interval.
    pub scale_range: [f64; 2],
    /// Additive interval, as a fraction of the per-volume intensity range.
    pub shift_range: [f64; 2],
    pub global_view: ViewSpec,
    pub local_view: ViewSpec,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_flip: 0.5,
            p_rot90: 0.5,
            p_intensity: 1.0,
            scale_range: [0.9, 1.1],
            shift_range: [-0.1, 0.1],
            global_view: ViewSpec::global(),
            local_view: ViewSpec::local(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, p) in
            [("p_flip", self.p_flip), ("p_rot90", self.p_rot90), ("p_intensity", self.p_intensity)]
        {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} = {p} outside [0, 1]"));
            }
        }
        if self.scale_range[0] <= 0.0 || self.scale_range[1] < self.scale_range[0] {
            return Err("scale_range must be positive and ordered".into());
        }
        if self.shift_range[1] < self.shift_range[0] {
            return Err("shift_range must be ordered".into());
        }
        Ok(())
    }
}

/// Uniform crop origin over all valid positions; exposed so distributional
/// tests can sample origins without copying voxel data.
pub fn sample_crop_origin<R: Rng>(
    dims: [usize; 3],
    s: usize,
    rng: &mut R,
) -> Result<[usize; 3], AugmentError> {
    if dims.iter().any(|&d| d < s) {
        return Err(AugmentError::CropTooLarge { requested: s, dims });
    }
    let mut origin = [0usize; 3];
    for a in 0..3 {
        origin[a] = rng.random_range(0..=dims[a] - s);
    }
    Ok(origin)
}

/// Cubic crop of edge `s` at a uniformly random origin; channels preserved.
pub fn random_crop<R: Rng>(v: &Volume, s: usize, rng: &mut R) -> Result<Volume, AugmentError> {
    let origin = sample_crop_origin(v.dims, s, rng)?;
    Ok(crop_at(v, origin, s))
}

/// Deterministic crop centered per axis (floor on odd remainders).
pub fn central_crop(v: &Volume, s: usize) -> Result<Volume, AugmentError> {
    if v.dims.iter().any(|&d| d < s) {
        return Err(AugmentError::CropTooLarge { requested: s, dims: v.dims });
    }
    let origin = [(v.dims[0] - s) / 2, (v.dims[1] - s) / 2, (v.dims[2] - s) / 2];
    Ok(crop_at(v, origin, s))
}

pub fn crop_at(v: &Volume, origin: [usize; 3], s: usize) -> Volume {
    let mut out = Volume::zeros(v.channels, [s, s, s], v.spacing);
    for c in 0..v.channels {
        for z in 0..s {
            for y in 0..s {
                let src = v.index(c, origin[0] + z, origin[1] + y, origin[2]);
                let dst = out.index(c, z, y, 0);
                out.data[dst..dst + s].copy_from_slice(&v.data[src..src + s]);
            }
        }
    }
    out
}

/// Uniformly samples one series of the visit, unmodified.
pub fn sample_series<R: Rng>(visit: &StudyVisit, rng: &mut R) -> Volume {
    let idx = rng.random_range(0..visit.series.len());
    visit.series[idx].clone()
}

/// Concatenates all series into one multi-channel volume, channel order
/// matching `series_labels`.
pub fn stack_series(visit: &StudyVisit) -> Volume {
    let dims = visit.dims();
    let n = visit.series[0].voxels_per_channel();
    let mut data = Vec::with_capacity(n * visit.series.len());
    for s in &visit.series {
        debug_assert_eq!(s.dims, dims, "visit invariant: series share dims");
        data.extend_from_slice(&s.data);
    }
    Volume { channels: visit.series.len(), dims, spacing: visit.series[0].spacing, data }
}

/// With probability `p_intensity`: `out = v*a + b*range(v)` with
/// `a ~ U(scale_range)` and `b ~ U(shift_range)`; otherwise the identity.
pub fn intensity_shift_scale<R: Rng>(v: &Volume, cfg: &AugmentConfig, rng: &mut R) -> Volume {
    if !rng.random_bool(cfg.p_intensity) {
        return v.clone();
    }
    let a = rng.random_range(cfg.scale_range[0]..=cfg.scale_range[1]);
    let b = rng.random_range(cfg.shift_range[0]..=cfg.shift_range[1]);
    let (lo, hi) = v.intensity_range();
    let shift = b * (hi - lo) as f64;
    let mut out = v.clone();
    for val in &mut out.data {
        *val = (*val as f64 * a + shift) as f32;
    }
    out
}

fn flip_axis(v: &mut Volume, axis: usize) {
    let dims = v.dims;
    let half = dims[axis] / 2;
    for c in 0..v.channels {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let coord = [z, y, x];
                    if coord[axis] >= half {
                        continue;
                    }
                    let mut other = coord;
                    other[axis] = dims[axis] - 1 - coord[axis];
                    let i = v.index(c, z, y, x);
                    let j = v.index(c, other[0], other[1], other[2]);
                    v.data.swap(i, j);
                }
            }
        }
    }
}

/// One 90-degree rotation about `axis`; `clockwise` picks the direction.
/// Requires cubic spatial dims (pure voxel permutation).
fn rot90(v: &Volume, axis: usize, clockwise: bool) -> Volume {
    let n = v.dims[0];
    debug_assert!(v.dims.iter().all(|&d| d == n));
    let mut out = v.clone();
    for c in 0..v.channels {
        for z in 0..n {
            for y in 0..n {
                for x in 0..n {
                    // Rotate the plane perpendicular to `axis`.
                    let (sz, sy, sx) = match (axis, clockwise) {
                        (0, true) => (z, n - 1 - x, y),
                        (0, false) => (z, x, n - 1 - y),
                        (1, true) => (n - 1 - x, y, z),
                        (1, false) => (x, y, n - 1 - z),
                        (2, true) => (n - 1 - y, z, x),
                        _ => (y, n - 1 - z, x),
                    };
                    let dst = out.index(c, z, y, x);
                    out.data[dst] = v.data[v.index(c, sz, sy, sx)];
                }
            }
        }
    }
    out
}

/// Independent per-axis flips, then (with `p_rot90`) one 90-degree rotation
/// about a uniformly chosen axis in a uniformly chosen direction. Pure voxel
/// permutation: the intensity multiset is preserved exactly.
pub fn random_flip_rot90<R: Rng>(
    v: &Volume,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Volume, AugmentError> {
    let cubic = v.dims[0] == v.dims[1] && v.dims[1] == v.dims[2];
    if cfg.p_rot90 > 0.0 && !cubic {
        return Err(AugmentError::NonCubicRotation { dims: v.dims });
    }
    let mut out = v.clone();
    for axis in 0..3 {
        if rng.random_bool(cfg.p_flip) {
            flip_axis(&mut out, axis);
        }
    }
    if cfg.p_rot90 > 0.0 && rng.random_bool(cfg.p_rot90) {
        let axis = rng.random_range(0..3usize);
        let clockwise = rng.random_bool(0.5);
        out = rot90(&out, axis, clockwise);
    }
    Ok(out)
}

/// The self-distillation view set: two global and two local views, each an
/// independently augmented single-series crop.
pub fn multi_crop<R: Rng>(
    visit: &StudyVisit,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<([Volume; 2], [Volume; 2]), AugmentError> {
    let mut make = |spec: &ViewSpec, rng: &mut R| -> Result<Volume, AugmentError> {
        let series = sample_series(visit, rng);
        let cropped = random_crop(&series, spec.crop_size, rng)?;
        let jittered = intensity_shift_scale(&cropped, cfg, rng);
        random_flip_rot90(&jittered, cfg, rng)
    };
    let g0 = make(&cfg.global_view, rng)?;
    let g1 = make(&cfg.global_view, rng)?;
    let l0 = make(&cfg.local_view, rng)?;
    let l1 = make(&cfg.local_view, rng)?;
    Ok(([g0, g1], [l0, l1]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::volumes::StudyVisit;

    fn ramp_volume(dims: [usize; 3]) -> Volume {
        let n = dims[0] * dims[1] * dims[2];
        let data: Vec<f32> = (0..n).map(|i| (i as f32 * 0.37).sin()).collect();
        Volume::new(1, dims, [1.0; 3], data).unwrap()
    }

    fn sorted_bits(v: &Volume) -> Vec<u32> {
        let mut bits: Vec<u32> = v.data.iter().map(|f| f.to_bits()).collect();
        bits.sort_unstable();
        bits
    }

    #[test]
    fn full_size_crop_is_identity() {
        let v = ramp_volume([12, 12, 12]);
        let mut r = rng::stream(1);
        let c = random_crop(&v, 12, &mut r).unwrap();
        assert!(c.bytes_eq(&v));
    }

    #[test]
    fn oversized_crop_is_an_error() {
        let v = ramp_volume([72, 72, 72]);
        let mut r = rng::stream(1);
        assert!(matches!(
            random_crop(&v, 96, &mut r),
            Err(AugmentError::CropTooLarge { requested: 96, .. })
        ));
    }

    #[test]
    fn crop_origins_are_uniform() {
        // 48^3 from 72^3: per-axis origins uniform over 0..=24.
        let mut r = rng::stream(99);
        let mut counts = [[0usize; 25]; 3];
        let n = 10_000;
        for _ in 0..n {
            let o = sample_crop_origin([72, 72, 72], 48, &mut r).unwrap();
            for a in 0..3 {
                assert!(o[a] <= 24);
                counts[a][o[a]] += 1;
            }
        }
        let expected = n as f64 / 25.0;
        for axis in counts {
            let chi2: f64 =
                axis.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
            // df = 24; 60 is far out in the tail, seed is fixed.
            assert!(chi2 < 60.0, "chi-square {chi2} too large for uniform origins");
        }
    }

    #[test]
    fn series_sampling_is_uniform_and_unmodified() {
        let dims = [6, 6, 6];
        let series: Vec<Volume> = (0..4)
            .map(|s| {
                let data = vec![s as f32; 216];
                Volume::new(1, dims, [1.0; 3], data).unwrap()
            })
            .collect();
        let visit = StudyVisit::new(
            0.0,
            series.clone(),
            vec!["b0".into(), "b150".into(), "b400".into(), "b800".into()],
        )
        .unwrap();

        let single =
            StudyVisit::new(0.0, vec![series[2].clone()], vec!["b400".into()]).unwrap();
        let mut r = rng::stream(3);
        for _ in 0..10 {
            assert!(sample_series(&single, &mut r).bytes_eq(&series[2]));
        }

        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let v = sample_series(&visit, &mut r);
            let idx = v.data[0] as usize;
            assert!(v.bytes_eq(&series[idx]));
            counts[idx] += 1;
        }
        for c in counts {
            let freq = c as f64 / 10_000.0;
            assert!((freq - 0.25).abs() < 0.02, "series frequency {freq} off 0.25");
        }
    }

    #[test]
    fn stack_preserves_order_and_bytes() {
        let dims = [6, 6, 6];
        let series: Vec<Volume> = (0..4)
            .map(|s| {
                let data: Vec<f32> = (0..216).map(|i| (s * 1000 + i) as f32).collect();
                Volume::new(1, dims, [1.0; 3], data).unwrap()
            })
            .collect();
        let visit = StudyVisit::new(
            0.0,
            series.clone(),
            vec!["b0".into(), "b150".into(), "b400".into(), "b800".into()],
        )
        .unwrap();
        let stacked = stack_series(&visit);
        assert_eq!(stacked.channels, 4);
        for (c, s) in series.iter().enumerate() {
            assert!(stacked.channel(c).bytes_eq(s));
        }

        let single = StudyVisit::new(0.0, vec![series[0].clone()], vec!["b0".into()]).unwrap();
        assert!(stack_series(&single).bytes_eq(&series[0]));
    }

    #[test]
    fn intensity_identity_and_closed_form() {
        let v = ramp_volume([6, 6, 6]);
        let cfg = AugmentConfig {
            p_intensity: 1.0,
            scale_range: [1.0, 1.0],
            shift_range: [0.0, 0.0],
            ..AugmentConfig::default()
        };
        let mut r = rng::stream(4);
        assert!(intensity_shift_scale(&v, &cfg, &mut r).bytes_eq(&v));

        let ones = Volume::new(1, [4, 4, 4], [1.0; 3], vec![1.0; 64]).unwrap();
        let cfg = AugmentConfig { scale_range: [1.1, 1.1], ..cfg };
        let out = intensity_shift_scale(&ones, &cfg, &mut r);
        assert!(out.data.iter().all(|&x| x == 1.1f32));
    }

    #[test]
    fn intensity_scale_draws_are_uniform() {
        // Constant volume with zero shift exposes the sampled scale directly.
        let ones = Volume::new(1, [2, 2, 2], [1.0; 3], vec![1.0; 8]).unwrap();
        let cfg = AugmentConfig {
            p_intensity: 1.0,
            scale_range: [0.9, 1.1],
            shift_range: [0.0, 0.0],
            ..AugmentConfig::default()
        };
        let mut r = rng::stream(12);
        let n = 10_000;
        let mut bins = [0usize; 10];
        let mut sum = 0.0;
        for _ in 0..n {
            let a = intensity_shift_scale(&ones, &cfg, &mut r).data[0] as f64;
            assert!((0.9..=1.1001).contains(&a));
            sum += a;
            let b = (((a - 0.9) / 0.2) * 10.0).floor().clamp(0.0, 9.0) as usize;
            bins[b] += 1;
        }
        assert!((sum / n as f64 - 1.0).abs() < 0.005);
        let expected = n as f64 / 10.0;
        let chi2: f64 = bins.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        assert!(chi2 < 35.0, "chi-square {chi2} too large for uniform scales");
    }

    #[test]
    fn flips_are_involutions_and_rotations_have_order_four() {
        let v = ramp_volume([5, 5, 5]);
        for axis in 0..3 {
            let mut w = v.clone();
            flip_axis(&mut w, axis);
            assert!(!w.bytes_eq(&v));
            flip_axis(&mut w, axis);
            assert!(w.bytes_eq(&v));
        }
        for axis in 0..3 {
            for dir in [true, false] {
                let mut w = v.clone();
                for _ in 0..4 {
                    w = rot90(&w, axis, dir);
                }
                assert!(w.bytes_eq(&v), "rot90^4 about axis {axis} not identity");
            }
        }
    }

    #[test]
    fn flip_rot_preserves_voxel_multiset() {
        let v = ramp_volume([6, 6, 6]);
        let cfg = AugmentConfig::default();
        let mut r = rng::stream(8);
        for _ in 0..25 {
            let out = random_flip_rot90(&v, &cfg, &mut r).unwrap();
            assert_eq!(sorted_bits(&out), sorted_bits(&v));
        }
    }

    #[test]
    fn rotation_on_non_cubic_volume_is_an_error() {
        let v = Volume::zeros(1, [4, 6, 6], [1.0; 3]);
        let cfg = AugmentConfig::default();
        let mut r = rng::stream(2);
        assert!(matches!(
            random_flip_rot90(&v, &cfg, &mut r),
            Err(AugmentError::NonCubicRotation { .. })
        ));
        // Flips alone are fine on any dims.
        let cfg = AugmentConfig { p_rot90: 0.0, ..cfg };
        assert!(random_flip_rot90(&v, &cfg, &mut r).is_ok());
    }

    #[test]
    fn multi_crop_shapes_and_identity_case() {
        let dims = [72, 72, 72];
        let series: Vec<Volume> = (0..2)
            .map(|s| {
                let n = dims[0] * dims[1] * dims[2];
                let data: Vec<f32> = (0..n).map(|i| ((i + s * 31) as f32 * 0.01).cos()).collect();
                Volume::new(1, dims, [1.5; 3], data).unwrap()
            })
            .collect();
        let visit =
            StudyVisit::new(0.0, series.clone(), vec!["b0".into(), "b150".into()]).unwrap();
        let cfg = AugmentConfig::default();
        let mut r = rng::stream(5);
        let (globals, locals) = multi_crop(&visit, &cfg, &mut r).unwrap();
        for g in &globals {
            assert_eq!((g.channels, g.dims), (1, [72, 72, 72]));
        }
        for l in &locals {
            assert_eq!((l.channels, l.dims), (1, [48, 48, 48]));
        }

        // All probabilities zero, one series, crop = source size: identity.
        let single = StudyVisit::new(0.0, vec![series[0].clone()], vec!["b0".into()]).unwrap();
        let cfg = AugmentConfig {
            p_flip: 0.0,
            p_rot90: 0.0,
            p_intensity: 0.0,
            global_view: ViewSpec::global(),
            local_view: ViewSpec::local().sized(72),
            ..cfg
        };
        let (globals, locals) = multi_crop(&single, &cfg, &mut r).unwrap();
        for v in globals.iter().chain(locals.iter()) {
            assert!(v.bytes_eq(&series[0]));
        }
    }
}
