//! Crop to the nonzero region, resample to a target spacing, z-score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{foreground_bbox, index, voxel_count, volume_stats, BoundingBox, Dims, LabelMask, Spacing, Volume};

pub const STD_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub std: f64,
    /// Set when the input had zero variance; output is all zeros.
    pub constant: bool,
}

/// Everything needed to map a prediction back to the original grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessRecord {
    pub original_dims: Dims,
    pub crop_box: BoundingBox,
    pub original_spacing: Spacing,
    pub target_spacing: Spacing,
    pub normalization: Normalization,
}

impl PreprocessRecord {
    /// Grid size after cropping and resampling.
    pub fn resampled_dims(&self) -> Dims {
        resampled_dims(self.crop_box.extent(), self.original_spacing, self.target_spacing)
    }
}

/// Output dims `round(dims * spacing / target)`, at least 1 per axis.
pub fn resampled_dims(dims: Dims, spacing: Spacing, target: Spacing) -> Dims {
    let mut out = [1; 3];
    for a in 0..3 {
        out[a] = ((dims[a] as f64 * spacing[a] / target[a]).round() as usize).max(1);
    }
    out
}

/// Per-axis median of a set of spacings.
pub fn median_spacing(spacings: &[Spacing]) -> Result<Spacing> {
    if spacings.is_empty() {
        return Err(Error::Config("median spacing of an empty dataset".into()));
    }
    let mut out = [0.0; 3];
    for a in 0..3 {
        let mut v: Vec<f64> = spacings.iter().map(|s| s[a]).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        out[a] = if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        };
    }
    Ok(out)
}

/// `(v - mean) / max(std, 1e-8)` over the whole volume.
pub fn zscore_normalize(v: &Volume) -> Result<(Volume, Normalization)> {
    let s = volume_stats(v, None)?;
    let constant = s.max == s.min;
    let data = if constant {
        vec![0.0; v.len()]
    } else {
        let denom = s.std.max(STD_EPSILON);
        v.data()
            .iter()
            .map(|&x| ((f64::from(x) - s.mean) / denom) as f32)
            .collect()
    };
    let out = Volume::new(v.dims(), v.spacing(), data)?;
    Ok((
        out,
        Normalization {
            mean: s.mean,
            std: s.std,
            constant,
        },
    ))
}

/// One output sample along an axis: `lo`, `hi` source indices and the
/// weight of `hi`.
#[derive(Debug, Clone, Copy)]
struct Tap {
    lo: usize,
    hi: usize,
    frac: f64,
}

/// Source positions for `n_out` voxel centers; `ratio` is output spacing
/// over input spacing. Center `i` sits at `(i + 0.5) * ratio - 0.5` in
/// source voxel units, clamped to `[0, n_in - 1]`.
fn taps(n_in: usize, n_out: usize, ratio: f64, mode: Interpolation) -> Vec<Tap> {
    let max = (n_in - 1) as f64;
    (0..n_out)
        .map(|i| {
            let c = ((i as f64 + 0.5) * ratio - 0.5).clamp(0.0, max);
            match mode {
                Interpolation::Nearest => {
                    let k = ((c + 0.5).floor() as usize).min(n_in - 1);
                    Tap {
                        lo: k,
                        hi: k,
                        frac: 0.0,
                    }
                }
                Interpolation::Trilinear => {
                    let lo = c.floor() as usize;
                    let hi = (lo + 1).min(n_in - 1);
                    Tap {
                        lo,
                        hi,
                        frac: c - lo as f64,
                    }
                }
            }
        })
        .collect()
}

/// Separable resampling along each axis in turn.
fn resample_grid(data: &[f64], dims: Dims, out_dims: Dims, ratio: [f64; 3], mode: Interpolation) -> Vec<f64> {
    let mut cur = data.to_vec();
    let mut cur_dims = dims;
    for axis in 0..3 {
        if cur_dims[axis] == out_dims[axis] && ratio[axis] == 1.0 {
            continue;
        }
        let t = taps(cur_dims[axis], out_dims[axis], ratio[axis], mode);
        let mut next_dims = cur_dims;
        next_dims[axis] = out_dims[axis];
        let mut next = vec![0.0; voxel_count(next_dims)];
        for z in 0..next_dims[2] {
            for y in 0..next_dims[1] {
                for x in 0..next_dims[0] {
                    let o = [x, y, z];
                    let tap = t[o[axis]];
                    let mut a = o;
                    a[axis] = tap.lo;
                    let mut b = o;
                    b[axis] = tap.hi;
                    let va = cur[index(cur_dims, a[0], a[1], a[2])];
                    let vb = cur[index(cur_dims, b[0], b[1], b[2])];
                    next[index(next_dims, x, y, z)] = if tap.frac == 0.0 {
                        va
                    } else {
                        va + tap.frac * (vb - va)
                    };
                }
            }
        }
        cur = next;
        cur_dims = next_dims;
    }
    cur
}

fn ratios(from: Spacing, to: Spacing) -> [f64; 3] {
    [to[0] / from[0], to[1] / from[1], to[2] / from[2]]
}

fn check_target(target: Spacing) -> Result<()> {
    if target.iter().any(|t| !t.is_finite() || *t <= 0.0) {
        return Err(Error::Config(format!("target spacing must be positive, got {target:?}")));
    }
    Ok(())
}

/// Resample to `target` spacing.
pub fn resample(v: &Volume, target: Spacing, mode: Interpolation) -> Result<Volume> {
    check_target(target)?;
    let out_dims = resampled_dims(v.dims(), v.spacing(), target);
    let src: Vec<f64> = v.data().iter().map(|&x| f64::from(x)).collect();
    let out = resample_grid(&src, v.dims(), out_dims, ratios(v.spacing(), target), mode);
    Volume::new(out_dims, target, out.into_iter().map(|x| x as f32).collect())
}

fn resample_mask_to(m: &LabelMask, out_dims: Dims, spacing: Spacing) -> Result<LabelMask> {
    let src: Vec<f64> = m.data().iter().map(|&x| f64::from(x)).collect();
    let out = resample_grid(&src, m.dims(), out_dims, ratios(m.spacing(), spacing), Interpolation::Nearest);
    LabelMask::new(out_dims, spacing, out.into_iter().map(|x| x as u8).collect())
}

/// Nearest-neighbour mask resampling.
pub fn resample_mask(m: &LabelMask, target: Spacing) -> Result<LabelMask> {
    check_target(target)?;
    resample_mask_to(m, resampled_dims(m.dims(), m.spacing(), target), target)
}

/// Crop, resample, normalize. The mask follows the crop and is resampled
/// with nearest neighbour; only the image is normalized.
pub fn preprocess_case(
    image: &Volume,
    mask: Option<&LabelMask>,
    target: Spacing,
) -> Result<(Volume, Option<LabelMask>, PreprocessRecord)> {
    check_target(target)?;
    if let Some(m) = mask {
        m.check_same_geometry(image.dims(), image.spacing())?;
    }
    let crop_box = foreground_bbox(image)?;
    let cropped = image.crop(&crop_box)?;
    let resampled = resample(&cropped, target, Interpolation::Trilinear)?;
    let (normalized, normalization) = zscore_normalize(&resampled)?;
    let mask = mask
        .map(|m| m.crop(&crop_box).and_then(|c| resample_mask(&c, target)))
        .transpose()?;
    let record = PreprocessRecord {
        original_dims: image.dims(),
        crop_box,
        original_spacing: image.spacing(),
        target_spacing: target,
        normalization,
    };
    Ok((normalized, mask, record))
}

/// Map a mask on the preprocessed grid back to the original image grid.
pub fn restore_to_original(mask: &LabelMask, record: &PreprocessRecord) -> Result<LabelMask> {
    let expected = record.resampled_dims();
    if mask.dims() != expected {
        return Err(Error::Geometry(format!(
            "mask dims {:?} do not match preprocessed dims {:?}",
            mask.dims(),
            expected
        )));
    }
    let on_target = LabelMask::new(mask.dims(), record.target_spacing, mask.data().to_vec())?;
    let cropped = resample_mask_to(&on_target, record.crop_box.extent(), record.original_spacing)?;
    cropped.pad_into(record.original_dims, record.crop_box.lo)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn vol(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Volume {
        Volume::new(dims, spacing, data).unwrap()
    }

    #[test]
    fn zscore_examples() {
        let (z, n) = zscore_normalize(&vol([3, 1, 1], [1.0; 3], vec![1.0, 2.0, 3.0])).unwrap();
        for (got, want) in z.data().iter().zip([-1.2247, 0.0, 1.2247]) {
            assert_abs_diff_eq!(f64::from(*got), want, epsilon = 1e-4);
        }
        assert!(!n.constant);

        let (z, n) = zscore_normalize(&vol([4, 1, 1], [1.0; 3], vec![0.1; 4])).unwrap();
        assert!(z.data().iter().all(|&x| x == 0.0));
        assert!(n.constant);

        let (z2, _) = zscore_normalize(&z).unwrap();
        assert_eq!(z2.data(), z.data());
    }

    #[test]
    fn zscore_is_idempotent_on_normalized_input() {
        let data: Vec<f32> = (0..200).map(|i| ((i * 37) % 101) as f32 * 0.3 - 4.0).collect();
        let (z, _) = zscore_normalize(&vol([200, 1, 1], [1.0; 3], data)).unwrap();
        let (z2, _) = zscore_normalize(&z).unwrap();
        for (a, b) in z.data().iter().zip(z2.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn identity_resample() {
        let data: Vec<f32> = (0..60).map(|i| (i as f32).sin()).collect();
        let v = vol([5, 4, 3], [0.7, 1.0, 2.5], data);
        let r = resample(&v, [0.7, 1.0, 2.5], Interpolation::Trilinear).unwrap();
        assert_eq!(r.dims(), v.dims());
        for (a, b) in r.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    /// Direct per-voxel trilinear evaluation, no separability.
    fn trilinear_oracle(v: &Volume, target: Spacing) -> Vec<f64> {
        let d = v.dims();
        let od = resampled_dims(d, v.spacing(), target);
        let mut out = Vec::new();
        for z in 0..od[2] {
            for y in 0..od[1] {
                for x in 0..od[0] {
                    let o = [x, y, z];
                    let mut c = [0.0; 3];
                    for a in 0..3 {
                        c[a] = ((o[a] as f64 + 0.5) * target[a] / v.spacing()[a] - 0.5)
                            .clamp(0.0, (d[a] - 1) as f64);
                    }
                    let mut acc = 0.0;
                    for corner in 0..8 {
                        let mut w = 1.0;
                        let mut p = [0; 3];
                        for a in 0..3 {
                            let lo = c[a].floor();
                            let f = c[a] - lo;
                            if corner >> a & 1 == 1 {
                                p[a] = (lo as usize + 1).min(d[a] - 1);
                                w *= f;
                            } else {
                                p[a] = lo as usize;
                                w *= 1.0 - f;
                            }
                        }
                        acc += w * f64::from(v.get(p[0], p[1], p[2]));
                    }
                    out.push(acc);
                }
            }
        }
        out
    }

    #[test]
    fn ramp_upsample_matches_oracle() {
        let v = vol([4, 1, 1], [1.0; 3], vec![0.0, 1.0, 2.0, 3.0]);
        let r = resample(&v, [0.5, 1.0, 1.0], Interpolation::Trilinear).unwrap();
        assert_eq!(r.dims(), [8, 1, 1]);
        let d = r.data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[7], 3.0);
        assert!(d.windows(2).all(|w| w[0] <= w[1]));
        for (a, b) in d.iter().zip(trilinear_oracle(&v, [0.5, 1.0, 1.0])) {
            assert_abs_diff_eq!(f64::from(*a), b, epsilon = 1e-6);
        }
    }

    #[test]
    fn anisotropic_resample_matches_oracle() {
        let data: Vec<f32> = (0..120).map(|i| ((i * 7919) % 113) as f32 / 10.0).collect();
        let v = vol([6, 5, 4], [1.0, 0.8, 2.0], data);
        let target = [0.7, 1.3, 1.1];
        let r = resample(&v, target, Interpolation::Trilinear).unwrap();
        for (a, b) in r.data().iter().zip(trilinear_oracle(&v, target)) {
            assert_abs_diff_eq!(f64::from(*a), b, epsilon = 1e-5);
        }
    }

    #[test]
    fn nearest_preserves_value_set() {
        let data: Vec<u8> = (0..64).map(|i| u8::from(i % 3 == 0)).collect();
        let m = LabelMask::new([4, 4, 4], [1.0; 3], data).unwrap();
        for t in [[0.5; 3], [1.7, 0.9, 1.3]] {
            let r = resample_mask(&m, t).unwrap();
            assert!(r.data().iter().all(|&v| v <= 1));
        }
        let as_vol = resample(&m.to_volume(), [0.6; 3], Interpolation::Nearest).unwrap();
        assert!(as_vol.data().iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn preprocess_full_support_only_normalizes() {
        let data: Vec<f32> = (0..27).map(|i| 1.0 + i as f32).collect();
        let v = vol([3, 3, 3], [1.0; 3], data);
        let (out, _, rec) = preprocess_case(&v, None, [1.0; 3]).unwrap();
        let (z, _) = zscore_normalize(&v).unwrap();
        assert_eq!(out, z);
        assert_eq!(rec.crop_box, foreground_bbox(&v).unwrap());
        assert_eq!(rec.crop_box, BoundingBox::full([3, 3, 3]));
    }

    #[test]
    fn single_voxel_survives_finer_spacing() {
        let dims = [6, 6, 6];
        let mut img = vec![0.0f32; 216];
        let mut m = vec![0u8; 216];
        for z in 1..5 {
            for y in 1..5 {
                for x in 1..5 {
                    img[index(dims, x, y, z)] = 1.0 + (x + y + z) as f32;
                }
            }
        }
        m[index(dims, 2, 3, 3)] = 1;
        let image = vol(dims, [1.0; 3], img);
        let mask = LabelMask::new(dims, [1.0; 3], m).unwrap();
        let (out, pm, rec) = preprocess_case(&image, Some(&mask), [0.5, 0.6, 0.8]).unwrap();
        let pm = pm.unwrap();
        assert_eq!(out.dims(), pm.dims());
        assert!(pm.foreground_count() >= 1);
        assert_eq!(rec.crop_box, foreground_bbox(&image).unwrap());
        assert_eq!(rec.crop_box.lo, [1, 1, 1]);
    }

    #[test]
    fn restore_identity_and_empty() {
        let dims = [4, 4, 4];
        let image = vol(dims, [1.0; 3], vec![1.0; 64]);
        let data: Vec<u8> = (0..64).map(|i| u8::from(i % 5 == 0)).collect();
        let mask = LabelMask::new(dims, [1.0; 3], data).unwrap();
        let (_, pm, rec) = preprocess_case(&image, Some(&mask), [1.0; 3]).unwrap();
        assert_eq!(restore_to_original(&pm.unwrap(), &rec).unwrap(), mask);

        let mut img = vec![0.0f32; 64];
        img[index(dims, 1, 1, 1)] = 2.0;
        img[index(dims, 2, 3, 2)] = 3.0;
        let image = vol(dims, [1.0; 3], img);
        let (_, _, rec) = preprocess_case(&image, None, [0.5; 3]).unwrap();
        let empty = LabelMask::zeros(rec.resampled_dims(), [0.5; 3]).unwrap();
        let back = restore_to_original(&empty, &rec).unwrap();
        assert_eq!(back.dims(), dims);
        assert_eq!(back.foreground_count(), 0);

        let wrong = LabelMask::zeros([1, 1, 1], [0.5; 3]).unwrap();
        assert!(restore_to_original(&wrong, &rec).is_err());
    }

    #[test]
    fn cube_down_up_round_trip_count() {
        // Nearest 2x down keeps source index 2i+1, 2x up repeats each sample
        // twice, so a 3-voxel run at offset o keeps 1 voxel (o even) or
        // 2 (o odd), and comes back as 2 or 4 voxels.
        let dims = [12, 12, 12];
        let image = vol(dims, [1.0; 3], vec![1.0; 1728]);
        for ox in [4, 5] {
            for oy in [4, 5] {
                for oz in [4, 5] {
                    let mut m = vec![0u8; 1728];
                    for z in oz..oz + 3 {
                        for y in oy..oy + 3 {
                            for x in ox..ox + 3 {
                                m[index(dims, x, y, z)] = 1;
                            }
                        }
                    }
                    let mask = LabelMask::new(dims, [1.0; 3], m).unwrap();
                    let (_, pm, rec) = preprocess_case(&image, Some(&mask), [2.0; 3]).unwrap();
                    let back = restore_to_original(&pm.unwrap(), &rec).unwrap();
                    let per_axis = |o: usize| if o % 2 == 1 { 4 } else { 2 };
                    let expected = per_axis(ox) * per_axis(oy) * per_axis(oz);
                    assert_eq!(back.foreground_count(), expected);
                    let odd = [ox, oy, oz].iter().filter(|o| *o % 2 == 1).count();
                    if odd == 1 || odd == 2 {
                        let ratio = back.foreground_count() as f64 / 27.0;
                        assert!((0.5..=1.5).contains(&ratio), "{ratio}");
                    }
                }
            }
        }
    }

    #[test]
    fn median_spacing_per_axis() {
        let s = median_spacing(&[[1.0, 2.0, 3.0], [0.5, 2.0, 1.0], [0.8, 1.0, 5.0]]).unwrap();
        assert_eq!(s, [0.8, 2.0, 3.0]);
        let s = median_spacing(&[[1.0, 1.0, 1.0], [2.0, 1.0, 3.0]]).unwrap();
        assert_eq!(s, [1.5, 1.0, 2.0]);
        assert!(median_spacing(&[]).is_err());
    }

    #[test]
    fn record_json_field_names() {
        let rec = PreprocessRecord {
            original_dims: [4, 4, 4],
            crop_box: BoundingBox::full([4, 4, 4]),
            original_spacing: [1.0; 3],
            target_spacing: [1.0; 3],
            normalization: Normalization {
                mean: 0.0,
                std: 1.0,
                constant: false,
            },
        };
        let j: serde_json::Value = serde_json::to_value(&rec).unwrap();
        for k in ["original_dims", "crop_box", "original_spacing", "target_spacing", "normalization"] {
            assert!(j.get(k).is_some(), "{k}");
        }
        let back: PreprocessRecord = serde_json::from_value(j).unwrap();
        assert_eq!(back, rec);
    }

    proptest! {
        #[test]
        fn zscore_moments(data in proptest::collection::vec(-100.0f32..100.0, 100..400)) {
            prop_assume!(data.iter().any(|&x| x != data[0]));
            let n = data.len();
            let (z, _) = zscore_normalize(&vol([n, 1, 1], [1.0; 3], data)).unwrap();
            let s = volume_stats(&z, None).unwrap();
            prop_assert!(s.mean.abs() < 1e-6);
            prop_assert!((s.std - 1.0).abs() < 1e-4);
        }

        #[test]
        fn resample_preserves_range(
            data in proptest::collection::vec(-10.0f32..10.0, 27),
            t in proptest::array::uniform3(0.3f64..2.5),
        ) {
            let v = vol([3, 3, 3], [1.0; 3], data);
            let r = resample(&v, t, Interpolation::Trilinear).unwrap();
            let (lo, hi) = v.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &x| (a.min(x), b.max(x)));
            prop_assert!(r.data().iter().all(|&x| x >= lo && x <= hi));
        }

        #[test]
        fn preprocess_is_deterministic(data in proptest::collection::vec(0.0f32..5.0, 64)) {
            prop_assume!(data.iter().any(|&x| x > 0.0));
            let v = vol([4, 4, 4], [1.0, 1.2, 0.9], data);
            let a = preprocess_case(&v, None, [0.8, 1.0, 1.1]).unwrap();
            let b = preprocess_case(&v, None, [0.8, 1.0, 1.1]).unwrap();
            prop_assert_eq!(a.0.data(), b.0.data());
            prop_assert_eq!(a.2, b.2);
        }
    }
}
