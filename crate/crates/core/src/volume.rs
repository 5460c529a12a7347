//! Geometric data model: scalar volumes, binary masks and bounding boxes.
//!
//! Layout is x-fastest everywhere in the crate; `index` is the one place the
//! linearization is written down.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Voxel counts `(nx, ny, nz)`.
pub type Dims = [usize; 3];
/// Physical voxel size in mm per axis.
pub type Spacing = [f64; 3];

/// Linear offset of voxel `(x, y, z)` in an x-fastest grid.
#[inline]
pub fn index(dims: Dims, x: usize, y: usize, z: usize) -> usize {
    x + dims[0] * (y + dims[1] * z)
}

/// Inverse of [`index`].
#[inline]
pub fn coords(dims: Dims, i: usize) -> [usize; 3] {
    let x = i % dims[0];
    let y = (i / dims[0]) % dims[1];
    let z = i / (dims[0] * dims[1]);
    [x, y, z]
}

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

fn check_geometry(dims: Dims, spacing: Spacing, len: usize) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Geometry(format!("dims must be positive, got {dims:?}")));
    }
    if spacing.iter().any(|s| !s.is_finite() || *s <= 0.0) {
        return Err(Error::Geometry(format!(
            "spacing must be positive and finite, got {spacing:?}"
        )));
    }
    let expected = voxel_count(dims);
    if len != expected {
        return Err(Error::ShapeMismatch {
            expected,
            actual: len,
        });
    }
    Ok(())
}

/// Dense scalar grid with voxel spacing.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    spacing: Spacing,
    data: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<f32>) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        if let Some(i) = data.iter().position(|v| v.is_nan()) {
            return Err(Error::NaN(i));
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(dims, spacing, vec![0.0; voxel_count(dims)])
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[index(self.dims, x, y, z)]
    }

    /// Same volume with a different spacing.
    pub fn with_spacing(self, spacing: Spacing) -> Result<Self> {
        Self::new(self.dims, spacing, self.data)
    }

    pub fn crop(&self, bbox: &BoundingBox) -> Result<Self> {
        let (dims, data) = crop_grid(self.dims, &self.data, bbox)?;
        Ok(Self {
            dims,
            spacing: self.spacing,
            data,
        })
    }

    /// Zero-pad into `dims`, placing this volume's origin at `offset`.
    pub fn pad_into(&self, dims: Dims, offset: [usize; 3]) -> Result<Self> {
        let data = pad_grid(self.dims, &self.data, dims, offset)?;
        Ok(Self {
            dims,
            spacing: self.spacing,
            data,
        })
    }
}

/// Binary mask: background 0, foreground 1.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMask {
    dims: Dims,
    spacing: Spacing,
    data: Vec<u8>,
}

impl LabelMask {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<u8>) -> Result<Self> {
        check_geometry(dims, spacing, data.len())?;
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::NotBinary { index, value });
        }
        Ok(Self {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Result<Self> {
        Self::new(dims, spacing, vec![0; voxel_count(dims)])
    }

    /// Foreground where `pred(value)` holds.
    pub fn from_volume(v: &Volume, pred: impl Fn(f32) -> bool) -> Self {
        Self {
            dims: v.dims,
            spacing: v.spacing,
            data: v.data.iter().map(|&x| u8::from(pred(x))).collect(),
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u8 {
        self.data[index(self.dims, x, y, z)]
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v == 1).count()
    }

    pub fn to_volume(&self) -> Volume {
        Volume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|&v| f32::from(v)).collect(),
        }
    }

    pub fn crop(&self, bbox: &BoundingBox) -> Result<Self> {
        let (dims, data) = crop_grid(self.dims, &self.data, bbox)?;
        Ok(Self {
            dims,
            spacing: self.spacing,
            data,
        })
    }

    pub fn pad_into(&self, dims: Dims, offset: [usize; 3]) -> Result<Self> {
        let data = pad_grid(self.dims, &self.data, dims, offset)?;
        Ok(Self {
            dims,
            spacing: self.spacing,
            data,
        })
    }

    /// Fails unless `dims` and `spacing` equal this mask's.
    pub fn check_same_geometry(&self, dims: Dims, spacing: Spacing) -> Result<()> {
        if self.dims != dims || self.spacing != spacing {
            return Err(Error::Geometry(format!(
                "mask geometry {:?}/{:?} does not match {:?}/{:?}",
                self.dims, self.spacing, dims, spacing
            )));
        }
        Ok(())
    }
}

/// Inclusive voxel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: [usize; 3],
    pub hi: [usize; 3],
}

impl BoundingBox {
    pub fn full(dims: Dims) -> Self {
        Self {
            lo: [0; 3],
            hi: [dims[0] - 1, dims[1] - 1, dims[2] - 1],
        }
    }

    pub fn extent(&self) -> Dims {
        [
            self.hi[0] - self.lo[0] + 1,
            self.hi[1] - self.lo[1] + 1,
            self.hi[2] - self.lo[2] + 1,
        ]
    }

    pub fn validate(&self, dims: Dims) -> Result<()> {
        for a in 0..3 {
            if self.lo[a] > self.hi[a] || self.hi[a] >= dims[a] {
                return Err(Error::BoxOutOfRange(format!(
                    "{:?}..{:?} within {:?}",
                    self.lo, self.hi, dims
                )));
            }
        }
        Ok(())
    }
}

fn crop_grid<T: Copy>(dims: Dims, data: &[T], bbox: &BoundingBox) -> Result<(Dims, Vec<T>)> {
    bbox.validate(dims)?;
    let out_dims = bbox.extent();
    let mut out = Vec::with_capacity(voxel_count(out_dims));
    for z in bbox.lo[2]..=bbox.hi[2] {
        for y in bbox.lo[1]..=bbox.hi[1] {
            let start = index(dims, bbox.lo[0], y, z);
            out.extend_from_slice(&data[start..start + out_dims[0]]);
        }
    }
    Ok((out_dims, out))
}

fn pad_grid<T: Copy + Default>(
    dims: Dims,
    data: &[T],
    out_dims: Dims,
    offset: [usize; 3],
) -> Result<Vec<T>> {
    if (0..3).any(|a| offset[a] + dims[a] > out_dims[a]) {
        return Err(Error::BoxOutOfRange(format!(
            "{dims:?} at offset {offset:?} does not fit in {out_dims:?}"
        )));
    }
    let mut out = vec![T::default(); voxel_count(out_dims)];
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            let src = index(dims, 0, y, z);
            let dst = index(out_dims, offset[0], y + offset[1], z + offset[2]);
            out[dst..dst + dims[0]].copy_from_slice(&data[src..src + dims[0]]);
        }
    }
    Ok(out)
}

/// Summary statistics over a region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VolumeStats {
    pub mean: f64,
    /// Population standard deviation (divides by N).
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

/// Statistics over the voxels selected by `mask`, or all voxels.
pub fn volume_stats(v: &Volume, mask: Option<&LabelMask>) -> Result<VolumeStats> {
    if let Some(m) = mask {
        m.check_same_geometry(v.dims, v.spacing)?;
    }
    let selected = |i: usize| mask.map_or(true, |m| m.data[i] == 1);

    let mut count = 0usize;
    let mut sum = 0.0f64;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for (i, &x) in v.data.iter().enumerate() {
        if selected(i) {
            let x = f64::from(x);
            count += 1;
            sum += x;
            min = min.min(x);
            max = max.max(x);
        }
    }
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    let mean = sum / count as f64;
    // second pass keeps the variance accurate for large offsets
    let var = v
        .data
        .iter()
        .enumerate()
        .filter(|(i, _)| selected(*i))
        .map(|(_, &x)| (f64::from(x) - mean).powi(2))
        .sum::<f64>()
        / count as f64;
    Ok(VolumeStats {
        mean,
        std: var.sqrt(),
        min,
        max,
        count,
    })
}

/// Tightest box around all voxels with `|value| > 0`.
pub fn foreground_bbox(v: &Volume) -> Result<BoundingBox> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for (i, &x) in v.data.iter().enumerate() {
        if x.abs() > 0.0 {
            any = true;
            let c = coords(v.dims, i);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    if !any {
        return Err(Error::NoNonzero);
    }
    Ok(BoundingBox { lo, hi })
}

/// Crop a volume to `bbox`; dims become the box extent, spacing is kept.
pub fn crop(v: &Volume, bbox: &BoundingBox) -> Result<Volume> {
    v.crop(bbox)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn vol(dims: Dims, data: Vec<f32>) -> Volume {
        Volume::new(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn rejects_nan_and_bad_geometry() {
        assert!(matches!(
            Volume::new([2, 1, 1], [1.0; 3], vec![0.0, f32::NAN]),
            Err(Error::NaN(1))
        ));
        assert!(Volume::new([2, 1, 1], [1.0; 3], vec![0.0]).is_err());
        assert!(Volume::new([1, 1, 1], [0.0, 1.0, 1.0], vec![0.0]).is_err());
        assert!(Volume::new([1, 1, 1], [f64::INFINITY, 1.0, 1.0], vec![0.0]).is_err());
        assert!(LabelMask::new([1, 1, 1], [1.0; 3], vec![2]).is_err());
    }

    #[test]
    fn stats_examples() {
        let s = volume_stats(&vol([3, 1, 1], vec![1.0, 2.0, 3.0]), None).unwrap();
        assert_abs_diff_eq!(s.mean, 2.0);
        assert_abs_diff_eq!(s.std, (2.0f64 / 3.0).sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(s.std, 0.8165, epsilon = 1e-4);
        assert_eq!((s.min, s.max, s.count), (1.0, 3.0, 3));

        let s = volume_stats(&vol([2, 2, 2], vec![0.0; 8]), None).unwrap();
        assert_eq!((s.mean, s.std), (0.0, 0.0));

        let v = vol([1, 1, 1], vec![5.0]);
        let m = LabelMask::new([1, 1, 1], [1.0; 3], vec![1]).unwrap();
        let s = volume_stats(&v, Some(&m)).unwrap();
        assert_eq!((s.mean, s.std, s.count), (5.0, 0.0, 1));
    }

    #[test]
    fn stats_empty_mask_errors() {
        let v = vol([2, 1, 1], vec![1.0, 2.0]);
        let m = LabelMask::zeros([2, 1, 1], [1.0; 3]).unwrap();
        assert!(matches!(volume_stats(&v, Some(&m)), Err(Error::EmptyRegion)));
        let bad = LabelMask::zeros([1, 2, 1], [1.0; 3]).unwrap();
        assert!(volume_stats(&v, Some(&bad)).is_err());
    }

    #[test]
    fn bbox_examples() {
        let dims = [4, 4, 4];
        let mut data = vec![0.0; 64];
        data[index(dims, 1, 2, 3)] = 1.0;
        let b = foreground_bbox(&vol(dims, data)).unwrap();
        assert_eq!((b.lo, b.hi), ([1, 2, 3], [1, 2, 3]));

        let b = foreground_bbox(&vol(dims, vec![1.0; 64])).unwrap();
        assert_eq!(b, BoundingBox::full(dims));

        let mut data = vec![0.0; 64];
        data[index(dims, 0, 0, 0)] = 2.0;
        data[index(dims, 3, 1, 0)] = -1.0;
        let b = foreground_bbox(&vol(dims, data)).unwrap();
        assert_eq!((b.lo, b.hi), ([0, 0, 0], [3, 1, 0]));

        assert!(matches!(
            foreground_bbox(&vol(dims, vec![0.0; 64])),
            Err(Error::NoNonzero)
        ));
    }

    #[test]
    fn crop_examples() {
        let dims = [4, 4, 4];
        let v = vol(dims, (0..64).map(|i| i as f32).collect());
        assert_eq!(crop(&v, &BoundingBox::full(dims)).unwrap(), v);

        let c = crop(
            &v,
            &BoundingBox {
                lo: [1, 1, 1],
                hi: [2, 2, 2],
            },
        )
        .unwrap();
        assert_eq!(c.dims(), [2, 2, 2]);
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..2 {
                    let expected = (x + 1) + 4 * (y + 1) + 16 * (z + 1);
                    assert_eq!(c.get(x, y, z), expected as f32);
                }
            }
        }

        let m = LabelMask::new(dims, [1.0; 3], (0..64).map(|i| (i % 2) as u8).collect()).unwrap();
        let mc = m
            .crop(&BoundingBox {
                lo: [0, 0, 0],
                hi: [1, 3, 3],
            })
            .unwrap();
        assert!(mc.data().iter().all(|&v| v <= 1));
        assert_eq!(mc.foreground_count(), 16);

        let bad = BoundingBox {
            lo: [0, 0, 0],
            hi: [4, 0, 0],
        };
        assert!(matches!(crop(&v, &bad), Err(Error::BoxOutOfRange(_))));
    }

    fn sparse_volume() -> impl Strategy<Value = Volume> {
        ([1usize..7, 1usize..7, 1usize..7])
            .prop_flat_map(|d| {
                let n = d[0] * d[1] * d[2];
                (
                    Just(d),
                    proptest::collection::vec(
                        prop_oneof![3 => Just(0.0f32), 1 => -5.0f32..5.0],
                        n,
                    ),
                )
            })
            .prop_map(|(d, mut data)| {
                if data.iter().all(|v| *v == 0.0) {
                    data[0] = 1.0;
                }
                vol(d, data)
            })
    }

    proptest! {
        #[test]
        fn bbox_crop_is_tight_and_uncrops(v in sparse_volume()) {
            let b = foreground_bbox(&v).unwrap();
            let c = crop(&v, &b).unwrap();
            let nz = |vol: &Volume| vol.data().iter().filter(|x| x.abs() > 0.0).count();
            prop_assert_eq!(nz(&c), nz(&v));
            let cd = c.dims();
            // each border slab holds a nonzero voxel
            for a in 0..3 {
                for side in [0, cd[a] - 1] {
                    let hit = c.data().iter().enumerate().any(|(i, x)| {
                        coords(cd, i)[a] == side && x.abs() > 0.0
                    });
                    prop_assert!(hit);
                }
            }
            let back = c.pad_into(v.dims(), b.lo).unwrap();
            prop_assert_eq!(back, v);
        }

        #[test]
        fn stats_permutation_invariant(mut data in proptest::collection::vec(-10.0f32..10.0, 1..64), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let n = data.len();
            let a = volume_stats(&vol([n, 1, 1], data.clone()), None).unwrap();
            data.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let b = volume_stats(&vol([1, n, 1], data), None).unwrap();
            prop_assert!((a.mean - b.mean).abs() < 1e-9);
            prop_assert!((a.std - b.std).abs() < 1e-9);
            prop_assert_eq!((a.min, a.max, a.count), (b.min, b.max, b.count));
        }
    }
}
