//! Synthetic imbalanced cases: bright tubular distractors and small
//! ellipsoidal foreground blobs on smoothed noise.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::{label_components, Connectivity};
use crate::volume::{index, voxel_count, Dims, LabelMask, Spacing, Volume};

const MAX_ATTEMPTS: usize = 5;
const MIN_BLOB_VOXELS: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub dims: Dims,
    pub spacing: Spacing,
    /// Inclusive range for the number of blobs in a blob-bearing case.
    pub n_blobs: (usize, usize),
    pub blob_radius_range: (f64, f64),
    pub vessel_count: usize,
    pub vessel_radius: f64,
    pub noise_std: f64,
    pub vessel_intensity: f64,
    pub blob_intensity: f64,
    pub smoothing_sigma: f64,
    /// Allowed foreground fraction for blob-bearing cases.
    pub ratio_band: (f64, f64),
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dims: [64, 64, 64],
            spacing: [1.0; 3],
            n_blobs: (1, 3),
            blob_radius_range: (1.5, 3.0),
            vessel_count: 3,
            vessel_radius: 1.2,
            noise_std: 1.0,
            vessel_intensity: 3.0,
            blob_intensity: 4.0,
            smoothing_sigma: 0.5,
            ratio_band: (1e-4, 1e-3),
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.dims.iter().any(|&d| d < 16) {
            return bad("synthetic dims must be >= 16 per axis");
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return bad("spacing must be positive");
        }
        let (rlo, rhi) = self.blob_radius_range;
        if !(rlo > 0.0) || rhi < rlo || !(self.vessel_radius > 0.0) {
            return bad("radii must be positive");
        }
        if self.n_blobs.0 > self.n_blobs.1 || self.n_blobs.1 > 3 {
            return bad("blob count range must lie within 0..3");
        }
        let (lo, hi) = self.ratio_band;
        if !(lo > 0.0) || !(hi < 0.5) || lo >= hi {
            return bad("ratio band must lie within (0, 0.5)");
        }
        if !(self.smoothing_sigma >= 0.0) || !(self.noise_std >= 0.0) {
            return bad("noise and smoothing must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobMeta {
    pub center: [f64; 3],
    pub radii: [f64; 3],
    pub voxels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub seed: u64,
    pub blobs: Vec<BlobMeta>,
    pub foreground_voxels: usize,
    pub foreground_ratio: f64,
    pub attempts: usize,
}

#[derive(Debug, Clone)]
pub struct SynthCase {
    pub id: String,
    pub image: Volume,
    pub mask: LabelMask,
    pub meta: CaseMeta,
}

/// Whether voxel `p` lies inside the axis-aligned ellipsoid.
pub fn in_ellipsoid(p: [usize; 3], center: [f64; 3], radii: [f64; 3]) -> bool {
    (0..3)
        .map(|a| ((p[a] as f64 - center[a]) / radii[a]).powi(2))
        .sum::<f64>()
        <= 1.0
}

fn bounds(c: f64, r: f64, n: usize) -> std::ops::Range<usize> {
    let lo = (c - r).floor().max(0.0) as usize;
    let hi = ((c + r).ceil() as isize + 1).clamp(0, n as isize) as usize;
    lo.min(hi)..hi
}

/// Generate one case with `spec.n_blobs` sampled from its range.
pub fn generate_case(spec: &SynthSpec) -> Result<(Volume, LabelMask, CaseMeta)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = rng.gen_range(spec.n_blobs.0..=spec.n_blobs.1);
    generate_with_blobs(spec, n)
}

/// Generate one case with exactly `n_blobs` blobs.
pub fn generate_with_blobs(spec: &SynthSpec, n_blobs: usize) -> Result<(Volume, LabelMask, CaseMeta)> {
    spec.validate()?;
    let mut last = String::new();
    for attempt in 0..MAX_ATTEMPTS {
        let seed = spec.seed.wrapping_add((attempt as u64).wrapping_mul(0xA24B_AED4_963E_E407));
        match attempt_case(spec, n_blobs, seed) {
            Ok((img, mask, mut meta)) => {
                meta.seed = spec.seed;
                meta.attempts = attempt + 1;
                return Ok((img, mask, meta));
            }
            Err(reason) => last = reason,
        }
    }
    Err(Error::Generation(format!(
        "no valid case after {MAX_ATTEMPTS} attempts (seed {}): {last}",
        spec.seed
    )))
}

fn attempt_case(spec: &SynthSpec, n_blobs: usize, seed: u64) -> std::result::Result<(Volume, LabelMask, CaseMeta), String> {
    let d = spec.dims;
    let n = voxel_count(d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut field = vec![0.0f64; n];
    for _ in 0..spec.vessel_count {
        draw_vessel(&mut field, d, spec, &mut rng);
    }

    let mut mask = vec![0u8; n];
    let mut blobs: Vec<BlobMeta> = Vec::new();
    let (rlo, rhi) = spec.blob_radius_range;
    for _ in 0..n_blobs {
        let mut placed = false;
        for _ in 0..100 {
            let radii = [0; 3].map(|_: i32| rng.gen_range(rlo..=rhi));
            let center: [f64; 3] = std::array::from_fn(|a| {
                let margin = radii[a] + 2.0;
                rng.gen_range(margin..(d[a] as f64 - 1.0 - margin))
            });
            let clear = blobs.iter().all(|b| {
                let gap: f64 = (0..3).map(|a| (b.center[a] - center[a]).powi(2)).sum::<f64>().sqrt();
                gap > b.radii.iter().cloned().fold(0.0, f64::max) + radii.iter().cloned().fold(0.0, f64::max) + 2.0
            });
            if clear {
                blobs.push(BlobMeta {
                    center,
                    radii,
                    voxels: 0,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err("could not place separated blobs".into());
        }
    }
    for b in &mut blobs {
        let mut count = 0;
        for z in bounds(b.center[2], b.radii[2], d[2]) {
            for y in bounds(b.center[1], b.radii[1], d[1]) {
                for x in bounds(b.center[0], b.radii[0], d[0]) {
                    if in_ellipsoid([x, y, z], b.center, b.radii) {
                        let i = index(d, x, y, z);
                        mask[i] = 1;
                        field[i] = field[i].max(spec.blob_intensity);
                        count += 1;
                    }
                }
            }
        }
        b.voxels = count;
    }

    let fg = mask.iter().filter(|&&v| v == 1).count();
    let ratio = fg as f64 / n as f64;
    if n_blobs > 0 {
        if ratio < spec.ratio_band.0 || ratio > spec.ratio_band.1 {
            return Err(format!("foreground ratio {ratio:.2e} outside band"));
        }
        let lm = LabelMask::new(d, spec.spacing, mask.clone()).map_err(|e| e.to_string())?;
        let comps = label_components(&lm, Connectivity::TwentySix);
        if comps.count() != n_blobs || comps.sizes.iter().any(|&s| s < MIN_BLOB_VOXELS) {
            return Err("blob components not separated or too small".into());
        }
    }

    for v in field.iter_mut() {
        let noise: f64 = rng.sample(StandardNormal);
        *v += spec.noise_std * noise;
    }
    let smoothed = gaussian_smooth(&field, d, spec.smoothing_sigma);
    let image = Volume::new(d, spec.spacing, smoothed.iter().map(|&v| v as f32).collect()).map_err(|e| e.to_string())?;
    let mask = LabelMask::new(d, spec.spacing, mask).map_err(|e| e.to_string())?;
    Ok((
        image,
        mask,
        CaseMeta {
            seed,
            blobs,
            foreground_voxels: fg,
            foreground_ratio: ratio,
            attempts: 0,
        },
    ))
}

/// A smooth random curve entering and leaving the volume, rasterised as a
/// tube. Intensities combine by maximum.
fn draw_vessel(field: &mut [f64], d: Dims, spec: &SynthSpec, rng: &mut ChaCha8Rng) {
    let dm = d.map(|v| v as f64);
    let start: [f64; 3] = std::array::from_fn(|a| rng.gen_range(0.0..dm[a]));
    let end: [f64; 3] = std::array::from_fn(|a| rng.gen_range(0.0..dm[a]));
    let amp: [f64; 3] = std::array::from_fn(|a| rng.gen_range(0.0..dm[a] / 6.0));
    let freq: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.5..2.0));
    let phase: [f64; 3] = std::array::from_fn(|_| rng.gen_range(0.0..std::f64::consts::TAU));
    let len: f64 = (0..3).map(|a| (end[a] - start[a]).powi(2)).sum::<f64>().sqrt();
    let steps = (len * 2.0).ceil().max(1.0) as usize;
    let r = spec.vessel_radius;
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let p: [f64; 3] = std::array::from_fn(|a| {
            start[a] + t * (end[a] - start[a]) + amp[a] * (std::f64::consts::TAU * freq[a] * t + phase[a]).sin()
        });
        for z in bounds(p[2], r, d[2]) {
            for y in bounds(p[1], r, d[1]) {
                for x in bounds(p[0], r, d[0]) {
                    if in_ellipsoid([x, y, z], p, [r; 3]) {
                        let i = index(d, x, y, z);
                        field[i] = field[i].max(spec.vessel_intensity);
                    }
                }
            }
        }
    }
}

/// Separable Gaussian blur with edge clamping and a kernel of radius
/// `ceil(3 sigma)`.
pub fn gaussian_smooth(data: &[f64], d: Dims, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);

    let mut cur = data.to_vec();
    let stride = [1, d[0], d[0] * d[1]];
    for axis in 0..3 {
        let mut out = vec![0.0; cur.len()];
        for (i, o) in out.iter_mut().enumerate() {
            let c = crate::volume::coords(d, i)[axis] as isize;
            let base = i - c as usize * stride[axis];
            *o = kernel
                .iter()
                .enumerate()
                .map(|(k, w)| {
                    let p = (c + k as isize - radius).clamp(0, d[axis] as isize - 1) as usize;
                    w * cur[base + p * stride[axis]]
                })
                .sum();
        }
        cur = out;
    }
    cur
}

/// Per-case seed from the master seed and case index.
pub fn case_seed(master: u64, index: usize) -> u64 {
    let mut z = master ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n_cases` cases, `round(n_cases * free_fraction)` of them without blobs.
/// Which cases are blob-free is a seeded shuffle of the indices.
pub fn generate_dataset(spec: &SynthSpec, n_cases: usize, free_fraction: f64) -> Result<Vec<SynthCase>> {
    spec.validate()?;
    if n_cases < 1 {
        return Err(Error::Config("cases must be ≥ 1".into()));
    }
    if !(0.0..=1.0).contains(&free_fraction) {
        return Err(Error::Config("aneurysm-free fraction must be in [0, 1]".into()));
    }
    let n_free = (n_cases as f64 * free_fraction).round() as usize;
    let mut order: Vec<usize> = (0..n_cases).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let mut free = vec![false; n_cases];
    for &i in &order[..n_free] {
        free[i] = true;
    }
    let lo = spec.n_blobs.0.max(1);
    let hi = spec.n_blobs.1.max(lo);
    (0..n_cases)
        .into_par_iter()
        .map(|i| {
            let case_spec = SynthSpec {
                seed: case_seed(spec.seed, i),
                ..spec.clone()
            };
            let n_blobs = if free[i] {
                0
            } else {
                ChaCha8Rng::seed_from_u64(case_spec.seed).gen_range(lo..=hi)
            };
            let (image, mask, meta) = generate_with_blobs(&case_spec, n_blobs)?;
            Ok(SynthCase {
                id: format!("case_{i:03}"),
                image,
                mask,
                meta,
            })
        })
        .collect()
}
