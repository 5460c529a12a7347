//! Sliding-window prediction with Gaussian importance weighting, and
//! probability-mean ensembling of several models. No test-time augmentation
//! is applied.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{forward, load_checkpoint, ModelParams, NetConfig};
use crate::volume::{index, voxel_count, BoundingBox, Dims, LabelMask, Volume};

pub const IMPORTANCE_FLOOR: f64 = 1e-3;
pub const DEFAULT_THRESHOLD: f32 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// sigma = patch / 8 per axis, peak 1, floored at 1e-3.
    Gaussian,
    Constant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlidingWindowPlan {
    pub image_dims: Dims,
    /// Image dims after zero-padding axes shorter than the patch.
    pub padded_dims: Dims,
    pub patch_size: Dims,
    pub step: Dims,
    pub origins: Vec<[usize; 3]>,
    /// Per-voxel weight over one patch, x-fastest.
    pub importance: Vec<f64>,
}

fn axis_origins(dim: usize, patch: usize, step: usize) -> Vec<usize> {
    if dim <= patch {
        return vec![0];
    }
    let span = dim - patch;
    let n = span.div_ceil(step) + 1;
    (0..n).map(|i| (i * step).min(span)).collect()
}

pub fn importance_map(patch: Dims, weighting: Weighting) -> Vec<f64> {
    let n = voxel_count(patch);
    if weighting == Weighting::Constant {
        return vec![1.0; n];
    }
    let axis = |a: usize| -> Vec<f64> {
        let p = patch[a] as f64;
        let sigma = p / 8.0;
        let c = (p - 1.0) / 2.0;
        (0..patch[a])
            .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
            .collect()
    };
    let (gx, gy, gz) = (axis(0), axis(1), axis(2));
    let mut w = Vec::with_capacity(n);
    for z in 0..patch[2] {
        for y in 0..patch[1] {
            for x in 0..patch[0] {
                w.push(gx[x] * gy[y] * gz[z]);
            }
        }
    }
    let peak = w.iter().cloned().fold(0.0, f64::max);
    for v in &mut w {
        *v = (*v / peak).max(IMPORTANCE_FLOOR);
    }
    w
}

/// Windows at half-patch steps; the last one on each axis is clamped to
/// end at the border.
pub fn plan_windows(dims: Dims, patch: Dims) -> Result<SlidingWindowPlan> {
    plan_windows_with(dims, patch, Weighting::Gaussian)
}

pub fn plan_windows_with(dims: Dims, patch: Dims, weighting: Weighting) -> Result<SlidingWindowPlan> {
    if dims.iter().chain(&patch).any(|&d| d == 0) {
        return Err(Error::Geometry(format!("invalid plan dims {dims:?} / patch {patch:?}")));
    }
    let mut padded = [0; 3];
    let mut step = [0; 3];
    let mut axes: Vec<Vec<usize>> = Vec::with_capacity(3);
    for a in 0..3 {
        padded[a] = dims[a].max(patch[a]);
        step[a] = (patch[a] / 2).max(1);
        axes.push(axis_origins(padded[a], patch[a], step[a]));
    }
    let mut origins = Vec::new();
    for &z in &axes[2] {
        for &y in &axes[1] {
            for &x in &axes[0] {
                origins.push([x, y, z]);
            }
        }
    }
    Ok(SlidingWindowPlan {
        image_dims: dims,
        padded_dims: padded,
        patch_size: patch,
        step,
        origins,
        importance: importance_map(patch, weighting),
    })
}

impl SlidingWindowPlan {
    /// Number of windows covering each voxel of the padded image.
    pub fn coverage(&self) -> Vec<u32> {
        let mut c = vec![0; voxel_count(self.padded_dims)];
        for o in &self.origins {
            for_patch(self.padded_dims, *o, self.patch_size, |gi, _| c[gi] += 1);
        }
        c
    }
}

/// Visit `(image index, patch index)` for each voxel of a window.
fn for_patch(dims: Dims, origin: [usize; 3], patch: Dims, mut f: impl FnMut(usize, usize)) {
    let mut pi = 0;
    for z in 0..patch[2] {
        for y in 0..patch[1] {
            let row = index(dims, origin[0], origin[1] + y, origin[2] + z);
            for x in 0..patch[0] {
                f(row + x, pi);
                pi += 1;
            }
        }
    }
}

/// Weighted-mean fusion of per-window outputs from `predict`, which maps a
/// patch volume to one probability per voxel. Windows may run in parallel;
/// accumulation follows plan order.
pub fn predict_with<F>(image: &Volume, plan: &SlidingWindowPlan, predict: F) -> Result<Volume>
where
    F: Fn(&Volume) -> Result<Vec<f64>> + Sync,
{
    if image.dims() != plan.image_dims {
        return Err(Error::Geometry(format!(
            "plan is for {:?}, image is {:?}",
            plan.image_dims,
            image.dims()
        )));
    }
    let padded = if plan.padded_dims == image.dims() {
        image.clone()
    } else {
        image.pad_into(plan.padded_dims, [0; 3])?
    };
    let pd = plan.padded_dims;
    let outputs: Vec<Vec<f64>> = plan
        .origins
        .par_iter()
        .map(|&o| {
            let hi = [o[0] + plan.patch_size[0] - 1, o[1] + plan.patch_size[1] - 1, o[2] + plan.patch_size[2] - 1];
            let patch = padded.crop(&BoundingBox { lo: o, hi })?;
            let p = predict(&patch)?;
            if p.len() != voxel_count(plan.patch_size) {
                return Err(Error::ShapeMismatch {
                    expected: voxel_count(plan.patch_size),
                    actual: p.len(),
                });
            }
            Ok(p)
        })
        .collect::<Result<_>>()?;

    let n = voxel_count(pd);
    let mut num = vec![0.0f64; n];
    let mut den = vec![0.0f64; n];
    for (o, p) in plan.origins.iter().zip(&outputs) {
        for_patch(pd, *o, plan.patch_size, |gi, pi| {
            let w = plan.importance[pi];
            num[gi] += w * p[pi];
            den[gi] += w;
        });
    }
    let fused: Vec<f32> = num
        .iter()
        .zip(&den)
        .map(|(&a, &b)| ((a / b) as f32).clamp(0.0, 1.0))
        .collect();
    let full = Volume::new(pd, image.spacing(), fused)?;
    if pd == image.dims() {
        Ok(full)
    } else {
        let d = image.dims();
        full.crop(&BoundingBox {
            lo: [0; 3],
            hi: [d[0] - 1, d[1] - 1, d[2] - 1],
        })
    }
}

/// Foreground probability map for a preprocessed image.
pub fn predict_volume(params: &ModelParams, net: &NetConfig, image: &Volume, plan: &SlidingWindowPlan) -> Result<Volume> {
    predict_with(image, plan, |patch| Ok(forward(params, net, patch)?.probs))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleMember {
    pub checkpoint: PathBuf,
    pub net: NetConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub members: Vec<EnsembleMember>,
    #[serde(default = "default_threshold")]
    pub threshold: f32,
}

fn default_threshold() -> f32 {
    DEFAULT_THRESHOLD
}

/// Loaded members sorted by checkpoint path.
pub struct Ensemble {
    pub models: Vec<(NetConfig, ModelParams)>,
    pub threshold: f32,
}

impl Ensemble {
    pub fn load(spec: &EnsembleSpec) -> Result<Self> {
        if spec.members.is_empty() {
            return Err(Error::Config("ensemble has no members".into()));
        }
        let mut members = spec.members.clone();
        members.sort_by(|a, b| a.checkpoint.cmp(&b.checkpoint));
        let models = members
            .iter()
            .map(|m| {
                let wrap = |e: Error| Error::Member {
                    path: m.checkpoint.clone(),
                    source: Box::new(e),
                };
                let (cfg, params) = load_checkpoint(&m.checkpoint).map_err(wrap)?;
                if cfg != m.net {
                    return Err(wrap(Error::Config(format!(
                        "checkpoint config {cfg:?} differs from declared {:?}",
                        m.net
                    ))));
                }
                Ok((cfg, params))
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            models,
            threshold: spec.threshold,
        })
    }

    pub fn predict(&self, image: &Volume, plan: &SlidingWindowPlan) -> Result<(Volume, LabelMask)> {
        let maps = self
            .models
            .iter()
            .map(|(cfg, params)| predict_volume(params, cfg, image, plan))
            .collect::<Result<Vec<_>>>()?;
        let probs = mean_probabilities(&maps)?;
        let mask = threshold(&probs, self.threshold);
        Ok((probs, mask))
    }
}

/// Voxelwise arithmetic mean, summed in the given order.
pub fn mean_probabilities(maps: &[Volume]) -> Result<Volume> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Config("no probability maps to average".into()))?;
    let mut acc = vec![0.0f64; first.len()];
    for m in maps {
        if m.dims() != first.dims() {
            return Err(Error::Geometry("ensemble members disagree on dims".into()));
        }
        for (a, &v) in acc.iter_mut().zip(m.data()) {
            *a += f64::from(v);
        }
    }
    let k = maps.len() as f64;
    Volume::new(first.dims(), first.spacing(), acc.into_iter().map(|a| (a / k) as f32).collect())
}

/// Foreground where `p >= t`.
pub fn threshold(probs: &Volume, t: f32) -> LabelMask {
    LabelMask::from_volume(probs, |p| p >= t)
}

pub fn ensemble_predict(spec: &EnsembleSpec, image: &Volume, patch: Dims) -> Result<(Volume, LabelMask)> {
    let ensemble = Ensemble::load(spec)?;
    let plan = plan_windows(image.dims(), patch)?;
    ensemble.predict(image, &plan)
}
