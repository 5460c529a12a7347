//! DSC, HD95 and volumetric similarity for binary masks.
//!
//! Empty-mask conventions: both empty scores DSC 1, VS 1, HD95 0. HD95 with
//! exactly one empty mask is undefined; it is reported and left out of the
//! aggregate mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::postprocess::{label_components, Connectivity};
use crate::volume::{coords, index, LabelMask};

/// Text written in place of an undefined HD95.
pub const HD95_UNDEFINED: &str = "undefined-empty";

fn check(pred: &LabelMask, reference: &LabelMask) -> Result<()> {
    reference.check_same_geometry(pred.dims(), pred.spacing())
}

fn counts(pred: &LabelMask, reference: &LabelMask) -> (usize, usize, usize) {
    let mut p = 0;
    let mut r = 0;
    let mut both = 0;
    for (&a, &b) in pred.data().iter().zip(reference.data()) {
        p += usize::from(a);
        r += usize::from(b);
        both += usize::from(a & b);
    }
    (p, r, both)
}

/// `2 |P and R| / (|P| + |R|)`.
pub fn dsc(pred: &LabelMask, reference: &LabelMask) -> Result<f64> {
    check(pred, reference)?;
    let (p, r, both) = counts(pred, reference);
    if p + r == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (p + r) as f64)
}

/// `1 - ||P| - |R|| / (|P| + |R|)`.
pub fn volumetric_similarity(pred: &LabelMask, reference: &LabelMask) -> Result<f64> {
    check(pred, reference)?;
    let (p, r, _) = counts(pred, reference);
    if p + r == 0 {
        return Ok(1.0);
    }
    Ok(1.0 - p.abs_diff(r) as f64 / (p + r) as f64)
}

/// Foreground voxels with a background 6-neighbour; outside the volume
/// counts as background.
pub fn surface_voxels(mask: &LabelMask) -> Vec<[usize; 3]> {
    let d = mask.dims();
    let data = mask.data();
    let mut out = Vec::new();
    for (i, &v) in data.iter().enumerate() {
        if v == 0 {
            continue;
        }
        let c = coords(d, i);
        let mut boundary = false;
        for a in 0..3 {
            if c[a] == 0 || c[a] + 1 == d[a] {
                boundary = true;
                break;
            }
            let mut lo = c;
            lo[a] -= 1;
            let mut hi = c;
            hi[a] += 1;
            if data[index(d, lo[0], lo[1], lo[2])] == 0 || data[index(d, hi[0], hi[1], hi[2])] == 0 {
                boundary = true;
                break;
            }
        }
        if boundary {
            out.push(c);
        }
    }
    out
}

/// Euclidean distance between voxel centres in mm.
#[inline]
pub fn voxel_distance(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for k in 0..3 {
        let d = (a[k] as f64 - b[k] as f64) * spacing[k];
        s += d * d;
    }
    s.sqrt()
}

/// Nearest-rank percentile of an unsorted sample.
pub fn nearest_rank(values: &mut [f64], pct: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    let rank = ((pct / 100.0 * n as f64).ceil() as usize).clamp(1, n);
    values[rank - 1]
}

/// Distance from each voxel of `from` to the nearest set voxel of
/// `target_grid`, found by searching cubic shells of growing radius.
fn directed_distances(from: &[[usize; 3]], target: &[[usize; 3]], mask: &LabelMask) -> Vec<f64> {
    let d = mask.dims();
    let spacing = mask.spacing();
    let mut grid = vec![false; mask.len()];
    for c in target {
        grid[index(d, c[0], c[1], c[2])] = true;
    }
    let min_s = spacing.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_r = d.iter().copied().max().unwrap_or(1) as isize;

    from.iter()
        .map(|&q| {
            let mut best = f64::INFINITY;
            for r in 0..=max_r {
                for dz in -r..=r {
                    for dy in -r..=r {
                        let on_face = dz.abs() == r || dy.abs() == r;
                        let step = if on_face || r == 0 { 1 } else { (2 * r) as usize };
                        let mut dx = -r;
                        while dx <= r {
                            let p = [q[0] as isize + dx, q[1] as isize + dy, q[2] as isize + dz];
                            if (0..3).all(|k| p[k] >= 0 && (p[k] as usize) < d[k]) {
                                let p = [p[0] as usize, p[1] as usize, p[2] as usize];
                                if grid[index(d, p[0], p[1], p[2])] {
                                    best = best.min(voxel_distance(q, p, spacing));
                                }
                            }
                            dx += step as isize;
                        }
                    }
                }
                // anything on a later shell is at least (r + 1) * min spacing away
                if best <= (r + 1) as f64 * min_s {
                    break;
                }
            }
            best
        })
        .collect()
}

/// Symmetric 95th-percentile surface distance in mm; `None` when exactly one
/// mask is empty.
pub fn hd95(pred: &LabelMask, reference: &LabelMask) -> Result<Option<f64>> {
    check(pred, reference)?;
    let sp = surface_voxels(pred);
    let sr = surface_voxels(reference);
    match (sp.is_empty(), sr.is_empty()) {
        (true, true) => return Ok(Some(0.0)),
        (true, false) | (false, true) => return Ok(None),
        _ => {}
    }
    let mut a = directed_distances(&sp, &sr, pred);
    let mut b = directed_distances(&sr, &sp, pred);
    Ok(Some(nearest_rank(&mut a, 95.0).max(nearest_rank(&mut b, 95.0))))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub dsc: f64,
    /// `None` is the undefined-empty sentinel.
    pub hd95: Option<f64>,
    pub volumetric_similarity: f64,
    pub pred_components: usize,
    pub ref_components: usize,
    pub empty_pred: bool,
    pub empty_ref: bool,
}

impl CaseMetrics {
    pub fn flags(&self) -> String {
        let mut f = Vec::new();
        if self.empty_pred {
            f.push("empty_pred");
        }
        if self.empty_ref {
            f.push("empty_ref");
        }
        f.join("|")
    }

    pub fn hd95_text(&self) -> String {
        self.hd95.map_or_else(|| HD95_UNDEFINED.to_string(), |v| format!("{v}"))
    }
}

pub fn evaluate_case(pred: &LabelMask, reference: &LabelMask) -> Result<CaseMetrics> {
    Ok(CaseMetrics {
        dsc: dsc(pred, reference)?,
        hd95: hd95(pred, reference)?,
        volumetric_similarity: volumetric_similarity(pred, reference)?,
        pred_components: label_components(pred, Connectivity::TwentySix).count(),
        ref_components: label_components(reference, Connectivity::TwentySix).count(),
        empty_pred: pred.foreground_count() == 0,
        empty_ref: reference.foreground_count() == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub cases: usize,
    pub mean_dsc: f64,
    /// Over cases with a defined HD95; `None` if there are none.
    pub mean_hd95: Option<f64>,
    pub hd95_undefined_count: usize,
    pub mean_volumetric_similarity: f64,
}

pub fn aggregate(cases: &[CaseMetrics]) -> Result<Summary> {
    if cases.is_empty() {
        return Err(Error::Config("no cases to aggregate".into()));
    }
    let n = cases.len() as f64;
    let defined: Vec<f64> = cases.iter().filter_map(|c| c.hd95).collect();
    Ok(Summary {
        cases: cases.len(),
        mean_dsc: cases.iter().map(|c| c.dsc).sum::<f64>() / n,
        mean_hd95: (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64),
        hd95_undefined_count: cases.len() - defined.len(),
        mean_volumetric_similarity: cases.iter().map(|c| c.volumetric_similarity).sum::<f64>() / n,
    })
}
