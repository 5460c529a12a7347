//! Connected components and small-component removal.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{coords, index, LabelMask};

/// Predicted components with fewer voxels than this are dropped.
pub const DEFAULT_MIN_SIZE: usize = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    Six,
    Eighteen,
    TwentySix,
}

impl Connectivity {
    /// Neighbour offsets: voxels differing by at most one step per axis, in
    /// at most 1, 2 or 3 axes.
    pub fn offsets(self) -> Vec<[isize; 3]> {
        let max_axes = match self {
            Connectivity::Six => 1,
            Connectivity::Eighteen => 2,
            Connectivity::TwentySix => 3,
        };
        let mut v = Vec::new();
        for dz in -1isize..=1 {
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let moved = [dx, dy, dz].iter().filter(|&&d| d != 0).count();
                    if moved >= 1 && moved <= max_axes {
                        v.push([dx, dy, dz]);
                    }
                }
            }
        }
        v
    }
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        match v {
            6 => Ok(Connectivity::Six),
            18 => Ok(Connectivity::Eighteen),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::Config(format!("connectivity must be 6, 18 or 26, got {other}"))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::Eighteen => 18,
            Connectivity::TwentySix => 26,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ComponentLabeling {
    /// 0 for background, `1..=C` for components.
    pub labels: Vec<u32>,
    /// `sizes[c - 1]` is the voxel count of component `c`.
    pub sizes: Vec<usize>,
    pub connectivity: Connectivity,
}

impl ComponentLabeling {
    pub fn count(&self) -> usize {
        self.sizes.len()
    }
}

/// Flood-fill labelling; ids follow the first voxel of each component in
/// x-fastest scan order.
pub fn label_components(mask: &LabelMask, connectivity: Connectivity) -> ComponentLabeling {
    let d = mask.dims();
    let data = mask.data();
    let offsets = connectivity.offsets();
    let mut labels = vec![0u32; data.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..data.len() {
        if data[start] == 0 || labels[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        labels[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let c = coords(d, i);
            for o in &offsets {
                let p = [c[0] as isize + o[0], c[1] as isize + o[1], c[2] as isize + o[2]];
                if (0..3).any(|k| p[k] < 0 || p[k] as usize >= d[k]) {
                    continue;
                }
                let j = index(d, p[0] as usize, p[1] as usize, p[2] as usize);
                if data[j] == 1 && labels[j] == 0 {
                    labels[j] = id;
                    queue.push_back(j);
                }
            }
        }
        sizes.push(size);
    }
    ComponentLabeling {
        labels,
        sizes,
        connectivity,
    }
}

/// Zero every component with fewer than `min_size` voxels. Returns the
/// cleaned mask and how many components were removed.
pub fn remove_small_components(mask: &LabelMask, min_size: usize, connectivity: Connectivity) -> Result<(LabelMask, usize)> {
    let lab = label_components(mask, connectivity);
    let keep: Vec<bool> = lab.sizes.iter().map(|&s| s >= min_size).collect();
    let removed = keep.iter().filter(|k| !**k).count();
    let data = lab
        .labels
        .iter()
        .map(|&l| u8::from(l != 0 && keep[l as usize - 1]))
        .collect();
    Ok((LabelMask::new(mask.dims(), mask.spacing(), data)?, removed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Dims;

    fn mask(dims: Dims, on: &[[usize; 3]]) -> LabelMask {
        let mut data = vec![0; dims.iter().product()];
        for c in on {
            data[index(dims, c[0], c[1], c[2])] = 1;
        }
        LabelMask::new(dims, [1.0; 3], data).unwrap()
    }

    #[test]
    fn neighbourhood_sizes() {
        assert_eq!(Connectivity::Six.offsets().len(), 6);
        assert_eq!(Connectivity::Eighteen.offsets().len(), 18);
        assert_eq!(Connectivity::TwentySix.offsets().len(), 26);
        assert!(Connectivity::try_from(8).is_err());
        assert_eq!(serde_json::to_string(&Connectivity::TwentySix).unwrap(), "26");
    }

    #[test]
    fn labelling_examples() {
        let empty = mask([4, 4, 4], &[]);
        assert_eq!(label_components(&empty, Connectivity::TwentySix).count(), 0);

        let diag = mask([4, 4, 4], &[[1, 1, 1], [2, 2, 2]]);
        assert_eq!(label_components(&diag, Connectivity::TwentySix).count(), 1);
        assert_eq!(label_components(&diag, Connectivity::Eighteen).count(), 2);
        assert_eq!(label_components(&diag, Connectivity::Six).count(), 2);

        let edge = mask([4, 4, 4], &[[1, 1, 1], [2, 2, 1]]);
        assert_eq!(label_components(&edge, Connectivity::Eighteen).count(), 1);
        assert_eq!(label_components(&edge, Connectivity::Six).count(), 2);

        let cube = LabelMask::new([3, 3, 3], [1.0; 3], vec![1; 27]).unwrap();
        let lab = label_components(&cube, Connectivity::TwentySix);
        assert_eq!(lab.sizes, vec![27]);
    }

    #[test]
    fn ids_follow_scan_order() {
        let m = mask([5, 1, 1], &[[4, 0, 0], [0, 0, 0], [2, 0, 0]]);
        let lab = label_components(&m, Connectivity::Six);
        assert_eq!(lab.labels, vec![1, 0, 2, 0, 3]);
    }

    /// A straight run of `n` voxels along x starting at `(0, y, z)`.
    fn run(y: usize, z: usize, n: usize) -> Vec<[usize; 3]> {
        (0..n).map(|x| [x, y, z]).collect()
    }

    #[test]
    fn strict_eleven_voxel_cut() {
        let mut on = run(0, 0, 10);
        on.extend(run(0, 3, 11));
        let mut block = Vec::new();
        for z in 6..13 {
            for y in 0..6 {
                for x in 0..6 {
                    block.push([x, y, z]);
                }
            }
        }
        block.truncate(238);
        on.extend(block);
        let m = mask([20, 8, 14], &on);
        let before = label_components(&m, Connectivity::TwentySix);
        let mut sizes = before.sizes.clone();
        sizes.sort();
        assert_eq!(sizes, vec![10, 11, 238]);
        let (out, removed) = remove_small_components(&m, 11, Connectivity::TwentySix).unwrap();
        assert_eq!(removed, 1);
        let mut after = label_components(&out, Connectivity::TwentySix).sizes;
        after.sort();
        assert_eq!(after, vec![11, 238]);

        let eleven = mask([12, 1, 1], &run(0, 0, 11));
        let (out, removed) = remove_small_components(&eleven, 11, Connectivity::TwentySix).unwrap();
        assert_eq!((out, removed), (eleven, 0));

        let empty = mask([3, 3, 3], &[]);
        let (out, removed) = remove_small_components(&empty, 11, Connectivity::TwentySix).unwrap();
        assert_eq!((out, removed), (empty, 0));
    }
}
