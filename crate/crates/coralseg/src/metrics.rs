//! Evaluation metrics on binary masks: Dice, Jaccard, 95th-percentile
//! Hausdorff distance, and average surface distance.
//!
//! Surfaces are foreground voxels with a face-adjacent background (or
//! out-of-bounds) neighbor; 2D masks use 4-neighborhoods, 3D use 6. The
//! Hausdorff percentile is nearest-rank on the sorted directed distances and
//! the symmetric value is the max of both directions; ASD averages the two
//! directed means.

use crate::{Error, Result};

/// Binary mask over a 2D or 3D grid with per-axis spacing.
#[derive(Debug, Clone)]
pub struct BinaryMask {
    dims: Vec<usize>,
    voxels: Vec<bool>,
    spacing: Vec<f64>,
}

impl BinaryMask {
    /// 2D mask from row-major data, unit spacing.
    pub fn new_2d(h: usize, w: usize, voxels: Vec<bool>) -> Result<Self> {
        Self::new(vec![h, w], voxels, vec![1.0, 1.0])
    }

    pub fn new(dims: Vec<usize>, voxels: Vec<bool>, spacing: Vec<f64>) -> Result<Self> {
        if dims.len() != 2 && dims.len() != 3 {
            return Err(Error::InvalidArg("masks must be 2D or 3D".into()));
        }
        let count: usize = dims.iter().product();
        if count == 0 {
            return Err(Error::EmptyInput);
        }
        if voxels.len() != count {
            return Err(Error::ShapeMismatch(format!(
                "{} voxels for dims {:?}",
                voxels.len(),
                dims
            )));
        }
        if spacing.len() != dims.len() || spacing.iter().any(|s| *s <= 0.0) {
            return Err(Error::InvalidArg("spacing must be positive per axis".into()));
        }
        Ok(Self {
            dims,
            voxels,
            spacing,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn foreground_count(&self) -> usize {
        self.voxels.iter().filter(|v| **v).count()
    }

    fn same_dims(&self, other: &Self) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::DimMismatch(format!(
                "{:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    fn index(&self, coord: &[usize]) -> usize {
        match self.dims.len() {
            2 => coord[0] * self.dims[1] + coord[1],
            _ => (coord[0] * self.dims[1] + coord[1]) * self.dims[2] + coord[2],
        }
    }

    fn get(&self, coord: &[usize]) -> bool {
        self.voxels[self.index(coord)]
    }
}

/// Overlap coefficient `2|A∩B| / (|A|+|B|)`; both masks empty counts as 1.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_dims(b)?;
    let mut inter = 0usize;
    let mut total = 0usize;
    for (x, y) in a.voxels.iter().zip(&b.voxels) {
        inter += usize::from(*x && *y);
        total += usize::from(*x) + usize::from(*y);
    }
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Intersection over union; both masks empty counts as 1.
pub fn jaccard(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_dims(b)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (x, y) in a.voxels.iter().zip(&b.voxels) {
        inter += usize::from(*x && *y);
        union += usize::from(*x || *y);
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Foreground voxels with at least one face-adjacent background or
/// out-of-bounds neighbor, as coordinates scaled by spacing.
pub fn surface(mask: &BinaryMask) -> Result<Vec<Vec<f64>>> {
    if mask.foreground_count() == 0 {
        return Err(Error::EmptySurface);
    }
    let nd = mask.dims.len();
    let mut points = Vec::new();
    let mut coord = vec![0usize; nd];
    loop {
        if mask.get(&coord) {
            let mut boundary = false;
            'axes: for axis in 0..nd {
                for dir in [-1isize, 1] {
                    let pos = coord[axis] as isize + dir;
                    if pos < 0 || pos as usize >= mask.dims[axis] {
                        boundary = true;
                        break 'axes;
                    }
                    let mut nb = coord.clone();
                    nb[axis] = pos as usize;
                    if !mask.get(&nb) {
                        boundary = true;
                        break 'axes;
                    }
                }
            }
            if boundary {
                points.push(
                    coord
                        .iter()
                        .zip(&mask.spacing)
                        .map(|(c, s)| *c as f64 * s)
                        .collect(),
                );
            }
        }
        // Advance the odometer over the grid.
        let mut axis = nd;
        loop {
            if axis == 0 {
                return Ok(points);
            }
            axis -= 1;
            coord[axis] += 1;
            if coord[axis] < mask.dims[axis] {
                break;
            }
            coord[axis] = 0;
        }
    }
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// For each point of `from`, its nearest Euclidean distance to `to`.
fn nearest_distances(from: &[Vec<f64>], to: &[Vec<f64>]) -> Vec<f64> {
    from.iter()
        .map(|p| {
            to.iter()
                .map(|q| euclid(p, q))
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Nearest-rank percentile: the `ceil(pct * n)`-th element of the sorted list.
fn nearest_rank_percentile(mut values: Vec<f64>, pct: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    let rank = ((pct * n as f64).ceil() as usize).clamp(1, n);
    values[rank - 1]
}

/// 95th-percentile Hausdorff distance, symmetrized as the max of the two
/// directed percentiles. Both masks must be nonempty.
pub fn hd95(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_dims(b)?;
    let sa = surface(a)?;
    let sb = surface(b)?;
    let d_ab = nearest_rank_percentile(nearest_distances(&sa, &sb), 0.95);
    let d_ba = nearest_rank_percentile(nearest_distances(&sb, &sa), 0.95);
    Ok(d_ab.max(d_ba))
}

/// Average surface distance, symmetrized as the mean of the two directed
/// means. Both masks must be nonempty.
pub fn asd(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.same_dims(b)?;
    let sa = surface(a)?;
    let sb = surface(b)?;
    let mean = |d: Vec<f64>| d.iter().sum::<f64>() / d.len() as f64;
    let d_ab = mean(nearest_distances(&sa, &sb));
    let d_ba = mean(nearest_distances(&sb, &sa));
    Ok(0.5 * (d_ab + d_ba))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_2d(h: usize, w: usize, fg: &[(usize, usize)]) -> BinaryMask {
        let mut v = vec![false; h * w];
        for (r, c) in fg {
            v[r * w + c] = true;
        }
        BinaryMask::new_2d(h, w, v).unwrap()
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize) -> BinaryMask {
        loop {
            let v: Vec<bool> = (0..h * w).map(|_| rng.gen_bool(0.4)).collect();
            if v.iter().any(|x| *x) {
                return BinaryMask::new_2d(h, w, v).unwrap();
            }
        }
    }

    // --- independent oracles, written from the definitions ---

    fn surface_oracle(m: &BinaryMask) -> Vec<(usize, usize)> {
        let (h, w) = (m.dims()[0], m.dims()[1]);
        let mut out = Vec::new();
        for r in 0..h {
            for c in 0..w {
                if !m.get(&[r, c]) {
                    continue;
                }
                let neighbors = [
                    (r as isize - 1, c as isize),
                    (r as isize + 1, c as isize),
                    (r as isize, c as isize - 1),
                    (r as isize, c as isize + 1),
                ];
                let is_boundary = neighbors.iter().any(|&(nr, nc)| {
                    nr < 0
                        || nc < 0
                        || nr >= h as isize
                        || nc >= w as isize
                        || !m.get(&[nr as usize, nc as usize])
                });
                if is_boundary {
                    out.push((r, c));
                }
            }
        }
        out
    }

    /// Brute-force oracle: full all-pairs distance table, explicit row
    /// minima, explicit nearest-rank indexing.
    fn hd95_asd_oracle(a: &BinaryMask, b: &BinaryMask) -> (f64, f64) {
        let sa = surface_oracle(a);
        let sb = surface_oracle(b);
        let table: Vec<Vec<f64>> = sa
            .iter()
            .map(|&(r1, c1)| {
                sb.iter()
                    .map(|&(r2, c2)| {
                        let dr = r1 as f64 - r2 as f64;
                        let dc = c1 as f64 - c2 as f64;
                        (dr * dr + dc * dc).sqrt()
                    })
                    .collect()
            })
            .collect();
        let mins_ab: Vec<f64> = table
            .iter()
            .map(|row| row.iter().cloned().fold(f64::INFINITY, f64::min))
            .collect();
        let mins_ba: Vec<f64> = (0..sb.len())
            .map(|j| {
                (0..sa.len())
                    .map(|i| table[i][j])
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let pct = |mut v: Vec<f64>| -> f64 {
            v.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let k = (0.95 * v.len() as f64).ceil() as usize;
            v[k.max(1) - 1]
        };
        let hd = pct(mins_ab.clone()).max(pct(mins_ba.clone()));
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let asd = 0.5 * (mean(&mins_ab) + mean(&mins_ba));
        (hd, asd)
    }

    #[test]
    fn dice_identical_and_disjoint() {
        let a = mask_2d(4, 4, &[(0, 0), (1, 1)]);
        let b = mask_2d(4, 4, &[(2, 2), (3, 3)]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn dice_half_overlap() {
        let a = mask_2d(4, 4, &[(0, 0), (0, 1), (0, 2), (0, 3)]);
        let b = mask_2d(4, 4, &[(0, 2), (0, 3), (1, 0), (1, 1)]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn dice_both_empty_is_one() {
        let a = BinaryMask::new_2d(3, 3, vec![false; 9]).unwrap();
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(jaccard(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn dim_mismatch_errors() {
        let a = mask_2d(3, 3, &[(0, 0)]);
        let b = mask_2d(4, 4, &[(0, 0)]);
        assert!(dice(&a, &b).is_err());
        assert!(jaccard(&a, &b).is_err());
        assert!(hd95(&a, &b).is_err());
        assert!(asd(&a, &b).is_err());
    }

    #[test]
    fn surface_single_voxel_and_filled_square() {
        let single = mask_2d(5, 5, &[(2, 3)]);
        assert_eq!(surface(&single).unwrap(), vec![vec![2.0, 3.0]]);

        let mut fg = Vec::new();
        for r in 1..4 {
            for c in 1..4 {
                fg.push((r, c));
            }
        }
        let square = mask_2d(5, 5, &fg);
        let surf = surface(&square).unwrap();
        assert_eq!(surf.len(), 8);
        assert!(!surf.contains(&vec![2.0, 2.0]));
    }

    #[test]
    fn surface_full_grid_is_border() {
        let full = BinaryMask::new_2d(4, 4, vec![true; 16]).unwrap();
        let surf = surface(&full).unwrap();
        assert_eq!(surf.len(), 12); // 16 minus 4 interior
    }

    #[test]
    fn surface_empty_mask_errors() {
        let empty = BinaryMask::new_2d(3, 3, vec![false; 9]).unwrap();
        assert!(matches!(surface(&empty), Err(Error::EmptySurface)));
    }

    #[test]
    fn hd95_identity_and_two_points() {
        let a = mask_2d(8, 8, &[(1, 1), (2, 2)]);
        assert_eq!(hd95(&a, &a).unwrap(), 0.0);
        assert_eq!(asd(&a, &a).unwrap(), 0.0);

        let p = mask_2d(8, 8, &[(2, 1)]);
        let q = mask_2d(8, 8, &[(2, 4)]);
        assert_eq!(hd95(&p, &q).unwrap(), 3.0);
        assert_eq!(asd(&p, &q).unwrap(), 3.0);
    }

    #[test]
    fn hd95_asd_match_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..200 {
            let a = random_mask(&mut rng, 8, 8);
            let b = random_mask(&mut rng, 8, 8);
            let (hd_want, asd_want) = hd95_asd_oracle(&a, &b);
            let hd_got = hd95(&a, &b).unwrap();
            let asd_got = asd(&a, &b).unwrap();
            assert!((hd_got - hd_want).abs() < 1e-12);
            assert!((asd_got - asd_want).abs() < 1e-12);
        }
    }

    #[test]
    fn metrics_symmetric_and_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..100 {
            let a = random_mask(&mut rng, 6, 6);
            let b = random_mask(&mut rng, 6, 6);
            let d = dice(&a, &b).unwrap();
            let j = jaccard(&a, &b).unwrap();
            assert!((0.0..=1.0).contains(&d));
            assert!((0.0..=1.0).contains(&j));
            assert_eq!(d, dice(&b, &a).unwrap());
            assert_eq!(j, jaccard(&b, &a).unwrap());
            assert_eq!(hd95(&a, &b).unwrap(), hd95(&b, &a).unwrap());
            assert_eq!(asd(&a, &b).unwrap(), asd(&b, &a).unwrap());
            assert!(hd95(&a, &b).unwrap() >= 0.0);
            assert!(asd(&a, &b).unwrap() >= 0.0);
        }
    }

    #[test]
    fn jaccard_dice_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let a = random_mask(&mut rng, 7, 7);
            let b = random_mask(&mut rng, 7, 7);
            let d = dice(&a, &b).unwrap();
            let j = jaccard(&a, &b).unwrap();
            assert!((j - d / (2.0 - d)).abs() < 1e-12, "identity broke: d={d}, j={j}");
        }
    }

    #[test]
    fn asd_zero_iff_surfaces_identical() {
        let a = mask_2d(6, 6, &[(1, 1), (1, 2), (2, 1), (2, 2)]);
        // Same surface, different interior is impossible at this size; a
        // shifted copy must have positive ASD.
        let b = mask_2d(6, 6, &[(2, 2), (2, 3), (3, 2), (3, 3)]);
        assert!(asd(&a, &b).unwrap() > 0.0);
        assert_eq!(asd(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn spacing_scales_distances() {
        let mut v1 = vec![false; 16];
        v1[0] = true; // (0,0)
        let mut v2 = vec![false; 16];
        v2[2] = true; // (0,2)
        let a = BinaryMask::new(vec![4, 4], v1, vec![1.0, 0.5]).unwrap();
        let b = BinaryMask::new(vec![4, 4], v2, vec![1.0, 0.5]).unwrap();
        assert_eq!(hd95(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn three_d_masks_work() {
        let mut v = vec![false; 27];
        v[13] = true; // center of 3x3x3
        let a = BinaryMask::new(vec![3, 3, 3], v.clone(), vec![1.0; 3]).unwrap();
        let mut w = vec![false; 27];
        w[14] = true; // one step along last axis
        let b = BinaryMask::new(vec![3, 3, 3], w, vec![1.0; 3]).unwrap();
        assert_eq!(hd95(&a, &b).unwrap(), 1.0);
        assert_eq!(surface(&a).unwrap().len(), 1);
    }
}
