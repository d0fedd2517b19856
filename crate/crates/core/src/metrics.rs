//! Overlap and surface-distance metrics over binary masks.
//!
//! Distances run on foreground pixel centers (no boundary extraction) with
//! the exact two-pass lower-envelope distance transform, so they agree with
//! a brute-force nearest-neighbor scan to rounding error.
//!
//! Empty-mask conventions: both masks empty gives perfect overlap (1.0) and
//! zero distance; exactly one empty gives zero overlap and the image
//! diagonal as a distance sentinel.

use crate::error::{Result, SacError};

/// Boolean (H,W) foreground grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(SacError::BadShape {
                op: "binary_mask",
                shape: vec![h, w],
                reason: format!("{} pixels provided", data.len()),
            });
        }
        Ok(BinaryMask { h, w, data })
    }

    pub fn empty(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                data.push(f(y, x));
            }
        }
        BinaryMask { h, w, data }
    }

    /// Foreground pixels of one class in a labeled mask.
    pub fn from_labels(labels: &[u8], h: usize, w: usize, class: u8) -> Result<Self> {
        if labels.len() != h * w {
            return Err(SacError::BadShape {
                op: "binary_mask",
                shape: vec![h, w],
                reason: format!("{} labels provided", labels.len()),
            });
        }
        Ok(BinaryMask {
            h,
            w,
            data: labels.iter().map(|&l| l == class).collect(),
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_mask_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.h).flat_map(move |y| {
            (0..self.w).filter_map(move |x| self.get(y, x).then_some((y, x)))
        })
    }

    fn diagonal(&self) -> f64 {
        let dy = (self.h.saturating_sub(1)) as f64;
        let dx = (self.w.saturating_sub(1)) as f64;
        (dy * dy + dx * dx).sqrt()
    }
}

fn check_shapes(op: &'static str, x: &BinaryMask, y: &BinaryMask) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(SacError::ShapeMismatch {
            op,
            lhs: vec![x.h, x.w],
            rhs: vec![y.h, y.w],
        });
    }
    Ok(())
}

/// Dice similarity coefficient `2|X n Y| / (|X| + |Y|)`.
pub fn dsc(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    check_shapes("dsc", x, y)?;
    let inter = x
        .data
        .iter()
        .zip(&y.data)
        .filter(|(&a, &b)| a && b)
        .count();
    let total = x.count() + y.count();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// Intersection over union `|X n Y| / |X u Y|`.
pub fn iou(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    check_shapes("iou", x, y)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &b) in x.data.iter().zip(&y.data) {
        if a && b {
            inter += 1;
        }
        if a || b {
            union += 1;
        }
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

const EDT_INF: f64 = 1e20;

/// 1-d squared distance transform (lower envelope of parabolas).
fn edt_1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = -EDT_INF;
    z[1] = EDT_INF;
    for q in 1..n {
        let mut s;
        loop {
            let vk = v[k];
            s = ((f[q] + (q * q) as f64) - (f[vk] + (vk * vk) as f64))
                / (2.0 * q as f64 - 2.0 * vk as f64);
            if s <= z[k] {
                if k == 0 {
                    break;
                }
                k -= 1;
            } else {
                break;
            }
        }
        if s > z[k] {
            k += 1;
        }
        v[k] = q;
        z[k] = s;
        z[k + 1] = EDT_INF;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let vk = v[k];
        let dq = q as f64 - vk as f64;
        d[q] = dq * dq + f[vk];
    }
}

/// Exact squared Euclidean distance to the nearest foreground pixel.
fn edt2d(mask: &BinaryMask) -> Vec<f64> {
    let (h, w) = mask.shape();
    let mut grid: Vec<f64> = mask
        .data
        .iter()
        .map(|&v| if v { 0.0 } else { EDT_INF })
        .collect();

    let maxdim = h.max(w);
    let mut f = vec![0.0; maxdim];
    let mut d = vec![0.0; maxdim];
    let mut v = vec![0usize; maxdim];
    let mut z = vec![0.0; maxdim + 1];

    // columns
    for x in 0..w {
        for y in 0..h {
            f[y] = grid[y * w + x];
        }
        edt_1d(&f[..h], &mut d[..h], &mut v[..h], &mut z[..h + 1]);
        for y in 0..h {
            grid[y * w + x] = d[y];
        }
    }
    // rows
    for y in 0..h {
        f[..w].copy_from_slice(&grid[y * w..(y + 1) * w]);
        edt_1d(&f[..w], &mut d[..w], &mut v[..w], &mut z[..w + 1]);
        grid[y * w..(y + 1) * w].copy_from_slice(&d[..w]);
    }
    grid
}

/// Directed nearest-neighbor distances from every foreground pixel of
/// `from` to the foreground of `to`.
fn directed_distances(from: &BinaryMask, to: &BinaryMask) -> Vec<f64> {
    let edt = edt2d(to);
    from.pixels()
        .map(|(y, x)| edt[y * from.w + x].sqrt())
        .collect()
}

/// Exact symmetric Hausdorff distance over foreground pixel centers.
pub fn hausdorff(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    check_shapes("hausdorff", x, y)?;
    match (x.is_mask_empty(), y.is_mask_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(x.diagonal()),
        _ => {}
    }
    let max_of = |d: Vec<f64>| d.into_iter().fold(0.0f64, f64::max);
    Ok(max_of(directed_distances(x, y)).max(max_of(directed_distances(y, x))))
}

/// Linear-interpolated percentile of a sorted slice.
fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        let frac = pos - lo as f64;
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

/// 95th percentile of the pooled directed distances (both directions
/// pooled together). Never exceeds the Hausdorff distance.
pub fn hd95(x: &BinaryMask, y: &BinaryMask) -> Result<f64> {
    check_shapes("hd95", x, y)?;
    match (x.is_mask_empty(), y.is_mask_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(x.diagonal()),
        _ => {}
    }
    let mut pooled = directed_distances(x, y);
    pooled.extend(directed_distances(y, x));
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(percentile(&pooled, 0.95))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn mask_from(points: &[(usize, usize)], h: usize, w: usize) -> BinaryMask {
        let mut m = BinaryMask::empty(h, w);
        for &(y, x) in points {
            m.set(y, x, true);
        }
        m
    }

    /// O(n^2) oracle: directed distances by exhaustive nearest-neighbor scan.
    fn brute_directed(from: &BinaryMask, to: &BinaryMask) -> Vec<f64> {
        let a: Vec<(usize, usize)> = from.pixels().collect();
        let b: Vec<(usize, usize)> = to.pixels().collect();
        a.iter()
            .map(|&(ay, ax)| {
                b.iter()
                    .map(|&(by, bx)| {
                        let dy = ay as f64 - by as f64;
                        let dx = ax as f64 - bx as f64;
                        (dy * dy + dx * dx).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }

    fn brute_hausdorff(x: &BinaryMask, y: &BinaryMask) -> f64 {
        let m = |v: Vec<f64>| v.into_iter().fold(0.0f64, f64::max);
        m(brute_directed(x, y)).max(m(brute_directed(y, x)))
    }

    #[test]
    fn dsc_hand_cases() {
        let x = mask_from(&[(0, 0), (0, 1)], 4, 4);
        assert_eq!(dsc(&x, &x).unwrap(), 1.0);

        let y = mask_from(&[(2, 2), (3, 3)], 4, 4);
        assert_eq!(dsc(&x, &y).unwrap(), 0.0);

        // |X|=3, |Y|=5, overlap 2 -> 4/8
        let x = mask_from(&[(0, 0), (0, 1), (0, 2)], 4, 4);
        let y = mask_from(&[(0, 1), (0, 2), (1, 0), (1, 1), (1, 2)], 4, 4);
        assert_eq!(dsc(&x, &y).unwrap(), 0.5);
    }

    #[test]
    fn iou_hand_cases() {
        let x = mask_from(&[(1, 1), (1, 2)], 4, 4);
        assert_eq!(iou(&x, &x).unwrap(), 1.0);
        let y = mask_from(&[(3, 3)], 4, 4);
        assert_eq!(iou(&x, &y).unwrap(), 0.0);
        // intersection 2, union 6
        let x = mask_from(&[(0, 0), (0, 1), (0, 2), (0, 3)], 4, 4);
        let y = mask_from(&[(0, 2), (0, 3), (1, 0), (1, 1)], 4, 4);
        assert!((iou(&x, &y).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn hausdorff_hand_cases() {
        let x = mask_from(&[(0, 0)], 8, 8);
        assert_eq!(hausdorff(&x, &x).unwrap(), 0.0);

        let y = mask_from(&[(3, 4)], 8, 8);
        assert_eq!(hausdorff(&x, &y).unwrap(), 5.0);

        // x subset of y: distance from y's far point
        let y = mask_from(&[(0, 0), (0, 2)], 8, 8);
        assert_eq!(hausdorff(&x, &y).unwrap(), 2.0);
    }

    #[test]
    fn empty_mask_conventions() {
        let e = BinaryMask::empty(8, 8);
        let x = mask_from(&[(4, 4)], 8, 8);
        assert_eq!(dsc(&e, &e).unwrap(), 1.0);
        assert_eq!(iou(&e, &e).unwrap(), 1.0);
        assert_eq!(hausdorff(&e, &e).unwrap(), 0.0);
        assert_eq!(hd95(&e, &e).unwrap(), 0.0);

        assert_eq!(dsc(&e, &x).unwrap(), 0.0);
        assert_eq!(iou(&x, &e).unwrap(), 0.0);
        let diag = (49.0f64 + 49.0).sqrt();
        assert_eq!(hausdorff(&e, &x).unwrap(), diag);
        assert_eq!(hd95(&x, &e).unwrap(), diag);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = BinaryMask::empty(4, 4);
        let b = BinaryMask::empty(4, 5);
        assert!(dsc(&a, &b).is_err());
        assert!(iou(&a, &b).is_err());
        assert!(hausdorff(&a, &b).is_err());
        assert!(hd95(&a, &b).is_err());
    }

    fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> BinaryMask {
        BinaryMask::from_fn(h, w, |_, _| rng.gen::<f64>() < density)
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..50 {
            let density = 0.02 + 0.2 * (trial % 5) as f64;
            let x = random_mask(&mut rng, 16, 16, density);
            let y = random_mask(&mut rng, 16, 16, density);
            if x.is_mask_empty() || y.is_mask_empty() {
                continue;
            }
            let got = hausdorff(&x, &y).unwrap();
            let want = brute_hausdorff(&x, &y);
            assert!((got - want).abs() < 1e-9, "trial {trial}: {got} vs {want}");

            let mut pooled = brute_directed(&x, &y);
            pooled.extend(brute_directed(&y, &x));
            pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let want95 = percentile(&pooled, 0.95);
            let got95 = hd95(&x, &y).unwrap();
            assert!((got95 - want95).abs() < 1e-9);
            assert!(got95 <= got + 1e-12);
        }
    }

    #[test]
    fn outlier_pulls_hausdorff_above_hd95() {
        // a blob plus one far outlier: the outlier dominates the max but is
        // trimmed by the 95th percentile
        let mut x = BinaryMask::empty(16, 16);
        let mut y = BinaryMask::empty(16, 16);
        for dy in 0..6 {
            for dx in 0..6 {
                x.set(dy, dx, true);
                y.set(dy, dx, true);
            }
        }
        x.set(15, 15, true);
        let h = hausdorff(&x, &y).unwrap();
        let h95 = hd95(&x, &y).unwrap();
        assert!(h > 10.0);
        assert!(h95 < h, "hd95 {h95} vs hausdorff {h}");
    }

    #[test]
    fn symmetry_and_dsc_iou_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let x = random_mask(&mut rng, 12, 12, 0.3);
            let y = random_mask(&mut rng, 12, 12, 0.3);
            assert_eq!(dsc(&x, &y).unwrap(), dsc(&y, &x).unwrap());
            assert_eq!(iou(&x, &y).unwrap(), iou(&y, &x).unwrap());
            assert_eq!(hausdorff(&x, &y).unwrap(), hausdorff(&y, &x).unwrap());
            let d = dsc(&x, &y).unwrap();
            let j = iou(&x, &y).unwrap();
            assert!(d + 1e-12 >= j);
            assert!((d - 2.0 * j / (1.0 + j)).abs() < 1e-12);
        }
    }

    #[test]
    fn joint_translation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let x = random_mask(&mut rng, 8, 8, 0.4);
        let y = random_mask(&mut rng, 8, 8, 0.4);
        let shift = |m: &BinaryMask| {
            BinaryMask::from_fn(16, 16, |r, c| {
                (4..12).contains(&r) && (4..12).contains(&c) && m.get(r - 4, c - 4)
            })
        };
        let emb = |m: &BinaryMask| {
            BinaryMask::from_fn(16, 16, |r, c| r < 8 && c < 8 && m.get(r, c))
        };
        assert!(
            (hausdorff(&emb(&x), &emb(&y)).unwrap() - hausdorff(&shift(&x), &shift(&y)).unwrap())
                .abs()
                < 1e-12
        );
        assert!(
            (hd95(&emb(&x), &emb(&y)).unwrap() - hd95(&shift(&x), &shift(&y)).unwrap()).abs()
                < 1e-12
        );
    }
}
