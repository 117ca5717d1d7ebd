//! Smooth random deformation of binary masks.
//!
//! Each connected component is deformed by a radial scale field around its
//! centroid, `s(theta) = 1 + magnitude * b(theta)`, where `b` is a periodic cubic
//! B-spline through `control_points` values drawn uniformly from `[-1, 1]`. The
//! deformed mask is rasterised by pulling every output pixel back through the map,
//! so a zero magnitude reproduces the input exactly.

use crate::data::Mask;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::{HashSet, VecDeque};

/// 8-connected foreground components as pixel index lists, in raster order of
/// their first pixel.
pub fn components(mask: &Mask) -> Vec<Vec<usize>> {
    let s = mask.side;
    let mut label = vec![usize::MAX; s * s];
    let mut out = Vec::new();
    for start in 0..s * s {
        if mask.data[start] == 0 || label[start] != usize::MAX {
            continue;
        }
        let id = out.len();
        let mut comp = Vec::new();
        let mut q = VecDeque::from([start]);
        label[start] = id;
        while let Some(p) = q.pop_front() {
            comp.push(p);
            let (y, x) = ((p / s) as isize, (p % s) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= s as isize || nx >= s as isize {
                        continue;
                    }
                    let np = ny as usize * s + nx as usize;
                    if mask.data[np] == 1 && label[np] == usize::MAX {
                        label[np] = id;
                        q.push_back(np);
                    }
                }
            }
        }
        out.push(comp);
    }
    out
}

/// Periodic uniform cubic B-spline through control values `c` at parameter
/// `t` in `[0, 1)`.
pub fn periodic_bspline(c: &[f64], t: f64) -> f64 {
    let n = c.len();
    let x = t.rem_euclid(1.0) * n as f64;
    let i = x.floor() as isize;
    let u = x - i as f64;
    let at = |k: isize| c[(k.rem_euclid(n as isize)) as usize];
    let b0 = (1.0 - u).powi(3) / 6.0;
    let b1 = (3.0 * u.powi(3) - 6.0 * u * u + 4.0) / 6.0;
    let b2 = (-3.0 * u.powi(3) + 3.0 * u * u + 3.0 * u + 1.0) / 6.0;
    let b3 = u.powi(3) / 6.0;
    b0 * at(i - 1) + b1 * at(i) + b2 * at(i + 1) + b3 * at(i + 2)
}

fn deform(mask: &Mask, comps: &[Vec<usize>], magnitude: f64, ctrl: &[Vec<f64>]) -> Mask {
    let s = mask.side;
    let mut out = vec![0u8; s * s];
    for (comp, c) in comps.iter().zip(ctrl) {
        let mut member = vec![false; s * s];
        let (mut sx, mut sy) = (0.0, 0.0);
        for &p in comp {
            member[p] = true;
            sx += (p % s) as f64;
            sy += (p / s) as f64;
        }
        let (cx, cy) = (sx / comp.len() as f64, sy / comp.len() as f64);
        for y in 0..s {
            for x in 0..s {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                let theta = dy.atan2(dx) / std::f64::consts::TAU;
                let scale = 1.0 + magnitude * periodic_bspline(c, theta);
                let src_x = (cx + dx / scale).round();
                let src_y = (cy + dy / scale).round();
                if src_x < 0.0 || src_y < 0.0 || src_x >= s as f64 || src_y >= s as f64 {
                    continue;
                }
                if member[src_y as usize * s + src_x as usize] {
                    out[y * s + x] = 1;
                }
            }
        }
    }
    Mask::new(s, out)
}

/// Draws `count` deformed copies of `mask`. Every copy keeps the number of
/// connected components; for positive magnitudes copies are pairwise distinct
/// and differ from the input.
pub fn perturb_masks(mask: &Mask, magnitude: f64, count: usize, control_points: usize, seed: u64) -> Result<Vec<Mask>> {
    if mask.area() == 0 {
        return Err(Error::Domain("cannot perturb an empty mask".into()));
    }
    if count == 0 {
        return Err(Error::Domain("perturbation count must be at least 1".into()));
    }
    if !(0.0..=1.0).contains(&magnitude) {
        return Err(Error::Domain(format!("magnitude {magnitude} outside [0, 1]")));
    }
    let comps = components(mask);
    if magnitude == 0.0 {
        return Ok(vec![mask.clone(); count]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen: HashSet<Vec<u8>> = HashSet::from([mask.data.clone()]);
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0;
    while out.len() < count {
        attempts += 1;
        if attempts > 50 * count + 100 {
            log::warn!("perturbation produced only {} distinct masks out of {count}", out.len());
            break;
        }
        let ctrl: Vec<Vec<f64>> = comps
            .iter()
            .map(|_| (0..control_points).map(|_| rng.random_range(-1.0..=1.0)).collect())
            .collect();
        let m = deform(mask, &comps, magnitude, &ctrl);
        if components(&m).len() != comps.len() || !seen.insert(m.data.clone()) {
            continue;
        }
        out.push(m);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_ellipses(side: usize) -> Mask {
        let mut d = vec![0u8; side * side];
        for y in 0..side {
            for x in 0..side {
                let (u, v) = (x as f64 / side as f64, y as f64 / side as f64);
                let e1 = ((u - 0.3) / 0.13).powi(2) + ((v - 0.5) / 0.28).powi(2);
                let e2 = ((u - 0.7) / 0.13).powi(2) + ((v - 0.5) / 0.28).powi(2);
                d[y * side + x] = (e1 < 1.0 || e2 < 1.0) as u8;
            }
        }
        Mask::new(side, d)
    }

    #[test]
    fn spline_partition_of_unity() {
        let c = vec![1.0; 12];
        for k in 0..100 {
            assert!((periodic_bspline(&c, k as f64 / 100.0) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_magnitude_is_identity() {
        let m = two_ellipses(32);
        for p in perturb_masks(&m, 0.0, 3, 12, 1).unwrap() {
            assert_eq!(p, m);
        }
        let comps = components(&m);
        let ctrl = vec![vec![0.7; 12]; comps.len()];
        assert_eq!(deform(&m, &comps, 0.0, &ctrl), m);
    }

    #[test]
    fn empty_mask_is_domain_error() {
        let m = Mask::new(8, vec![0; 64]);
        assert!(matches!(perturb_masks(&m, 0.1, 1, 12, 0), Err(Error::Domain(_))));
    }

    #[test]
    fn perturbed_masks_keep_component_count() {
        let m = two_ellipses(64);
        let out = perturb_masks(&m, 0.1, 20, 12, 5).unwrap();
        assert_eq!(out.len(), 20);
        for p in &out {
            assert_eq!(components(p).len(), 2);
            let iou = p.iou(&m);
            assert!((0.8..=0.999).contains(&iou), "iou {iou}");
        }
    }
}
