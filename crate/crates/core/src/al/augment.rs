//! Classical geometric augmentation.

use crate::data::{ImageSample, Provenance};
use crate::error::{Error, Result};
use crate::util::{id_stream, rng_for};
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    /// Degrees, counter-clockwise.
    pub angle: f64,
    /// Pixels.
    pub tx: f64,
    pub ty: f64,
    pub flip: bool,
}

impl RigidTransform {
    pub const IDENTITY: RigidTransform = RigidTransform {
        angle: 0.0,
        tx: 0.0,
        ty: 0.0,
        flip: false,
    };

    /// Rotation in `[-15, 15]` degrees, shifts up to a tenth of the side and a fair flip.
    pub fn draw(rng: &mut impl Rng, side: usize) -> Self {
        let t = 0.1 * side as f64;
        RigidTransform {
            angle: rng.random_range(-15.0..=15.0),
            tx: rng.random_range(-t..=t),
            ty: rng.random_range(-t..=t),
            flip: rng.random_bool(0.5),
        }
    }
}

/// Applies `t` about the image centre with bilinear sampling; samples outside
/// the image take the nearest border value.
pub fn apply_transform(pixels: &[f32], side: usize, t: RigidTransform) -> Vec<f32> {
    if t == RigidTransform::IDENTITY {
        return pixels.to_vec();
    }
    let c = (side as f64 - 1.0) / 2.0;
    let (s, co) = t.angle.to_radians().sin_cos();
    let at = |x: isize, y: isize| {
        let x = x.clamp(0, side as isize - 1) as usize;
        let y = y.clamp(0, side as isize - 1) as usize;
        pixels[y * side + x] as f64
    };
    let mut out = vec![0f32; side * side];
    for y in 0..side {
        for x in 0..side {
            // Inverse map: output -> shifted -> rotated -> flipped source.
            let u = x as f64 - c - t.tx;
            let v = y as f64 - c - t.ty;
            let mut sx = co * u + s * v;
            let sy = -s * u + co * v;
            if t.flip {
                sx = -sx;
            }
            let (sx, sy) = (sx + c, sy + c);
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let v = at(x0, y0) * (1.0 - fx) * (1.0 - fy)
                + at(x0 + 1, y0) * fx * (1.0 - fy)
                + at(x0, y0 + 1) * (1.0 - fx) * fy
                + at(x0 + 1, y0 + 1) * fx * fy;
            out[y * side + x] = v as f32;
        }
    }
    out
}

/// `per_sample_count` randomly transformed copies of every sample, labels kept.
pub fn augment_standard(samples: &[&ImageSample], per_sample_count: usize, seed: u64) -> Result<Vec<ImageSample>> {
    if per_sample_count == 0 {
        return Err(Error::Domain("per-sample augmentation count must be at least 1".into()));
    }
    let mut out = Vec::with_capacity(samples.len() * per_sample_count);
    for s in samples {
        if s.pixels.len() != s.side * s.side {
            return Err(Error::Shape(format!(
                "sample {} has {} pixels for side {}",
                s.id,
                s.pixels.len(),
                s.side
            )));
        }
        let mut rng = rng_for(seed, "augment-standard", id_stream(&s.id));
        for j in 0..per_sample_count {
            let t = RigidTransform::draw(&mut rng, s.side);
            out.push(ImageSample {
                id: format!("da-{}-{j}", s.id),
                side: s.side,
                pixels: apply_transform(&s.pixels, s.side, t),
                labels: s.labels.clone(),
                patient_id: s.patient_id.clone(),
                provenance: Provenance::Synthetic,
                base_id: Some(s.id.clone()),
                mask_id: None,
            });
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flip_and_shift_are_exact_on_the_grid() {
        let side = 4;
        let px: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let f = apply_transform(
            &px,
            side,
            RigidTransform {
                flip: true,
                ..RigidTransform::IDENTITY
            },
        );
        assert_eq!(&f[..4], &[3.0, 2.0, 1.0, 0.0]);
        let s = apply_transform(
            &px,
            side,
            RigidTransform {
                tx: 1.0,
                ..RigidTransform::IDENTITY
            },
        );
        assert_eq!(&s[..4], &[0.0, 0.0, 1.0, 2.0]);
        let r = apply_transform(
            &px,
            side,
            RigidTransform {
                angle: 1e-9,
                ..RigidTransform::IDENTITY
            },
        );
        for (a, b) in r.iter().zip(&px) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
