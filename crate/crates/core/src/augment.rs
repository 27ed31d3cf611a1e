//! Geometric augmentation: horizontal flip, translation and rotation, plus a
//! seeded random policy applying them in the order flip → shift → rotate.
//!
//! Vacated pixels are filled with 0 (mammogram background). Every operator
//! keeps the image shape, and outputs are clipped to `[0, 1]`.

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patchset::{Patch, PatchRecord};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentPolicy {
    pub hflip_enabled: bool,
    /// Maximum translation per axis, as a fraction of that axis' length.
    pub shift_fraction_max: f32,
    pub rotate_degrees_max: f32,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    fn default() -> Self {
        AugmentPolicy {
            hflip_enabled: true,
            shift_fraction_max: 0.2,
            rotate_degrees_max: 20.0,
            seed: 0,
        }
    }
}

/// The random parameters drawn for one augmentation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip: bool,
    pub dx: f32,
    pub dy: f32,
    pub degrees: f32,
}

impl AugmentPolicy {
    /// A policy that leaves every image untouched.
    pub fn identity() -> Self {
        AugmentPolicy {
            hflip_enabled: false,
            shift_fraction_max: 0.0,
            rotate_degrees_max: 0.0,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.shift_fraction_max) {
            return Err(Error::Config(format!(
                "shift_fraction_max {} outside [0, 1]",
                self.shift_fraction_max
            )));
        }
        if !(0.0..=180.0).contains(&self.rotate_degrees_max) {
            return Err(Error::Config(format!(
                "rotate_degrees_max {} outside [0, 180]",
                self.rotate_degrees_max
            )));
        }
        Ok(())
    }

    /// Parameters for draw `index`. Pure in `(seed, index)`: each index reads
    /// its own ChaCha stream, so draws can be made in any order.
    pub fn draw(&self, index: u64) -> AugmentDraw {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index);
        let coin = rng.random_bool(0.5);
        let mut symmetric = |m: f32| {
            let u: f32 = rng.random_range(-1.0..=1.0);
            u * m
        };
        let dx = symmetric(self.shift_fraction_max);
        let dy = symmetric(self.shift_fraction_max);
        let degrees = symmetric(self.rotate_degrees_max);
        AugmentDraw {
            flip: self.hflip_enabled && coin,
            dx,
            dy,
            degrees,
        }
    }

    /// Translation bounded by this policy.
    pub fn shift(&self, image: &Patch, dx_fraction: f32, dy_fraction: f32) -> Result<Patch> {
        let m = self.shift_fraction_max;
        if dx_fraction.abs() > m || dy_fraction.abs() > m {
            return Err(Error::Input(format!(
                "shift ({dx_fraction}, {dy_fraction}) exceeds the policy bound {m}"
            )));
        }
        shift(image, dx_fraction, dy_fraction)
    }

    /// Rotation bounded by this policy.
    pub fn rotate(&self, image: &Patch, degrees: f32) -> Result<Patch> {
        if degrees.abs() > self.rotate_degrees_max {
            return Err(Error::Input(format!(
                "rotation {degrees}° exceeds the policy bound {}°",
                self.rotate_degrees_max
            )));
        }
        rotate(image, degrees)
    }

    pub fn apply(&self, image: &Patch, draw: &AugmentDraw) -> Result<Patch> {
        let flipped;
        let mut current = image;
        if draw.flip {
            flipped = hflip(image);
            current = &flipped;
        }
        let shifted = self.shift(current, draw.dx, draw.dy)?;
        self.rotate(&shifted, draw.degrees)
    }
}

/// Mirrors columns: column `j` moves to `width - 1 - j`.
pub fn hflip(image: &Patch) -> Patch {
    image.slice(s![.., ..;-1]).to_owned()
}

/// Translates content by `round(fraction × dimension)` pixels; positive `dx`
/// moves content right, positive `dy` moves it down.
pub fn shift(image: &Patch, dx_fraction: f32, dy_fraction: f32) -> Result<Patch> {
    if !(dx_fraction.abs() <= 1.0 && dy_fraction.abs() <= 1.0) {
        return Err(Error::Input(format!(
            "shift fractions ({dx_fraction}, {dy_fraction}) must lie in [-1, 1]"
        )));
    }
    let (h, w) = image.dim();
    let px = (dx_fraction * w as f32).round() as isize;
    let py = (dy_fraction * h as f32).round() as isize;
    if px == 0 && py == 0 {
        return Ok(image.clone());
    }
    let mut out = Array2::zeros((h, w));
    let (h, w) = (h as isize, w as isize);
    let rows = (py.max(0), (h + py).min(h));
    let cols = (px.max(0), (w + px).min(w));
    if rows.0 < rows.1 && cols.0 < cols.1 {
        out.slice_mut(s![rows.0..rows.1, cols.0..cols.1])
            .assign(&image.slice(s![rows.0 - py..rows.1 - py, cols.0 - px..cols.1 - px]));
    }
    Ok(out)
}

/// Rotates about the image centre by `degrees` (counter-clockwise as
/// displayed), bilinear interpolation, zero fill outside the source.
pub fn rotate(image: &Patch, degrees: f32) -> Result<Patch> {
    if !(degrees.abs() <= 180.0) {
        return Err(Error::Input(format!("rotation {degrees}° outside [-180, 180]")));
    }
    if degrees == 0.0 {
        return Ok(image.clone());
    }
    let (h, w) = image.dim();
    let theta = (degrees as f64).to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let sample = |r: isize, c: isize| -> f64 {
        if r < 0 || c < 0 || r >= h as isize || c >= w as isize {
            0.0
        } else {
            image[[r as usize, c as usize]] as f64
        }
    };
    let out = Array2::from_shape_fn((h, w), |(r, c)| {
        let x = c as f64 - cx;
        let y = r as f64 - cy;
        // Inverse map: where in the source does this output pixel come from.
        let sx = cos * x - sin * y + cx;
        let sy = sin * x + cos * y + cy;
        let x0 = sx.floor();
        let y0 = sy.floor();
        let fx = sx - x0;
        let fy = sy - y0;
        let (x0, y0) = (x0 as isize, y0 as isize);
        let v = (1.0 - fy) * ((1.0 - fx) * sample(y0, x0) + fx * sample(y0, x0 + 1))
            + fy * ((1.0 - fx) * sample(y0 + 1, x0) + fx * sample(y0 + 1, x0 + 1));
        v.clamp(0.0, 1.0) as f32
    });
    Ok(out)
}

/// Flip with probability ½ (when enabled), then a uniform shift in
/// `±shift_fraction_max` per axis, then a uniform rotation in
/// `±rotate_degrees_max`. Deterministic per `(policy.seed, draw_index)`.
pub fn random_augment(image: &Patch, policy: &AugmentPolicy, draw_index: u64) -> Result<Patch> {
    policy.validate()?;
    let draw = policy.draw(draw_index);
    policy.apply(image, &draw)
}

/// Augments the pixels and keeps the metadata (and therefore the label).
pub fn augment_record(record: &PatchRecord, policy: &AugmentPolicy, draw_index: u64) -> Result<PatchRecord> {
    Ok(PatchRecord {
        meta: record.meta.clone(),
        image: random_augment(&record.image, policy, draw_index)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patchset::PATCH_SIZE;
    use proptest::prelude::*;

    fn ramp() -> Patch {
        Array2::from_shape_fn((PATCH_SIZE, PATCH_SIZE), |(r, c)| ((r * 7 + c * 3) % 256) as f32 / 255.0)
    }

    fn smooth() -> Patch {
        Array2::from_shape_fn((PATCH_SIZE, PATCH_SIZE), |(r, c)| {
            let (y, x) = (r as f32 / 40.0, c as f32 / 55.0);
            0.5 + 0.25 * (x.sin() * y.cos())
        })
    }

    #[test]
    fn hflip_hand_checked_3x3() {
        let img = Array2::from_shape_vec((3, 3), vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]).unwrap();
        let expected = Array2::from_shape_vec((3, 3), vec![0.3, 0.2, 0.1, 0.6, 0.5, 0.4, 0.9, 0.8, 0.7]).unwrap();
        assert_eq!(hflip(&img), expected);
    }

    #[test]
    fn hflip_moves_column_zero_to_last() {
        let mut img = Array2::zeros((PATCH_SIZE, PATCH_SIZE));
        img[[10, 0]] = 0.75;
        let f = hflip(&img);
        assert_eq!(f[[10, 255]], 0.75);
        assert_eq!(hflip(&f), img);
    }

    #[test]
    fn zero_shift_is_identity() {
        let img = ramp();
        assert_eq!(shift(&img, 0.0, 0.0).unwrap(), img);
    }

    #[test]
    fn shift_point_two_is_51_pixels() {
        let img = Array2::from_elem((PATCH_SIZE, PATCH_SIZE), 0.5f32);
        let out = shift(&img, 0.2, 0.0).unwrap();
        for r in 0..PATCH_SIZE {
            for c in 0..51 {
                assert_eq!(out[[r, c]], 0.0);
            }
            assert_eq!(out[[r, 51]], 0.5);
        }
    }

    #[test]
    fn shift_and_back_restores_interior() {
        let img = ramp();
        let there = shift(&img, 0.1, -0.05).unwrap();
        let back = shift(&there, -0.1, 0.05).unwrap();
        // 26 px horizontal, 13 px vertical shift; the interior survives.
        let inner = s![13..PATCH_SIZE - 13, 26..PATCH_SIZE - 26];
        assert_eq!(back.slice(inner), img.slice(inner));
    }

    #[test]
    fn shift_out_of_range_is_rejected() {
        let img = ramp();
        assert!(shift(&img, 1.5, 0.0).is_err());
        assert!(AugmentPolicy::default().shift(&img, 0.25, 0.0).is_err());
        assert!(AugmentPolicy::default().shift(&img, 0.2, -0.2).is_ok());
    }

    #[test]
    fn rotate_zero_is_identity() {
        let img = ramp();
        assert_eq!(rotate(&img, 0.0).unwrap(), img);
    }

    #[test]
    fn rotate_constant_interior() {
        let img = Array2::from_elem((PATCH_SIZE, PATCH_SIZE), 0.6f32);
        let out = rotate(&img, 10.0).unwrap();
        for r in 40..216 {
            for c in 40..216 {
                assert!((out[[r, c]] - 0.6).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rotate_and_back_interior() {
        let img = smooth();
        let back = rotate(&rotate(&img, 10.0).unwrap(), -10.0).unwrap();
        let inner = s![48..208, 48..208];
        let worst = back
            .slice(inner)
            .iter()
            .zip(img.slice(inner).iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(worst < 0.05, "max interior error {worst}");
    }

    #[test]
    fn rotate_out_of_range_is_rejected() {
        let img = ramp();
        assert!(rotate(&img, 181.0).is_err());
        assert!(AugmentPolicy::default().rotate(&img, 20.5).is_err());
        assert!(AugmentPolicy::default().rotate(&img, -20.0).is_ok());
    }

    #[test]
    fn rotation_direction_is_counter_clockwise() {
        // A bright pixel right of centre ends up above centre after +90°.
        let mut img = Array2::zeros((9, 9));
        img[[4, 8]] = 1.0;
        let out = rotate(&img, 90.0).unwrap();
        assert!((out[[0, 4]] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn identity_policy() {
        let img = ramp();
        for i in 0..5 {
            assert_eq!(random_augment(&img, &AugmentPolicy::identity(), i).unwrap(), img);
        }
    }

    #[test]
    fn draws_are_deterministic() {
        let img = smooth();
        let p = AugmentPolicy::default().with_seed(17);
        assert_eq!(random_augment(&img, &p, 3).unwrap(), random_augment(&img, &p, 3).unwrap());
        assert_ne!(p.draw(3), p.draw(4));
    }

    #[test]
    fn shift_draws_are_uniform() {
        let p = AugmentPolicy::default().with_seed(2024);
        let mut xs: Vec<f64> = (0..1000).map(|i| p.draw(i).dx as f64).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let mut d: f64 = 0.0;
        for (i, x) in xs.iter().enumerate() {
            assert!(x.abs() <= 0.2);
            let cdf = (x + 0.2) / 0.4;
            d = d.max((cdf - i as f64 / n).abs()).max(((i + 1) as f64 / n - cdf).abs());
        }
        assert!(d < 0.06, "KS statistic {d}");
    }

    #[test]
    fn invalid_policy_is_rejected() {
        let p = AugmentPolicy {
            shift_fraction_max: 1.5,
            ..AugmentPolicy::default()
        };
        assert!(random_augment(&ramp(), &p, 0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn augment_preserves_shape_and_range(seed in any::<u64>(), index in any::<u64>()) {
            let p = AugmentPolicy::default().with_seed(seed);
            let draw = p.draw(index);
            prop_assert!(draw.dx.abs() <= 0.2 && draw.dy.abs() <= 0.2);
            prop_assert!(draw.degrees.abs() <= 20.0);
            let out = p.apply(&smooth(), &draw).unwrap();
            prop_assert_eq!(out.dim(), (PATCH_SIZE, PATCH_SIZE));
            prop_assert!(out.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
