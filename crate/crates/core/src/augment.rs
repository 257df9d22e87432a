//! Online augmentation: horizontal flip plus a single resampled affine
//! (rotation, shift, zoom) with edge-replicating fill.

use ndarray::{Array3, ArrayView3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("image must be H×W×3 with H, W ≥ 1 (got {0:?})")]
    BadShape(Vec<usize>),
    #[error("invalid augmentation config: {0}")]
    BadConfig(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    /// Probability of a horizontal flip; `None` disables the op.
    #[serde(default)]
    pub flip_probability: Option<f64>,
    /// Rotation drawn uniformly from ±degrees.
    #[serde(default)]
    pub rotation_degrees: Option<f64>,
    /// Translation drawn uniformly from ±fraction of width/height.
    #[serde(default)]
    pub shift_fraction: Option<f64>,
    /// Scale drawn uniformly from 1 ± range.
    #[serde(default)]
    pub zoom_range: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            flip_probability: Some(0.5),
            rotation_degrees: Some(15.0),
            shift_fraction: Some(0.1),
            zoom_range: Some(0.1),
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        Self {
            flip_probability: None,
            rotation_degrees: None,
            shift_fraction: None,
            zoom_range: None,
            seed: 0,
        }
    }

    pub fn flip_only(probability: f64) -> Self {
        Self {
            flip_probability: Some(probability),
            ..Self::disabled()
        }
    }

    pub fn is_enabled(&self) -> bool {
        self.flip_probability.is_some()
            || self.rotation_degrees.is_some()
            || self.shift_fraction.is_some()
            || self.zoom_range.is_some()
    }

    pub fn validate(&self) -> Result<(), AugmentError> {
        if let Some(p) = self.flip_probability {
            if !(0.0..=1.0).contains(&p) {
                return Err(AugmentError::BadConfig(format!("flip probability {p} outside [0, 1]")));
            }
        }
        for (name, v) in [
            ("rotation_degrees", self.rotation_degrees),
            ("shift_fraction", self.shift_fraction),
            ("zoom_range", self.zoom_range),
        ] {
            if let Some(v) = v {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(AugmentError::BadConfig(format!(
                        "{name} must be a non-negative number, got {v}"
                    )));
                }
            }
        }
        if matches!(self.zoom_range, Some(z) if z >= 1.0) {
            return Err(AugmentError::BadConfig("zoom_range must be below 1".into()));
        }
        Ok(())
    }
}

fn check_shape(image: &ArrayView3<f64>) -> Result<(), AugmentError> {
    let s = image.shape();
    if s[0] == 0 || s[1] == 0 || s[2] != 3 {
        return Err(AugmentError::BadShape(s.to_vec()));
    }
    Ok(())
}

pub fn flip_horizontal(image: ArrayView3<f64>) -> Array3<f64> {
    let mut out = image.to_owned();
    out.invert_axis(ndarray::Axis(1));
    out.as_standard_layout().into_owned()
}

/// Produces one augmented view of an H×W×3 image.
///
/// Random draws happen only for enabled ops, in a fixed order (flip,
/// rotation, shift x, shift y, zoom), so a given stream position always
/// yields the same view.
pub fn augment_view<R: Rng + ?Sized>(
    image: ArrayView3<f64>,
    config: &AugmentationConfig,
    rng: &mut R,
) -> Result<Array3<f64>, AugmentError> {
    check_shape(&image)?;
    config.validate()?;
    let mut out = match config.flip_probability {
        Some(p) if rng.random::<f64>() < p => flip_horizontal(image),
        _ => image.to_owned(),
    };

    let symmetric = |rng: &mut R, range: f64| {
        if range > 0.0 {
            rng.random_range(-range..=range)
        } else {
            0.0
        }
    };
    let angle = config
        .rotation_degrees
        .map(|r| symmetric(rng, r))
        .unwrap_or(0.0)
        .to_radians();
    let (tx, ty) = match config.shift_fraction {
        Some(s) => (symmetric(rng, s), symmetric(rng, s)),
        None => (0.0, 0.0),
    };
    let zoom = 1.0 + config.zoom_range.map(|z| symmetric(rng, z)).unwrap_or(0.0);

    if angle != 0.0 || tx != 0.0 || ty != 0.0 || zoom != 1.0 {
        out = affine_resample(out.view(), angle, tx, ty, zoom);
    }
    Ok(out)
}

/// Inverse-maps each output pixel through rotation/zoom about the centre and a
/// translation, then samples bilinearly with clamped (edge) coordinates.
fn affine_resample(image: ArrayView3<f64>, angle: f64, tx: f64, ty: f64, zoom: f64) -> Array3<f64> {
    let (h, w, c) = image.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle.sin_cos();
    let (shift_x, shift_y) = (tx * w as f64, ty * h as f64);
    let mut out = Array3::<f64>::zeros((h, w, c));
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - cx - shift_x;
            let dy = y as f64 - cy - shift_y;
            let sx = (cos * dx + sin * dy) / zoom + cx;
            let sy = (-sin * dx + cos * dy) / zoom + cy;
            let sx = sx.clamp(0.0, w as f64 - 1.0);
            let sy = sy.clamp(0.0, h as f64 - 1.0);
            let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
            for ch in 0..c {
                let top = image[[y0, x0, ch]] * (1.0 - fx) + image[[y0, x1, ch]] * fx;
                let bottom = image[[y1, x0, ch]] * (1.0 - fx) + image[[y1, x1, ch]] * fx;
                out[[y, x, ch]] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng_for;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> Array3<f64> {
        Array3::from_shape_fn((h, w, 3), |(y, x, c)| (y * 31 + x * 7 + c) as f64 / 100.0)
    }

    #[test]
    fn disabled_is_identity() {
        let img = ramp(5, 7);
        let mut rng = rng_for(1, &[]);
        let out = augment_view(img.view(), &AugmentationConfig::disabled(), &mut rng).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn double_flip_is_identity() {
        let img = ramp(4, 6);
        let cfg = AugmentationConfig::flip_only(1.0);
        let mut rng = rng_for(2, &[]);
        let once = augment_view(img.view(), &cfg, &mut rng).unwrap();
        assert_ne!(once, img);
        assert_eq!(once[[0, 0, 0]], img[[0, 5, 0]]);
        let twice = augment_view(once.view(), &cfg, &mut rng).unwrap();
        assert_eq!(twice, img);
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let img = ramp(9, 9);
        let cfg = AugmentationConfig::default();
        let a = augment_view(img.view(), &cfg, &mut rng_for(5, &[b"s"])).unwrap();
        let b = augment_view(img.view(), &cfg, &mut rng_for(5, &[b"s"])).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn malformed_shapes_rejected() {
        let cfg = AugmentationConfig::default();
        let mut rng = rng_for(0, &[]);
        let bad = Array3::<f64>::zeros((4, 4, 1));
        assert!(matches!(
            augment_view(bad.view(), &cfg, &mut rng),
            Err(AugmentError::BadShape(_))
        ));
        let empty = Array3::<f64>::zeros((0, 4, 3));
        assert!(augment_view(empty.view(), &cfg, &mut rng).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = AugmentationConfig::default();
        cfg.flip_probability = Some(1.5);
        assert!(cfg.validate().is_err());
        let mut cfg = AugmentationConfig::default();
        cfg.rotation_degrees = Some(-1.0);
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn shape_is_preserved(h in 1usize..12, w in 1usize..12, seed in any::<u64>()) {
            let img = ramp(h, w);
            let out = augment_view(img.view(), &AugmentationConfig::default(), &mut rng_for(seed, &[])).unwrap();
            prop_assert_eq!(out.dim(), (h, w, 3));
            // convex combinations of inputs stay inside the input range
            let max = img.iter().cloned().fold(f64::MIN, f64::max);
            prop_assert!(out.iter().all(|v| *v >= 0.0 && *v <= max + 1e-12));
        }
    }
}
