//! Randomized photometric and geometric augmentation.
//!
//! Each augmented replica applies the same five transform kinds in a sampled
//! order with sampled parameters. A plan is a pure function of
//! `(seed, image id, replica index)`.

use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::image::{quantize, RawImage};
use crate::rng::{self, Purpose};

pub const ROTATION_DEG: (f64, f64) = (-5.0, 5.0);
pub const SCALE: (f64, f64) = (0.95, 1.10);
/// Exclusive lower bound, inclusive upper bound, in 8-bit pixel units.
pub const NOISE_SIGMA: (f64, f64) = (0.0, 1.0);
pub const BRIGHTNESS: (f64, f64) = (-10.0, 10.0);
/// Fraction of the image extent along each axis.
pub const TRANSLATION: (f64, f64) = (-0.10, 0.10);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformKind {
    Rotate,
    Scale,
    Noise,
    Brightness,
    Translate,
}

impl TransformKind {
    pub const ALL: [TransformKind; 5] = [
        TransformKind::Rotate,
        TransformKind::Scale,
        TransformKind::Noise,
        TransformKind::Brightness,
        TransformKind::Translate,
    ];

    fn is_geometric(self) -> bool {
        matches!(
            self,
            TransformKind::Rotate | TransformKind::Scale | TransformKind::Translate
        )
    }
}

/// How the noise transform is realized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Per-pixel additive Gaussian noise with standard deviation `σ`.
    #[default]
    Additive,
    /// Gaussian blur with kernel standard deviation `σ` pixels.
    Blur,
}

/// Sampled parameters for one augmented replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPlan {
    pub order: [TransformKind; 5],
    pub rotation_deg: f64,
    pub scale: f64,
    pub noise_sigma: f64,
    pub brightness: f64,
    /// `(tx, ty)` as fractions of width and height.
    pub translation: (f64, f64),
    pub noise_seed: u64,
}

impl AugmentationPlan {
    pub fn sample(seed: u64, image_id: u64, replica: u64) -> Self {
        let mut rng = rng::stream(seed, Purpose::Augment, &[image_id, replica]);
        let mut order = TransformKind::ALL;
        order.shuffle(&mut rng);
        let mut uniform = |(lo, hi): (f64, f64)| lo + (hi - lo) * rng.random::<f64>();
        let rotation_deg = uniform(ROTATION_DEG);
        let scale = uniform(SCALE);
        let brightness = uniform(BRIGHTNESS);
        let translation = (uniform(TRANSLATION), uniform(TRANSLATION));
        // 1 - U[0, 1) lies in (0, 1]
        let noise_sigma = NOISE_SIGMA.1 * (1.0 - rng.random::<f64>());
        Self {
            order,
            rotation_deg,
            scale,
            noise_sigma,
            brightness,
            translation,
            noise_seed: rng.next_u64(),
        }
    }

    /// A plan whose every transform is (numerically) a no-op.
    pub fn identity() -> Self {
        Self {
            order: TransformKind::ALL,
            rotation_deg: 0.0,
            scale: 1.0,
            noise_sigma: 1e-9,
            brightness: 0.0,
            translation: (0.0, 0.0),
            noise_seed: 0,
        }
    }

    /// Whether every parameter lies in its allowed range and the order is a
    /// permutation of the five kinds.
    pub fn in_range(&self) -> bool {
        let within = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        let mut seen = self.order.to_vec();
        seen.sort_by_key(|k| *k as u8);
        seen.dedup();
        seen.len() == 5
            && within(self.rotation_deg, ROTATION_DEG)
            && within(self.scale, SCALE)
            && self.noise_sigma > NOISE_SIGMA.0
            && self.noise_sigma <= NOISE_SIGMA.1
            && within(self.brightness, BRIGHTNESS)
            && within(self.translation.0, TRANSLATION)
            && within(self.translation.1, TRANSLATION)
    }
}

/// 2-D affine map `p ↦ [a b; c d]·p + [e f]`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Affine {
    a: f64,
    b: f64,
    c: f64,
    d: f64,
    e: f64,
    f: f64,
}

impl Affine {
    const IDENTITY: Affine = Affine {
        a: 1.0,
        b: 0.0,
        c: 0.0,
        d: 1.0,
        e: 0.0,
        f: 0.0,
    };

    /// `self` applied after `first`.
    fn then_after(self, first: Affine) -> Affine {
        Affine {
            a: self.a * first.a + self.b * first.c,
            b: self.a * first.b + self.b * first.d,
            c: self.c * first.a + self.d * first.c,
            d: self.c * first.b + self.d * first.d,
            e: self.a * first.e + self.b * first.f + self.e,
            f: self.c * first.e + self.d * first.f + self.f,
        }
    }

    fn inverse(self) -> Affine {
        let det = self.a * self.d - self.b * self.c;
        let (a, b, c, d) = (self.d / det, -self.b / det, -self.c / det, self.a / det);
        Affine {
            a,
            b,
            c,
            d,
            e: -(a * self.e + b * self.f),
            f: -(c * self.e + d * self.f),
        }
    }

    /// Linear part `m` applied around `center`.
    fn about(center: (f64, f64), a: f64, b: f64, c: f64, d: f64) -> Affine {
        let (cx, cy) = center;
        Affine {
            a,
            b,
            c,
            d,
            e: cx - a * cx - b * cy,
            f: cy - c * cx - d * cy,
        }
    }

    fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (self.a * x + self.b * y + self.e, self.c * x + self.d * y + self.f)
    }
}

/// Float working copy of an image, `H × W × 3`.
struct Canvas {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Canvas {
    fn from_image(img: &RawImage) -> Self {
        Self {
            w: img.width(),
            h: img.height(),
            data: img.pixels().iter().map(|&v| v as f64).collect(),
        }
    }

    fn to_image(&self) -> RawImage {
        let pixels = self.data.iter().map(|&v| quantize(v)).collect();
        RawImage::new(self.w, self.h, pixels).expect("same extents")
    }

    /// Resample through `forward` (source → destination); positions that map
    /// outside the source read black.
    fn warp(&mut self, forward: Affine) {
        if forward == Affine::IDENTITY {
            return;
        }
        let inv = forward.inverse();
        let (w, h) = (self.w, self.h);
        let src = &self.data;
        let mut out = vec![0.0; src.len()];
        let at = |x: i64, y: i64, c: usize| -> f64 {
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                0.0
            } else {
                src[3 * (y as usize * w + x as usize) + c]
            }
        };
        for y in 0..h {
            for x in 0..w {
                // pixel centers sit at integer coordinates
                let (sx, sy) = inv.apply(x as f64, y as f64);
                let (x0, y0) = (sx.floor(), sy.floor());
                let (fx, fy) = (sx - x0, sy - y0);
                let (x0, y0) = (x0 as i64, y0 as i64);
                for c in 0..3 {
                    let top = at(x0, y0, c) * (1.0 - fx) + at(x0 + 1, y0, c) * fx;
                    let bottom = at(x0, y0 + 1, c) * (1.0 - fx) + at(x0 + 1, y0 + 1, c) * fx;
                    out[3 * (y * w + x) + c] = top * (1.0 - fy) + bottom * fy;
                }
            }
        }
        self.data = out;
    }

    fn brighten(&mut self, delta: f64) {
        for v in &mut self.data {
            *v = (*v + delta).clamp(0.0, 255.0);
        }
    }

    fn add_noise(&mut self, sigma: f64, seed: u64) {
        let mut rng = rng::stream(seed, Purpose::Augment, &[u64::MAX]);
        for v in &mut self.data {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = (*v + sigma * z).clamp(0.0, 255.0);
        }
    }

    fn blur(&mut self, sigma: f64) {
        let radius = (3.0 * sigma).ceil() as i64;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
        let (w, h) = (self.w as i64, self.h as i64);
        for horizontal in [true, false] {
            let src = self.data.clone();
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        let mut acc = 0.0;
                        for (k, weight) in kernel.iter().enumerate() {
                            let off = k as i64 - radius;
                            let (sx, sy) = if horizontal {
                                ((x + off).clamp(0, w - 1), y)
                            } else {
                                (x, (y + off).clamp(0, h - 1))
                            };
                            acc += weight * src[3 * (sy * w + sx) as usize + c];
                        }
                        self.data[3 * (y * w + x) as usize + c] = acc;
                    }
                }
            }
        }
    }
}

/// Applies [`AugmentationPlan`]s. Consecutive geometric transforms are
/// composed into one affine map so the image is resampled once per run of
/// geometric steps.
#[derive(Debug, Clone, Copy, Default)]
pub struct Augmenter {
    pub noise: NoiseKind,
}

impl Augmenter {
    pub fn apply(&self, img: &RawImage, plan: &AugmentationPlan) -> RawImage {
        let mut canvas = Canvas::from_image(img);
        let (w, h) = (img.width() as f64, img.height() as f64);
        let center = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
        let mut pending = Affine::IDENTITY;
        for kind in plan.order {
            if kind.is_geometric() {
                let step = match kind {
                    TransformKind::Rotate => {
                        let (s, c) = plan.rotation_deg.to_radians().sin_cos();
                        Affine::about(center, c, -s, s, c)
                    }
                    TransformKind::Scale => Affine::about(center, plan.scale, 0.0, 0.0, plan.scale),
                    TransformKind::Translate => Affine {
                        e: plan.translation.0 * w,
                        f: plan.translation.1 * h,
                        ..Affine::IDENTITY
                    },
                    _ => unreachable!(),
                };
                pending = step.then_after(pending);
                continue;
            }
            canvas.warp(pending);
            pending = Affine::IDENTITY;
            match kind {
                TransformKind::Brightness => canvas.brighten(plan.brightness),
                TransformKind::Noise => match self.noise {
                    NoiseKind::Additive => canvas.add_noise(plan.noise_sigma, plan.noise_seed),
                    NoiseKind::Blur => canvas.blur(plan.noise_sigma),
                },
                _ => unreachable!(),
            }
        }
        canvas.warp(pending);
        canvas.to_image()
    }
}

/// Apply `plan` with additive noise.
pub fn augment(img: &RawImage, plan: &AugmentationPlan) -> RawImage {
    Augmenter::default().apply(img, plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient() -> RawImage {
        RawImage::from_fn(64, 64, |x, y| [(x * 4) as u8, (y * 4) as u8, ((x + y) * 2) as u8])
    }

    #[test]
    fn identity_plan_is_near_identity() {
        let img = gradient();
        let out = augment(&img, &AugmentationPlan::identity());
        let max = img
            .pixels()
            .iter()
            .zip(out.pixels())
            .map(|(&a, &b)| (a as i32 - b as i32).abs())
            .max()
            .unwrap();
        assert!(max <= 1, "{max}");
    }

    #[test]
    fn brightness_adds_and_clamps() {
        let plan = AugmentationPlan {
            brightness: 10.0,
            ..AugmentationPlan::identity()
        };
        let out = augment(&RawImage::filled(16, 16, [128; 3]), &plan);
        assert!(out.pixels().iter().all(|&v| v == 138));
        let out = augment(&RawImage::filled(16, 16, [250; 3]), &plan);
        assert!(out.pixels().iter().all(|&v| v == 255));
    }

    #[test]
    fn translation_shifts_content() {
        let img = RawImage::from_fn(20, 20, |x, _| [if x == 5 { 255 } else { 0 }; 3]);
        let plan = AugmentationPlan {
            translation: (0.1, 0.0),
            ..AugmentationPlan::identity()
        };
        let out = augment(&img, &plan);
        assert_eq!(out.pixel(7, 10), [255; 3]);
        assert_eq!(out.pixel(5, 10), [0; 3]);
        // vacated columns are black
        assert_eq!(out.pixel(0, 0), [0; 3]);
    }

    #[test]
    fn rotation_by_small_angle_keeps_center() {
        let img = RawImage::filled(33, 33, [90; 3]);
        let plan = AugmentationPlan {
            rotation_deg: 5.0,
            ..AugmentationPlan::identity()
        };
        let out = augment(&img, &plan);
        assert_eq!(out.pixel(16, 16), [90; 3]);
        // a corner rotates in from outside
        assert!(out.pixel(0, 0)[0] < 90);
    }

    #[test]
    fn blur_keeps_constant_images() {
        let img = RawImage::filled(12, 12, [77; 3]);
        let plan = AugmentationPlan {
            noise_sigma: 1.0,
            ..AugmentationPlan::identity()
        };
        let out = Augmenter { noise: NoiseKind::Blur }.apply(&img, &plan);
        assert_eq!(out, img);
    }

    #[test]
    fn affine_inverse_round_trips() {
        let m = Affine::about((3.0, 4.0), 0.9, -0.2, 0.3, 1.1).then_after(Affine {
            e: 2.0,
            f: -1.0,
            ..Affine::IDENTITY
        });
        let (x, y) = m.apply(1.5, -2.0);
        let (bx, by) = m.inverse().apply(x, y);
        assert!((bx - 1.5).abs() < 1e-12 && (by + 2.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn sampled_plans_stay_in_range(seed in any::<u64>(), id in any::<u64>(), replica in 0u64..64) {
            let plan = AugmentationPlan::sample(seed, id, replica);
            prop_assert!(plan.in_range(), "{:?}", plan);
            prop_assert_eq!(&plan, &AugmentationPlan::sample(seed, id, replica));
        }

        #[test]
        fn augmented_shape_is_preserved(seed in any::<u64>()) {
            let img = RawImage::from_fn(24, 24, |x, y| [(x * 10) as u8, (y * 10) as u8, 5]);
            let out = augment(&img, &AugmentationPlan::sample(seed, 1, 1));
            prop_assert_eq!((out.width(), out.height()), (24, 24));
        }
    }
}
