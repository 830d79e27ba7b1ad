//! Procedural image tasks for sanity runs and transfer experiments.
//!
//! Every image is a noisy sinusoidal grating; the class is its orientation.
//! The two tasks share that structure but differ in frequency band, tint and
//! the order in which orientations map to labels, so features learned on one
//! carry over to the other.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::models::default_class_names;
use crate::rng::{self, Purpose};
use crate::train::InMemoryDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StripeTask {
    A,
    B,
}

impl StripeTask {
    fn id(self) -> u64 {
        match self {
            StripeTask::A => 0,
            StripeTask::B => 1,
        }
    }

    /// Orientation in degrees for each label.
    fn orientations(self) -> [f64; 4] {
        match self {
            StripeTask::A => [0.0, 45.0, 90.0, 135.0],
            StripeTask::B => [90.0, 135.0, 0.0, 45.0],
        }
    }

    fn frequency_band(self) -> (f64, f64) {
        match self {
            StripeTask::A => (0.12, 0.22),
            StripeTask::B => (0.18, 0.30),
        }
    }

    fn noise(self) -> f64 {
        match self {
            StripeTask::A => 0.25,
            StripeTask::B => 0.6,
        }
    }

    fn tint(self) -> [f64; 3] {
        match self {
            StripeTask::A => [1.0, 0.8, 0.6],
            StripeTask::B => [0.6, 0.9, 1.0],
        }
    }
}

/// One planar `3 × size × size` grating of class `label`, values roughly in
/// `[-1, 1]`.
pub fn stripe_image(task: StripeTask, label: usize, size: usize, seed: u64, index: u64) -> Vec<f32> {
    let mut rng = rng::stream(seed, Purpose::Synthetic, &[task.id(), label as u64, index]);
    let theta = (task.orientations()[label] + rng.random_range(-6.0..6.0)).to_radians();
    let (lo, hi) = task.frequency_band();
    let freq = rng.random_range(lo..hi);
    let phase = rng.random_range(0.0..2.0 * PI);
    let amplitude = rng.random_range(0.6..1.0);
    let offset = rng.random_range(-0.2..0.2);
    let (s, c) = theta.sin_cos();
    let tint = task.tint();
    let mut out = Vec::with_capacity(3 * size * size);
    for t in tint {
        for y in 0..size {
            for x in 0..size {
                let u = x as f64 * c + y as f64 * s;
                let noise: f64 = rng.sample(StandardNormal);
                let v = offset + t * amplitude * (2.0 * PI * freq * u + phase).sin() + task.noise() * noise;
                out.push(v as f32);
            }
        }
    }
    out
}

/// `per_class` images of each of the four classes, interleaved by label.
pub fn stripe_dataset(task: StripeTask, per_class: usize, size: usize, seed: u64) -> InMemoryDataset {
    let mut data = Vec::with_capacity(4 * per_class * 3 * size * size);
    let mut labels = Vec::with_capacity(4 * per_class);
    for i in 0..per_class {
        for label in 0..4 {
            data.extend(stripe_image(task, label, size, seed, i as u64));
            labels.push(label);
        }
    }
    InMemoryDataset::new([3, size, size], default_class_names(4), data, labels).expect("consistent sizes")
}
