//! Data preparation: crop, resize, balance, augment, split, normalize, pack.

pub mod augment;
pub mod image;
pub mod pack;
pub mod prepare;

use std::fmt;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Purpose};

pub use augment::{augment, AugmentationPlan, Augmenter, NoiseKind, TransformKind};
pub use image::{center_crop_square, decode_ppm, encode_ppm, face_crop_square, resize_bilinear, FaceBox, RawImage};
pub use pack::{DatasetPack, PackHeader};
pub use prepare::{prepare_dataset, CropMode, PrepareConfig, PrepareSummary};

/// Reduce every class to the size `n` of the smallest one by seeded sampling
/// without replacement. Returns the kept indices of each class in ascending
/// order.
pub fn balance_classes(class_sizes: &[usize], seed: u64) -> Result<Vec<Vec<usize>>> {
    if class_sizes.is_empty() {
        return Err(Error::Input("no classes to balance".into()));
    }
    if let Some(c) = class_sizes.iter().position(|&n| n == 0) {
        return Err(Error::Input(format!("class {c} has no samples")));
    }
    let n = *class_sizes.iter().min().unwrap();
    Ok(class_sizes
        .iter()
        .enumerate()
        .map(|(c, &size)| {
            let mut rng = rng::stream(seed, Purpose::Balance, &[c as u64]);
            let mut kept = index::sample(&mut rng, size, n).into_vec();
            kept.sort_unstable();
            kept
        })
        .collect())
}

/// One packed sample: an original image and which replica of it this is.
/// Replica 0 is the unaugmented original.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SampleRef {
    pub original: usize,
    pub replica: u32,
}

/// Each original followed by its `replicas` augmented variants.
pub fn expand_with_augmentations(originals: usize, replicas: u32) -> Vec<SampleRef> {
    (0..originals)
        .flat_map(|original| (0..=replicas).map(move |replica| SampleRef { original, replica }))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.70,
            val: 0.15,
            test: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let f = Self { train, val, test };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|p| !(0.0..=1.0).contains(p)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split fractions must be non-negative and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }
}

impl FromStr for SplitFractions {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad split fractions {s:?}: {e}")))?;
        match parts[..] {
            [train, val, test] => Self::new(train, val, test),
            _ => Err(Error::Config(format!("expected three split fractions, got {s:?}"))),
        }
    }
}

/// Assign whole groups to splits.
///
/// Groups are shuffled with `seed`. Walking that order, a group joins the
/// training split while doing so brings the training count at least as close
/// to `round(train · N)`; the remaining groups are divided the same way
/// between validation and test in proportion to their fractions.
pub fn split_groups(group_sizes: &[usize], fractions: &SplitFractions, seed: u64) -> Result<Vec<Split>> {
    fractions.validate()?;
    let total: usize = group_sizes.iter().sum();
    let mut order: Vec<usize> = (0..group_sizes.len()).collect();
    order.shuffle(&mut rng::stream(seed, Purpose::Split, &[]));

    let mut assignment = vec![Split::Test; group_sizes.len()];
    let take = |target: usize, candidates: &[usize], assign: &mut Vec<Split>, split: Split| -> Vec<usize> {
        let mut count = 0usize;
        let mut rest = Vec::new();
        for &g in candidates {
            let size = group_sizes[g];
            if count < target && 2 * (target - count) >= size {
                assign[g] = split;
                count += size;
            } else {
                rest.push(g);
            }
        }
        rest
    };

    let train_target = (fractions.train * total as f64).round() as usize;
    let rest = take(train_target, &order, &mut assignment, Split::Train);
    let remaining: usize = rest.iter().map(|&g| group_sizes[g]).sum();
    let holdout = fractions.val + fractions.test;
    let val_share = if holdout > 0.0 { fractions.val / holdout } else { 0.0 };
    let val_target = (val_share * remaining as f64).round() as usize;
    take(val_target, &rest, &mut assignment, Split::Val);
    Ok(assignment)
}

/// Per-channel statistics in `[0, 1]` pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

pub const STD_FLOOR: f64 = 1e-6;

impl Normalization {
    pub const IDENTITY: Normalization = Normalization {
        mean: [0.0; 3],
        std: [1.0; 3],
    };

    /// Map one planar `C × H × W` 8-bit image to normalized floats.
    pub fn apply(&self, chw: &[u8], out: &mut Vec<f32>) {
        let plane = chw.len() / 3;
        for (c, channel) in chw.chunks(plane).enumerate() {
            let (m, s) = (self.mean[c], self.std[c]);
            out.extend(channel.iter().map(|&v| ((v as f64 / 255.0 - m) / s) as f32));
        }
    }
}

/// Mean and population standard deviation of each channel over a set of
/// planar images. Standard deviations are floored at [`STD_FLOOR`].
pub fn compute_normalization<'a>(images: impl IntoIterator<Item = &'a [u8]>) -> Result<Normalization> {
    let mut sum = [0u64; 3];
    let mut sq = [0u64; 3];
    let mut count = 0u64;
    for chw in images {
        let plane = chw.len() / 3;
        for (c, channel) in chw.chunks(plane).enumerate() {
            for &v in channel {
                sum[c] += v as u64;
                sq[c] += (v as u64) * (v as u64);
            }
        }
        count += plane as u64;
    }
    if count == 0 {
        return Err(Error::Input("cannot normalize an empty split".into()));
    }
    let mut mean = [0.0; 3];
    let mut std = [0.0; 3];
    for c in 0..3 {
        let n = count as f64;
        let m = sum[c] as f64 / n;
        let var = (sq[c] as f64 / n - m * m).max(0.0);
        mean[c] = m / 255.0;
        std[c] = (var.sqrt() / 255.0).max(STD_FLOOR);
    }
    Ok(Normalization { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn balance_to_smallest_class() {
        let kept = balance_classes(&[10, 8, 12, 9], 1).unwrap();
        assert_eq!(kept.iter().map(Vec::len).collect::<Vec<_>>(), vec![8, 8, 8, 8]);
        for (k, n) in kept.iter().zip([10, 8, 12, 9]) {
            assert!(k.windows(2).all(|w| w[0] < w[1]));
            assert!(k.iter().all(|&i| i < n));
        }
        assert_eq!(kept[1], (0..8).collect::<Vec<_>>());
        assert_eq!(balance_classes(&[10, 8, 12, 9], 1).unwrap(), kept);
    }

    #[test]
    fn balance_errors() {
        assert!(balance_classes(&[], 0).is_err());
        assert!(balance_classes(&[3, 0, 2], 0).is_err());
    }

    #[test]
    fn expansion_counts() {
        assert_eq!(expand_with_augmentations(5, 0).len(), 5);
        let s = expand_with_augmentations(8, 19);
        assert_eq!(s.len(), 160);
        assert_eq!(s[20], SampleRef { original: 1, replica: 0 });
    }

    #[test]
    fn single_group_goes_to_train() {
        let a = split_groups(&[20], &SplitFractions::default(), 3).unwrap();
        assert_eq!(a, vec![Split::Train]);
    }

    #[test]
    fn fractions_must_sum_to_one() {
        assert!(SplitFractions::new(0.7, 0.2, 0.2).is_err());
        assert!("0.70,0.15,0.15".parse::<SplitFractions>().is_ok());
        assert!("0.70,0.30".parse::<SplitFractions>().is_err());
        assert!(split_groups(&[1, 1], &SplitFractions { train: 0.5, val: 0.5, test: 0.5 }, 0).is_err());
    }

    #[test]
    fn normalization_moments() {
        let black = vec![0u8; 12];
        let n = compute_normalization([black.as_slice()]).unwrap();
        assert_eq!(n.mean, [0.0; 3]);
        assert_eq!(n.std, [STD_FLOOR; 3]);

        let two = [0u8, 255, 0, 255, 0, 255];
        let n = compute_normalization([&two[..]]).unwrap();
        assert_eq!(n.mean, [0.5; 3]);
        assert_eq!(n.std, [0.5; 3]);

        // 0.5 in 8-bit units is not representable; 255 * 0.5 = 127.5
        let half = [127u8, 128, 127, 128, 127, 128];
        let n = compute_normalization([&half[..]]).unwrap();
        assert!((n.mean[0] - 0.5).abs() < 1e-12);

        let mut out = Vec::new();
        Normalization { mean: [0.5; 3], std: [0.5; 3] }.apply(&two, &mut out);
        assert_eq!(out, vec![-1.0, 1.0, -1.0, 1.0, -1.0, 1.0]);
    }

    proptest! {
        #[test]
        fn split_is_a_partition(sizes in proptest::collection::vec(1usize..30, 1..80), seed in any::<u64>()) {
            let a = split_groups(&sizes, &SplitFractions::default(), seed).unwrap();
            prop_assert_eq!(a.len(), sizes.len());
            let total: usize = sizes.iter().sum();
            let per: Vec<usize> = Split::ALL
                .iter()
                .map(|s| sizes.iter().zip(&a).filter(|(_, x)| *x == s).map(|(n, _)| n).sum())
                .collect();
            prop_assert_eq!(per.iter().sum::<usize>(), total);
            let target = (0.7 * total as f64).round() as usize;
            let max = *sizes.iter().max().unwrap();
            prop_assert!(per[0].abs_diff(target) <= max);
        }
    }
}
