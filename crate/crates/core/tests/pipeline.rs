use std::fs;
use std::path::Path;

use woodnet::datapipe::*;

fn groups_per_split(sizes: &[usize], assignment: &[Split]) -> [usize; 3] {
    let mut out = [0; 3];
    for (n, s) in sizes.iter().zip(assignment) {
        out[Split::ALL.iter().position(|x| x == s).unwrap()] += n;
    }
    out
}

#[test]
fn large_scale_counts() {
    let kept = balance_classes(&[9000, 7812, 12000, 8001], 0).unwrap();
    assert!(kept.iter().all(|k| k.len() == 7812));

    // 1953 originals in each of four classes, each with 19 augmented copies
    let samples = expand_with_augmentations(4 * 1953, 19);
    assert_eq!(samples.len(), 156_240);

    let per_sample = vec![1; samples.len()];
    let a = split_groups(&per_sample, &SplitFractions::default(), 0).unwrap();
    assert_eq!(groups_per_split(&per_sample, &a), [109_368, 23_436, 23_436]);

    let per_original = vec![20; 4 * 1953];
    let a = split_groups(&per_original, &SplitFractions::default(), 0).unwrap();
    assert_eq!(groups_per_split(&per_original, &a), [109_360, 23_440, 23_440]);
}

fn write_fixture(dir: &Path, per_class: usize) {
    for (c, class) in ["alice", "bob", "carol", "other"].iter().enumerate() {
        fs::create_dir_all(dir.join(class)).unwrap();
        for i in 0..per_class {
            let (w, h) = (40 + 8 * i, 30 + 4 * c);
            let img = RawImage::from_fn(w, h, |x, y| {
                [(x * 9 + i * 40) as u8, (y * 7 + c * 60) as u8, ((x + y) * 3) as u8]
            });
            fs::write(dir.join(class).join(format!("img{i}.ppm")), encode_ppm(&img)).unwrap();
        }
    }
}

#[test]
fn prepare_is_deterministic_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 4);
    let mut config = PrepareConfig::new(dir.path());
    config.size = 32;
    config.replicas = 3;
    config.seed = 5;
    config.workers = 1;
    let (one, summary) = prepare_dataset(&config).unwrap();
    config.workers = 4;
    let (many, _) = prepare_dataset(&config).unwrap();
    assert_eq!(one.to_bytes().unwrap(), many.to_bytes().unwrap());
    assert_eq!(summary.samples, 64);
    assert_eq!(one.class_counts(), vec![16; 4]);

    config.seed = 6;
    let (other, _) = prepare_dataset(&config).unwrap();
    assert_ne!(one.to_bytes().unwrap(), other.to_bytes().unwrap());
}

#[test]
fn variants_never_straddle_splits() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 5);
    let mut config = PrepareConfig::new(dir.path());
    config.size = 16;
    config.replicas = 4;
    let (pack, _) = prepare_dataset(&config).unwrap();
    let group = |i: u32| i / 5;
    for a in Split::ALL {
        for b in Split::ALL {
            if a != b {
                for &i in pack.split(a) {
                    assert!(pack.split(b).iter().all(|&j| group(j) != group(i)));
                }
            }
        }
    }
    // every original comes first in its group, unaugmented
    let norm = pack.header.normalization;
    assert!(norm.std.iter().all(|&s| s > 0.0));
}

#[test]
fn pack_file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    write_fixture(dir.path(), 2);
    let mut config = PrepareConfig::new(dir.path());
    config.size = 8;
    config.replicas = 1;
    let (pack, _) = prepare_dataset(&config).unwrap();
    let path = dir.path().join("data.pack");
    pack.write(&path).unwrap();
    assert_eq!(DatasetPack::read(&path).unwrap(), pack);
}
