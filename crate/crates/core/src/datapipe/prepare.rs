//! Directory of class folders → [`DatasetPack`].

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::augment::{AugmentationPlan, Augmenter, NoiseKind};
use super::image::{center_crop_square, decode_ppm, face_crop_square, resize_bilinear, FaceBox, RawImage};
use super::pack::{DatasetPack, PackHeader, SplitIndices};
use super::{balance_classes, compute_normalization, expand_with_augmentations, split_groups, Split, SplitFractions};
use crate::error::{Error, FileFailure, Result};
use crate::rng::key_of;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CropMode {
    Face,
    #[default]
    Center,
}

impl fmt::Display for CropMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CropMode::Face => "face",
            CropMode::Center => "center",
        })
    }
}

impl FromStr for CropMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "face" => Ok(CropMode::Face),
            "center" => Ok(CropMode::Center),
            other => Err(Error::Config(format!("unknown crop mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PrepareConfig {
    pub input_dir: PathBuf,
    pub face_boxes: Option<PathBuf>,
    pub crop: CropMode,
    pub size: usize,
    pub replicas: u32,
    pub fractions: SplitFractions,
    pub seed: u64,
    /// Worker threads; 0 uses the global rayon pool.
    pub workers: usize,
    pub noise: NoiseKind,
    /// Require exactly these class folders, in this label order. When unset
    /// every subfolder is a class, sorted by name.
    pub class_names: Option<Vec<String>>,
}

impl PrepareConfig {
    pub fn new(input_dir: impl Into<PathBuf>) -> Self {
        Self {
            input_dir: input_dir.into(),
            face_boxes: None,
            crop: CropMode::Center,
            size: 224,
            replicas: 19,
            fractions: SplitFractions::default(),
            seed: 0,
            workers: 0,
            noise: NoiseKind::Additive,
            class_names: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PrepareSummary {
    pub class_names: Vec<String>,
    pub found_per_class: Vec<usize>,
    pub originals_per_class: usize,
    pub samples: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl fmt::Display for PrepareSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, found) in self.class_names.iter().zip(&self.found_per_class) {
            writeln!(f, "{name}: {found} found, {} kept", self.originals_per_class)?;
        }
        writeln!(f, "samples: {}", self.samples)?;
        write!(f, "train: {} val: {} test: {}", self.train, self.val, self.test)
    }
}

#[derive(Deserialize)]
struct BoxRecord {
    image: String,
    x: i64,
    y: i64,
    w: u32,
    h: u32,
}

fn read_face_boxes(path: &Path) -> Result<BTreeMap<String, FaceBox>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut boxes = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: BoxRecord = serde_json::from_str(line)
            .map_err(|e| Error::Input(format!("{}:{}: {e}", path.display(), n + 1)))?;
        boxes.insert(r.image.replace('\\', "/"), FaceBox { x: r.x, y: r.y, w: r.w, h: r.h });
    }
    Ok(boxes)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    entries.sort();
    Ok(entries)
}

/// Source files grouped by class, with their paths relative to the input
/// directory (`class/name.ppm`).
fn discover(config: &PrepareConfig) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let root = &config.input_dir;
    let found: Vec<String> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(str::to_owned))
        .collect();
    let class_names = match &config.class_names {
        Some(wanted) => {
            let missing: Vec<_> = wanted.iter().filter(|c| !found.contains(c)).cloned().collect();
            if !missing.is_empty() {
                return Err(Error::Input(format!("missing class directories: {}", missing.join(", "))));
            }
            wanted.clone()
        }
        None => found,
    };
    if class_names.is_empty() {
        return Err(Error::Input(format!("no class directories under {}", root.display())));
    }
    let files = class_names
        .iter()
        .map(|class| {
            Ok(sorted_entries(&root.join(class))?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
                .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(|n| format!("{class}/{n}")))
                .collect())
        })
        .collect::<Result<Vec<Vec<String>>>>()?;
    Ok((class_names, files))
}

fn load_one(config: &PrepareConfig, rel: &str, boxes: &BTreeMap<String, FaceBox>) -> Result<RawImage> {
    let path = config.input_dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let img = decode_ppm(&bytes)?;
    let square = match config.crop {
        CropMode::Center => center_crop_square(&img),
        CropMode::Face => {
            let face = boxes
                .get(rel)
                .ok_or_else(|| Error::Input("no face box for this image".into()))?;
            face_crop_square(&img, face)?
        }
    };
    resize_bilinear(&square, config.size)
}

/// Run the whole pipeline: decode, crop, resize, balance, augment, split,
/// normalize and pack. Output depends only on the input files, the boxes and
/// `config.seed`, not on the worker count.
pub fn prepare_dataset(config: &PrepareConfig) -> Result<(DatasetPack, PrepareSummary)> {
    config.fractions.validate()?;
    if config.size == 0 {
        return Err(Error::Config("image size must be positive".into()));
    }
    let boxes = match (&config.crop, &config.face_boxes) {
        (CropMode::Face, Some(p)) => read_face_boxes(p)?,
        (CropMode::Face, None) => return Err(Error::Config("face crop needs a face box file".into())),
        (CropMode::Center, _) => BTreeMap::new(),
    };
    let (class_names, files) = discover(config)?;
    if class_names.len() > 256 {
        return Err(Error::Config("at most 256 classes fit in a pack".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start workers: {e}")))?;
    pool.install(|| run(config, class_names, files, &boxes))
}

fn run(
    config: &PrepareConfig,
    class_names: Vec<String>,
    files: Vec<Vec<String>>,
    boxes: &BTreeMap<String, FaceBox>,
) -> Result<(DatasetPack, PrepareSummary)> {
    let found_per_class: Vec<usize> = files.iter().map(Vec::len).collect();
    if let Some(c) = found_per_class.iter().position(|&n| n == 0) {
        return Err(Error::Input(format!("class {:?} has no images", class_names[c])));
    }

    let flat: Vec<(usize, &str)> = files
        .iter()
        .enumerate()
        .flat_map(|(c, fs)| fs.iter().map(move |f| (c, f.as_str())))
        .collect();
    let loaded: Vec<Result<RawImage>> = flat.par_iter().map(|&(_, rel)| load_one(config, rel, boxes)).collect();
    let failures: Vec<FileFailure> = flat
        .iter()
        .zip(&loaded)
        .filter_map(|(&(_, rel), r)| {
            r.as_ref().err().map(|e| FileFailure {
                path: config.input_dir.join(rel),
                reason: e.to_string(),
            })
        })
        .collect();
    if !failures.is_empty() {
        return Err(Error::Files(failures));
    }
    let mut loaded = loaded.into_iter().map(|r| r.unwrap());
    let mut per_class: Vec<Vec<(&str, RawImage)>> = files
        .iter()
        .map(|fs| fs.iter().map(|f| (f.as_str(), loaded.next().unwrap())).collect())
        .collect();

    let kept = balance_classes(&found_per_class, config.seed)?;
    let mut originals: Vec<(u8, &str, RawImage)> = Vec::new();
    for (c, keep) in kept.iter().enumerate() {
        let mut images: Vec<Option<(&str, RawImage)>> = per_class[c].drain(..).map(Some).collect();
        for &i in keep {
            let (rel, img) = images[i].take().unwrap();
            originals.push((c as u8, rel, img));
        }
    }

    let samples = expand_with_augmentations(originals.len(), config.replicas);
    let augmenter = Augmenter { noise: config.noise };
    let rendered: Vec<Vec<u8>> = samples
        .par_iter()
        .map(|s| {
            let (_, rel, img) = &originals[s.original];
            if s.replica == 0 {
                img.to_chw()
            } else {
                let plan = AugmentationPlan::sample(config.seed, key_of(rel), s.replica as u64);
                debug_assert!(plan.in_range());
                augmenter.apply(img, &plan).to_chw()
            }
        })
        .collect();
    let labels: Vec<u8> = samples.iter().map(|s| originals[s.original].0).collect();

    let groups = vec![config.replicas as usize + 1; originals.len()];
    let assignment = split_groups(&groups, &config.fractions, config.seed)?;
    let mut splits = SplitIndices::default();
    for (i, s) in samples.iter().enumerate() {
        let list = match assignment[s.original] {
            Split::Train => &mut splits.train,
            Split::Val => &mut splits.val,
            Split::Test => &mut splits.test,
        };
        list.push(i as u32);
    }
    let normalization = if splits.train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    } else {
        compute_normalization(splits.train.iter().map(|&i| rendered[i as usize].as_slice()))?
    };

    let summary = PrepareSummary {
        class_names: class_names.clone(),
        found_per_class,
        originals_per_class: kept[0].len(),
        samples: samples.len(),
        train: splits.train.len(),
        val: splits.val.len(),
        test: splits.test.len(),
    };
    let header = PackHeader {
        class_names,
        crop_mode: config.crop,
        image_size: config.size,
        sample_count: samples.len(),
        replicas: config.replicas,
        seed: config.seed,
        splits,
        normalization,
    };
    let pack = DatasetPack::new(header, labels, rendered.concat())?;
    Ok((pack, summary))
}
