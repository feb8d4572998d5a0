//! Annotation parsing, point conversion, dataset splits and image preparation.
//!
//! A dataset directory holds `images/`, `annotations/` with one
//! `<image stem>.txt` box file per image, and `manifest.csv`.

mod annotations;
mod image;
mod split;

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use annotations::{
    convert_people, convert_vehicle, read_annotations, read_points, write_annotations, write_points, BBoxRecord,
    CategoryGroup,
};
pub use image::{crop_to_multiple, random_flip, resize_with_cap, Image, MAX_HEIGHT, MAX_WIDTH, SIZE_MULTIPLE};
pub use split::{
    filter_and_split, read_manifest, write_manifest, ManifestEntry, SampleSummary, Split, SplitOutcome, SplitRatios,
    DEFAULT_MIN_COUNT,
};

use crate::density::{Point, PointSet};
use crate::error::{Error, Result};

pub const IMAGES_DIR: &str = "images";
pub const ANNOTATIONS_DIR: &str = "annotations";
pub const MANIFEST_FILE: &str = "manifest.csv";

/// A filtered, split-assigned image with its counting points.
#[derive(Clone, Debug, PartialEq)]
pub struct CountingSample {
    pub image_path: String,
    pub points: PointSet,
    pub split: Split,
    pub category_group: CategoryGroup,
}

/// A sample ready for the network: resized, cropped to the stride, with
/// points in the new pixel frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedSample {
    pub image_path: String,
    pub image: Image,
    pub points: Vec<Point>,
}

impl PreparedSample {
    pub fn point_set(&self) -> Result<PointSet> {
        PointSet::new(self.points.clone(), self.image.height(), self.image.width())
    }
}

/// `annotations/<stem>.txt` for a manifest image path.
pub fn annotation_path(root: &Path, image_path: &str) -> PathBuf {
    let stem = Path::new(image_path).file_stem().unwrap_or_default();
    root.join(ANNOTATIONS_DIR).join(stem).with_extension("txt")
}

pub fn read_annotation_file(path: &Path) -> Result<Vec<BBoxRecord>> {
    let file = fs::File::open(path).map_err(|e| with_path(e, path))?;
    read_annotations(std::io::BufReader::new(file)).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Point counts for every file under `images/`, in path order.
pub fn scan_dataset(root: &Path, group: CategoryGroup) -> Result<Vec<SampleSummary>> {
    let dir = root.join(IMAGES_DIR);
    let mut paths: Vec<String> = fs::read_dir(&dir)
        .map_err(|e| with_path(e, &dir))?
        .filter_map(|entry| entry.ok())
        .filter(|entry| entry.file_type().is_ok_and(|t| t.is_file()))
        .map(|entry| format!("{IMAGES_DIR}/{}", entry.file_name().to_string_lossy()))
        .collect();
    paths.sort();
    paths
        .into_par_iter()
        .map(|image_path| {
            let records = read_annotation_file(&annotation_path(root, &image_path))?;
            Ok(SampleSummary {
                point_count: group.convert(&records).len(),
                image_path,
            })
        })
        .collect()
}

pub fn read_manifest_file(root: &Path) -> Result<Vec<ManifestEntry>> {
    let path = root.join(MANIFEST_FILE);
    let file = fs::File::open(&path).map_err(|e| with_path(e, &path))?;
    read_manifest(std::io::BufReader::new(file))
}

pub fn load_image(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).map_err(|e| with_path(e, path))?;
    Image::read_pnm(&bytes).map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Loads one manifest entry and prepares it for a model with `channels` inputs.
pub fn prepare_sample(root: &Path, image_path: &str, group: CategoryGroup, channels: usize) -> Result<PreparedSample> {
    let image = load_image(&root.join(image_path))?.with_channels(channels)?;
    let records = read_annotation_file(&annotation_path(root, image_path))?;
    let points = PointSet::new(group.convert(&records), image.height(), image.width())?;
    let (image, points) = resize_with_cap(&image, points.points(), MAX_HEIGHT, MAX_WIDTH);
    Ok(PreparedSample {
        image_path: image_path.to_string(),
        image,
        points,
    })
}

/// Prepares every entry of `split` (or all entries), in manifest order.
pub fn prepare_split(
    root: &Path,
    entries: &[ManifestEntry],
    split: Option<Split>,
    group: CategoryGroup,
    channels: usize,
) -> Result<Vec<PreparedSample>> {
    entries
        .par_iter()
        .filter(|e| split.is_none_or(|s| e.split == s))
        .map(|e| prepare_sample(root, &e.image_path, group, channels))
        .collect()
}
