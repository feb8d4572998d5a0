//! Synthetic crowd datasets for exercising the pipeline without real data.
//!
//! Each image is a dark, lightly noisy background with one Gaussian blob per
//! person. Annotations are people boxes whose head point is the blob
//! center. Candidate layouts are redrawn until the crowd statistics land in
//! the regime's target buckets.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::density::Point;
use crate::error::{config, Error, Result};
use crate::fsutil::write_atomic;
use crate::ingest::{
    write_annotations, write_manifest, BBoxRecord, CategoryGroup, Image, ManifestEntry, Split, ANNOTATIONS_DIR,
    IMAGES_DIR, MANIFEST_FILE,
};
use crate::stats::{analyze_image, StatsOptions};

const MAX_ATTEMPTS: usize = 500;
const BACKGROUND: f64 = 0.1;
const NOISE: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    /// Points spread over the frame, with very different box sizes.
    ScaleVar,
    /// A tight crowd plus a ring of far-off individuals, similar sizes.
    Isolated,
    /// Each image picks one of the two at random.
    Mixed,
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scale-var" => Ok(Regime::ScaleVar),
            "isolated" => Ok(Regime::Isolated),
            "mixed" => Ok(Regime::Mixed),
            other => Err(Error::Config(format!(
                "unknown regime {other:?}; expected scale-var, isolated or mixed"
            ))),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::ScaleVar => "scale-var",
            Regime::Isolated => "isolated",
            Regime::Mixed => "mixed",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    pub min_points: usize,
    pub max_points: usize,
    pub regime: Regime,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 20,
            min_points: 5,
            max_points: 30,
            regime: Regime::Mixed,
            seed: 0,
            height: 128,
            width: 128,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.min_points == 0 || self.min_points > self.max_points {
            return config(format!(
                "point range {}..={} must be non-empty and start at 1 or more",
                self.min_points, self.max_points
            ));
        }
        if self.height < 32 || self.width < 32 {
            return config(format!("synthetic images must be at least 32x32, got {}x{}", self.height, self.width));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub name: String,
    pub regime: Regime,
    pub image: Image,
    pub records: Vec<BBoxRecord>,
}

impl SyntheticSample {
    pub fn points(&self) -> Vec<Point> {
        CategoryGroup::People.convert(&self.records)
    }
}

fn person(col: f64, row: f64, size: f64) -> BBoxRecord {
    BBoxRecord {
        bb_left: col - size / 2.0,
        bb_top: row,
        bb_width: size,
        bb_height: size,
        score: 1,
        category: 0,
        truncation: 0,
        occlusion: 0,
    }
}

fn inside(h: usize, w: usize, col: f64, row: f64) -> (f64, f64) {
    (col.clamp(1.0, w as f64 - 2.0), row.clamp(1.0, h as f64 - 2.0))
}

fn scale_var_layout(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Vec<BBoxRecord> {
    let unit = h.min(w) as f64 / 64.0;
    (0..n)
        .map(|_| {
            let col = rng.random_range(2.0..w as f64 - 2.0);
            let row = rng.random_range(2.0..h as f64 - 2.0);
            let size = if rng.random_bool(0.5) {
                rng.random_range(2.0..5.0)
            } else {
                rng.random_range(14.0..30.0)
            };
            person(col, row, size * unit)
        })
        .collect()
}

fn isolated_layout(rng: &mut ChaCha8Rng, n: usize, h: usize, w: usize) -> Vec<BBoxRecord> {
    let unit = h.min(w) as f64 / 64.0;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);
    let ring = (n / 3).clamp(if n >= 4 { 1 } else { 0 }, 8).min(n.saturating_sub(3));
    let radius = 0.42 * h.min(w) as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let jitter = Normal::new(0.0, 0.3 * unit).expect("valid spread");
    let crowd = Normal::new(0.0, 1.6 * unit).expect("valid spread");
    let mut out = Vec::with_capacity(n);
    for i in 0..ring {
        let a = phase + std::f64::consts::TAU * i as f64 / 8.0;
        let (col, row) = inside(h, w, cx + radius * a.cos() + jitter.sample(rng), cy + radius * a.sin() + jitter.sample(rng));
        out.push(person(col, row, rng.random_range(5.0..6.0) * unit));
    }
    for _ in ring..n {
        let (col, row) = inside(h, w, cx + crowd.sample(rng), cy + crowd.sample(rng));
        out.push(person(col, row, rng.random_range(5.0..6.0) * unit));
    }
    out
}

fn meets_target(regime: Regime, records: &[BBoxRecord], seed: u64) -> bool {
    let opts = StatsOptions { seed, ..StatsOptions::default() };
    let Ok(r) = analyze_image("", CategoryGroup::People, records, &opts) else {
        return false;
    };
    match regime {
        Regime::ScaleVar => r.cv_bucket >= 3 && r.dvi_bucket.is_none_or(|b| b == 0),
        Regime::Isolated => r.cv_bucket <= 1 && r.dvi_bucket.is_some_and(|b| b >= 1),
        Regime::Mixed => true,
    }
}

fn render(rng: &mut ChaCha8Rng, records: &[BBoxRecord], h: usize, w: usize) -> Image {
    let noise = Normal::new(0.0, NOISE).expect("valid spread");
    let plane = h * w;
    let mut data: Vec<f64> = (0..3 * plane).map(|_| BACKGROUND + noise.sample(rng)).collect();
    for r in records {
        let (col, row) = (r.bb_left + r.bb_width / 2.0, r.bb_top);
        let sigma = (r.bb_width / 4.0).max(0.8);
        let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.6..1.0));
        let reach = (3.0 * sigma).ceil() as isize;
        let (c0, r0) = (col.round() as isize, row.round() as isize);
        for y in (r0 - reach).max(0)..=(r0 + reach).min(h as isize - 1) {
            for x in (c0 - reach).max(0)..=(c0 + reach).min(w as isize - 1) {
                let d2 = (x as f64 - col).powi(2) + (y as f64 - row).powi(2);
                let v = (-d2 / (2.0 * sigma * sigma)).exp();
                for (c, t) in tint.iter().enumerate() {
                    data[c * plane + y as usize * w + x as usize] += t * v;
                }
            }
        }
    }
    for v in &mut data {
        *v = (*v * 255.0).round().clamp(0.0, 255.0) / 255.0;
    }
    Image::new(3, h, w, data).expect("consistent shape")
}

/// Generates `cfg.count` samples; deterministic in `cfg.seed`.
pub fn make_samples(cfg: &SynthConfig) -> Result<Vec<SyntheticSample>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (h, w) = (cfg.height, cfg.width);
    let mut out = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let n = rng.random_range(cfg.min_points..=cfg.max_points);
        let regime = match cfg.regime {
            Regime::Mixed if rng.random_bool(0.5) => Regime::ScaleVar,
            Regime::Mixed => Regime::Isolated,
            r => r,
        };
        let stats_seed = rng.random();
        let mut records = Vec::new();
        for attempt in 0..MAX_ATTEMPTS {
            records = match regime {
                Regime::ScaleVar => scale_var_layout(&mut rng, n, h, w),
                _ => isolated_layout(&mut rng, n, h, w),
            };
            if meets_target(regime, &records, stats_seed) {
                break;
            }
            if attempt + 1 == MAX_ATTEMPTS {
                warn!("synthetic image {i}: no {regime} layout with {n} points met the target buckets");
            }
        }
        let image = render(&mut rng, &records, h, w);
        out.push(SyntheticSample {
            name: format!("{i:04}"),
            regime,
            image,
            records,
        });
    }
    Ok(out)
}

/// Writes `images/NNNN.ppm`, `annotations/NNNN.txt` and a manifest placing
/// every sample in the train split.
pub fn write_dataset(root: &Path, samples: &[SyntheticSample]) -> Result<Vec<ManifestEntry>> {
    fs::create_dir_all(root.join(IMAGES_DIR))?;
    fs::create_dir_all(root.join(ANNOTATIONS_DIR))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let image_path = format!("{IMAGES_DIR}/{}.ppm", s.name);
        write_atomic(&root.join(&image_path), |w| s.image.write_pnm(w))?;
        let ann = root.join(ANNOTATIONS_DIR).join(format!("{}.txt", s.name));
        write_atomic(&ann, |w| write_annotations(w, &s.records))?;
        entries.push(ManifestEntry {
            image_path,
            split: Split::Train,
            point_count: s.records.len(),
        });
    }
    write_atomic(&root.join(MANIFEST_FILE), |w| write_manifest(w, &entries))?;
    Ok(entries)
}
