//! Min-count filtering and seeded train/val/test assignment.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};

pub const DEFAULT_MIN_COUNT: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
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

/// Fractions of the filtered samples going to each split.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    /// Roughly the 2392/329/626 proportions of the VisDrone people split.
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        let parts = [train, val, test];
        if parts.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return config(format!("split ratios must be non-negative and sum to 1, got {train}/{val}/{test}"));
        }
        Ok(r)
    }

    /// Floor allocation for `n` samples; the remainder goes to train.
    pub fn allocate(&self, n: usize) -> (usize, usize, usize) {
        let share = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
        let (val, test) = (share(self.val), share(self.test));
        (n - val - test, val, test)
    }
}

impl FromStr for SplitRatios {
    type Err = Error;

    /// Parses `train,val,test`, e.g. `0.8,0.1,0.1`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Config(format!("invalid split ratios {s:?}")))?;
        match parts[..] {
            [a, b, c] => Self::new(a, b, c),
            _ => config(format!("split ratios need three values, got {s:?}")),
        }
    }
}

/// A candidate sample before filtering.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleSummary {
    pub image_path: String,
    pub point_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub split: Split,
    pub point_count: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitOutcome {
    /// Surviving samples, ordered by image path.
    pub entries: Vec<ManifestEntry>,
    /// Paths removed by the min-count rule.
    pub dropped: Vec<String>,
}

impl SplitOutcome {
    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }
}

/// Drops samples under `min_count`, shuffles by `seed`, then allocates splits.
///
/// Input order does not matter: samples are sorted by path before shuffling.
pub fn filter_and_split(samples: &[SampleSummary], min_count: usize, ratios: SplitRatios, seed: u64) -> Result<SplitOutcome> {
    let mut kept: Vec<&SampleSummary> = Vec::new();
    let mut dropped = Vec::new();
    for s in samples {
        if s.point_count < min_count {
            dropped.push(s.image_path.clone());
        } else {
            kept.push(s);
        }
    }
    if kept.is_empty() {
        return Err(Error::Degenerate(format!(
            "no sample has at least {min_count} points ({} candidates)",
            samples.len()
        )));
    }
    kept.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    if kept.windows(2).any(|w| w[0].image_path == w[1].image_path) {
        return config("duplicate image paths in split input");
    }
    kept.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let (train, val, _) = ratios.allocate(kept.len());
    let mut entries: Vec<ManifestEntry> = kept
        .iter()
        .enumerate()
        .map(|(i, s)| ManifestEntry {
            image_path: s.image_path.clone(),
            split: if i < train {
                Split::Train
            } else if i < train + val {
                Split::Val
            } else {
                Split::Test
            },
            point_count: s.point_count,
        })
        .collect();
    entries.sort_by(|a, b| a.image_path.cmp(&b.image_path));
    dropped.sort();
    Ok(SplitOutcome { entries, dropped })
}

pub fn write_manifest<W: Write>(w: W, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    out.write_record(["image_path", "split", "point_count"]).map_err(csv_err)?;
    for e in entries {
        out.serialize(e).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_manifest<R: Read>(r: R) -> Result<Vec<ManifestEntry>> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(r);
    let headers = rd.headers().map_err(csv_err)?.clone();
    if headers.iter().collect::<Vec<_>>() != ["image_path", "split", "point_count"] {
        return Err(Error::Parse {
            line: 1,
            msg: "manifest header must be image_path,split,point_count".into(),
        });
    }
    rd.deserialize().map(|row| row.map_err(csv_err)).collect()
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::Parse { line, msg: format!("{kind:?}") },
    }
}
