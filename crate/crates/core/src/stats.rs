//! Crowd measurements: object scales and their CV, nearest-neighbor
//! distances, 1-D k-means, the Dunn validity index and bucketing.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::density::Point;
use crate::error::{config, Error, Result};
use crate::ingest::{BBoxRecord, CategoryGroup};

pub const CV_EDGES: [f64; 4] = [0.2, 0.4, 0.6, 0.8];
pub const DVI_EDGES: [f64; 3] = [1.0, 2.0, 3.0];
pub const DEFAULT_NEIGHBORS: usize = 2;
pub const DEFAULT_CLUSTERS: usize = 2;
pub const DEFAULT_RESTARTS: usize = 10;

const MAX_LLOYD_ITERATIONS: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleStats {
    pub scales: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub cv: f64,
}

/// Per-box `(width + height) / 2` with mean, std and coefficient of variation.
pub fn object_scales(records: &[BBoxRecord]) -> Result<ScaleStats> {
    scale_stats(records.iter().map(BBoxRecord::scale).collect())
}

pub fn scale_stats(scales: Vec<f64>) -> Result<ScaleStats> {
    if scales.is_empty() {
        return Err(Error::Degenerate("no objects to measure".into()));
    }
    let n = scales.len() as f64;
    let mean = scales.iter().sum::<f64>() / n;
    let std = (scales.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt();
    if mean <= 0.0 {
        return Err(Error::Degenerate(format!("CV is undefined for mean scale {mean}")));
    }
    Ok(ScaleStats {
        cv: std / mean,
        scales,
        mean,
        std,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborDistances {
    pub n: usize,
    pub values: Vec<f64>,
}

/// For each point, the mean distance to its `n` nearest other points.
pub fn knn_mean_distance(points: &[Point], n: usize) -> Result<NeighborDistances> {
    if n == 0 {
        return config("neighbor count must be at least 1");
    }
    if points.len() < n + 1 {
        return Err(Error::Degenerate(format!(
            "{} nearest neighbors need at least {} points, got {}",
            n,
            n + 1,
            points.len()
        )));
    }
    let mut row = Vec::with_capacity(points.len() - 1);
    let values = points
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            row.clear();
            row.extend(points.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &q)| p.distance(q)));
            row.select_nth_unstable_by(n - 1, f64::total_cmp);
            let nearest = &mut row[..n];
            nearest.sort_by(f64::total_cmp);
            nearest.iter().sum::<f64>() / n as f64
        })
        .collect();
    Ok(NeighborDistances { n, values })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    pub assignments: Vec<usize>,
    pub centers: Vec<f64>,
    /// Within-cluster sum of squared deviations from the centers.
    pub wcss: f64,
}

impl Clustering {
    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }

    /// Members of each cluster, in input order.
    pub fn members(&self, values: &[f64]) -> Vec<Vec<f64>> {
        let mut out = vec![Vec::new(); self.k];
        for (&v, &a) in values.iter().zip(&self.assignments) {
            out[a].push(v);
        }
        out
    }
}

fn nearest_center(v: f64, centers: &[f64]) -> usize {
    let mut best = 0;
    for (c, &m) in centers.iter().enumerate().skip(1) {
        if (v - m).abs() < (v - centers[best]).abs() {
            best = c;
        }
    }
    best
}

fn lloyd(values: &[f64], mut centers: Vec<f64>) -> Clustering {
    let k = centers.len();
    let mut assignments: Vec<usize> = Vec::new();
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut next: Vec<usize> = values.iter().map(|&v| nearest_center(v, &centers)).collect();
        let mut sizes = vec![0usize; k];
        for &a in &next {
            sizes[a] += 1;
        }
        for empty in 0..k {
            if sizes[empty] > 0 {
                continue;
            }
            // reseed from the point farthest from its center, among clusters that can spare one
            let mut far: Option<(usize, f64)> = None;
            for (i, &v) in values.iter().enumerate() {
                let d = (v - centers[next[i]]).abs();
                if sizes[next[i]] > 1 && far.is_none_or(|(_, best)| d > best) {
                    far = Some((i, d));
                }
            }
            let (i, _) = far.expect("k <= number of values");
            sizes[next[i]] -= 1;
            next[i] = empty;
            sizes[empty] = 1;
            centers[empty] = values[i];
        }
        let mut sums = vec![0.0; k];
        for (&v, &a) in values.iter().zip(&next) {
            sums[a] += v;
        }
        for c in 0..k {
            centers[c] = sums[c] / sizes[c] as f64;
        }
        let converged = next == assignments;
        assignments = next;
        if converged {
            break;
        }
    }
    let wcss = values
        .iter()
        .zip(&assignments)
        .map(|(&v, &a)| (v - centers[a]).powi(2))
        .sum();
    Clustering {
        k,
        assignments,
        centers,
        wcss,
    }
}

/// Centers of the best partition of `values` into `k` contiguous runs of
/// sorted order, by dynamic programming over split points.
fn contiguous_optimum_centers(values: &[f64], k: usize) -> Vec<f64> {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let (mut s1, mut s2) = (vec![0.0; n + 1], vec![0.0; n + 1]);
    for (i, &v) in sorted.iter().enumerate() {
        s1[i + 1] = s1[i] + v;
        s2[i + 1] = s2[i] + v * v;
    }
    let cost = |i: usize, j: usize| {
        let (sum, len) = (s1[j] - s1[i], (j - i) as f64);
        (s2[j] - s2[i] - sum * sum / len).max(0.0)
    };
    // best[m][j]: cost of splitting sorted[..j] into m + 1 runs; start[m][j]: where the last run begins
    let mut best = vec![vec![f64::INFINITY; n + 1]; k];
    let mut start = vec![vec![0usize; n + 1]; k];
    for j in 1..=n {
        best[0][j] = cost(0, j);
    }
    for m in 1..k {
        for j in m + 1..=n {
            for i in m..j {
                let c = best[m - 1][i] + cost(i, j);
                if c < best[m][j] {
                    best[m][j] = c;
                    start[m][j] = i;
                }
            }
        }
    }
    let mut centers = vec![0.0; k];
    let mut end = n;
    for m in (0..k).rev() {
        let begin = if m == 0 { 0 } else { start[m][end] };
        centers[m] = (s1[end] - s1[begin]) / (end - begin) as f64;
        end = begin;
    }
    centers
}

/// Lloyd's algorithm, keeping the lowest within-cluster sum of squares over
/// `restarts` random initializations plus one started from the exact
/// contiguous optimum.
pub fn kmeans_1d(values: &[f64], k: usize, restarts: usize, seed: u64) -> Result<Clustering> {
    if k == 0 || restarts == 0 {
        return config("k-means needs k >= 1 and at least one restart");
    }
    if k > values.len() {
        return Err(Error::Degenerate(format!("cannot form {k} clusters from {} values", values.len())));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return config("k-means values must be finite");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best = lloyd(values, contiguous_optimum_centers(values, k));
    for _ in 0..restarts {
        let init = rand::seq::index::sample(&mut rng, values.len(), k)
            .iter()
            .map(|i| values[i])
            .collect();
        let c = lloyd(values, init);
        if c.wcss < best.wcss {
            best = c;
        }
    }
    Ok(best)
}

/// Smallest inter-cluster distance over the largest cluster diameter.
pub fn dunn_index(values: &[f64], clustering: &Clustering) -> Result<f64> {
    if clustering.assignments.len() != values.len() || clustering.assignments.iter().any(|&a| a >= clustering.k) {
        return config("clustering does not match the values");
    }
    let groups: Vec<Vec<f64>> = clustering.members(values).into_iter().filter(|g| !g.is_empty()).collect();
    if groups.len() < 2 {
        return Err(Error::Degenerate("Dunn index needs at least two clusters".into()));
    }
    let mut separation = f64::INFINITY;
    for (a, ga) in groups.iter().enumerate() {
        for gb in &groups[a + 1..] {
            for &x in ga {
                for &y in gb {
                    separation = separation.min((x - y).abs());
                }
            }
        }
    }
    let diameter = groups
        .iter()
        .map(|g| {
            let lo = g.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            hi - lo
        })
        .fold(0.0, f64::max);
    if diameter == 0.0 {
        return Err(Error::Degenerate("every cluster has zero diameter".into()));
    }
    Ok(separation / diameter)
}

fn bucket(value: f64, edges: &[f64], what: &str) -> Result<usize> {
    if !(value >= 0.0) {
        return config(format!("{what} must be non-negative, got {value}"));
    }
    Ok(edges.iter().take_while(|&&e| value >= e).count())
}

/// Index of the half-open CV interval `[0,.2) [.2,.4) [.4,.6) [.6,.8) [.8,∞)`.
pub fn bucket_cv(cv: f64) -> Result<usize> {
    bucket(cv, &CV_EDGES, "CV")
}

/// Index of the half-open DVI interval `[0,1) [1,2) [2,3) [3,∞)`.
pub fn bucket_dvi(dvi: f64) -> Result<usize> {
    bucket(dvi, &DVI_EDGES, "DVI")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub bin_left: f64,
    pub count: usize,
}

/// Counts over `bins` equal-width bins from zero; the final bin collects
/// everything at or beyond `bins × width`.
pub fn histogram(values: &[f64], width: f64, bins: usize) -> Vec<HistogramBin> {
    let mut out: Vec<HistogramBin> = (0..=bins)
        .map(|i| HistogramBin {
            bin_left: i as f64 * width,
            count: 0,
        })
        .collect();
    for &v in values {
        let i = ((v / width).floor().max(0.0) as usize).min(bins);
        out[i].count += 1;
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StatsOptions {
    pub neighbors: usize,
    pub clusters: usize,
    pub restarts: usize,
    pub seed: u64,
    pub scale_bin_width: f64,
    pub distance_bin_width: f64,
    pub histogram_bins: usize,
}

impl Default for StatsOptions {
    fn default() -> Self {
        Self {
            neighbors: DEFAULT_NEIGHBORS,
            clusters: DEFAULT_CLUSTERS,
            restarts: DEFAULT_RESTARTS,
            seed: 0,
            scale_bin_width: 8.0,
            distance_bin_width: 16.0,
            histogram_bins: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSummary {
    pub mean: f64,
    pub std: f64,
    pub cv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub centers: Vec<f64>,
    pub sizes: Vec<usize>,
    pub wcss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrowdStatsReport {
    pub image_path: String,
    pub object_count: usize,
    pub scale: ScaleSummary,
    pub cv_bucket: usize,
    pub mean_neighbor_distance: Option<f64>,
    pub clustering: Option<ClusterSummary>,
    pub dvi: Option<f64>,
    pub dvi_bucket: Option<usize>,
    /// Why the DVI is missing, when it is.
    pub dvi_flag: Option<String>,
    pub scale_histogram: Vec<HistogramBin>,
    pub distance_histogram: Vec<HistogramBin>,
}

/// Scale variation and isolated-cluster measurements for one image.
///
/// Only records of `group` are measured. Images whose DVI is undefined get
/// a flag in place of the DVI fields rather than an error.
pub fn analyze_image(image_path: &str, group: CategoryGroup, records: &[BBoxRecord], opts: &StatsOptions) -> Result<CrowdStatsReport> {
    let kept = group.select(records);
    let scales = object_scales(&kept)?;
    let points = group.convert(&kept);
    let mut distances = Vec::new();
    let dvi = knn_mean_distance(&points, opts.neighbors).and_then(|nd| {
        distances = nd.values;
        let c = kmeans_1d(&distances, opts.clusters, opts.restarts, opts.seed)?;
        let dvi = dunn_index(&distances, &c)?;
        Ok((c, dvi))
    });
    let (clustering, dvi, dvi_bucket, dvi_flag) = match dvi {
        Ok((c, d)) => (
            Some(ClusterSummary {
                sizes: c.sizes(),
                centers: c.centers,
                wcss: c.wcss,
            }),
            Some(d),
            Some(bucket_dvi(d)?),
            None,
        ),
        Err(Error::Degenerate(msg)) => (None, None, None, Some(msg)),
        Err(e) => return Err(e),
    };
    Ok(CrowdStatsReport {
        image_path: image_path.to_string(),
        object_count: kept.len(),
        cv_bucket: bucket_cv(scales.cv)?,
        mean_neighbor_distance: (!distances.is_empty()).then(|| distances.iter().sum::<f64>() / distances.len() as f64),
        clustering,
        dvi,
        dvi_bucket,
        dvi_flag,
        scale_histogram: histogram(&scales.scales, opts.scale_bin_width, opts.histogram_bins),
        distance_histogram: histogram(&distances, opts.distance_bin_width, opts.histogram_bins),
        scale: ScaleSummary {
            mean: scales.mean,
            std: scales.std,
            cv: scales.cv,
        },
    })
}

/// One line per report: `image_path,object_count,mean_scale,cv,cv_bucket,dvi,dvi_bucket,flag`.
pub fn write_summary_csv<W: Write>(w: W, reports: &[CrowdStatsReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let io = |e: csv::Error| Error::Io(e.into());
    out.write_record(["image_path", "object_count", "mean_scale", "cv", "cv_bucket", "dvi", "dvi_bucket", "flag"])
        .map_err(io)?;
    for r in reports {
        let opt = |v: Option<String>| v.unwrap_or_default();
        out.write_record([
            r.image_path.clone(),
            r.object_count.to_string(),
            r.scale.mean.to_string(),
            r.scale.cv.to_string(),
            r.cv_bucket.to_string(),
            opt(r.dvi.map(|d| d.to_string())),
            opt(r.dvi_bucket.map(|b| b.to_string())),
            opt(r.dvi_flag.clone()),
        ])
        .map_err(io)?;
    }
    out.flush()?;
    Ok(())
}
