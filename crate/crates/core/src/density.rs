//! Ground-truth density maps from point annotations.
//!
//! Pixel `(row, col)` is centered at coordinates `(row, col)`. Each
//! annotation adds an isotropic Gaussian truncated to radius `4σ`; the
//! weights that land inside the image are rescaled to sum to one, so every
//! map integrates to its point count even at the borders.

use std::io::{self, Read, Write};

use log::warn;

use crate::autodiff::Tensor;
use crate::error::{config, Error, Result};
use crate::stats::knn_mean_distance;

pub const CKDM_MAGIC: &[u8; 4] = b"CKDM";
pub const CKDM_VERSION: u32 = 1;

/// Truncation radius in units of σ.
pub const TRUNCATE_SIGMAS: f64 = 4.0;

/// Fixed-kernel spread used for the drone-view datasets.
pub const DEFAULT_FIXED_SIGMA: f64 = 15.0;

/// Annotation location in pixel units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub col: f64,
    pub row: f64,
}

impl Point {
    pub fn new(col: f64, row: f64) -> Self {
        Self { col, row }
    }

    pub fn distance(self, other: Point) -> f64 {
        (self.col - other.col).hypot(self.row - other.row)
    }
}

/// Points of one image, all inside `[0, W−1] × [0, H−1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet {
    points: Vec<Point>,
    height: usize,
    width: usize,
}

impl PointSet {
    /// Clamps out-of-range points onto the image, logging a warning.
    pub fn new(points: Vec<Point>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return config(format!("point set needs a non-empty image, got {height}x{width}"));
        }
        let (max_c, max_r) = ((width - 1) as f64, (height - 1) as f64);
        let mut clamped = 0;
        let points = points
            .into_iter()
            .map(|p| {
                if !(p.col.is_finite() && p.row.is_finite()) {
                    return Err(Error::Config(format!("non-finite point ({}, {})", p.col, p.row)));
                }
                let q = Point::new(p.col.clamp(0.0, max_c), p.row.clamp(0.0, max_r));
                if q != p {
                    clamped += 1;
                }
                Ok(q)
            })
            .collect::<Result<Vec<_>>>()?;
        if clamped > 0 {
            warn!("clamped {clamped} annotation point(s) onto the {height}x{width} image");
        }
        Ok(Self { points, height, width })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }
}

/// Non-negative `H × W` grid in row-major order.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityMap {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl DensityMap {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn from_data(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width {
            return config(format!(
                "density map {height}x{width} cannot hold {} values",
                data.len()
            ));
        }
        if data.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return config("density values must be finite and non-negative");
        }
        Ok(Self { height, width, data })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Integral of the map, i.e. the count it represents.
    pub fn total_mass(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Mirror along the vertical axis, matching `col' = (W−1) − col`.
    pub fn flip_horizontal(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for row in self.data.chunks(self.width) {
            data.extend(row.iter().rev());
        }
        Self { data, ..*self }
    }

    /// The map as a `[1, 1, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, 1, self.height, self.width], self.data.clone()).expect("consistent shape")
    }

    pub fn write_ckdm<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(CKDM_MAGIC)?;
        w.write_all(&CKDM_VERSION.to_le_bytes())?;
        w.write_all(&(self.height as u32).to_le_bytes())?;
        w.write_all(&(self.width as u32).to_le_bytes())?;
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    }

    pub fn read_ckdm<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header).map_err(|e| eof_as_format(e, "header"))?;
        if &header[..4] != CKDM_MAGIC {
            return Err(Error::Format("bad CKDM magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
        if word(4) != CKDM_VERSION {
            return Err(Error::Format(format!("unsupported CKDM version {}", word(4))));
        }
        let (h, w) = (word(8) as usize, word(12) as usize);
        if h == 0 || w == 0 || h.saturating_mul(w) > 1 << 30 {
            return Err(Error::Format(format!("CKDM dimensions {h}x{w} out of range")));
        }
        let mut bytes = vec![0u8; h * w * 8];
        r.read_exact(&mut bytes).map_err(|e| eof_as_format(e, "payload"))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Self::from_data(h, w, data).map_err(|e| Error::Format(e.to_string()))
    }

    /// Binary 8-bit PGM scaled so the maximum maps to 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let max = self.data.iter().copied().fold(0.0, f64::max);
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&v| {
            if max > 0.0 {
                (v / max * 255.0).round().clamp(0.0, 255.0) as u8
            } else {
                0
            }
        }));
        out
    }
}

fn eof_as_format(e: io::Error, what: &str) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format(format!("CKDM file truncated in {what}"))
    } else {
        Error::Io(e)
    }
}

/// Adds one unit of mass around `p` with spread `sigma`.
fn splat(map: &mut DensityMap, p: Point, sigma: f64, weights: &mut Vec<(usize, f64)>) {
    let radius = TRUNCATE_SIGMAS * sigma;
    let (h, w) = (map.height as f64, map.width as f64);
    let r0 = (p.row - radius).ceil().max(0.0) as usize;
    let r1 = (p.row + radius).floor().min(h - 1.0) as usize;
    let c0 = (p.col - radius).ceil().max(0.0) as usize;
    let c1 = (p.col + radius).floor().min(w - 1.0) as usize;
    let inv = 1.0 / (2.0 * sigma * sigma);
    weights.clear();
    let mut total = 0.0;
    for r in r0..=r1 {
        for c in c0..=c1 {
            let d2 = (r as f64 - p.row).powi(2) + (c as f64 - p.col).powi(2);
            if d2 <= radius * radius {
                let v = (-d2 * inv).exp();
                total += v;
                weights.push((r * map.width + c, v));
            }
        }
    }
    if total > 0.0 {
        for &(i, v) in weights.iter() {
            map.data[i] += v / total;
        }
    } else {
        let (r, c) = (p.row.round() as usize, p.col.round() as usize);
        map.data[r * map.width + c] += 1.0;
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return config(format!("kernel sigma must be positive and finite, got {sigma}"));
    }
    Ok(())
}

/// Sum of unit-mass Gaussians of one fixed `sigma`.
pub fn fixed_kernel_density(points: &PointSet, sigma: f64) -> Result<DensityMap> {
    check_sigma(sigma)?;
    let mut map = DensityMap::zeros(points.height, points.width);
    let mut scratch = Vec::new();
    for &p in &points.points {
        splat(&mut map, p, sigma, &mut scratch);
    }
    Ok(map)
}

/// Geometry-adaptive kernel settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptiveKernel {
    /// σ_i = beta × mean distance to the `k` nearest neighbors.
    pub beta: f64,
    pub k: usize,
    /// Used for every point when there are at most `k` points.
    pub fallback_sigma: f64,
    /// Lower bound on σ_i, for coincident points.
    pub min_sigma: f64,
}

impl Default for AdaptiveKernel {
    fn default() -> Self {
        Self {
            beta: 0.3,
            k: 3,
            fallback_sigma: 15.0,
            min_sigma: 1.0,
        }
    }
}

impl AdaptiveKernel {
    /// Per-point spreads, or `None` when the fixed fallback applies.
    pub fn sigmas(&self, points: &PointSet) -> Result<Option<Vec<f64>>> {
        if !(self.beta > 0.0 && self.beta.is_finite()) || self.k == 0 {
            return config(format!("adaptive kernel needs beta > 0 and k >= 1, got {self:?}"));
        }
        check_sigma(self.min_sigma)?;
        if points.len() <= self.k {
            return Ok(None);
        }
        let dists = knn_mean_distance(points.points(), self.k)?.values;
        Ok(Some(dists.iter().map(|d| (self.beta * d).max(self.min_sigma)).collect()))
    }
}

/// Sum of unit-mass Gaussians whose spread follows local crowd density.
pub fn adaptive_kernel_density(points: &PointSet, kernel: AdaptiveKernel) -> Result<DensityMap> {
    let Some(sigmas) = kernel.sigmas(points)? else {
        return fixed_kernel_density(points, kernel.fallback_sigma);
    };
    let mut map = DensityMap::zeros(points.height, points.width);
    let mut scratch = Vec::new();
    for (&p, &s) in points.points.iter().zip(&sigmas) {
        splat(&mut map, p, s, &mut scratch);
    }
    Ok(map)
}

/// Block sums onto a coarser grid; mass is preserved.
pub fn sum_pool_to(density: &DensityMap, target_h: usize, target_w: usize) -> Result<DensityMap> {
    let (h, w) = (density.height, density.width);
    if target_h == 0 || target_w == 0 || h % target_h != 0 || w % target_w != 0 {
        return config(format!("cannot sum-pool {h}x{w} onto {target_h}x{target_w}"));
    }
    let (fy, fx) = (h / target_h, w / target_w);
    let mut data = vec![0.0; target_h * target_w];
    for r in 0..h {
        for c in 0..w {
            data[(r / fy) * target_w + c / fx] += density.data[r * w + c];
        }
    }
    Ok(DensityMap {
        height: target_h,
        width: target_w,
        data,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn set(points: &[(f64, f64)], h: usize, w: usize) -> PointSet {
        PointSet::new(points.iter().map(|&(c, r)| Point::new(c, r)).collect(), h, w).unwrap()
    }

    #[test]
    fn single_centered_point_has_unit_mass() {
        let m = fixed_kernel_density(&set(&[(256.0, 256.0)], 512, 512), 15.0).unwrap();
        assert!((m.total_mass() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn no_points_give_zero_map() {
        let m = fixed_kernel_density(&set(&[], 8, 8), 15.0).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
        let m = adaptive_kernel_density(&set(&[], 8, 8), AdaptiveKernel::default()).unwrap();
        assert_eq!(m.total_mass(), 0.0);
    }

    #[test]
    fn twelve_points_including_corners_keep_mass() {
        let pts = [
            (0.0, 0.0),
            (99.0, 0.0),
            (0.0, 79.0),
            (99.0, 79.0),
            (50.0, 40.0),
            (50.5, 40.5),
            (1.0, 40.0),
            (98.2, 12.7),
            (33.3, 0.0),
            (70.0, 78.9),
            (12.0, 60.0),
            (80.0, 20.0),
        ];
        let ps = set(&pts, 80, 100);
        let fixed = fixed_kernel_density(&ps, 15.0).unwrap();
        assert!((fixed.total_mass() - 12.0).abs() < 1e-6);
        let adaptive = adaptive_kernel_density(&ps, AdaptiveKernel::default()).unwrap();
        assert!((adaptive.total_mass() - 12.0).abs() < 1e-6);
        assert!(fixed.data().iter().chain(adaptive.data()).all(|&v| v >= 0.0));
    }

    #[test]
    fn adaptive_sigma_examples() {
        let k1 = AdaptiveKernel { k: 1, ..AdaptiveKernel::default() };
        let s = k1.sigmas(&set(&[(10.0, 10.0), (20.0, 10.0)], 32, 32)).unwrap().unwrap();
        assert!((s[0] - 3.0).abs() < 1e-12 && (s[1] - 3.0).abs() < 1e-12);
        let s = k1.sigmas(&set(&[(5.0, 5.0); 4], 32, 32)).unwrap().unwrap();
        assert!(s.iter().all(|&v| v == 1.0));
        let m = adaptive_kernel_density(&set(&[(5.0, 5.0); 4], 32, 32), k1).unwrap();
        assert!((m.total_mass() - 4.0).abs() < 1e-9);
        assert_eq!(AdaptiveKernel::default().sigmas(&set(&[(1.0, 1.0); 3], 8, 8)).unwrap(), None);
    }

    #[test]
    fn adaptive_falls_back_to_fixed_for_small_sets() {
        let ps = set(&[(3.0, 4.0), (10.0, 2.0)], 16, 16);
        let a = adaptive_kernel_density(&ps, AdaptiveKernel::default()).unwrap();
        assert_eq!(a, fixed_kernel_density(&ps, 15.0).unwrap());
    }

    #[test]
    fn invalid_sigma_is_rejected() {
        let ps = set(&[(1.0, 1.0)], 4, 4);
        assert!(fixed_kernel_density(&ps, 0.0).is_err());
        assert!(fixed_kernel_density(&ps, f64::NAN).is_err());
    }

    #[test]
    fn tiny_sigma_keeps_mass_on_nearest_pixel() {
        let m = fixed_kernel_density(&set(&[(2.4, 1.6)], 4, 4), 0.01).unwrap();
        assert_eq!(m.get(2, 2), 1.0);
    }

    #[test]
    fn out_of_range_points_are_clamped() {
        let ps = set(&[(-3.0, 5.0), (12.0, 100.0)], 10, 10);
        assert_eq!(ps.points(), &[Point::new(0.0, 5.0), Point::new(9.0, 9.0)]);
    }

    #[test]
    fn sum_pool_examples() {
        let ones = DensityMap::from_data(4, 4, vec![1.0; 16]).unwrap();
        let p = sum_pool_to(&ones, 2, 2).unwrap();
        assert_eq!(p.data(), &[4.0; 4]);
        assert_eq!(sum_pool_to(&ones, 4, 4).unwrap(), ones);
        assert_eq!(sum_pool_to(&ones, 1, 1).unwrap().data(), &[16.0]);
        assert!(sum_pool_to(&ones, 3, 2).is_err());
    }

    #[test]
    fn interior_translation_shifts_map() {
        let a = fixed_kernel_density(&set(&[(30.0, 25.0)], 64, 64), 3.0).unwrap();
        let b = fixed_kernel_density(&set(&[(33.0, 27.0)], 64, 64), 3.0).unwrap();
        for r in 0..62 {
            for c in 0..61 {
                assert_eq!(a.get(r, c), b.get(r + 2, c + 3));
            }
        }
    }

    #[test]
    fn flip_mirrors_columns() {
        let a = fixed_kernel_density(&set(&[(3.0, 2.0)], 8, 10), 1.0).unwrap();
        let b = fixed_kernel_density(&set(&[(6.0, 2.0)], 8, 10), 1.0).unwrap();
        let flipped = a.flip_horizontal();
        assert!(flipped.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() < 1e-15));
    }

    #[test]
    fn ckdm_layout_and_round_trip() {
        let m = DensityMap::from_data(2, 3, vec![0.0, 0.5, 1.0, 1.5, 2.0, 1e-9]).unwrap();
        let mut buf = Vec::new();
        m.write_ckdm(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"CKDM");
        assert_eq!(&buf[4..16], &[1, 0, 0, 0, 2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(buf.len(), 16 + 6 * 8);
        assert_eq!(DensityMap::read_ckdm(&buf[..]).unwrap(), m);
        assert!(matches!(DensityMap::read_ckdm(&buf[..20]), Err(Error::Format(_))));
        assert!(matches!(DensityMap::read_ckdm(&b"XXXX\x01\0\0\0\x01\0\0\0\x01\0\0\0"[..]), Err(Error::Format(_))));
    }

    #[test]
    fn pgm_is_max_normalized() {
        let m = DensityMap::from_data(1, 3, vec![0.0, 1.0, 2.0]).unwrap();
        let pgm = m.to_pgm();
        assert!(pgm.starts_with(b"P5\n3 1\n255\n"));
        assert_eq!(&pgm[pgm.len() - 3..], &[0, 128, 255]);
    }

    proptest! {
        #[test]
        fn mass_is_conserved(seed in any::<u64>(), n in 0usize..40, h in 8usize..96, w in 8usize..96, sigma in 0.5f64..20.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Point> = (0..n)
                .map(|_| Point::new(rng.random_range(0.0..w as f64 - 1.0), rng.random_range(0.0..h as f64 - 1.0)))
                .collect();
            let ps = PointSet::new(pts, h, w).unwrap();
            let m = fixed_kernel_density(&ps, sigma).unwrap();
            prop_assert!((m.total_mass() - n as f64).abs() < 1e-6);
            prop_assert!(m.data().iter().all(|&v| v >= 0.0));
            let pooled = sum_pool_to(&m, 1, 1).unwrap();
            prop_assert!((pooled.total_mass() - m.total_mass()).abs() < 1e-12);
        }
    }
}
