//! Pixel-wise squared-error training with Adam, and count evaluation.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::density::{adaptive_kernel_density, fixed_kernel_density, sum_pool_to, AdaptiveKernel, DensityMap, PointSet};
use crate::error::{config, Error, Result};
use crate::fsutil::write_atomic;
use crate::ingest::PreparedSample;
use crate::model::{predict_count, SacaModel, OUTPUT_STRIDE};

pub const DEFAULT_LEARNING_RATE: f64 = 1e-4;

/// `mean((pred − gt)²)` over every element, batch included.
pub fn euclidean_loss(g: &mut Graph, pred: Var, gt: Var) -> Result<Var> {
    let diff = g.sub(pred, gt)?;
    let sq = g.mul(diff, diff)?;
    Ok(g.mean(sq))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape()) {
            return config("Adam: gradients do not match the parameters");
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.shape() != p.shape()) {
            return config("Adam: parameter set changed between steps");
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            let (p, m, v) = (p.data_mut(), m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                m[i] = b1 * m[i] + (1.0 - b1) * gi;
                v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + self.epsilon);
            }
        }
        Ok(())
    }
}

/// How ground-truth density maps are drawn from points.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum GroundTruthKernel {
    Fixed(f64),
    Adaptive(AdaptiveKernel),
}

impl GroundTruthKernel {
    pub fn density(&self, points: &PointSet) -> Result<DensityMap> {
        match *self {
            GroundTruthKernel::Fixed(sigma) => fixed_kernel_density(points, sigma),
            GroundTruthKernel::Adaptive(k) => adaptive_kernel_density(points, k),
        }
    }
}

/// A network input with its density target on the output grid.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    pub image_path: String,
    /// `[1, C, H, W]`.
    pub image: Tensor,
    /// `[1, 1, H/8, W/8]`, full-resolution density summed over 8×8 blocks.
    pub target: Tensor,
    pub count: f64,
}

impl TrainingSample {
    pub fn from_prepared(sample: &PreparedSample, kernel: GroundTruthKernel) -> Result<Self> {
        let points = sample.point_set()?;
        let density = kernel.density(&points)?;
        let (h, w) = (density.height(), density.width());
        if h % OUTPUT_STRIDE != 0 || w % OUTPUT_STRIDE != 0 {
            return config(format!("{}: {h}x{w} is not a multiple of the output stride", sample.image_path));
        }
        let pooled = sum_pool_to(&density, h / OUTPUT_STRIDE, w / OUTPUT_STRIDE)?;
        Ok(Self {
            image_path: sample.image_path.clone(),
            image: sample.image.to_tensor(),
            target: pooled.to_tensor(),
            count: points.len() as f64,
        })
    }
}

/// Mirrors the last axis of a `[B, C, H, W]` tensor.
fn flip_width(t: &Tensor) -> Tensor {
    let w = *t.shape().last().expect("rank 4");
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

fn stack(tensors: &[&Tensor]) -> Result<Tensor> {
    let first = tensors[0].shape();
    if tensors.iter().any(|t| t.shape() != first) {
        return config("samples in one batch must share a shape; use batch size 1 for mixed sizes");
    }
    let mut shape = first.to_vec();
    shape[0] = tensors.len();
    Tensor::new(shape, tensors.iter().flat_map(|t| t.data().iter().copied()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub learning_rate: f64,
    /// Stop after this many optimizer steps, even mid-epoch.
    pub max_steps: Option<usize>,
    /// Chance of mirroring each sample at each step.
    pub flip_probability: f64,
    /// Rescale the full gradient to at most this L2 norm.
    pub clip_grad_norm: Option<f64>,
    /// Writes `epoch_NNNN.ckwt` here after every epoch.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 1,
            seed: 0,
            learning_rate: DEFAULT_LEARNING_RATE,
            max_steps: None,
            flip_probability: 0.0,
            clip_grad_norm: None,
            checkpoint_dir: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub train_mae: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainingLog {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }

    /// `step,loss` lines with a header.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,loss")?;
        for s in &self.steps {
            writeln!(w, "{},{:?}", s.step, s.loss)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Loss and gradients for one batch, without touching the model.
pub fn loss_and_gradients(model: &SacaModel, image: &Tensor, target: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    let mut g = Graph::new();
    let p = model.bind(&mut g, true);
    let x = g.constant(image.clone());
    let pred = model.forward(&mut g, &p, x)?;
    if g.shape(pred) != target.shape() {
        return config(format!(
            "prediction shape {:?} does not match target {:?}",
            g.shape(pred),
            target.shape()
        ));
    }
    let gt = g.constant(target.clone());
    let loss = euclidean_loss(&mut g, pred, gt)?;
    let value = g.value(loss).item().expect("scalar loss");
    if !value.is_finite() {
        return Ok((value, Vec::new()));
    }
    g.backward(loss)?;
    Ok((value, p.gradients(&mut g)))
}

fn clip_to_norm(grads: &mut [Tensor], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Mean absolute count error of `model` on `samples`.
pub fn training_mae(model: &SacaModel, samples: &[TrainingSample]) -> Result<f64> {
    let errors: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let density = model.predict(&s.image)?;
            Ok((predict_count(&density)?[0] - s.count).abs())
        })
        .collect::<Result<_>>()?;
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Trains `model` in place; deterministic in `cfg.seed`.
pub fn train(model: &mut SacaModel, samples: &[TrainingSample], cfg: &TrainConfig) -> Result<TrainingLog> {
    if cfg.batch_size == 0 {
        return config("batch size must be at least 1");
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return config(format!("learning rate must be positive, got {}", cfg.learning_rate));
    }
    if !(0.0..=1.0).contains(&cfg.flip_probability) {
        return config(format!("flip probability must be in [0, 1], got {}", cfg.flip_probability));
    }
    if cfg.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
        return config("gradient clip norm must be positive");
    }
    let mut log = TrainingLog::default();
    if cfg.epochs == 0 || cfg.max_steps == Some(0) {
        return Ok(log);
    }
    if samples.is_empty() {
        return Err(Error::Degenerate("no training samples".into()));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut step = 0;
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let flips: Vec<bool> = batch.iter().map(|_| rng.random::<f64>() < cfg.flip_probability).collect();
            let pick = |i: usize, t: &Tensor| if flips[i] { flip_width(t) } else { t.clone() };
            let images: Vec<Tensor> = batch.iter().enumerate().map(|(i, &s)| pick(i, &samples[s].image)).collect();
            let targets: Vec<Tensor> = batch.iter().enumerate().map(|(i, &s)| pick(i, &samples[s].target)).collect();
            let image = stack(&images.iter().collect::<Vec<_>>())?;
            let target = stack(&targets.iter().collect::<Vec<_>>())?;

            let (loss, mut grads) = loss_and_gradients(model, &image, &target)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    msg: format!("loss is {loss} on {}", samples[batch[0]].image_path),
                });
            }
            if let Some(c) = cfg.clip_grad_norm {
                clip_to_norm(&mut grads, c);
            }
            adam.step(model.params_mut().tensors_mut(), &grads)?;
            log.steps.push(StepRecord { step, epoch, loss });
            step += 1;
            if cfg.max_steps.is_some_and(|m| step >= m) {
                finish_epoch(model, samples, cfg, epoch, step, &mut log)?;
                break 'epochs;
            }
        }
        finish_epoch(model, samples, cfg, epoch, step, &mut log)?;
    }
    Ok(log)
}

fn finish_epoch(
    model: &SacaModel,
    samples: &[TrainingSample],
    cfg: &TrainConfig,
    epoch: usize,
    steps: usize,
    log: &mut TrainingLog,
) -> Result<()> {
    let train_mae = training_mae(model, samples)?;
    info!("epoch {epoch}: {steps} steps, training MAE {train_mae:.4}");
    log.epochs.push(EpochRecord { epoch, steps, train_mae });
    if let Some(dir) = &cfg.checkpoint_dir {
        write_atomic(&dir.join(format!("epoch_{epoch:04}.ckwt")), |w| model.write_weights(w))?;
    }
    Ok(())
}

/// MAE and root-mean-square count error.
pub fn count_metrics(ground_truth: &[f64], predicted: &[f64]) -> Result<(f64, f64)> {
    if ground_truth.is_empty() {
        return Err(Error::Degenerate("no images to evaluate".into()));
    }
    if ground_truth.len() != predicted.len() {
        return config("ground-truth and predicted counts differ in length");
    }
    let n = ground_truth.len() as f64;
    let errs = ground_truth.iter().zip(predicted).map(|(c, p)| (c - p).abs());
    let mae = errs.clone().sum::<f64>() / n;
    let mse = (errs.map(|e| e * e).sum::<f64>() / n).sqrt();
    Ok((mae, mse))
}

/// One image to count, with optional crowd-statistics buckets.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub image_path: String,
    pub image: Tensor,
    pub ground_truth: f64,
    pub cv_bucket: Option<usize>,
    pub dvi_bucket: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_path: String,
    pub ground_truth: f64,
    pub predicted: f64,
    pub cv_bucket: Option<usize>,
    pub dvi_bucket: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketMetrics {
    pub bucket: usize,
    pub images: usize,
    pub mae: f64,
    pub mse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub images: Vec<ImageResult>,
    pub mae: f64,
    pub mse: f64,
    pub cv_buckets: Vec<BucketMetrics>,
    pub dvi_buckets: Vec<BucketMetrics>,
}

impl EvalReport {
    pub fn from_results(images: Vec<ImageResult>) -> Result<Self> {
        let metrics = |rs: &[&ImageResult]| {
            let gt: Vec<f64> = rs.iter().map(|r| r.ground_truth).collect();
            let pred: Vec<f64> = rs.iter().map(|r| r.predicted).collect();
            count_metrics(&gt, &pred)
        };
        let (mae, mse) = metrics(&images.iter().collect::<Vec<_>>())?;
        let breakdown = |key: fn(&ImageResult) -> Option<usize>| -> Result<Vec<BucketMetrics>> {
            let mut groups: BTreeMap<usize, Vec<&ImageResult>> = BTreeMap::new();
            for r in &images {
                if let Some(b) = key(r) {
                    groups.entry(b).or_default().push(r);
                }
            }
            groups
                .into_iter()
                .map(|(bucket, rs)| {
                    let (mae, mse) = metrics(&rs)?;
                    Ok(BucketMetrics { bucket, images: rs.len(), mae, mse })
                })
                .collect()
        };
        let cv_buckets = breakdown(|r| r.cv_bucket)?;
        let dvi_buckets = breakdown(|r| r.dvi_bucket)?;
        Ok(Self {
            images,
            mae,
            mse,
            cv_buckets,
            dvi_buckets,
        })
    }

    /// Per-bucket table in plain text.
    pub fn bucket_table(&self) -> String {
        let mut out = String::from("kind  bucket  images       MAE       MSE\n");
        for (kind, rows) in [("cv", &self.cv_buckets), ("dvi", &self.dvi_buckets)] {
            for b in rows {
                out.push_str(&format!("{kind:<5} {:>6}  {:>6}  {:>8.3}  {:>8.3}\n", b.bucket, b.images, b.mae, b.mse));
            }
        }
        out.push_str(&format!("all        -  {:>6}  {:>8.3}  {:>8.3}\n", self.images.len(), self.mae, self.mse));
        out
    }
}

/// Counts every image with `model`; forward passes run in parallel and
/// results keep input order.
pub fn evaluate(model: &SacaModel, samples: &[EvalSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Degenerate("no images to evaluate".into()));
    }
    let images = samples
        .par_iter()
        .map(|s| {
            let density = model.predict(&s.image)?;
            Ok(ImageResult {
                image_path: s.image_path.clone(),
                ground_truth: s.ground_truth,
                predicted: predict_count(&density)?.iter().sum(),
                cv_bucket: s.cv_bucket,
                dvi_bucket: s.dvi_bucket,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvalReport::from_results(images)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::density::Point;
    use crate::ingest::Image;
    use crate::model::{ChannelScale, ModelConfig};

    fn loss_of(pred: &[f64], gt: &[f64], shape: &[usize]) -> f64 {
        let mut g = Graph::new();
        let p = g.constant(Tensor::new(shape.to_vec(), pred.to_vec()).unwrap());
        let t = g.constant(Tensor::new(shape.to_vec(), gt.to_vec()).unwrap());
        let l = euclidean_loss(&mut g, p, t).unwrap();
        g.value(l).item().unwrap()
    }

    #[test]
    fn loss_examples() {
        assert_eq!(loss_of(&[1.0, 2.0], &[1.0, 2.0], &[2]), 0.0);
        assert_eq!(loss_of(&[0.0; 4], &[1.0, 0.0, 0.0, 0.0], &[1, 1, 2, 2]), 0.25);
        let a = loss_of(&[0.5, -1.0], &[0.0, 0.0], &[2]);
        let b = loss_of(&[1.0, -2.0], &[0.0, 0.0], &[2]);
        assert_eq!(b, 4.0 * a);
        let mut g = Graph::new();
        let p = g.constant(Tensor::zeros(&[2]));
        let t = g.constant(Tensor::zeros(&[3]));
        assert!(euclidean_loss(&mut g, p, t).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut adam = AdamState::new(0.1);
        let mut p = vec![Tensor::scalar(1.0)];
        adam.step(&mut p, &[Tensor::scalar(2.0)]).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-8);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut adam = AdamState::new(0.1);
        let mut p = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
        let before = p.clone();
        adam.step(&mut p, &[Tensor::zeros(&[3])]).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn adam_opposite_steps_stay_within_lr() {
        let mut adam = AdamState::new(0.1);
        let mut p = vec![Tensor::scalar(1.0)];
        adam.step(&mut p, &[Tensor::scalar(3.0)]).unwrap();
        adam.step(&mut p, &[Tensor::scalar(-3.0)]).unwrap();
        assert!((p[0].data()[0] - 1.0).abs() < 0.1);
    }

    #[test]
    fn adam_rejects_mismatched_gradients() {
        let mut adam = AdamState::new(0.1);
        let mut p = vec![Tensor::zeros(&[2])];
        assert!(adam.step(&mut p, &[Tensor::zeros(&[3])]).is_err());
        assert!(adam.step(&mut p, &[]).is_err());
    }

    #[test]
    fn metrics_examples() {
        let (mae, mse) = count_metrics(&[10.0, 20.0], &[12.0, 16.0]).unwrap();
        assert_eq!(mae, 3.0);
        assert!((mse - 10f64.sqrt()).abs() < 1e-12);
        assert_eq!(count_metrics(&[4.0, 5.0], &[4.0, 5.0]).unwrap(), (0.0, 0.0));
        assert_eq!(count_metrics(&[7.0], &[4.5]).unwrap(), (2.5, 2.5));
        assert!(count_metrics(&[], &[]).is_err());
    }

    #[test]
    fn bucket_breakdown_groups_images() {
        let r = |gt: f64, pred: f64, cv: usize, dvi: Option<usize>| ImageResult {
            image_path: String::new(),
            ground_truth: gt,
            predicted: pred,
            cv_bucket: Some(cv),
            dvi_bucket: dvi,
        };
        let report = EvalReport::from_results(vec![r(10.0, 12.0, 3, Some(0)), r(20.0, 16.0, 3, None), r(5.0, 5.0, 0, Some(1))]).unwrap();
        assert_eq!(report.cv_buckets.iter().map(|b| (b.bucket, b.images)).collect::<Vec<_>>(), vec![(0, 1), (3, 2)]);
        assert_eq!(report.cv_buckets[1].mae, 3.0);
        assert_eq!(report.dvi_buckets.len(), 2);
        assert!(report.bucket_table().contains("dvi        1"));
    }

    fn toy_model() -> SacaModel {
        let cfg = ModelConfig {
            channel_scale: ChannelScale::new(1, 8).unwrap(),
            ..ModelConfig::default()
        };
        SacaModel::build(cfg).unwrap()
    }

    fn toy_sample(seed: u64) -> TrainingSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let image = Image::new(3, 32, 32, (0..3 * 32 * 32).map(|_| rng.random::<f64>()).collect()).unwrap();
        let points = (0..6).map(|_| Point::new(rng.random_range(2.0..30.0), rng.random_range(2.0..30.0))).collect();
        let prepared = PreparedSample { image_path: format!("s{seed}"), image, points };
        TrainingSample::from_prepared(&prepared, GroundTruthKernel::Fixed(2.0)).unwrap()
    }

    #[test]
    fn targets_are_pooled_and_keep_the_count() {
        let s = toy_sample(1);
        assert_eq!(s.target.shape(), &[1, 1, 4, 4]);
        assert!((s.target.data().iter().sum::<f64>() - 6.0).abs() < 1e-9);
        assert_eq!(s.count, 6.0);
    }

    #[test]
    fn zero_epochs_leave_the_model_alone() {
        let mut model = toy_model();
        let before = model.params().clone();
        let log = train(&mut model, &[toy_sample(0)], &TrainConfig { epochs: 0, ..TrainConfig::default() }).unwrap();
        assert!(log.steps.is_empty());
        assert_eq!(model.params(), &before);
    }

    #[test]
    fn tiny_learning_rate_barely_moves_parameters() {
        let mut model = toy_model();
        let before = model.params().clone();
        let cfg = TrainConfig { learning_rate: 1e-15, max_steps: Some(1), ..TrainConfig::default() };
        train(&mut model, &[toy_sample(0)], &cfg).unwrap();
        for (a, b) in model.params().tensors().iter().zip(before.tensors()) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= 1e-12));
        }
    }

    #[test]
    fn same_seed_gives_identical_runs() {
        let samples = vec![toy_sample(0), toy_sample(1), toy_sample(2)];
        let cfg = TrainConfig { epochs: 2, seed: 4, flip_probability: 0.5, ..TrainConfig::default() };
        let run = || {
            let mut m = toy_model();
            let log = train(&mut m, &samples, &cfg).unwrap();
            (log, m.params().clone())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn fixed_batch_loss_decreases_for_ten_steps() {
        let mut model = toy_model();
        let s = toy_sample(3);
        let cfg = TrainConfig { epochs: 11, seed: 1, ..TrainConfig::default() };
        let log = train(&mut model, std::slice::from_ref(&s), &cfg).unwrap();
        let losses = log.losses();
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
    }

    #[test]
    fn checkpoints_are_written_each_epoch() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = toy_model();
        let cfg = TrainConfig { epochs: 2, checkpoint_dir: Some(dir.path().to_path_buf()), ..TrainConfig::default() };
        let log = train(&mut model, &[toy_sample(0)], &cfg).unwrap();
        assert_eq!(log.epochs.len(), 2);
        let mut reloaded = toy_model();
        reloaded.load_weights(dir.path().join("epoch_0001.ckwt"), crate::model::LoadMode::Full).unwrap();
        assert_eq!(reloaded.params(), model.params());
    }

    #[test]
    fn nan_loss_reports_the_step() {
        let mut model = toy_model();
        let mut s = toy_sample(0);
        s.target.data_mut()[0] = f64::NAN;
        let err = train(&mut model, &[s], &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }), "{err}");
    }

    #[test]
    fn mixed_sizes_need_batch_size_one() {
        let mut model = toy_model();
        let a = toy_sample(0);
        let mut b = toy_sample(1);
        b.image = Tensor::zeros(&[1, 3, 64, 32]);
        b.target = Tensor::zeros(&[1, 1, 8, 4]);
        let cfg = TrainConfig { batch_size: 2, ..TrainConfig::default() };
        assert!(train(&mut model, &[a, b], &cfg).is_err());
    }

    #[test]
    fn batches_of_two_train() {
        let mut model = toy_model();
        let cfg = TrainConfig { batch_size: 2, ..TrainConfig::default() };
        let log = train(&mut model, &[toy_sample(0), toy_sample(1)], &cfg).unwrap();
        assert_eq!(log.steps.len(), 1);
    }

    #[test]
    fn training_log_csv() {
        let log = TrainingLog {
            steps: vec![StepRecord { step: 0, epoch: 0, loss: 0.5 }, StepRecord { step: 1, epoch: 0, loss: 1e-7 }],
            epochs: vec![],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss\n0,0.5\n1,1e-7\n");
    }

    #[test]
    fn evaluate_keeps_order() {
        let model = toy_model();
        let samples: Vec<EvalSample> = (0..4)
            .map(|i| EvalSample {
                image_path: format!("img{i}"),
                image: toy_sample(i).image,
                ground_truth: i as f64,
                cv_bucket: None,
                dvi_bucket: None,
            })
            .collect();
        let report = evaluate(&model, &samples).unwrap();
        let paths: Vec<_> = report.images.iter().map(|r| r.image_path.as_str()).collect();
        assert_eq!(paths, ["img0", "img1", "img2", "img3"]);
        assert!(report.mae <= report.mse + 1e-12);
        assert!(evaluate(&model, &[]).is_err());
    }

    proptest! {
        #[test]
        fn mae_never_exceeds_mse(pairs in proptest::collection::vec((0.0f64..500.0, 0.0f64..500.0), 1..50)) {
            let (gt, pred): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let (mae, mse) = count_metrics(&gt, &pred).unwrap();
            prop_assert!(mae <= mse + 1e-9);
        }

        #[test]
        fn loss_is_zero_only_at_equality(a in proptest::collection::vec(-5.0f64..5.0, 4), b in proptest::collection::vec(-5.0f64..5.0, 4)) {
            let l = loss_of(&a, &b, &[4]);
            prop_assert!(l >= 0.0);
            prop_assert_eq!(l == 0.0, a == b);
        }
    }
}
