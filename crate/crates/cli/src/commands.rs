use std::collections::HashMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::Path;

use crowdkit::density::{sum_pool_to, AdaptiveKernel, DensityMap, PointSet};
use crowdkit::fsutil::{write_atomic, write_bytes_atomic};
use crowdkit::ingest::{
    annotation_path, filter_and_split, load_image, prepare_split, read_annotation_file, read_annotations, read_manifest,
    read_points, scan_dataset, write_manifest, write_points, ManifestEntry, Split, MANIFEST_FILE,
};
use crowdkit::model::{LoadMode, ModelConfig, SacaModel};
use crowdkit::stats::{analyze_image, write_summary_csv, CrowdStatsReport, StatsOptions, CV_EDGES, DVI_EDGES};
use crowdkit::synth::{make_samples, write_dataset, SynthConfig};
use crowdkit::train::{evaluate, train, EvalSample, GroundTruthKernel, TrainConfig, TrainingSample};
use crowdkit::{Error, Result};
use log::{info, warn};
use rayon::prelude::*;

use crate::{
    BucketsArgs, Command, ConvertArgs, DensityArgs, EvalArgs, KernelArgs, KernelKind, ModelArgs, RenderArgs, SplitArgs,
    StatsArgs, SynthArgs, TrainArgs,
};

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Convert(a) => convert(a),
        Command::Density(a) => density(a),
        Command::Stats(a) => stats(a),
        Command::Buckets(a) => buckets(a),
        Command::Split(a) => split(a),
        Command::Train(a) => train_cmd(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render(a),
        Command::Synth(a) => synth(a),
    }
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(|e| Error::Format(e.to_string()))?;
        Ok(w.write_all(b"\n")?)
    })
}

fn manifest_entries(root: &Path, manifest: Option<&Path>) -> Result<Vec<ManifestEntry>> {
    let path = manifest.map(Path::to_path_buf).unwrap_or_else(|| root.join(MANIFEST_FILE));
    read_manifest(open(&path)?)
}

impl KernelArgs {
    fn resolve(&self) -> Result<GroundTruthKernel> {
        let kernel = match self.kernel {
            KernelKind::Fixed => GroundTruthKernel::Fixed(self.sigma),
            KernelKind::Adaptive => GroundTruthKernel::Adaptive(AdaptiveKernel {
                beta: self.beta,
                k: self.knn,
                ..AdaptiveKernel::default()
            }),
        };
        // Surface bad settings before any work or output happens.
        let probe = PointSet::new(Vec::new(), 1, 1)?;
        kernel.density(&probe)?;
        if let GroundTruthKernel::Adaptive(k) = kernel {
            k.sigmas(&probe)?;
        }
        Ok(kernel)
    }
}

impl ModelArgs {
    fn resolve(&self, seed: u64) -> Result<ModelConfig> {
        let cfg = match &self.config {
            Some(path) => ModelConfig::from_kv_str(&fs::read_to_string(path)?)?,
            None => ModelConfig {
                channel_scale: self.scale,
                input_channels: self.channels,
                init_scale: self.init_scale,
                ..ModelConfig::default()
            },
        };
        Ok(cfg.with_seed(seed))
    }
}

fn convert(a: ConvertArgs) -> Result<()> {
    let records = read_annotations(open(&a.input)?)?;
    let points = a.mode.convert(&records);
    info!("{} of {} records kept", points.len(), records.len());
    write_atomic(&a.out, |w| write_points(w, &points))
}

fn density(a: DensityArgs) -> Result<()> {
    let kernel = a.kernel.resolve()?;
    if a.pool == 0 {
        return Err(Error::Config("--pool must be at least 1".into()));
    }
    let (height, width) = match (&a.image, a.height, a.width) {
        (Some(path), _, _) => {
            let image = load_image(path)?;
            (image.height(), image.width())
        }
        (None, Some(h), Some(w)) => (h, w),
        _ => return Err(Error::Config("give either --image or both --height and --width".into())),
    };
    let points = PointSet::new(read_points(open(&a.points)?)?, height, width)?;
    let mut map: DensityMap = kernel.density(&points)?;
    if a.pool > 1 {
        if height % a.pool != 0 || width % a.pool != 0 {
            return Err(Error::Config(format!("{height}x{width} is not divisible by --pool {}", a.pool)));
        }
        map = sum_pool_to(&map, height / a.pool, width / a.pool)?;
    }
    info!("{} points, mass {:.6}", points.len(), map.total_mass());
    write_atomic(&a.out, |w| Ok(map.write_ckdm(w)?))
}

fn stats(a: StatsArgs) -> Result<()> {
    let opts = StatsOptions {
        neighbors: a.neighbors,
        clusters: a.clusters,
        restarts: a.restarts,
        seed: a.seed,
        scale_bin_width: a.scale_bin_width,
        distance_bin_width: a.distance_bin_width,
        histogram_bins: a.histogram_bins,
    };
    let images = scan_dataset(&a.root, a.group)?;
    let reports: Vec<CrowdStatsReport> = images
        .par_iter()
        .map(|s| {
            let records = read_annotation_file(&annotation_path(&a.root, &s.image_path))?;
            analyze_image(&s.image_path, a.group, &records, &opts)
        })
        .collect::<Result<_>>()?;
    let flagged = reports.iter().filter(|r| r.dvi_flag.is_some()).count();
    info!("{} images measured, {flagged} without a defined DVI", reports.len());
    let mut csv = Vec::new();
    write_summary_csv(&mut csv, &reports)?;
    write_json(&a.out_json, &reports)?;
    write_bytes_atomic(&a.out_csv, &csv)
}

fn buckets(a: BucketsArgs) -> Result<()> {
    let reports: Vec<CrowdStatsReport> = read_json(&a.stats)?;
    let splits: Option<HashMap<String, Split>> = match &a.manifest {
        Some(path) => Some(
            read_manifest(open(path)?)?
                .into_iter()
                .map(|e| (e.image_path, e.split))
                .collect(),
        ),
        None => None,
    };
    let mut cv: Vec<Vec<ManifestEntry>> = vec![Vec::new(); CV_EDGES.len() + 1];
    let mut dvi: Vec<Vec<ManifestEntry>> = vec![Vec::new(); DVI_EDGES.len() + 1];
    let mut undefined = 0;
    for r in &reports {
        let split = match &splits {
            Some(map) => match map.get(&r.image_path) {
                Some(&s) => s,
                None => continue,
            },
            None => Split::Test,
        };
        let entry = ManifestEntry {
            image_path: r.image_path.clone(),
            split,
            point_count: r.object_count,
        };
        if r.cv_bucket >= cv.len() || r.dvi_bucket.is_some_and(|b| b >= dvi.len()) {
            return Err(Error::Format(format!("{}: bucket index out of range", r.image_path)));
        }
        cv[r.cv_bucket].push(entry.clone());
        match r.dvi_bucket {
            Some(b) => dvi[b].push(entry),
            None => undefined += 1,
        }
    }
    if undefined > 0 {
        warn!("{undefined} images have no DVI bucket and are left out of the dvi manifests");
    }
    fs::create_dir_all(&a.out_dir)?;
    for (kind, groups) in [("cv", &cv), ("dvi", &dvi)] {
        for (b, entries) in groups.iter().enumerate() {
            write_atomic(&a.out_dir.join(format!("{kind}_{b}.csv")), |w| write_manifest(w, entries))?;
            info!("{kind} bucket {b}: {} images", entries.len());
        }
    }
    Ok(())
}

fn split(a: SplitArgs) -> Result<()> {
    let summaries = scan_dataset(&a.root, a.group)?;
    let outcome = filter_and_split(&summaries, a.min_count, a.ratios, a.seed)?;
    info!(
        "{} kept ({} train, {} val, {} test), {} dropped",
        outcome.entries.len(),
        outcome.count(Split::Train),
        outcome.count(Split::Val),
        outcome.count(Split::Test),
        outcome.dropped.len()
    );
    let out = a.out.unwrap_or_else(|| a.root.join(MANIFEST_FILE));
    write_atomic(&out, |w| write_manifest(w, &outcome.entries))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let kernel = a.kernel.resolve()?;
    let model_cfg = a.model.resolve(a.seed)?;
    let mut model = SacaModel::build(model_cfg.clone())?;
    if let Some(path) = &a.weights {
        let mode = if a.stem_only { LoadMode::StemOnly } else { LoadMode::Full };
        model.load_weights(path, mode)?;
    }
    let cfg = TrainConfig {
        epochs: a.epochs,
        batch_size: a.batch_size,
        seed: a.seed,
        learning_rate: a.lr,
        max_steps: a.max_steps,
        flip_probability: a.flip,
        clip_grad_norm: a.clip,
        checkpoint_dir: None,
    };
    // Validate the schedule on an empty run before touching the output directory.
    train(&mut model, &[], &TrainConfig { epochs: 0, ..cfg.clone() })?;

    let entries = manifest_entries(&a.root, a.manifest.as_deref())?;
    let prepared = prepare_split(&a.root, &entries, Some(a.split), a.group, model_cfg.input_channels)?;
    let samples: Vec<TrainingSample> = prepared
        .par_iter()
        .map(|p| TrainingSample::from_prepared(p, kernel))
        .collect::<Result<_>>()?;
    info!("training on {} images, {} parameters", samples.len(), model.params().scalar_count());

    fs::create_dir_all(&a.out_dir)?;
    let log = train(&mut model, &samples, &TrainConfig { checkpoint_dir: Some(a.out_dir.clone()), ..cfg })?;
    write_bytes_atomic(&a.out_dir.join("model.cfg"), model_cfg.to_kv_string().as_bytes())?;
    write_atomic(&a.out_dir.join("model.ckwt"), |w| model.write_weights(w))?;
    write_atomic(&a.out_dir.join("train_log.csv"), |w| log.write_csv(w))?;
    if let Some(last) = log.epochs.last() {
        info!("finished after {} steps, training MAE {:.4}", last.steps, last.train_mae);
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let cfg = ModelConfig::from_kv_str(&fs::read_to_string(&a.config)?)?;
    let mut model = SacaModel::build(cfg.clone())?;
    model.load_weights(&a.weights, LoadMode::Full)?;
    let buckets: HashMap<String, (usize, Option<usize>)> = match &a.stats {
        Some(path) => read_json::<Vec<CrowdStatsReport>>(path)?
            .into_iter()
            .map(|r| (r.image_path, (r.cv_bucket, r.dvi_bucket)))
            .collect(),
        None => HashMap::new(),
    };
    let entries = manifest_entries(&a.root, a.manifest.as_deref())?;
    let prepared = prepare_split(&a.root, &entries, Some(a.split), a.group, cfg.input_channels)?;
    let samples: Vec<EvalSample> = prepared
        .into_iter()
        .map(|p| {
            let (cv_bucket, dvi_bucket) = match buckets.get(&p.image_path) {
                Some(&(c, d)) => (Some(c), d),
                None => (None, None),
            };
            EvalSample {
                image: p.image.to_tensor(),
                ground_truth: p.points.len() as f64,
                image_path: p.image_path,
                cv_bucket,
                dvi_bucket,
            }
        })
        .collect();
    let report = evaluate(&model, &samples)?;
    print!("{}", report.bucket_table());
    write_json(&a.out, &report)
}

fn render(a: RenderArgs) -> Result<()> {
    let map = DensityMap::read_ckdm(open(&a.input)?)?;
    write_bytes_atomic(&a.out, &map.to_pgm())
}

fn synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        count: a.count,
        min_points: a.min_points,
        max_points: a.max_points,
        regime: a.regime,
        seed: a.seed,
        height: a.height,
        width: a.width,
    };
    let samples = make_samples(&cfg)?;
    let entries = write_dataset(&a.out, &samples)?;
    info!("wrote {} {} images to {}", entries.len(), cfg.regime, a.out.display());
    Ok(())
}
