//! Reproducible runs driven by a JSON configuration: the operations behind
//! each command-line subcommand.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::data::io::{assign_splits, load_dataset, save_dataset, save_label_png, Dataset};
use crate::data::phantom::{generate, PhantomSpec};
use crate::data::{batch_images, Sample, Split};
use crate::error::{Error, Result};
use crate::metrics::overlap::class_mask;
use crate::metrics::surface::boundary;
use crate::metrics::{ImageReport, MetricReport, DEFAULT_IOU_THRESHOLD};
use crate::model::{ModelConfig, SegModel};
use crate::pca::pca_rgb;
use crate::train::{ablation_csv, ablation_suite, evaluate, model_for_mode, train, TrainConfig, TrainOutcome};

pub const TRAIN_FRACTION: f64 = 0.7;
pub const VAL_FRACTION: f64 = 0.15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated in memory and split 70/15/15 with the phantom seed.
    Phantom(PhantomSpec),
    /// A dataset directory with its own manifest splits.
    Path(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Phantom(PhantomSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Base model; the ablation mode in `train` selects the variant actually built.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataSource::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// Every field, defaults included.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// The model built for the configured ablation mode.
    pub fn model_config(&self) -> ModelConfig {
        model_for_mode(&self.model, self.train.ablation_mode)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model_config().validate()
    }

    pub fn dataset(&self) -> Result<Dataset> {
        let ds = match &self.data {
            DataSource::Phantom(spec) => Dataset {
                num_classes: spec.regime.num_classes(),
                splits: assign_splits(spec.count, TRAIN_FRACTION, VAL_FRACTION, spec.seed),
                samples: generate(spec),
            },
            DataSource::Path(dir) => load_dataset(dir)?,
        };
        if ds.num_classes != self.model.decoder.num_classes {
            return Err(Error::Config(format!(
                "dataset has {} classes, model decoder has {}",
                ds.num_classes, self.model.decoder.num_classes
            )));
        }
        Ok(ds)
    }
}

fn owned(samples: Vec<&Sample>) -> Vec<Sample> {
    samples.into_iter().cloned().collect()
}

fn non_empty(ds: &Dataset, split: Split) -> Result<Vec<&Sample>> {
    let s = ds.split(split);
    if s.is_empty() {
        return Err(Error::Data(format!("dataset has no {split:?} samples")));
    }
    Ok(s)
}

/// Runs `f` against a fresh staging directory next to `out`, then moves its
/// entries into `out`, replacing same-named entries. On error the staging
/// directory is deleted and `out` is left as it was.
pub fn staged<R>(out: &Path, f: impl FnOnce(&Path) -> Result<R>) -> Result<R> {
    let name = out
        .file_name()
        .ok_or_else(|| Error::Config(format!("output path {} has no final component", out.display())))?;
    let parent = out
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent)?;
    let stage = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
    if stage.exists() {
        fs::remove_dir_all(&stage)?;
    }
    fs::create_dir_all(&stage)?;
    let result = f(&stage).and_then(|r| {
        fs::create_dir_all(out)?;
        for entry in fs::read_dir(&stage)? {
            let entry = entry?;
            let dest = out.join(entry.file_name());
            if dest.is_dir() {
                fs::remove_dir_all(&dest)?;
            } else if dest.exists() {
                fs::remove_file(&dest)?;
            }
            fs::rename(entry.path(), dest)?;
        }
        Ok(r)
    });
    let _ = fs::remove_dir_all(&stage);
    result
}

pub fn generate_data(spec: &PhantomSpec, out: &Path) -> Result<()> {
    let samples = generate(spec);
    let splits = assign_splits(samples.len(), TRAIN_FRACTION, VAL_FRACTION, spec.seed);
    staged(out, |dir| {
        save_dataset(dir, &samples, &splits, spec.regime.num_classes())
    })
}

/// Trains the configured variant; writes `config.json`, `history.csv`,
/// `checkpoints/<step>/` and `best` under the output directory.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let ds = cfg.dataset()?;
    let train_set = owned(non_empty(&ds, Split::Train)?);
    let val_set = owned(non_empty(&ds, Split::Val)?);
    let mut model = SegModel::new(cfg.model_config(), cfg.train.seed)?;
    staged(&cfg.output_dir, |dir| {
        fs::write(dir.join("config.json"), cfg.to_json()?)?;
        train(&mut model, &train_set, &val_set, &cfg.train, Some(dir))
    })
}

/// Resolves a run directory (through its `best` marker) or a checkpoint
/// directory (`config.json` plus tensor files) to the checkpoint itself.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    let marker = path.join("best");
    if marker.is_file() {
        return Ok(path.join(fs::read_to_string(&marker)?.trim()));
    }
    let holds_tensors = fs::read_dir(path).is_ok_and(|entries| {
        entries
            .flatten()
            .any(|e| e.path().extension().is_some_and(|ext| ext == "bin"))
    });
    if holds_tensors && path.join("config.json").is_file() {
        return Ok(path.to_path_buf());
    }
    Err(Error::MissingFile(marker))
}

pub fn load_checkpoint(path: &Path) -> Result<SegModel<f32>> {
    let dir = resolve_checkpoint(path)?;
    let config_path = dir.join("config.json");
    if !config_path.exists() {
        return Err(Error::MissingFile(config_path));
    }
    let config: ModelConfig = serde_json::from_str(&fs::read_to_string(&config_path)?)?;
    let mut model = SegModel::new(config, 0)?;
    model.params.load_values(&dir)?;
    Ok(model)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsFile {
    pub report: MetricReport,
    pub images: Vec<ImageReport>,
}

fn write_metrics(
    dir: &Path,
    images: Vec<ImageReport>,
    predictions: &[(String, usize, usize, Vec<u8>)],
) -> Result<MetricReport> {
    let report = MetricReport::aggregate(&images);
    let mut csv = format!("{}\n", MetricReport::CSV_HEADER);
    for r in &images {
        csv.push_str(&r.csv_row());
        csv.push('\n');
    }
    csv.push_str(&report.csv_row());
    csv.push('\n');
    fs::write(dir.join("metrics.csv"), csv)?;
    let file = MetricsFile {
        report: report.clone(),
        images,
    };
    fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&file)? + "\n")?;
    let pred_dir = dir.join("predictions");
    fs::create_dir_all(&pred_dir)?;
    for (id, h, w, p) in predictions {
        save_label_png(&pred_dir.join(format!("{id}.png")), p, *h, *w)?;
    }
    Ok(report)
}

/// Scores the test split with the checkpoint's predictions. Writes
/// `metrics.json`, `metrics.csv` and `predictions/<id>.png`.
pub fn run_eval(cfg: &RunConfig, checkpoint: &Path, out: &Path) -> Result<MetricReport> {
    let model = load_checkpoint(checkpoint)?;
    let ds = cfg.dataset()?;
    let test = non_empty(&ds, Split::Test)?;
    let eval = evaluate(&model, &test, cfg.train.batch_size, DEFAULT_IOU_THRESHOLD)?;
    let preds: Vec<_> = test
        .iter()
        .zip(eval.predictions)
        .map(|(s, p)| (s.id.clone(), s.height, s.width, p))
        .collect();
    staged(out, |dir| write_metrics(dir, eval.images, &preds))
}

/// Scores stored prediction label maps (`<dir>/<id>.png`) against the test split.
pub fn run_eval_predictions(cfg: &RunConfig, predictions: &Path, out: &Path) -> Result<MetricReport> {
    let ds = cfg.dataset()?;
    let test = non_empty(&ds, Split::Test)?;
    let mut images = Vec::with_capacity(test.len());
    let mut preds = Vec::with_capacity(test.len());
    for s in test {
        let path = predictions.join(format!("{}.png", s.id));
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let p = image::open(&path)?.into_luma8();
        if p.dimensions() != (s.width as u32, s.height as u32) {
            return Err(Error::Data(format!(
                "prediction {} has size {:?}",
                path.display(),
                p.dimensions()
            )));
        }
        let p = p.into_raw();
        let probe = Sample::new(s.id.clone(), s.height, s.width, vec![0.0; p.len()], p.clone())?;
        probe.validate_classes(ds.num_classes)?;
        images.push(crate::metrics::evaluate_image(
            &s.id,
            &p,
            &s.label,
            (s.height, s.width),
            ds.num_classes,
            DEFAULT_IOU_THRESHOLD,
        ));
        preds.push((s.id.clone(), s.height, s.width, p));
    }
    staged(out, |dir| write_metrics(dir, images, &preds))
}

pub const BENCH_WARMUP_ITERS: usize = 20;
pub const BENCH_TIMED_ITERS: usize = 100;
pub const BENCH_SIZE: usize = 224;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_ms: f64,
    pub std_ms: f64,
    /// `1000 / mean_ms`, rounded to three decimals.
    pub fps: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub warmup_iters: usize,
    pub timed_iters: usize,
    pub input_shape: Vec<usize>,
    pub mode: String,
    pub device_note: String,
    /// Wall-clock results; everything outside this object is deterministic.
    pub timing: Timing,
}

pub fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Times single-image forward passes at 224×224 with untrained weights.
pub fn run_bench(cfg: &RunConfig, device_note: &str, timed_iters: usize, out: &Path) -> Result<BenchReport> {
    if timed_iters < BENCH_TIMED_ITERS {
        return Err(Error::Config(format!(
            "at least {BENCH_TIMED_ITERS} timed iterations required"
        )));
    }
    cfg.validate()?;
    let model = SegModel::new(cfg.model_config(), cfg.train.seed)?;
    let spec = PhantomSpec {
        seed: cfg.train.seed,
        count: 1,
        size: BENCH_SIZE,
        ..PhantomSpec::default()
    };
    let sample = generate(&spec).remove(0);
    let input = batch_images(&[&sample])?;
    for _ in 0..BENCH_WARMUP_ITERS {
        std::hint::black_box(model.infer(&input)?);
    }
    let mut times = Vec::with_capacity(timed_iters);
    for _ in 0..timed_iters {
        let t = Instant::now();
        std::hint::black_box(model.infer(&input)?);
        times.push(t.elapsed().as_secs_f64() * 1000.0);
    }
    let n = times.len() as f64;
    let mean_ms = times.iter().sum::<f64>() / n;
    let std_ms = (times.iter().map(|t| (t - mean_ms).powi(2)).sum::<f64>() / n).sqrt();
    let report = BenchReport {
        warmup_iters: BENCH_WARMUP_ITERS,
        timed_iters,
        input_shape: input.shape().to_vec(),
        mode: cfg.train.ablation_mode.to_string(),
        device_note: device_note.to_string(),
        timing: Timing {
            mean_ms,
            std_ms,
            fps: round3(1000.0 / mean_ms),
        },
    };
    staged(out, |dir| {
        fs::write(dir.join("bench.json"), serde_json::to_string_pretty(&report)? + "\n")?;
        Ok(())
    })?;
    Ok(report)
}

/// Trains and scores the five ablation rows; writes `ablation.csv`.
pub fn run_ablate(cfg: &RunConfig, out: &Path) -> Result<String> {
    cfg.train.validate()?;
    let ds = cfg.dataset()?;
    let train_set = owned(non_empty(&ds, Split::Train)?);
    let val_set = owned(non_empty(&ds, Split::Val)?);
    let test_set = owned(non_empty(&ds, Split::Test)?);
    let rows = ablation_suite(&cfg.model, &cfg.train, &train_set, &val_set, &test_set)?;
    let csv = ablation_csv(&rows);
    staged(out, |dir| Ok(fs::write(dir.join("ablation.csv"), &csv)?))?;
    Ok(csv)
}

const CONTOUR: Rgb<u8> = Rgb([255, 255, 255]);

/// PCA of the finest fused feature map of each test image, upsampled to the
/// image size by pixel replication, with the ground-truth outline drawn on
/// top. Writes `pca/<id>.png`; returns the ids whose PCA was degenerate.
pub fn run_visualize_pca(cfg: &RunConfig, checkpoint: Option<&Path>, out: &Path) -> Result<Vec<String>> {
    let model = match checkpoint {
        Some(c) => load_checkpoint(c)?,
        None => {
            cfg.validate()?;
            SegModel::new(cfg.model_config(), cfg.train.seed)?
        }
    };
    let ds = cfg.dataset()?;
    let test = non_empty(&ds, Split::Test)?;
    let mut images = Vec::with_capacity(test.len());
    let mut degenerate = Vec::new();
    for s in &test {
        let mut tape = crate::autodiff::Tape::new();
        let x = tape.constant(batch_images(&[s])?)?;
        let parts = model.forward_parts(&mut tape, x)?;
        let pca = pca_rgb(tape.value(parts.fused.levels[0]))?;
        if pca.warning() {
            degenerate.push(s.id.clone());
        }
        let (fh, fw) = (pca.rgb.shape()[1], pca.rgb.shape()[2]);
        let rgb = pca.rgb.data();
        let mut img = RgbImage::from_fn(s.width as u32, s.height as u32, |x, y| {
            let (fy, fx) = (y as usize * fh / s.height, x as usize * fw / s.width);
            let at = (fy * fw + fx) * 3;
            Rgb([0, 1, 2].map(|k| (255.0 * rgb[at + k]).round().clamp(0.0, 255.0) as u8))
        });
        for c in 1..ds.num_classes {
            let edge = boundary(&class_mask(&s.label, c), s.height, s.width);
            for (i, _) in edge.iter().enumerate().filter(|(_, &e)| e) {
                img.put_pixel((i % s.width) as u32, (i / s.width) as u32, CONTOUR);
            }
        }
        images.push((s.id.clone(), img));
    }
    staged(out, |dir| {
        let pca_dir = dir.join("pca");
        fs::create_dir_all(&pca_dir)?;
        for (id, img) in &images {
            img.save(pca_dir.join(format!("{id}.png")))?;
        }
        Ok(())
    })?;
    Ok(degenerate)
}
