//! One function per subcommand. Every command validates the config before doing work and
//! writes plain CSV/JSONL that depends only on the config and seed.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use replica_core::autoencoder::{train_overfit, AutoEncoder, TrainStatus};
use replica_core::data::{load_samples, make_dataset, write_atomic, ImageSample, Split};
use replica_core::detector::{train_detector, Detection, Detector};
use replica_core::eval::{evaluate, EvalReport, GroundTruth};
use replica_core::gradsuite::{run_suite, suite_csv};
use replica_core::tensor::{load_checkpoint, save_checkpoint, Rng};
use replica_core::translator::augment_dataset;

use crate::config::RunConfig;
use crate::error::CliError;

/// Rng streams split from the run seed, one per stage.
const AE_STREAM: u64 = 1;
const TRANSLATE_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arm {
    Baseline,
    Translation,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::Translation => "translation",
        }
    }
}

/// Artifact locations under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(cfg: &RunConfig) -> Self {
        Layout {
            root: cfg.output_dir.clone(),
        }
    }

    pub fn data_manifest(&self) -> PathBuf {
        self.root.join("data/manifest.jsonl")
    }

    pub fn ae_dir(&self) -> PathBuf {
        self.root.join("autoencoder")
    }

    pub fn ae_checkpoint(&self) -> PathBuf {
        self.ae_dir().join("autoencoder.ckpt")
    }

    pub fn translate_dir(&self) -> PathBuf {
        self.root.join("translate")
    }

    pub fn detector_dir(&self, arm: Arm) -> PathBuf {
        self.root.join(format!("detector-{}", arm.name()))
    }

    pub fn detector_checkpoint(&self, arm: Arm) -> PathBuf {
        self.detector_dir(arm).join("detector.ckpt")
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    Ok(write_atomic(path, text.as_bytes())?)
}

fn require(path: &Path, hint: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(CliError::Io(format!(
            "{} not found; run `{hint}` first",
            path.display()
        )))
    }
}

fn load_data(layout: &Layout) -> Result<Vec<ImageSample>, CliError> {
    let manifest = layout.data_manifest();
    require(&manifest, "synth")?;
    Ok(load_samples(&manifest)?)
}

fn split_of(samples: &[ImageSample], split: Split) -> Vec<ImageSample> {
    samples
        .iter()
        .filter(|s| s.split == split)
        .cloned()
        .collect()
}

pub fn synth(cfg: &RunConfig) -> Result<String, CliError> {
    let layout = Layout::new(cfg);
    let records = make_dataset(&cfg.data.spec(cfg.seed), &layout.root.join("data"))?;
    let mut out = String::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let of = |tumor: bool| {
            records
                .iter()
                .filter(|r| r.split == split && r.boxes.is_empty() != tumor)
                .count()
        };
        writeln!(out, "{split}: {} tumor, {} normal", of(true), of(false)).expect("string");
    }
    Ok(out)
}

/// Half tumors, half normals from the train split, filling from the other kind when short.
fn ae_training_set(samples: &[ImageSample], n: usize) -> Vec<ImageSample> {
    let train = split_of(samples, Split::Train);
    let (tumors, normals): (Vec<_>, Vec<_>) = train.into_iter().partition(|s| !s.boxes.is_empty());
    let want_t = (n / 2).min(tumors.len());
    let want_n = (n - want_t).min(normals.len());
    let want_t = (n - want_n).min(tumors.len());
    tumors
        .into_iter()
        .take(want_t)
        .chain(normals.into_iter().take(want_n))
        .collect()
}

pub fn train_ae(cfg: &RunConfig) -> Result<String, CliError> {
    let layout = Layout::new(cfg);
    let samples = load_data(&layout)?;
    let images = ae_training_set(&samples, cfg.autoencoder.train_images);
    let mut rng = Rng::new(cfg.seed).split(AE_STREAM);
    let out = train_overfit(&images, &cfg.autoencoder.model, &mut rng)?;
    save_checkpoint(&out.model.params, &layout.ae_checkpoint())?;
    write_text(&layout.ae_dir().join("loss.csv"), &out.curve_csv())?;
    let summary = format!(
        "autoencoder: {} images, {} steps, final L1 {:.6}",
        images.len(),
        out.steps,
        out.final_loss
    );
    match out.status {
        TrainStatus::Converged => Ok(summary),
        TrainStatus::NotConverged => Err(CliError::NonConvergence(format!(
            "{summary}, above the {} threshold after max_steps",
            cfg.autoencoder.model.loss_threshold
        ))),
    }
}

fn load_autoencoder(cfg: &RunConfig, layout: &Layout) -> Result<AutoEncoder, CliError> {
    let ckpt = layout.ae_checkpoint();
    require(&ckpt, "train-ae")?;
    let store = load_checkpoint(&ckpt)?;
    Ok(AutoEncoder::from_params(
        cfg.autoencoder.model.clone(),
        &store,
    )?)
}

/// Table-2 style counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Totals {
    pub originals: usize,
    pub translated: usize,
}

impl Totals {
    pub fn csv(&self) -> String {
        format!(
            "originals,translated,total\n{},{},{}\n",
            self.originals,
            self.translated,
            self.originals + self.translated
        )
    }

    pub fn line(&self) -> String {
        format!(
            "{} originals, {} translated, {} total",
            self.originals,
            self.translated,
            self.originals + self.translated
        )
    }
}

/// Translates every train-split tumor into `per_tumor` train-split normals and writes the
/// result under `dir`.
pub fn translate_into(
    cfg: &RunConfig,
    seed: u64,
    samples: &[ImageSample],
    model: &AutoEncoder,
    dir: &Path,
) -> Result<Totals, CliError> {
    let train = split_of(samples, Split::Train);
    let (tumors, normals): (Vec<_>, Vec<_>) = train.into_iter().partition(|s| !s.boxes.is_empty());
    let spec = cfg.translate.mask_for(cfg.data.height, cfg.data.width);
    let aug = augment_dataset(
        &tumors,
        &normals,
        cfg.translate.per_tumor,
        model,
        &cfg.schedule()?,
        &spec,
        &Rng::new(seed).split(TRANSLATE_STREAM),
    )?;
    aug.write(dir)?;
    let totals = Totals {
        originals: tumors.len(),
        translated: aug.samples.len(),
    };
    write_text(&dir.join("totals.csv"), &totals.csv())?;
    Ok(totals)
}

pub fn translate(cfg: &RunConfig) -> Result<String, CliError> {
    let layout = Layout::new(cfg);
    let samples = load_data(&layout)?;
    let model = load_autoencoder(cfg, &layout)?;
    let totals = translate_into(cfg, cfg.seed, &samples, &model, &layout.translate_dir())?;
    Ok(totals.line())
}

/// Train split, plus the translated images of `translated` when given.
fn detector_training_set(
    samples: &[ImageSample],
    translated: Option<&Path>,
) -> Result<Vec<ImageSample>, CliError> {
    let mut train = split_of(samples, Split::Train);
    if let Some(dir) = translated {
        let manifest = dir.join("manifest.jsonl");
        require(&manifest, "translate")?;
        train.extend(load_samples(&manifest)?);
    }
    Ok(train)
}

fn fit_detector(
    cfg: &RunConfig,
    seed: u64,
    train: &[ImageSample],
    dir: &Path,
) -> Result<Detector, CliError> {
    let out = train_detector(train, &cfg.detector_config(seed))?;
    save_checkpoint(&out.model.params, &dir.join("detector.ckpt"))?;
    write_text(&dir.join("loss.csv"), &out.curve_csv())?;
    Ok(out.model)
}

pub fn train_det(cfg: &RunConfig, arm: Arm) -> Result<String, CliError> {
    let layout = Layout::new(cfg);
    let samples = load_data(&layout)?;
    let translated = layout.translate_dir();
    let train = detector_training_set(
        &samples,
        (arm == Arm::Translation).then_some(translated.as_path()),
    )?;
    fit_detector(cfg, cfg.seed, &train, &layout.detector_dir(arm))?;
    Ok(format!(
        "detector ({}): trained on {} images for {} steps",
        arm.name(),
        train.len(),
        cfg.detector.steps
    ))
}

fn detect_split(model: &Detector, samples: &[ImageSample]) -> Result<Vec<Detection>, CliError> {
    let mut dets = Vec::new();
    for s in samples {
        dets.extend(model.infer(s)?);
    }
    Ok(dets)
}

fn detections_jsonl(dets: &[Detection]) -> Result<String, CliError> {
    let mut s = String::new();
    for d in dets {
        s.push_str(&serde_json::to_string(d).map_err(|e| CliError::Failed(e.to_string()))?);
        s.push('\n');
    }
    Ok(s)
}

pub fn infer(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: Split,
    out: Option<&Path>,
) -> Result<String, CliError> {
    let layout = Layout::new(cfg);
    let samples = load_data(&layout)?;
    require(checkpoint, "train-det")?;
    let store = load_checkpoint(checkpoint)?;
    let model = Detector::from_params(cfg.detector_config(cfg.seed), &store)?;
    let dets = detect_split(&model, &split_of(&samples, split))?;
    let path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| layout.root.join(format!("detections-{split}.jsonl")));
    write_text(&path, &detections_jsonl(&dets)?)?;
    Ok(format!(
        "{} detections written to {}",
        dets.len(),
        path.display()
    ))
}

fn read_detections(path: &Path) -> Result<Vec<Detection>, CliError> {
    let f = fs::File::open(path)
        .map_err(|e| CliError::Io(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CliError::Io(format!("{} line {}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

fn ground_truths(samples: &[ImageSample]) -> Vec<GroundTruth> {
    samples
        .iter()
        .flat_map(|s| {
            s.boxes.iter().map(|b| GroundTruth {
                image_id: s.id.clone(),
                bbox: *b,
            })
        })
        .collect()
}

fn write_report(report: &EvalReport, dir: &Path) -> Result<(), CliError> {
    write_text(&dir.join("metrics.csv"), &report.metrics_csv())?;
    for c in &report.curves {
        let name = format!("pr_iou{:02}.csv", (c.iou_thresh * 100.0).round() as u32);
        write_text(&dir.join(name), &c.to_csv())?;
    }
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    detections: &Path,
    split: Split,
    out: Option<&Path>,
) -> Result<String, CliError> {
    let layout = Layout::new(cfg);
    let samples = load_data(&layout)?;
    let dets = read_detections(detections)?;
    let report = evaluate(&dets, &ground_truths(&split_of(&samples, split)));
    let dir = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| layout.root.join(format!("eval-{split}")));
    write_report(&report, &dir)?;
    Ok(report.metrics_csv())
}

pub fn gradcheck(cfg: &RunConfig) -> Result<String, CliError> {
    let layout = Layout::new(cfg);
    let rows = run_suite(&cfg.detector, cfg.seed)?;
    let table = suite_csv(&rows);
    write_text(&layout.root.join("gradcheck.csv"), &table)?;
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.name.as_str())
        .collect();
    if failed.is_empty() {
        Ok(table)
    } else {
        Err(CliError::Acceptance(format!(
            "gradient check above tolerance for {}\n{table}",
            failed.join(", ")
        )))
    }
}

/// Metric values of one run, `None` where the metric is absent.
pub type MetricRow = [Option<f64>; 5];

/// Mean and sample variance (n - 1 denominator) of each metric over runs where it is present.
pub fn summarize(rows: &[MetricRow]) -> (MetricRow, MetricRow) {
    let mut mean = [None; 5];
    let mut var = [None; 5];
    for k in 0..5 {
        let vals: Vec<f64> = rows.iter().filter_map(|r| r[k]).collect();
        if vals.is_empty() {
            continue;
        }
        let n = vals.len() as f64;
        let m = vals.iter().sum::<f64>() / n;
        mean[k] = Some(m);
        if vals.len() > 1 {
            var[k] = Some(vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0));
        }
    }
    (mean, var)
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn fmt_row(arm: &str, run: &str, row: &MetricRow) -> String {
    let mut s = format!("{arm},{run}");
    for v in row {
        match v {
            Some(v) => write!(s, ",{v:.6}"),
            None => write!(s, ",NA"),
        }
        .expect("string");
    }
    s.push('\n');
    s
}

#[derive(Clone, Debug)]
pub struct AbResult {
    pub csv: String,
    pub baseline: Vec<MetricRow>,
    pub translation: Vec<MetricRow>,
}

impl AbResult {
    /// Median val AP50 of each arm: (baseline, translation).
    pub fn median_ap50(&self) -> (Option<f64>, Option<f64>) {
        let ap50 =
            |rows: &[MetricRow]| median(&rows.iter().filter_map(|r| r[1]).collect::<Vec<_>>());
        (ap50(&self.baseline), ap50(&self.translation))
    }
}

/// Baseline versus translation-augmented detector training, one pair of runs per seed, both
/// evaluated on the val split. Needs `synth` and `train-ae` outputs.
pub fn ab(cfg: &RunConfig, seeds: &[u64]) -> Result<AbResult, CliError> {
    if seeds.is_empty() {
        return Err(CliError::Config("ab needs at least one seed".into()));
    }
    let layout = Layout::new(cfg);
    let samples = load_data(&layout)?;
    let model = load_autoencoder(cfg, &layout)?;
    let val = split_of(&samples, Split::Val);
    let gts = ground_truths(&val);
    let mut baseline = Vec::new();
    let mut translation = Vec::new();
    for &seed in seeds {
        let dir = layout.root.join(format!("ab/seed{seed}"));
        let tdir = dir.join("translate");
        translate_into(cfg, seed, &samples, &model, &tdir)?;
        for (arm, rows) in [
            (Arm::Baseline, &mut baseline),
            (Arm::Translation, &mut translation),
        ] {
            let train = detector_training_set(
                &samples,
                (arm == Arm::Translation).then_some(tdir.as_path()),
            )?;
            let adir = dir.join(arm.name());
            let det = fit_detector(cfg, seed, &train, &adir)?;
            let report = evaluate(&detect_split(&det, &val)?, &gts);
            write_report(&report, &adir.join("eval-val"))?;
            let m = report.metrics();
            log::info!("ab seed {seed} {}: AP50 {:?}", arm.name(), m[1].1);
            rows.push(m.map(|(_, v)| v));
        }
    }
    let mut csv = String::from("arm,run,AP,AP50,AP75,APm,APl\n");
    for (arm, rows) in [(Arm::Baseline, &baseline), (Arm::Translation, &translation)] {
        for (seed, r) in seeds.iter().zip(rows) {
            csv.push_str(&fmt_row(arm.name(), &format!("seed{seed}"), r));
        }
        let (mean, var) = summarize(rows);
        csv.push_str(&fmt_row(arm.name(), "mean", &mean));
        csv.push_str(&fmt_row(arm.name(), "variance", &var));
    }
    write_text(&layout.root.join("ab/ab.csv"), &csv)?;
    Ok(AbResult {
        csv,
        baseline,
        translation,
    })
}
