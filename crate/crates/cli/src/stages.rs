//! One function per pipeline stage. Every stage reads the artifacts of the
//! previous one from disk, so running them one by one gives the same files
//! as `pipeline`.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use lvseg_core::dataset::{self, load_manifest, Dataset, Manifest};
use lvseg_core::fcn::{self, weights, Architecture, NetworkParams, Placement, ProbabilityMap};
use lvseg_core::metrics::{ablation_report, AblationTable, ConfusionCounts};
use lvseg_core::pipeline::{self, frame_counts, frame_id, placement_for, training_samples};
use lvseg_core::pnm::Pnm;
use lvseg_core::postproc;
use lvseg_core::roi::{self, RoiBox};

use crate::config::PipelineConfig;
use crate::overlays::render_overlays;

/// Stored samples of preprocessed frames and probability maps are values
/// in `[0, 1]` times this.
pub const UNIT_SCALE: f64 = 65535.0;

/// Artifact locations inside a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub out: PathBuf,
}

impl Layout {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into() }
    }

    pub fn preprocessed(&self) -> PathBuf {
        self.out.join("preprocessed")
    }

    pub fn roi_file(&self) -> PathBuf {
        self.out.join("roi.json")
    }

    pub fn split_file(&self) -> PathBuf {
        self.out.join("split.json")
    }

    pub fn model(&self) -> PathBuf {
        self.out.join("model.fcnw")
    }

    pub fn train_log(&self) -> PathBuf {
        self.out.join("train_log.json")
    }

    pub fn prob_dir(&self) -> PathBuf {
        self.out.join("prob")
    }

    pub fn raw_dir(&self) -> PathBuf {
        self.out.join("raw")
    }

    pub fn pred_dir(&self) -> PathBuf {
        self.out.join("pred")
    }

    pub fn overlays(&self) -> PathBuf {
        self.out.join("overlays")
    }

    pub fn postprocess_log(&self) -> PathBuf {
        self.out.join("postprocess.json")
    }

    pub fn report_csv(&self) -> PathBuf {
        self.out.join("report.csv")
    }

    pub fn report_json(&self) -> PathBuf {
        self.out.join("report.json")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

/// Removes a stage's previous output so stale files never survive a rerun.
fn fresh_dir(path: &Path) -> Result<()> {
    if path.exists() {
        fs::remove_dir_all(path).with_context(|| format!("removing {}", path.display()))?;
    }
    create_dir(path)
}

pub fn mask_name(frame: usize) -> String {
    format!("mask_{frame:03}.pgm")
}

pub fn prob_name(frame: usize) -> String {
    format!("prob_{frame:03}.pgm")
}

/// Writes a phantom corpus to `out`.
pub fn synth(cfg: &PipelineConfig, out: &Path) -> Result<Manifest> {
    info!(
        "synthesizing {} phantom sequences into {}",
        cfg.synth.count,
        out.display()
    );
    Ok(dataset::write_corpus(
        out,
        &cfg.synth.phantom,
        cfg.synth.count,
        cfg.seed,
    )?)
}

/// Clips and scales every frame, storing the result as a 16-bit dataset.
pub fn preprocess(cfg: &PipelineConfig, input: &Path, layout: &Layout) -> Result<()> {
    let ds = load_manifest(input)?;
    let dir = layout.preprocessed();
    fresh_dir(&dir)?;
    info!("preprocessing {} sequences", ds.len());
    let entries = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let seq = ds.load_sequence(i)?;
            let pre = pipeline::preprocess(&seq, &cfg.preprocess)?;
            Ok(dataset::write_sequence(
                &dir,
                &pre,
                &ds.entry(i).patient_id,
                Some(UNIT_SCALE),
            )?)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut manifest = Manifest::new(Some(UNIT_SCALE));
    manifest.sequences = entries;
    manifest.save(&dir)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RoiRecord {
    pub sequence_id: String,
    pub roi: RoiBox,
    /// The box is the full frame because no salient motion was found.
    pub fallback: bool,
    pub saliency_iterations: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct RoiFile {
    pub sequences: Vec<RoiRecord>,
}

impl RoiFile {
    pub fn get(&self, sequence_id: &str) -> Result<&RoiRecord> {
        self.sequences
            .iter()
            .find(|r| r.sequence_id == sequence_id)
            .with_context(|| format!("no ROI recorded for sequence `{sequence_id}`"))
    }
}

/// Locates the ROI of every preprocessed sequence.
pub fn roi(cfg: &PipelineConfig, preprocessed: &Path, layout: &Layout) -> Result<RoiFile> {
    let ds = load_manifest(preprocessed)?;
    info!("locating ROIs for {} sequences", ds.len());
    let sequences = (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let seq = ds.load_sequence(i)?;
            let (roi, fallback, _, saliency) = roi::locate_roi(&seq, &cfg.roi)?;
            Ok(RoiRecord {
                sequence_id: seq.sequence_id,
                roi,
                fallback,
                saliency_iterations: saliency.map(|s| s.iterations),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let file = RoiFile { sequences };
    create_dir(&layout.out)?;
    write_json(&layout.roi_file(), &file)?;
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct SplitFile {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// The train/test partition of a dataset's sequences for this config.
pub fn split_for(cfg: &PipelineConfig, ds: &Dataset) -> Result<SplitFile> {
    let ids: Vec<String> = ds.manifest.sequences.iter().map(|e| e.sequence_id.clone()).collect();
    Ok(match cfg.split.train_frac {
        Some(f) => {
            let (train, test) = dataset::split(&ids, f, cfg.seed)?;
            SplitFile { train, test }
        }
        None => SplitFile {
            train: ids.clone(),
            test: ids,
        },
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainLog {
    pub sequences: usize,
    pub samples: usize,
    pub class_weights: [f64; 2],
    pub epoch_losses: Vec<f64>,
}

fn load_params(cfg: &PipelineConfig, model: &Path) -> Result<NetworkParams> {
    let arch = Architecture::mini_fcn8s(cfg.fcn.input_size)?;
    weights::load(model, arch).with_context(|| format!("loading model {}", model.display()))
}

/// Trains on the training side of the split and saves the weights.
pub fn train(cfg: &PipelineConfig, preprocessed: &Path, layout: &Layout, model: &Path) -> Result<TrainLog> {
    let ds = load_manifest(preprocessed)?;
    let rois: RoiFile = read_json(&layout.roi_file())?;
    let split = split_for(cfg, &ds)?;
    create_dir(&layout.out)?;
    write_json(&layout.split_file(), &split)?;
    let per_seq = split
        .train
        .par_iter()
        .map(|id| {
            let i = ds.find(id).with_context(|| format!("sequence `{id}` not in dataset"))?;
            let seq = ds.load_sequence(i)?;
            let placement = placement_for(&rois.get(id)?.roi, seq.dims(), &cfg.fcn)?;
            Ok(training_samples(&seq, &placement, cfg.fcn.frame_stride)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let samples: Vec<_> = per_seq.into_iter().flatten().collect();
    if samples.is_empty() {
        bail!("no annotated frames to train on");
    }
    info!(
        "training on {} samples from {} sequences",
        samples.len(),
        split.train.len()
    );
    let arch = Architecture::mini_fcn8s(cfg.fcn.input_size)?;
    let outcome = fcn::train(&samples, arch, &cfg.fcn.train)?;
    if let Some(parent) = model.parent() {
        create_dir(parent)?;
    }
    weights::save(&outcome.params, model)?;
    let log = TrainLog {
        sequences: split.train.len(),
        samples: samples.len(),
        class_weights: outcome.class_weights,
        epoch_losses: outcome.epoch_losses,
    };
    write_json(&layout.train_log(), &log)?;
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ProbSidecar {
    /// Stored sample = probability times this.
    pub scale: f64,
    pub placement: Placement,
    pub frames: usize,
}

pub const SIDECAR: &str = "placement.json";

/// Probability maps for the test side of the split.
pub fn infer(cfg: &PipelineConfig, preprocessed: &Path, layout: &Layout, model: &Path) -> Result<()> {
    let ds = load_manifest(preprocessed)?;
    let rois: RoiFile = read_json(&layout.roi_file())?;
    let split = split_for(cfg, &ds)?;
    let params = load_params(cfg, model)?;
    let root = layout.prob_dir();
    fresh_dir(&root)?;
    info!("inferring {} sequences", split.test.len());
    for id in &split.test {
        let i = ds.find(id).with_context(|| format!("sequence `{id}` not in dataset"))?;
        let seq = ds.load_sequence(i)?;
        let placement = placement_for(&rois.get(id)?.roi, seq.dims(), &cfg.fcn)?;
        let probs = fcn::infer(&params, seq.frames(), &placement)?;
        let dir = root.join(id);
        create_dir(&dir)?;
        for (k, p) in probs.iter().enumerate() {
            Pnm::from_unit_map(&p.to_image(), UNIT_SCALE)?.write(&dir.join(prob_name(k)))?;
        }
        write_json(
            &dir.join(SIDECAR),
            &ProbSidecar {
                scale: UNIT_SCALE,
                placement,
                frames: probs.len(),
            },
        )?;
    }
    Ok(())
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<String>> {
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    Ok(names)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct PostprocessRecord {
    pub frame: String,
    pub otsu_threshold: f64,
    pub otsu_degenerate: bool,
    pub empty: bool,
}

/// Raw and post-processed masks plus overlays for every inferred sequence.
pub fn postprocess(cfg: &PipelineConfig, preprocessed: &Path, layout: &Layout) -> Result<Vec<PostprocessRecord>> {
    let ds = load_manifest(preprocessed)?;
    let rois: RoiFile = read_json(&layout.roi_file())?;
    let (raw_root, pred_root, ov_root) = (layout.raw_dir(), layout.pred_dir(), layout.overlays());
    for d in [&raw_root, &pred_root, &ov_root] {
        fresh_dir(d)?;
    }
    let mut records = Vec::new();
    for id in sorted_subdirs(&layout.prob_dir())? {
        let prob_dir = layout.prob_dir().join(&id);
        let side: ProbSidecar = read_json(&prob_dir.join(SIDECAR))?;
        let i = ds
            .find(&id)
            .with_context(|| format!("sequence `{id}` not in dataset"))?;
        let seq = ds.load_sequence(i)?;
        if seq.len() != side.frames {
            bail!(
                "sequence `{id}`: {} frames but {} probability maps",
                seq.len(),
                side.frames
            );
        }
        let roi = rois.get(&id)?.roi;
        let (raw_dir, pred_dir, ov_dir) = (raw_root.join(&id), pred_root.join(&id), ov_root.join(&id));
        for d in [&raw_dir, &pred_dir, &ov_dir] {
            create_dir(d)?;
        }
        let results = (0..side.frames)
            .into_par_iter()
            .map(|k| {
                let path = prob_dir.join(prob_name(k));
                let img = Pnm::read(&path)?.to_image()?.map(|v| v / side.scale)?;
                let prob = ProbabilityMap::from_image(&img).with_context(|| format!("reading {}", path.display()))?;
                let raw = pipeline::raw_mask(&prob, &side.placement)?;
                let post = postproc::postprocess(&prob, &side.placement, &cfg.postproc)?;
                Pnm::from_mask(&raw).write(&raw_dir.join(mask_name(k)))?;
                Pnm::from_mask(&post.frame_mask).write(&pred_dir.join(mask_name(k)))?;
                render_overlays(&seq.frames()[k], &roi, &prob, &post.frame_mask, seq.mask(k))?.write(&ov_dir, k)?;
                Ok(PostprocessRecord {
                    frame: frame_id(&id, k),
                    otsu_threshold: post.otsu.threshold,
                    otsu_degenerate: post.otsu.degenerate,
                    empty: post.empty,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        records.extend(results);
    }
    write_json(&layout.postprocess_log(), &records)?;
    Ok(records)
}

/// Per-frame counts of one run directory (`<sequenceId>/mask_###.pgm`)
/// against the ground truth of `gt`.
pub fn run_counts(
    cfg: &PipelineConfig,
    gt: &Dataset,
    run_dir: &Path,
    rois: Option<&RoiFile>,
) -> Result<Vec<(String, ConfusionCounts)>> {
    let mut out = Vec::new();
    for id in sorted_subdirs(run_dir)? {
        let i = gt
            .find(&id)
            .with_context(|| format!("sequence `{id}` not in the ground-truth dataset"))?;
        let seq = gt.load_sequence(i)?;
        let roi = match rois {
            Some(r) => r.get(&id)?.roi,
            None => RoiBox::full_frame(seq.dims().0, seq.dims().1),
        };
        for k in 0..seq.len() {
            let Some(truth) = seq.mask(k) else { continue };
            let path = run_dir.join(&id).join(mask_name(k));
            if !path.exists() {
                bail!("missing prediction {}", path.display());
            }
            let pred = Pnm::read(&path)?.to_mask()?;
            let counts = frame_counts(&pred, truth, cfg.metrics.region, &roi)
                .with_context(|| format!("scoring {}", path.display()))?;
            out.push((frame_id(&id, k), counts));
        }
    }
    if out.is_empty() {
        bail!("{} holds no scorable frames", run_dir.display());
    }
    Ok(out)
}

/// Scores one or more runs and writes `report.csv` and `report.json`.
pub fn eval(
    cfg: &PipelineConfig,
    gt_dataset: &Path,
    runs: &[(String, PathBuf)],
    layout: &Layout,
) -> Result<AblationTable> {
    if runs.is_empty() {
        bail!("no runs to evaluate");
    }
    let gt = load_manifest(gt_dataset)?;
    let rois = match cfg.metrics.region {
        lvseg_core::metrics::EvalRegion::FullFrame => None,
        lvseg_core::metrics::EvalRegion::Roi => Some(read_json::<RoiFile>(&layout.roi_file())?),
    };
    let per_run = runs
        .iter()
        .map(|(label, dir)| Ok((label.clone(), run_counts(cfg, &gt, dir, rois.as_ref())?)))
        .collect::<Result<Vec<_>>>()?;
    let table = ablation_report(&per_run)?;
    create_dir(&layout.out)?;
    fs::write(layout.report_csv(), table.to_csv()).context("writing report.csv")?;
    fs::write(layout.report_json(), table.to_json()).context("writing report.json")?;
    for r in &table.rows {
        info!("{}: dice {:.4} over {} frames", r.config, r.dice, r.frames);
    }
    Ok(table)
}

/// Table labels for the raw and post-processed output of this config.
pub fn default_labels(cfg: &PipelineConfig) -> (String, String) {
    let base = if cfg.fcn.use_roi { "FCN on ROI" } else { "FCN on images" };
    (base.to_string(), format!("{base} + post-process"))
}

pub fn default_runs(cfg: &PipelineConfig, layout: &Layout) -> Vec<(String, PathBuf)> {
    let (raw, post) = default_labels(cfg);
    vec![(raw, layout.raw_dir()), (post, layout.pred_dir())]
}

/// Every stage in order. Without `model` a fresh network is trained into the
/// run directory first.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    input: &Path,
    layout: &Layout,
    model: Option<&Path>,
) -> Result<AblationTable> {
    create_dir(&layout.out)?;
    fs::write(layout.out.join("config.json"), cfg.to_json()).context("writing config.json")?;
    preprocess(cfg, input, layout).context("stage preprocess")?;
    let pre = layout.preprocessed();
    roi(cfg, &pre, layout).context("stage roi")?;
    let model = match model {
        Some(m) => m.to_path_buf(),
        None => {
            let m = layout.model();
            train(cfg, &pre, layout, &m).context("stage train")?;
            m
        }
    };
    infer(cfg, &pre, layout, &model).context("stage infer")?;
    postprocess(cfg, &pre, layout).context("stage postprocess")?;
    eval(cfg, &pre, &default_runs(cfg, layout), layout).context("stage eval")
}
