//! On-disk datasets and the synthetic cardiac phantom.
//!
//! A dataset is a directory holding `manifest.json` plus one subdirectory per
//! sequence with `frame_###.pgm` (16-bit) and optional `mask_###.pgm` (8-bit,
//! 0 or 255) files. Paths in the manifest are relative to the dataset root.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image2D, ImageSequence};
use crate::pnm::Pnm;

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct SequenceEntry {
    pub sequence_id: String,
    pub patient_id: String,
    pub frame_paths: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_paths: Option<Vec<Option<String>>>,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    /// Stored frame samples are intensities multiplied by this factor.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intensity_scale: Option<f64>,
    pub sequences: Vec<SequenceEntry>,
}

impl Manifest {
    pub fn new(intensity_scale: Option<f64>) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            intensity_scale,
            sequences: Vec::new(),
        }
    }

    /// Structural checks that do not touch the referenced files.
    pub fn validate(&self) -> Result<()> {
        if self.format_version != FORMAT_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported formatVersion {}",
                self.format_version
            )));
        }
        if let Some(s) = self.intensity_scale {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Manifest(format!("intensityScale {s} must be positive")));
            }
        }
        let mut ids = HashSet::new();
        for e in &self.sequences {
            if !ids.insert(e.sequence_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate sequenceId `{}`", e.sequence_id)));
            }
            if e.frame_paths.is_empty() {
                return Err(Error::Manifest(format!("sequence `{}` has no frames", e.sequence_id)));
            }
            if e.height == 0 || e.width == 0 {
                return Err(Error::Manifest(format!("sequence `{}` has zero size", e.sequence_id)));
            }
            if let Some(m) = &e.mask_paths {
                if m.len() != e.frame_paths.len() {
                    return Err(Error::Manifest(format!(
                        "sequence `{}`: {} mask paths for {} frames",
                        e.sequence_id,
                        m.len(),
                        e.frame_paths.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(self).expect("manifest serializes") + "\n";
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }
}

/// A manifest together with the directory its paths are relative to.
/// Sequences are read from disk only when asked for.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

/// Reads and validates `manifest.json` in `dir` (or the file itself), and
/// checks that every referenced image exists.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let (root, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (
            path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            path.to_path_buf(),
        )
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
        path: file.clone(),
        source,
    })?;
    manifest.validate().map_err(|e| e.in_file(&file))?;
    for e in &manifest.sequences {
        let masks = e.mask_paths.iter().flatten().flatten();
        for rel in e.frame_paths.iter().chain(masks) {
            let p = root.join(rel);
            if !p.is_file() {
                return Err(Error::Manifest(format!(
                    "sequence `{}` references missing file {}",
                    e.sequence_id,
                    p.display()
                )));
            }
        }
    }
    Ok(Dataset { root, manifest })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.sequences.is_empty()
    }

    pub fn entry(&self, index: usize) -> &SequenceEntry {
        &self.manifest.sequences[index]
    }

    pub fn find(&self, sequence_id: &str) -> Option<usize> {
        self.manifest
            .sequences
            .iter()
            .position(|e| e.sequence_id == sequence_id)
    }

    /// Loads one sequence, dividing stored samples by the intensity scale.
    pub fn load_sequence(&self, index: usize) -> Result<ImageSequence> {
        let e = self.entry(index);
        let scale = self.manifest.intensity_scale.unwrap_or(1.0);
        let expect = (e.height, e.width);
        let check = |dims: (usize, usize), path: &Path| {
            if dims != expect {
                Err(Error::DimensionMismatch {
                    expected: expect,
                    actual: dims,
                }
                .in_file(path))
            } else {
                Ok(())
            }
        };
        let mut frames = Vec::with_capacity(e.frame_paths.len());
        for rel in &e.frame_paths {
            let path = self.root.join(rel);
            let mut img = Pnm::read(&path)?.to_image().map_err(|err| err.in_file(&path))?;
            check(img.dims(), &path)?;
            if scale != 1.0 {
                img = img.map(|v| v / scale)?;
            }
            frames.push(img);
        }
        let gt = match &e.mask_paths {
            None => None,
            Some(paths) => Some(
                paths
                    .iter()
                    .map(|p| {
                        p.as_ref()
                            .map(|rel| {
                                let path = self.root.join(rel);
                                let pnm = Pnm::read(&path)?;
                                if pnm.samples.iter().any(|&s| s != 0 && s != pnm.maxval) {
                                    return Err(Error::Pnm("mask is not binary".into()).in_file(&path));
                                }
                                let m = pnm.to_mask().map_err(|err| err.in_file(&path))?;
                                check(m.dims(), &path)?;
                                Ok(m)
                            })
                            .transpose()
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
        };
        ImageSequence::new(e.sequence_id.clone(), frames, gt)
    }
}

pub fn frame_file(index: usize) -> String {
    format!("frame_{index:03}.pgm")
}

pub fn mask_file(index: usize) -> String {
    format!("mask_{index:03}.pgm")
}

/// Writes one sequence under `root/<sequenceId>/` and returns its entry.
///
/// With `intensity_scale` set, each intensity is multiplied by it before
/// rounding to 16 bits.
pub fn write_sequence(
    root: &Path,
    seq: &ImageSequence,
    patient_id: &str,
    intensity_scale: Option<f64>,
) -> Result<SequenceEntry> {
    let dir = root.join(&seq.sequence_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut frame_paths = Vec::with_capacity(seq.len());
    for (i, f) in seq.frames().iter().enumerate() {
        let scaled;
        let img = match intensity_scale {
            Some(s) => {
                scaled = f.map(|v| v * s)?;
                &scaled
            }
            None => f,
        };
        let rel = format!("{}/{}", seq.sequence_id, frame_file(i));
        Pnm::from_image_u16(img)?.write(&root.join(&rel))?;
        frame_paths.push(rel);
    }
    let mask_paths = match seq.ground_truth() {
        None => None,
        Some(gt) => Some(
            gt.iter()
                .enumerate()
                .map(|(i, m)| {
                    m.as_ref()
                        .map(|m| {
                            let rel = format!("{}/{}", seq.sequence_id, mask_file(i));
                            Pnm::from_mask(m).write(&root.join(&rel))?;
                            Ok(rel)
                        })
                        .transpose()
                })
                .collect::<Result<Vec<_>>>()?,
        ),
    };
    let (height, width) = seq.dims();
    Ok(SequenceEntry {
        sequence_id: seq.sequence_id.clone(),
        patient_id: patient_id.to_string(),
        frame_paths,
        mask_paths,
        height,
        width,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum DistractorShape {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields)]
pub struct Distractor {
    pub shape: DistractorShape,
    pub intensity: f64,
}

/// Parameters of one synthetic short-axis sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub frame_count: usize,
    pub image_size: usize,
    /// Smallest and largest LV radius over the cycle, in pixels.
    pub lv_radius_range: (f64, f64),
    pub radial_phase: f64,
    /// Per-frame uniform jitter of the LV centre, in pixels.
    pub center_jitter: f64,
    /// LV centre; drawn from the seed near the middle of the frame if unset.
    pub lv_center: Option<(f64, f64)>,
    pub lv_intensity: f64,
    pub background: f64,
    /// A static elliptical body region around the heart.
    pub body_intensity: f64,
    pub distractors: Vec<Distractor>,
    pub noise_sigma: f64,
    /// Isolated hot pixels per frame, added only when there is noise.
    pub spikes: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            frame_count: 20,
            image_size: 256,
            lv_radius_range: (13.0, 21.0),
            radial_phase: 0.0,
            center_jitter: 1.0,
            lv_center: None,
            lv_intensity: 1400.0,
            background: 120.0,
            body_intensity: 420.0,
            distractors: vec![
                Distractor {
                    shape: DistractorShape::Rectangle,
                    intensity: 1300.0,
                },
                Distractor {
                    shape: DistractorShape::Ellipse,
                    intensity: 1250.0,
                },
            ],
            noise_sigma: 40.0,
            spikes: 12,
            seed: 0,
        }
    }
}

/// Axis-aligned footprint of a placed distractor.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Placed {
    shape: DistractorShape,
    intensity: f64,
    cy: f64,
    cx: f64,
    /// Half extents along rows and columns.
    hy: f64,
    hx: f64,
}

impl Placed {
    fn contains(&self, r: f64, c: f64) -> bool {
        let (dy, dx) = ((r - self.cy) / self.hy, (c - self.cx) / self.hx);
        match self.shape {
            DistractorShape::Rectangle => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            DistractorShape::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }

    fn overlaps(&self, other: &Placed, gap: f64) -> bool {
        (self.cy - other.cy).abs() < self.hy + other.hy + gap && (self.cx - other.cx).abs() < self.hx + other.hx + gap
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.lv_radius_range;
        if self.frame_count < 2 {
            return Err(Error::param("frameCount", "need at least 2 frames"));
        }
        if self.image_size < 32 {
            return Err(Error::param("imageSize", "must be at least 32"));
        }
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::param(
                "lvRadiusRange",
                format!("({lo}, {hi}) is not a positive range"),
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.center_jitter >= 0.0) {
            return Err(Error::param("noiseSigma/centerJitter", "must be non-negative"));
        }
        let levels = [self.lv_intensity, self.background, self.body_intensity];
        if levels
            .iter()
            .chain(self.distractors.iter().map(|d| &d.intensity))
            .any(|v| !(0.0..=65535.0).contains(v))
        {
            return Err(Error::param("intensity", "must lie in [0, 65535]"));
        }
        if let Some((cy, cx)) = self.lv_center {
            let reach = hi + self.center_jitter;
            let size = self.image_size as f64;
            if cy - reach < 0.0 || cx - reach < 0.0 || cy + reach > size - 1.0 || cx + reach > size - 1.0 {
                return Err(Error::param("lvCenter", "LV disk leaves the frame"));
            }
        } else if 2.0 * (hi + self.center_jitter) + 16.0 > self.image_size as f64 / 2.0 {
            return Err(Error::param("lvRadiusRange", "LV disk too large for the frame"));
        }
        Ok(())
    }

    /// LV radius at frame `k`.
    pub fn radius_at(&self, k: usize) -> f64 {
        let (lo, hi) = self.lv_radius_range;
        let t = 2.0 * PI * k as f64 / self.frame_count as f64 + self.radial_phase;
        lo + (hi - lo) * (1.0 + t.sin()) / 2.0
    }
}

fn place_distractors(spec: &PhantomSpec, center: (f64, f64), rng: &mut ChaCha8Rng) -> Result<Vec<Placed>> {
    let size = spec.image_size as f64;
    let keep_out = spec.lv_radius_range.1 + spec.center_jitter + 6.0;
    let mut placed: Vec<Placed> = Vec::new();
    for d in &spec.distractors {
        let (mut long, mut short) = match d.shape {
            DistractorShape::Rectangle => (rng.random_range(16.0..24.0), rng.random_range(4.5..6.5)),
            DistractorShape::Ellipse => (rng.random_range(15.0..21.0), rng.random_range(5.0..7.5)),
        };
        let scale = (size / 256.0).min(1.0);
        long *= scale;
        short *= scale;
        let vertical = rng.random::<bool>();
        let (hy, hx) = if vertical { (long, short) } else { (short, long) };
        let mut found = None;
        for _ in 0..200 {
            let angle = rng.random_range(0.0..2.0 * PI);
            let dist = keep_out + long + rng.random_range(0.0..30.0);
            let cand = Placed {
                shape: d.shape,
                intensity: d.intensity,
                cy: center.0 + dist * angle.sin(),
                cx: center.1 + dist * angle.cos(),
                hy,
                hx,
            };
            let inside =
                cand.cy - hy >= 1.0 && cand.cx - hx >= 1.0 && cand.cy + hy <= size - 2.0 && cand.cx + hx <= size - 2.0;
            let clear_of_lv = {
                // nearest point of the footprint's bounding box to the LV centre
                let ny = (center.0 - cand.cy).clamp(-hy, hy) + cand.cy;
                let nx = (center.1 - cand.cx).clamp(-hx, hx) + cand.cx;
                (ny - center.0).hypot(nx - center.1) >= keep_out
            };
            if inside && clear_of_lv && placed.iter().all(|p| !p.overlaps(&cand, 4.0)) {
                found = Some(cand);
                break;
            }
        }
        placed.push(found.ok_or_else(|| Error::param("distractors", "no room to place every distractor"))?);
    }
    Ok(placed)
}

/// Renders a phantom sequence and its exact LV masks. A pure function of
/// the spec.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<ImageSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.image_size;
    let size = n as f64;
    let center = match spec.lv_center {
        Some(c) => c,
        None => {
            let spread = size / 8.0;
            (
                size / 2.0 + rng.random_range(-spread..spread),
                size / 2.0 + rng.random_range(-spread..spread),
            )
        }
    };
    let distractors = place_distractors(spec, center, &mut rng)?;
    // static anatomy: background, body ellipse, distractors
    let body = (size * rng.random_range(0.30..0.36), size * rng.random_range(0.38..0.44));
    let mut anatomy = vec![spec.background; n * n];
    for r in 0..n {
        for c in 0..n {
            let (dy, dx) = ((r as f64 - size / 2.0) / body.0, (c as f64 - size / 2.0) / body.1);
            if dy * dy + dx * dx <= 1.0 {
                anatomy[r * n + c] = spec.body_intensity;
            }
            if let Some(d) = distractors.iter().find(|d| d.contains(r as f64, c as f64)) {
                anatomy[r * n + c] = d.intensity;
            }
        }
    }
    let normal = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut frames = Vec::with_capacity(spec.frame_count);
    let mut masks = Vec::with_capacity(spec.frame_count);
    for k in 0..spec.frame_count {
        let radius = spec.radius_at(k);
        let j = spec.center_jitter;
        let (cy, cx) = if j > 0.0 {
            (center.0 + rng.random_range(-j..=j), center.1 + rng.random_range(-j..=j))
        } else {
            center
        };
        let mask = BinaryMask::from_fn(n, n, |r, c| {
            let (dy, dx) = (r as f64 - cy, c as f64 - cx);
            dy * dy + dx * dx <= radius * radius
        });
        let mut data: Vec<f64> = anatomy
            .iter()
            .zip(mask.data())
            .map(|(&a, &m)| if m == 1 { spec.lv_intensity } else { a })
            .collect();
        if spec.noise_sigma > 0.0 {
            for v in data.iter_mut() {
                *v += normal.sample(&mut rng);
            }
            for _ in 0..spec.spikes {
                let i = rng.random_range(0..n * n);
                data[i] = rng.random_range(3000.0..8011.0);
            }
        }
        for v in data.iter_mut() {
            *v = v.round().clamp(0.0, 65535.0);
        }
        frames.push(Image2D::new(n, n, data)?);
        masks.push(Some(mask));
    }
    ImageSequence::new(format!("phantom_{:016x}", spec.seed), frames, Some(masks))
}

/// Per-sequence specs for a corpus: each sequence gets its own seed, cycle
/// phase and a radius range scaled around the base.
pub fn corpus_specs(base: &PhantomSpec, count: usize, seed: u64) -> Vec<PhantomSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let s = rng.random_range(0.85..1.15);
            PhantomSpec {
                seed: rng.random(),
                radial_phase: rng.random_range(0.0..2.0 * PI),
                lv_radius_range: (base.lv_radius_range.0 * s, base.lv_radius_range.1 * s),
                ..base.clone()
            }
        })
        .collect()
}

/// Sequence id used for the `index`-th corpus member.
pub fn corpus_sequence_id(index: usize) -> String {
    format!("seq_{index:04}")
}

/// Generates and writes a whole corpus, one sequence at a time.
pub fn write_corpus(dir: &Path, base: &PhantomSpec, count: usize, seed: u64) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Manifest::new(None);
    for (i, spec) in corpus_specs(base, count, seed).iter().enumerate() {
        let mut seq = generate_phantom(spec)?;
        seq.sequence_id = corpus_sequence_id(i);
        manifest.sequences.push(write_sequence(dir, &seq, "phantom", None)?);
    }
    manifest.save(dir)?;
    Ok(manifest)
}

/// Shuffles whole items and splits them, `round(train_frac * n)` going to
/// the training side (at least one on each side).
pub fn split<T: Clone>(items: &[T], train_frac: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::param("trainFrac", format!("{train_frac} is outside (0, 1)")));
    }
    let n = items.len();
    if n < 2 {
        return Err(Error::TooFewSequences(n));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((train_frac * n as f64).round() as usize).clamp(1, n - 1);
    let pick = |idx: &[usize]| {
        let mut idx = idx.to_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| items[i].clone()).collect::<Vec<T>>()
    };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}
