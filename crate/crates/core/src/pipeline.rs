//! Glue between the stages: preprocessing knobs, network placement, sample
//! construction, per-frame segmentation and scoring.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcn::{self, NetworkParams, Placement, ProbabilityMap, Sample, Tensor, TrainConfig};
use crate::image::{self, BinaryMask, ImageSequence};
use crate::metrics::{self, ConfusionCounts, EvalRegion};
use crate::postproc::{self, PostprocConfig, PostprocessOutcome};
use crate::roi::RoiBox;

/// Probability at or above which a pixel counts as LV before post-processing.
pub const RAW_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub clip_fraction: f64,
    /// Clip and scale with one cutoff per sequence instead of per frame.
    pub per_sequence: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            clip_fraction: 0.01,
            per_sequence: false,
        }
    }
}

pub fn preprocess(seq: &ImageSequence, cfg: &PreprocessConfig) -> Result<ImageSequence> {
    if cfg.per_sequence {
        image::preprocess_sequence_global(seq, cfg.clip_fraction)
    } else {
        image::preprocess_sequence(seq, cfg.clip_fraction)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct FcnConfig {
    pub input_size: usize,
    /// Feed ROI crops; when false the whole frame is resized instead.
    pub use_roi: bool,
    /// Train on every `frameStride`-th frame of each sequence.
    pub frame_stride: usize,
    pub train: TrainConfig,
}

impl Default for FcnConfig {
    fn default() -> Self {
        Self {
            input_size: 64,
            use_roi: true,
            frame_stride: 1,
            train: TrainConfig::default(),
        }
    }
}

impl FcnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(8) {
            return Err(Error::param("inputSize", "must be a positive multiple of 8"));
        }
        if self.frame_stride == 0 {
            return Err(Error::param("frameStride", "must be positive"));
        }
        self.train.validate()
    }
}

/// Where the network looks in a frame: the ROI when `use_roi`, otherwise
/// the largest centred square.
pub fn placement_for(roi: &RoiBox, frame_dims: (usize, usize), cfg: &FcnConfig) -> Result<Placement> {
    let (h, w) = frame_dims;
    let box_ = if cfg.use_roi { *roi } else { RoiBox::full_frame(h, w) };
    Placement::new(box_, cfg.input_size, h, w)
}

/// Training pairs from every `stride`-th annotated frame.
pub fn training_samples(seq: &ImageSequence, placement: &Placement, stride: usize) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (k, frame) in seq.frames().iter().enumerate().step_by(stride.max(1)) {
        let Some(gt) = seq.mask(k) else { continue };
        out.push(Sample {
            input: Tensor::from_image(&placement.to_network(frame)?),
            target: placement.mask_to_network(gt)?,
        });
    }
    Ok(out)
}

/// `p >= 0.5` pasted back into the frame.
pub fn raw_mask(prob: &ProbabilityMap, placement: &Placement) -> Result<BinaryMask> {
    placement.mask_to_frame(&prob.threshold(RAW_THRESHOLD))
}

#[derive(Debug, Clone)]
pub struct FrameSegmentation {
    pub prob: ProbabilityMap,
    pub raw: BinaryMask,
    pub post: PostprocessOutcome,
}

/// Network, raw threshold and post-processing for every frame.
pub fn segment_sequence(
    params: &NetworkParams,
    seq: &ImageSequence,
    placement: &Placement,
    post_cfg: &PostprocConfig,
) -> Result<Vec<FrameSegmentation>> {
    let probs = fcn::infer(params, seq.frames(), placement)?;
    probs
        .into_par_iter()
        .map(|prob| {
            Ok(FrameSegmentation {
                raw: raw_mask(&prob, placement)?,
                post: postproc::postprocess(&prob, placement, post_cfg)?,
                prob,
            })
        })
        .collect()
}

/// Confusion counts over the whole frame or only inside `roi`.
pub fn frame_counts(pred: &BinaryMask, gt: &BinaryMask, region: EvalRegion, roi: &RoiBox) -> Result<ConfusionCounts> {
    match region {
        EvalRegion::FullFrame => metrics::confusion(pred, gt),
        EvalRegion::Roi => metrics::confusion(&roi.crop_mask(pred)?, &roi.crop_mask(gt)?),
    }
}

/// Stable id of a frame in reports.
pub fn frame_id(sequence_id: &str, index: usize) -> String {
    format!("{sequence_id}/{index:03}")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image2D;

    fn seq() -> ImageSequence {
        let frames = (0..4).map(|k| Image2D::filled(40, 40, k as f64)).collect();
        let masks = (0..4)
            .map(|k| (k != 2).then(|| BinaryMask::from_fn(40, 40, |r, c| r > 20 && c > 20)))
            .collect();
        ImageSequence::new("s", frames, Some(masks)).unwrap()
    }

    #[test]
    fn samples_skip_unannotated_and_strided_frames() {
        let roi = RoiBox {
            top: 8,
            left: 8,
            side: 32,
        };
        let p = placement_for(
            &roi,
            (40, 40),
            &FcnConfig {
                input_size: 16,
                ..FcnConfig::default()
            },
        )
        .unwrap();
        assert_eq!(training_samples(&seq(), &p, 1).unwrap().len(), 3);
        let strided = training_samples(&seq(), &p, 2).unwrap();
        assert_eq!(strided.len(), 1);
        assert_eq!(strided[0].input.shape(), (16, 16, 1));
        assert_eq!(strided[0].target.count(), 100);
    }

    #[test]
    fn images_mode_uses_the_full_frame() {
        let roi = RoiBox {
            top: 8,
            left: 8,
            side: 16,
        };
        let cfg = FcnConfig {
            use_roi: false,
            input_size: 16,
            ..FcnConfig::default()
        };
        let p = placement_for(&roi, (40, 48), &cfg).unwrap();
        assert_eq!(
            p.roi,
            RoiBox {
                top: 0,
                left: 4,
                side: 40
            }
        );
    }

    #[test]
    fn roi_region_counts_only_inside_the_box() {
        let gt = BinaryMask::from_fn(10, 10, |r, _| r < 5);
        let pred = BinaryMask::zeros(10, 10);
        let roi = RoiBox {
            top: 3,
            left: 0,
            side: 4,
        };
        let c = frame_counts(&pred, &gt, EvalRegion::Roi, &roi).unwrap();
        assert_eq!((c.fn_, c.tn), (8, 8));
        assert_eq!(frame_counts(&pred, &gt, EvalRegion::FullFrame, &roi).unwrap().fn_, 50);
        assert_eq!(frame_id("seq_0001", 7), "seq_0001/007");
    }
}
