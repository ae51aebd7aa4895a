//! Per-frame inspection images.
//!
//! For frame `k` of a sequence the writer emits, under
//! `overlays/<sequenceId>/`:
//!
//! - `frame_kkk_roi.ppm`: the preprocessed frame in gray with the ROI box
//!   outlined in red
//! - `frame_kkk_prob.pgm`: the network's LV probability at network resolution
//! - `frame_kkk_post.pgm`: the post-processed mask in frame coordinates
//! - `frame_kkk_error.pgm`: `pred XOR gt`, only when ground truth exists

use std::path::Path;

use anyhow::{ensure, Result};

use lvseg_core::fcn::ProbabilityMap;
use lvseg_core::image::{BinaryMask, Image2D};
use lvseg_core::pnm::Pnm;
use lvseg_core::roi::RoiBox;

#[derive(Debug, Clone, PartialEq)]
pub struct Overlays {
    pub roi: Pnm,
    pub prob: Pnm,
    pub post: Pnm,
    pub error: Option<Pnm>,
}

const OUTLINE: [u16; 3] = [255, 0, 0];

fn roi_outline(frame: &Image2D, roi: &RoiBox) -> Pnm {
    let (h, w) = frame.dims();
    let gray = Pnm::from_unit_map_u8(frame);
    let mut samples = Vec::with_capacity(3 * h * w);
    for r in 0..h {
        for c in 0..w {
            let on_edge =
                roi.contains(r, c) && (r == roi.top || c == roi.left || r + 1 == roi.bottom() || c + 1 == roi.right());
            if on_edge {
                samples.extend_from_slice(&OUTLINE);
            } else {
                let g = gray.samples[r * w + c];
                samples.extend_from_slice(&[g, g, g]);
            }
        }
    }
    Pnm {
        width: w,
        height: h,
        maxval: 255,
        channels: 3,
        samples,
    }
}

/// Builds the inspection images for one frame. `frame` is expected in
/// `[0, 1]`; values outside are clamped for display.
pub fn render_overlays(
    frame: &Image2D,
    roi: &RoiBox,
    prob: &ProbabilityMap,
    pred: &BinaryMask,
    gt: Option<&BinaryMask>,
) -> Result<Overlays> {
    let dims = frame.dims();
    ensure!(
        pred.dims() == dims,
        "prediction is {:?}, frame is {:?}",
        pred.dims(),
        dims
    );
    if let Some(g) = gt {
        ensure!(g.dims() == dims, "ground truth is {:?}, frame is {:?}", g.dims(), dims);
    }
    ensure!(roi.fits(dims.0, dims.1), "{roi:?} does not fit a {dims:?} frame");
    Ok(Overlays {
        roi: roi_outline(frame, roi),
        prob: Pnm::from_unit_map_u8(&prob.to_image()),
        post: Pnm::from_mask(pred),
        error: gt.map(|g| pred.xor(g).map(|e| Pnm::from_mask(&e))).transpose()?,
    })
}

impl Overlays {
    pub fn write(&self, dir: &Path, frame: usize) -> Result<()> {
        let stem = format!("frame_{frame:03}");
        self.roi.write(&dir.join(format!("{stem}_roi.ppm")))?;
        self.prob.write(&dir.join(format!("{stem}_prob.pgm")))?;
        self.post.write(&dir.join(format!("{stem}_post.pgm")))?;
        if let Some(e) = &self.error {
            e.write(&dir.join(format!("{stem}_error.pgm")))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (Image2D, RoiBox, ProbabilityMap) {
        let frame = Image2D::from_fn(12, 12, |r, c| (r * 12 + c) as f64 / 143.0).unwrap();
        let roi = RoiBox {
            top: 2,
            left: 3,
            side: 8,
        };
        let prob = ProbabilityMap::new(4, 4, vec![0.25; 16]).unwrap();
        (frame, roi, prob)
    }

    #[test]
    fn error_image_is_the_xor() {
        let (frame, roi, prob) = setup();
        let gt = BinaryMask::from_fn(12, 12, |r, c| (3..7).contains(&r) && (3..7).contains(&c));
        let same = render_overlays(&frame, &roi, &prob, &gt, Some(&gt)).unwrap();
        assert!(same.error.unwrap().samples.iter().all(|&s| s == 0));

        let empty = BinaryMask::zeros(12, 12);
        let out = render_overlays(&frame, &roi, &prob, &empty, Some(&gt)).unwrap();
        assert_eq!(out.error.unwrap(), Pnm::from_mask(&gt));

        let shifted = BinaryMask::from_fn(12, 12, |r, c| (4..8).contains(&r) && (3..7).contains(&c));
        let err = render_overlays(&frame, &roi, &prob, &shifted, Some(&gt))
            .unwrap()
            .error
            .unwrap();
        for r in 0..12 {
            for c in 0..12 {
                let expected = shifted.get(r, c) != gt.get(r, c);
                assert_eq!(err.samples[r * 12 + c] == 255, expected);
            }
        }
        assert!(render_overlays(&frame, &roi, &prob, &empty, None)
            .unwrap()
            .error
            .is_none());
    }

    #[test]
    fn roi_outline_and_dimension_checks() {
        let (frame, roi, prob) = setup();
        let pred = BinaryMask::zeros(12, 12);
        let out = render_overlays(&frame, &roi, &prob, &pred, None).unwrap();
        let px = |r: usize, c: usize| &out.roi.samples[3 * (r * 12 + c)..3 * (r * 12 + c) + 3];
        assert_eq!(px(2, 5), &OUTLINE);
        assert_eq!(px(9, 10), &OUTLINE);
        assert_ne!(px(5, 5), &OUTLINE);
        assert_ne!(px(1, 5), &OUTLINE);
        assert_eq!(out.prob.samples[0], 64);

        let wrong = BinaryMask::zeros(10, 12);
        assert!(render_overlays(&frame, &roi, &prob, &wrong, None).is_err());
        assert!(render_overlays(&frame, &roi, &prob, &pred, Some(&wrong)).is_err());
    }
}
