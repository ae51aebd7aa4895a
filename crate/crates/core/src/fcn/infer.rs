use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::net::NetworkParams;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::image::{nearest_index, resize_bilinear, resize_nearest, BinaryMask, Image2D};
use crate::roi::RoiBox;

/// Per-pixel LV membership probability at network resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl ProbabilityMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::InvalidData(format!(
                "{} probabilities for {height}x{width}",
                values.len()
            )));
        }
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidData("probability outside [0, 1]".into()));
        }
        Ok(Self { height, width, values })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn to_image(&self) -> Image2D {
        Image2D::new(self.height, self.width, self.values.clone()).expect("probabilities are valid intensities")
    }

    pub fn from_image(img: &Image2D) -> Result<Self> {
        Self::new(img.height(), img.width(), img.data().to_vec())
    }

    /// `p >= threshold`.
    pub fn threshold(&self, threshold: f64) -> BinaryMask {
        BinaryMask::from_fn(self.height, self.width, |r, c| self.get(r, c) >= threshold)
    }
}

/// How a network-resolution map relates to its source frame: the frame is
/// cropped to `roi` and the crop resized to `input_size` squared.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct Placement {
    pub roi: RoiBox,
    pub input_size: usize,
    pub frame_height: usize,
    pub frame_width: usize,
}

impl Placement {
    pub fn new(roi: RoiBox, input_size: usize, frame_height: usize, frame_width: usize) -> Result<Self> {
        if !roi.fits(frame_height, frame_width) || roi.side == 0 || input_size == 0 {
            return Err(Error::param(
                "placement",
                format!("{roi:?} at input {input_size} in a {frame_height}x{frame_width} frame"),
            ));
        }
        Ok(Self {
            roi,
            input_size,
            frame_height,
            frame_width,
        })
    }

    /// Crop and bilinear resize of a frame into network space.
    pub fn to_network(&self, frame: &Image2D) -> Result<Image2D> {
        if frame.dims() != (self.frame_height, self.frame_width) {
            return Err(Error::DimensionMismatch {
                expected: (self.frame_height, self.frame_width),
                actual: frame.dims(),
            });
        }
        resize_bilinear(&self.roi.crop_image(frame)?, self.input_size, self.input_size)
    }

    /// Nearest-neighbour resize of a mask into network space.
    pub fn mask_to_network(&self, mask: &BinaryMask) -> Result<BinaryMask> {
        Ok(resize_nearest(
            &self.roi.crop_mask(mask)?,
            self.input_size,
            self.input_size,
        ))
    }

    /// Inverse of [`Placement::to_network`] for masks: nearest-neighbour
    /// resize back to the ROI, pasted into an empty frame.
    pub fn mask_to_frame(&self, mask: &BinaryMask) -> Result<BinaryMask> {
        if mask.dims() != (self.input_size, self.input_size) {
            return Err(Error::DimensionMismatch {
                expected: (self.input_size, self.input_size),
                actual: mask.dims(),
            });
        }
        let RoiBox { top, left, side } = self.roi;
        let mut out = BinaryMask::zeros(self.frame_height, self.frame_width);
        for r in 0..side {
            let sr = nearest_index(r, self.input_size, side);
            for c in 0..side {
                if mask.get(sr, nearest_index(c, self.input_size, side)) {
                    out.set(top + r, left + c, true);
                }
            }
        }
        Ok(out)
    }
}

/// LV-channel probability map of one network input.
pub fn forward(params: &NetworkParams, input: &Image2D) -> Result<ProbabilityMap> {
    let cache = params.forward(&Tensor::from_image(input))?;
    let probs = cache.probabilities();
    ProbabilityMap::new(probs.h, probs.w, probs.channel(1))
}

/// Runs the network on every frame of a sequence under one placement.
pub fn infer(params: &NetworkParams, frames: &[Image2D], placement: &Placement) -> Result<Vec<ProbabilityMap>> {
    params.check_shapes()?;
    if placement.input_size != params.architecture.input_size() {
        return Err(Error::FingerprintMismatch);
    }
    frames
        .par_iter()
        .map(|f| forward(params, &placement.to_network(f)?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fcn::Architecture;

    #[test]
    fn placement_round_trips_masks() {
        let roi = RoiBox {
            top: 10,
            left: 30,
            side: 48,
        };
        let p = Placement::new(roi, 16, 100, 120).unwrap();
        let net_mask = BinaryMask::from_fn(16, 16, |r, c| (4..8).contains(&r) && (2..14).contains(&c));
        let frame = p.mask_to_frame(&net_mask).unwrap();
        // each network pixel covers exactly 3x3 frame pixels
        assert_eq!(frame.count(), net_mask.count() * 9);
        assert!(frame.get(10 + 12, 30 + 6));
        assert!(!frame.get(10 + 11, 30 + 6));
        assert_eq!(p.mask_to_network(&frame).unwrap(), net_mask);
        assert!(Placement::new(
            RoiBox {
                top: 60,
                left: 0,
                side: 48
            },
            16,
            100,
            120
        )
        .is_err());
    }

    #[test]
    fn infer_checks_input_size() {
        let params = NetworkParams::init(Architecture::mini_fcn8s(16).unwrap(), 0);
        let frames = vec![Image2D::filled(40, 40, 0.3); 3];
        let good = Placement::new(
            RoiBox {
                top: 4,
                left: 4,
                side: 32,
            },
            16,
            40,
            40,
        )
        .unwrap();
        let maps = infer(&params, &frames, &good).unwrap();
        assert_eq!(maps.len(), 3);
        assert!(maps.iter().all(|m| m.dims() == (16, 16)));
        assert_eq!(maps[0], maps[2]);
        let bad = Placement::new(
            RoiBox {
                top: 4,
                left: 4,
                side: 32,
            },
            24,
            40,
            40,
        )
        .unwrap();
        assert!(infer(&params, &frames, &bad).is_err());
    }
}
