//! Core raster types and intensity preprocessing.
//!
//! Frames are stored as row-major `f64` intensities regardless of the bit
//! depth they were decoded from. Preprocessing is two pure steps: outlier
//! clipping of the brightest fraction of pixels followed by min-max scaling
//! to `[0, 1]`.

use crate::error::{Error, Result};

/// A single-channel image with nonnegative, finite intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2D {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image2D {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidData(format!(
                "{} values for a {}x{} image",
                data.len(),
                height,
                width
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidData(format!("intensity {v} is not a finite value >= 0")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(value.is_finite() && value >= 0.0);
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(height, width, data)
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn min_max(&self) -> Option<(f64, f64)> {
        let first = *self.data.first()?;
        Some(
            self.data
                .iter()
                .fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v))),
        )
    }

    /// Applies `f` to every pixel. The result must still satisfy the image
    /// invariants.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        Self::new(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::ShapeMismatch {
                op: "crop",
                detail: format!(
                    "window {height}x{width} at ({top},{left}) exceeds {}x{}",
                    self.height, self.width
                ),
            });
        }
        let mut data = Vec::with_capacity(height * width);
        for r in top..top + height {
            let start = r * self.width + left;
            data.extend_from_slice(&self.data[start..start + width]);
        }
        Ok(Self { height, width, data })
    }
}

/// A binary mask with values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::InvalidData(format!(
                "{} values for a {}x{} mask",
                data.len(),
                height,
                width
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::InvalidData("mask values must be 0 or 1".into()));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c) as u8);
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col] != 0
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value as u8;
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0).count()
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0)
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::ShapeMismatch {
                op: "crop",
                detail: format!(
                    "window {height}x{width} at ({top},{left}) exceeds {}x{}",
                    self.height, self.width
                ),
            });
        }
        Ok(Self::from_fn(height, width, |r, c| self.get(top + r, left + c)))
    }

    /// Pixelwise exclusive-or, used for error images.
    pub fn xor(&self, other: &BinaryMask) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(Error::DimensionMismatch {
                expected: self.dims(),
                actual: other.dims(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a ^ b).collect();
        Ok(Self {
            height: self.height,
            width: self.width,
            data,
        })
    }
}

/// One cardiac cycle: ordered frames of identical size, with optional
/// per-frame ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSequence {
    pub sequence_id: String,
    frames: Vec<Image2D>,
    ground_truth: Option<Vec<Option<BinaryMask>>>,
}

impl ImageSequence {
    pub fn new(
        sequence_id: impl Into<String>,
        frames: Vec<Image2D>,
        ground_truth: Option<Vec<Option<BinaryMask>>>,
    ) -> Result<Self> {
        let sequence_id = sequence_id.into();
        let first = frames
            .first()
            .ok_or_else(|| Error::InvalidData(format!("sequence `{sequence_id}` has no frames")))?;
        let dims = first.dims();
        for f in &frames {
            if f.dims() != dims {
                return Err(Error::DimensionMismatch {
                    expected: dims,
                    actual: f.dims(),
                });
            }
        }
        if let Some(gt) = &ground_truth {
            if gt.len() != frames.len() {
                return Err(Error::InvalidData(format!(
                    "sequence `{sequence_id}`: {} masks for {} frames",
                    gt.len(),
                    frames.len()
                )));
            }
            for m in gt.iter().flatten() {
                if m.dims() != dims {
                    return Err(Error::DimensionMismatch {
                        expected: dims,
                        actual: m.dims(),
                    });
                }
            }
        }
        Ok(Self {
            sequence_id,
            frames,
            ground_truth,
        })
    }

    pub fn frames(&self) -> &[Image2D] {
        &self.frames
    }

    pub fn ground_truth(&self) -> Option<&[Option<BinaryMask>]> {
        self.ground_truth.as_deref()
    }

    pub fn mask(&self, frame: usize) -> Option<&BinaryMask> {
        self.ground_truth.as_ref()?.get(frame)?.as_ref()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.frames[0].dims()
    }

    /// Replaces every frame with `f(frame)`, keeping ground truth.
    pub fn map_frames(&self, f: impl Fn(&Image2D) -> Result<Image2D>) -> Result<Self> {
        let frames = self.frames.iter().map(f).collect::<Result<Vec<_>>>()?;
        Self::new(self.sequence_id.clone(), frames, self.ground_truth.clone())
    }
}

/// Replaces the brightest `fraction` of pixels with the largest intensity
/// outside that set.
///
/// With `k = ceil(fraction * N)`, every pixel is mapped to
/// `min(x, v[k])`, where `v` is the intensities sorted in descending order
/// (zero-based). `v[k]` is the largest value left once the top-`k` pixels are
/// set aside, so every pixel at or above the cutoff `v[k-1]` ends up at the
/// replacement value and nothing below it moves.
pub fn clip_outliers(img: &Image2D, fraction: f64) -> Result<Image2D> {
    if img.is_empty() {
        return Err(Error::EmptyImage);
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::param("fraction", format!("{fraction} is outside (0, 1)")));
    }
    let n = img.len();
    let k = ((fraction * n as f64).ceil() as usize).max(1);
    if k >= n {
        return Ok(img.clone());
    }
    let mut sorted = img.data.clone();
    // k-th largest (zero-based) is the (n-1-k)-th smallest
    let (_, replacement, _) = sorted.select_nth_unstable_by(n - 1 - k, f64::total_cmp);
    let replacement = *replacement;
    img.map(|v| v.min(replacement))
}

/// Min-max scales intensities to `[0, 1]`; a constant image maps to zeros.
pub fn scale_unit(img: &Image2D) -> Result<Image2D> {
    let (lo, hi) = img.min_max().ok_or(Error::EmptyImage)?;
    if hi > lo {
        let range = hi - lo;
        img.map(|v| (v - lo) / range)
    } else {
        Ok(Image2D::zeros(img.height, img.width))
    }
}

/// Histogram of intensities over `[lo, hi]` with `bins` equal-width bins.
///
/// Bin `b` covers `[lo + b*(hi-lo)/bins, lo + (b+1)*(hi-lo)/bins)`; the last
/// bin is closed on the right.
pub fn histogram(img: &Image2D, bins: usize, lo: f64, hi: f64) -> Result<Vec<u64>> {
    histogram_of(img.data(), bins, lo, hi)
}

pub(crate) fn histogram_of(values: &[f64], bins: usize, lo: f64, hi: f64) -> Result<Vec<u64>> {
    if bins < 2 {
        return Err(Error::param("bins", format!("{bins} < 2")));
    }
    if !(hi > lo) {
        return Err(Error::param("range", format!("[{lo}, {hi}] is empty")));
    }
    let mut counts = vec![0u64; bins];
    for &v in values {
        counts[bin_index(v, bins, lo, hi)?] += 1;
    }
    Ok(counts)
}

#[inline]
pub(crate) fn bin_index(v: f64, bins: usize, lo: f64, hi: f64) -> Result<usize> {
    if !(v >= lo && v <= hi) {
        return Err(Error::InvalidData(format!("value {v} outside [{lo}, {hi}]")));
    }
    let b = ((v - lo) / (hi - lo) * bins as f64).floor() as usize;
    Ok(b.min(bins - 1))
}

/// The full clip-then-scale preprocessing of one frame.
pub fn preprocess_frame(img: &Image2D, clip_fraction: f64) -> Result<Image2D> {
    scale_unit(&clip_outliers(img, clip_fraction)?)
}

/// Per-frame preprocessing of a whole sequence.
pub fn preprocess_sequence(seq: &ImageSequence, clip_fraction: f64) -> Result<ImageSequence> {
    seq.map_frames(|f| preprocess_frame(f, clip_fraction))
}

/// Preprocessing with a single clip cutoff and scale range shared by all
/// frames of the sequence.
pub fn preprocess_sequence_global(seq: &ImageSequence, clip_fraction: f64) -> Result<ImageSequence> {
    let (h, w) = seq.dims();
    let all: Vec<f64> = seq.frames().iter().flat_map(|f| f.data().iter().copied()).collect();
    let stacked = Image2D::new(h * seq.len(), w, all)?;
    let clipped = scale_unit(&clip_outliers(&stacked, clip_fraction)?)?;
    let frames = clipped
        .data()
        .chunks(h * w)
        .map(|c| Image2D::new(h, w, c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    ImageSequence::new(seq.sequence_id.clone(), frames, seq.ground_truth.clone())
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
pub fn resize_bilinear(img: &Image2D, height: usize, width: usize) -> Result<Image2D> {
    if img.is_empty() || height == 0 || width == 0 {
        return Err(Error::EmptyImage);
    }
    let sy = img.height as f64 / height as f64;
    let sx = img.width as f64 / width as f64;
    let axis = |dst: usize, scale: f64, n: usize| {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, src - i0 as f64)
    };
    let cols: Vec<_> = (0..width).map(|c| axis(c, sx, img.width)).collect();
    let mut data = Vec::with_capacity(height * width);
    for r in 0..height {
        let (r0, r1, fy) = axis(r, sy, img.height);
        for &(c0, c1, fx) in &cols {
            let top = img.get(r0, c0) * (1.0 - fx) + img.get(r0, c1) * fx;
            let bottom = img.get(r1, c0) * (1.0 - fx) + img.get(r1, c1) * fx;
            data.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    Image2D::new(height, width, data)
}

#[inline]
pub(crate) fn nearest_index(dst: usize, src_len: usize, dst_len: usize) -> usize {
    (((2 * dst + 1) * src_len) / (2 * dst_len)).min(src_len - 1)
}

/// Nearest-neighbour resampling; keeps masks binary.
pub fn resize_nearest(mask: &BinaryMask, height: usize, width: usize) -> BinaryMask {
    BinaryMask::from_fn(height, width, |r, c| {
        mask.get(
            nearest_index(r, mask.height, height),
            nearest_index(c, mask.width, width),
        )
    })
}
