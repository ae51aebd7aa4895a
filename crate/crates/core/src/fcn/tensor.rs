use crate::error::{Error, Result};

/// Rank-3 feature map, `h x w x d`, stored row-major with channels
/// innermost.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub h: usize,
    pub w: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(h: usize, w: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * d {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("{} values for {h}x{w}x{d}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidData("tensor holds a non-finite value".into()));
        }
        Ok(Self { h, w, d, data })
    }

    pub fn zeros(h: usize, w: usize, d: usize) -> Self {
        Self {
            h,
            w,
            d,
            data: vec![0.0; h * w * d],
        }
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.d)
    }

    #[inline]
    pub fn idx(&self, r: usize, c: usize, ch: usize) -> usize {
        (r * self.w + c) * self.d + ch
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize, ch: usize) -> f64 {
        self.data[self.idx(r, c, ch)]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize, ch: usize) -> &mut f64 {
        let i = self.idx(r, c, ch);
        &mut self.data[i]
    }

    /// Single-channel tensor from an image.
    pub fn from_image(img: &crate::image::Image2D) -> Self {
        Self {
            h: img.height(),
            w: img.width(),
            d: 1,
            data: img.data().to_vec(),
        }
    }

    pub fn channel(&self, ch: usize) -> Vec<f64> {
        self.data.iter().skip(ch).step_by(self.d).copied().collect()
    }

    /// Mirror along the column axis.
    pub fn flip_horizontal(&self) -> Self {
        let mut out = Self::zeros(self.h, self.w, self.d);
        for r in 0..self.h {
            for c in 0..self.w {
                for ch in 0..self.d {
                    *out.at_mut(r, self.w - 1 - c, ch) = self.at(r, c, ch);
                }
            }
        }
        out
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}
