//! Motion-driven region-of-interest extraction.
//!
//! The heart is the only structure that moves consistently over a cardiac
//! cycle, so the ROI is found from the sum of absolute differences between
//! consecutive frames. That motion map is reduced to a coarse grid and fed
//! through a graph-based saliency model:
//!
//! 1. an activation chain whose edge weights are the log-ratio dissimilarity
//!    between grid cells times a Gaussian distance falloff;
//! 2. a concentration chain whose edge weights are the activation mass of the
//!    destination times the same falloff.
//!
//! Each chain is row-normalized and its equilibrium distribution (computed by
//! power iteration) is the saliency map. The most salient cells are then
//! boxed, padded and squared into a single crop shared by every frame of the
//! sequence.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{BinaryMask, Image2D, ImageSequence};

const LOG_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "camelCase")]
pub enum LevelMode {
    /// Keep cells whose saliency is at least `level * max`.
    #[default]
    OfMax,
    /// Keep cells at or above the `level` quantile of saliency values.
    Percentile,
    /// Keep the most salient cells until they hold `level` of the total mass.
    /// Unlike the other modes, a higher level keeps more cells.
    Mass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct RoiConfig {
    pub grid_size: usize,
    pub sigma_frac: f64,
    pub level: f64,
    pub level_mode: LevelMode,
    pub margin_frac: f64,
    pub min_side: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub refine: bool,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self {
            grid_size: 32,
            sigma_frac: 0.15,
            level: 0.9,
            level_mode: LevelMode::OfMax,
            margin_frac: 0.15,
            min_side: 32,
            tol: 1e-9,
            max_iter: 10_000,
            refine: true,
        }
    }
}

impl RoiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_size < 2 {
            return Err(Error::param("gridSize", "must be at least 2"));
        }
        if !(self.sigma_frac > 0.0 && self.sigma_frac.is_finite()) {
            return Err(Error::param("sigmaFrac", "must be positive"));
        }
        if !(self.level > 0.0 && self.level <= 1.0) {
            return Err(Error::param("level", "must lie in (0, 1]"));
        }
        if !(self.margin_frac >= 0.0 && self.margin_frac.is_finite()) {
            return Err(Error::param("marginFrac", "must be nonnegative"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::param("tol", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::param("maxIter", "must be positive"));
        }
        Ok(())
    }
}

/// Sum of absolute inter-frame differences over a cycle.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionMap(pub Image2D);

/// Equilibrium distribution of a saliency chain, laid out on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    /// Power-iteration steps taken.
    pub iterations: usize,
    pub converged: bool,
}

impl SaliencyMap {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Square crop in frame coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoiBox {
    pub top: usize,
    pub left: usize,
    pub side: usize,
}

impl RoiBox {
    /// The largest centered square that fits the frame.
    pub fn full_frame(height: usize, width: usize) -> Self {
        let side = height.min(width);
        Self {
            top: (height - side) / 2,
            left: (width - side) / 2,
            side,
        }
    }

    pub fn bottom(&self) -> usize {
        self.top + self.side
    }

    pub fn right(&self) -> usize {
        self.left + self.side
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.top..self.bottom()).contains(&row) && (self.left..self.right()).contains(&col)
    }

    pub fn contains_mask(&self, mask: &BinaryMask) -> bool {
        (0..mask.height()).all(|r| (0..mask.width()).all(|c| !mask.get(r, c) || self.contains(r, c)))
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.bottom() <= height && self.right() <= width
    }

    pub fn crop_image(&self, img: &Image2D) -> Result<Image2D> {
        img.crop(self.top, self.left, self.side, self.side)
    }

    pub fn crop_mask(&self, mask: &BinaryMask) -> Result<BinaryMask> {
        mask.crop(self.top, self.left, self.side, self.side)
    }
}

/// Row-stochastic transition matrix, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix {
    n: usize,
    data: Vec<f64>,
}

impl TransitionMatrix {
    /// Wraps a dense matrix after checking each row sums to 1 within 1e-9.
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n || n == 0 {
            return Err(Error::ShapeMismatch {
                op: "transition matrix",
                detail: format!("{} entries for {n} states", data.len()),
            });
        }
        for (row, chunk) in data.chunks_exact(n).enumerate() {
            let sum: f64 = chunk.iter().sum();
            if chunk.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::NotStochastic { row, sum });
            }
        }
        Ok(Self { n, data })
    }

    /// Normalizes nonnegative weights row by row; all-zero rows become uniform.
    pub fn from_weights(n: usize, mut weights: Vec<f64>) -> Self {
        assert_eq!(weights.len(), n * n);
        for row in weights.chunks_exact_mut(n) {
            let sum: f64 = row.iter().sum();
            if sum > 0.0 && sum.is_finite() {
                row.iter_mut().for_each(|w| *w /= sum);
            } else {
                row.fill(1.0 / n as f64);
            }
        }
        Self { n, data: weights }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// `dist^T P`.
    pub fn step(&self, dist: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        for (i, &mass) in dist.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            for (o, &p) in out.iter_mut().zip(self.row(i)) {
                *o += mass * p;
            }
        }
    }
}

/// Elementwise `|a - b|`.
pub fn abs_diff(a: &Image2D, b: &Image2D) -> Result<Image2D> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch {
            expected: a.dims(),
            actual: b.dims(),
        });
    }
    Image2D::new(
        a.height(),
        a.width(),
        a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).collect(),
    )
}

/// Sum of `abs_diff` over the `N - 1` consecutive frame pairs.
pub fn aggregate_motion(seq: &ImageSequence) -> Result<MotionMap> {
    if seq.len() < 2 {
        return Err(Error::TooFewFrames(seq.sequence_id.clone()));
    }
    let (h, w) = seq.dims();
    let mut acc = vec![0.0; h * w];
    for pair in seq.frames().windows(2) {
        let d = abs_diff(&pair[0], &pair[1])?;
        acc.iter_mut().zip(d.data()).for_each(|(a, v)| *a += v);
    }
    Ok(MotionMap(Image2D::new(h, w, acc)?))
}

/// Pixel span `[start, end)` of grid cell `i` along an axis of `len` pixels.
#[inline]
pub fn cell_span(i: usize, grid: usize, len: usize) -> (usize, usize) {
    (i * len / grid, (i + 1) * len / grid)
}

/// Area-average of the motion map onto a `grid x grid` lattice.
pub fn downsample(m: &MotionMap, grid: usize) -> Result<Vec<f64>> {
    let (h, w) = m.0.dims();
    if grid < 2 {
        return Err(Error::param("gridSize", format!("{grid} < 2")));
    }
    if h < grid || w < grid {
        return Err(Error::param(
            "gridSize",
            format!("{grid} exceeds the {h}x{w} motion map"),
        ));
    }
    let mut out = Vec::with_capacity(grid * grid);
    for gi in 0..grid {
        let (r0, r1) = cell_span(gi, grid, h);
        for gj in 0..grid {
            let (c0, c1) = cell_span(gj, grid, w);
            let mut sum = 0.0;
            for r in r0..r1 {
                sum += m.0.data()[r * w + c0..r * w + c1].iter().sum::<f64>();
            }
            out.push(sum / ((r1 - r0) * (c1 - c0)) as f64);
        }
    }
    Ok(out)
}

/// Gaussian falloff `F(dr, dc)` for every offset on a `grid x grid` lattice,
/// indexed by `|dr| * grid + |dc|`.
fn falloff_table(grid: usize, sigma_frac: f64) -> Vec<f64> {
    let sigma = sigma_frac * grid as f64;
    let denom = 2.0 * sigma * sigma;
    let mut t = Vec::with_capacity(grid * grid);
    for dr in 0..grid {
        for dc in 0..grid {
            t.push((-((dr * dr + dc * dc) as f64) / denom).exp());
        }
    }
    t
}

/// Fully connected chain over grid cells with weight
/// `f(src, dst) * F(src - dst)`, row-normalized. With `wrap` the offsets are
/// measured on the torus, so every cell sees the same falloff profile.
fn falloff_chain(grid: usize, sigma_frac: f64, wrap: bool, f: impl Fn(usize, usize) -> f64) -> TransitionMatrix {
    let n = grid * grid;
    let table = falloff_table(grid, sigma_frac);
    let mut weights = vec![0.0; n * n];
    for i in 0..n {
        let (ri, ci) = (i / grid, i % grid);
        let row = &mut weights[i * n..(i + 1) * n];
        for (j, w) in row.iter_mut().enumerate() {
            let (rj, cj) = (j / grid, j % grid);
            let (mut dr, mut dc) = (ri.abs_diff(rj), ci.abs_diff(cj));
            if wrap {
                dr = dr.min(grid - dr);
                dc = dc.min(grid - dc);
            }
            *w = f(i, j) * table[dr * grid + dc];
        }
    }
    TransitionMatrix::from_weights(n, weights)
}

/// Activation chain over grid cell values using log-ratio dissimilarity.
pub fn activation_chain(cells: &[f64], grid: usize, sigma_frac: f64) -> Result<TransitionMatrix> {
    if grid < 2 {
        return Err(Error::param("gridSize", format!("{grid} < 2")));
    }
    if cells.len() != grid * grid {
        return Err(Error::ShapeMismatch {
            op: "activation chain",
            detail: format!("{} cells for a {grid}x{grid} grid", cells.len()),
        });
    }
    let logs: Vec<f64> = cells.iter().map(|&v| (v + LOG_FLOOR).ln()).collect();
    Ok(falloff_chain(grid, sigma_frac, false, |i, j| (logs[i] - logs[j]).abs()))
}

/// Downsamples the motion map and builds its activation chain.
pub fn build_saliency_graph(m: &MotionMap, grid: usize, sigma_frac: f64) -> Result<TransitionMatrix> {
    activation_chain(&downsample(m, grid)?, grid, sigma_frac)
}

/// Stationary distribution by power iteration from the uniform distribution.
///
/// Stops once the L1 change between iterates drops below `tol` or after
/// `max_iter` steps. The result is laid out as a `height x width` map, which
/// must cover every state.
pub fn equilibrium(
    transition: &TransitionMatrix,
    height: usize,
    width: usize,
    tol: f64,
    max_iter: usize,
) -> Result<SaliencyMap> {
    let n = transition.len();
    if height * width != n {
        return Err(Error::ShapeMismatch {
            op: "equilibrium",
            detail: format!("{height}x{width} map for {n} states"),
        });
    }
    let mut dist = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        transition.step(&dist, &mut next);
        let total: f64 = next.iter().sum();
        next.iter_mut().for_each(|v| *v /= total);
        iterations += 1;
        let change: f64 = dist.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut dist, &mut next);
        if change < tol {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("power iteration stopped at {max_iter} steps without converging");
    }
    Ok(SaliencyMap {
        height,
        width,
        values: dist,
        iterations,
        converged,
    })
}

/// Second chain concentrating mass where activation is high: weight from
/// `i` to `j` is `s(j) * F(i - j)`.
///
/// Offsets wrap around the grid edges. On a bounded grid the border cells
/// have fewer neighbours and a uniform input would drift toward the centre.
pub fn saliency_refine(s: &SaliencyMap, sigma_frac: f64, tol: f64, max_iter: usize) -> Result<SaliencyMap> {
    if s.height != s.width || s.height < 2 {
        return Err(Error::param(
            "gridSize",
            "saliency grid must be square and at least 2x2",
        ));
    }
    let grid = s.height;
    let chain = falloff_chain(grid, sigma_frac, true, |_, j| s.values[j]);
    equilibrium(&chain, grid, grid, tol, max_iter)
}

/// Binary grid mask of the most salient cells.
pub fn threshold_saliency(s: &SaliencyMap, level: f64, mode: LevelMode) -> Result<BinaryMask> {
    if !(level > 0.0 && level <= 1.0) {
        return Err(Error::param("level", format!("{level} is outside (0, 1]")));
    }
    let cut = match mode {
        LevelMode::OfMax => level * s.max(),
        LevelMode::Percentile => {
            let mut sorted = s.values.clone();
            sorted.sort_by(f64::total_cmp);
            let idx = ((level * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len()) - 1;
            sorted[idx]
        }
        LevelMode::Mass => {
            let mut sorted = s.values.clone();
            sorted.sort_by(|a, b| b.total_cmp(a));
            let total: f64 = sorted.iter().sum();
            let mut acc = 0.0;
            let mut cut = sorted[0];
            for &v in &sorted {
                cut = v;
                acc += v;
                if acc >= level * total {
                    break;
                }
            }
            cut
        }
    };
    Ok(BinaryMask::from_fn(s.height, s.width, |r, c| s.get(r, c) >= cut))
}

/// Expands `[start, end)` to `len` pixels keeping the same midpoint (rounded
/// toward the start).
fn grow_span(start: i64, end: i64, len: i64) -> (i64, i64) {
    let extra = len - (end - start);
    if extra <= 0 {
        return (start, end);
    }
    let s = start - extra / 2;
    (s, s + len)
}

/// Fits a square frame-space box around the set cells of a grid mask.
///
/// The tight bounding rectangle of set cells (each cell contributing its
/// whole pixel footprint) is padded by `margin_frac * max(frame_h, frame_w)`
/// on every side, squared by growing its shorter side symmetrically, grown to
/// `min_side`, then shifted inside the frame. It is shrunk only when the
/// side exceeds the frame.
pub fn fit_roi(mask: &BinaryMask, frame_h: usize, frame_w: usize, margin_frac: f64, min_side: usize) -> Result<RoiBox> {
    let (gh, gw) = mask.dims();
    if frame_h < gh || frame_w < gw || gh == 0 || gw == 0 {
        return Err(Error::param(
            "frame",
            format!("{frame_h}x{frame_w} frame is smaller than the {gh}x{gw} grid"),
        ));
    }
    let mut bounds: Option<(usize, usize, usize, usize)> = None;
    for r in 0..gh {
        for c in 0..gw {
            if mask.get(r, c) {
                bounds = Some(match bounds {
                    None => (r, r, c, c),
                    Some((r0, r1, c0, c1)) => (r0.min(r), r1.max(r), c0.min(c), c1.max(c)),
                });
            }
        }
    }
    let (r0, r1, c0, c1) = bounds.ok_or(Error::EmptyMask)?;
    let margin = margin_frac * frame_h.max(frame_w) as f64;
    let top = (cell_span(r0, gh, frame_h).0 as f64 - margin).floor() as i64;
    let bottom = (cell_span(r1, gh, frame_h).1 as f64 + margin).ceil() as i64;
    let left = (cell_span(c0, gw, frame_w).0 as f64 - margin).floor() as i64;
    let right = (cell_span(c1, gw, frame_w).1 as f64 + margin).ceil() as i64;

    let limit = frame_h.min(frame_w) as i64;
    let mut side = (bottom - top).max(right - left).max(min_side as i64);
    let (mut top, _) = grow_span(top, bottom, side);
    let (mut left, _) = grow_span(left, right, side);
    if side > limit {
        // shrink about the center
        top += (side - limit) / 2;
        left += (side - limit) / 2;
        side = limit;
    }
    let top = top.clamp(0, frame_h as i64 - side);
    let left = left.clamp(0, frame_w as i64 - side);
    Ok(RoiBox {
        top: top as usize,
        left: left as usize,
        side: side as usize,
    })
}

/// Everything produced while locating the ROI of one sequence.
#[derive(Debug, Clone)]
pub struct RoiExtraction {
    pub roi: RoiBox,
    /// Set when no usable salient region was found and the box is the full
    /// frame.
    pub fallback: bool,
    pub motion: MotionMap,
    pub saliency: Option<SaliencyMap>,
    pub cropped: ImageSequence,
}

/// Locates the heart from motion only.
pub fn locate_roi(seq: &ImageSequence, cfg: &RoiConfig) -> Result<(RoiBox, bool, MotionMap, Option<SaliencyMap>)> {
    cfg.validate()?;
    let (h, w) = seq.dims();
    let motion = aggregate_motion(seq)?;
    let peak = motion.0.min_max().map_or(0.0, |(_, hi)| hi);
    if peak <= 0.0 {
        log::warn!("sequence `{}` shows no motion; using the full frame", seq.sequence_id);
        return Ok((RoiBox::full_frame(h, w), true, motion, None));
    }
    let grid = cfg.grid_size;
    let chain = build_saliency_graph(&motion, grid, cfg.sigma_frac)?;
    let mut saliency = equilibrium(&chain, grid, grid, cfg.tol, cfg.max_iter)?;
    if cfg.refine {
        saliency = saliency_refine(&saliency, cfg.sigma_frac, cfg.tol, cfg.max_iter)?;
    }
    let mask = threshold_saliency(&saliency, cfg.level, cfg.level_mode)?;
    match fit_roi(&mask, h, w, cfg.margin_frac, cfg.min_side) {
        Ok(roi) => Ok((roi, false, motion, Some(saliency))),
        Err(e) => {
            log::warn!(
                "sequence `{}`: ROI fit failed ({e}); using the full frame",
                seq.sequence_id
            );
            Ok((RoiBox::full_frame(h, w), true, motion, Some(saliency)))
        }
    }
}

/// Crops every frame and mask of a sequence to the same box.
pub fn crop_sequence(seq: &ImageSequence, roi: &RoiBox) -> Result<ImageSequence> {
    let frames = seq
        .frames()
        .iter()
        .map(|f| roi.crop_image(f))
        .collect::<Result<Vec<_>>>()?;
    let gt = seq
        .ground_truth()
        .map(|gt| {
            gt.iter()
                .map(|m| m.as_ref().map(|m| roi.crop_mask(m)).transpose())
                .collect::<Result<Vec<_>>>()
        })
        .transpose()?;
    ImageSequence::new(seq.sequence_id.clone(), frames, gt)
}

/// Locates the ROI of a preprocessed sequence and crops it.
pub fn extract_roi(seq: &ImageSequence, cfg: &RoiConfig) -> Result<RoiExtraction> {
    let (roi, fallback, motion, saliency) = locate_roi(seq, cfg)?;
    let cropped = crop_sequence(seq, &roi)?;
    Ok(RoiExtraction {
        roi,
        fallback,
        motion,
        saliency,
        cropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_map(grid: usize) -> SaliencyMap {
        let n = grid * grid;
        SaliencyMap {
            height: grid,
            width: grid,
            values: vec![1.0 / n as f64; n],
            iterations: 0,
            converged: true,
        }
    }

    fn spike_map(grid: usize, at: usize) -> SaliencyMap {
        let mut s = uniform_map(grid);
        s.values.fill(0.0);
        s.values[at] = 1.0;
        s
    }

    #[test]
    fn abs_diff_cases() {
        let a = Image2D::filled(3, 3, 1.0);
        let b = Image2D::filled(3, 3, 3.0);
        assert!(abs_diff(&a, &a).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(abs_diff(&a, &b).unwrap().data().iter().all(|&v| v == 2.0));
        assert!(abs_diff(&a, &Image2D::zeros(2, 3)).is_err());
    }

    #[test]
    fn abs_diff_matches_loop_and_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Image2D::from_fn(6, 7, |_, _| rng.random::<f64>()).unwrap();
        let b = Image2D::from_fn(6, 7, |_, _| rng.random::<f64>()).unwrap();
        let d = abs_diff(&a, &b).unwrap();
        for r in 0..6 {
            for c in 0..7 {
                let expected = if a.get(r, c) > b.get(r, c) {
                    a.get(r, c) - b.get(r, c)
                } else {
                    b.get(r, c) - a.get(r, c)
                };
                assert_eq!(d.get(r, c), expected);
            }
        }
        assert_eq!(d, abs_diff(&b, &a).unwrap());
    }

    #[test]
    fn aggregate_motion_cases() {
        let f = Image2D::filled(4, 4, 0.3);
        let stat = ImageSequence::new("s", vec![f.clone(); 5], None).unwrap();
        assert!(aggregate_motion(&stat).unwrap().0.data().iter().all(|&v| v == 0.0));

        let frames: Vec<Image2D> = (0..3)
            .map(|k| Image2D::from_fn(4, 4, |r, c| if (r, c) == (1, 2) { k as f64 } else { 0.0 }).unwrap())
            .collect();
        let seq = ImageSequence::new("p", frames.clone(), None).unwrap();
        let m = aggregate_motion(&seq).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(m.0.get(r, c), if (r, c) == (1, 2) { 2.0 } else { 0.0 });
            }
        }
        let mut rev = frames;
        rev.reverse();
        let rev = ImageSequence::new("p", rev, None).unwrap();
        assert_eq!(aggregate_motion(&rev).unwrap(), m);

        let one = ImageSequence::new("one", vec![f], None).unwrap();
        assert!(matches!(aggregate_motion(&one), Err(Error::TooFewFrames(_))));
    }

    #[test]
    fn constant_motion_gives_uniform_rows() {
        let m = MotionMap(Image2D::filled(64, 64, 0.7));
        let p = build_saliency_graph(&m, 8, 0.15).unwrap();
        for i in 0..p.len() {
            assert!(p.row(i).iter().all(|&v| (v - 1.0 / 64.0).abs() < 1e-15));
        }
    }

    #[test]
    fn two_by_two_graph_matches_hand_computation() {
        let e = std::f64::consts::E;
        let cells = [1.0, 1.0, 1.0, e];
        let p = activation_chain(&cells, 2, 0.5).unwrap();
        // sigma = 1: F(1 step) = exp(-1/2), F(diagonal) = exp(-1)
        let d = ((e + LOG_FLOOR) / (1.0 + LOG_FLOOR)).ln();
        let w = [d * (-1.0f64).exp(), d * (-0.5f64).exp(), d * (-0.5f64).exp(), 0.0];
        let total: f64 = w.iter().sum();
        for (j, wj) in w.iter().enumerate() {
            assert!((p.row(3)[j] - wj / total).abs() < 1e-15);
        }
        // node 0's only dissimilar neighbour is node 3
        assert!((p.row(0)[3] - 1.0).abs() < 1e-15);
        assert!(activation_chain(&cells, 1, 0.5).is_err());
    }

    #[test]
    fn rows_sum_to_one_for_random_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = MotionMap(Image2D::from_fn(40, 40, |_, _| rng.random::<f64>() * 3.0).unwrap());
        let p = build_saliency_graph(&m, 10, 0.15).unwrap();
        for i in 0..p.len() {
            assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn equilibrium_simple_chains() {
        let p = TransitionMatrix::new(2, vec![0.5, 0.5, 0.5, 0.5]).unwrap();
        let s = equilibrium(&p, 1, 2, 1e-9, 100).unwrap();
        assert_eq!(s.values, vec![0.5, 0.5]);

        let n = 9;
        let p = TransitionMatrix::from_weights(n, vec![1.0; n * n]);
        let s = equilibrium(&p, 3, 3, 1e-9, 100).unwrap();
        assert!(s.values.iter().all(|&v| (v - 1.0 / 9.0).abs() < 1e-15));

        assert!(matches!(
            TransitionMatrix::new(2, vec![0.5, 0.6, 0.5, 0.5]),
            Err(Error::NotStochastic { row: 0, .. })
        ));
        assert!(TransitionMatrix::new(2, vec![1.5, -0.5, 0.5, 0.5]).is_err());
    }

    #[test]
    fn equilibrium_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 25;
        let p = TransitionMatrix::from_weights(n, (0..n * n).map(|_| rng.random::<f64>()).collect());
        let tol = 1e-10;
        let s = equilibrium(&p, 5, 5, tol, 10_000).unwrap();
        assert!(s.converged);
        let mut next = vec![0.0; n];
        p.step(&s.values, &mut next);
        let resid: f64 = next.iter().zip(&s.values).map(|(a, b)| (a - b).abs()).sum();
        assert!(resid < 10.0 * tol);
        assert!((s.values.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn refine_cases() {
        let u = refine_uniform();
        assert!(u.values.iter().all(|&v| (v - 1.0 / 36.0).abs() < 1e-12));

        let spike = spike_map(6, 14);
        let r = saliency_refine(&spike, 0.15, 1e-12, 10_000).unwrap();
        assert!(r.values[14] > 1.0 / 36.0);
        assert!((r.values.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(r.values.iter().all(|&v| v >= 0.0));
    }

    fn refine_uniform() -> SaliencyMap {
        saliency_refine(&uniform_map(6), 0.15, 1e-12, 10_000).unwrap()
    }

    #[test]
    fn refine_with_smeared_spike_concentrates() {
        // small-grid oracle: iterate the refined chain by hand
        let grid = 4;
        let mut s = uniform_map(grid);
        s.values = vec![0.02; 16];
        s.values[5] = 1.0 - 0.02 * 15.0;
        let r = saliency_refine(&s, 0.3, 1e-13, 100_000).unwrap();
        let sigma = 0.3 * grid as f64;
        let f = |i: usize, j: usize| {
            let torus = |a: usize, b: usize| {
                let d = a.abs_diff(b);
                d.min(grid - d) as f64
            };
            let (dr, dc) = (torus(i / grid, j / grid), torus(i % grid, j % grid));
            (-(dr * dr + dc * dc) / (2.0 * sigma * sigma)).exp()
        };
        let mut dist = vec![1.0 / 16.0; 16];
        for _ in 0..5000 {
            let mut next = vec![0.0; 16];
            for (i, &di) in dist.iter().enumerate() {
                let row_sum: f64 = (0..16).map(|j| s.values[j] * f(i, j)).sum();
                for (j, nj) in next.iter_mut().enumerate() {
                    *nj += di * s.values[j] * f(i, j) / row_sum;
                }
            }
            dist = next;
        }
        for (a, b) in r.values.iter().zip(&dist) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(r.values[5] > 1.0 / 16.0);
    }

    #[test]
    fn threshold_cases() {
        let u = uniform_map(4);
        assert_eq!(threshold_saliency(&u, 0.9, LevelMode::OfMax).unwrap().count(), 16);
        let s = spike_map(4, 6);
        let m = threshold_saliency(&s, 0.9, LevelMode::OfMax).unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(1, 2));
        assert!(threshold_saliency(&s, 0.0, LevelMode::OfMax).is_err());
        assert!(threshold_saliency(&s, 1.1, LevelMode::OfMax).is_err());
        assert_eq!(threshold_saliency(&s, 0.5, LevelMode::Mass).unwrap().count(), 1);
        let mut ramp = uniform_map(2);
        ramp.values = vec![0.1, 0.2, 0.3, 0.4];
        assert_eq!(
            threshold_saliency(&ramp, 0.5, LevelMode::Percentile).unwrap().count(),
            3
        );
        assert_eq!(threshold_saliency(&ramp, 0.6, LevelMode::Mass).unwrap().count(), 2);
    }

    #[test]
    fn fit_roi_single_centre_cell() {
        let mut mask = BinaryMask::zeros(32, 32);
        mask.set(16, 16, true);
        let b = fit_roi(&mask, 256, 256, 0.0, 0).unwrap();
        assert_eq!(
            b,
            RoiBox {
                top: 128,
                left: 128,
                side: 8
            }
        );
    }

    #[test]
    fn fit_roi_squares_the_short_side() {
        let mask = BinaryMask::from_fn(32, 32, |r, c| (2..=5).contains(&r) && (3..=4).contains(&c));
        let b = fit_roi(&mask, 256, 256, 0.0, 0).unwrap();
        assert_eq!(
            b,
            RoiBox {
                top: 16,
                left: 16,
                side: 32
            }
        );
    }

    #[test]
    fn fit_roi_clamps_at_corner() {
        let mut mask = BinaryMask::zeros(32, 32);
        mask.set(0, 31, true);
        let b = fit_roi(&mask, 256, 256, 0.15, 32).unwrap();
        assert!(b.fits(256, 256));
        assert_eq!(b.top, 0);
        assert_eq!(b.right(), 256);
        // the whole margin fits before clamping: 8 + 2 * 38.4 -> 86 px
        assert_eq!(b.side, 86);
        assert!(matches!(
            fit_roi(&BinaryMask::zeros(32, 32), 256, 256, 0.1, 32),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn fit_roi_shrinks_only_when_too_big() {
        let mask = BinaryMask::from_fn(32, 32, |_, _| true);
        let b = fit_roi(&mask, 256, 200, 0.2, 32).unwrap();
        assert_eq!(b.side, 200);
        assert!(b.fits(256, 200));
    }

    #[test]
    fn static_sequence_falls_back() {
        let f = Image2D::filled(64, 64, 0.5);
        let seq = ImageSequence::new("s", vec![f; 4], None).unwrap();
        let r = extract_roi(&seq, &RoiConfig::default()).unwrap();
        assert!(r.fallback);
        assert_eq!(
            r.roi,
            RoiBox {
                top: 0,
                left: 0,
                side: 64
            }
        );
    }

    fn arb_mask() -> impl Strategy<Value = BinaryMask> {
        prop::collection::vec(any::<bool>(), 64).prop_map(|v| {
            let mut m = BinaryMask::from_fn(8, 8, |r, c| v[r * 8 + c]);
            if m.is_all_zero() {
                m.set(3, 3, true);
            }
            m
        })
    }

    proptest! {
        #[test]
        fn fit_roi_is_square_inside_and_covering(
            mask in arb_mask(), fh in 8usize..120, fw in 8usize..120, margin in 0.0f64..0.4, min_side in 0usize..40
        ) {
            let b = fit_roi(&mask, fh, fw, margin, min_side).unwrap();
            prop_assert!(b.fits(fh, fw));
            prop_assert!(b.side >= min_side.min(fh.min(fw)));
            let covers_all = b.side < fh.min(fw);
            for r in 0..8 {
                for c in 0..8 {
                    if mask.get(r, c) && covers_all {
                        let (r0, r1) = cell_span(r, 8, fh);
                        let (c0, c1) = cell_span(c, 8, fw);
                        prop_assert!(b.top <= r0 && r1 <= b.bottom());
                        prop_assert!(b.left <= c0 && c1 <= b.right());
                    }
                }
            }
        }

        #[test]
        fn threshold_is_monotone_in_level(values in prop::collection::vec(0.0f64..1.0, 16), lo in 0.01f64..1.0, hi in 0.01f64..1.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let total: f64 = values.iter().sum::<f64>() + 1e-9;
            let s = SaliencyMap {
                height: 4, width: 4,
                values: values.iter().map(|v| (v + 1e-9 / 16.0) / total).collect(),
                iterations: 0, converged: true,
            };
            for mode in [LevelMode::OfMax, LevelMode::Percentile] {
                let a = threshold_saliency(&s, lo, mode).unwrap();
                let b = threshold_saliency(&s, hi, mode).unwrap();
                for i in 0..16 {
                    prop_assert!(a.data()[i] >= b.data()[i], "{:?}", mode);
                }
            }
            // mass mode keeps more cells as the retained mass grows
            let a = threshold_saliency(&s, lo, LevelMode::Mass).unwrap();
            let b = threshold_saliency(&s, hi, LevelMode::Mass).unwrap();
            for i in 0..16 {
                prop_assert!(a.data()[i] <= b.data()[i]);
            }
        }
    }
}
