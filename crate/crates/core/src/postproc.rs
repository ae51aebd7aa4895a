//! Turning a probability map into a single LV region.
//!
//! The map is split by Otsu's threshold, the foreground is labelled into
//! 8-connected components, and the component whose boundary is most nearly
//! equidistant from its centroid wins. Roundness is the coefficient of
//! variation `sigma_D / mu_D` of those distances, so a perfect circle scores
//! 0 and lower is rounder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fcn::{Placement, ProbabilityMap};
use crate::image::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "camelCase")]
pub enum RoundnessMode {
    /// Distances from boundary pixels only.
    #[default]
    Boundary,
    /// Distances from every pixel of the component.
    AllPixels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase", deny_unknown_fields, default)]
pub struct PostprocConfig {
    pub otsu_bins: usize,
    pub roundness_mode: RoundnessMode,
    /// Components smaller than this are ignored unless nothing larger exists.
    pub min_area: usize,
    /// Components whose mean probability falls below this are discarded.
    pub min_component_prob: f64,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            otsu_bins: 256,
            roundness_mode: RoundnessMode::Boundary,
            min_area: 10,
            min_component_prob: 0.5,
        }
    }
}

impl PostprocConfig {
    pub fn validate(&self) -> Result<()> {
        if self.otsu_bins < 2 {
            return Err(Error::param("otsuBins", "must be at least 2"));
        }
        if !(0.0..=1.0).contains(&self.min_component_prob) {
            return Err(Error::param("minComponentProb", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OtsuResult {
    pub threshold: f64,
    pub mask: BinaryMask,
    /// No threshold separates the map into two nonempty classes with
    /// positive between-class variance; the mask is all ones.
    pub degenerate: bool,
}

/// Between-class variance of the split at bin edge `k`, up to the constant
/// factor `1 / (N^2 * bins^2)`, as an exact fraction `(num, den)`.
///
/// With `n0, n1` the class counts and `s0, s1` the sums of bin indices,
/// `w0 w1 (mu0 - mu1)^2 = (n0 s1 - n1 s0)^2 / (n0 n1) / N^2` in units of bins.
fn split_score(n0: u64, s0: u64, n1: u64, s1: u64) -> Option<(u128, u128)> {
    if n0 == 0 || n1 == 0 {
        return None;
    }
    let diff = (n0 as i128 * s1 as i128 - n1 as i128 * s0 as i128).unsigned_abs();
    Some((diff.checked_mul(diff)?, n0 as u128 * n1 as u128))
}

/// `a > b` for fractions with positive denominators.
fn frac_gt(a: (u128, u128), b: (u128, u128)) -> bool {
    match (a.0.checked_mul(b.1), b.0.checked_mul(a.1)) {
        (Some(x), Some(y)) => x > y,
        _ => (a.0 as f64 / a.1 as f64) > (b.0 as f64 / b.1 as f64),
    }
}

/// Otsu's threshold over a `bins`-bin histogram of a `[0, 1]` map.
///
/// Candidate thresholds are the bin edges `k / bins`, `k = 0..bins`; pixels
/// with `p >= k / bins` form the upper class. The between-class variance is
/// compared exactly in integer arithmetic and ties go to the lowest edge.
pub fn otsu_threshold(p: &ProbabilityMap, bins: usize) -> Result<OtsuResult> {
    let hist = crate::image::histogram_of(&p.values, bins, 0.0, 1.0)?;
    let n: u64 = hist.iter().sum();
    let s: u64 = hist.iter().enumerate().map(|(b, &c)| b as u64 * c).sum();
    let mut best: Option<(usize, (u128, u128))> = None;
    let (mut n0, mut s0) = (0u64, 0u64);
    for (k, &count) in hist.iter().enumerate() {
        if let Some(score) = split_score(n0, s0, n - n0, s - s0) {
            if score.0 > 0 && best.is_none_or(|(_, b)| frac_gt(score, b)) {
                best = Some((k, score));
            }
        }
        n0 += count;
        s0 += k as u64 * count;
    }
    Ok(match best {
        Some((k, _)) => {
            let threshold = k as f64 / bins as f64;
            OtsuResult {
                threshold,
                mask: p.threshold(threshold),
                degenerate: false,
            }
        }
        None => {
            let lo = p.values.iter().copied().fold(f64::INFINITY, f64::min);
            OtsuResult {
                threshold: lo,
                mask: BinaryMask::from_fn(p.height, p.width, |_, _| true),
                degenerate: true,
            }
        }
    })
}

/// An 8-connected foreground region.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    /// 1-based, in raster order of each component's first pixel.
    pub label: usize,
    pub pixels: Vec<(usize, usize)>,
    pub centroid: (f64, f64),
    /// Pixels with a background 4-neighbour or on the image border.
    pub boundary: Vec<(usize, usize)>,
    /// Boundary-mode roundness.
    pub roundness: f64,
}

impl Component {
    pub fn area(&self) -> usize {
        self.pixels.len()
    }

    fn from_pixels(label: usize, pixels: Vec<(usize, usize)>, mask: &BinaryMask) -> Self {
        let n = pixels.len() as f64;
        let (sr, sc) = pixels
            .iter()
            .fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
        let (h, w) = mask.dims();
        let boundary = pixels
            .iter()
            .copied()
            .filter(|&(r, c)| {
                r == 0
                    || c == 0
                    || r + 1 == h
                    || c + 1 == w
                    || !mask.get(r - 1, c)
                    || !mask.get(r + 1, c)
                    || !mask.get(r, c - 1)
                    || !mask.get(r, c + 1)
            })
            .collect();
        let mut comp = Self {
            label,
            pixels,
            centroid: (sr / n, sc / n),
            boundary,
            roundness: f64::INFINITY,
        };
        comp.roundness = roundness(&comp, RoundnessMode::Boundary);
        comp
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // keep the smaller root so labels follow raster order
        if ra < rb {
            self.parent[rb] = ra;
        } else if rb < ra {
            self.parent[ra] = rb;
        }
    }
}

/// Two-pass 8-connected labelling.
pub fn connected_components(mask: &BinaryMask) -> Vec<Component> {
    let (h, w) = mask.dims();
    const NONE: usize = usize::MAX;
    let mut provisional = vec![NONE; h * w];
    let mut sets = DisjointSet { parent: Vec::new() };
    for r in 0..h {
        for c in 0..w {
            if !mask.get(r, c) {
                continue;
            }
            // already-visited 8-neighbours: W, NW, N, NE
            let mut neighbours = [NONE; 4];
            if c > 0 {
                neighbours[0] = provisional[r * w + c - 1];
            }
            if r > 0 {
                if c > 0 {
                    neighbours[1] = provisional[(r - 1) * w + c - 1];
                }
                neighbours[2] = provisional[(r - 1) * w + c];
                if c + 1 < w {
                    neighbours[3] = provisional[(r - 1) * w + c + 1];
                }
            }
            let label = match neighbours.iter().copied().filter(|&l| l != NONE).min() {
                Some(l) => {
                    for &n in neighbours.iter().filter(|&&n| n != NONE) {
                        sets.union(l, n);
                    }
                    l
                }
                None => {
                    sets.parent.push(sets.parent.len());
                    sets.parent.len() - 1
                }
            };
            provisional[r * w + c] = label;
        }
    }
    let mut root_to_index = vec![NONE; sets.parent.len()];
    let mut groups: Vec<Vec<(usize, usize)>> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let l = provisional[r * w + c];
            if l == NONE {
                continue;
            }
            let root = sets.find(l);
            if root_to_index[root] == NONE {
                root_to_index[root] = groups.len();
                groups.push(Vec::new());
            }
            groups[root_to_index[root]].push((r, c));
        }
    }
    groups
        .into_iter()
        .enumerate()
        .map(|(i, px)| Component::from_pixels(i + 1, px, mask))
        .collect()
}

/// `sigma_D / mu_D` of centroid distances (population standard deviation).
///
/// Degenerate components whose mean distance is zero score `+inf`.
pub fn roundness(c: &Component, mode: RoundnessMode) -> f64 {
    let set = match mode {
        RoundnessMode::Boundary => &c.boundary,
        RoundnessMode::AllPixels => &c.pixels,
    };
    roundness_of_points(set, c.centroid)
}

pub fn roundness_of_points(points: &[(usize, usize)], centroid: (f64, f64)) -> f64 {
    if points.is_empty() {
        return f64::INFINITY;
    }
    let d: Vec<f64> = points
        .iter()
        .map(|&(r, c)| (r as f64 - centroid.0).hypot(c as f64 - centroid.1))
        .collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    if !(mean > 0.0) {
        return f64::INFINITY;
    }
    let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt() / mean
}

/// Index of the roundest component.
///
/// Components below `min_area` are skipped unless every component is that
/// small. Ties prefer the larger area, then the lower label.
pub fn select_region(components: &[Component], mode: RoundnessMode, min_area: usize) -> Result<usize> {
    if components.is_empty() {
        return Err(Error::NoComponents);
    }
    let any_large = components.iter().any(|c| c.area() >= min_area);
    components
        .iter()
        .enumerate()
        .filter(|(_, c)| !any_large || c.area() >= min_area)
        .map(|(i, c)| (i, roundness(c, mode)))
        .min_by(|&(i, ri), &(j, rj)| {
            ri.total_cmp(&rj)
                .then(components[j].area().cmp(&components[i].area()))
                .then(components[i].label.cmp(&components[j].label))
        })
        .map(|(i, _)| i)
        .ok_or(Error::NoComponents)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PostprocessOutcome {
    pub otsu: OtsuResult,
    /// The selected component at network resolution.
    pub selected: BinaryMask,
    /// The selected component in frame coordinates.
    pub frame_mask: BinaryMask,
    /// No acceptable component was found; both masks are empty.
    pub empty: bool,
}

/// Otsu, labelling, roundness selection and placement back into the frame.
pub fn postprocess(p: &ProbabilityMap, placement: &Placement, cfg: &PostprocConfig) -> Result<PostprocessOutcome> {
    cfg.validate()?;
    let otsu = otsu_threshold(p, cfg.otsu_bins)?;
    let components: Vec<Component> = connected_components(&otsu.mask)
        .into_iter()
        .filter(|c| {
            let mean = c.pixels.iter().map(|&(r, col)| p.get(r, col)).sum::<f64>() / c.area() as f64;
            mean >= cfg.min_component_prob
        })
        .collect();
    let (selected, empty) = match select_region(&components, cfg.roundness_mode, cfg.min_area) {
        Ok(i) => {
            let mut m = BinaryMask::zeros(p.height, p.width);
            for &(r, c) in &components[i].pixels {
                m.set(r, c, true);
            }
            (m, false)
        }
        Err(Error::NoComponents) => (BinaryMask::zeros(p.height, p.width), true),
        Err(e) => return Err(e),
    };
    let frame_mask = placement.mask_to_frame(&selected)?;
    Ok(PostprocessOutcome {
        otsu,
        selected,
        frame_mask,
        empty,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roi::RoiBox;

    fn disk(size: usize, cy: f64, cx: f64, r: f64) -> BinaryMask {
        BinaryMask::from_fn(size, size, |y, x| {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            dy * dy + dx * dx <= r * r
        })
    }

    fn map_from(mask: &BinaryMask, fg: f64, bg: f64) -> ProbabilityMap {
        ProbabilityMap::new(
            mask.height(),
            mask.width(),
            mask.data().iter().map(|&v| if v == 1 { fg } else { bg }).collect(),
        )
        .unwrap()
    }

    #[test]
    fn otsu_perfect_bimodal() {
        let half = BinaryMask::from_fn(8, 8, |r, _| r >= 4);
        let o = otsu_threshold(&map_from(&half, 0.9, 0.1), 256).unwrap();
        assert!(o.threshold > 0.1 && o.threshold <= 0.9);
        assert_eq!(o.mask, half);
        assert!(!o.degenerate);
        // lowest edge among the tied optimum is the one just above 0.1
        assert_eq!(o.threshold, 26.0 / 256.0);
    }

    #[test]
    fn otsu_constant_is_degenerate() {
        let p = ProbabilityMap::new(4, 4, vec![0.5; 16]).unwrap();
        let o = otsu_threshold(&p, 256).unwrap();
        assert!(o.degenerate);
        assert_eq!(o.threshold, 0.5);
        assert_eq!(o.mask.count(), 16);
    }

    #[test]
    fn components_basic_contracts() {
        assert!(connected_components(&BinaryMask::zeros(5, 5)).is_empty());
        let mut diag = BinaryMask::zeros(4, 4);
        diag.set(1, 1, true);
        diag.set(2, 2, true);
        let cs = connected_components(&diag);
        assert_eq!(cs.len(), 1);
        assert_eq!(cs[0].area(), 2);
        assert_eq!(cs[0].centroid, (1.5, 1.5));

        // a U shape whose arms only join at the bottom
        let u = BinaryMask::from_fn(5, 5, |r, c| c == 0 || c == 4 || r == 4);
        assert_eq!(connected_components(&u).len(), 1);
        let two = BinaryMask::from_fn(3, 5, |_, c| c == 0 || c == 3);
        let cs = connected_components(&two);
        assert_eq!(cs.len(), 2);
        assert_eq!(cs[0].pixels[0], (0, 0));
        assert_eq!(cs[1].label, 2);
    }

    #[test]
    fn boundary_of_a_filled_square() {
        let m = BinaryMask::from_fn(10, 10, |r, c| (2..7).contains(&r) && (3..8).contains(&c));
        let c = &connected_components(&m)[0];
        assert_eq!(c.area(), 25);
        assert_eq!(c.boundary.len(), 16);
    }

    #[test]
    fn rasterized_disk_is_round() {
        let c = &connected_components(&disk(64, 31.0, 31.0, 20.0))[0];
        assert!(c.roundness < 0.05, "{}", c.roundness);
        let sq = BinaryMask::from_fn(64, 64, |r, c| (10..50).contains(&r) && (10..50).contains(&c));
        let s = &connected_components(&sq)[0];
        assert!(s.roundness > c.roundness);
    }

    #[test]
    fn single_pixel_is_worst() {
        let mut m = BinaryMask::zeros(3, 3);
        m.set(1, 1, true);
        assert_eq!(connected_components(&m)[0].roundness, f64::INFINITY);
    }

    #[test]
    fn selection_rules() {
        let m = BinaryMask::from_fn(60, 60, |r, c| {
            let d = (r as f64 - 15.0).hypot(c as f64 - 15.0) <= 8.0;
            let rect = (40..48).contains(&r) && (5..31).contains(&c);
            d || rect
        });
        let cs = connected_components(&m);
        assert_eq!(cs.len(), 2);
        let i = select_region(&cs, RoundnessMode::Boundary, 10).unwrap();
        assert!(cs[i].pixels.contains(&(15, 15)));

        let one = connected_components(&disk(20, 9.0, 9.0, 5.0));
        assert_eq!(select_region(&one, RoundnessMode::Boundary, 10).unwrap(), 0);

        let twins = BinaryMask::from_fn(30, 60, |r, c| {
            (r as f64 - 15.0).hypot(c as f64 - 14.0) <= 6.0 || (r as f64 - 15.0).hypot(c as f64 - 44.0) <= 6.0
        });
        let cs = connected_components(&twins);
        assert_eq!(cs[select_region(&cs, RoundnessMode::Boundary, 10).unwrap()].label, 1);
        assert!(matches!(
            select_region(&[], RoundnessMode::Boundary, 10),
            Err(Error::NoComponents)
        ));
    }

    #[test]
    fn small_specks_are_ignored_for_selection() {
        // a two-pixel speck has roundness 0 but is below the area floor
        let m = BinaryMask::from_fn(40, 40, |r, c| {
            (r == 2 && (2..4).contains(&c)) || (20..30).contains(&r) && (5..35).contains(&c)
        });
        let cs = connected_components(&m);
        assert_eq!(cs[0].roundness, 0.0);
        assert_eq!(select_region(&cs, RoundnessMode::Boundary, 10).unwrap(), 1);
        assert_eq!(select_region(&cs, RoundnessMode::Boundary, 1000).unwrap(), 0);
    }

    #[test]
    fn postprocess_keeps_the_disk() {
        let size = 64;
        let dm = disk(size, 20.0, 20.0, 9.0);
        let rect = BinaryMask::from_fn(size, size, |r, c| (44..52).contains(&r) && (10..50).contains(&c));
        let p = ProbabilityMap::new(
            size,
            size,
            (0..size * size)
                .map(|i| {
                    if dm.data()[i] == 1 {
                        0.95
                    } else if rect.data()[i] == 1 {
                        0.9
                    } else {
                        0.05
                    }
                })
                .collect(),
        )
        .unwrap();
        let placement = Placement::new(
            RoiBox {
                top: 40,
                left: 70,
                side: 128,
            },
            size,
            256,
            256,
        )
        .unwrap();
        let out = postprocess(&p, &placement, &PostprocConfig::default()).unwrap();
        assert!(!out.empty);
        assert_eq!(out.selected, dm);
        let expected = placement.mask_to_frame(&dm).unwrap();
        assert_eq!(out.frame_mask, expected);
        // disk centre (20, 20) at scale 2 lands at frame (80..82, 110..112)
        assert!(out.frame_mask.get(40 + 40, 70 + 40));
        assert!(!out.frame_mask.get(40 + 2 * 48, 70 + 2 * 30));
    }

    #[test]
    fn postprocess_all_background_is_empty() {
        let p = ProbabilityMap::new(16, 16, (0..256).map(|i| 0.01 + 0.001 * (i % 5) as f64).collect()).unwrap();
        let placement = Placement::new(
            RoiBox {
                top: 0,
                left: 0,
                side: 32,
            },
            16,
            32,
            32,
        )
        .unwrap();
        let out = postprocess(&p, &placement, &PostprocConfig::default()).unwrap();
        assert!(out.empty);
        assert!(out.frame_mask.is_all_zero());
    }
}
