//! Foreground outlines and blend masks.

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Row-major binary image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::shape(
                "binary_mask",
                format!("{} bits for {height}x{width}", bits.len()),
            ));
        }
        Ok(BinaryMask {
            height,
            width,
            bits,
        })
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &BinaryMask) -> Result<BinaryMask> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::shape(
                "binary_mask",
                format!(
                    "{}x{} vs {}x{}",
                    self.height, self.width, other.height, other.width
                ),
            ));
        }
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(a, b)| *a && *b)
            .collect();
        BinaryMask::new(self.height, self.width, bits)
    }

    /// Number of pixels of `bbox` (clipped to the image) that are set.
    pub fn covered_pixels(&self, bbox: &BBox) -> usize {
        let (x0, y0, x1, y1) = bbox.clip(self.width, self.height).pixel_bounds();
        (y0..y1.min(self.height))
            .map(|y| (x0..x1.min(self.width)).filter(|&x| self.get(x, y)).count())
            .sum()
    }
}

fn image_dims(image: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *image.shape() {
        [h, w] | [1, h, w] | [1, 1, h, w] => Ok((h, w)),
        ref s => Err(Error::shape(
            op,
            format!("expected a grayscale image, got {s:?}"),
        )),
    }
}

/// Otsu threshold on a 256-bin histogram of `[0, 1]` intensities. Pixels in bins above the
/// returned bin are foreground.
fn otsu_bin(values: &[f64]) -> Option<usize> {
    let mut hist = [0usize; 256];
    for &v in values {
        hist[bin(v)] += 1;
    }
    let lo = hist.iter().position(|&c| c > 0)?;
    let hi = hist.iter().rposition(|&c| c > 0)?;
    if lo == hi {
        return None;
    }
    let total = values.len() as f64;
    let sum_all: f64 = hist
        .iter()
        .enumerate()
        .map(|(i, &c)| i as f64 * c as f64)
        .sum();
    let (mut w0, mut sum0) = (0.0, 0.0);
    let (mut best, mut best_var) = (lo, -1.0);
    for (t, &c) in hist.iter().enumerate().take(hi).skip(lo) {
        w0 += c as f64;
        sum0 += t as f64 * c as f64;
        let w1 = total - w0;
        let mu0 = sum0 / w0;
        let mu1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if var > best_var {
            best_var = var;
            best = t;
        }
    }
    Some(best)
}

fn bin(v: f64) -> usize {
    (v.clamp(0.0, 1.0) * 255.0).round() as usize
}

/// Largest 4-connected component of the pixels above an Otsu threshold. A constant image
/// counts as all foreground when it is non-zero.
pub fn foreground_outline(image: &Tensor) -> Result<BinaryMask> {
    let (h, w) = image_dims(image, "foreground_outline")?;
    let data = image.data();
    let above: Vec<bool> = match otsu_bin(data) {
        Some(t) => data.iter().map(|&v| bin(v) > t).collect(),
        None => {
            let on = data[0] > 0.0;
            vec![on; h * w]
        }
    };
    let largest = largest_component(h, w, &above).ok_or(Error::EmptyForeground)?;
    BinaryMask::new(h, w, largest)
}

/// Ties go to the component found first in row-major order.
fn largest_component(h: usize, w: usize, on: &[bool]) -> Option<Vec<bool>> {
    let mut label = vec![usize::MAX; h * w];
    let mut best: Option<(usize, usize)> = None;
    let mut stack = Vec::new();
    let mut next = 0;
    for start in 0..h * w {
        if !on[start] || label[start] != usize::MAX {
            continue;
        }
        let mut size = 0;
        label[start] = next;
        stack.push(start);
        while let Some(p) = stack.pop() {
            size += 1;
            let (x, y) = (p % w, p / w);
            let mut visit = |q: usize| {
                if on[q] && label[q] == usize::MAX {
                    label[q] = next;
                    stack.push(q);
                }
            };
            if x > 0 {
                visit(p - 1);
            }
            if x + 1 < w {
                visit(p + 1);
            }
            if y > 0 {
                visit(p - w);
            }
            if y + 1 < h {
                visit(p + w);
            }
        }
        if best.is_none_or(|(_, s)| size > s) {
            best = Some((next, size));
        }
        next += 1;
    }
    let (keep, _) = best?;
    Some(label.into_iter().map(|l| l == keep).collect())
}

/// Transition band sizes in pixels: `m` is the interpolation index, `n` the edge index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub m: usize,
    pub n: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec { m: 128, n: 128 }
    }
}

impl MaskSpec {
    /// Bands scaled with the image: one eighth of the shorter side (128 at 1024).
    pub fn for_side(side: usize) -> Self {
        let b = (side as f64 / 8.0).round() as usize;
        MaskSpec { m: b, n: b }
    }
}

/// Per-pixel blend weights in `[0, 1]`, shape `(1, H, W)`.
#[derive(Clone, Debug)]
pub struct BlendMask(pub Tensor);

impl BlendMask {
    pub fn at(&self, x: usize, y: usize) -> f64 {
        let w = self.0.shape()[2];
        self.0.data()[y * w + x]
    }
}

/// Chebyshev distance from pixel `(x, y)` to the pixel rectangle `[x0, x1) × [y0, y1)`.
fn ring_distance(x: usize, y: usize, (x0, y0, x1, y1): (usize, usize, usize, usize)) -> usize {
    let dx = if x < x0 {
        x0 - x
    } else {
        (x + 1).saturating_sub(x1)
    };
    let dy = if y < y0 {
        y0 - y
    } else {
        (y + 1).saturating_sub(y1)
    };
    dx.max(dy)
}

/// Builds the blend mask for `bbox` on an `(h, w)` image.
///
/// Pixels inside the box get 1; the ring at outward distance `i` gets `1 - i/M` for `i < M`.
/// With `overlap_boundary`, pixels outside that foreground lying right of or below the box
/// centre form the clip set `C`; each pixel then gets `K * min(floor(d), N) / N`, where `K` is
/// its value from the first pass and `d` its Euclidean distance to `C`.
pub fn build_mask(
    bbox: &BBox,
    (h, w): (usize, usize),
    spec: &MaskSpec,
    overlap_boundary: Option<&BinaryMask>,
) -> Result<BlendMask> {
    if !bbox.is_valid() || !bbox.within(w, h) {
        return Err(Error::InvalidArgument(format!(
            "bbox {bbox:?} is not inside the {w}x{h} image"
        )));
    }
    let bounds = bbox.pixel_bounds();
    let m = spec.m;
    let mut values = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = ring_distance(x, y, bounds);
            values[y * w + x] = if i == 0 {
                1.0
            } else if i < m {
                1.0 - i as f64 / m as f64
            } else {
                0.0
            };
        }
    }
    if let Some(fg) = overlap_boundary {
        if (fg.height, fg.width) != (h, w) {
            return Err(Error::shape(
                "build_mask",
                format!("boundary {}x{} vs image {h}x{w}", fg.height, fg.width),
            ));
        }
        let (cx, cy) = bbox.center();
        let clip: Vec<bool> = (0..h * w)
            .map(|p| {
                let (x, y) = (p % w, p / w);
                !fg.bits[p] && (x as f64 + 0.5 >= cx || y as f64 + 0.5 >= cy)
            })
            .collect();
        let n = spec.n;
        let mut out = values.clone();
        for y in 0..h {
            for x in 0..w {
                let k = values[y * w + x];
                if k == 0.0 {
                    continue;
                }
                let steps = match nearest_within(&clip, h, w, x, y, n) {
                    // d < n here, so min(floor(d), n) = floor(d)
                    Some(d) => d.floor() as usize,
                    None => n,
                };
                out[y * w + x] = if n == 0 {
                    if clip[y * w + x] {
                        0.0
                    } else {
                        k
                    }
                } else {
                    k * steps as f64 / n as f64
                };
            }
        }
        values = out;
    }
    Ok(BlendMask(Tensor::new(vec![1, h, w], values)?))
}

/// Euclidean distance to the nearest set pixel of `set` if it is below `radius`.
fn nearest_within(
    set: &[bool],
    h: usize,
    w: usize,
    x: usize,
    y: usize,
    radius: usize,
) -> Option<f64> {
    if set[y * w + x] {
        return Some(0.0);
    }
    let r = radius;
    let mut best2 = usize::MAX;
    for yy in y.saturating_sub(r)..(y + r + 1).min(h) {
        for xx in x.saturating_sub(r)..(x + r + 1).min(w) {
            if set[yy * w + xx] {
                let d2 = xx.abs_diff(x).pow(2) + yy.abs_diff(y).pow(2);
                best2 = best2.min(d2);
            }
        }
    }
    let d = (best2 as f64).sqrt();
    (best2 != usize::MAX && d < r as f64).then_some(d)
}
