//! Breast-like synthetic phantoms: a bright half-ellipse against the left edge, smooth
//! texture, and optionally one bright elliptical lesion with its tight bounding box.

use serde::{Deserialize, Serialize};

use super::{ImageSample, Split};
use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub tumor: bool,
    /// Lesion semi-axis range as a fraction of `min(height, width)`.
    pub tumor_radius: (f64, f64),
    /// Mean intensity elevation of the lesion's bounding box over the lesion-free image.
    pub contrast: (f64, f64),
    pub texture_amplitude: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            height: 64,
            width: 64,
            tumor: false,
            tumor_radius: (0.08, 0.16),
            contrast: (0.18, 0.28),
            texture_amplitude: 0.05,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("phantom config: {m}")));
        if self.height < 16 || self.width < 16 {
            return bad("image must be at least 16x16");
        }
        let (r0, r1) = self.tumor_radius;
        if !(0.0 < r0 && r0 <= r1 && r1 <= 0.2) {
            return bad(
                "tumor_radius must satisfy 0 < lo <= hi <= 0.2 so the lesion fits the foreground",
            );
        }
        let (c0, c1) = self.contrast;
        if !(0.0 < c0 && c0 <= c1 && c1 <= 0.3) {
            return bad("contrast must satisfy 0 < lo <= hi <= 0.3");
        }
        if !(0.0..=0.1).contains(&self.texture_amplitude) {
            return bad("texture_amplitude must be in [0, 0.1]");
        }
        Ok(())
    }
}

/// Foreground ellipse centred on the left edge.
#[derive(Clone, Copy, Debug)]
struct Outline {
    cy: f64,
    ax: f64,
    ay: f64,
}

impl Outline {
    /// Normalized radius; `< 1` inside.
    fn radius(&self, x: f64, y: f64) -> f64 {
        ((x / self.ax).powi(2) + ((y - self.cy) / self.ay).powi(2)).sqrt()
    }
}

/// Deterministic in `config` (including its seed).
pub fn make_phantom(config: &PhantomConfig) -> Result<ImageSample> {
    make_phantom_parts(config).map(|(sample, _)| sample)
}

/// Returns the sample and the lesion-free rendering of the same phantom.
pub(crate) fn make_phantom_parts(config: &PhantomConfig) -> Result<(ImageSample, Tensor)> {
    config.validate()?;
    let (h, w) = (config.height, config.width);
    let mut rng = Rng::new(config.seed);
    let (hf, wf) = (h as f64, w as f64);
    let outline = Outline {
        cy: hf * rng.uniform(0.45, 0.55),
        ax: wf * rng.uniform(0.55, 0.9),
        ay: hf * rng.uniform(0.36, 0.47),
    };
    let base = rng.uniform(0.35, 0.45);
    let texture = ValueNoise::new(h, w, 8, &mut rng);
    let fine = ValueNoise::new(h, w, 4, &mut rng);

    let mut pixels = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let r = outline.radius(px, py);
            let v = if r < 1.0 {
                // soft falloff toward the skin line
                let falloff = 0.85 + 0.15 * (1.0 - r * r);
                let tex = config.texture_amplitude * (0.7 * texture.at(x, y) + 0.3 * fine.at(x, y));
                base * falloff + tex
            } else {
                0.02
            };
            pixels[y * w + x] = v.clamp(0.0, 1.0);
        }
    }
    let plain = Tensor::new(vec![1, h, w], pixels.clone())?;

    let mut boxes = Vec::new();
    if config.tumor {
        let side = hf.min(wf);
        let rx = side * rng.uniform(config.tumor_radius.0, config.tumor_radius.1);
        let ry = side * rng.uniform(config.tumor_radius.0, config.tumor_radius.1);
        let contrast = rng.uniform(config.contrast.0, config.contrast.1);
        let (cx, cy) = place_lesion(&outline, rx, ry, hf, wf, &mut rng)?;
        let inside = |x: usize, y: usize| {
            let dx = (x as f64 + 0.5 - cx) / rx;
            let dy = (y as f64 + 0.5 - cy) / ry;
            dx * dx + dy * dy <= 1.0
        };
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        let mut count = 0usize;
        for y in 0..h {
            for x in 0..w {
                if inside(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                    count += 1;
                }
            }
        }
        let area = (x1 - x0) * (y1 - y0);
        let amplitude = contrast * area as f64 / count as f64;
        for y in y0..y1 {
            for x in x0..x1 {
                if inside(x, y) {
                    pixels[y * w + x] += amplitude;
                }
            }
        }
        if pixels.iter().any(|&v| v > 1.0) {
            return Err(Error::InvalidArgument(
                "lesion saturates the image; lower contrast or texture".into(),
            ));
        }
        boxes.push(BBox::new(
            x0 as f64,
            y0 as f64,
            (x1 - x0) as f64,
            (y1 - y0) as f64,
        ));
    }
    let id = format!("phantom_{:016x}", config.seed);
    let sample = ImageSample::new(id, Tensor::new(vec![1, h, w], pixels)?, boxes, Split::Train)?;
    Ok((sample, plain))
}

/// Rejection-samples a lesion centre whose ellipse stays inside 85% of the outline.
fn place_lesion(
    outline: &Outline,
    rx: f64,
    ry: f64,
    hf: f64,
    wf: f64,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    for _ in 0..10_000 {
        let cx = rng.uniform(rx + 1.0, wf - rx - 1.0);
        let cy = rng.uniform(ry + 1.0, hf - ry - 1.0);
        let fits = (0..16).all(|k| {
            let t = k as f64 * std::f64::consts::PI / 8.0;
            outline.radius(cx + rx * t.cos(), cy + ry * t.sin()) < 0.85
        });
        if fits {
            return Ok((cx, cy));
        }
    }
    Err(Error::InvalidArgument(
        "no lesion placement fits the foreground".into(),
    ))
}

/// Bilinearly interpolated lattice noise in `[-1, 1]`.
struct ValueNoise {
    cell: usize,
    gw: usize,
    grid: Vec<f64>,
}

impl ValueNoise {
    fn new(h: usize, w: usize, cell: usize, rng: &mut Rng) -> Self {
        let gh = h / cell + 2;
        let gw = w / cell + 2;
        let grid = (0..gh * gw).map(|_| rng.uniform(-1.0, 1.0)).collect();
        ValueNoise { cell, gw, grid }
    }

    fn at(&self, x: usize, y: usize) -> f64 {
        let fx = x as f64 / self.cell as f64;
        let fy = y as f64 / self.cell as f64;
        let (ix, iy) = (fx as usize, fy as usize);
        let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
        let g = |i: usize, j: usize| self.grid[j * self.gw + i];
        let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
        let bottom = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}
