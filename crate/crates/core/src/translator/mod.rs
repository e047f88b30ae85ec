//! Local image translation: pair a tumor image with a normal one, interpolate their hidden
//! autoencoder features layer by layer, and blend the result into the normal image around
//! the tumor box.

mod mask;

pub use mask::{build_mask, foreground_outline, BinaryMask, BlendMask, MaskSpec};

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autoencoder::{AutoEncoder, NUM_LAYERS};
use crate::bbox::BBox;
use crate::data::{
    write_manifest, write_manifest_lines, write_pgm, AnnotationBox, ImageSample, ManifestRecord,
    Split,
};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Rng, Tensor};

/// Per-layer tumor feature ratios `λ_k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub lambda_max: f64,
    pub per_layer: Vec<f64>,
}

impl LambdaSchedule {
    /// `λ_k = lambda_max * k / n_layers` for `k = 1..=n_layers`.
    ///
    /// `lambda_max = 0` gives the all-zero schedule, which leaves the normal image's features
    /// untouched.
    pub fn linear(lambda_max: f64, n_layers: usize) -> Result<Self> {
        if n_layers == 0 {
            return Err(Error::InvalidArgument(
                "schedule needs at least one layer".into(),
            ));
        }
        let per_layer = (1..=n_layers)
            .map(|k| lambda_max * k as f64 / n_layers as f64)
            .collect();
        LambdaSchedule::from_values(per_layer)
    }

    /// Accepts a strictly increasing list in `[0, 1)`, or an all-zero list.
    pub fn from_values(per_layer: Vec<f64>) -> Result<Self> {
        let bad = |m: &str| {
            Err(Error::InvalidArgument(format!(
                "lambda schedule {per_layer:?}: {m}"
            )))
        };
        let Some(&last) = per_layer.last() else {
            return bad("empty");
        };
        if per_layer.iter().any(|l| !(0.0..1.0).contains(l)) {
            return bad("every value must lie in [0, 1)");
        }
        let all_zero = per_layer.iter().all(|&l| l == 0.0);
        if !all_zero && per_layer.windows(2).any(|p| p[1] <= p[0]) {
            return bad("values must increase strictly with depth");
        }
        Ok(LambdaSchedule {
            lambda_max: last,
            per_layer,
        })
    }
}

/// A tumor image, the normal image it is pasted into, and the tumor box.
#[derive(Clone, Debug)]
pub struct PairedSample {
    pub normal: ImageSample,
    pub tumor: ImageSample,
    pub bbox: BBox,
    /// The box is not fully inside the normal image's foreground.
    pub overlap: bool,
}

impl PairedSample {
    /// Foreground shared by both images.
    pub fn common_foreground(&self) -> Result<BinaryMask> {
        foreground_outline(&self.normal.pixels)?.and(&foreground_outline(&self.tumor.pixels)?)
    }
}

/// Visits `pool` in a seeded random order and returns the first image whose foreground
/// contains the tumor's first box. Falls back to the image covering most of the box, with
/// `overlap` set.
pub fn pair_images(
    tumor: &ImageSample,
    pool: &[ImageSample],
    rng: &mut Rng,
) -> Result<PairedSample> {
    let bbox = *tumor
        .boxes
        .first()
        .ok_or_else(|| Error::InvalidArgument(format!("tumor image `{}` has no box", tumor.id)))?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    rng.shuffle(&mut order);
    let (x0, y0, x1, y1) = bbox.pixel_bounds();
    let box_pixels = (x1 - x0) * (y1 - y0);
    let mut best: Option<(usize, usize)> = None;
    for i in order {
        let cand = &pool[i];
        if cand.pixels.shape() != tumor.pixels.shape() {
            return Err(Error::shape(
                "pair_images",
                format!(
                    "normal `{}` is {:?}, tumor `{}` is {:?}",
                    cand.id,
                    cand.pixels.shape(),
                    tumor.id,
                    tumor.pixels.shape()
                ),
            ));
        }
        let covered = match foreground_outline(&cand.pixels) {
            Ok(fg) => fg.covered_pixels(&bbox),
            Err(Error::EmptyForeground) => 0,
            Err(e) => return Err(e),
        };
        if covered == box_pixels {
            return Ok(PairedSample {
                normal: cand.clone(),
                tumor: tumor.clone(),
                bbox,
                overlap: false,
            });
        }
        if covered > 0 && best.is_none_or(|(_, c)| covered > c) {
            best = Some((i, covered));
        }
    }
    let (i, _) = best.ok_or_else(|| Error::NoPair {
        tumor_id: tumor.id.clone(),
    })?;
    Ok(PairedSample {
        normal: pool[i].clone(),
        tumor: tumor.clone(),
        bbox,
        overlap: true,
    })
}

/// Decodes the normal image with each hidden layer `k` replaced by
/// `(1 - λ_k) g_k(normal) + λ_k g_k(tumor)`.
pub fn progressive_translate(
    model: &AutoEncoder,
    pair: &PairedSample,
    schedule: &LambdaSchedule,
) -> Result<Tensor> {
    if pair.normal.pixels.shape() != pair.tumor.pixels.shape() {
        return Err(Error::shape(
            "progressive_translate",
            format!(
                "normal {:?} vs tumor {:?}",
                pair.normal.pixels.shape(),
                pair.tumor.pixels.shape()
            ),
        ));
    }
    if schedule.per_layer.len() != NUM_LAYERS {
        return Err(Error::InvalidArgument(format!(
            "schedule has {} values for {NUM_LAYERS} layers",
            schedule.per_layer.len()
        )));
    }
    let (_, tumor_stack) = model.forward(&pair.tumor.as_batch())?;
    let mut g = Graph::new();
    let x = g.constant(pair.normal.as_batch());
    let outs = model.forward_graph(&mut g, x, |k, normal| {
        let lambda = schedule.per_layer[k];
        if lambda == 0.0 {
            return None;
        }
        let tumor = tumor_stack.features[k].data();
        let data = normal
            .data()
            .iter()
            .zip(tumor)
            .map(|(a, b)| (1.0 - lambda) * a + lambda * b)
            .collect();
        Some(Tensor::new(normal.shape().to_vec(), data).expect("same shape"))
    })?;
    g.value(outs[NUM_LAYERS - 1])
        .clone()
        .reshape(pair.normal.pixels.shape().to_vec())
}

/// `mask * mixed + (1 - mask) * normal`, clamped to `[0, 1]`. Zero-mask pixels keep the normal
/// value exactly.
pub fn merge(
    normal: &ImageSample,
    mixed: &Tensor,
    mask: &BlendMask,
    bbox: BBox,
) -> Result<ImageSample> {
    let shape = normal.pixels.shape();
    if mixed.shape() != shape || mask.0.shape() != shape {
        return Err(Error::shape(
            "merge",
            format!(
                "normal {shape:?}, mixed {:?}, mask {:?}",
                mixed.shape(),
                mask.0.shape()
            ),
        ));
    }
    let data = normal
        .pixels
        .data()
        .iter()
        .zip(mixed.data())
        .zip(mask.0.data())
        .map(|((&n, &t), &m)| {
            let v = if m == 0.0 {
                n
            } else if m == 1.0 {
                t
            } else {
                m * t + (1.0 - m) * n
            };
            v.clamp(0.0, 1.0)
        })
        .collect();
    ImageSample::new(
        normal.id.clone(),
        Tensor::new(shape.to_vec(), data)?,
        vec![bbox],
        normal.split,
    )
}

/// Provenance of one translated image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslationRecord {
    pub id: String,
    pub path: String,
    pub source_tumor: String,
    pub paired_normal: String,
    pub bbox: AnnotationBox,
    pub lambda_max: f64,
    pub m: usize,
    pub n: usize,
    pub overlap: bool,
}

#[derive(Clone, Debug)]
pub struct Augmented {
    pub samples: Vec<ImageSample>,
    pub records: Vec<TranslationRecord>,
}

impl Augmented {
    /// Writes `images/{id}.pgm`, a standard `manifest.jsonl` and `translations.jsonl`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        let mut manifest = Vec::with_capacity(self.samples.len());
        for (s, r) in self.samples.iter().zip(&self.records) {
            write_pgm(&dir.join(&r.path), &s.pixels)?;
            manifest.push(ManifestRecord {
                id: s.id.clone(),
                path: r.path.clone(),
                split: s.split,
                boxes: s.boxes.iter().map(AnnotationBox::from).collect(),
            });
        }
        write_manifest(&dir.join("manifest.jsonl"), &manifest)?;
        write_manifest_lines(&dir.join("translations.jsonl"), &self.records)
    }
}

/// Translates every tumor into `per_tumor` distinct normal images. Each tumor draws from its
/// own split of `rng`, so results do not depend on processing order.
pub fn augment_dataset(
    tumors: &[ImageSample],
    pool: &[ImageSample],
    per_tumor: usize,
    model: &AutoEncoder,
    schedule: &LambdaSchedule,
    spec: &MaskSpec,
    rng: &Rng,
) -> Result<Augmented> {
    if per_tumor == 0 {
        return Err(Error::InvalidArgument(
            "per_tumor must be at least 1".into(),
        ));
    }
    let mut samples = Vec::with_capacity(tumors.len() * per_tumor);
    let mut records = Vec::with_capacity(tumors.len() * per_tumor);
    for (t, tumor) in tumors.iter().enumerate() {
        let mut trng = rng.split(t as u64);
        let mut remaining: Vec<ImageSample> = pool.to_vec();
        for j in 0..per_tumor {
            let pair = pair_images(tumor, &remaining, &mut trng)?;
            remaining.retain(|s| s.id != pair.normal.id);
            let mixed = progressive_translate(model, &pair, schedule)?;
            let boundary = if pair.overlap {
                Some(pair.common_foreground()?)
            } else {
                None
            };
            let dims = (pair.normal.height(), pair.normal.width());
            let mask = build_mask(&pair.bbox, dims, spec, boundary.as_ref())?;
            let mut out = merge(&pair.normal, &mixed, &mask, pair.bbox)?;
            out.id = format!("trans_{}_{j:02}", tumor.id);
            out.split = Split::Train;
            records.push(TranslationRecord {
                id: out.id.clone(),
                path: format!("images/{}.pgm", out.id),
                source_tumor: tumor.id.clone(),
                paired_normal: pair.normal.id.clone(),
                bbox: AnnotationBox::from(&pair.bbox),
                lambda_max: schedule.lambda_max,
                m: spec.m,
                n: spec.n,
                overlap: pair.overlap,
            });
            samples.push(out);
        }
    }
    Ok(Augmented { samples, records })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autoencoder::AEConfig;
    use crate::data::{make_phantom, PhantomConfig};

    fn phantom(seed: u64, tumor: bool) -> ImageSample {
        let mut s = make_phantom(&PhantomConfig {
            height: 32,
            width: 32,
            tumor,
            seed,
            ..PhantomConfig::default()
        })
        .unwrap();
        s.id = format!("{}_{seed}", if tumor { "t" } else { "n" });
        s
    }

    fn tiny_model() -> AutoEncoder {
        let cfg = AEConfig {
            encoder_channels: vec![4, 6, 8],
            decoder_channels: vec![6, 4],
            ..AEConfig::default()
        };
        AutoEncoder::new(cfg, &mut Rng::new(11)).unwrap()
    }

    #[test]
    fn linear_schedule_values() {
        let s = LambdaSchedule::linear(0.6, 6).unwrap();
        let want = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        for (a, b) in s.per_layer.iter().zip(want) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
        assert_eq!(s.lambda_max, 0.6);
        assert!(LambdaSchedule::linear(1.0, 6).is_err());
        assert!(LambdaSchedule::from_values(vec![0.1, 0.1]).is_err());
        assert!(LambdaSchedule::linear(0.0, 6)
            .unwrap()
            .per_layer
            .iter()
            .all(|&l| l == 0.0));
    }

    #[test]
    fn zero_schedule_reproduces_reconstruction() {
        let model = tiny_model();
        let pair = PairedSample {
            normal: phantom(1, false),
            tumor: phantom(2, true),
            bbox: phantom(2, true).boxes[0],
            overlap: false,
        };
        let mixed =
            progressive_translate(&model, &pair, &LambdaSchedule::linear(0.0, 6).unwrap()).unwrap();
        let (recon, _) = model.forward(&pair.normal.pixels).unwrap();
        assert!(mixed.bitwise_eq(&recon));
    }

    #[test]
    fn identical_pair_is_a_fixed_point() {
        let model = tiny_model();
        let t = phantom(3, true);
        let pair = PairedSample {
            normal: t.clone(),
            tumor: t.clone(),
            bbox: t.boxes[0],
            overlap: false,
        };
        let mixed =
            progressive_translate(&model, &pair, &LambdaSchedule::linear(0.7, 6).unwrap()).unwrap();
        let (recon, _) = model.forward(&t.pixels).unwrap();
        assert!(mixed.max_abs_diff(&recon) < 1e-12);
    }

    #[test]
    fn merge_examples() {
        let normal = phantom(1, false);
        let mixed = Tensor::full(vec![1, 32, 32], 0.5);
        let b = BBox::new(1.0, 1.0, 2.0, 2.0);
        let ones = BlendMask(Tensor::full(vec![1, 32, 32], 1.0));
        let zeros = BlendMask(Tensor::zeros(vec![1, 32, 32]));
        let half = BlendMask(Tensor::full(vec![1, 32, 32], 0.5));
        assert!(merge(&normal, &mixed, &ones, b)
            .unwrap()
            .pixels
            .bitwise_eq(&mixed));
        assert!(merge(&normal, &mixed, &zeros, b)
            .unwrap()
            .pixels
            .bitwise_eq(&normal.pixels));
        let avg = merge(&normal, &mixed, &half, b).unwrap();
        for (o, n) in avg.pixels.data().iter().zip(normal.pixels.data()) {
            assert!((o - (0.5 * n + 0.25)).abs() < 1e-15);
        }
        assert_eq!(avg.boxes, vec![b]);
        assert!(merge(&normal, &Tensor::zeros(vec![1, 16, 32]), &half, b).is_err());
    }

    #[test]
    fn pairing_prefers_containing_outline() {
        let t = phantom(5, true);
        let pool: Vec<_> = (10..16).map(|s| phantom(s, false)).collect();
        let a = pair_images(&t, &pool, &mut Rng::new(1)).unwrap();
        let b = pair_images(&t, &pool, &mut Rng::new(1)).unwrap();
        assert_eq!(a.normal.id, b.normal.id);
        if !a.overlap {
            let fg = foreground_outline(&a.normal.pixels).unwrap();
            let (x0, y0, x1, y1) = a.bbox.pixel_bounds();
            assert_eq!(fg.covered_pixels(&a.bbox), (x1 - x0) * (y1 - y0));
        }
    }

    #[test]
    fn pairing_falls_back_to_max_coverage() {
        let (h, w) = (16, 16);
        let tumor = ImageSample::new(
            "t",
            Tensor::full(vec![1, h, w], 0.5),
            vec![BBox::new(8.0, 4.0, 6.0, 6.0)],
            Split::Train,
        )
        .unwrap();
        // foreground is the left `edge` columns
        let normal = |edge: usize, id: &str| {
            let data = (0..h * w)
                .map(|p| if p % w < edge { 0.5 } else { 0.0 })
                .collect();
            ImageSample::new(
                id,
                Tensor::new(vec![1, h, w], data).unwrap(),
                vec![],
                Split::Train,
            )
            .unwrap()
        };
        let pool = vec![normal(9, "a"), normal(12, "b"), normal(10, "c")];
        let p = pair_images(&tumor, &pool, &mut Rng::new(0)).unwrap();
        assert!(p.overlap);
        // coverage by counting: columns 8..edge inside the box, 6 rows each
        let coverage: Vec<usize> = pool
            .iter()
            .map(|s| {
                foreground_outline(&s.pixels)
                    .unwrap()
                    .covered_pixels(&p.bbox)
            })
            .collect();
        assert_eq!(coverage, vec![6, 24, 12]);
        assert_eq!(p.normal.id, "b");

        let none = vec![normal(4, "d")];
        assert!(matches!(
            pair_images(&tumor, &none, &mut Rng::new(0)),
            Err(Error::NoPair { tumor_id }) if tumor_id == "t"
        ));
    }

    #[test]
    fn augment_counts_and_determinism() {
        let model = tiny_model();
        let mut multi = phantom(7, true);
        multi.boxes.push(BBox::new(0.0, 0.0, 2.0, 2.0));
        let tumors = vec![phantom(5, true), phantom(6, true), multi.clone()];
        let pool: Vec<_> = (20..26).map(|s| phantom(s, false)).collect();
        let schedule = LambdaSchedule::linear(0.6, 6).unwrap();
        let spec = MaskSpec::for_side(32);
        let a = augment_dataset(&tumors, &pool, 2, &model, &schedule, &spec, &Rng::new(9)).unwrap();
        assert_eq!(a.samples.len(), 6);
        assert!(a.samples.iter().all(|s| s.boxes.len() == 1));
        assert_eq!(a.samples[4].boxes[0], multi.boxes[0]);
        assert_ne!(a.records[0].paired_normal, a.records[1].paired_normal);

        let b = augment_dataset(&tumors, &pool, 2, &model, &schedule, &spec, &Rng::new(9)).unwrap();
        let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        a.write(d1.path()).unwrap();
        b.write(d2.path()).unwrap();
        for f in ["manifest.jsonl", "translations.jsonl"] {
            assert_eq!(
                std::fs::read(d1.path().join(f)).unwrap(),
                std::fs::read(d2.path().join(f)).unwrap()
            );
        }
        let back = crate::data::load_samples(&d1.path().join("manifest.jsonl")).unwrap();
        assert_eq!(back.len(), 6);
    }
}
