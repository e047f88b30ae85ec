//! Single-class dense detector: backbone, optional conjunct attention, FPN and a shared
//! one-anchor-per-cell head.

mod boxes;

pub use boxes::{decode, encode, level_anchors, match_anchors, nms, score_order, Detection};

use std::fmt::Write as _;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::attention::{
    AttnConfig, Backbone, BackboneConfig, ConjunctAttention, FeaturePyramid, NUM_LEVELS,
};
use crate::bbox::BBox;
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, OptimizerConfig, ParamId, ParamStore, Rng, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub input_height: usize,
    pub input_width: usize,
    pub backbone: BackboneConfig,
    pub attention: AttnConfig,
    pub use_attention: bool,
    pub fpn_channels: usize,
    /// Anchor side in pixels for each pyramid level.
    pub anchor_sizes: Vec<f64>,
    pub positive_iou: f64,
    pub nms_iou: f64,
    pub score_threshold: f64,
    pub pre_nms_top_k: usize,
    pub max_detections: usize,
    pub smooth_l1_beta: f64,
    pub optimizer: OptimizerConfig,
    /// Anneal the learning rate to zero along a half cosine over `steps`.
    pub cosine_decay: bool,
    /// Global gradient-norm ceiling per step; `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
    pub steps: usize,
    pub batch_size: usize,
    /// Set by the caller rather than read from config files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            input_height: 160,
            input_width: 128,
            backbone: BackboneConfig::default(),
            attention: AttnConfig::default(),
            use_attention: true,
            fpn_channels: 16,
            anchor_sizes: vec![8.0, 16.0, 32.0, 64.0],
            positive_iou: 0.5,
            nms_iou: 0.5,
            score_threshold: 0.05,
            pre_nms_top_k: 1000,
            max_detections: 100,
            smooth_l1_beta: 1.0,
            optimizer: OptimizerConfig::Adam { lr: 2e-3 },
            cosine_decay: true,
            clip_grad_norm: Some(10.0),
            steps: 800,
            batch_size: 4,
            seed: 0,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("detector config: {m}")));
        for (name, v) in [
            ("positive_iou", self.positive_iou),
            ("nms_iou", self.nms_iou),
            ("score_threshold", self.score_threshold),
        ] {
            if !(v > 0.0 && v < 1.0) {
                return bad(format!("{name} must be in (0, 1), got {v}"));
            }
        }
        if self.anchor_sizes.len() != NUM_LEVELS || self.anchor_sizes.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("need {NUM_LEVELS} positive anchor sizes"));
        }
        if self.fpn_channels == 0 || self.batch_size == 0 || self.max_detections == 0 {
            return bad("fpn_channels, batch_size and max_detections must be positive".into());
        }
        if !(self.smooth_l1_beta > 0.0) {
            return bad("smooth_l1_beta must be positive".into());
        }
        let (h, w) = (self.input_height, self.input_width);
        let (ph, pw) = (self.attention.patch_h, self.attention.patch_w);
        if h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Indivisible { h, w, multiple: 16 });
        }
        if self.use_attention && (h % (16 * ph) != 0 || w % (16 * pw) != 0) {
            return bad(format!(
                "input {h}x{w} must be a multiple of {}x{} so every level tiles into {ph}x{pw} patches",
                16 * ph,
                16 * pw
            ));
        }
        if self.clip_grad_norm.is_some_and(|c| !(c > 0.0)) {
            return bad("clip_grad_norm must be positive".into());
        }
        self.optimizer.validate()
    }

    pub fn strides(&self) -> [f64; NUM_LEVELS] {
        std::array::from_fn(|l| (1usize << (l + 1)) as f64)
    }

    /// All anchors, level by level, cells row-major within a level.
    pub fn anchors(&self) -> Vec<BBox> {
        let mut out = Vec::new();
        for (l, (&stride, &size)) in self.strides().iter().zip(&self.anchor_sizes).enumerate() {
            let (h, w) = (self.input_height >> (l + 1), self.input_width >> (l + 1));
            out.extend(level_anchors(h, w, stride, size));
        }
        out
    }
}

#[derive(Clone, Debug)]
struct ConvWeights {
    w: ParamId,
    b: ParamId,
}

impl ConvWeights {
    fn new(
        params: &mut ParamStore,
        name: &str,
        cout: usize,
        cin: usize,
        k: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = params.add_glorot(
            format!("{name}.weight"),
            &[cout, cin, k, k],
            cin * k * k,
            cout * k * k,
            rng,
        )?;
        let b = params.add_zeros(format!("{name}.bias"), &[cout])?;
        Ok(ConvWeights { w, b })
    }

    fn apply(&self, g: &mut Graph, params: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = g.param(params, self.w);
        let b = g.param(params, self.b);
        let k = g.shape(w)[2];
        g.conv2d(x, w, Some(b), 1, k / 2)
    }
}

/// Per-level head outputs: objectness logits `(1, 1, h, w)` and deltas `(1, 4, h, w)`.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub objectness: NodeId,
    pub deltas: NodeId,
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub config: DetectorConfig,
    pub params: ParamStore,
    pub backbone: Backbone,
    pub attention: Option<ConjunctAttention>,
    lateral: Vec<ConvWeights>,
    smooth: Vec<ConvWeights>,
    head_trunk: ConvWeights,
    head_obj: ConvWeights,
    head_box: ConvWeights,
}

const HEAD_SLOPE: f64 = 0.1;

impl Detector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(config.backbone.clone(), &mut params, &mut rng)?;
        let attention = if config.use_attention {
            Some(ConjunctAttention::new(
                config.attention.clone(),
                config.backbone.base_channels,
                (config.input_height, config.input_width),
                &mut params,
                &mut rng,
            )?)
        } else {
            None
        };
        let f = config.fpn_channels;
        let chans = backbone.level_channels();
        let mut lateral = Vec::with_capacity(NUM_LEVELS);
        let mut smooth = Vec::with_capacity(NUM_LEVELS);
        for (l, &c) in chans.iter().enumerate() {
            lateral.push(ConvWeights::new(
                &mut params,
                &format!("fpn.lateral{l}"),
                f,
                c,
                1,
                &mut rng,
            )?);
            smooth.push(ConvWeights::new(
                &mut params,
                &format!("fpn.smooth{l}"),
                f,
                f,
                3,
                &mut rng,
            )?);
        }
        let head_trunk = ConvWeights::new(&mut params, "head.trunk", f, f, 3, &mut rng)?;
        let head_obj = ConvWeights::new(&mut params, "head.objectness", 1, f, 1, &mut rng)?;
        let head_box = ConvWeights::new(&mut params, "head.deltas", 4, f, 1, &mut rng)?;
        Ok(Detector {
            config,
            params,
            backbone,
            attention,
            lateral,
            smooth,
            head_trunk,
            head_obj,
            head_box,
        })
    }

    /// Rebuilds the architecture of `config` and loads `store` into it.
    pub fn from_params(config: DetectorConfig, store: &ParamStore) -> Result<Self> {
        let mut model = Detector::new(config)?;
        if store.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "detector expects {} parameters, checkpoint has {}",
                model.params.len(),
                store.len()
            )));
        }
        model.params.load_values_from(store)?;
        Ok(model)
    }

    /// Lateral 1x1 convs, top-down nearest 2x upsample-and-add, 3x3 smoothing per level.
    pub fn fpn_graph(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        levels: &[NodeId],
    ) -> Result<Vec<NodeId>> {
        if levels.len() != NUM_LEVELS {
            return Err(Error::shape(
                "fpn_merge",
                format!("expected {NUM_LEVELS} levels, got {}", levels.len()),
            ));
        }
        let lat: Vec<NodeId> = levels
            .iter()
            .zip(&self.lateral)
            .map(|(&x, conv)| conv.apply(g, params, x))
            .collect::<Result<_>>()?;
        let mut merged = [lat[NUM_LEVELS - 1]; NUM_LEVELS];
        for l in (0..NUM_LEVELS - 1).rev() {
            let up = g.upsample2x(merged[l + 1])?;
            if g.shape(up) != g.shape(lat[l]) {
                return Err(Error::shape(
                    "fpn_merge",
                    format!(
                        "level {l}: lateral {:?} vs upsampled {:?}",
                        g.shape(lat[l]),
                        g.shape(up)
                    ),
                ));
            }
            merged[l] = g.add(lat[l], up)?;
        }
        merged
            .iter()
            .zip(&self.smooth)
            .map(|(&x, conv)| conv.apply(g, params, x))
            .collect()
    }

    pub fn head_graph(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        fpn: &[NodeId],
    ) -> Result<Vec<HeadOutput>> {
        fpn.iter()
            .map(|&x| {
                let t = self.head_trunk.apply(g, params, x)?;
                let t = g.leaky_relu(t, HEAD_SLOPE);
                Ok(HeadOutput {
                    objectness: self.head_obj.apply(g, params, t)?,
                    deltas: self.head_box.apply(g, params, t)?,
                })
            })
            .collect()
    }

    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        image: NodeId,
    ) -> Result<Vec<HeadOutput>> {
        let shape = g.shape(image).to_vec();
        let want = [
            1,
            self.config.backbone.input_channels,
            self.config.input_height,
            self.config.input_width,
        ];
        if shape != want {
            return Err(Error::shape(
                "detector",
                format!("input {shape:?}, expected {want:?}"),
            ));
        }
        let levels = self.backbone.forward_graph(g, params, image)?;
        self.heads_from_features(g, params, &levels)
    }

    /// Attention (when enabled), FPN and head on backbone feature maps.
    pub fn heads_from_features(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        levels: &[NodeId],
    ) -> Result<Vec<HeadOutput>> {
        let fpn = match &self.attention {
            Some(attn) => {
                let enhanced = attn.forward_graph(g, params, levels)?;
                self.fpn_graph(g, params, &enhanced)?
            }
            None => self.fpn_graph(g, params, levels)?,
        };
        self.head_graph(g, params, &fpn)
    }

    /// Training loss of one image: class-balanced BCE on objectness plus smooth-L1 on the
    /// deltas of positive anchors, each averaged over its anchors.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        params: &ParamStore,
        sample: &ImageSample,
    ) -> Result<NodeId> {
        let x = g.constant(sample.as_batch());
        let heads = self.forward_graph(g, params, x)?;
        self.loss_from_heads(g, &heads, &sample.boxes)
    }

    /// The training loss given head outputs and the image's ground-truth boxes.
    pub fn loss_from_heads(
        &self,
        g: &mut Graph,
        heads: &[HeadOutput],
        boxes: &[BBox],
    ) -> Result<NodeId> {
        let anchors = self.config.anchors();
        let labels = match_anchors(&anchors, boxes, self.config.positive_iou);
        let npos = labels.iter().filter(|l| l.is_some()).count();
        let nneg = labels.len() - npos;
        let (wpos, wneg) = match (npos, nneg) {
            (0, _) => (0.0, 1.0 / nneg as f64),
            (_, 0) => (1.0 / npos as f64, 0.0),
            _ => (0.5 / npos as f64, 0.5 / nneg as f64),
        };
        let mut total: Option<NodeId> = None;
        let mut offset = 0;
        for h in heads {
            let cells = g.value(h.objectness).numel();
            let lab = &labels[offset..offset + cells];
            let targets: Rc<[f64]> = lab
                .iter()
                .map(|l| if l.is_some() { 1.0 } else { 0.0 })
                .collect();
            let weights: Rc<[f64]> = lab
                .iter()
                .map(|l| if l.is_some() { wpos } else { wneg })
                .collect();
            let mut level_loss = g.bce_with_logits(h.objectness, targets, weights)?;
            if npos > 0 && lab.iter().any(|l| l.is_some()) {
                // delta maps are channel-major: channel j of cell i sits at j * cells + i
                let mut t = vec![0.0; 4 * cells];
                let mut w = vec![0.0; 4 * cells];
                for (i, l) in lab.iter().enumerate() {
                    if let Some(gi) = *l {
                        let enc = encode(&boxes[gi], &anchors[offset + i]);
                        for j in 0..4 {
                            t[j * cells + i] = enc[j];
                            w[j * cells + i] = 1.0 / npos as f64;
                        }
                    }
                }
                let reg = g.smooth_l1(h.deltas, t.into(), w.into(), self.config.smooth_l1_beta)?;
                level_loss = g.add(level_loss, reg)?;
            }
            total = Some(match total {
                None => level_loss,
                Some(acc) => g.add(acc, level_loss)?,
            });
            offset += cells;
        }
        total.ok_or_else(|| Error::shape("detector", "no pyramid levels"))
    }

    pub fn infer(&self, sample: &ImageSample) -> Result<Vec<Detection>> {
        let mut g = Graph::new();
        let x = g.constant(sample.as_batch());
        let heads = self.forward_graph(&mut g, &self.params, x)?;
        let anchors = self.config.anchors();
        let (h, w) = (sample.height(), sample.width());
        let mut cands = Vec::new();
        let mut offset = 0;
        for head in &heads {
            let logits = g.value(head.objectness).data();
            let deltas = g.value(head.deltas).data();
            let cells = logits.len();
            for i in 0..cells {
                let score = crate::tensor::sigmoid(logits[i]);
                if score < self.config.score_threshold {
                    continue;
                }
                let d = [
                    deltas[i],
                    deltas[cells + i],
                    deltas[2 * cells + i],
                    deltas[3 * cells + i],
                ];
                let bbox = decode(d, &anchors[offset + i]).clip(w, h);
                if bbox.w > 0.0 && bbox.h > 0.0 {
                    cands.push(Detection {
                        image_id: sample.id.clone(),
                        bbox,
                        score,
                    });
                }
            }
            offset += cells;
        }
        let order = score_order(cands.iter().map(|d| d.score));
        let top: Vec<Detection> = order
            .into_iter()
            .take(self.config.pre_nms_top_k)
            .map(|i| cands[i].clone())
            .collect();
        let mut kept = nms(&top, self.config.nms_iou);
        kept.truncate(self.config.max_detections);
        Ok(kept)
    }

    /// Objectness probabilities and delta maps as plain tensors, per level.
    pub fn head_forward(&self, sample: &ImageSample) -> Result<Vec<(Tensor, Tensor)>> {
        let mut g = Graph::new();
        let x = g.constant(sample.as_batch());
        let heads = self.forward_graph(&mut g, &self.params, x)?;
        Ok(heads
            .iter()
            .map(|h| {
                (
                    g.value(h.objectness).map(crate::tensor::sigmoid),
                    g.value(h.deltas).clone(),
                )
            })
            .collect())
    }

    /// Merged FPN levels of an already computed pyramid.
    pub fn fpn_merge(&self, pyr: &FeaturePyramid) -> Result<FeaturePyramid> {
        let mut g = Graph::new();
        let nodes: Vec<NodeId> = pyr.levels.iter().map(|t| g.constant(t.clone())).collect();
        let out = self.fpn_graph(&mut g, &self.params, &nodes)?;
        Ok(FeaturePyramid {
            levels: out.into_iter().map(|n| g.value(n).clone()).collect(),
        })
    }

    /// Ids of the lateral and smoothing convs `(weight, bias)` for each level.
    pub fn fpn_params(&self) -> Vec<((ParamId, ParamId), (ParamId, ParamId))> {
        self.lateral
            .iter()
            .zip(&self.smooth)
            .map(|(l, s)| ((l.w, l.b), (s.w, s.b)))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct DetectorTraining {
    pub model: Detector,
    /// `(step, mean batch loss)` before each update.
    pub curve: Vec<(usize, f64)>,
}

impl DetectorTraining {
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("step,loss\n");
        for (step, loss) in &self.curve {
            writeln!(s, "{step},{loss:.17e}").expect("write to string");
        }
        s
    }
}

/// Mini-batch training. Each epoch visits the images in a seeded random order.
pub fn train_detector(
    dataset: &[ImageSample],
    config: &DetectorConfig,
) -> Result<DetectorTraining> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument(
            "detector training needs at least one image".into(),
        ));
    }
    let mut model = Detector::new(config.clone())?;
    let mut opt = config.optimizer.build();
    let mut rng = Rng::new(config.seed).split(1);
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut batch_loss = 0.0;
        let b = config.batch_size.min(dataset.len());
        for _ in 0..b {
            if order.is_empty() {
                order = (0..dataset.len()).collect();
                rng.shuffle(&mut order);
                order.reverse();
            }
            let i = order.pop().expect("refilled above");
            let mut g = Graph::new();
            let loss = model.loss_graph(&mut g, &model.params, &dataset[i])?;
            let v = g.value(loss).data()[0];
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!(
                    "detector loss is not finite at step {step} on `{}`",
                    dataset[i].id
                )));
            }
            batch_loss += v;
            g.backward(loss)?;
            g.accumulate_into(&mut model.params);
        }
        // a batch without lesions does not reach the box branch
        model.params.fill_missing_grads();
        model.params.scale_grads(1.0 / b as f64);
        if let Some(c) = config.clip_grad_norm {
            model.params.clip_grad_norm(c);
        }
        if config.cosine_decay {
            let t = step as f64 / config.steps as f64;
            opt.set_lr(0.5 * config.optimizer.lr() * (1.0 + (std::f64::consts::PI * t).cos()));
        }
        opt.step(&mut model.params)?;
        curve.push((step, batch_loss / b as f64));
        if step % 50 == 0 {
            log::debug!("detector step {step}: loss {:.4}", batch_loss / b as f64);
        }
    }
    Ok(DetectorTraining { model, curve })
}

/// Mean loss of `model` over `dataset` without updating it.
pub fn dataset_loss(model: &Detector, dataset: &[ImageSample]) -> Result<f64> {
    let mut acc = 0.0;
    for s in dataset {
        let mut g = Graph::new();
        let loss = model.loss_graph(&mut g, &model.params, s)?;
        acc += g.value(loss).data()[0];
    }
    Ok(acc / dataset.len().max(1) as f64)
}
