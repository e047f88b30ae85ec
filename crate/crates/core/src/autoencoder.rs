//! Six-layer convolutional autoencoder trained to overfit a small image set.
//!
//! Layers, in order: a stride-1 "upfeature" conv to 64 channels, two stride-2 encoder convs
//! (128, 256), two stride-2 transposed decoder convs (128, 64) and a stride-1 "downfeature"
//! conv back to one channel. Every layer but the last is followed by a leaky ReLU. The output
//! of each layer is one entry of the [`FeatureStack`]; the last entry is the reconstruction.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, OptimizerConfig, ParamId, ParamStore, Rng, Tensor};

pub const NUM_LAYERS: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AEConfig {
    pub encoder_channels: Vec<usize>,
    pub decoder_channels: Vec<usize>,
    /// Kernel of the strided encoder/decoder layers.
    pub kernel_size: usize,
    /// Kernel of the stride-1 upfeature/downfeature layers.
    pub feature_kernel_size: usize,
    pub stride_per_level: usize,
    pub input_channels: usize,
    pub leaky_slope: f64,
    pub optimizer: OptimizerConfig,
    pub max_steps: usize,
    pub loss_threshold: f64,
}

impl Default for AEConfig {
    fn default() -> Self {
        AEConfig {
            encoder_channels: vec![64, 128, 256],
            decoder_channels: vec![128, 64],
            kernel_size: 4,
            feature_kernel_size: 3,
            stride_per_level: 2,
            input_channels: 1,
            leaky_slope: 0.1,
            optimizer: OptimizerConfig::Adam { lr: 1e-3 },
            max_steps: 300,
            loss_threshold: 0.01,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum LayerKind {
    Conv,
    ConvTranspose,
}

#[derive(Clone, Debug)]
struct Layer {
    kind: LayerKind,
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    pad: usize,
    activation: bool,
}

impl AEConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("autoencoder config: {m}")));
        if self.encoder_channels.len() != 3 || self.decoder_channels.len() != 2 {
            return bad("expected 3 encoder and 2 decoder channel counts".into());
        }
        if self
            .encoder_channels
            .iter()
            .chain(&self.decoder_channels)
            .any(|&c| c == 0)
            || self.input_channels == 0
        {
            return bad("channel counts must be positive".into());
        }
        let s = self.stride_per_level;
        if s < 1 || self.kernel_size < s || !(self.kernel_size - s).is_multiple_of(2) {
            return bad(format!(
                "kernel_size {} with stride {s} cannot halve and restore dims exactly",
                self.kernel_size
            ));
        }
        if self.feature_kernel_size.is_multiple_of(2) {
            return bad("feature_kernel_size must be odd".into());
        }
        if !(self.loss_threshold > 0.0) {
            return bad("loss_threshold must be positive".into());
        }
        self.optimizer.validate()
    }

    /// Image dims must be multiples of this.
    pub fn required_multiple(&self) -> usize {
        self.stride_per_level * self.stride_per_level
    }

    /// Output channels of each of the six layers.
    pub fn layer_channels(&self) -> [usize; NUM_LAYERS] {
        let e = &self.encoder_channels;
        let d = &self.decoder_channels;
        [e[0], e[1], e[2], d[0], d[1], self.input_channels]
    }
}

/// Per-layer activations `g_k` of one forward pass, ordered encoder to decoder.
#[derive(Clone, Debug)]
pub struct FeatureStack {
    pub features: Vec<Tensor>,
    pub source_shape: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct AutoEncoder {
    pub config: AEConfig,
    pub params: ParamStore,
    layers: Vec<Layer>,
}

const LAYER_NAMES: [&str; NUM_LAYERS] =
    ["upfeature", "enc1", "enc2", "dec1", "dec2", "downfeature"];

impl AutoEncoder {
    /// Glorot-uniform weights, zero biases.
    pub fn new(config: AEConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let ch = config.layer_channels();
        let fk = config.feature_kernel_size;
        let k = config.kernel_size;
        let s = config.stride_per_level;
        let strided_pad = (k - s) / 2;
        let mut layers = Vec::with_capacity(NUM_LAYERS);
        let mut cin = config.input_channels;
        for (i, &cout) in ch.iter().enumerate() {
            let (kind, ks, stride, pad) = match i {
                0 | 5 => (LayerKind::Conv, fk, 1, fk / 2),
                1 | 2 => (LayerKind::Conv, k, s, strided_pad),
                _ => (LayerKind::ConvTranspose, k, s, strided_pad),
            };
            // transposed weights use the (in, out, k, k) layout
            let shape = match kind {
                LayerKind::Conv => [cout, cin, ks, ks],
                LayerKind::ConvTranspose => [cin, cout, ks, ks],
            };
            let fan_in = cin * ks * ks;
            let fan_out = cout * ks * ks;
            let weight = params.add_glorot(
                format!("{}.weight", LAYER_NAMES[i]),
                &shape,
                fan_in,
                fan_out,
                rng,
            )?;
            let bias = params.add_zeros(format!("{}.bias", LAYER_NAMES[i]), &[cout])?;
            layers.push(Layer {
                kind,
                weight,
                bias,
                stride,
                pad,
                activation: i + 1 < NUM_LAYERS,
            });
            cin = cout;
        }
        Ok(AutoEncoder {
            config,
            params,
            layers,
        })
    }

    /// Rebuilds a model from checkpointed parameters.
    pub fn from_params(config: AEConfig, store: &ParamStore) -> Result<Self> {
        let mut model = AutoEncoder::new(config, &mut Rng::new(0))?;
        if store.len() != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "autoencoder expects {} parameters, checkpoint has {}",
                model.params.len(),
                store.len()
            )));
        }
        model.params.load_values_from(store)?;
        Ok(model)
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = *shape else {
            return Err(Error::shape(
                "ae_forward",
                format!("expected NCHW, got {shape:?}"),
            ));
        };
        if c != self.config.input_channels {
            return Err(Error::shape(
                "ae_forward",
                format!(
                    "expected {} input channels, got {c}",
                    self.config.input_channels
                ),
            ));
        }
        let m = self.config.required_multiple();
        if h % m != 0 || w % m != 0 {
            return Err(Error::Indivisible { h, w, multiple: m });
        }
        Ok(())
    }

    /// Records the forward pass on `g`. `mix(k, value)` may return a replacement for layer
    /// `k`'s output before it feeds layer `k + 1`; the replacement is a constant.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        input: NodeId,
        mut mix: impl FnMut(usize, &Tensor) -> Option<Tensor>,
    ) -> Result<Vec<NodeId>> {
        self.check_input(g.shape(input))?;
        let mut h = input;
        let mut outs = Vec::with_capacity(NUM_LAYERS);
        for (k, layer) in self.layers.iter().enumerate() {
            let w = g.param(&self.params, layer.weight);
            let b = g.param(&self.params, layer.bias);
            h = match layer.kind {
                LayerKind::Conv => g.conv2d(h, w, Some(b), layer.stride, layer.pad)?,
                LayerKind::ConvTranspose => {
                    g.conv_transpose2d(h, w, Some(b), layer.stride, layer.pad)?
                }
            };
            if layer.activation {
                h = g.leaky_relu(h, self.config.leaky_slope);
            }
            if let Some(replacement) = mix(k, g.value(h)) {
                if replacement.shape() != g.shape(h) {
                    return Err(Error::shape(
                        "ae_forward",
                        format!(
                            "layer {k} replacement {:?} vs {:?}",
                            replacement.shape(),
                            g.shape(h)
                        ),
                    ));
                }
                h = g.constant(replacement);
            }
            outs.push(h);
        }
        Ok(outs)
    }

    /// `image` is `(N, C, H, W)` or a single `(C, H, W)` image.
    pub fn forward(&self, image: &Tensor) -> Result<(Tensor, FeatureStack)> {
        let batch = as_batch(image)?;
        let mut g = Graph::new();
        let x = g.constant(batch);
        let outs = self.forward_graph(&mut g, x, |_, _| None)?;
        let features: Vec<Tensor> = outs.iter().map(|&n| g.value(n).clone()).collect();
        let recon = features[NUM_LAYERS - 1]
            .clone()
            .reshape(image.shape().to_vec())?;
        Ok((
            recon,
            FeatureStack {
                features,
                source_shape: image.shape().to_vec(),
            },
        ))
    }
}

fn as_batch(image: &Tensor) -> Result<Tensor> {
    match *image.shape() {
        [_, _, _, _] => Ok(image.clone()),
        [c, h, w] => image.clone().reshape(vec![1, c, h, w]),
        ref s => Err(Error::shape(
            "ae_forward",
            format!("expected CHW or NCHW, got {s:?}"),
        )),
    }
}

/// Mean absolute difference over all elements.
pub fn l1_loss(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "l1_loss",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.numel() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainStatus {
    Converged,
    NotConverged,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: AutoEncoder,
    pub status: TrainStatus,
    /// Steps actually applied to the returned weights.
    pub steps: usize,
    /// Mean training L1 of the returned weights.
    pub final_loss: f64,
    /// `(step, loss)` where `loss` is measured before update `step` is applied.
    pub curve: Vec<(usize, f64)>,
}

impl TrainOutcome {
    pub fn curve_csv(&self) -> String {
        curve_csv(&self.curve)
    }
}

pub fn curve_csv(curve: &[(usize, f64)]) -> String {
    let mut s = String::from("step,loss\n");
    for (step, loss) in curve {
        writeln!(s, "{step},{loss:.17e}").expect("write to string");
    }
    s
}

/// Full-batch training on `images` until the mean L1 drops below `config.loss_threshold` or
/// `config.max_steps` updates have been applied.
pub fn train_overfit(
    images: &[ImageSample],
    config: &AEConfig,
    rng: &mut Rng,
) -> Result<TrainOutcome> {
    let first = images.first().ok_or_else(|| {
        Error::InvalidArgument("autoencoder training needs at least one image".into())
    })?;
    let shape = first.pixels.shape().to_vec();
    if let Some(bad) = images.iter().find(|s| s.pixels.shape() != shape.as_slice()) {
        return Err(Error::shape(
            "train_overfit",
            format!(
                "image `{}` is {:?}, expected {shape:?}",
                bad.id,
                bad.pixels.shape()
            ),
        ));
    }
    let model = AutoEncoder::new(config.clone(), rng)?;
    let (h, w) = (shape[1], shape[2]);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for s in images {
        data.extend_from_slice(s.pixels.data());
    }
    let batch = Tensor::new(vec![images.len(), 1, h, w], data)?;
    train_on_batch(model, &batch)
}

fn train_on_batch(mut model: AutoEncoder, batch: &Tensor) -> Result<TrainOutcome> {
    model.check_input(batch.shape())?;
    let mut opt = model.config.optimizer.build();
    let mut curve = Vec::new();
    let max_steps = model.config.max_steps;
    for step in 0..=max_steps {
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let outs = model.forward_graph(&mut g, x, |_, _| None)?;
        let loss = g.mean_abs_diff(outs[NUM_LAYERS - 1], x)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "autoencoder loss diverged at step {step}"
            )));
        }
        curve.push((step, value));
        let done = value < model.config.loss_threshold;
        if done || step == max_steps {
            log::info!("autoencoder stopped at step {step} with L1 {value:.5}");
            return Ok(TrainOutcome {
                model,
                status: if done {
                    TrainStatus::Converged
                } else {
                    TrainStatus::NotConverged
                },
                steps: step,
                final_loss: value,
                curve,
            });
        }
        g.backward(loss)?;
        g.accumulate_into(&mut model.params);
        opt.step(&mut model.params)?;
    }
    unreachable!("loop returns on its last iteration")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;

    fn small_config() -> AEConfig {
        AEConfig {
            encoder_channels: vec![4, 8, 8],
            decoder_channels: vec![8, 4],
            ..AEConfig::default()
        }
    }

    #[test]
    fn shapes_follow_the_stride_schedule() {
        let model = AutoEncoder::new(AEConfig::default(), &mut Rng::new(1)).unwrap();
        let img = Tensor::uniform(vec![1, 1, 16, 12], 1.0, &mut Rng::new(2));
        let (recon, stack) = model.forward(&img).unwrap();
        assert_eq!(recon.shape(), img.shape());
        let shapes: Vec<_> = stack.features.iter().map(|f| f.shape().to_vec()).collect();
        assert_eq!(
            shapes,
            vec![
                vec![1, 64, 16, 12],
                vec![1, 128, 8, 6],
                vec![1, 256, 4, 3],
                vec![1, 128, 8, 6],
                vec![1, 64, 16, 12],
                vec![1, 1, 16, 12],
            ]
        );
    }

    #[test]
    fn indivisible_dims_name_the_multiple() {
        let model = AutoEncoder::new(small_config(), &mut Rng::new(1)).unwrap();
        let err = model
            .forward(&Tensor::zeros(vec![1, 1, 10, 8]))
            .unwrap_err();
        assert!(
            matches!(err, Error::Indivisible { multiple: 4, .. }),
            "{err}"
        );
        assert!(err.to_string().contains("divisible by 4"));
    }

    #[test]
    fn zero_image_gives_zero_reconstruction() {
        let model = AutoEncoder::new(AEConfig::default(), &mut Rng::new(3)).unwrap();
        let (recon, _) = model.forward(&Tensor::zeros(vec![1, 8, 8])).unwrap();
        assert!(recon.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn l1_examples() {
        let a = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        assert_eq!(l1_loss(&a, &b).unwrap(), 0.5);
        assert_eq!(l1_loss(&b, &a).unwrap(), 0.5);
        assert!(l1_loss(&a, &Tensor::zeros(vec![3])).is_err());
    }

    #[test]
    fn constant_image_converges_quickly() {
        let img = ImageSample::new(
            "c",
            Tensor::full(vec![1, 16, 16], 0.4),
            vec![],
            Split::Train,
        )
        .unwrap();
        let cfg = AEConfig {
            max_steps: 200,
            optimizer: OptimizerConfig::Adam { lr: 1e-2 },
            ..small_config()
        };
        let out = train_overfit(&[img], &cfg, &mut Rng::new(4)).unwrap();
        assert_eq!(
            out.status,
            TrainStatus::Converged,
            "final {}",
            out.final_loss
        );
        assert!(out.steps < 200);
        assert!(out.final_loss < 0.01);
    }

    #[test]
    fn training_is_deterministic() {
        let img = ImageSample::new(
            "r",
            Tensor::uniform(vec![1, 8, 8], 0.5, &mut Rng::new(5)).map(|v| v + 0.5),
            vec![],
            Split::Train,
        )
        .unwrap();
        let cfg = AEConfig {
            max_steps: 5,
            ..small_config()
        };
        let a = train_overfit(std::slice::from_ref(&img), &cfg, &mut Rng::new(6)).unwrap();
        let b = train_overfit(std::slice::from_ref(&img), &cfg, &mut Rng::new(6)).unwrap();
        for (p, q) in a.model.params.iter().zip(b.model.params.iter()) {
            assert!(p.value.bitwise_eq(&q.value));
        }
        assert_eq!(a.status, TrainStatus::NotConverged);
        assert_eq!(a.curve.len(), 6);
        assert!(a.curve_csv().starts_with("step,loss\n0,"));
    }

    #[test]
    fn rejects_empty_and_mixed_sizes() {
        assert!(train_overfit(&[], &small_config(), &mut Rng::new(0)).is_err());
        let a = ImageSample::new("a", Tensor::zeros(vec![1, 8, 8]), vec![], Split::Train).unwrap();
        let b = ImageSample::new("b", Tensor::zeros(vec![1, 8, 12]), vec![], Split::Train).unwrap();
        assert!(train_overfit(&[a, b], &small_config(), &mut Rng::new(0)).is_err());
    }
}
