//! Gradient checks for every differentiable graph op and for the composed models, as a
//! table of named rows.

use std::rc::Rc;

use crate::attention::{BackboneConfig, FeaturePyramid};
use crate::autoencoder::{AEConfig, AutoEncoder};
use crate::data::{make_phantom, PhantomConfig};
use crate::detector::{Detector, DetectorConfig};
use crate::error::Result;
use crate::tensor::{
    finite_diff_check, GradCheckOptions, GradCheckReport, Graph, NodeId, ParamId, ParamStore, Rng,
    Tensor,
};

/// Acceptance bound on the relative error.
pub const MAX_REL_ERROR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct SuiteRow {
    pub name: String,
    pub report: GradCheckReport,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < MAX_REL_ERROR
    }
}

/// `op,max_rel_error,coords_checked,worst,status` rows.
pub fn suite_csv(rows: &[SuiteRow]) -> String {
    let mut s = String::from("op,max_rel_error,coords_checked,worst,status\n");
    for r in rows {
        let worst = r
            .report
            .worst
            .as_ref()
            .map_or(String::new(), |(n, i)| format!("{n}[{i}]"));
        s.push_str(&format!(
            "{},{:.3e},{},{},{}\n",
            r.name,
            r.report.max_rel_error,
            r.report.coords_checked,
            worst,
            if r.passed() { "pass" } else { "fail" }
        ));
    }
    s
}

struct Case {
    params: ParamStore,
    ids: Vec<ParamId>,
    rng: Rng,
}

impl Case {
    fn new(seed: u64) -> Self {
        Case {
            params: ParamStore::new(),
            ids: Vec::new(),
            rng: Rng::new(seed),
        }
    }

    fn input(mut self, shape: &[usize], bound: f64) -> Self {
        let name = format!("in{}", self.ids.len());
        let t = Tensor::uniform(shape.to_vec(), bound, &mut self.rng);
        self.ids
            .push(self.params.add(name, t).expect("unique name"));
        self
    }

    /// Checks `sum(r * op(inputs))` for a fixed random `r`.
    fn run(
        mut self,
        opts: &GradCheckOptions,
        op: impl Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
    ) -> Result<GradCheckReport> {
        let ids = self.ids.clone();
        let mut probe = Graph::new();
        let nodes: Vec<NodeId> = ids.iter().map(|&i| probe.param(&self.params, i)).collect();
        let out = op(&mut probe, &nodes)?;
        let n = probe.value(out).numel();
        let r: Rc<[f64]> = (0..n).map(|_| self.rng.uniform(-1.0, 1.0)).collect();
        finite_diff_check(&mut self.params, opts, |p, g| {
            let nodes: Vec<NodeId> = ids.iter().map(|&i| g.param(p, i)).collect();
            let out = op(g, &nodes)?;
            g.weighted_sum(out, r.clone())
        })
    }
}

/// Every graph op on small random inputs, each checked in isolation on all coordinates.
pub fn op_rows(seed: u64) -> Result<Vec<SuiteRow>> {
    let opts = GradCheckOptions {
        seed,
        ..GradCheckOptions::default()
    };
    let c = |k: u64| Case::new(seed.wrapping_mul(1000).wrapping_add(k));
    let targets: Rc<[f64]> = (0..12).map(|i| (i % 3 == 0) as u8 as f64).collect();
    let weights: Rc<[f64]> = (0..12).map(|i| 0.25 + 0.05 * i as f64).collect();
    let map: Rc<[usize]> = [5, 0, 3, 3, 11, 7, 2, 9].into();
    let mut rows = Vec::new();
    let mut push = |name: &str, r: Result<GradCheckReport>| -> Result<()> {
        rows.push(SuiteRow {
            name: name.into(),
            report: r?,
        });
        Ok(())
    };
    push(
        "conv2d",
        c(1).input(&[2, 2, 6, 5], 1.0)
            .input(&[3, 2, 3, 3], 0.5)
            .input(&[3], 0.5)
            .run(&opts, |g, n| g.conv2d(n[0], n[1], Some(n[2]), 2, 1)),
    )?;
    push(
        "conv_transpose2d",
        c(2).input(&[2, 3, 3, 3], 1.0)
            .input(&[3, 2, 4, 4], 0.5)
            .input(&[2], 0.5)
            .run(&opts, |g, n| {
                g.conv_transpose2d(n[0], n[1], Some(n[2]), 2, 1)
            }),
    )?;
    push(
        "upsample2x",
        c(3).input(&[1, 2, 3, 4], 1.0)
            .run(&opts, |g, n| g.upsample2x(n[0])),
    )?;
    push(
        "linear",
        c(4).input(&[4, 6], 1.0)
            .input(&[5, 6], 0.5)
            .input(&[5], 0.5)
            .run(&opts, |g, n| g.linear(n[0], n[1], Some(n[2]))),
    )?;
    push(
        "matmul",
        c(5).input(&[3, 4], 1.0)
            .input(&[4, 5], 1.0)
            .run(&opts, |g, n| g.matmul(n[0], n[1])),
    )?;
    push(
        "matmul_nt",
        c(6).input(&[3, 4], 1.0)
            .input(&[5, 4], 1.0)
            .run(&opts, |g, n| g.matmul_nt(n[0], n[1])),
    )?;
    push(
        "layer_norm",
        c(7).input(&[3, 6], 1.0)
            .input(&[6], 1.0)
            .input(&[6], 1.0)
            .run(&opts, |g, n| g.layer_norm(n[0], n[1], n[2], 1e-5)),
    )?;
    push(
        "softmax",
        c(8).input(&[3, 5], 2.0)
            .run(&opts, |g, n| g.softmax(n[0], 1)),
    )?;
    push(
        "add",
        c(9).input(&[3, 4], 1.0)
            .input(&[3, 4], 1.0)
            .run(&opts, |g, n| g.add(n[0], n[1])),
    )?;
    push(
        "sub",
        c(10)
            .input(&[3, 4], 1.0)
            .input(&[3, 4], 1.0)
            .run(&opts, |g, n| g.sub(n[0], n[1])),
    )?;
    push(
        "mul",
        c(11)
            .input(&[3, 4], 1.0)
            .input(&[3, 4], 1.0)
            .run(&opts, |g, n| g.mul(n[0], n[1])),
    )?;
    push(
        "scale",
        c(12)
            .input(&[3, 4], 1.0)
            .run(&opts, |g, n| Ok(g.scale(n[0], -1.7))),
    )?;
    push(
        "leaky_relu",
        c(13)
            .input(&[3, 4], 1.0)
            .run(&opts, |g, n| Ok(g.leaky_relu(n[0], 0.1))),
    )?;
    push(
        "sigmoid",
        c(14)
            .input(&[3, 4], 3.0)
            .run(&opts, |g, n| Ok(g.sigmoid(n[0]))),
    )?;
    push(
        "gather",
        c(15)
            .input(&[3, 4], 1.0)
            .run(&opts, |g, n| g.gather(n[0], map.clone(), vec![2, 4])),
    )?;
    push(
        "concat_cols",
        c(16)
            .input(&[3, 2], 1.0)
            .input(&[3, 4], 1.0)
            .run(&opts, |g, n| g.concat_cols(&[n[0], n[1]])),
    )?;
    push(
        "slice_rows",
        c(17)
            .input(&[5, 3], 1.0)
            .run(&opts, |g, n| g.slice_rows(n[0], 1, 3)),
    )?;
    push(
        "sum",
        c(18).input(&[3, 4], 1.0).run(&opts, |g, n| Ok(g.sum(n[0]))),
    )?;
    push(
        "mean",
        c(19)
            .input(&[3, 4], 1.0)
            .run(&opts, |g, n| Ok(g.mean(n[0]))),
    )?;
    push(
        "weighted_sum",
        c(20)
            .input(&[3, 4], 1.0)
            .run(&opts, |g, n| g.weighted_sum(n[0], weights.clone())),
    )?;
    push(
        "mean_abs_diff",
        c(21)
            .input(&[3, 4], 1.0)
            .input(&[3, 4], 1.0)
            .run(&opts, |g, n| g.mean_abs_diff(n[0], n[1])),
    )?;
    push(
        "bce_with_logits",
        c(22).input(&[3, 4], 3.0).run(&opts, |g, n| {
            g.bce_with_logits(n[0], targets.clone(), weights.clone())
        }),
    )?;
    push(
        "smooth_l1",
        c(23).input(&[3, 4], 2.0).run(&opts, |g, n| {
            g.smooth_l1(n[0], targets.clone(), weights.clone(), 1.0)
        }),
    )?;
    Ok(rows)
}

/// Random weighted sum of a small autoencoder's reconstruction of a random 8x8 image.
pub fn autoencoder_row(seed: u64) -> Result<SuiteRow> {
    let config = AEConfig {
        encoder_channels: vec![2, 3, 4],
        decoder_channels: vec![3, 2],
        ..AEConfig::default()
    };
    let model = AutoEncoder::new(config.clone(), &mut Rng::new(seed))?;
    let mut rng = Rng::new(seed ^ 0x5eed);
    let image = Tensor::uniform(vec![1, 1, 8, 8], 1.0, &mut rng).map(f64::abs);
    let r: Rc<[f64]> = (0..image.numel()).map(|_| rng.uniform(-1.0, 1.0)).collect();
    // zero-initialised biases leave the dark background's pre-activations within ~1e-6 of
    // the leaky ReLU kink; random biases move the check to a generic point
    let mut params = model.params.clone();
    let ids: Vec<ParamId> = params.ids().collect();
    for id in ids {
        if params.get(id).name.ends_with(".bias") {
            for v in params.value_mut(id).data_mut() {
                *v = rng.uniform(-0.5, 0.5);
            }
        }
    }
    let opts = GradCheckOptions {
        max_coords_per_param: Some(24),
        seed,
        ..GradCheckOptions::default()
    };
    let report = finite_diff_check(&mut params, &opts, |p, g| {
        let m = AutoEncoder::from_params(config.clone(), p)?;
        let x = g.constant(image.clone());
        let outs = m.forward_graph(g, x, |_, _| None)?;
        g.weighted_sum(*outs.last().expect("six layers"), r.clone())
    })?;
    Ok(SuiteRow {
        name: "autoencoder".into(),
        report,
    })
}

/// The micro-batch detector used by the composed check: `base` scaled down to 2 backbone
/// channels, 4 FPN channels and an 80x64 input (the smallest that tiles into patches).
pub fn micro_detector_config(base: &DetectorConfig) -> DetectorConfig {
    DetectorConfig {
        input_height: 16 * base.attention.patch_h,
        input_width: 16 * base.attention.patch_w,
        backbone: BackboneConfig {
            base_channels: 2,
            ..base.backbone.clone()
        },
        use_attention: true,
        fpn_channels: 4,
        ..base.clone()
    }
}

/// Summed training loss of a two-image micro-batch (one lesion image, one without lesions)
/// through conjunct attention, FPN and head, from fixed backbone features.
pub fn detector_row(base: &DetectorConfig, seed: u64) -> Result<SuiteRow> {
    let config = DetectorConfig {
        seed,
        ..micro_detector_config(base)
    };
    let mut model = Detector::new(config.clone())?;
    let mut batch = Vec::new();
    for (i, tumor) in [true, false].into_iter().enumerate() {
        let s = make_phantom(&PhantomConfig {
            height: config.input_height,
            width: config.input_width,
            tumor,
            seed: seed.wrapping_add(i as u64),
            ..PhantomConfig::default()
        })?;
        let mut g = Graph::new();
        let x = g.constant(s.as_batch());
        let levels = model.backbone.forward_graph(&mut g, &model.params, x)?;
        let pyr = FeaturePyramid {
            levels: levels.iter().map(|&n| g.value(n).clone()).collect(),
        };
        batch.push((s.boxes, pyr));
    }
    let arch = model.clone();
    let opts = GradCheckOptions {
        max_coords_per_param: Some(6),
        seed,
        ..GradCheckOptions::default()
    };
    let report = finite_diff_check(&mut model.params, &opts, |p, g| {
        let mut total: Option<NodeId> = None;
        for (boxes, pyr) in &batch {
            let levels: Vec<NodeId> = pyr.levels.iter().map(|t| g.constant(t.clone())).collect();
            let heads = arch.heads_from_features(g, p, &levels)?;
            let l = arch.loss_from_heads(g, &heads, boxes)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        Ok(total.expect("two images"))
    })?;
    Ok(SuiteRow {
        name: "attention+fpn+head+loss".into(),
        report,
    })
}

/// All rows: the ops, then the autoencoder and detector compositions.
pub fn run_suite(detector: &DetectorConfig, seed: u64) -> Result<Vec<SuiteRow>> {
    let mut rows = op_rows(seed)?;
    rows.push(autoencoder_row(seed)?);
    rows.push(detector_row(detector, seed)?);
    Ok(rows)
}
