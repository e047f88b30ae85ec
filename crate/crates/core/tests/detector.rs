use replica_core::attention::{BackboneConfig, FeaturePyramid};
use replica_core::data::{generate_samples, DatasetSpec, ImageSample, PhantomConfig};
use replica_core::detector::{dataset_loss, train_detector, Detector, DetectorConfig};
use replica_core::iou;
use replica_core::tensor::{finite_diff_check, GradCheckOptions, Graph, ParamId, Rng, Tensor};

fn phantoms(n: usize, h: usize, w: usize, seed: u64) -> Vec<ImageSample> {
    generate_samples(&DatasetSpec {
        n_normal: 0,
        n_tumor: n,
        splits: (1.0, 0.0, 0.0),
        phantom: PhantomConfig {
            height: h,
            width: w,
            ..PhantomConfig::default()
        },
        seed,
    })
    .unwrap()
}

fn micro_config() -> DetectorConfig {
    DetectorConfig {
        input_height: 80,
        input_width: 64,
        backbone: BackboneConfig {
            base_channels: 2,
            ..BackboneConfig::default()
        },
        fpn_channels: 4,
        ..DetectorConfig::default()
    }
}

fn random_pyramid(model: &Detector, rng: &mut Rng) -> FeaturePyramid {
    let (h, w) = (model.config.input_height, model.config.input_width);
    FeaturePyramid {
        levels: model
            .backbone
            .level_channels()
            .iter()
            .enumerate()
            .map(|(l, &c)| Tensor::uniform(vec![1, c, h >> (l + 1), w >> (l + 1)], 1.0, rng))
            .collect(),
    }
}

fn set(model: &mut Detector, id: ParamId, f: impl Fn(&[usize], usize) -> f64) {
    let t = model.params.value_mut(id);
    let shape = t.shape().to_vec();
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = f(&shape, i);
    }
}

/// 3x3 identity: 1 at the centre tap of the matching channel.
fn identity_3x3(shape: &[usize], i: usize) -> f64 {
    let (cin, k) = (shape[1], shape[2] * shape[3]);
    let (o, rest) = (i / (cin * k), i % (cin * k));
    if rest / k == o && rest % k == 4 {
        1.0
    } else {
        0.0
    }
}

#[test]
fn fpn_sums_lateral_biases_top_down() {
    let mut model = Detector::new(micro_config()).unwrap();
    let ids = model.fpn_params();
    for (l, &((lw, lb), (sw, sb))) in ids.iter().enumerate() {
        set(&mut model, lw, |_, _| 0.0);
        set(&mut model, lb, |_, f| (l + 1) as f64 * 10.0 + f as f64);
        set(&mut model, sw, identity_3x3);
        set(&mut model, sb, |_, _| 0.0);
    }
    let pyr = random_pyramid(&model, &mut Rng::new(1));
    let out = model.fpn_merge(&pyr).unwrap();
    for (l, t) in out.levels.iter().enumerate() {
        let (_, f, h, w) = t.dims4("test").unwrap();
        for c in 0..f {
            // level l accumulates the biases of itself and every coarser level
            let want: f64 = (l..4).map(|j| (j + 1) as f64 * 10.0 + c as f64).sum();
            for &v in &t.data()[c * h * w..(c + 1) * h * w] {
                assert_eq!(v, want);
            }
        }
    }
}

#[test]
fn fpn_top_lateral_reaches_finest_level_by_nearest_upsampling() {
    let mut model = Detector::new(micro_config()).unwrap();
    let ids = model.fpn_params();
    for &((lw, lb), _) in &ids[..3] {
        set(&mut model, lw, |_, _| 0.0);
        set(&mut model, lb, |_, _| 0.0);
    }
    for &(_, (sw, sb)) in &ids {
        set(&mut model, sw, identity_3x3);
        set(&mut model, sb, |_, _| 0.0);
    }
    let pyr = random_pyramid(&model, &mut Rng::new(2));
    let out = model.fpn_merge(&pyr).unwrap();
    let ((tw, tb), _) = ids[3];
    let (wt, bt) = (
        model.params.value(tw).clone(),
        model.params.value(tb).clone(),
    );
    let top = &pyr.levels[3];
    let (_, c3, h3, w3) = top.dims4("test").unwrap();
    let fine = &out.levels[0];
    let (_, f, h0, w0) = fine.dims4("test").unwrap();
    for o in 0..f {
        for y in 0..h0 {
            for x in 0..w0 {
                let (ty, tx) = (y >> 3, x >> 3);
                let mut want = bt.data()[o];
                for c in 0..c3 {
                    want += wt.data()[o * c3 + c] * top.data()[(c * h3 + ty) * w3 + tx];
                }
                let got = fine.data()[(o * h0 + y) * w0 + x];
                assert!((got - want).abs() < 1e-12, "{o} {y} {x}: {got} vs {want}");
            }
        }
    }
}

#[test]
fn fpn_channel_contract() {
    let model = Detector::new(micro_config()).unwrap();
    let pyr = random_pyramid(&model, &mut Rng::new(3));
    let out = model.fpn_merge(&pyr).unwrap();
    for (a, b) in pyr.levels.iter().zip(&out.levels) {
        assert_eq!(b.shape()[1], 4);
        assert_eq!(a.shape()[2..], b.shape()[2..]);
    }
    let short = FeaturePyramid {
        levels: pyr.levels[..3].to_vec(),
    };
    assert!(model.fpn_merge(&short).is_err());
}

#[test]
fn head_shapes_per_level() {
    let model = Detector::new(DetectorConfig::default()).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::uniform(vec![1, 16, 10, 8], 1.0, &mut Rng::new(4)));
    let out = model.head_graph(&mut g, &model.params, &[x]).unwrap();
    assert_eq!(g.shape(out[0].objectness), &[1, 1, 10, 8]);
    assert_eq!(g.shape(out[0].deltas), &[1, 4, 10, 8]);
}

#[test]
fn zero_weights_give_even_odds_and_no_detections_above_them() {
    let config = DetectorConfig {
        score_threshold: 0.6,
        ..micro_config()
    };
    let mut model = Detector::new(config).unwrap();
    let ids: Vec<ParamId> = model.params.ids().collect();
    for id in ids {
        set(&mut model, id, |_, _| 0.0);
    }
    let s = &phantoms(1, 80, 64, 5)[0];
    for (obj, _) in model.head_forward(s).unwrap() {
        assert!(obj.data().iter().all(|&p| p == 0.5));
    }
    assert!(model.infer(s).unwrap().is_empty());
}

/// Summed loss of a two-image micro-batch, one image without lesions, taken from fixed
/// backbone features through attention, FPN, head and loss.
fn composed_gradcheck(seed: u64) -> replica_core::tensor::GradCheckReport {
    let mut model = Detector::new(DetectorConfig {
        seed,
        ..micro_config()
    })
    .unwrap();
    let mut batch = phantoms(2, 80, 64, 6);
    batch[1].boxes.clear();
    let features: Vec<FeaturePyramid> = batch
        .iter()
        .map(|s| {
            let mut g = Graph::new();
            let x = g.constant(s.as_batch());
            let levels = model
                .backbone
                .forward_graph(&mut g, &model.params, x)
                .unwrap();
            FeaturePyramid {
                levels: levels.iter().map(|&n| g.value(n).clone()).collect(),
            }
        })
        .collect();
    let arch = model.clone();
    let opts = GradCheckOptions {
        max_coords_per_param: Some(6),
        seed: 7,
        ..GradCheckOptions::default()
    };
    finite_diff_check(&mut model.params, &opts, |p, g| {
        let mut total = None;
        for (s, f) in batch.iter().zip(&features) {
            let levels: Vec<_> = f.levels.iter().map(|t| g.constant(t.clone())).collect();
            let heads = arch.heads_from_features(g, p, &levels)?;
            let l = arch.loss_from_heads(g, &heads, &s.boxes)?;
            total = Some(match total {
                None => l,
                Some(t) => g.add(t, l)?,
            });
        }
        Ok(total.unwrap())
    })
    .unwrap()
}

#[test]
fn composed_train_step_passes_gradcheck() {
    for seed in 0..3 {
        let r = composed_gradcheck(seed);
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
    }
}

#[test]
fn training_is_deterministic_and_finite() {
    let data = phantoms(3, 80, 64, 8);
    let config = DetectorConfig {
        steps: 4,
        batch_size: 2,
        ..micro_config()
    };
    let a = train_detector(&data, &config).unwrap();
    let b = train_detector(&data, &config).unwrap();
    assert_eq!(a.curve_csv(), b.curve_csv());
    for (p, q) in a.model.params.iter().zip(b.model.params.iter()) {
        assert!(p.value.bitwise_eq(&q.value), "{}", p.name);
    }
    assert!(a.curve.iter().all(|(_, l)| l.is_finite()));
}

#[test]
fn inference_is_sorted_bounded_and_capped() {
    let config = DetectorConfig {
        max_detections: 7,
        score_threshold: 0.01,
        ..micro_config()
    };
    let model = Detector::new(config).unwrap();
    let s = &phantoms(1, 80, 64, 9)[0];
    let dets = model.infer(s).unwrap();
    assert!(dets.len() <= 7);
    for w in dets.windows(2) {
        assert!(w[0].score >= w[1].score);
    }
    for d in &dets {
        let b = d.bbox;
        assert!(b.x >= 0.0 && b.y >= 0.0 && b.x + b.w <= 64.0 && b.y + b.h <= 80.0);
        assert!((0.0..=1.0).contains(&d.score));
    }
}

#[test]
fn overfits_four_images() {
    let data = phantoms(4, 160, 128, 3);
    let config = DetectorConfig {
        steps: 200,
        ..DetectorConfig::default()
    };
    let out = train_detector(&data, &config).unwrap();
    let loss = dataset_loss(&out.model, &data).unwrap();
    assert!(loss < 0.05, "loss {loss}");
    for s in &data {
        let dets = out.model.infer(s).unwrap();
        for gt in &s.boxes {
            let best = dets.iter().map(|d| iou(&d.bbox, gt)).fold(0.0, f64::max);
            assert!(best >= 0.5, "{}: best IoU {best}", s.id);
        }
    }
}
