use std::rc::Rc;

use replica_core::tensor::{
    analytic_grads, finite_diff_check, finite_diff_check_with, GradCheckOptions, Graph, ParamStore,
    Rng, Tensor,
};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

fn random_weights(len: usize, rng: &mut Rng) -> Rc<[f64]> {
    (0..len).map(|_| rng.uniform(-1.0, 1.0)).collect()
}

#[test]
fn conv2d_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 1, 1, 1], &[2.0]));
    let w = g.constant(t(&[1, 1, 1, 1], &[3.0]));
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.value(y).data(), &[6.0]);

    let mut rng = Rng::new(1);
    let img = Tensor::uniform(vec![1, 1, 5, 4], 1.0, &mut rng);
    let mut k = vec![0.0; 9];
    k[4] = 1.0;
    let x = g.constant(img.clone());
    let w = g.constant(t(&[1, 1, 3, 3], &k));
    let y = g.conv2d(x, w, None, 1, 1).unwrap();
    assert!(g.value(y).bitwise_eq(&img));

    let x = g.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let w = g.constant(t(&[1, 1, 2, 2], &[1.0; 4]));
    let y = g.conv2d(x, w, None, 1, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1]);
    assert_eq!(g.value(y).data(), &[10.0]);
}

#[test]
fn conv2d_output_dims_and_errors() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(vec![2, 3, 9, 7]));
    let w = g.constant(Tensor::zeros(vec![4, 3, 3, 2]));
    let y = g.conv2d(x, w, None, 2, 1).unwrap();
    // floor((9+2-3)/2)+1 = 5, floor((7+2-2)/2)+1 = 4
    assert_eq!(g.shape(y), &[2, 4, 5, 4]);

    let bad = g.constant(Tensor::zeros(vec![4, 2, 3, 3]));
    let err = g.conv2d(x, bad, None, 1, 0).unwrap_err().to_string();
    assert!(err.contains("3 channels"), "{err}");
    let huge = g.constant(Tensor::zeros(vec![1, 3, 12, 12]));
    assert!(g.conv2d(x, huge, None, 1, 0).is_err());
}

#[test]
fn conv_transpose_examples() {
    let mut g = Graph::new();
    let mut rng = Rng::new(2);
    let img = Tensor::uniform(vec![1, 1, 3, 3], 1.0, &mut rng);
    let x = g.constant(img.clone());
    let w = g.constant(t(&[1, 1, 1, 1], &[1.0]));
    let y = g.conv_transpose2d(x, w, None, 1, 0).unwrap();
    assert!(g.value(y).bitwise_eq(&img));

    let x = g.constant(t(&[1, 1, 1, 1], &[1.0]));
    let w = g.constant(t(&[1, 1, 2, 2], &[1.0; 4]));
    let y = g.conv_transpose2d(x, w, None, 2, 0).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 2, 2]);
    assert_eq!(g.value(y).data(), &[1.0; 4]);

    let x = g.constant(Tensor::zeros(vec![1, 3, 5, 4]));
    let w = g.constant(Tensor::zeros(vec![3, 2, 4, 4]));
    let y = g.conv_transpose2d(x, w, None, 2, 1).unwrap();
    // (H-1)*s - 2p + k
    assert_eq!(g.shape(y), &[1, 2, 10, 8]);
}

#[test]
fn conv_adjoint_identity() {
    let mut rng = Rng::new(11);
    for &(stride, pad, k, h, w) in &[
        (1, 0, 3, 5, 6),
        (1, 1, 3, 4, 4),
        (2, 1, 4, 8, 6),
        (2, 0, 2, 6, 4),
    ] {
        let x = Tensor::uniform(vec![2, 3, h, w], 1.0, &mut rng);
        let wt = Tensor::uniform(vec![4, 3, k, k], 1.0, &mut rng);
        let mut g = Graph::new();
        let xn = g.constant(x.clone());
        let wn = g.constant(wt);
        let ax = g.conv2d(xn, wn, None, stride, pad).unwrap();
        let y = Tensor::uniform(g.shape(ax).to_vec(), 1.0, &mut rng);
        let yn = g.constant(y.clone());
        let aty = g.conv_transpose2d(yn, wn, None, stride, pad).unwrap();
        assert_eq!(g.shape(aty), x.shape(), "stride {stride} pad {pad}");
        let lhs = g.value(ax).dot(&y);
        let rhs = x.dot(g.value(aty));
        assert!((lhs - rhs).abs() < 1e-10, "{lhs} vs {rhs}");
    }
}

#[test]
fn conv_transpose_equals_conv_input_gradient() {
    let mut rng = Rng::new(5);
    let x = Tensor::uniform(vec![1, 2, 6, 6], 1.0, &mut rng);
    let wt = Tensor::uniform(vec![3, 2, 4, 4], 1.0, &mut rng);
    let mut g = Graph::new();
    let xn = g.constant(x);
    let wn = g.constant(wt);
    let y = g.conv2d(xn, wn, None, 2, 1).unwrap();
    let dy = Tensor::uniform(g.shape(y).to_vec(), 1.0, &mut rng);
    let loss = g.weighted_sum(y, dy.data().into()).unwrap();
    let dyn_ = g.constant(dy);
    let tr = g.conv_transpose2d(dyn_, wn, None, 2, 1).unwrap();
    g.backward(loss).unwrap();
    close(g.grad(xn).unwrap(), g.value(tr).data(), 1e-12);
}

#[test]
fn linear_adjoint_and_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 2], &[1.0, 2.0]));
    let w = g.constant(t(&[2, 2], &[1.0, 1.0, 1.0, -1.0]));
    let b = g.constant(t(&[2], &[0.0, 1.0]));
    let y = g.linear(x, w, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[3.0, 0.0]);

    let eye = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let zb = g.constant(Tensor::zeros(vec![2]));
    let y = g.linear(x, eye, Some(zb)).unwrap();
    assert_eq!(g.value(y).data(), &[1.0, 2.0]);

    let zw = g.constant(Tensor::zeros(vec![3, 2]));
    let bias = g.constant(t(&[3], &[4.0, 5.0, 6.0]));
    let xs = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let y = g.linear(xs, zw, Some(bias)).unwrap();
    assert_eq!(g.value(y).data(), &[4.0, 5.0, 6.0, 4.0, 5.0, 6.0]);

    let bad = g.constant(Tensor::zeros(vec![3, 3]));
    assert!(g.linear(xs, bad, None).is_err());

    // <W x, y> == <x, Wᵀ y>
    let mut rng = Rng::new(9);
    let xv = Tensor::uniform(vec![4, 5], 1.0, &mut rng);
    let wv = Tensor::uniform(vec![3, 5], 1.0, &mut rng);
    let yv = Tensor::uniform(vec![4, 3], 1.0, &mut rng);
    let mut g = Graph::new();
    let xn = g.constant(xv.clone());
    let wn = g.constant(wv);
    let ax = g.linear(xn, wn, None).unwrap();
    let loss = g.weighted_sum(ax, yv.data().into()).unwrap();
    g.backward(loss).unwrap();
    let lhs = g.value(ax).dot(&yv);
    let rhs: f64 = xv
        .data()
        .iter()
        .zip(g.grad(xn).unwrap())
        .map(|(a, b)| a * b)
        .sum();
    assert!((lhs - rhs).abs() < 1e-10);
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let ones = g.constant(Tensor::full(vec![3], 1.0));
    let zeros = g.constant(Tensor::zeros(vec![3]));
    let x = g.constant(t(&[1, 3], &[2.0, 2.0, 2.0]));
    let y = g.layer_norm(x, ones, zeros, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

    let one2 = g.constant(Tensor::full(vec![2], 1.0));
    let zero2 = g.constant(Tensor::zeros(vec![2]));
    let x = g.constant(t(&[1, 2], &[1.0, -1.0]));
    let y = g.layer_norm(x, one2, zero2, 1e-12).unwrap();
    close(g.value(y).data(), &[1.0, -1.0], 1e-10);

    let five = g.constant(Tensor::full(vec![3], 5.0));
    let x = g.constant(t(&[2, 3], &[1.0, 7.0, -2.0, 0.5, 0.25, 9.0]));
    let y = g.layer_norm(x, zeros, five, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[5.0; 6]);

    let mut rng = Rng::new(4);
    let x = g.constant(Tensor::uniform(vec![6, 7], 3.0, &mut rng));
    let one7 = g.constant(Tensor::full(vec![7], 1.0));
    let zero7 = g.constant(Tensor::zeros(vec![7]));
    let y = g.layer_norm(x, one7, zero7, 1e-5).unwrap();
    for row in g.value(y).data().chunks(7) {
        assert!(row.iter().sum::<f64>().abs() / 7.0 < 1e-10);
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[1, 4], &[0.3; 4]));
    let y = g.softmax(x, 1).unwrap();
    close(g.value(y).data(), &[0.25; 4], 1e-15);

    let x = g.constant(t(&[2], &[0.0, 3f64.ln()]));
    let y = g.softmax(x, 0).unwrap();
    close(g.value(y).data(), &[0.25, 0.75], 1e-15);

    let mut rng = Rng::new(8);
    let base = Tensor::uniform(vec![3, 5], 4.0, &mut rng);
    let x = g.constant(base.clone());
    let xs = g.constant(base.map(|v| v + 123.25));
    let a = g.softmax(x, 1).unwrap();
    let b = g.softmax(xs, 1).unwrap();
    close(g.value(a).data(), g.value(b).data(), 1e-12);
    for row in g.value(a).data().chunks(5) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&v| v > 0.0));
    }

    // axis 0 of a (3, 2) tensor normalizes columns
    let x = g.constant(Tensor::uniform(vec![3, 2], 2.0, &mut rng));
    let y = g.softmax(x, 0).unwrap();
    let d = g.value(y).data();
    assert!((d[0] + d[2] + d[4] - 1.0).abs() < 1e-12);
    assert!(g.softmax(x, 2).is_err());
}

fn check(
    params: &mut ParamStore,
    f: impl FnMut(&ParamStore, &mut Graph) -> replica_core::Result<replica_core::tensor::NodeId>,
) -> f64 {
    let report = finite_diff_check(params, &GradCheckOptions::default(), f).unwrap();
    report.max_rel_error
}

#[test]
fn quadratic_check_is_exact() {
    let mut p = ParamStore::new();
    let id = p.add("p", Tensor::scalar(3.0)).unwrap();
    let err = check(&mut p, |s, g| {
        let x = g.param(s, id);
        let sq = g.mul(x, x)?;
        Ok(g.sum(sq))
    });
    assert!(err < 1e-9, "{err}");
    let grads = analytic_grads(&p, &mut |s: &ParamStore, g: &mut Graph| {
        let x = g.param(s, id);
        let sq = g.mul(x, x)?;
        Ok(g.sum(sq))
    })
    .unwrap();
    assert_eq!(grads[0], vec![6.0]);
}

#[test]
fn every_primitive_passes_gradcheck() {
    let mut rng = Rng::new(21);
    let mut p = ParamStore::new();
    let x = p
        .add("x", Tensor::uniform(vec![2, 2, 6, 5], 1.0, &mut rng))
        .unwrap();
    let w = p
        .add("w", Tensor::uniform(vec![3, 2, 3, 3], 0.5, &mut rng))
        .unwrap();
    let b = p.add("b", Tensor::uniform(vec![3], 0.5, &mut rng)).unwrap();
    let wt = p
        .add("wt", Tensor::uniform(vec![3, 2, 4, 4], 0.5, &mut rng))
        .unwrap();
    let bt = p
        .add("bt", Tensor::uniform(vec![2], 0.5, &mut rng))
        .unwrap();
    let r_conv = random_weights(2 * 3 * 3 * 3, &mut rng);
    let r_tr = random_weights(2 * 2 * 6 * 6, &mut rng);
    let r_up = random_weights(2 * 3 * 6 * 6, &mut rng);
    let err = check(&mut p, |s, g| {
        let (x, w, b, wt, bt) = (
            g.param(s, x),
            g.param(s, w),
            g.param(s, b),
            g.param(s, wt),
            g.param(s, bt),
        );
        let c = g.conv2d(x, w, Some(b), 2, 1)?; // (2,3,3,3)
        let l1 = g.weighted_sum(c, r_conv.clone())?;
        let tr = g.conv_transpose2d(c, wt, Some(bt), 2, 1)?; // (2,2,6,6)
        let l2 = g.weighted_sum(tr, r_tr.clone())?;
        let up = g.upsample2x(c)?;
        let l3 = g.weighted_sum(up, r_up.clone())?;
        let s = g.add(l1, l2)?;
        g.add(s, l3)
    });
    assert!(err < 1e-4, "conv family {err}");

    let mut p = ParamStore::new();
    let x = p
        .add("x", Tensor::uniform(vec![4, 6], 1.0, &mut rng))
        .unwrap();
    let w = p
        .add("w", Tensor::uniform(vec![6, 6], 0.5, &mut rng))
        .unwrap();
    let b = p.add("b", Tensor::uniform(vec![6], 0.5, &mut rng)).unwrap();
    let gamma = p
        .add("gamma", Tensor::uniform(vec![6], 1.0, &mut rng))
        .unwrap();
    let beta = p
        .add("beta", Tensor::uniform(vec![6], 1.0, &mut rng))
        .unwrap();
    let table = p
        .add("table", Tensor::uniform(vec![7, 6], 1.0, &mut rng))
        .unwrap();
    let r = random_weights(4 * 6, &mut rng);
    let r2 = random_weights(4 * 4, &mut rng);
    let targets: Rc<[f64]> = (0..24).map(|i| (i % 2) as f64).collect();
    let weights = random_weights(24, &mut rng)
        .iter()
        .map(|v| v.abs())
        .collect::<Rc<[f64]>>();
    let map: Rc<[usize]> = (0..24).rev().collect();
    let err = check(&mut p, |s, g| {
        let x = g.param(s, x);
        let w = g.param(s, w);
        let b = g.param(s, b);
        let (gamma, beta, table) = (g.param(s, gamma), g.param(s, beta), g.param(s, table));
        let lin = g.linear(x, w, Some(b))?;
        let ln = g.layer_norm(lin, gamma, beta, 1e-5)?;
        let pos = g.slice_rows(table, 1, 4)?;
        let z = g.add(ln, pos)?;
        let scores = g.matmul_nt(z, x)?;
        let scaled = g.scale(scores, 0.3);
        let att = g.softmax(scaled, 1)?;
        let av = g.matmul(att, z)?;
        let left = g.gather(av, map.clone(), vec![4, 6])?;
        let halves = g.concat_cols(&[left, av])?;
        let lr = g.leaky_relu(halves, 0.1);
        let sig = g.sigmoid(lin);
        let prod = g.mul(sig, ln)?;
        let diff = g.sub(prod, av)?;
        let l1 = g.weighted_sum(diff, r.clone())?;
        let l2 = g.weighted_sum(att, r2.clone())?;
        let bce = g.bce_with_logits(lin, targets.clone(), weights.clone())?;
        let sl1 = g.smooth_l1(ln, targets.clone(), weights.clone(), 1.0)?;
        let m = g.mean(lr);
        let mut total = g.add(l1, l2)?;
        for extra in [bce, sl1, m] {
            total = g.add(total, extra)?;
        }
        Ok(total)
    });
    assert!(err < 1e-4, "dense family {err}");
}

#[test]
fn conv_layer_norm_softmax_composition() {
    let mut rng = Rng::new(33);
    let mut p = ParamStore::new();
    let x = p
        .add("x", Tensor::uniform(vec![1, 2, 5, 5], 1.0, &mut rng))
        .unwrap();
    let w = p
        .add("w", Tensor::uniform(vec![4, 2, 3, 3], 0.5, &mut rng))
        .unwrap();
    let gamma = p
        .add("gamma", Tensor::uniform(vec![25], 1.0, &mut rng))
        .unwrap();
    let beta = p
        .add("beta", Tensor::uniform(vec![25], 1.0, &mut rng))
        .unwrap();
    // A plain sum of softmax rows is constant, so the objective weights each output.
    let r = random_weights(100, &mut rng);
    let mut f = |s: &ParamStore, g: &mut Graph| {
        let x = g.param(s, x);
        let w = g.param(s, w);
        let (gamma, beta) = (g.param(s, gamma), g.param(s, beta));
        let c = g.conv2d(x, w, None, 1, 1)?;
        let rows = g.gather(c, (0..100).collect(), vec![4, 25])?;
        let ln = g.layer_norm(rows, gamma, beta, 1e-5)?;
        let sm = g.softmax(ln, 1)?;
        g.weighted_sum(sm, r.clone())
    };
    let opts = GradCheckOptions::default();
    let report = finite_diff_check(&mut p, &opts, &mut f).unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");

    // A conv backward that returns twice the true gradient is caught.
    let mut corrupted = analytic_grads(&p, &mut f).unwrap();
    for v in &mut corrupted[w.index()] {
        *v *= 2.0;
    }
    let mut value = |s: &ParamStore| {
        let mut g = Graph::new();
        let l = f(s, &mut g)?;
        Ok(g.value(l).data()[0])
    };
    let report = finite_diff_check_with(&mut p, &opts, &corrupted, &mut value).unwrap();
    assert!((report.max_rel_error - 0.5).abs() < 1e-4, "{report:?}");
    assert_eq!(report.worst.unwrap().0, "w");
}

#[test]
fn graph_is_deterministic() {
    let run = || {
        let mut rng = Rng::new(77);
        let mut g = Graph::new();
        let x = g.constant(Tensor::uniform(vec![2, 3, 8, 8], 1.0, &mut rng));
        let w = g.constant(Tensor::uniform(vec![5, 3, 3, 3], 1.0, &mut rng));
        let y = g.conv2d(x, w, None, 2, 1).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        (g.value(y).clone(), g.grad(w).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.bitwise_eq(&b));
    assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(vec![2]));
    assert!(g.backward(x).is_err());
}
