use std::rc::Rc;

use replica_core::attention::{
    add_positional, conjunct_attention, fold_channels, msa_block, patchify, AttnConfig, Backbone,
    BackboneConfig, ConjunctAttention, FeaturePyramid, TokenSequence,
};
use replica_core::tensor::{finite_diff_check, GradCheckOptions, Graph, ParamStore, Rng, Tensor};

fn seq(t: usize, d: usize, seed: u64) -> TokenSequence {
    TokenSequence {
        tokens: Tensor::uniform(vec![t, d], 1.0, &mut Rng::new(seed)),
        level: 0,
        fold_factor: 1,
        grid: (t, 1),
    }
}

fn attention(
    c: usize,
    dims: (usize, usize),
    cfg: AttnConfig,
    seed: u64,
) -> (ConjunctAttention, ParamStore) {
    let mut p = ParamStore::new();
    let a = ConjunctAttention::new(cfg, c, dims, &mut p, &mut Rng::new(seed)).unwrap();
    (a, p)
}

fn zero_output_projection(a: &ConjunctAttention, p: &mut ParamStore) {
    for (w, b) in a.output_projections() {
        p.value_mut(w).data_mut().fill(0.0);
        p.value_mut(b).data_mut().fill(0.0);
    }
}

#[test]
fn zero_output_projection_separates_the_two_variants() {
    let (a, mut p) = attention(2, (80, 64), AttnConfig::default(), 1);
    zero_output_projection(&a, &mut p);
    let z = seq(6, 40, 2);
    let out = msa_block(&z, &a, &p).unwrap();
    assert!(out.tokens.data().iter().all(|&v| v == 0.0));

    let cfg = AttnConfig {
        residual_before_msa: false,
        ..AttnConfig::default()
    };
    let (a, mut p) = attention(2, (80, 64), cfg, 1);
    zero_output_projection(&a, &mut p);
    let out = msa_block(&z, &a, &p).unwrap();
    assert!(out.tokens.bitwise_eq(&z.tokens));
}

#[test]
fn single_token_closed_form() {
    let (a, mut p) = attention(2, (80, 64), AttnConfig::default(), 3);
    let mut rng = Rng::new(4);
    // non-trivial layer norm affine and biases
    for name in [
        "attn.0.ln.gamma",
        "attn.0.ln.beta",
        "attn.0.v.bias",
        "attn.0.o.bias",
    ] {
        let id = p.id(name).unwrap();
        for v in p.value_mut(id).data_mut() {
            *v = rng.uniform(-1.0, 1.0);
        }
    }
    let z = seq(1, 40, 5);
    let out = msa_block(&z, &a, &p).unwrap();

    let zv = z.tokens.data();
    let mean = zv.iter().sum::<f64>() / 40.0;
    let var = zv.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 40.0;
    let val = |n: &str| p.value(p.id(n).unwrap()).data().to_vec();
    let (gamma, beta) = (val("attn.0.ln.gamma"), val("attn.0.ln.beta"));
    let u: Vec<f64> = (0..40)
        .map(|i| (zv[i] - mean) / (var + 1e-5).sqrt() * gamma[i] + beta[i] + zv[i])
        .collect();
    let affine = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..40)
            .map(|r| b[r] + (0..40).map(|c| w[r * 40 + c] * x[c]).sum::<f64>())
            .collect()
    };
    let v = affine(&val("attn.0.v.weight"), &val("attn.0.v.bias"), &u);
    let want = affine(&val("attn.0.o.weight"), &val("attn.0.o.bias"), &v);
    for (o, w) in out.tokens.data().iter().zip(&want) {
        assert!((o - w).abs() < 1e-12, "{o} vs {w}");
    }
}

#[test]
fn msa_is_permutation_equivariant_and_rows_sum_to_one() {
    let (a, p) = attention(2, (80, 64), AttnConfig::default(), 6);
    let z = seq(7, 40, 7);
    let mut perm: Vec<usize> = (0..7).collect();
    Rng::new(8).shuffle(&mut perm);
    let permuted = Tensor::new(
        vec![7, 40],
        perm.iter()
            .flat_map(|&i| z.tokens.data()[i * 40..(i + 1) * 40].to_vec())
            .collect(),
    )
    .unwrap();
    let out = msa_block(&z, &a, &p).unwrap().tokens;
    let out_p = msa_block(
        &TokenSequence {
            tokens: permuted,
            ..z.clone()
        },
        &a,
        &p,
    )
    .unwrap()
    .tokens;
    for (row, &src) in perm.iter().enumerate() {
        for j in 0..40 {
            let (x, y) = (out_p.data()[row * 40 + j], out.data()[src * 40 + j]);
            assert!((x - y).abs() < 1e-12);
        }
    }

    let mut g = Graph::new();
    let x = g.constant(z.tokens.clone());
    let mut attn = Vec::new();
    a.msa_graph(&mut g, &p, x, Some(&mut attn)).unwrap();
    assert_eq!(attn.len(), 8);
    for n in attn {
        for row in g.value(n).data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn positional_table_prefix() {
    let (a, mut p) = attention(8, (160, 128), AttnConfig::default(), 9);
    assert_eq!(a.table_len, 2048);
    let z = seq(5, 160, 10);
    p.value_mut(a.pos_table).data_mut().fill(0.0);
    assert!(add_positional(&z, &a, &p)
        .unwrap()
        .tokens
        .bitwise_eq(&z.tokens));

    let mut g = Graph::new();
    let x = g.constant(z.tokens.clone());
    let y = a.add_positional_graph(&mut g, &p, x).unwrap();
    let w: Rc<[f64]> = (0..5 * 160).map(|i| i as f64 + 1.0).collect();
    let loss = g.weighted_sum(y, w).unwrap();
    g.backward(loss).unwrap();
    let mut grads = p.clone();
    grads.zero_grad();
    g.accumulate_into(&mut grads);
    let gt = grads.get(a.pos_table).grad.as_ref().unwrap().data();
    assert!(gt[..5 * 160].iter().all(|&v| v != 0.0));
    assert!(gt[5 * 160..].iter().all(|&v| v == 0.0));

    let too_long = seq(2049, 160, 11);
    assert!(add_positional(&too_long, &a, &p).is_err());
}

fn desk_pyramid(
    c: usize,
    dims: (usize, usize),
    seed: u64,
) -> (Backbone, ParamStore, FeaturePyramid) {
    let mut p = ParamStore::new();
    let cfg = BackboneConfig {
        base_channels: c,
        ..BackboneConfig::default()
    };
    let bb = Backbone::new(cfg, &mut p, &mut Rng::new(seed)).unwrap();
    let img = Tensor::uniform(vec![1, 1, dims.0, dims.1], 1.0, &mut Rng::new(seed + 1));
    let pyr = bb.forward(&p, &img).unwrap();
    (bb, p, pyr)
}

#[test]
fn conjunct_attention_preserves_shapes_and_zero_map() {
    let (_, _, pyr) = desk_pyramid(8, (160, 128), 12);
    let (a, mut p) = attention(8, (160, 128), AttnConfig::default(), 13);
    let out = conjunct_attention(&pyr, &a, &p).unwrap();
    for (x, y) in pyr.levels.iter().zip(&out.levels) {
        assert_eq!(x.shape(), y.shape());
        assert!(y.is_finite());
    }
    zero_output_projection(&a, &mut p);
    let out = conjunct_attention(&pyr, &a, &p).unwrap();
    assert!(out
        .levels
        .iter()
        .all(|l| l.data().iter().all(|&v| v == 0.0)));
}

/// Moves the `(5, 4)` blocks of a `(1, C, h, w)` map: block `i` of the output is block
/// `perm[i]` of the input.
fn permute_blocks(x: &Tensor, perm: &[usize]) -> Tensor {
    let (_, c, h, w) = x.dims4("permute").unwrap();
    let cols = w / 4;
    let mut out = vec![0.0; x.numel()];
    for (dst, &src) in perm.iter().enumerate() {
        let (dr, dc) = (dst / cols, dst % cols);
        let (sr, sc) = (src / cols, src % cols);
        for ch in 0..c {
            for i in 0..5 {
                for j in 0..4 {
                    out[(ch * h + dr * 5 + i) * w + dc * 4 + j] =
                        x.data()[(ch * h + sr * 5 + i) * w + sc * 4 + j];
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

#[test]
fn zero_positions_give_patch_permutation_equivariance() {
    let (_, _, pyr) = desk_pyramid(2, (80, 64), 14);
    let (a, mut p) = attention(2, (80, 64), AttnConfig::default(), 15);
    p.value_mut(a.pos_table).data_mut().fill(0.0);
    let mut rng = Rng::new(16);
    let perms: Vec<Vec<usize>> = pyr
        .levels
        .iter()
        .map(|l| {
            let n = (l.shape()[2] / 5) * (l.shape()[3] / 4);
            let mut v: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut v);
            v
        })
        .collect();
    let permuted = FeaturePyramid {
        levels: pyr
            .levels
            .iter()
            .zip(&perms)
            .map(|(l, pm)| permute_blocks(l, pm))
            .collect(),
    };
    let out = conjunct_attention(&pyr, &a, &p).unwrap();
    let out_p = conjunct_attention(&permuted, &a, &p).unwrap();
    for ((o, op), pm) in out.levels.iter().zip(&out_p.levels).zip(&perms) {
        assert!(permute_blocks(o, pm).max_abs_diff(op) < 1e-12);
    }
}

#[test]
fn full_composition_passes_gradcheck() {
    let mut p = ParamStore::new();
    let mut rng = Rng::new(17);
    let bb = Backbone::new(
        BackboneConfig {
            base_channels: 2,
            ..BackboneConfig::default()
        },
        &mut p,
        &mut rng,
    )
    .unwrap();
    let a = ConjunctAttention::new(AttnConfig::default(), 2, (80, 64), &mut p, &mut rng).unwrap();
    let img = Tensor::uniform(vec![1, 1, 80, 64], 1.0, &mut rng);
    let mut wrng = Rng::new(18);
    let weights: Vec<Rc<[f64]>> = bb
        .level_channels()
        .iter()
        .enumerate()
        .map(|(l, &c)| {
            let n = c * (80 >> (l + 1)) * (64 >> (l + 1));
            (0..n).map(|_| wrng.uniform(-1.0, 1.0)).collect()
        })
        .collect();
    let opts = GradCheckOptions {
        max_coords_per_param: Some(12),
        seed: 19,
        ..GradCheckOptions::default()
    };
    let report = finite_diff_check(&mut p, &opts, |p, g| {
        let x = g.constant(img.clone());
        let levels = bb.forward_graph(g, p, x)?;
        let out = a.forward_graph(g, p, &levels)?;
        let mut total = None;
        for (n, w) in out.iter().zip(&weights) {
            let s = g.weighted_sum(*n, w.clone())?;
            total = Some(match total {
                None => s,
                Some(t) => g.add(t, s)?,
            });
        }
        Ok(total.unwrap())
    })
    .unwrap();
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn folded_level_tokens_match_manual_pipeline() {
    let (_, _, pyr) = desk_pyramid(2, (80, 64), 20);
    let (a, p) = attention(2, (80, 64), AttnConfig::default(), 21);
    let out = conjunct_attention(&pyr, &a, &p).unwrap();
    // level 2 by hand: fold, patchify, add positions, attend, undo
    let lvl = &pyr.levels[2];
    let folded = fold_channels(lvl, 2).unwrap();
    let s = patchify(&folded, (5, 4), 2, 4).unwrap();
    let s = add_positional(&s, &a, &p).unwrap();
    let s = msa_block(&s, &a, &p).unwrap();
    let back = replica_core::attention::unpatchify(&s.tokens, (2, 40, 8), (5, 4)).unwrap();
    let back = replica_core::attention::unfold_channels(&back, 4).unwrap();
    assert_eq!(back.data(), out.levels[2].data());
}
