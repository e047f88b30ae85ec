//! Rearrangements between pyramid feature maps and token sequences.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Patch tokens of one pyramid level.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    /// `(T, D)` with `D = c * ph * pw`.
    pub tokens: Tensor,
    pub level: usize,
    pub fold_factor: usize,
    /// Patch grid `(rows, cols)` of the level before folding.
    pub grid: (usize, usize),
}

/// `(C, h, w)` or `(1, C, h, w)`.
fn chw(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::shape(op, format!("expected (C, H, W), got {s:?}"))),
    }
}

fn with_rank_of(t: &Tensor, c: usize, h: usize, w: usize) -> Vec<usize> {
    if t.rank() == 4 {
        vec![1, c, h, w]
    } else {
        vec![c, h, w]
    }
}

/// `(k*c, h, w) -> (c, k*h, w)`: channel group `g` lands in rows `g*h..(g+1)*h`.
pub fn fold_channels(x: &Tensor, base_c: usize) -> Result<Tensor> {
    let (kc, h, w) = chw(x, "fold_channels")?;
    if base_c == 0 || kc % base_c != 0 {
        return Err(Error::shape(
            "fold_channels",
            format!("{kc} channels are not a multiple of {base_c}"),
        ));
    }
    let k = kc / base_c;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for g in 0..k {
        for ch in 0..base_c {
            for r in 0..h {
                let from = ((g * base_c + ch) * h + r) * w;
                let to = (ch * k * h + g * h + r) * w;
                out[to..to + w].copy_from_slice(&src[from..from + w]);
            }
        }
    }
    Tensor::new(with_rank_of(x, base_c, k * h, w), out)
}

/// Inverse of [`fold_channels`] for fold factor `k`.
pub fn unfold_channels(x: &Tensor, k: usize) -> Result<Tensor> {
    let (c, kh, w) = chw(x, "unfold_channels")?;
    if k == 0 || kh % k != 0 {
        return Err(Error::shape(
            "unfold_channels",
            format!("{kh} rows are not a multiple of {k}"),
        ));
    }
    let h = kh / k;
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for g in 0..k {
        for ch in 0..c {
            for r in 0..h {
                let from = (ch * kh + g * h + r) * w;
                let to = ((g * c + ch) * h + r) * w;
                out[to..to + w].copy_from_slice(&src[from..from + w]);
            }
        }
    }
    Tensor::new(with_rank_of(x, k * c, h, w), out)
}

/// Splits a folded `(c, H', W')` map into `(ph, pw)` patches, one token per patch in
/// row-major grid order. Each token is the row-major flattening of its `(c, ph, pw)` block.
pub fn patchify(
    folded: &Tensor,
    (ph, pw): (usize, usize),
    level: usize,
    fold_factor: usize,
) -> Result<TokenSequence> {
    let (c, hh, ww) = chw(folded, "patchify")?;
    if ph == 0 || pw == 0 || fold_factor == 0 || hh % (ph * fold_factor) != 0 || ww % pw != 0 {
        return Err(Error::shape(
            "patchify",
            format!(
                "level {level}: folded map {c}x{hh}x{ww} (fold factor {fold_factor}) does not tile into {ph}x{pw} patches"
            ),
        ));
    }
    let (rows, cols) = (hh / ph, ww / pw);
    let d = c * ph * pw;
    let src = folded.data();
    let mut out = vec![0.0; rows * cols * d];
    for pr in 0..rows {
        for pc in 0..cols {
            let t = pr * cols + pc;
            for ch in 0..c {
                for i in 0..ph {
                    let from = (ch * hh + pr * ph + i) * ww + pc * pw;
                    let to = t * d + (ch * ph + i) * pw;
                    out[to..to + pw].copy_from_slice(&src[from..from + pw]);
                }
            }
        }
    }
    Ok(TokenSequence {
        tokens: Tensor::new(vec![rows * cols, d], out)?,
        level,
        fold_factor,
        grid: (rows / fold_factor, cols),
    })
}

/// Inverse of [`patchify`]; `dims` is the folded `(c, H', W')`.
pub fn unpatchify(
    seq: &Tensor,
    (c, hh, ww): (usize, usize, usize),
    (ph, pw): (usize, usize),
) -> Result<Tensor> {
    let (t, d) = seq.dims2("unpatchify")?;
    if ph == 0
        || pw == 0
        || hh % ph != 0
        || ww % pw != 0
        || t != (hh / ph) * (ww / pw)
        || d != c * ph * pw
    {
        return Err(Error::shape(
            "unpatchify",
            format!("{t}x{d} tokens do not form a {c}x{hh}x{ww} map with {ph}x{pw} patches"),
        ));
    }
    let cols = ww / pw;
    let src = seq.data();
    let mut out = vec![0.0; c * hh * ww];
    for tok in 0..t {
        let (pr, pc) = (tok / cols, tok % cols);
        for ch in 0..c {
            for i in 0..ph {
                let to = (ch * hh + pr * ph + i) * ww + pc * pw;
                let from = tok * d + (ch * ph + i) * pw;
                out[to..to + pw].copy_from_slice(&src[from..from + pw]);
            }
        }
    }
    Tensor::new(vec![c, hh, ww], out)
}

/// Patch grid of each level for an input of `input_dims`, where level `l` has stride
/// `2^(l+1)`.
pub fn level_patch_grids(
    input_dims: (usize, usize),
    (ph, pw): (usize, usize),
    levels: usize,
) -> Vec<(usize, usize)> {
    (0..levels)
        .map(|l| {
            let s = 1 << (l + 1);
            (input_dims.0 / s / ph, input_dims.1 / s / pw)
        })
        .collect()
}

/// Counts the informative non-tumor patches a tumor patch can attend to on a patch grid.
///
/// `before` counts patches that are neither tumor nor blank in the tumor image. After
/// translation the tumor sits on the normal image's background, so a patch stays
/// uninformative only when it is blank in both images.
pub fn count_reference_patches(
    (rows, cols): (usize, usize),
    tumor: &[(usize, usize)],
    blank_tumor: &[(usize, usize)],
    blank_normal: &[(usize, usize)],
) -> Result<(usize, usize)> {
    let cells = |name: &str, v: &[(usize, usize)]| -> Result<HashSet<(usize, usize)>> {
        if let Some(p) = v.iter().find(|&&(r, c)| r >= rows || c >= cols) {
            return Err(Error::InvalidArgument(format!(
                "{name} patch {p:?} is outside the {rows}x{cols} grid"
            )));
        }
        Ok(v.iter().copied().collect())
    };
    let tumor = cells("tumor", tumor)?;
    let blank_t = cells("blank", blank_tumor)?;
    let blank_n = cells("blank", blank_normal)?;
    let mut before = 0;
    let mut after = 0;
    for r in 0..rows {
        for c in 0..cols {
            let p = (r, c);
            if tumor.contains(&p) {
                continue;
            }
            before += usize::from(!blank_t.contains(&p));
            after += usize::from(!(blank_t.contains(&p) && blank_n.contains(&p)));
        }
    }
    Ok((before, after))
}
