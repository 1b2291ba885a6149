//! Contrastive objectives on L2-normalized features.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

fn rows(tape: &Tape, v: Var, op: &'static str) -> Result<(usize, usize)> {
    tape.value(v).dims2(op)
}

/// InfoNCE with one positive per anchor and a shared negative set.
///
/// Row `i` contributes `-log(exp(a_i.p_i / tau) / (exp(a_i.p_i / tau) + sum_j exp(a_i.n_j / tau)))`;
/// the result is the mean over rows.
pub fn info_nce(tape: &mut Tape, anchors: Var, positives: Var, negatives: Var, tau: f64) -> Result<Var> {
    let (m, d) = rows(tape, anchors, "info_nce")?;
    let (_, dn) = rows(tape, negatives, "info_nce")?;
    if dn != d {
        return Err(Error::ShapeMismatch {
            op: "info_nce",
            lhs: vec![m, d],
            rhs: tape.value(negatives).shape().to_vec(),
        });
    }
    let prod = tape.mul(anchors, positives)?;
    let pos = tape.sum_rows(prod)?;
    let neg_t = tape.transpose(negatives)?;
    let neg = tape.matmul(anchors, neg_t)?;
    let logits = tape.concat(pos, neg, 1)?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    tape.softmax_cross_entropy(logits, &vec![0; m], None)
}

/// NT-Xent over a batch of `B` samples with two views each.
///
/// `anchors` and `positives` are `[2B, d]`, with row `i` and row `i + B` both belonging to
/// sample `i mod B`. `views` is `[2B, d]` (the real, non-hallucinated views) and supplies the
/// negatives: for an anchor of sample `s`, every row of `views` not belonging to `s`.
pub fn nt_xent(tape: &mut Tape, anchors: Var, positives: Var, views: Var, tau: f64) -> Result<Var> {
    let (m, _) = rows(tape, anchors, "nt_xent")?;
    let (mv, _) = rows(tape, views, "nt_xent")?;
    if m != mv || m % 2 != 0 || m < 4 {
        return Err(Error::InvalidShape {
            op: "nt_xent",
            msg: format!("need 2B rows with B >= 2, got {m} anchors and {mv} views"),
        });
    }
    let b = m / 2;
    let prod = tape.mul(anchors, positives)?;
    let pos = tape.sum_rows(prod)?;
    let views_t = tape.transpose(views)?;
    let sims = tape.matmul(anchors, views_t)?;
    let logits = tape.concat(pos, sims, 1)?;
    let logits = tape.scale(logits, 1.0 / tau)?;
    let width = m + 1;
    let mut mask = vec![false; m * width];
    for i in 0..m {
        let s = i % b;
        mask[i * width + 1 + s] = true;
        mask[i * width + 1 + s + b] = true;
    }
    tape.softmax_cross_entropy(logits, &vec![0; m], Some(mask))
}

/// Mean negative cosine similarity between matching rows.
pub fn negative_cosine(tape: &mut Tape, p: Var, z: Var) -> Result<Var> {
    let pn = tape.l2_normalize(p)?;
    let zn = tape.l2_normalize(z)?;
    let prod = tape.mul(pn, zn)?;
    let cos = tape.sum_rows(prod)?;
    let m = tape.mean(cos)?;
    tape.scale(m, -1.0)
}

/// `(1 - w) * plain + w * extra`.
pub fn blend(tape: &mut Tape, plain: Var, extra: Var, w: f64) -> Result<Var> {
    let a = tape.scale(plain, 1.0 - w)?;
    let b = tape.scale(extra, w)?;
    tape.add(a, b)
}

/// Mean of row-wise dot products (cosine similarity for unit rows).
pub(crate) fn mean_row_dot(tape: &Tape, a: Var, b: Var) -> f64 {
    let (ta, tb) = (tape.value(a), tape.value(b));
    let n = ta.shape()[0];
    ta.rows().zip(tb.rows()).map(|(x, y)| crate::tensor::dot(x, y)).sum::<f64>() / n as f64
}

/// Mean cosine similarity of matching rows; rows need not be normalized.
pub(crate) fn mean_row_cosine(tape: &Tape, a: Var, b: Var) -> f64 {
    let (ta, tb) = (tape.value(a), tape.value(b));
    let n = ta.shape()[0];
    ta.rows()
        .zip(tb.rows())
        .map(|(x, y)| crate::tensor::dot(x, y) / (crate::tensor::norm(x) * crate::tensor::norm(y)))
        .sum::<f64>()
        / n as f64
}
