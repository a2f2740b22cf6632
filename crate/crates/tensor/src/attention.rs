//! Fused multi-head scaled dot-product attention over a padded batch.

use crate::Scalar;

/// Layout of one attention call.
///
/// Queries are `[batch * q_len, width]`, keys and values `[batch * k_len, width]`,
/// rows grouped per example. `key_mask[b * k_len + j]` marks attendable keys.
/// A query with no attendable key produces a zero output row.
#[derive(Debug, Clone)]
pub struct AttentionGeometry {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub width: usize,
    pub key_mask: Vec<bool>,
    /// Query `i` may only see keys `j <= i`.
    pub causal: bool,
}

impl AttentionGeometry {
    pub(crate) fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    fn prob_index(&self, b: usize, h: usize, i: usize) -> usize {
        ((b * self.heads + h) * self.q_len + i) * self.k_len
    }

    fn visible(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_mask[b * self.k_len + j] && (!self.causal || j <= i)
    }
}

/// Returns `(output, probabilities)`. Probabilities are pre-dropout;
/// `drop` holds the inverted-dropout multipliers when dropout is active.
pub(crate) fn forward<T: Scalar>(
    geom: &AttentionGeometry,
    q: &[T],
    k: &[T],
    v: &[T],
    drop: Option<&[T]>,
) -> (Vec<T>, Vec<T>) {
    let (dh, width) = (geom.head_dim(), geom.width);
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); geom.batch * geom.q_len * width];
    let mut probs = vec![T::zero(); geom.batch * geom.heads * geom.q_len * geom.k_len];
    let mut scores = vec![T::zero(); geom.k_len];
    for b in 0..geom.batch {
        for h in 0..geom.heads {
            let off = h * dh;
            for i in 0..geom.q_len {
                let qrow = &q[(b * geom.q_len + i) * width + off..][..dh];
                let mut max = T::neg_infinity();
                let mut any = false;
                for j in 0..geom.k_len {
                    if geom.visible(b, i, j) {
                        let krow = &k[(b * geom.k_len + j) * width + off..][..dh];
                        let s = dot(qrow, krow) * scale;
                        scores[j] = s;
                        max = max.max(s);
                        any = true;
                    }
                }
                if !any {
                    continue;
                }
                let p = &mut probs[geom.prob_index(b, h, i)..][..geom.k_len];
                let mut total = T::zero();
                for j in 0..geom.k_len {
                    if geom.visible(b, i, j) {
                        let e = (scores[j] - max).exp();
                        p[j] = e;
                        total += e;
                    }
                }
                for pj in p.iter_mut() {
                    *pj /= total;
                }
                let orow = &mut out[(b * geom.q_len + i) * width + off..][..dh];
                let dmask = drop.map(|m| &m[geom.prob_index(b, h, i)..][..geom.k_len]);
                for j in 0..geom.k_len {
                    let mut w = p[j];
                    if let Some(m) = dmask {
                        w *= m[j];
                    }
                    if w == T::zero() {
                        continue;
                    }
                    let vrow = &v[(b * geom.k_len + j) * width + off..][..dh];
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += w * x;
                    }
                }
            }
        }
    }
    (out, probs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    geom: &AttentionGeometry,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    drop: Option<&[T]>,
    g: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let (dh, width) = (geom.head_dim(), geom.width);
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut dp = vec![T::zero(); geom.k_len];
    for b in 0..geom.batch {
        for h in 0..geom.heads {
            let off = h * dh;
            for i in 0..geom.q_len {
                let pi = geom.prob_index(b, h, i);
                let p = &probs[pi..][..geom.k_len];
                let dmask = drop.map(|m| &m[pi..][..geom.k_len]);
                let grow = &g[(b * geom.q_len + i) * width + off..][..dh];
                let mut weighted = T::zero();
                for j in 0..geom.k_len {
                    dp[j] = T::zero();
                    if p[j] == T::zero() {
                        continue;
                    }
                    let vbase = (b * geom.k_len + j) * width + off;
                    let keep = dmask.map_or(T::one(), |m| m[j]);
                    if keep != T::zero() {
                        let w = p[j] * keep;
                        for (d, &x) in dv[vbase..vbase + dh].iter_mut().zip(grow) {
                            *d += w * x;
                        }
                        dp[j] = dot(grow, &v[vbase..vbase + dh]) * keep;
                    }
                    weighted += p[j] * dp[j];
                }
                let qbase = (b * geom.q_len + i) * width + off;
                for j in 0..geom.k_len {
                    if p[j] == T::zero() {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let kbase = (b * geom.k_len + j) * width + off;
                    for t in 0..dh {
                        dq[qbase + t] += ds * k[kbase + t];
                        dk[kbase + t] += ds * q[qbase + t];
                    }
                }
            }
        }
    }
}

#[inline]
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}
