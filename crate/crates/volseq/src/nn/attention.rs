//! Masked multi-head self-attention for short visit sequences.
//!
//! Cross-token reductions (softmax normalizer, context accumulation) sum
//! their addends in a canonical order via [`stable_sum`], so the output at
//! any token slot is a function of that token's content and the *multiset*
//! of all tokens — bit-identical under permutation of the other slots.

use super::ops::{linear_backward, linear_forward, stable_sum};

/// Borrowed projection parameters for one attention layer. All weight
/// matrices are `H x H`, input-major.
pub struct AttentionParams<'a> {
    pub wq: &'a [f64],
    pub bq: &'a [f64],
    pub wk: &'a [f64],
    pub bk: &'a [f64],
    pub wv: &'a [f64],
    pub bv: &'a [f64],
    pub wo: &'a [f64],
    pub bo: &'a [f64],
}

/// Mutable gradient buffers matching [`AttentionParams`].
pub struct AttentionGrads<'a> {
    pub dwq: &'a mut [f64],
    pub dbq: &'a mut [f64],
    pub dwk: &'a mut [f64],
    pub dbk: &'a mut [f64],
    pub dwv: &'a mut [f64],
    pub dbv: &'a mut [f64],
    pub dwo: &'a mut [f64],
    pub dbo: &'a mut [f64],
}

/// Intermediates cached for the backward pass.
pub struct AttentionCache {
    pub q: Vec<f64>,
    pub k: Vec<f64>,
    pub v: Vec<f64>,
    /// `heads x tokens x tokens` attention probabilities (0 at masked keys).
    pub probs: Vec<f64>,
    /// Head-concatenated context, the input to the output projection.
    pub ctx: Vec<f64>,
}

/// Self-attention over `tokens x h` input `x`. `mask[j] == false` marks a
/// padded slot: it is never attended to, so its stored values cannot affect
/// any unmasked token.
pub fn attention_forward(
    tokens: usize,
    h: usize,
    heads: usize,
    x: &[f64],
    mask: &[bool],
    p: &AttentionParams,
) -> (Vec<f64>, AttentionCache) {
    assert_eq!(h % heads, 0, "hidden size not divisible by head count");
    let dk = h / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut q = vec![0.0; tokens * h];
    let mut k = vec![0.0; tokens * h];
    let mut v = vec![0.0; tokens * h];
    linear_forward(tokens, h, h, x, p.wq, p.bq, &mut q);
    linear_forward(tokens, h, h, x, p.wk, p.bk, &mut k);
    linear_forward(tokens, h, h, x, p.wv, p.bv, &mut v);

    let mut probs = vec![0.0; heads * tokens * tokens];
    let mut ctx = vec![0.0; tokens * h];
    let mut terms: Vec<f64> = Vec::with_capacity(tokens);
    for hd in 0..heads {
        let col = hd * dk;
        for i in 0..tokens {
            // Raw scores against unmasked keys.
            let qi = &q[i * h + col..i * h + col + dk];
            let mut scores = vec![f64::NEG_INFINITY; tokens];
            let mut max = f64::NEG_INFINITY;
            for j in 0..tokens {
                if !mask[j] {
                    continue;
                }
                let kj = &k[j * h + col..j * h + col + dk];
                let mut s = 0.0;
                for d in 0..dk {
                    s += qi[d] * kj[d];
                }
                let s = s * scale;
                scores[j] = s;
                if s > max {
                    max = s;
                }
            }
            terms.clear();
            for j in 0..tokens {
                if mask[j] {
                    terms.push((scores[j] - max).exp());
                }
            }
            let z = stable_sum(&mut terms);
            let prow = &mut probs[(hd * tokens + i) * tokens..][..tokens];
            for j in 0..tokens {
                prow[j] = if mask[j] { (scores[j] - max).exp() / z } else { 0.0 };
            }
            // Context: canonical-order weighted sum of values.
            let crow = &mut ctx[i * h + col..i * h + col + dk];
            for d in 0..dk {
                terms.clear();
                for j in 0..tokens {
                    if mask[j] {
                        terms.push(prow[j] * v[j * h + col + d]);
                    }
                }
                crow[d] = stable_sum(&mut terms);
            }
        }
    }

    let mut y = vec![0.0; tokens * h];
    linear_forward(tokens, h, h, &ctx, p.wo, p.bo, &mut y);
    (y, AttentionCache { q, k, v, probs, ctx })
}

/// Backward of [`attention_forward`]. Accumulates parameter gradients,
/// overwrites `dx`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    tokens: usize,
    h: usize,
    heads: usize,
    x: &[f64],
    mask: &[bool],
    p: &AttentionParams,
    cache: &AttentionCache,
    dy: &[f64],
    dx: &mut [f64],
    g: &mut AttentionGrads,
) {
    let dk = h / heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut dctx = vec![0.0; tokens * h];
    linear_backward(tokens, h, h, &cache.ctx, p.wo, dy, &mut dctx, g.dwo, g.dbo);

    let mut dq = vec![0.0; tokens * h];
    let mut dkk = vec![0.0; tokens * h];
    let mut dv = vec![0.0; tokens * h];
    for hd in 0..heads {
        let col = hd * dk;
        for i in 0..tokens {
            let prow = &cache.probs[(hd * tokens + i) * tokens..][..tokens];
            let dci = &dctx[i * h + col..i * h + col + dk];
            // dp and dv.
            let mut dp = vec![0.0; tokens];
            for j in 0..tokens {
                if !mask[j] {
                    continue;
                }
                let vj = &cache.v[j * h + col..j * h + col + dk];
                let mut acc = 0.0;
                for d in 0..dk {
                    acc += dci[d] * vj[d];
                }
                dp[j] = acc;
                let dvj = &mut dv[j * h + col..j * h + col + dk];
                for d in 0..dk {
                    dvj[d] += prow[j] * dci[d];
                }
            }
            // Softmax backward.
            let dot: f64 = (0..tokens).map(|j| prow[j] * dp[j]).sum();
            for j in 0..tokens {
                if !mask[j] {
                    continue;
                }
                let ds = prow[j] * (dp[j] - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let qi = &cache.q[i * h + col..i * h + col + dk];
                let kj = &cache.k[j * h + col..j * h + col + dk];
                let dqi = &mut dq[i * h + col..i * h + col + dk];
                for d in 0..dk {
                    dqi[d] += ds * kj[d];
                }
                let dkj = &mut dkk[j * h + col..j * h + col + dk];
                for d in 0..dk {
                    dkj[d] += ds * qi[d];
                }
            }
        }
    }

    let mut dx_q = vec![0.0; tokens * h];
    let mut dx_k = vec![0.0; tokens * h];
    let mut dx_v = vec![0.0; tokens * h];
    linear_backward(tokens, h, h, x, p.wq, &dq, &mut dx_q, g.dwq, g.dbq);
    linear_backward(tokens, h, h, x, p.wk, &dkk, &mut dx_k, g.dwk, g.dbk);
    linear_backward(tokens, h, h, x, p.wv, &dv, &mut dx_v, g.dwv, g.dbv);
    for i in 0..dx.len() {
        dx[i] = dx_q[i] + dx_k[i] + dx_v[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_params(h: usize) -> (Vec<f64>, Vec<f64>) {
        let mut w = vec![0.0; h * h];
        for i in 0..h {
            w[i * h + i] = 1.0;
        }
        (w, vec![0.0; h])
    }

    #[test]
    fn masked_keys_never_contribute() {
        let h = 4;
        let (wi, bi) = tiny_params(h);
        let p = AttentionParams {
            wq: &wi, bq: &bi, wk: &wi, bk: &bi, wv: &wi, bv: &bi, wo: &wi, bo: &bi,
        };
        let x = vec![0.1, 0.2, -0.3, 0.4, 1.0, -1.0, 0.5, 0.25, 9.0, 9.0, 9.0, 9.0];
        let mut x2 = x.clone();
        // Change the padded slot's content entirely.
        for v in &mut x2[8..12] {
            *v = -123.0;
        }
        let mask = [true, true, false];
        let (y1, _) = attention_forward(3, h, 2, &x, &mask, &p);
        let (y2, _) = attention_forward(3, h, 2, &x2, &mask, &p);
        assert_eq!(&y1[0..8], &y2[0..8]);
    }

    #[test]
    fn single_token_attends_to_itself() {
        let h = 4;
        let (wi, bi) = tiny_params(h);
        let p = AttentionParams {
            wq: &wi, bq: &bi, wk: &wi, bk: &bi, wv: &wi, bv: &bi, wo: &wi, bo: &bi,
        };
        let x = vec![0.3, -0.7, 0.1, 2.0];
        let (y, c) = attention_forward(1, h, 1, &x, &[true], &p);
        assert_eq!(c.probs, vec![1.0]);
        assert_eq!(y, x);
    }
}
