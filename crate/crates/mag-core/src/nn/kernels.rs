//! Raw numeric kernels: matmul variants, masked multi-head attention,
//! rotary rotations, layer norm. Forward and backward halves live here so
//! the graph layer stays a thin bookkeeping shell.
//!
//! All loops are written to keep the innermost axis contiguous; at the
//! sizes this workspace runs (hundreds of tokens, d_model <= 256) that is
//! fast enough on a CPU without any explicit SIMD.

/// c (n,m) = a (n,k) . b (k,m)
pub fn matmul(a: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; n * m];
    for i in 0..n {
        let ci = &mut c[i * m..(i + 1) * m];
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let br = &b[l * m..(l + 1) * m];
            for (cv, bv) in ci.iter_mut().zip(br) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// c (n,m) = a^T . b where a is (k,n), b is (k,m)
pub fn matmul_tn(a: &[f32], b: &[f32], k: usize, n: usize, m: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; n * m];
    for l in 0..k {
        let ar = &a[l * n..(l + 1) * n];
        let br = &b[l * m..(l + 1) * m];
        for i in 0..n {
            let av = ar[i];
            if av == 0.0 {
                continue;
            }
            let ci = &mut c[i * m..(i + 1) * m];
            for (cv, bv) in ci.iter_mut().zip(br) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// c (n,m) = a (n,k) . b^T where b is (m,k)
pub fn matmul_nt(a: &[f32], b: &[f32], n: usize, k: usize, m: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; n * m];
    for i in 0..n {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let br = &b[j * k..(j + 1) * k];
            let mut s = 0.0f32;
            for (av, bv) in ar.iter().zip(br) {
                s += av * bv;
            }
            c[i * m + j] = s;
        }
    }
    c
}

// ---------------------------------------------------------------------------
// Masked multi-head attention
// ---------------------------------------------------------------------------

pub struct AttentionSaved {
    /// Softmax probabilities, heads-major: (heads, nq, nk).
    pub probs: Vec<f32>,
}

/// softmax(q k^T / sqrt(head_dim) + mask_add) v, per head.
///
/// `mask_add` is (nq, nk) with 0 for visible and a large negative value for
/// hidden entries; it is shared across heads. The caller guarantees no row is
/// fully hidden.
#[allow(clippy::too_many_arguments)]
pub fn attention_forward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    mask_add: &[f32],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
    save: bool,
) -> (Vec<f32>, Option<AttentionSaved>) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut out = vec![0.0f32; nq * d];
    let mut probs_all = if save {
        vec![0.0f32; heads * nq * nk]
    } else {
        Vec::new()
    };
    let mut logits = vec![0.0f32; nk];
    for h in 0..heads {
        let col = h * hd;
        for i in 0..nq {
            let qr = &q[i * d + col..i * d + col + hd];
            let mr = &mask_add[i * nk..(i + 1) * nk];
            let mut maxv = f32::NEG_INFINITY;
            for j in 0..nk {
                let kr = &k[j * d + col..j * d + col + hd];
                let mut s = 0.0f32;
                for (a, b) in qr.iter().zip(kr) {
                    s += a * b;
                }
                let l = s * scale + mr[j];
                logits[j] = l;
                if l > maxv {
                    maxv = l;
                }
            }
            let mut denom = 0.0f32;
            for l in logits.iter_mut() {
                *l = (*l - maxv).exp();
                denom += *l;
            }
            let inv = 1.0 / denom;
            let or = &mut out[i * d + col..i * d + col + hd];
            for j in 0..nk {
                let p = logits[j] * inv;
                if save {
                    probs_all[(h * nq + i) * nk + j] = p;
                }
                if p == 0.0 {
                    continue;
                }
                let vr = &v[j * d + col..j * d + col + hd];
                for (o, vv) in or.iter_mut().zip(vr) {
                    *o += p * vv;
                }
            }
        }
    }
    let saved = save.then_some(AttentionSaved { probs: probs_all });
    (out, saved)
}

/// Backward pass for `attention_forward`. Returns (dq, dk, dv).
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    saved: &AttentionSaved,
    dout: &[f32],
    nq: usize,
    nk: usize,
    d: usize,
    heads: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let hd = d / heads;
    let scale = 1.0 / (hd as f32).sqrt();
    let mut dq = vec![0.0f32; nq * d];
    let mut dk = vec![0.0f32; nk * d];
    let mut dv = vec![0.0f32; nk * d];
    let mut dp = vec![0.0f32; nk];
    for h in 0..heads {
        let col = h * hd;
        for i in 0..nq {
            let pr = &saved.probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let dor = &dout[i * d + col..i * d + col + hd];
            // dV += p^T dOut ; dP = dOut . V^T
            let mut dot_dp_p = 0.0f32;
            for j in 0..nk {
                let p = pr[j];
                let vr = &v[j * d + col..j * d + col + hd];
                let mut s = 0.0f32;
                for (a, b) in dor.iter().zip(vr) {
                    s += a * b;
                }
                dp[j] = s;
                dot_dp_p += s * p;
                if p != 0.0 {
                    let dvr = &mut dv[j * d + col..j * d + col + hd];
                    for (dvv, dov) in dvr.iter_mut().zip(dor) {
                        *dvv += p * dov;
                    }
                }
            }
            // dS = P (dP - <dP,P>) ; dQ += dS K scale ; dK += dS^T Q scale
            let qr = &q[i * d + col..i * d + col + hd];
            let dqr_start = i * d + col;
            for j in 0..nk {
                let ds = pr[j] * (dp[j] - dot_dp_p) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kr = &k[j * d + col..j * d + col + hd];
                let dqr = &mut dq[dqr_start..dqr_start + hd];
                for (dqv, kv) in dqr.iter_mut().zip(kr) {
                    *dqv += ds * kv;
                }
                let dkr = &mut dk[j * d + col..j * d + col + hd];
                for (dkv, qv) in dkr.iter_mut().zip(qr) {
                    *dkv += ds * qv;
                }
            }
        }
    }
    (dq, dk, dv)
}

// ---------------------------------------------------------------------------
// Rotary position embedding
// ---------------------------------------------------------------------------

/// Precomputed per-token rotation tables, shared across heads.
/// Layout: (n_tokens, head_dim/2).
#[derive(Clone)]
pub struct RopeTables {
    pub cos: Vec<f32>,
    pub sin: Vec<f32>,
    pub heads: usize,
    pub head_dim: usize,
}

/// Angles are computed in f64 so that large position offsets (1e4+) keep the
/// rotation accurate to f32 round-off; this is what makes global position
/// shifts leave attention logits unchanged to ~1e-6.
pub fn rope_tables(positions: &[u32], heads: usize, head_dim: usize, base: f64) -> RopeTables {
    assert!(head_dim.is_multiple_of(2), "rope requires even head_dim");
    let half = head_dim / 2;
    let n = positions.len();
    let mut cos = vec![0.0f32; n * half];
    let mut sin = vec![0.0f32; n * half];
    for (i, &pos) in positions.iter().enumerate() {
        for p in 0..half {
            let freq = base.powf(-2.0 * p as f64 / head_dim as f64);
            let angle = pos as f64 * freq;
            cos[i * half + p] = angle.cos() as f32;
            sin[i * half + p] = angle.sin() as f32;
        }
    }
    RopeTables {
        cos,
        sin,
        heads,
        head_dim,
    }
}

/// Rotate pairs (x[p], x[p+half]) within each head.
pub fn rope_forward(x: &[f32], rot: &RopeTables, n: usize, d: usize) -> Vec<f32> {
    let hd = rot.head_dim;
    let half = hd / 2;
    assert_eq!(d, rot.heads * hd);
    let mut out = x.to_vec();
    for i in 0..n {
        for h in 0..rot.heads {
            let b = i * d + h * hd;
            for p in 0..half {
                let c = rot.cos[i * half + p];
                let s = rot.sin[i * half + p];
                let x1 = x[b + p];
                let x2 = x[b + p + half];
                out[b + p] = x1 * c - x2 * s;
                out[b + p + half] = x1 * s + x2 * c;
            }
        }
    }
    out
}

/// Gradient of `rope_forward`: rotation by the negated angle.
pub fn rope_backward(dout: &[f32], rot: &RopeTables, n: usize, d: usize) -> Vec<f32> {
    let hd = rot.head_dim;
    let half = hd / 2;
    let mut dx = dout.to_vec();
    for i in 0..n {
        for h in 0..rot.heads {
            let b = i * d + h * hd;
            for p in 0..half {
                let c = rot.cos[i * half + p];
                let s = rot.sin[i * half + p];
                let d1 = dout[b + p];
                let d2 = dout[b + p + half];
                dx[b + p] = d1 * c + d2 * s;
                dx[b + p + half] = -d1 * s + d2 * c;
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

pub const LN_EPS: f32 = 1e-5;

pub struct LayerNormSaved {
    pub mean: Vec<f32>,
    pub rstd: Vec<f32>,
}

pub fn layer_norm_forward(
    x: &[f32],
    gain: &[f32],
    bias: &[f32],
    n: usize,
    d: usize,
) -> (Vec<f32>, LayerNormSaved) {
    let mut out = vec![0.0f32; n * d];
    let mut mean = vec![0.0f32; n];
    let mut rstd = vec![0.0f32; n];
    for i in 0..n {
        let xr = &x[i * d..(i + 1) * d];
        let mu: f32 = xr.iter().sum::<f32>() / d as f32;
        let var: f32 = xr.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / d as f32;
        let rs = 1.0 / (var + LN_EPS).sqrt();
        mean[i] = mu;
        rstd[i] = rs;
        let or = &mut out[i * d..(i + 1) * d];
        for j in 0..d {
            or[j] = (xr[j] - mu) * rs * gain[j] + bias[j];
        }
    }
    (out, LayerNormSaved { mean, rstd })
}

/// Returns (dx, dgain, dbias).
pub fn layer_norm_backward(
    x: &[f32],
    gain: &[f32],
    saved: &LayerNormSaved,
    dout: &[f32],
    n: usize,
    d: usize,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let mut dx = vec![0.0f32; n * d];
    let mut dgain = vec![0.0f32; d];
    let mut dbias = vec![0.0f32; d];
    for i in 0..n {
        let xr = &x[i * d..(i + 1) * d];
        let dor = &dout[i * d..(i + 1) * d];
        let mu = saved.mean[i];
        let rs = saved.rstd[i];
        let mut sum_dxhat = 0.0f32;
        let mut sum_dxhat_xhat = 0.0f32;
        for j in 0..d {
            let xhat = (xr[j] - mu) * rs;
            let dxhat = dor[j] * gain[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
            dgain[j] += dor[j] * xhat;
            dbias[j] += dor[j];
        }
        let inv_d = 1.0 / d as f32;
        let dxr = &mut dx[i * d..(i + 1) * d];
        for j in 0..d {
            let xhat = (xr[j] - mu) * rs;
            let dxhat = dor[j] * gain[j];
            dxr[j] = rs * (dxhat - inv_d * sum_dxhat - xhat * inv_d * sum_dxhat_xhat);
        }
    }
    (dx, dgain, dbias)
}

pub fn silu(x: f32) -> f32 {
    x / (1.0 + (-x).exp())
}

pub fn silu_grad(x: f32) -> f32 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1 2; 3 4] . [5 6; 7 8] = [19 22; 43 50]
        let c = matmul(&[1., 2., 3., 4.], &[5., 6., 7., 8.], 2, 2, 2);
        assert_eq!(c, vec![19., 22., 43., 50.]);
    }

    #[test]
    fn transposed_variants_agree() {
        let a = [1., 2., 3., 4., 5., 6.]; // (2,3)
        let b = [1., 0., 2., 1., 0., 3.]; // (3,2)
        let c = matmul(&a, &b, 2, 3, 2);
        // a^T laid out as (3,2): columns of a
        let at = [1., 4., 2., 5., 3., 6.];
        let c_tn = matmul_tn(&at, &b, 3, 2, 2);
        assert_eq!(c, c_tn);
        // b^T laid out as (2,3)
        let bt = [1., 2., 0., 0., 1., 3.];
        let c_nt = matmul_nt(&a, &bt, 2, 3, 2);
        assert_eq!(c, c_nt);
    }

    #[test]
    fn rope_zero_position_is_identity() {
        let rot = rope_tables(&[0, 0, 0], 2, 4, 10000.0);
        let x: Vec<f32> = (0..24).map(|v| v as f32 * 0.1).collect();
        let y = rope_forward(&x, &rot, 3, 8);
        assert_eq!(x, y);
    }

    #[test]
    fn rope_single_pair_matches_rotation_matrix() {
        // head_dim 2: out = [cos -sin; sin cos] . x at position 1, max freq.
        let rot = rope_tables(&[1], 1, 2, 10000.0);
        let theta = 1.0f64;
        let x = [0.7f32, -0.3];
        let y = rope_forward(&x, &rot, 1, 2);
        let c = theta.cos() as f32;
        let s = theta.sin() as f32;
        assert!((y[0] - (x[0] * c - x[1] * s)).abs() < 1e-6);
        assert!((y[1] - (x[0] * s + x[1] * c)).abs() < 1e-6);
    }

    #[test]
    fn rope_inverse_roundtrip() {
        let rot = rope_tables(&[3, 99, 12345], 2, 8, 10000.0);
        let x: Vec<f32> = (0..48).map(|v| (v as f32 * 0.37).sin()).collect();
        let y = rope_forward(&x, &rot, 3, 16);
        let back = rope_backward(&y, &rot, 3, 16);
        for (a, b) in x.iter().zip(&back) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
