//! Forward and backward passes of the micro-ViT for one image.
//!
//! Layout: patches -> linear embed + learned positions -> `blocks` pre-norm
//! transformer blocks (MHSA, GELU MLP) -> final layer norm -> mean pool over
//! tokens -> linear head. Each prunable module runs with an effective
//! weight matrix supplied by the caller (the masked shared weight).

use std::borrow::Cow;

use crate::cost::ArchSpec;
use crate::matrix::Matrix;
use crate::model::params::{LayerNorm, VitParams};
use crate::nm::MaskTensor;
use crate::real::Real;

const LN_EPS: f64 = 1e-5;

/// The weight a prunable module computes with, plus the mask that produced
/// it (absent for dense modules).
#[derive(Debug, Clone)]
pub struct ModuleWeights<'a, T: Clone> {
    pub weight: Cow<'a, Matrix<T>>,
    pub mask: Option<MaskTensor>,
}

/// Effective weights for every prunable module of one network.
pub type EffectiveWeights<'a, T> = Vec<ModuleWeights<'a, T>>;

/// Every prunable module unmasked.
pub fn dense_weights<T: Real>(params: &VitParams<T>) -> EffectiveWeights<'_, T> {
    (0..params.num_prunable())
        .map(|l| ModuleWeights {
            weight: Cow::Borrowed(params.prunable(l)),
            mask: None,
        })
        .collect()
}

// ---------------------------------------------------------------------------
// small dense kernels over row-major buffers

/// `x (t x in) * w^T + b` -> `t x out`
fn linear<T: Real>(x: &[T], t: usize, w: &Matrix<T>, b: &[T]) -> Vec<T> {
    let (out, inp) = w.shape();
    debug_assert_eq!(x.len(), t * inp);
    let mut y = Vec::with_capacity(t * out);
    for xr in x.chunks_exact(inp) {
        for (o, &bo) in b.iter().enumerate() {
            let wr = w.row(o);
            let mut acc = T::zero();
            for (&a, &c) in xr.iter().zip(wr) {
                acc = acc + a * c;
            }
            y.push(acc + bo);
        }
    }
    y
}

/// Backward of `linear`: accumulates `dw`, `db` and returns `dx`.
fn linear_backward<T: Real>(
    dy: &[T],
    x: &[T],
    t: usize,
    w: &Matrix<T>,
    dw: &mut Matrix<T>,
    db: &mut [T],
) -> Vec<T> {
    let (out, inp) = w.shape();
    let mut dx = vec![T::zero(); t * inp];
    for ti in 0..t {
        let dyr = &dy[ti * out..(ti + 1) * out];
        let xr = &x[ti * inp..(ti + 1) * inp];
        let dxr = &mut dx[ti * inp..(ti + 1) * inp];
        for (o, &g) in dyr.iter().enumerate() {
            if g == T::zero() {
                continue;
            }
            db[o] = db[o] + g;
            let wr = w.row(o);
            for (d, &wv) in dxr.iter_mut().zip(wr) {
                *d = *d + g * wv;
            }
            let dwr = dw.row_mut(o);
            for (d, &xv) in dwr.iter_mut().zip(xr) {
                *d = *d + g * xv;
            }
        }
    }
    dx
}

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

fn layer_norm<T: Real>(x: &[T], dim: usize, ln: &LayerNorm<T>) -> (Vec<T>, LnCache<T>) {
    let eps = T::from_f64_lossy(LN_EPS);
    let n = T::from_usize(dim).unwrap();
    let mut y = Vec::with_capacity(x.len());
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / dim);
    for row in x.chunks_exact(dim) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        for (i, &v) in row.iter().enumerate() {
            let xh = (v - mean) * r;
            xhat.push(xh);
            y.push(xh * ln.gamma[i] + ln.beta[i]);
        }
    }
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward<T: Real>(
    dy: &[T],
    dim: usize,
    ln: &LayerNorm<T>,
    cache: &LnCache<T>,
    grad: &mut LayerNorm<T>,
) -> Vec<T> {
    let n = T::from_usize(dim).unwrap();
    let mut dx = Vec::with_capacity(dy.len());
    for ((dyr, xh), &r) in dy
        .chunks_exact(dim)
        .zip(cache.xhat.chunks_exact(dim))
        .zip(&cache.rstd)
    {
        let mut sum_dxh = T::zero();
        let mut sum_dxh_xh = T::zero();
        for i in 0..dim {
            grad.gamma[i] = grad.gamma[i] + dyr[i] * xh[i];
            grad.beta[i] = grad.beta[i] + dyr[i];
            let dxh = dyr[i] * ln.gamma[i];
            sum_dxh = sum_dxh + dxh;
            sum_dxh_xh = sum_dxh_xh + dxh * xh[i];
        }
        let mean_dxh = sum_dxh / n;
        let mean_dxh_xh = sum_dxh_xh / n;
        for i in 0..dim {
            let dxh = dyr[i] * ln.gamma[i];
            dx.push(r * (dxh - mean_dxh - xh[i] * mean_dxh_xh));
        }
    }
    dx
}

fn gelu_consts<T: Real>() -> (T, T) {
    (
        T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
        T::from_f64_lossy(0.044715),
    )
}

/// tanh approximation of GELU
fn gelu<T: Real>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::from_f64_lossy(0.5);
    let three = T::from_f64_lossy(3.0);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * k * x * x)
}

// ---------------------------------------------------------------------------

/// Splits an image (`side x side x channels`, row-major, channel last) into
/// flattened patches, one row per token.
pub fn patchify<T: Real>(arch: &ArchSpec, image: &[T]) -> Vec<T> {
    let side = arch.image_side;
    let p = arch.patch_size;
    let ch = arch.channels;
    let per_row = side / p;
    let mut out = Vec::with_capacity(arch.tokens() * arch.patch_dim());
    for py in 0..per_row {
        for px in 0..per_row {
            for dy in 0..p {
                let y = py * p + dy;
                let start = (y * side + px * p) * ch;
                out.extend_from_slice(&image[start..start + p * ch]);
            }
        }
    }
    out
}

struct BlockCache<T> {
    ln1: LnCache<T>,
    h1: Vec<T>,
    qkv: Vec<T>,
    /// per head, `tokens x tokens` row-softmaxed attention
    attn: Vec<Vec<T>>,
    o: Vec<T>,
    ln2: LnCache<T>,
    h2: Vec<T>,
    u: Vec<T>,
    g: Vec<T>,
}

/// Intermediate activations of one forward pass, kept for backward.
pub struct ForwardCache<T> {
    patches: Vec<T>,
    blocks: Vec<BlockCache<T>>,
    lnf: LnCache<T>,
    pooled: Vec<T>,
}

fn attention_forward<T: Real>(arch: &ArchSpec, qkv: &[T]) -> (Vec<T>, Vec<Vec<T>>) {
    let t = arch.tokens();
    let d = arch.embed_dim;
    let dh = arch.head_dim();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut o = vec![T::zero(); t * d];
    let mut probs = Vec::with_capacity(arch.num_heads);
    for h in 0..arch.num_heads {
        let q_off = h * dh;
        let k_off = d + h * dh;
        let v_off = 2 * d + h * dh;
        let mut a = vec![T::zero(); t * t];
        for i in 0..t {
            let qi = &qkv[i * 3 * d + q_off..i * 3 * d + q_off + dh];
            let row = &mut a[i * t..(i + 1) * t];
            let mut max = T::neg_infinity();
            for (j, s) in row.iter_mut().enumerate() {
                let kj = &qkv[j * 3 * d + k_off..j * 3 * d + k_off + dh];
                let dot: T = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum();
                *s = dot * scale;
                max = max.max(*s);
            }
            let mut z = T::zero();
            for s in row.iter_mut() {
                *s = (*s - max).exp();
                z = z + *s;
            }
            for s in row.iter_mut() {
                *s = *s / z;
            }
            let oi = &mut o[i * d + h * dh..i * d + (h + 1) * dh];
            for (j, &p) in row.iter().enumerate() {
                let vj = &qkv[j * 3 * d + v_off..j * 3 * d + v_off + dh];
                for (acc, &v) in oi.iter_mut().zip(vj) {
                    *acc = *acc + p * v;
                }
            }
        }
        probs.push(a);
    }
    (o, probs)
}

fn attention_backward<T: Real>(arch: &ArchSpec, qkv: &[T], probs: &[Vec<T>], d_o: &[T]) -> Vec<T> {
    let t = arch.tokens();
    let d = arch.embed_dim;
    let dh = arch.head_dim();
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dqkv = vec![T::zero(); t * 3 * d];
    for (h, a) in probs.iter().enumerate() {
        let q_off = h * dh;
        let k_off = d + h * dh;
        let v_off = 2 * d + h * dh;
        for i in 0..t {
            let doi = &d_o[i * d + h * dh..i * d + (h + 1) * dh];
            let arow = &a[i * t..(i + 1) * t];
            // dA[i][j] = dO_i . v_j ; dv_j += A[i][j] dO_i
            let mut da = vec![T::zero(); t];
            for j in 0..t {
                let vj = &qkv[j * 3 * d + v_off..j * 3 * d + v_off + dh];
                da[j] = doi.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                let dvj = &mut dqkv[j * 3 * d + v_off..j * 3 * d + v_off + dh];
                for (g, &x) in dvj.iter_mut().zip(doi) {
                    *g = *g + arow[j] * x;
                }
            }
            let dot: T = da.iter().zip(arow).map(|(&x, &p)| x * p).sum();
            for j in 0..t {
                let ds = arow[j] * (da[j] - dot) * scale;
                if ds == T::zero() {
                    continue;
                }
                // dq_i += ds * k_j ; dk_j += ds * q_i
                for c in 0..dh {
                    let kj = qkv[j * 3 * d + k_off + c];
                    let qi = qkv[i * 3 * d + q_off + c];
                    dqkv[i * 3 * d + q_off + c] = dqkv[i * 3 * d + q_off + c] + ds * kj;
                    dqkv[j * 3 * d + k_off + c] = dqkv[j * 3 * d + k_off + c] + ds * qi;
                }
            }
        }
    }
    dqkv
}

/// Logits for one image plus the activations needed by `backward`.
pub fn forward<T: Real>(
    arch: &ArchSpec,
    params: &VitParams<T>,
    eff: &[ModuleWeights<'_, T>],
    image: &[T],
) -> (Vec<T>, ForwardCache<T>) {
    let t = arch.tokens();
    let d = arch.embed_dim;
    let hid = arch.hidden_dim();
    let patches = patchify(arch, image);
    let mut z = linear(&patches, t, &params.patch_embed.weight, &params.patch_embed.bias);
    for (zi, &p) in z.iter_mut().zip(params.pos_embed.as_slice()) {
        *zi = *zi + p;
    }
    let mut caches = Vec::with_capacity(params.blocks.len());
    for (b, blk) in params.blocks.iter().enumerate() {
        let w = |role: usize| eff[4 * b + role].weight.as_ref();
        let zin = z;
        let (h1, ln1) = layer_norm(&zin, d, &blk.ln1);
        let qkv = linear(&h1, t, w(0), &blk.qkv.bias);
        let (o, attn) = attention_forward(arch, &qkv);
        let proj = linear(&o, t, w(1), &blk.proj.bias);
        let z1: Vec<T> = zin.iter().zip(&proj).map(|(&a, &b)| a + b).collect();
        let (h2, ln2) = layer_norm(&z1, d, &blk.ln2);
        let u = linear(&h2, t, w(2), &blk.fc1.bias);
        let g: Vec<T> = u.iter().map(|&x| gelu(x)).collect();
        let f = linear(&g, t, w(3), &blk.fc2.bias);
        debug_assert_eq!(u.len(), t * hid);
        z = z1.iter().zip(&f).map(|(&a, &b)| a + b).collect();
        caches.push(BlockCache {
            ln1,
            h1,
            qkv,
            attn,
            o,
            ln2,
            h2,
            u,
            g,
        });
    }
    let (hf, lnf) = layer_norm(&z, d, &params.ln_final);
    let inv_t = T::one() / T::from_usize(t).unwrap();
    let mut pooled = vec![T::zero(); d];
    for row in hf.chunks_exact(d) {
        for (p, &v) in pooled.iter_mut().zip(row) {
            *p = *p + v;
        }
    }
    for p in pooled.iter_mut() {
        *p = *p * inv_t;
    }
    let logits = linear(&pooled, 1, &params.head.weight, &params.head.bias);
    (
        logits,
        ForwardCache {
            patches,
            blocks: caches,
            lnf,
            pooled,
        },
    )
}

/// Logits only.
pub fn logits<T: Real>(
    arch: &ArchSpec,
    params: &VitParams<T>,
    eff: &[ModuleWeights<'_, T>],
    image: &[T],
) -> Vec<T> {
    forward(arch, params, eff, image).0
}

/// Accumulates parameter gradients for one image into `grad` given the
/// gradient of the loss with respect to the logits.
///
/// Gradients of prunable weights are taken with respect to the effective
/// (masked) weight and then masked, so pruned positions receive exactly 0.
pub fn backward<T: Real>(
    arch: &ArchSpec,
    params: &VitParams<T>,
    eff: &[ModuleWeights<'_, T>],
    cache: &ForwardCache<T>,
    dlogits: &[T],
    grad: &mut VitParams<T>,
) {
    let t = arch.tokens();
    let d = arch.embed_dim;
    let mut dpooled = linear_backward(
        dlogits,
        &cache.pooled,
        1,
        &params.head.weight,
        &mut grad.head.weight,
        &mut grad.head.bias,
    );
    let inv_t = T::one() / T::from_usize(t).unwrap();
    for v in dpooled.iter_mut() {
        *v = *v * inv_t;
    }
    let dhf: Vec<T> = (0..t).flat_map(|_| dpooled.iter().copied()).collect();
    let mut dz = layer_norm_backward(&dhf, d, &params.ln_final, &cache.lnf, &mut grad.ln_final);

    for (b, (blk, c)) in params.blocks.iter().zip(&cache.blocks).enumerate().rev() {
        let gb = &mut grad.blocks[b];
        let w = |role: usize| eff[4 * b + role].weight.as_ref();
        // z = z1 + fc2(gelu(fc1(ln2(z1))))
        let dg = linear_backward(&dz, &c.g, t, w(3), &mut gb.fc2.weight, &mut gb.fc2.bias);
        let du: Vec<T> = dg.iter().zip(&c.u).map(|(&g, &u)| g * gelu_grad(u)).collect();
        let dh2 = linear_backward(&du, &c.h2, t, w(2), &mut gb.fc1.weight, &mut gb.fc1.bias);
        let dz1_ln = layer_norm_backward(&dh2, d, &blk.ln2, &c.ln2, &mut gb.ln2);
        let dz1: Vec<T> = dz.iter().zip(&dz1_ln).map(|(&a, &b)| a + b).collect();
        // z1 = zin + proj(attn(qkv(ln1(zin))))
        let d_o = linear_backward(&dz1, &c.o, t, w(1), &mut gb.proj.weight, &mut gb.proj.bias);
        let dqkv = attention_backward(arch, &c.qkv, &c.attn, &d_o);
        let dh1 = linear_backward(&dqkv, &c.h1, t, w(0), &mut gb.qkv.weight, &mut gb.qkv.bias);
        let dzin_ln = layer_norm_backward(&dh1, d, &blk.ln1, &c.ln1, &mut gb.ln1);
        dz = dz1.iter().zip(&dzin_ln).map(|(&a, &b)| a + b).collect();
    }

    for (g, &v) in grad.pos_embed.as_mut_slice().iter_mut().zip(&dz) {
        *g = *g + v;
    }
    linear_backward(
        &dz,
        &cache.patches,
        t,
        &params.patch_embed.weight,
        &mut grad.patch_embed.weight,
        &mut grad.patch_embed.bias,
    );

    mask_gradients(eff, grad);
}

/// Zeroes gradient entries of pruned positions.
pub fn mask_gradients<T: Real>(eff: &[ModuleWeights<'_, T>], grad: &mut VitParams<T>) {
    for (l, mw) in eff.iter().enumerate() {
        if let Some(mask) = &mw.mask {
            for (g, &keep) in grad.prunable_mut(l).as_mut_slice().iter_mut().zip(mask.as_slice()) {
                if !keep {
                    *g = T::zero();
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_orders_tokens_row_major() {
        let arch = ArchSpec {
            image_side: 4,
            patch_size: 2,
            ..ArchSpec::default()
        };
        let img: Vec<f64> = (0..16).map(f64::from).collect();
        let p = patchify(&arch, &img);
        assert_eq!(&p[0..4], &[0.0, 1.0, 4.0, 5.0]);
        assert_eq!(&p[4..8], &[2.0, 3.0, 6.0, 7.0]);
        assert_eq!(&p[12..16], &[10.0, 11.0, 14.0, 15.0]);
    }

    #[test]
    fn gelu_derivative_matches_finite_difference() {
        for &x in &[-3.0f64, -1.0, -0.1, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}
