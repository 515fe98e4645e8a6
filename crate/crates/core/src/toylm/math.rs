//! Forward and backward passes. Rows are tokens; a matrix may stack several
//! equal-length segments (`seg` rows each) that attend only within
//! themselves, so a batch of patched copies shares every matmul.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use super::config::LmConfig;
use super::params::{BlockParams, LmParams};

const LN_EPS: f64 = 1e-5;
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub(crate) struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, g: &Array1<f64>, b: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let (t, d) = x.dim();
    let mut xhat = Array2::zeros((t, d));
    let mut rstd = Array1::zeros(t);
    for i in 0..t {
        let row = x.row(i);
        let mu = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        Zip::from(xhat.row_mut(i)).and(row).for_each(|h, &v| *h = (v - mu) * r);
    }
    let y = &xhat * g + b;
    (y, LnCache { xhat, rstd })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    g: &Array1<f64>,
    cache: &LnCache,
    grads: Option<(&mut Array1<f64>, &mut Array1<f64>)>,
) -> Array2<f64> {
    let (t, d) = dy.dim();
    if let Some((dg, db)) = grads {
        *dg += &(dy * &cache.xhat).sum_axis(Axis(0));
        *db += &dy.sum_axis(Axis(0));
    }
    let dxhat = dy * g;
    let mut dx = Array2::zeros((t, d));
    for i in 0..t {
        let dh = dxhat.row(i);
        let xh = cache.xhat.row(i);
        let mean_dh = dh.sum() / d as f64;
        let mean_dhx = dh.dot(&xh) / d as f64;
        let r = cache.rstd[i];
        Zip::from(dx.row_mut(i))
            .and(dh)
            .and(xh)
            .for_each(|o, &a, &b| *o = r * (a - mean_dh - b * mean_dhx));
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_K * (u + GELU_C * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_K * (u + GELU_C * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * u * u)
}

pub(crate) struct BlockCache {
    ln1: LnCache,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    att: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

fn block_forward(p: &BlockParams, x: &Array2<f64>, n_heads: usize, seg: usize) -> (Array2<f64>, BlockCache) {
    let (t, d) = x.dim();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let (h1, ln1) = layer_norm(x, &p.ln1_g, &p.ln1_b);
    let qkv = h1.dot(&p.w_qkv) + &p.b_qkv;
    let mut att = Array2::zeros((t, d));
    let mut probs = Vec::with_capacity(n_heads * t / seg);
    for r0 in (0..t).step_by(seg) {
        let rows = r0..r0 + seg;
        for h in 0..n_heads {
            let q = qkv.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
            let k = qkv.slice(s![rows.clone(), d + h * hd..d + (h + 1) * hd]);
            let v = qkv.slice(s![rows.clone(), 2 * d + h * hd..2 * d + (h + 1) * hd]);
            let mut sc = q.dot(&k.t());
            for i in 0..seg {
                let mut row = sc.row_mut(i);
                let mut mx = f64::NEG_INFINITY;
                for j in 0..=i {
                    row[j] *= scale;
                    mx = mx.max(row[j]);
                }
                let mut z = 0.0;
                for j in 0..=i {
                    row[j] = (row[j] - mx).exp();
                    z += row[j];
                }
                for j in 0..seg {
                    row[j] = if j <= i { row[j] / z } else { 0.0 };
                }
            }
            att.slice_mut(s![rows.clone(), h * hd..(h + 1) * hd]).assign(&sc.dot(&v));
            probs.push(sc);
        }
    }
    let x1 = x + &(att.dot(&p.w_o) + &p.b_o);
    let (h2, ln2) = layer_norm(&x1, &p.ln2_g, &p.ln2_b);
    let u = h2.dot(&p.w_fc) + &p.b_fc;
    let g = u.mapv(gelu);
    let y = &x1 + &(g.dot(&p.w_proj) + &p.b_proj);
    (
        y,
        BlockCache {
            ln1,
            h1,
            qkv,
            probs,
            att,
            ln2,
            h2,
            u,
            g,
        },
    )
}

fn add_outer(acc: &mut Array2<f64>, a: &Array2<f64>, b: &Array2<f64>) {
    // acc += aᵀ b
    ndarray::linalg::general_mat_mul(1.0, &a.t(), b, 1.0, acc);
}

fn block_backward(
    p: &BlockParams,
    c: &BlockCache,
    dy: &Array2<f64>,
    n_heads: usize,
    seg: usize,
    mut grads: Option<&mut BlockParams>,
) -> Array2<f64> {
    let (t, d) = dy.dim();
    let hd = d / n_heads;
    let scale = 1.0 / (hd as f64).sqrt();

    // MLP branch.
    if let Some(gr) = grads.as_deref_mut() {
        add_outer(&mut gr.w_proj, &c.g, dy);
        gr.b_proj += &dy.sum_axis(Axis(0));
    }
    let dg = dy.dot(&p.w_proj.t());
    let mut du = dg;
    Zip::from(&mut du).and(&c.u).for_each(|o, &u| *o *= gelu_grad(u));
    if let Some(gr) = grads.as_deref_mut() {
        add_outer(&mut gr.w_fc, &c.h2, &du);
        gr.b_fc += &du.sum_axis(Axis(0));
    }
    let dh2 = du.dot(&p.w_fc.t());
    let ln2_grads = grads.as_deref_mut().map(|g| (&mut g.ln2_g, &mut g.ln2_b));
    let dx1 = dy + &layer_norm_backward(&dh2, &p.ln2_g, &c.ln2, ln2_grads);

    // Attention branch.
    if let Some(gr) = grads.as_deref_mut() {
        add_outer(&mut gr.w_o, &c.att, &dx1);
        gr.b_o += &dx1.sum_axis(Axis(0));
    }
    let datt = dx1.dot(&p.w_o.t());
    let mut dqkv = Array2::<f64>::zeros((t, 3 * d));
    for (b, r0) in (0..t).step_by(seg).enumerate() {
        let rows = r0..r0 + seg;
        for h in 0..n_heads {
            let q = c.qkv.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
            let k = c.qkv.slice(s![rows.clone(), d + h * hd..d + (h + 1) * hd]);
            let v = c.qkv.slice(s![rows.clone(), 2 * d + h * hd..2 * d + (h + 1) * hd]);
            let pr = &c.probs[b * n_heads + h];
            let dout = datt.slice(s![rows.clone(), h * hd..(h + 1) * hd]);
            let dp = dout.dot(&v.t());
            let dv = pr.t().dot(&dout);
            let mut ds = Array2::<f64>::zeros((seg, seg));
            for i in 0..seg {
                let mut dot = 0.0;
                for j in 0..=i {
                    dot += dp[[i, j]] * pr[[i, j]];
                }
                for j in 0..=i {
                    ds[[i, j]] = pr[[i, j]] * (dp[[i, j]] - dot) * scale;
                }
            }
            let dq = ds.dot(&k);
            let dk = ds.t().dot(&q);
            dqkv.slice_mut(s![rows.clone(), h * hd..(h + 1) * hd]).assign(&dq);
            dqkv.slice_mut(s![rows.clone(), d + h * hd..d + (h + 1) * hd]).assign(&dk);
            dqkv.slice_mut(s![rows.clone(), 2 * d + h * hd..2 * d + (h + 1) * hd]).assign(&dv);
        }
    }
    if let Some(gr) = grads.as_deref_mut() {
        add_outer(&mut gr.w_qkv, &c.h1, &dqkv);
        gr.b_qkv += &dqkv.sum_axis(Axis(0));
    }
    let dh1 = dqkv.dot(&p.w_qkv.t());
    let ln1_grads = grads.map(|g| (&mut g.ln1_g, &mut g.ln1_b));
    dx1 + layer_norm_backward(&dh1, &p.ln1_g, &c.ln1, ln1_grads)
}

pub(crate) struct HeadCache {
    ln: LnCache,
    hf: Array2<f64>,
}

/// Final norm, unembedding and log-softmax.
pub(crate) fn head_forward(p: &LmParams, x: &Array2<f64>) -> (Array2<f64>, HeadCache) {
    let (hf, ln) = layer_norm(x, &p.lnf_g, &p.lnf_b);
    let mut logp = hf.dot(&p.w_out) + &p.b_out;
    for mut row in logp.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    (logp, HeadCache { ln, hf })
}

/// Backpropagates a gradient with respect to the *logits*.
pub(crate) fn head_backward(
    p: &LmParams,
    c: &HeadCache,
    dlogits: &Array2<f64>,
    grads: Option<&mut LmParams>,
) -> Array2<f64> {
    let dhf = dlogits.dot(&p.w_out.t());
    match grads {
        Some(gr) => {
            add_outer(&mut gr.w_out, &c.hf, dlogits);
            gr.b_out += &dlogits.sum_axis(Axis(0));
            layer_norm_backward(&dhf, &p.lnf_g, &c.ln, Some((&mut gr.lnf_g, &mut gr.lnf_b)))
        }
        None => layer_norm_backward(&dhf, &p.lnf_g, &c.ln, None),
    }
}

pub(crate) fn embed(p: &LmParams, tokens: &[u32]) -> Array2<f64> {
    let d = p.tok_emb.ncols();
    let mut x = Array2::zeros((tokens.len(), d));
    for (i, &t) in tokens.iter().enumerate() {
        let mut row = x.row_mut(i);
        row.assign(&p.tok_emb.row(t as usize));
        row += &p.pos_emb.row(i);
    }
    x
}

fn embed_backward(gr: &mut LmParams, tokens: &[u32], dx: &Array2<f64>) {
    for (i, &t) in tokens.iter().enumerate() {
        let mut r = gr.tok_emb.row_mut(t as usize);
        r += &dx.row(i);
        let mut r = gr.pos_emb.row_mut(i);
        r += &dx.row(i);
    }
}

/// Runs blocks `range` on `x` (segments of `seg` rows), returning the
/// output and per-block caches.
pub(crate) fn run_blocks(
    p: &LmParams,
    cfg: &LmConfig,
    x: Array2<f64>,
    range: std::ops::Range<usize>,
    seg: usize,
) -> (Array2<f64>, Vec<BlockCache>) {
    debug_assert!(seg > 0 && x.nrows() % seg == 0);
    let mut caches = Vec::with_capacity(range.len());
    let mut x = x;
    for l in range {
        let (y, c) = block_forward(&p.blocks[l], &x, cfg.n_heads, seg);
        caches.push(c);
        x = y;
    }
    (x, caches)
}

/// Backpropagates through blocks `range` (same range as the forward call).
pub(crate) fn backward_blocks(
    p: &LmParams,
    cfg: &LmConfig,
    caches: &[BlockCache],
    range: std::ops::Range<usize>,
    seg: usize,
    dy: Array2<f64>,
    mut grads: Option<&mut LmParams>,
) -> Array2<f64> {
    let mut dx = dy;
    for (l, c) in range.zip(caches.iter()).rev() {
        let g = grads.as_deref_mut().map(|g| &mut g.blocks[l]);
        dx = block_backward(&p.blocks[l], c, &dx, cfg.n_heads, seg, g);
    }
    dx
}

/// Summed next-token NLL for one sequence and the gradient with respect to
/// its logits, scaled by `grad_scale`. Targets equal to `pad` are skipped.
pub(crate) fn nll_and_dlogits(logp: &ArrayView2<f64>, tokens: &[u32], pad: u32, grad_scale: f64) -> (f64, usize, Array2<f64>) {
    let mut dl = Array2::zeros(logp.raw_dim());
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..tokens.len().saturating_sub(1) {
        let target = tokens[i + 1];
        if target == pad || tokens[i] == pad {
            continue;
        }
        total -= logp[[i, target as usize]];
        count += 1;
        let mut row = dl.row_mut(i);
        Zip::from(&mut row).and(logp.row(i)).for_each(|o, &lp| *o = lp.exp() * grad_scale);
        row[target as usize] -= grad_scale;
    }
    (total, count, dl)
}

/// Full forward and backward for one training sequence, accumulating into
/// `grads`. Returns the summed NLL and target count.
pub(crate) fn train_sequence(p: &LmParams, cfg: &LmConfig, tokens: &[u32], pad: u32, grad_scale: f64, grads: &mut LmParams) -> (f64, usize) {
    let x0 = embed(p, tokens);
    let (x, caches) = run_blocks(p, cfg, x0, 0..cfg.n_layers, tokens.len());
    let (logp, hc) = head_forward(p, &x);
    let (nll, count, dlogits) = nll_and_dlogits(&logp.view(), tokens, pad, grad_scale);
    if count == 0 {
        return (0.0, 0);
    }
    let dx = head_backward(p, &hc, &dlogits, Some(grads));
    let dx0 = backward_blocks(p, cfg, &caches, 0..cfg.n_layers, tokens.len(), dx, Some(grads));
    embed_backward(grads, tokens, &dx0);
    (nll, count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::rng;
    use rand::Rng;

    fn loss(p: &LmParams, cfg: &LmConfig, tokens: &[u32]) -> f64 {
        let (x, _) = run_blocks(p, cfg, embed(p, tokens), 0..cfg.n_layers, tokens.len());
        let (logp, _) = head_forward(p, &x);
        nll_and_dlogits(&logp.view(), tokens, 1, 1.0).0
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let cfg = LmConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            vocab_size: 11,
            context_len: 6,
            mid_layer: 1,
            seed: 3,
        };
        let mut r = rng(5);
        let mut p = LmParams::init(&cfg, &mut r);
        // Non-trivial unembedding and norms so every path carries gradient.
        for s in p.slices_mut() {
            for v in s.iter_mut() {
                *v += r.random_range(-0.3..0.3);
            }
        }
        let tokens = [0u32, 4, 7, 3, 9, 1];
        let mut g = LmParams::zeros(&cfg);
        train_sequence(&p, &cfg, &tokens, 1, 1.0, &mut g);
        let names: Vec<String> = g.named_slices().into_iter().map(|(n, _, _)| n).collect();
        let grads: Vec<Vec<f64>> = g.named_slices().into_iter().map(|(_, _, s)| s.to_vec()).collect();
        let h = 1e-5;
        for (k, name) in names.iter().enumerate() {
            for _ in 0..4 {
                let len = grads[k].len();
                let j = r.random_range(0..len);
                let orig = p.slices_mut()[k][j];
                p.slices_mut()[k][j] = orig + h;
                let up = loss(&p, &cfg, &tokens);
                p.slices_mut()[k][j] = orig - h;
                let dn = loss(&p, &cfg, &tokens);
                p.slices_mut()[k][j] = orig;
                let fd = (up - dn) / (2.0 * h);
                let an = grads[k][j];
                assert!(
                    (fd - an).abs() <= 1e-5 + 1e-4 * fd.abs().max(an.abs()),
                    "{name}[{j}]: analytic {an} vs numeric {fd}"
                );
            }
        }
    }
}
