use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Zip};

use super::{view1, view2, view2_mut, ToyLm, LN_EPS};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    h1: Array2<f64>,
    qkv: Array2<f64>,
    probs: Vec<Array2<f64>>,
    att: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    a1: Array2<f64>,
    g1: Array2<f64>,
}

struct ForwardCache {
    layers: Vec<LayerCache>,
    lnf: LnCache,
    xf: Array2<f64>,
}

/// Logits for every position of one row.
pub struct RowOutput {
    pub logits: Array2<f64>,
}

/// Mean masked cross-entropy over a batch with its gradient.
#[derive(Debug, Clone)]
pub struct BatchGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub n_targets: usize,
    pub n_correct: usize,
}

fn ln_forward(x: &Array2<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let (t, d) = x.dim();
    let mut xhat = Array2::zeros((t, d));
    let mut rstd = Array1::zeros(t);
    for (i, row) in x.outer_iter().enumerate() {
        let mean = row.sum() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        Zip::from(xhat.row_mut(i)).and(row).for_each(|o, &v| *o = (v - mean) * r);
    }
    let y = &xhat * &g + &b;
    (y, LnCache { xhat, rstd })
}

fn ln_backward(dy: &Array2<f64>, cache: &LnCache, g: ArrayView1<f64>, dg: &mut [f64], db: &mut [f64]) -> Array2<f64> {
    let (t, d) = dy.dim();
    for (dyr, xr) in dy.outer_iter().zip(cache.xhat.outer_iter()) {
        for j in 0..d {
            dg[j] += dyr[j] * xr[j];
            db[j] += dyr[j];
        }
    }
    let mut dx = Array2::zeros((t, d));
    let inv_d = 1.0 / d as f64;
    for i in 0..t {
        let xr = cache.xhat.row(i);
        let dyr = dy.row(i);
        let mut m1 = 0.0;
        let mut m2 = 0.0;
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            m1 += dxh;
            m2 += dxh * xr[j];
        }
        m1 *= inv_d;
        m2 *= inv_d;
        let r = cache.rstd[i];
        for j in 0..d {
            dx[[i, j]] = r * (dyr[j] * g[j] - m1 - xr[j] * m2);
        }
    }
    dx
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn add_bias(m: &mut Array2<f64>, b: ArrayView1<f64>) {
    for mut row in m.outer_iter_mut() {
        row += &b;
    }
}

fn accum_bias(grad: &mut [f64], off: usize, dm: &Array2<f64>) {
    for row in dm.outer_iter() {
        for (g, v) in grad[off..off + row.len()].iter_mut().zip(row.iter()) {
            *g += v;
        }
    }
}

/// grad[off] (r x c) += a^T b
fn accum_at_b(grad: &mut [f64], off: usize, a: &ArrayView2<f64>, b: &ArrayView2<f64>) {
    let mut g = view2_mut(grad, off, a.ncols(), b.ncols());
    general_mat_mul(1.0, &a.t(), b, 1.0, &mut g);
}

impl ToyLm {
    fn forward_cached(&self, ids: &[u32]) -> (Array2<f64>, ForwardCache) {
        let cfg = &self.cfg;
        let p = &self.params;
        let lay = &self.layout;
        let (t, d, v, f, dh) = (ids.len(), cfg.d_model, cfg.vocab_size, cfg.ffn_dim(), cfg.head_dim());
        assert!(t >= 1 && t <= cfg.seq_len, "row length {t} outside 1..={}", cfg.seq_len);
        let scale = 1.0 / (dh as f64).sqrt();

        let tok = view2(p, lay.tok_emb, v, d);
        let pos = view2(p, lay.pos_emb, cfg.seq_len, d);
        let mut x = Array2::zeros((t, d));
        for (i, &id) in ids.iter().enumerate() {
            let mut row = x.row_mut(i);
            row.assign(&tok.row(id as usize));
            row += &pos.row(i);
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for lo in &lay.layers {
            let (h1, ln1) = ln_forward(&x, view1(p, lo.ln1_g, d), view1(p, lo.ln1_b, d));
            let mut qkv = h1.dot(&view2(p, lo.w_qkv, d, 3 * d));
            add_bias(&mut qkv, view1(p, lo.b_qkv, 3 * d));
            let mut att = Array2::zeros((t, d));
            let mut probs = Vec::with_capacity(cfg.n_heads);
            for h in 0..cfg.n_heads {
                let q = qkv.slice(s![.., h * dh..(h + 1) * dh]);
                let k = qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
                let vv = qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let mut sc = q.dot(&k.t());
                for (i, mut row) in sc.outer_iter_mut().enumerate() {
                    let row = row.as_slice_mut().expect("contiguous scores");
                    let (live, masked) = row.split_at_mut(i + 1);
                    let mut max = f64::NEG_INFINITY;
                    for x in live.iter_mut() {
                        *x *= scale;
                        max = max.max(*x);
                    }
                    let mut sum = 0.0;
                    for x in live.iter_mut() {
                        *x = (*x - max).exp();
                        sum += *x;
                    }
                    let inv = 1.0 / sum;
                    live.iter_mut().for_each(|x| *x *= inv);
                    masked.fill(0.0);
                }
                att.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&sc.dot(&vv));
                probs.push(sc);
            }
            let mut o = att.dot(&view2(p, lo.w_o, d, d));
            add_bias(&mut o, view1(p, lo.b_o, d));
            x += &o;

            let (h2, ln2) = ln_forward(&x, view1(p, lo.ln2_g, d), view1(p, lo.ln2_b, d));
            let mut a1 = h2.dot(&view2(p, lo.w_fc1, d, f));
            add_bias(&mut a1, view1(p, lo.b_fc1, f));
            let g1 = a1.mapv(gelu);
            let mut y = g1.dot(&view2(p, lo.w_fc2, f, d));
            add_bias(&mut y, view1(p, lo.b_fc2, d));
            x += &y;
            layers.push(LayerCache { ln1, h1, qkv, probs, att, ln2, h2, a1, g1 });
        }

        let (xf, lnf) = ln_forward(&x, view1(p, lay.lnf_g, d), view1(p, lay.lnf_b, d));
        let mut logits = xf.dot(&view2(p, lay.w_out, d, v));
        add_bias(&mut logits, view1(p, lay.b_out, v));
        (logits, ForwardCache { layers, lnf, xf })
    }

    /// Forward pass for one row (length ≤ `seq_len`).
    pub fn forward(&self, ids: &[u32]) -> RowOutput {
        RowOutput { logits: self.forward_cached(ids).0 }
    }

    /// Next-token log-probabilities at every position.
    pub fn log_probs(&self, ids: &[u32]) -> Array2<f64> {
        let mut logits = self.forward(ids).logits;
        for mut row in logits.outer_iter_mut() {
            let lse = log_sum_exp(row.view());
            row.mapv_inplace(|v| v - lse);
        }
        logits
    }

    fn backward(&self, ids: &[u32], cache: &ForwardCache, dlogits: &Array2<f64>, grad: &mut [f64]) {
        let cfg = &self.cfg;
        let p = &self.params;
        let lay = &self.layout;
        let (t, d, v, f, dh) = (ids.len(), cfg.d_model, cfg.vocab_size, cfg.ffn_dim(), cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();

        accum_at_b(grad, lay.w_out, &cache.xf.view(), &dlogits.view());
        accum_bias(grad, lay.b_out, dlogits);
        let dxf = dlogits.dot(&view2(p, lay.w_out, d, v).t());
        let mut dx = {
            let (dg, db) = split_pair(grad, lay.lnf_g, lay.lnf_b, d);
            ln_backward(&dxf, &cache.lnf, view1(p, lay.lnf_g, d), dg, db)
        };

        for (lo, lc) in lay.layers.iter().zip(&cache.layers).rev() {
            // feed-forward
            accum_at_b(grad, lo.w_fc2, &lc.g1.view(), &dx.view());
            accum_bias(grad, lo.b_fc2, &dx);
            let mut da1 = dx.dot(&view2(p, lo.w_fc2, f, d).t());
            Zip::from(&mut da1).and(&lc.a1).for_each(|g, &a| *g *= gelu_grad(a));
            accum_at_b(grad, lo.w_fc1, &lc.h2.view(), &da1.view());
            accum_bias(grad, lo.b_fc1, &da1);
            let dh2 = da1.dot(&view2(p, lo.w_fc1, d, f).t());
            {
                let (dg, db) = split_pair(grad, lo.ln2_g, lo.ln2_b, d);
                dx += &ln_backward(&dh2, &lc.ln2, view1(p, lo.ln2_g, d), dg, db);
            }

            // attention
            accum_at_b(grad, lo.w_o, &lc.att.view(), &dx.view());
            accum_bias(grad, lo.b_o, &dx);
            let datt = dx.dot(&view2(p, lo.w_o, d, d).t());
            let mut dqkv = Array2::zeros((t, 3 * d));
            for h in 0..cfg.n_heads {
                let q = lc.qkv.slice(s![.., h * dh..(h + 1) * dh]);
                let k = lc.qkv.slice(s![.., d + h * dh..d + (h + 1) * dh]);
                let vv = lc.qkv.slice(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]);
                let pr = &lc.probs[h];
                let dout = datt.slice(s![.., h * dh..(h + 1) * dh]);
                let dp = dout.dot(&vv.t());
                let dv = pr.t().dot(&dout);
                let mut ds = Array2::zeros((t, t));
                for (i, mut ds_row) in ds.outer_iter_mut().enumerate() {
                    let ds_row = &mut ds_row.as_slice_mut().expect("contiguous")[..=i];
                    let dp_row = &dp.row(i).to_slice().expect("contiguous")[..=i];
                    let p_row = &pr.row(i).to_slice().expect("contiguous")[..=i];
                    let dot: f64 = dp_row.iter().zip(p_row).map(|(a, b)| a * b).sum();
                    for ((o, &g), &p) in ds_row.iter_mut().zip(dp_row).zip(p_row) {
                        *o = p * (g - dot) * scale;
                    }
                }
                let dq = ds.dot(&k);
                let dk = ds.t().dot(&q);
                dqkv.slice_mut(s![.., h * dh..(h + 1) * dh]).assign(&dq);
                dqkv.slice_mut(s![.., d + h * dh..d + (h + 1) * dh]).assign(&dk);
                dqkv.slice_mut(s![.., 2 * d + h * dh..2 * d + (h + 1) * dh]).assign(&dv);
            }
            accum_at_b(grad, lo.w_qkv, &lc.h1.view(), &dqkv.view());
            accum_bias(grad, lo.b_qkv, &dqkv);
            let dh1 = dqkv.dot(&view2(p, lo.w_qkv, d, 3 * d).t());
            {
                let (dg, db) = split_pair(grad, lo.ln1_g, lo.ln1_b, d);
                dx += &ln_backward(&dh1, &lc.ln1, view1(p, lo.ln1_g, d), dg, db);
            }
        }

        for (i, &id) in ids.iter().enumerate() {
            let row = dx.row(i);
            let te = lay.tok_emb + id as usize * d;
            let pe = lay.pos_emb + i * d;
            for j in 0..d {
                grad[te + j] += row[j];
                grad[pe + j] += row[j];
            }
        }
    }

    /// Mean masked next-token cross-entropy over `rows` and its gradient.
    ///
    /// Position `t` of a row predicts token `t + 1` and contributes when
    /// `mask[t + 1]` is set.
    pub fn loss_and_grad(&self, rows: &[(&[u32], &[bool])]) -> BatchGrad {
        self.loss_and_grad_impl(rows, true)
    }

    /// Same loss as [`ToyLm::loss_and_grad`] without the backward pass.
    pub fn loss(&self, rows: &[(&[u32], &[bool])]) -> BatchGrad {
        self.loss_and_grad_impl(rows, false)
    }

    fn loss_and_grad_impl(&self, rows: &[(&[u32], &[bool])], want_grad: bool) -> BatchGrad {
        let n_targets: usize = rows.iter().map(|(_, m)| m.iter().skip(1).filter(|&&b| b).count()).sum();
        let mut grad = if want_grad { vec![0.0; self.params.len()] } else { Vec::new() };
        let mut loss_sum = 0.0;
        let mut n_correct = 0;
        if n_targets == 0 {
            return BatchGrad { loss: 0.0, grad, n_targets, n_correct };
        }
        let inv = 1.0 / n_targets as f64;
        for &(ids, mask) in rows {
            assert_eq!(ids.len(), mask.len());
            if !mask.iter().skip(1).any(|&b| b) {
                continue;
            }
            let (logits, cache) = self.forward_cached(ids);
            let mut dlogits = Array2::zeros(logits.dim());
            for tpos in 0..ids.len() - 1 {
                if !mask[tpos + 1] {
                    continue;
                }
                let target = ids[tpos + 1] as usize;
                let row = logits.row(tpos);
                let lse = log_sum_exp(row);
                loss_sum += lse - row[target];
                if argmax(row) == target {
                    n_correct += 1;
                }
                if want_grad {
                    let mut drow = dlogits.row_mut(tpos);
                    Zip::from(&mut drow).and(row).for_each(|g, &l| *g = (l - lse).exp() * inv);
                    drow[target] -= inv;
                }
            }
            if want_grad {
                self.backward(ids, &cache, &dlogits, &mut grad);
            }
        }
        BatchGrad { loss: loss_sum * inv, grad, n_targets, n_correct }
    }
}

fn split_pair(grad: &mut [f64], a: usize, b: usize, len: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert_eq!(a + len, b);
    let (left, right) = grad[a..b + len].split_at_mut(len);
    (left, right)
}

pub(crate) fn log_sum_exp(row: ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Index of the first maximum.
pub(crate) fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
