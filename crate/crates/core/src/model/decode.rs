use ndarray::{s, Array1, ArrayView1};

use super::{view1, view2, ToyLm, LN_EPS};

/// Incremental key/value cache for autoregressive decoding.
#[derive(Debug, Clone)]
pub struct DecodeState {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
}

impl DecodeState {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

fn ln(x: &Array1<f64>, g: ArrayView1<f64>, b: ArrayView1<f64>) -> Array1<f64> {
    let d = x.len() as f64;
    let mean = x.sum() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let r = 1.0 / (var + LN_EPS).sqrt();
    x.mapv(|v| (v - mean) * r) * &g + &b
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

impl ToyLm {
    pub fn start_decode(&self) -> DecodeState {
        let n = self.cfg.n_layers;
        DecodeState { keys: vec![Vec::new(); n], values: vec![Vec::new(); n], len: 0 }
    }

    /// Feeds one token and returns the logits for the next position.
    ///
    /// Panics if the state already holds `seq_len` tokens.
    pub fn decode_step(&self, state: &mut DecodeState, token: u32) -> Array1<f64> {
        let cfg = &self.cfg;
        let p = &self.params;
        let lay = &self.layout;
        let (d, v, f, dh) = (cfg.d_model, cfg.vocab_size, cfg.ffn_dim(), cfg.head_dim());
        let pos = state.len;
        assert!(pos < cfg.seq_len, "decode position {pos} exceeds seq_len {}", cfg.seq_len);
        let scale = 1.0 / (dh as f64).sqrt();

        let mut x = view2(p, lay.tok_emb, v, d).row(token as usize).to_owned();
        x += &view2(p, lay.pos_emb, cfg.seq_len, d).row(pos);

        for (l, lo) in lay.layers.iter().enumerate() {
            let h = ln(&x, view1(p, lo.ln1_g, d), view1(p, lo.ln1_b, d));
            let qkv = h.dot(&view2(p, lo.w_qkv, d, 3 * d)) + view1(p, lo.b_qkv, 3 * d);
            state.keys[l].extend(qkv.slice(s![d..2 * d]).iter());
            state.values[l].extend(qkv.slice(s![2 * d..]).iter());
            let n = pos + 1;
            let keys = &state.keys[l];
            let vals = &state.values[l];
            let mut att = Array1::zeros(d);
            let mut w = vec![0.0; n];
            for hh in 0..cfg.n_heads {
                let q = qkv.slice(s![hh * dh..(hh + 1) * dh]);
                let mut max = f64::NEG_INFINITY;
                for (j, wj) in w.iter_mut().enumerate() {
                    let k = &keys[j * d + hh * dh..j * d + (hh + 1) * dh];
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += q[c] * k[c];
                    }
                    *wj = dot * scale;
                    max = max.max(*wj);
                }
                let mut sum = 0.0;
                for wj in w.iter_mut() {
                    *wj = (*wj - max).exp();
                    sum += *wj;
                }
                for (j, wj) in w.iter().enumerate() {
                    let vrow = &vals[j * d + hh * dh..j * d + (hh + 1) * dh];
                    let a = wj / sum;
                    for c in 0..dh {
                        att[hh * dh + c] += a * vrow[c];
                    }
                }
            }
            x = x + att.dot(&view2(p, lo.w_o, d, d)) + view1(p, lo.b_o, d);
            let h2 = ln(&x, view1(p, lo.ln2_g, d), view1(p, lo.ln2_b, d));
            let a1 = (h2.dot(&view2(p, lo.w_fc1, d, f)) + view1(p, lo.b_fc1, f)).mapv(gelu);
            x = x + a1.dot(&view2(p, lo.w_fc2, f, d)) + view1(p, lo.b_fc2, d);
        }
        state.len += 1;
        let xf = ln(&x, view1(p, lay.lnf_g, d), view1(p, lay.lnf_b, d));
        xf.dot(&view2(p, lay.w_out, d, v)) + view1(p, lay.b_out, v)
    }
}

#[cfg(test)]
mod tests {
    use crate::model::{ToyLm, ToyLmConfig};

    #[test]
    fn incremental_matches_full_forward() {
        let m = ToyLm::init(ToyLmConfig { vocab_size: 13, d_model: 12, n_layers: 2, n_heads: 3, seq_len: 10, init_seed: 5, init_scale: 0.4 })
            .unwrap();
        let ids = [3u32, 1, 4, 1, 5, 9, 2, 6];
        let full = m.forward(&ids).logits;
        let mut st = m.start_decode();
        for (t, &id) in ids.iter().enumerate() {
            let step = m.decode_step(&mut st, id);
            for j in 0..13 {
                assert!((step[j] - full[[t, j]]).abs() < 1e-10, "t={t} j={j}");
            }
        }
        assert_eq!(st.len(), ids.len());
    }
}
