//! Straight-line reference forward pass of the toy transformer, written with
//! nalgebra over whole-sequence matrices. Shares nothing with the library
//! beyond the raw weights.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use retap_core::linalg::Matrix;
use retap_core::toy::{ToyConfig, ToyWeights};

pub struct Trace {
    /// Residual stream after the attention branch of layer `l` at index `l - 1`.
    pub after_attn: Vec<DMatrix<f64>>,
    /// Index 0 is the embedding stream, index `l` the stream after layer `l`.
    pub after_mlp: Vec<DMatrix<f64>>,
    /// Logits at the last position.
    pub logits: DVector<f64>,
}

impl Trace {
    /// Residual state `(layer, is_attn)` at `pos`.
    pub fn state(&self, layer: usize, attn: bool, pos: usize) -> Vec<f64> {
        let m = if attn { &self.after_attn[layer - 1] } else { &self.after_mlp[layer] };
        m.row(pos).iter().copied().collect()
    }

    pub fn last(&self, layer: usize, attn: bool) -> Vec<f64> {
        self.state(layer, attn, self.after_mlp[0].nrows() - 1)
    }

    pub fn argmax(&self) -> usize {
        let max = self.logits.max();
        self.logits.iter().position(|&z| z == max).unwrap()
    }
}

pub fn to_dmatrix(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows, m.cols, &m.data)
}

/// ASCII bytes map to themselves, everything else to 0x7F.
pub fn byte_tokens(text: &str) -> Vec<u32> {
    text.bytes().map(|b| if b < 128 { u32::from(b) } else { 0x7F }).collect()
}

fn rms_rows(x: &DMatrix<f64>, gain: &[f64]) -> DMatrix<f64> {
    let mut out = x.clone();
    for mut row in out.row_iter_mut() {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = (ms + 1e-6).sqrt().recip();
        for (v, g) in row.iter_mut().zip(gain) {
            *v *= inv * g;
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn forward(config: &ToyConfig, weights: &ToyWeights, ids: &[u32]) -> Trace {
    let n = ids.len();
    let d = config.hidden;
    let hd = d / config.heads;
    let emb = to_dmatrix(&weights.token_embedding);
    let mut x = DMatrix::from_fn(n, d, |i, j| {
        let freq = 10_000f64.powf(-((2 * (j / 2)) as f64) / d as f64);
        let angle = i as f64 * freq;
        emb[(ids[i] as usize, j)] + 0.3 * if j % 2 == 0 { angle.sin() } else { angle.cos() }
    });

    let mut after_attn = Vec::new();
    let mut after_mlp = vec![x.clone()];
    for layer in &weights.layers {
        let normed = rms_rows(&x, &layer.attn_norm);
        let q = &normed * to_dmatrix(&layer.wq).transpose();
        let k = &normed * to_dmatrix(&layer.wk).transpose();
        let v = &normed * to_dmatrix(&layer.wv).transpose();
        let mut mixed = DMatrix::zeros(n, d);
        for h in 0..config.heads {
            let qh = q.columns(h * hd, hd);
            let kh = k.columns(h * hd, hd);
            let vh = v.columns(h * hd, hd);
            let mut scores = qh * kh.transpose() / (hd as f64).sqrt();
            for i in 0..n {
                for j in i + 1..n {
                    scores[(i, j)] = f64::NEG_INFINITY;
                }
                let mut row = scores.row_mut(i);
                let max = row.max();
                row.apply(|s| *s = (*s - max).exp());
                let total = row.sum();
                row /= total;
            }
            mixed.columns_mut(h * hd, hd).copy_from(&(scores * vh));
        }
        x += mixed * to_dmatrix(&layer.wo).transpose();
        after_attn.push(x.clone());

        let normed = rms_rows(&x, &layer.mlp_norm);
        let mut up = normed * to_dmatrix(&layer.w_up).transpose();
        for mut row in up.row_iter_mut() {
            for (u, b) in row.iter_mut().zip(&layer.b_up) {
                *u = gelu(*u + b);
            }
        }
        x += up * to_dmatrix(&layer.w_down).transpose();
        after_mlp.push(x.clone());
    }

    let last = rms_rows(&x.rows(n - 1, 1).into_owned(), &weights.final_norm);
    let logits = to_dmatrix(&weights.lm_head) * last.transpose();
    Trace { after_attn, after_mlp, logits: logits.column(0).into_owned() }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let a = DVector::from_column_slice(a);
    let b = DVector::from_column_slice(b);
    a.dot(&b) / (a.norm() * b.norm())
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
