//! Brute-force oracles shared by the integration tests. Each one is written
//! from the definition, without going through the tape.

#![allow(dead_code)]

use metaroute::tmax::{TmaxBlock, LN_EPS};
use metaroute::{ParamStore, Tensor};

/// Plain softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.iter().map(|v| v / z).collect()
}

/// Indices of the available columns.
pub fn kept(avail: [bool; 4]) -> Vec<usize> {
    (0..4).filter(|&j| avail[j]).collect()
}

/// `a [p x q] * b [q x r]`, all row-major.
pub fn matmul(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        for k in 0..r {
            out[i * r + k] = (0..q).map(|j| a[i * q + j] * b[j * r + k]).sum();
        }
    }
    out
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// The attention block evaluated with K and V physically cut down to the
/// available rows and an ordinary softmax over what is left.
pub fn block_on_subset(store: &ParamStore, block: &TmaxBlock, q: &Tensor, k: &Tensor, v: &Tensor, avail: [bool; 4]) -> Tensor {
    let (n, d) = (q.shape()[0], q.shape()[1]);
    let rows = kept(avail);
    let m = rows.len();
    let kr: Vec<f64> = rows.iter().flat_map(|&j| k.row(j).to_vec()).collect();
    let vr: Vec<f64> = rows.iter().flat_map(|&j| v.row(j).to_vec()).collect();
    let gain = store.get(block.ln_gain).data();
    let bias = store.get(block.ln_bias).data();
    let w1 = store.get(block.ffn_w1);
    let h = w1.shape()[1];
    let b1 = store.get(block.ffn_b1).data();
    let w2 = store.get(block.ffn_w2).data();
    let b2 = store.get(block.ffn_b2).data();
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let qi = q.row(i);
        let scores: Vec<f64> = (0..m)
            .map(|r| (0..d).map(|c| qi[c] * kr[r * d + c]).sum::<f64>() / (d as f64).sqrt())
            .collect();
        let a = softmax(&scores);
        let e: Vec<f64> = (0..d).map(|c| qi[c] + (0..m).map(|r| a[r] * vr[r * d + c]).sum::<f64>()).collect();
        let mean = e.iter().sum::<f64>() / d as f64;
        let var = e.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / d as f64;
        let hn: Vec<f64> = (0..d).map(|c| (e[c] - mean) / (var + LN_EPS).sqrt() * gain[c] + bias[c]).collect();
        let hidden: Vec<f64> = (0..h)
            .map(|u| gelu((0..d).map(|c| hn[c] * w1.data()[c * h + u]).sum::<f64>() + b1[u]))
            .collect();
        for c in 0..d {
            out.push(hn[c] + (0..h).map(|u| hidden[u] * w2[u * d + c]).sum::<f64>() + b2[c]);
        }
    }
    Tensor::new(&[n, d], out).unwrap()
}

/// Count of valid kernel placements along one axis, by trying every start.
pub fn placements(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    let padded = extent as i64 + 2 * pad as i64;
    (0..padded)
        .step_by(stride)
        .filter(|&s| s + k as i64 <= padded)
        .count()
}

/// Textbook 3-D cross-correlation, `x [ci, d, h, w]`, `w [co, ci, k, k, k]`.
pub fn conv3d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (ci, ext) = (x.shape()[0], [x.shape()[1], x.shape()[2], x.shape()[3]]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let o: Vec<usize> = ext.iter().map(|&e| placements(e, k, stride, pad)).collect();
    let mut out = vec![0.0; co * o[0] * o[1] * o[2]];
    let mut idx = 0;
    for c in 0..co {
        for oz in 0..o[0] {
            for oy in 0..o[1] {
                for ox in 0..o[2] {
                    let mut s = 0.0;
                    for i in 0..ci {
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let z = (oz * stride + kz) as i64 - pad as i64;
                                    let y = (oy * stride + ky) as i64 - pad as i64;
                                    let xx = (ox * stride + kx) as i64 - pad as i64;
                                    let inside = |v: i64, e: usize| v >= 0 && (v as usize) < e;
                                    if inside(z, ext[0]) && inside(y, ext[1]) && inside(xx, ext[2]) {
                                        s += x.at(&[i, z as usize, y as usize, xx as usize]) * w.at(&[c, i, kz, ky, kx]);
                                    }
                                }
                            }
                        }
                    }
                    out[idx] = s;
                    idx += 1;
                }
            }
        }
    }
    Tensor::new(&[co, o[0], o[1], o[2]], out).unwrap()
}
