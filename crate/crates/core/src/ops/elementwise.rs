//! Elementwise arithmetic and activations.
//!
//! Binary ops broadcast over trailing dimensions only: the smaller operand's
//! shape must equal a suffix of the larger one's, and it is tiled across the
//! leading dimensions. `[B, C, H, W] + [W]` works, `[B, C] + [B, 1]` does not.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy)]
enum Side {
    Same,
    LeftBig,
    RightBig,
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Side)> {
    if a == b {
        return Ok((a.to_vec(), Side::Same));
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Ok((a.to_vec(), Side::LeftBig));
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok((b.to_vec(), Side::RightBig));
    }
    Err(Error::dim(
        op,
        format!("shapes {a:?} and {b:?} are not trailing-broadcastable"),
    ))
}

/// Sum a full-size gradient down onto a tiled operand of `n` elements.
fn reduce_tiled(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        out.iter_mut().zip(chunk).for_each(|(o, v)| *o += v);
    }
    out
}

pub fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, side) = broadcast("add", self.shape(a), self.shape(b))?;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let (na, nb) = (av.len(), bv.len());
        let n: usize = shape.iter().product();
        let out: Vec<f64> = (0..n).map(|i| av[i % na] + bv[i % nb]).collect();
        Ok(self.record("add", Tensor::from_vec(&shape, out), &[a, b], move |g, _| {
            let ga = match side {
                Side::RightBig => reduce_tiled(g, na),
                _ => g.to_vec(),
            };
            let gb = match side {
                Side::LeftBig => reduce_tiled(g, nb),
                _ => g.to_vec(),
            };
            vec![Some(ga), Some(gb)]
        }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, side) = broadcast("mul", self.shape(a), self.shape(b))?;
        let av = self.value(a).data().to_vec();
        let bv = self.value(b).data().to_vec();
        let (na, nb) = (av.len(), bv.len());
        let n: usize = shape.iter().product();
        let out: Vec<f64> = (0..n).map(|i| av[i % na] * bv[i % nb]).collect();
        Ok(self.record("mul", Tensor::from_vec(&shape, out), &[a, b], move |g, needs| {
            let ga = needs[0].then(|| {
                let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * bv[i % nb]).collect();
                match side {
                    Side::RightBig => reduce_tiled(&full, na),
                    _ => full,
                }
            });
            let gb = needs[1].then(|| {
                let full: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * av[i % na]).collect();
                match side {
                    Side::LeftBig => reduce_tiled(&full, nb),
                    _ => full,
                }
            });
            vec![ga, gb]
        }))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i] * k);
        self.record("scale", out, &[x], move |g, _| {
            vec![Some(g.iter().map(|v| v * k).collect())]
        })
    }

    pub fn add_scalar(&mut self, x: Var, k: f64) -> Var {
        let t = self.value(x);
        let out = Tensor::from_fn(t.shape(), |i| t.data()[i] + k);
        self.record("add_scalar", out, &[x], |g, _| vec![Some(g.to_vec())])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x).data().to_vec();
        // Never emits -0.0, so downstream zero-identities stay bit-exact.
        let out = Tensor::from_fn(self.shape(x), |i| if xv[i] > 0.0 { xv[i] } else { 0.0 });
        self.record("relu", out, &[x], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(&xv)
                    .map(|(gi, &v)| if v > 0.0 { *gi } else { 0.0 })
                    .collect(),
            )]
        })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x).data().to_vec();
        let out = Tensor::from_fn(self.shape(x), |i| gelu_scalar(xv[i]));
        self.record("gelu", out, &[x], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(&xv)
                    .map(|(gi, &v)| gi * gelu_grad_scalar(v))
                    .collect(),
            )]
        })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.value(x).sum();
        self.record("sum", Tensor::scalar(s), &[x], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Feature-wise affine modulation in residual form, `x + gamma*x + beta`.
    ///
    /// `x` is `[B, C, spatial...]`; `gamma` and `beta` are either `[C]`
    /// (shared by the batch) or `[B, C]` (one conditioning vector per sample).
    pub fn film(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::dim("film", format!("input {xs:?} needs [B, C, ...]")));
        }
        let (b, c) = (xs[0], xs[1]);
        let gs = self.shape(gamma).to_vec();
        if gs != self.shape(beta) {
            return Err(Error::dim(
                "film",
                format!("gamma {gs:?} and beta {:?} differ", self.shape(beta)),
            ));
        }
        let per_sample = match gs.as_slice() {
            [gc] if *gc == c => false,
            [gb, gc] if *gb == b && *gc == c => true,
            _ => {
                return Err(Error::dim(
                    "film",
                    format!("gamma {gs:?} does not match {c} channels of input {xs:?}"),
                ))
            }
        };
        let spatial: usize = xs[2..].iter().product();
        let xv = self.value(x).data().to_vec();
        let gv = self.value(gamma).data().to_vec();
        let bv = self.value(beta).data().to_vec();
        let param_index = move |bi: usize, ci: usize| if per_sample { bi * c + ci } else { ci };
        let mut out = vec![0.0; xv.len()];
        for bi in 0..b {
            for ci in 0..c {
                let k = param_index(bi, ci);
                let base = (bi * c + ci) * spatial;
                for s in 0..spatial {
                    let v = xv[base + s];
                    out[base + s] = v + gv[k] * v + bv[k];
                }
            }
        }
        let np = gv.len();
        Ok(self.record(
            "film",
            Tensor::from_vec(&xs, out),
            &[x, gamma, beta],
            move |g, _| {
                let mut gx = vec![0.0; xv.len()];
                let mut gg = vec![0.0; np];
                let mut gb = vec![0.0; np];
                for bi in 0..b {
                    for ci in 0..c {
                        let k = param_index(bi, ci);
                        let base = (bi * c + ci) * spatial;
                        for s in 0..spatial {
                            let gi = g[base + s];
                            gx[base + s] = gi * (1.0 + gv[k]);
                            gg[k] += gi * xv[base + s];
                            gb[k] += gi;
                        }
                    }
                }
                vec![Some(gx), Some(gg), Some(gb)]
            },
        ))
    }
}
