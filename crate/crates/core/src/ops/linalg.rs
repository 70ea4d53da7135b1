//! Matrix products and shape manipulation.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Plain `[p, q] x [q, r]` product on raw buffers.
pub fn matmul_raw(a: &[f64], b: &[f64], p: usize, q: usize, r: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * r];
    for i in 0..p {
        let orow = &mut out[i * r..(i + 1) * r];
        for k in 0..q {
            let aik = a[i * q + k];
            let brow = &b[k * r..(k + 1) * r];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    out
}

pub fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(Error::dim(op, format!("expected a rank-2 tensor, got {shape:?}"))),
    }
}

impl Tape {
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = rank2("matmul", self.shape(a))?;
        let (q2, r) = rank2("matmul", self.shape(b))?;
        if q != q2 {
            return Err(Error::dim(
                "matmul",
                format!(
                    "inner dimensions differ: {:?} x {:?}",
                    self.shape(a),
                    self.shape(b)
                ),
            ));
        }
        let av = self.value(a).data().to_vec();
        let bv = self.value(b).data().to_vec();
        let out = matmul_raw(&av, &bv, p, q, r);
        Ok(self.record(
            "matmul",
            Tensor::from_vec(&[p, r], out),
            &[a, b],
            move |g, needs| {
                // dA = G B^T, dB = A^T G
                let ga = needs[0].then(|| matmul_raw(g, &transpose_raw(&bv, q, r), p, r, q));
                let gb = needs[1].then(|| matmul_raw(&transpose_raw(&av, p, q), g, q, p, r));
                vec![ga, gb]
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = rank2("transpose", self.shape(x))?;
        let out = transpose_raw(self.value(x).data(), r, c);
        Ok(self.record("transpose", Tensor::from_vec(&[c, r], out), &[x], move |g, _| {
            vec![Some(transpose_raw(g, c, r))]
        }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.record("reshape", out, &[x], |g, _| vec![Some(g.to_vec())]))
    }

    /// Concatenate along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let same_rank = s.len() == base.len();
            let others_agree = same_rank
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !others_agree {
                return Err(Error::dim("concat", format!("{s:?} vs {base:?} on axis {axis}")));
            }
            widths.push(s[axis]);
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total: usize = widths.iter().sum();
        let mut shape = base.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * w * inner..(o + 1) * w * inner]);
            }
        }
        Ok(self.record("concat", Tensor::from_vec(&shape, out), parts, move |g, _| {
            let mut grads: Vec<Vec<f64>> = widths
                .iter()
                .map(|w| Vec::with_capacity(outer * w * inner))
                .collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &w) in grads.iter_mut().zip(&widths) {
                    gp.extend_from_slice(&g[off..off + w * inner]);
                    off += w * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        }))
    }

    /// Select rows of a rank-2 table, e.g. embedding lookup.
    pub fn gather_rows(&mut self, table: Var, rows: &[usize]) -> Result<Var> {
        let (n, c) = rank2("gather_rows", self.shape(table))?;
        if let Some(bad) = rows.iter().find(|&&r| r >= n) {
            return Err(Error::dim("gather_rows", format!("row {bad} of a {n}-row table")));
        }
        if rows.is_empty() {
            return Err(Error::dim("gather_rows", "no rows selected"));
        }
        let tv = self.value(table).data();
        let out: Vec<f64> = rows
            .iter()
            .flat_map(|&r| tv[r * c..(r + 1) * c].iter().copied())
            .collect();
        let rows = rows.to_vec();
        Ok(self.record(
            "gather_rows",
            Tensor::from_vec(&[rows.len(), c], out),
            &[table],
            move |g, _| {
                let mut gt = vec![0.0; n * c];
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        gt[r * c + j] += g[i * c + j];
                    }
                }
                vec![Some(gt)]
            },
        ))
    }

    /// Columns `start..start + len` of a rank-2 tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = rank2("slice_cols", self.shape(x))?;
        if len == 0 || start + len > c {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} of a {c}-column tensor", start + len),
            ));
        }
        let xv = self.value(x).data();
        let out: Vec<f64> = (0..r)
            .flat_map(|i| xv[i * c + start..i * c + start + len].iter().copied())
            .collect();
        Ok(self.record("slice_cols", Tensor::from_vec(&[r, len], out), &[x], move |g, _| {
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                gx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            vec![Some(gx)]
        }))
    }

    /// `x W + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }
}
