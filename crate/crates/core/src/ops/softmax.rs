//! Row softmax under an additive `{0, -inf}` mask.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Validate an additive mask: same shape as the logits, entries exactly
/// `0.0` or negative infinity, and at least one open column per row.
fn check_mask(logits: &[usize], mask: &Tensor) -> Result<()> {
    if mask.shape() != logits {
        return Err(Error::dim(
            "masked_softmax_rows",
            format!("mask {:?} vs logits {logits:?}", mask.shape()),
        ));
    }
    let cols = logits[1];
    for (r, row) in mask.data().chunks(cols).enumerate() {
        if let Some(bad) = row
            .iter()
            .find(|&&m| !(m == 0.0 || m == f64::NEG_INFINITY))
        {
            return Err(Error::dim(
                "masked_softmax_rows",
                format!("mask entry {bad} in row {r} is neither 0 nor -inf"),
            ));
        }
        if row.iter().all(|&m| m == f64::NEG_INFINITY) {
            return Err(Error::DegenerateMask { row: r });
        }
    }
    Ok(())
}

/// Forward pass on raw buffers. Masked entries are written as literal `0.0`
/// and never enter the max or the normaliser.
fn softmax_rows_raw(s: &[f64], mask: Option<&[f64]>, cols: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; s.len()];
    for (r, (row, orow)) in s.chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
        let open = |j: usize| mask.is_none_or(|m| m[r * cols + j] == 0.0);
        let max = (0..cols)
            .filter(|&j| open(j))
            .map(|j| row[j])
            .fold(f64::NEG_INFINITY, f64::max);
        if !max.is_finite() {
            return Err(Error::NumericInstability {
                op: "masked_softmax_rows".into(),
                detail: format!("row {r} has non-finite logits"),
            });
        }
        let mut z = 0.0;
        for j in 0..cols {
            if open(j) {
                let e = (row[j] - max).exp();
                orow[j] = e;
                z += e;
            }
        }
        for j in 0..cols {
            if open(j) {
                orow[j] /= z;
            }
        }
    }
    Ok(out)
}

/// Masked row softmax without a tape.
pub fn masked_softmax(s: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if s.rank() != 2 {
        return Err(Error::dim(
            "masked_softmax_rows",
            format!("logits must be rank 2, got {:?}", s.shape()),
        ));
    }
    check_mask(s.shape(), mask)?;
    let out = softmax_rows_raw(s.data(), Some(mask.data()), s.shape()[1])?;
    Ok(Tensor::from_vec(s.shape(), out))
}

fn softmax_backward(a: &[f64], g: &[f64], cols: usize) -> Vec<f64> {
    let mut gs = vec![0.0; a.len()];
    for ((arow, grow), srow) in a.chunks(cols).zip(g.chunks(cols)).zip(gs.chunks_mut(cols)) {
        let dot: f64 = arow.iter().zip(grow).map(|(x, y)| x * y).sum();
        for j in 0..cols {
            srow[j] = arow[j] * (grow[j] - dot);
        }
    }
    gs
}

impl Tape {
    /// `softmax(s + mask)` row by row. The mask is a constant; masked
    /// outputs are exactly zero and receive exactly zero gradient.
    pub fn masked_softmax_rows(&mut self, s: Var, mask: &Tensor) -> Result<Var> {
        let shape = self.shape(s).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim(
                "masked_softmax_rows",
                format!("logits must be rank 2, got {shape:?}"),
            ));
        }
        check_mask(&shape, mask)?;
        let cols = shape[1];
        let a = softmax_rows_raw(self.value(s).data(), Some(mask.data()), cols)?;
        let saved = a.clone();
        Ok(self.record(
            "masked_softmax_rows",
            Tensor::from_vec(&shape, a),
            &[s],
            move |g, _| vec![Some(softmax_backward(&saved, g, cols))],
        ))
    }

    pub fn softmax_rows(&mut self, s: Var) -> Result<Var> {
        let shape = self.shape(s).to_vec();
        if shape.len() != 2 {
            return Err(Error::dim("softmax_rows", format!("rank 2 expected, got {shape:?}")));
        }
        let cols = shape[1];
        let a = softmax_rows_raw(self.value(s).data(), None, cols)?;
        let saved = a.clone();
        Ok(self.record("softmax_rows", Tensor::from_vec(&shape, a), &[s], move |g, _| {
            vec![Some(softmax_backward(&saved, g, cols))]
        }))
    }
}
