//! Fused classification and overlap losses over `[rows, classes]` logits.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Smoothing term of the soft Dice ratio; keeps empty-vs-empty at 1.
pub const SOFT_DICE_EPS: f64 = 1e-6;

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

fn check(op: &'static str, shape: &[usize], targets: &[usize]) -> Result<(usize, usize)> {
    let [n, c] = shape[..] else {
        return Err(Error::dim(op, format!("logits must be [rows, classes], got {shape:?}")));
    };
    if targets.len() != n {
        return Err(Error::dim(op, format!("{} targets for {n} rows", targets.len())));
    }
    if let Some(bad) = targets.iter().find(|&&t| t >= c) {
        return Err(Error::dim(op, format!("target class {bad} with {c} classes")));
    }
    Ok((n, c))
}

impl Tape {
    /// Mean softmax cross-entropy.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = check("cross_entropy_rows", self.shape(logits), targets)?;
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &lv[r * c..(r + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[targets[r]];
            softmax_row(row, &mut probs[r * c..(r + 1) * c]);
        }
        if !loss.is_finite() {
            return Err(Error::NumericInstability {
                op: "cross_entropy_rows".into(),
                detail: format!("loss is {loss}"),
            });
        }
        let targets = targets.to_vec();
        Ok(self.record(
            "cross_entropy_rows",
            Tensor::scalar(loss / n as f64),
            &[logits],
            move |g, _| {
                let scale = g[0] / n as f64;
                let mut gl = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * c + t] -= 1.0;
                }
                gl.iter_mut().for_each(|v| *v *= scale);
                vec![Some(gl)]
            },
        ))
    }

    /// `1 - mean_c softDice_c` over the foreground classes `1..C`, where
    /// `softDice_c = (2 sum p t + eps) / (sum p + sum t + eps)` on softmax
    /// probabilities `p` and one-hot targets `t`.
    pub fn soft_dice_loss(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, c) = check("soft_dice_loss", self.shape(logits), targets)?;
        if c < 2 {
            return Err(Error::dim("soft_dice_loss", "need at least one foreground class"));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; n * c];
        for r in 0..n {
            softmax_row(&lv[r * c..(r + 1) * c], &mut probs[r * c..(r + 1) * c]);
        }
        let fg = c - 1;
        let mut inter = vec![0.0; c];
        let mut union = vec![0.0; c];
        for r in 0..n {
            for k in 1..c {
                let p = probs[r * c + k];
                let t = f64::from(u8::from(targets[r] == k));
                inter[k] += p * t;
                union[k] += p + t;
            }
        }
        let dice: f64 = (1..c)
            .map(|k| (2.0 * inter[k] + SOFT_DICE_EPS) / (union[k] + SOFT_DICE_EPS))
            .sum::<f64>()
            / fg as f64;
        let targets = targets.to_vec();
        Ok(self.record(
            "soft_dice_loss",
            Tensor::scalar(1.0 - dice),
            &[logits],
            move |g, _| {
                let mut gl = vec![0.0; n * c];
                let mut gp = vec![0.0; c];
                for r in 0..n {
                    gp[0] = 0.0;
                    for k in 1..c {
                        let t = f64::from(u8::from(targets[r] == k));
                        let u = union[k] + SOFT_DICE_EPS;
                        let num = 2.0 * inter[k] + SOFT_DICE_EPS;
                        // d(loss)/dp = -(1/F) * d(dice_k)/dp
                        gp[k] = -g[0] / fg as f64 * (2.0 * t * u - num) / (u * u);
                    }
                    let p = &probs[r * c..(r + 1) * c];
                    let dot: f64 = p.iter().zip(&gp).map(|(a, b)| a * b).sum();
                    for k in 0..c {
                        gl[r * c + k] = p[k] * (gp[k] - dot);
                    }
                }
                vec![Some(gl)]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_cost_ln2_per_row() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(&[4, 2]));
        let ce = t.cross_entropy_rows(l, &[0, 1, 1, 0]).unwrap();
        assert!((t.value(ce).data()[0] - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_logits_are_nearly_free() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::from_rows(&[vec![20.0, 0.0], vec![0.0, 20.0]]).unwrap());
        let ce = t.cross_entropy_rows(l, &[0, 1]).unwrap();
        let dl = t.soft_dice_loss(l, &[0, 1]).unwrap();
        assert!(t.value(ce).data()[0] < 1e-8);
        assert!(t.value(dl).data()[0] < 1e-8);
    }

    #[test]
    fn dice_of_empty_prediction_and_target_is_perfect() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::from_rows(&[vec![40.0, 0.0], vec![40.0, 0.0]]).unwrap());
        let dl = t.soft_dice_loss(l, &[0, 0]).unwrap();
        assert!(t.value(dl).data()[0] < 1e-6);
    }

    #[test]
    fn bad_targets_are_rejected() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::zeros(&[2, 2]));
        assert!(t.cross_entropy_rows(l, &[0, 2]).is_err());
        assert!(t.soft_dice_loss(l, &[0]).is_err());
    }
}
