use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Per-row normalisation of `x: [N, D]` with population variance, then
    /// `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let [n, d] = shape[..] else {
            return Err(Error::dim("layer_norm", format!("rank 2 expected, got {shape:?}")));
        };
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gain {:?} / bias {:?} must be [{d}]",
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        if eps <= 0.0 {
            return Err(Error::config("eps", "layer_norm eps must be positive"));
        }
        let xv = self.value(x).data();
        let gv = self.value(gain).data().to_vec();
        let bv = self.value(bias).data();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        Ok(self.record(
            "layer_norm",
            Tensor::from_vec(&shape, out),
            &[x, gain, bias],
            move |g, needs| {
                let mut gx = vec![0.0; n * d];
                let mut gg = vec![0.0; d];
                let mut gb = vec![0.0; d];
                for r in 0..n {
                    let grow = &g[r * d..(r + 1) * d];
                    let hrow = &xhat[r * d..(r + 1) * d];
                    for j in 0..d {
                        gg[j] += grow[j] * hrow[j];
                        gb[j] += grow[j];
                    }
                    if needs[0] {
                        let dh: Vec<f64> = (0..d).map(|j| grow[j] * gv[j]).collect();
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            gx[r * d + j] = inv_std[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                }
                vec![needs[0].then_some(gx), Some(gg), Some(gb)]
            },
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ln(x: Tensor, gain: Tensor, bias: Tensor, eps: f64) -> Tensor {
        let mut t = Tape::new();
        let (x, g, b) = (t.constant(x), t.constant(gain), t.constant(bias));
        let y = t.layer_norm(x, g, b, eps).unwrap();
        t.value(y).clone()
    }

    #[test]
    fn constant_row_maps_to_zero() {
        let y = ln(Tensor::ones(&[1, 4]), Tensor::ones(&[4]), Tensor::zeros(&[4]), 1e-5);
        assert_eq!(y.data(), &[0.0; 4]);
    }

    #[test]
    fn symmetric_pair_is_already_normalised() {
        let y = ln(
            Tensor::from_vec(&[1, 2], vec![-1.0, 1.0]),
            Tensor::ones(&[2]),
            Tensor::zeros(&[2]),
            1e-12,
        );
        assert!((y.data()[0] + 1.0).abs() < 1e-9);
        assert!((y.data()[1] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn zero_gain_leaves_bias() {
        let x = Tensor::from_fn(&[3, 5], |i| (i as f64).sin());
        let y = ln(x, Tensor::zeros(&[5]), Tensor::full(&[5], 7.0), 1e-5);
        assert!(y.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn rejects_bad_gain_shape() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::ones(&[2, 3]));
        let g = t.constant(Tensor::ones(&[2]));
        let b = t.constant(Tensor::ones(&[3]));
        assert!(t.layer_norm(x, g, b, 1e-5).is_err());
    }
}
