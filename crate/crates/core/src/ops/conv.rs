//! Direct-loop convolutions, nearest upsampling and global pooling.
//!
//! Convolutions use cross-correlation semantics with zero padding. Along
//! each axis the output extent is `floor((in + 2*pad - k) / stride) + 1`.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Output extent along one axis, or `None` when the kernel never fits.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if kernel == 0 || stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    batch: usize,
    cin: usize,
    cout: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    output: [usize; 3],
}

impl Geom {
    fn in_len(&self) -> usize {
        self.input.iter().product()
    }

    fn out_len(&self) -> usize {
        self.output.iter().product()
    }

    fn k_len(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Visit every contiguous run of contributing taps. For a run,
    /// `(out_start, in_start, len, w_idx)` means outputs
    /// `out_start..out_start + len` read inputs `in_start + j * stride_w`.
    #[inline]
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [id, ih, iw] = self.input;
        let [od, oh, ow] = self.output;
        let [kd, kh, kw] = self.kernel;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.pad;
        // Valid output range along x for each kernel column.
        let x_ranges: Vec<(usize, usize)> = (0..kw)
            .map(|x| {
                let lo = if pw > x { (pw - x).div_ceil(sw) } else { 0 };
                let hi = if iw + pw > x { ((iw + pw - x - 1) / sw + 1).min(ow) } else { 0 };
                (lo, hi.max(lo))
            })
            .collect();
        for b in 0..self.batch {
            for co in 0..self.cout {
                let out_base = (b * self.cout + co) * self.out_len();
                for ci in 0..self.cin {
                    let in_base = (b * self.cin + ci) * self.in_len();
                    let w_base = (co * self.cin + ci) * self.k_len();
                    for z in 0..kd {
                        for y in 0..kh {
                            for (x, &(lo, hi)) in x_ranges.iter().enumerate() {
                                if lo >= hi {
                                    continue;
                                }
                                let w_idx = w_base + (z * kh + y) * kw + x;
                                for oz in 0..od {
                                    let iz = (oz * sd + z) as isize - pd as isize;
                                    if iz < 0 || iz >= id as isize {
                                        continue;
                                    }
                                    for oy in 0..oh {
                                        let iy = (oy * sh + y) as isize - ph as isize;
                                        if iy < 0 || iy >= ih as isize {
                                            continue;
                                        }
                                        let in_row = in_base + (iz as usize * ih + iy as usize) * iw;
                                        let out_row = out_base + (oz * oh + oy) * ow;
                                        f(out_row + lo, in_row + lo * sw + x - pw, hi - lo, w_idx);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tape {
    /// 3-D convolution of `x: [B, Cin, D, H, W]` with `w: [Cout, Cin, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[b, cin, d, h, wd], &[cout, wcin, kd, kh, kw]) = (&xs[..], &ws[..]) else {
            return Err(Error::dim(
                "conv3d",
                format!("expected rank-5 input and kernel, got {xs:?} and {ws:?}"),
            ));
        };
        self.conv_impl("conv3d", x, w, bias, [b, cin, cout, wcin], [d, h, wd], [kd, kh, kw], [stride; 3], [pad; 3])
    }

    /// 2-D convolution of `x: [B, Cin, H, W]` with `w: [Cout, Cin, k, k]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (&[b, cin, h, wd], &[cout, wcin, kh, kw]) = (&xs[..], &ws[..]) else {
            return Err(Error::dim(
                "conv2d",
                format!("expected rank-4 input and kernel, got {xs:?} and {ws:?}"),
            ));
        };
        let y = self.conv_impl(
            "conv2d",
            x,
            w,
            bias,
            [b, cin, cout, wcin],
            [1, h, wd],
            [1, kh, kw],
            [1, stride, stride],
            [0, pad, pad],
        )?;
        let ys = self.shape(y).to_vec();
        // The depth axis is a unit dimension; drop it without a tape node.
        let out = self.value(y).reshape(&[ys[0], ys[1], ys[3], ys[4]])?;
        Ok(self.record("conv2d_view", out, &[y], |g, _| vec![Some(g.to_vec())]))
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_impl(
        &mut self,
        op: &'static str,
        x: Var,
        w: Var,
        bias: Option<Var>,
        [batch, cin, cout, wcin]: [usize; 4],
        input: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Var> {
        if cin != wcin {
            return Err(Error::dim(
                op,
                format!("input has {cin} channels, kernel expects {wcin}"),
            ));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv_output_extent(input[a], kernel[a], stride[a], pad[a]).ok_or_else(|| {
                Error::dim(
                    op,
                    format!(
                        "kernel {:?} larger than padded input {:?} (pad {:?})",
                        kernel, input, pad
                    ),
                )
            })?;
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(Error::dim(op, format!("bias {:?} must be [{cout}]", self.shape(bv))));
            }
        }
        let geom = Geom {
            batch,
            cin,
            cout,
            input,
            kernel,
            stride,
            pad,
            output,
        };
        let xv = self.value(x).data().to_vec();
        let wv = self.value(w).data().to_vec();
        let mut out = vec![0.0; batch * cout * geom.out_len()];
        let sw = geom.stride[2];
        geom.for_each_run(|o, i, n, k| {
            let wk = wv[k];
            let dst = &mut out[o..o + n];
            if sw == 1 {
                dst.iter_mut().zip(&xv[i..i + n]).for_each(|(d, s)| *d += wk * s);
            } else {
                dst.iter_mut().enumerate().for_each(|(j, d)| *d += wk * xv[i + j * sw]);
            }
        });
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for (c, chunk) in out.chunks_mut(geom.out_len()).enumerate() {
                let bc = bd[c % cout];
                chunk.iter_mut().for_each(|v| *v += bc);
            }
        }
        let shape = [batch, cout, output[0], output[1], output[2]];
        let mut parents = vec![x, w];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.record(op, Tensor::from_vec(&shape, out), &parents, move |g, needs| {
            let mut gx = needs[0].then(|| vec![0.0; xv.len()]);
            let mut gw = needs[1].then(|| vec![0.0; wv.len()]);
            let sw = geom.stride[2];
            if let Some(gx) = &mut gx {
                geom.for_each_run(|o, i, n, k| {
                    let wk = wv[k];
                    let src = &g[o..o + n];
                    if sw == 1 {
                        gx[i..i + n].iter_mut().zip(src).for_each(|(d, s)| *d += wk * s);
                    } else {
                        src.iter().enumerate().for_each(|(j, s)| gx[i + j * sw] += wk * s);
                    }
                });
            }
            if let Some(gw) = &mut gw {
                geom.for_each_run(|o, i, n, k| {
                    let src = &g[o..o + n];
                    let acc: f64 = if sw == 1 {
                        src.iter().zip(&xv[i..i + n]).map(|(a, b)| a * b).sum()
                    } else {
                        src.iter().enumerate().map(|(j, a)| a * xv[i + j * sw]).sum()
                    };
                    gw[k] += acc;
                });
            }
            let mut grads = vec![gx, gw];
            if has_bias {
                let mut gb = vec![0.0; cout];
                for (c, chunk) in g.chunks(geom.out_len()).enumerate() {
                    gb[c % cout] += chunk.iter().sum::<f64>();
                }
                grads.push(Some(gb));
            }
            grads
        }))
    }

    /// Nearest-neighbour upsampling of `[B, C, D, H, W]` by an integer factor.
    pub fn upsample3d(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let [b, c, d, h, w] = xs[..] else {
            return Err(Error::dim("upsample3d", format!("rank 5 expected, got {xs:?}")));
        };
        if factor == 0 {
            return Err(Error::dim("upsample3d", "factor must be positive"));
        }
        let (od, oh, ow) = (d * factor, h * factor, w * factor);
        let src_index = move |bc: usize, z: usize, y: usize, xx: usize| {
            ((bc * d + z / factor) * h + y / factor) * w + xx / factor
        };
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * od * oh * ow);
        for bc in 0..b * c {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        out.push(xv[src_index(bc, z, y, xx)]);
                    }
                }
            }
        }
        let n_in = xv.len();
        Ok(self.record(
            "upsample3d",
            Tensor::from_vec(&[b, c, od, oh, ow], out),
            &[x],
            move |g, _| {
                let mut gx = vec![0.0; n_in];
                let mut k = 0;
                for bc in 0..b * c {
                    for z in 0..od {
                        for y in 0..oh {
                            for xx in 0..ow {
                                gx[src_index(bc, z, y, xx)] += g[k];
                                k += 1;
                            }
                        }
                    }
                }
                vec![Some(gx)]
            },
        ))
    }

    /// Mean over all spatial positions: `[B, C, ...] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 3 {
            return Err(Error::dim("global_avg_pool", format!("need [B, C, ...], got {xs:?}")));
        }
        let (b, c) = (xs[0], xs[1]);
        let spatial: usize = xs[2..].iter().product();
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(spatial)
            .map(|ch| ch.iter().sum::<f64>() / spatial as f64)
            .collect();
        Ok(self.record(
            "global_avg_pool",
            Tensor::from_vec(&[b, c], out),
            &[x],
            move |g, _| {
                let inv = 1.0 / spatial as f64;
                vec![Some(g.iter().flat_map(|&gi| std::iter::repeat_n(gi * inv, spatial)).collect())]
            },
        ))
    }
}
