//! Differentiable operations.
//!
//! Each op validates shapes, computes its forward value, and registers a
//! backward closure that accumulates vector-Jacobian products into its
//! parents. Conventions:
//! - images/features are `[C, H, W]` row-major, plain matrices `[R, C]`,
//!   vectors `[N]`, scalars `[1]`,
//! - `conv2d` is cross-correlation (kernels are not flipped) with zero
//!   padding; reflect padding is a separate op,
//! - reductions return `[1]` tensors.

use super::{BackwardFn, Real, Tensor};
use crate::error::{Error, Result};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn expect_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(Error::Shape {
            op,
            detail: format!("expected rank {rank}, got shape {:?}", t.shape()),
        });
    }
    Ok(())
}

/// `x^p` with signed integer-exponent semantics: for integral `p` the
/// power is computed sign-correctly for negative bases; for fractional
/// `p` a negative base yields NaN (caught by the debug finiteness scan).
fn powr(x: Real, p: Real) -> Real {
    if p.fract() == 0.0 && p.abs() <= i32::MAX as Real {
        x.powi(p as i32)
    } else {
        x.powf(p)
    }
}

impl Tensor {
    // ── Elementwise binary ──────────────────────────────────────────

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("add", self, rhs)?;
        let data = self.data().iter().zip(rhs.data()).map(|(a, b)| a + b).collect();
        let (a, b) = (self.clone(), rhs.clone());
        let bw: BackwardFn = Box::new(move |g| {
            a.accumulate_grad(g);
            b.accumulate_grad(g);
        });
        Ok(Tensor::from_op(
            "add",
            data,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            bw,
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, rhs)?;
        let data = self.data().iter().zip(rhs.data()).map(|(a, b)| a - b).collect();
        let (a, b) = (self.clone(), rhs.clone());
        let bw: BackwardFn = Box::new(move |g| {
            a.accumulate_grad(g);
            let neg: Vec<Real> = g.iter().map(|v| -v).collect();
            b.accumulate_grad(&neg);
        });
        Ok(Tensor::from_op(
            "sub",
            data,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            bw,
        ))
    }

    /// Hadamard product.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, rhs)?;
        let data = self.data().iter().zip(rhs.data()).map(|(a, b)| a * b).collect();
        let (a, b) = (self.clone(), rhs.clone());
        let bw: BackwardFn = Box::new(move |g| {
            let ga: Vec<Real> = g.iter().zip(b.data()).map(|(gi, bi)| gi * bi).collect();
            let gb: Vec<Real> = g.iter().zip(a.data()).map(|(gi, ai)| gi * ai).collect();
            a.accumulate_grad(&ga);
            b.accumulate_grad(&gb);
        });
        Ok(Tensor::from_op(
            "mul",
            data,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            bw,
        ))
    }

    // ── Scalar broadcasting ─────────────────────────────────────────

    pub fn scale(&self, s: Real) -> Tensor {
        let data = self.data().iter().map(|v| v * s).collect();
        let a = self.clone();
        let bw: BackwardFn = Box::new(move |g| {
            let ga: Vec<Real> = g.iter().map(|v| v * s).collect();
            a.accumulate_grad(&ga);
        });
        Tensor::from_op("scale", data, self.shape().to_vec(), vec![self.clone()], bw)
    }

    pub fn add_scalar(&self, s: Real) -> Tensor {
        let data = self.data().iter().map(|v| v + s).collect();
        let a = self.clone();
        let bw: BackwardFn = Box::new(move |g| a.accumulate_grad(g));
        Tensor::from_op("add_scalar", data, self.shape().to_vec(), vec![self.clone()], bw)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    // ── Elementwise unary ───────────────────────────────────────────

    pub fn sigmoid(&self) -> Tensor {
        let data: Vec<Real> = self.data().iter().map(|&x| stable_sigmoid(x)).collect();
        let y = data.clone();
        let a = self.clone();
        let bw: BackwardFn = Box::new(move |g| {
            let ga: Vec<Real> = g
                .iter()
                .zip(&y)
                .map(|(gi, yi)| gi * yi * (1.0 - yi))
                .collect();
            a.accumulate_grad(&ga);
        });
        Tensor::from_op("sigmoid", data, self.shape().to_vec(), vec![self.clone()], bw)
    }

    pub fn relu(&self) -> Tensor {
        let data = self.data().iter().map(|&x| x.max(0.0)).collect();
        let a = self.clone();
        let bw: BackwardFn = Box::new(move |g| {
            let ga: Vec<Real> = g
                .iter()
                .zip(a.data())
                .map(|(gi, &xi)| if xi > 0.0 { *gi } else { 0.0 })
                .collect();
            a.accumulate_grad(&ga);
        });
        Tensor::from_op("relu", data, self.shape().to_vec(), vec![self.clone()], bw)
    }

    pub fn leaky_relu(&self, slope: Real) -> Tensor {
        let data = self
            .data()
            .iter()
            .map(|&x| if x > 0.0 { x } else { slope * x })
            .collect();
        let a = self.clone();
        let bw: BackwardFn = Box::new(move |g| {
            let ga: Vec<Real> = g
                .iter()
                .zip(a.data())
                .map(|(gi, &xi)| if xi > 0.0 { *gi } else { slope * gi })
                .collect();
            a.accumulate_grad(&ga);
        });
        Tensor::from_op("leaky_relu", data, self.shape().to_vec(), vec![self.clone()], bw)
    }

    /// Absolute value; subgradient 0 at the kink.
    pub fn abs(&self) -> Tensor {
        let data = self.data().iter().map(|v| v.abs()).collect();
        let a = self.clone();
        let bw: BackwardFn = Box::new(move |g| {
            let ga: Vec<Real> = g
                .iter()
                .zip(a.data())
                .map(|(gi, &xi)| {
                    if xi > 0.0 {
                        *gi
                    } else if xi < 0.0 {
                        -gi
                    } else {
                        0.0
                    }
                })
                .collect();
            a.accumulate_grad(&ga);
        });
        Tensor::from_op("abs", data, self.shape().to_vec(), vec![self.clone()], bw)
    }

    /// Elementwise power with a fixed exponent. Integral exponents are
    /// computed sign-correctly for negative bases.
    pub fn powf(&self, p: Real) -> Tensor {
        let data = self.data().iter().map(|&x| powr(x, p)).collect();
        let a = self.clone();
        let bw: BackwardFn = Box::new(move |g| {
            let ga: Vec<Real> = g
                .iter()
                .zip(a.data())
                .map(|(gi, &xi)| gi * p * powr(xi, p - 1.0))
                .collect();
            a.accumulate_grad(&ga);
        });
        Tensor::from_op("powf", data, self.shape().to_vec(), vec![self.clone()], bw)
    }

    // ── Reductions ──────────────────────────────────────────────────

    pub fn sum(&self) -> Tensor {
        let s: Real = self.data().iter().sum();
        let a = self.clone();
        let n = self.numel();
        let bw: BackwardFn = Box::new(move |g| {
            a.accumulate_grad(&vec![g[0]; n]);
        });
        Tensor::from_op("sum", vec![s], vec![1], vec![self.clone()], bw)
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let m: Real = self.data().iter().sum::<Real>() / n as Real;
        let a = self.clone();
        let bw: BackwardFn = Box::new(move |g| {
            a.accumulate_grad(&vec![g[0] / n as Real; n]);
        });
        Tensor::from_op("mean", vec![m], vec![1], vec![self.clone()], bw)
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// Affine map `w @ x + b` for `x: [n]`, `w: [m, n]`, `b: [m]`.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        expect_rank("linear", self, 1)?;
        expect_rank("linear", w, 2)?;
        let n = self.shape()[0];
        let (m, wn) = (w.shape()[0], w.shape()[1]);
        if wn != n {
            return Err(Error::Shape {
                op: "linear",
                detail: format!("weight [{m}, {wn}] incompatible with input [{n}]"),
            });
        }
        if let Some(b) = b {
            if b.shape() != [m] {
                return Err(Error::Shape {
                    op: "linear",
                    detail: format!("bias shape {:?}, expected [{m}]", b.shape()),
                });
            }
        }
        let mut out = vec![0.0; m];
        for i in 0..m {
            let mut acc = match b {
                Some(b) => b.data()[i],
                None => 0.0,
            };
            let row = &w.data()[i * n..(i + 1) * n];
            for (wv, xv) in row.iter().zip(self.data()) {
                acc += wv * xv;
            }
            out[i] = acc;
        }
        let x = self.clone();
        let wt = w.clone();
        let bt = b.cloned();
        let mut parents = vec![self.clone(), w.clone()];
        if let Some(b) = b {
            parents.push(b.clone());
        }
        let bw: BackwardFn = Box::new(move |g| {
            let mut gx = vec![0.0; n];
            let mut gw = vec![0.0; m * n];
            for i in 0..m {
                let gi = g[i];
                let row = &wt.data()[i * n..(i + 1) * n];
                for j in 0..n {
                    gx[j] += row[j] * gi;
                    gw[i * n + j] = x.data()[j] * gi;
                }
            }
            x.accumulate_grad(&gx);
            wt.accumulate_grad(&gw);
            if let Some(b) = &bt {
                b.accumulate_grad(g);
            }
        });
        Ok(Tensor::from_op("linear", out, vec![m], parents, bw))
    }

    // ── Convolution ─────────────────────────────────────────────────

    /// 2-D cross-correlation: input `[Cin, H, W]`, kernel
    /// `[Cout, Cin, kh, kw]`, optional bias `[Cout]`, zero padding.
    ///
    /// Output spatial size per axis: `(len + 2*padding - dilation*(k-1) - 1) / stride + 1`.
    pub fn conv2d(
        &self,
        kernel: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Tensor> {
        expect_rank("conv2d", self, 3)?;
        expect_rank("conv2d", kernel, 4)?;
        if stride == 0 || dilation == 0 {
            return Err(Error::Config(
                "conv2d stride and dilation must be at least 1".into(),
            ));
        }
        let (cin, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (cout, kcin, kh, kw) = (
            kernel.shape()[0],
            kernel.shape()[1],
            kernel.shape()[2],
            kernel.shape()[3],
        );
        if kcin != cin {
            return Err(Error::Shape {
                op: "conv2d",
                detail: format!("kernel expects {kcin} input channels, input has {cin}"),
            });
        }
        if let Some(b) = bias {
            if b.shape() != [cout] {
                return Err(Error::Shape {
                    op: "conv2d",
                    detail: format!("bias shape {:?}, expected [{cout}]", b.shape()),
                });
            }
        }
        let hh = conv_out_len(h, kh, stride, padding, dilation).ok_or_else(|| {
            Error::Config(format!(
                "conv2d produces non-positive output height for input {h}, kernel {kh}, stride {stride}, padding {padding}, dilation {dilation}"
            ))
        })?;
        let ww = conv_out_len(w, kw, stride, padding, dilation).ok_or_else(|| {
            Error::Config(format!(
                "conv2d produces non-positive output width for input {w}, kernel {kw}, stride {stride}, padding {padding}, dilation {dilation}"
            ))
        })?;

        let mut out = vec![0.0; cout * hh * ww];
        if let Some(b) = bias {
            for co in 0..cout {
                let bv = b.data()[co];
                out[co * hh * ww..(co + 1) * hh * ww].fill(bv);
            }
        }
        {
            let x = self.data();
            let k = kernel.data();
            for co in 0..cout {
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = k[((co * cin + ci) * kh + ky) * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            let offy = (ky * dilation) as isize - padding as isize;
                            let offx = (kx * dilation) as isize - padding as isize;
                            let (ylo, yhi) = valid_out_range(h, stride, offy, hh);
                            let (xlo, xhi) = valid_out_range(w, stride, offx, ww);
                            for oy in ylo..yhi {
                                let iy = (oy * stride) as isize + offy;
                                let xrow = &x[(ci * h + iy as usize) * w..];
                                let orow = &mut out[(co * hh + oy) * ww..(co * hh + oy + 1) * ww];
                                for ox in xlo..xhi {
                                    let ix = (ox * stride) as isize + offx;
                                    orow[ox] += wv * xrow[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }

        let x = self.clone();
        let kt = kernel.clone();
        let bt = bias.cloned();
        let mut parents = vec![self.clone(), kernel.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let bw: BackwardFn = Box::new(move |g| {
            let need_gx = x.requires_grad();
            let need_gk = kt.requires_grad();
            let mut gx = if need_gx { vec![0.0; cin * h * w] } else { Vec::new() };
            let mut gk = if need_gk {
                vec![0.0; cout * cin * kh * kw]
            } else {
                Vec::new()
            };
            let xd = x.data();
            let kd = kt.data();
            for co in 0..cout {
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                            let wv = kd[widx];
                            let offy = (ky * dilation) as isize - padding as isize;
                            let offx = (kx * dilation) as isize - padding as isize;
                            let (ylo, yhi) = valid_out_range(h, stride, offy, hh);
                            let (xlo, xhi) = valid_out_range(w, stride, offx, ww);
                            let mut wacc = 0.0;
                            for oy in ylo..yhi {
                                let iy = ((oy * stride) as isize + offy) as usize;
                                let grow = &g[(co * hh + oy) * ww..(co * hh + oy + 1) * ww];
                                for ox in xlo..xhi {
                                    let ix = ((ox * stride) as isize + offx) as usize;
                                    let gv = grow[ox];
                                    if need_gx {
                                        gx[(ci * h + iy) * w + ix] += wv * gv;
                                    }
                                    if need_gk {
                                        wacc += xd[(ci * h + iy) * w + ix] * gv;
                                    }
                                }
                            }
                            if need_gk {
                                gk[widx] += wacc;
                            }
                        }
                    }
                }
            }
            if need_gx {
                x.accumulate_grad(&gx);
            }
            if need_gk {
                kt.accumulate_grad(&gk);
            }
            if let Some(b) = &bt {
                if b.requires_grad() {
                    let mut gb = vec![0.0; cout];
                    for co in 0..cout {
                        gb[co] = g[co * hh * ww..(co + 1) * hh * ww].iter().sum();
                    }
                    b.accumulate_grad(&gb);
                }
            }
        });
        Ok(Tensor::from_op(
            "conv2d",
            out,
            vec![cout, hh, ww],
            parents,
            bw,
        ))
    }

    // ── Shape ops ───────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::Shape {
                op: "reshape",
                detail: format!("cannot reshape {:?} to {:?}", self.shape(), shape),
            });
        }
        let a = self.clone();
        let bw: BackwardFn = Box::new(move |g| a.accumulate_grad(g));
        Ok(Tensor::from_op(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            bw,
        ))
    }

    /// Channel-axis concatenation of `[Ci, H, W]` tensors.
    pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("concat_channels of zero tensors".into()));
        }
        for p in parts {
            expect_rank("concat_channels", p, 3)?;
        }
        let (h, w) = (parts[0].shape()[1], parts[0].shape()[2]);
        let mut c_total = 0;
        for p in parts {
            if p.shape()[1] != h || p.shape()[2] != w {
                return Err(Error::Shape {
                    op: "concat_channels",
                    detail: format!("spatial dims differ: {:?} vs [{h}, {w}]", &p.shape()[1..]),
                });
            }
            c_total += p.shape()[0];
        }
        let mut data = Vec::with_capacity(c_total * h * w);
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let owned: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        let holders = owned.clone();
        let hw = h * w;
        let bw: BackwardFn = Box::new(move |g| {
            let mut off = 0;
            for p in &holders {
                let len = p.shape()[0] * hw;
                p.accumulate_grad(&g[off..off + len]);
                off += len;
            }
        });
        Ok(Tensor::from_op(
            "concat_channels",
            data,
            vec![c_total, h, w],
            owned,
            bw,
        ))
    }

    /// Tile a `[H, W]` map across `c` channels, giving `[c, H, W]`.
    pub fn broadcast_hw(&self, c: usize) -> Result<Tensor> {
        expect_rank("broadcast_hw", self, 2)?;
        let (h, w) = (self.shape()[0], self.shape()[1]);
        let hw = h * w;
        let mut data = Vec::with_capacity(c * hw);
        for _ in 0..c {
            data.extend_from_slice(self.data());
        }
        let a = self.clone();
        let bw: BackwardFn = Box::new(move |g| {
            let mut ga = vec![0.0; hw];
            for ch in 0..c {
                for i in 0..hw {
                    ga[i] += g[ch * hw + i];
                }
            }
            a.accumulate_grad(&ga);
        });
        Ok(Tensor::from_op(
            "broadcast_hw",
            data,
            vec![c, h, w],
            vec![self.clone()],
            bw,
        ))
    }

    /// Expand a per-channel vector `[C]` to `[C, h, w]`.
    pub fn expand_chw(&self, h: usize, w: usize) -> Result<Tensor> {
        expect_rank("expand_chw", self, 1)?;
        let c = self.shape()[0];
        let hw = h * w;
        let mut data = Vec::with_capacity(c * hw);
        for ch in 0..c {
            data.extend(std::iter::repeat(self.data()[ch]).take(hw));
        }
        let a = self.clone();
        let bw: BackwardFn = Box::new(move |g| {
            let mut ga = vec![0.0; c];
            for ch in 0..c {
                ga[ch] = g[ch * hw..(ch + 1) * hw].iter().sum();
            }
            a.accumulate_grad(&ga);
        });
        Ok(Tensor::from_op(
            "expand_chw",
            data,
            vec![c, h, w],
            vec![self.clone()],
            bw,
        ))
    }

    // ── Spatial ops ─────────────────────────────────────────────────

    /// Non-overlapping `k x k` average pooling with stride `k` on
    /// `[C, H, W]`; trailing rows/columns that do not fill a window are
    /// dropped (floor semantics).
    pub fn avg_pool2d(&self, k: usize) -> Result<Tensor> {
        expect_rank("avg_pool2d", self, 3)?;
        if k == 0 {
            return Err(Error::Config("avg_pool2d window must be at least 1".into()));
        }
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (hh, ww) = (h / k, w / k);
        if hh == 0 || ww == 0 {
            return Err(Error::Shape {
                op: "avg_pool2d",
                detail: format!("window {k} larger than input [{h}, {w}]"),
            });
        }
        let inv = 1.0 / (k * k) as Real;
        let mut out = vec![0.0; c * hh * ww];
        for ch in 0..c {
            for oy in 0..hh {
                for ox in 0..ww {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        for dx in 0..k {
                            acc += self.data()[(ch * h + oy * k + dy) * w + ox * k + dx];
                        }
                    }
                    out[(ch * hh + oy) * ww + ox] = acc * inv;
                }
            }
        }
        let a = self.clone();
        let bw: BackwardFn = Box::new(move |g| {
            let mut ga = vec![0.0; c * h * w];
            for ch in 0..c {
                for oy in 0..hh {
                    for ox in 0..ww {
                        let gv = g[(ch * hh + oy) * ww + ox] * inv;
                        for dy in 0..k {
                            for dx in 0..k {
                                ga[(ch * h + oy * k + dy) * w + ox * k + dx] += gv;
                            }
                        }
                    }
                }
            }
            a.accumulate_grad(&ga);
        });
        Ok(Tensor::from_op(
            "avg_pool2d",
            out,
            vec![c, hh, ww],
            vec![self.clone()],
            bw,
        ))
    }

    /// Nearest-neighbor 2x upsampling of `[C, H, W]`.
    pub fn upsample_nearest2x(&self) -> Result<Tensor> {
        expect_rank("upsample_nearest2x", self, 3)?;
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (hh, ww) = (h * 2, w * 2);
        let mut out = vec![0.0; c * hh * ww];
        for ch in 0..c {
            for y in 0..hh {
                for x in 0..ww {
                    out[(ch * hh + y) * ww + x] = self.data()[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        let a = self.clone();
        let bw: BackwardFn = Box::new(move |g| {
            let mut ga = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..hh {
                    for x in 0..ww {
                        ga[(ch * h + y / 2) * w + x / 2] += g[(ch * hh + y) * ww + x];
                    }
                }
            }
            a.accumulate_grad(&ga);
        });
        Ok(Tensor::from_op(
            "upsample_nearest2x",
            out,
            vec![c, hh, ww],
            vec![self.clone()],
            bw,
        ))
    }

    /// Symmetric reflect padding (edge value repeated) of `[C, H, W]` by
    /// `p` on every spatial side.
    pub fn reflect_pad2d(&self, p: usize) -> Result<Tensor> {
        expect_rank("reflect_pad2d", self, 3)?;
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (hh, ww) = (h + 2 * p, w + 2 * p);
        let mut out = vec![0.0; c * hh * ww];
        for ch in 0..c {
            for y in 0..hh {
                let iy = reflect_index(y as isize - p as isize, h);
                for x in 0..ww {
                    let ix = reflect_index(x as isize - p as isize, w);
                    out[(ch * hh + y) * ww + x] = self.data()[(ch * h + iy) * w + ix];
                }
            }
        }
        let a = self.clone();
        let bw: BackwardFn = Box::new(move |g| {
            let mut ga = vec![0.0; c * h * w];
            for ch in 0..c {
                for y in 0..hh {
                    let iy = reflect_index(y as isize - p as isize, h);
                    for x in 0..ww {
                        let ix = reflect_index(x as isize - p as isize, w);
                        ga[(ch * h + iy) * w + ix] += g[(ch * hh + y) * ww + x];
                    }
                }
            }
            a.accumulate_grad(&ga);
        });
        Ok(Tensor::from_op(
            "reflect_pad2d",
            out,
            vec![c, hh, ww],
            vec![self.clone()],
            bw,
        ))
    }

    /// Per-channel normalization of `[C, H, W]` to zero mean and unit
    /// variance (population statistics, `eps` inside the square root).
    /// Constant channels normalize to zero.
    pub fn instance_norm(&self, eps: Real) -> Result<Tensor> {
        expect_rank("instance_norm", self, 3)?;
        let (c, h, w) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let m = h * w;
        let mut out = vec![0.0; c * m];
        let mut scales = vec![0.0; c];
        for ch in 0..c {
            let xs = &self.data()[ch * m..(ch + 1) * m];
            let mu: Real = xs.iter().sum::<Real>() / m as Real;
            let var: Real = xs.iter().map(|x| (x - mu) * (x - mu)).sum::<Real>() / m as Real;
            let s = (var + eps).sqrt();
            scales[ch] = s;
            for (o, x) in out[ch * m..(ch + 1) * m].iter_mut().zip(xs) {
                *o = (x - mu) / s;
            }
        }
        let yhat = out.clone();
        let a = self.clone();
        let bw: BackwardFn = Box::new(move |g| {
            let mut ga = vec![0.0; c * m];
            for ch in 0..c {
                let gs = &g[ch * m..(ch + 1) * m];
                let ys = &yhat[ch * m..(ch + 1) * m];
                let mean_g: Real = gs.iter().sum::<Real>() / m as Real;
                let mean_gy: Real = gs.iter().zip(ys).map(|(gi, yi)| gi * yi).sum::<Real>() / m as Real;
                let s = scales[ch];
                for i in 0..m {
                    ga[ch * m + i] = (gs[i] - mean_g - ys[i] * mean_gy) / s;
                }
            }
            a.accumulate_grad(&ga);
        });
        Ok(Tensor::from_op(
            "instance_norm",
            out,
            vec![c, h, w],
            vec![self.clone()],
            bw,
        ))
    }

    // ── Masked statistics (weights fixed, gradient w.r.t. values) ───

    /// Weighted mean over `mask` (nonnegative, at least one positive).
    pub fn masked_mean(&self, mask: &[Real]) -> Result<Tensor> {
        let msum = validate_mask("masked_mean", self, mask)?;
        let v: Real = self
            .data()
            .iter()
            .zip(mask)
            .map(|(x, m)| x * m)
            .sum::<Real>()
            / msum;
        let a = self.clone();
        let mv = mask.to_vec();
        let bw: BackwardFn = Box::new(move |g| {
            let ga: Vec<Real> = mv.iter().map(|m| m / msum * g[0]).collect();
            a.accumulate_grad(&ga);
        });
        Ok(Tensor::from_op("masked_mean", vec![v], vec![1], vec![self.clone()], bw))
    }

    /// Weighted population standard deviation over `mask`.
    /// The subgradient at zero deviation is zero.
    pub fn masked_std(&self, mask: &[Real]) -> Result<Tensor> {
        let msum = validate_mask("masked_std", self, mask)?;
        let mu: Real = self
            .data()
            .iter()
            .zip(mask)
            .map(|(x, m)| x * m)
            .sum::<Real>()
            / msum;
        let var: Real = self
            .data()
            .iter()
            .zip(mask)
            .map(|(x, m)| m * (x - mu) * (x - mu))
            .sum::<Real>()
            / msum;
        let sd = var.sqrt();
        let a = self.clone();
        let mv = mask.to_vec();
        let bw: BackwardFn = Box::new(move |g| {
            if sd == 0.0 {
                return;
            }
            let ga: Vec<Real> = a
                .data()
                .iter()
                .zip(&mv)
                .map(|(x, m)| m * (x - mu) / (msum * sd) * g[0])
                .collect();
            a.accumulate_grad(&ga);
        });
        Ok(Tensor::from_op("masked_std", vec![sd], vec![1], vec![self.clone()], bw))
    }

    /// Maximum over positively masked positions; gradient routes to the
    /// first maximizing position.
    pub fn masked_max(&self, mask: &[Real]) -> Result<Tensor> {
        self.masked_extremum("masked_max", mask, true)
    }

    /// Minimum over positively masked positions; gradient routes to the
    /// first minimizing position.
    pub fn masked_min(&self, mask: &[Real]) -> Result<Tensor> {
        self.masked_extremum("masked_min", mask, false)
    }

    fn masked_extremum(&self, op: &'static str, mask: &[Real], is_max: bool) -> Result<Tensor> {
        validate_mask(op, self, mask)?;
        let mut best: Option<(usize, Real)> = None;
        for (i, (x, m)) in self.data().iter().zip(mask).enumerate() {
            if *m > 0.0 {
                let better = match best {
                    None => true,
                    Some((_, bv)) => {
                        if is_max {
                            *x > bv
                        } else {
                            *x < bv
                        }
                    }
                };
                if better {
                    best = Some((i, *x));
                }
            }
        }
        let (idx, val) = best.expect("validate_mask guarantees a positive entry");
        let a = self.clone();
        let n = self.numel();
        let bw: BackwardFn = Box::new(move |g| {
            let mut ga = vec![0.0; n];
            ga[idx] = g[0];
            a.accumulate_grad(&ga);
        });
        Ok(Tensor::from_op(op, vec![val], vec![1], vec![self.clone()], bw))
    }
}

fn stable_sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn conv_out_len(len: usize, k: usize, stride: usize, padding: usize, dilation: usize) -> Option<usize> {
    let span = (dilation * (k - 1) + 1) as isize;
    let out = (len as isize + 2 * padding as isize - span) / stride as isize + 1;
    if out >= 1 {
        Some(out as usize)
    } else {
        None
    }
}

/// Output indices `o in [0, out_len)` with `0 <= o*stride + off < limit`.
fn valid_out_range(limit: usize, stride: usize, off: isize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s } as usize;
    let max_i = limit as isize - 1 - off;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = ((max_i / s) as usize + 1).min(out_len);
    (lo.min(hi), hi)
}

/// Fold an index into `[0, n)` by symmetric reflection (edge repeated).
pub(crate) fn reflect_index(mut i: isize, n: usize) -> usize {
    let n = n as isize;
    debug_assert!(n >= 1);
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

fn validate_mask(op: &'static str, t: &Tensor, mask: &[Real]) -> Result<Real> {
    if mask.len() != t.numel() {
        return Err(Error::Shape {
            op,
            detail: format!("mask length {} vs tensor numel {}", mask.len(), t.numel()),
        });
    }
    let mut sum = 0.0;
    for m in mask {
        if *m < 0.0 {
            return Err(Error::Degenerate(format!("{op}: negative mask weight {m}")));
        }
        sum += m;
    }
    if sum <= 0.0 {
        return Err(Error::Degenerate(format!("{op}: mask selects no elements")));
    }
    Ok(sum)
}
