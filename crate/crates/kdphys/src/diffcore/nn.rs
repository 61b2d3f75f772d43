//! Structured ops on the tape: convolutions (plain and transposed, 2-D and
//! 3-D), adaptive average pooling, batch/instance normalisation, and the
//! temporal channel shift.
//!
//! The transposed convolution is the exact adjoint of the convolution with
//! the same stride/padding, which the backward passes exploit: conv and
//! transposed conv share three loop kernels per rank (gather, scatter, and
//! weight-gradient) with the operand roles swapped.

use super::{accumulate, strides_of, Graph, Node, Op, TensorId};
use crate::error::{Error, Result};

/// Loop geometry shared by the 2-D kernels. `(ih, iw)` are the spatial dims
/// of the windowed buffer, `(oh, ow)` those of the outer-indexed buffer.
#[derive(Clone, Copy)]
pub(crate) struct Geo2 {
    pub n: usize,
    pub a: usize,
    pub b: usize,
    pub ih: usize,
    pub iw: usize,
    pub oh: usize,
    pub ow: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
}

/// out[n,b,oh,ow] += sum_{a,kh,kw} src[n,a,oh*sh+kh-ph, ow*sw+kw-pw] * w[b,a,kh,kw]
fn gather2(src: &[f64], w: &[f64], g: &Geo2, out: &mut [f64]) {
    for n in 0..g.n {
        for b in 0..g.b {
            for oh in 0..g.oh {
                for ow in 0..g.ow {
                    let mut acc = 0.0;
                    for a in 0..g.a {
                        for kh in 0..g.kh {
                            let ih = (oh * g.sh + kh) as isize - g.ph as isize;
                            if ih < 0 || ih >= g.ih as isize {
                                continue;
                            }
                            for kw in 0..g.kw {
                                let iw = (ow * g.sw + kw) as isize - g.pw as isize;
                                if iw < 0 || iw >= g.iw as isize {
                                    continue;
                                }
                                acc += src[((n * g.a + a) * g.ih + ih as usize) * g.iw
                                    + iw as usize]
                                    * w[((b * g.a + a) * g.kh + kh) * g.kw + kw];
                            }
                        }
                    }
                    out[((n * g.b + b) * g.oh + oh) * g.ow + ow] += acc;
                }
            }
        }
    }
}

/// dst[n,b,oh*sh+kh-ph, ow*sw+kw-pw] += sum_a src[n,a,oh,ow] * w[a,b,kh,kw]
fn scatter2(src: &[f64], w: &[f64], g: &Geo2, dst: &mut [f64]) {
    for n in 0..g.n {
        for a in 0..g.a {
            for oh in 0..g.oh {
                for ow in 0..g.ow {
                    let v = src[((n * g.a + a) * g.oh + oh) * g.ow + ow];
                    for b in 0..g.b {
                        for kh in 0..g.kh {
                            let ih = (oh * g.sh + kh) as isize - g.ph as isize;
                            if ih < 0 || ih >= g.ih as isize {
                                continue;
                            }
                            for kw in 0..g.kw {
                                let iw = (ow * g.sw + kw) as isize - g.pw as isize;
                                if iw < 0 || iw >= g.iw as isize {
                                    continue;
                                }
                                dst[((n * g.b + b) * g.ih + ih as usize) * g.iw + iw as usize] +=
                                    v * w[((a * g.b + b) * g.kh + kh) * g.kw + kw];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// dw[b,a,kh,kw] += sum_{n,oh,ow} wout[n,b,oh,ow] * win[n,a,oh*sh+kh-ph, ow*sw+kw-pw]
fn weight_grad2(win: &[f64], wout: &[f64], g: &Geo2, dw: &mut [f64]) {
    for n in 0..g.n {
        for b in 0..g.b {
            for a in 0..g.a {
                for kh in 0..g.kh {
                    for kw in 0..g.kw {
                        let mut acc = 0.0;
                        for oh in 0..g.oh {
                            let ih = (oh * g.sh + kh) as isize - g.ph as isize;
                            if ih < 0 || ih >= g.ih as isize {
                                continue;
                            }
                            for ow in 0..g.ow {
                                let iw = (ow * g.sw + kw) as isize - g.pw as isize;
                                if iw < 0 || iw >= g.iw as isize {
                                    continue;
                                }
                                acc += wout[((n * g.b + b) * g.oh + oh) * g.ow + ow]
                                    * win[((n * g.a + a) * g.ih + ih as usize) * g.iw
                                        + iw as usize];
                            }
                        }
                        dw[((b * g.a + a) * g.kh + kh) * g.kw + kw] += acc;
                    }
                }
            }
        }
    }
}

/// 3-D analogue of [`Geo2`]; spatial triples are (t, h, w).
#[derive(Clone, Copy)]
pub(crate) struct Geo3 {
    pub n: usize,
    pub a: usize,
    pub b: usize,
    pub i: [usize; 3],
    pub o: [usize; 3],
    pub k: [usize; 3],
    pub s: [usize; 3],
    pub p: [usize; 3],
}

impl Geo3 {
    fn win_index(&self, o: [usize; 3], k: [usize; 3]) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for d in 0..3 {
            let v = (o[d] * self.s[d] + k[d]) as isize - self.p[d] as isize;
            if v < 0 || v >= self.i[d] as isize {
                return None;
            }
            idx[d] = v as usize;
        }
        Some(idx)
    }
}

fn gather3(src: &[f64], w: &[f64], g: &Geo3, out: &mut [f64]) {
    let [it, ih, iw] = g.i;
    let [ot, oh, ow] = g.o;
    let [kt, kh, kw] = g.k;
    for n in 0..g.n {
        for b in 0..g.b {
            for c0 in 0..ot {
                for c1 in 0..oh {
                    for c2 in 0..ow {
                        let mut acc = 0.0;
                        for a in 0..g.a {
                            for k0 in 0..kt {
                                for k1 in 0..kh {
                                    for k2 in 0..kw {
                                        if let Some([t, h, wi]) =
                                            g.win_index([c0, c1, c2], [k0, k1, k2])
                                        {
                                            acc += src[(((n * g.a + a) * it + t) * ih + h) * iw
                                                + wi]
                                                * w[(((b * g.a + a) * kt + k0) * kh + k1) * kw
                                                    + k2];
                                        }
                                    }
                                }
                            }
                        }
                        out[(((n * g.b + b) * ot + c0) * oh + c1) * ow + c2] += acc;
                    }
                }
            }
        }
    }
}

fn scatter3(src: &[f64], w: &[f64], g: &Geo3, dst: &mut [f64]) {
    let [it, ih, iw] = g.i;
    let [ot, oh, ow] = g.o;
    let [kt, kh, kw] = g.k;
    for n in 0..g.n {
        for a in 0..g.a {
            for c0 in 0..ot {
                for c1 in 0..oh {
                    for c2 in 0..ow {
                        let v = src[(((n * g.a + a) * ot + c0) * oh + c1) * ow + c2];
                        for b in 0..g.b {
                            for k0 in 0..kt {
                                for k1 in 0..kh {
                                    for k2 in 0..kw {
                                        if let Some([t, h, wi]) =
                                            g.win_index([c0, c1, c2], [k0, k1, k2])
                                        {
                                            dst[(((n * g.b + b) * it + t) * ih + h) * iw + wi] +=
                                                v * w[(((a * g.b + b) * kt + k0) * kh + k1) * kw
                                                    + k2];
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
}

fn weight_grad3(win: &[f64], wout: &[f64], g: &Geo3, dw: &mut [f64]) {
    let [it, ih, iw] = g.i;
    let [ot, oh, ow] = g.o;
    let [kt, kh, kw] = g.k;
    for n in 0..g.n {
        for b in 0..g.b {
            for a in 0..g.a {
                for k0 in 0..kt {
                    for k1 in 0..kh {
                        for k2 in 0..kw {
                            let mut acc = 0.0;
                            for c0 in 0..ot {
                                for c1 in 0..oh {
                                    for c2 in 0..ow {
                                        if let Some([t, h, wi]) =
                                            g.win_index([c0, c1, c2], [k0, k1, k2])
                                        {
                                            acc += wout
                                                [(((n * g.b + b) * ot + c0) * oh + c1) * ow + c2]
                                                * win[(((n * g.a + a) * it + t) * ih + h) * iw
                                                    + wi];
                                        }
                                    }
                                }
                            }
                            dw[(((b * g.a + a) * kt + k0) * kh + k1) * kw + k2] += acc;
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel bias gradient: sum of `gout` over everything but the channel
/// axis (axis 1 of an (N, C, spatial...) buffer).
fn bias_grad(gout: &[f64], n: usize, c: usize, spatial: usize) -> Vec<f64> {
    let mut db = vec![0.0; c];
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * spatial;
            let mut acc = 0.0;
            for s in 0..spatial {
                acc += gout[base + s];
            }
            db[ci] += acc;
        }
    }
    db
}

fn conv_out_dim(input: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    let padded = input + 2 * p;
    if padded < k {
        return Err(Error::Dimension(format!(
            "kernel {k} larger than padded input {padded}"
        )));
    }
    Ok((padded - k) / s + 1)
}

fn convt_out_dim(input: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    let grown = (input - 1) * s + k;
    if grown < 2 * p + 1 {
        return Err(Error::Dimension(format!(
            "transposed-conv padding {p} swallows the whole {grown}-wide output"
        )));
    }
    Ok(grown - 2 * p)
}

fn check_stride(stride: &[usize]) -> Result<()> {
    if stride.iter().any(|&s| s == 0) {
        return Err(Error::Parameter("stride components must be >= 1".into()));
    }
    Ok(())
}

impl Graph {
    /// 2-D convolution: x is (N, Cin, H, W), w is (Cout, Cin, kh, kw),
    /// optional bias is (Cout,).
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<TensorId> {
        check_stride(&[stride.0, stride.1])?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv2d wants rank-4 input and weight, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[1] {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input has {}, weight expects {}",
                xs[1], ws[1]
            )));
        }
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = conv_out_dim(h, kh, stride.0, pad.0)?;
        let ow = conv_out_dim(wd, kw, stride.1, pad.1)?;
        if let Some(bid) = b {
            if self.shape(bid) != [co] {
                return Err(Error::Dimension(format!(
                    "conv2d bias must be ({co},), got {:?}",
                    self.shape(bid)
                )));
            }
        }
        let geo = Geo2 { n, a: ci, b: co, ih: h, iw: wd, oh, ow, kh, kw, sh: stride.0, sw: stride.1, ph: pad.0, pw: pad.1 };
        let mut out = vec![0.0; n * co * oh * ow];
        gather2(self.data(x), self.data(w), &geo, &mut out);
        if let Some(bid) = b {
            let bd = self.data(bid);
            for ni in 0..n {
                for c in 0..co {
                    let base = (ni * co + c) * oh * ow;
                    for s in 0..oh * ow {
                        out[base + s] += bd[c];
                    }
                }
            }
        }
        let req = self.requires_any(x, w, b);
        self.push(
            out,
            vec![n, co, oh, ow],
            req,
            Op::Conv { x, w, b, stride: vec![stride.0, stride.1], pad: vec![pad.0, pad.1] },
            "conv2d",
        )
    }

    /// Transposed 2-D convolution (adjoint of [`Graph::conv2d`] with the same
    /// stride/padding): x is (N, Cin, H, W), w is (Cin, Cout, kh, kw).
    pub fn conv_transpose2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: (usize, usize),
        pad: (usize, usize),
    ) -> Result<TensorId> {
        check_stride(&[stride.0, stride.1])?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Dimension(format!(
                "conv_transpose2d wants rank-4 input and weight, got {xs:?} and {ws:?}"
            )));
        }
        if xs[1] != ws[0] {
            return Err(Error::Dimension(format!(
                "conv_transpose2d channel mismatch: input has {}, weight expects {}",
                xs[1], ws[0]
            )));
        }
        let (n, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[1], ws[2], ws[3]);
        let oh = convt_out_dim(h, kh, stride.0, pad.0)?;
        let ow = convt_out_dim(wd, kw, stride.1, pad.1)?;
        if let Some(bid) = b {
            if self.shape(bid) != [co] {
                return Err(Error::Dimension(format!(
                    "conv_transpose2d bias must be ({co},), got {:?}",
                    self.shape(bid)
                )));
            }
        }
        let geo = Geo2 { n, a: ci, b: co, ih: oh, iw: ow, oh: h, ow: wd, kh, kw, sh: stride.0, sw: stride.1, ph: pad.0, pw: pad.1 };
        let mut out = vec![0.0; n * co * oh * ow];
        scatter2(self.data(x), self.data(w), &geo, &mut out);
        if let Some(bid) = b {
            let bd = self.data(bid);
            for ni in 0..n {
                for c in 0..co {
                    let base = (ni * co + c) * oh * ow;
                    for s in 0..oh * ow {
                        out[base + s] += bd[c];
                    }
                }
            }
        }
        let req = self.requires_any(x, w, b);
        self.push(
            out,
            vec![n, co, oh, ow],
            req,
            Op::ConvTranspose { x, w, b, stride: vec![stride.0, stride.1], pad: vec![pad.0, pad.1] },
            "conv_transpose2d",
        )
    }

    /// 3-D convolution on a single sample: x is (Cin, T, H, W), w is
    /// (Cout, Cin, kt, kh, kw), optional bias is (Cout,).
    pub fn conv3d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Result<TensorId> {
        check_stride(&[stride.0, stride.1, stride.2])?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 5 {
            return Err(Error::Dimension(format!(
                "conv3d wants rank-4 input (C,T,H,W) and rank-5 weight, got {xs:?} and {ws:?}"
            )));
        }
        if xs[0] != ws[1] {
            return Err(Error::Dimension(format!(
                "conv3d channel mismatch: input has {}, weight expects {}",
                xs[0], ws[1]
            )));
        }
        let (ci, t, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
        let ot = conv_out_dim(t, kt, stride.0, pad.0)?;
        let oh = conv_out_dim(h, kh, stride.1, pad.1)?;
        let ow = conv_out_dim(wd, kw, stride.2, pad.2)?;
        if let Some(bid) = b {
            if self.shape(bid) != [co] {
                return Err(Error::Dimension(format!(
                    "conv3d bias must be ({co},), got {:?}",
                    self.shape(bid)
                )));
            }
        }
        let geo = Geo3 {
            n: 1,
            a: ci,
            b: co,
            i: [t, h, wd],
            o: [ot, oh, ow],
            k: [kt, kh, kw],
            s: [stride.0, stride.1, stride.2],
            p: [pad.0, pad.1, pad.2],
        };
        let mut out = vec![0.0; co * ot * oh * ow];
        gather3(self.data(x), self.data(w), &geo, &mut out);
        if let Some(bid) = b {
            let bd = self.data(bid);
            let spatial = ot * oh * ow;
            for c in 0..co {
                for s in 0..spatial {
                    out[c * spatial + s] += bd[c];
                }
            }
        }
        let req = self.requires_any(x, w, b);
        self.push(
            out,
            vec![co, ot, oh, ow],
            req,
            Op::Conv { x, w, b, stride: vec![stride.0, stride.1, stride.2], pad: vec![pad.0, pad.1, pad.2] },
            "conv3d",
        )
    }

    /// Transposed 3-D convolution (adjoint of [`Graph::conv3d`]): x is
    /// (Cin, T, H, W), w is (Cin, Cout, kt, kh, kw).
    pub fn conv_transpose3d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: (usize, usize, usize),
        pad: (usize, usize, usize),
    ) -> Result<TensorId> {
        check_stride(&[stride.0, stride.1, stride.2])?;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 5 {
            return Err(Error::Dimension(format!(
                "conv_transpose3d wants rank-4 input (C,T,H,W) and rank-5 weight, got {xs:?} and {ws:?}"
            )));
        }
        if xs[0] != ws[0] {
            return Err(Error::Dimension(format!(
                "conv_transpose3d channel mismatch: input has {}, weight expects {}",
                xs[0], ws[0]
            )));
        }
        let (ci, t, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kt, kh, kw) = (ws[1], ws[2], ws[3], ws[4]);
        let ot = convt_out_dim(t, kt, stride.0, pad.0)?;
        let oh = convt_out_dim(h, kh, stride.1, pad.1)?;
        let ow = convt_out_dim(wd, kw, stride.2, pad.2)?;
        if let Some(bid) = b {
            if self.shape(bid) != [co] {
                return Err(Error::Dimension(format!(
                    "conv_transpose3d bias must be ({co},), got {:?}",
                    self.shape(bid)
                )));
            }
        }
        let geo = Geo3 {
            n: 1,
            a: ci,
            b: co,
            i: [ot, oh, ow],
            o: [t, h, wd],
            k: [kt, kh, kw],
            s: [stride.0, stride.1, stride.2],
            p: [pad.0, pad.1, pad.2],
        };
        let mut out = vec![0.0; co * ot * oh * ow];
        scatter3(self.data(x), self.data(w), &geo, &mut out);
        if let Some(bid) = b {
            let bd = self.data(bid);
            let spatial = ot * oh * ow;
            for c in 0..co {
                for s in 0..spatial {
                    out[c * spatial + s] += bd[c];
                }
            }
        }
        let req = self.requires_any(x, w, b);
        self.push(
            out,
            vec![co, ot, oh, ow],
            req,
            Op::ConvTranspose { x, w, b, stride: vec![stride.0, stride.1, stride.2], pad: vec![pad.0, pad.1, pad.2] },
            "conv_transpose3d",
        )
    }

    fn requires_any(&self, x: TensorId, w: TensorId, b: Option<TensorId>) -> bool {
        self.nodes[x].tensor.requires_grad
            || self.nodes[w].tensor.requires_grad
            || b.map(|bid| self.nodes[bid].tensor.requires_grad).unwrap_or(false)
    }

    /// Adaptive average pooling over the last two axes of a rank-4 tensor.
    pub fn adaptive_avg_pool2d(&mut self, x: TensorId, out_hw: (usize, usize)) -> Result<TensorId> {
        self.avg_pool(x, &[out_hw.0, out_hw.1])
    }

    /// Adaptive average pooling over the last three axes of a rank-4 tensor.
    pub fn adaptive_avg_pool3d(
        &mut self,
        x: TensorId,
        out_thw: (usize, usize, usize),
    ) -> Result<TensorId> {
        self.avg_pool(x, &[out_thw.0, out_thw.1, out_thw.2])
    }

    fn avg_pool(&mut self, x: TensorId, out_dims: &[usize]) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() <= out_dims.len() {
            return Err(Error::Dimension(format!(
                "pooling {} trailing axes needs rank > {}, got {xs:?}",
                out_dims.len(),
                out_dims.len()
            )));
        }
        if out_dims.iter().any(|&d| d == 0) {
            return Err(Error::Parameter("pool output dims must be >= 1".into()));
        }
        let split = xs.len() - out_dims.len();
        let lead: usize = xs[..split].iter().product();
        let in_dims = &xs[split..];
        let (out, _) = pool_forward(self.data(x), lead, in_dims, out_dims);
        let mut out_shape = xs[..split].to_vec();
        out_shape.extend_from_slice(out_dims);
        let req = self.nodes[x].tensor.requires_grad;
        self.push(out, out_shape, req, Op::AvgPool { x, out: out_dims.to_vec() }, "avg_pool")
    }

    /// Batch or instance normalisation with learned per-channel affine.
    pub fn norm_layer(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        opts: &NormOptions,
    ) -> Result<TensorId> {
        if opts.eps <= 0.0 {
            return Err(Error::Parameter(format!("norm eps must be positive, got {}", opts.eps)));
        }
        let xs = self.shape(x).to_vec();
        if opts.channel_axis >= xs.len() {
            return Err(Error::Dimension(format!(
                "channel axis {} out of range for {xs:?}",
                opts.channel_axis
            )));
        }
        let c = xs[opts.channel_axis];
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Dimension(format!(
                "norm affine parameters must be ({c},), got {:?} and {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if matches!(opts.kind, NormKind::Instance) && xs.len() < 3 {
            return Err(Error::Dimension(
                "instance norm needs at least rank 3 (leading, channel, spatial...)".into(),
            ));
        }
        let grouping = Grouping::new(&xs, opts.kind, opts.channel_axis)?;
        let xd = self.data(x);
        let numel = xd.len();
        let (inv_std, mean, from_batch): (Vec<f64>, Vec<f64>, bool) = match &opts.stats {
            NormStats::FromBatch => {
                let mut sum = vec![0.0; grouping.n_groups];
                let mut sumsq = vec![0.0; grouping.n_groups];
                for (flat, &v) in xd.iter().enumerate() {
                    let (g, _) = grouping.ids(flat);
                    sum[g] += v;
                    sumsq[g] += v * v;
                }
                let m = grouping.group_size as f64;
                let mean: Vec<f64> = sum.iter().map(|&s| s / m).collect();
                let inv: Vec<f64> = sumsq
                    .iter()
                    .zip(&mean)
                    .map(|(&sq, &mu)| {
                        let var = (sq / m - mu * mu).max(0.0);
                        1.0 / (var + opts.eps).sqrt()
                    })
                    .collect();
                (inv, mean, true)
            }
            NormStats::Running { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::Dimension(format!(
                        "running stats must have {c} entries, got {} and {}",
                        mean.len(),
                        var.len()
                    )));
                }
                if var.iter().any(|&v| v < 0.0) {
                    return Err(Error::Parameter("running variance must be non-negative".into()));
                }
                let inv: Vec<f64> = var.iter().map(|&v| 1.0 / (v + opts.eps).sqrt()).collect();
                (inv, mean.clone(), false)
            }
        };
        let gd = self.data(gamma);
        let bd = self.data(beta);
        let mut xhat = vec![0.0; numel];
        let mut out = vec![0.0; numel];
        for flat in 0..numel {
            let (g, ch) = grouping.ids(flat);
            let stat = if from_batch { g } else { ch };
            let xh = (xd[flat] - mean[stat]) * inv_std[stat];
            xhat[flat] = xh;
            out[flat] = gd[ch] * xh + bd[ch];
        }
        let req = self.nodes[x].tensor.requires_grad
            || self.nodes[gamma].tensor.requires_grad
            || self.nodes[beta].tensor.requires_grad;
        let back = NormBack { x, gamma, beta, grouping, from_batch, xhat, inv_std };
        self.push(out, xs, req, Op::Norm(Box::new(back)), "norm_layer")
    }

    /// Shift the first `left` channels one step back in time (frame t reads
    /// frame t+1) and the next `right` channels one step forward, zero-filling
    /// the vacated boundary frames. Input layout is (T, C, spatial...).
    pub fn temporal_shift(&mut self, x: TensorId, left: usize, right: usize) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(Error::Dimension(format!(
                "temporal shift wants (T, C, ...), got {xs:?}"
            )));
        }
        let (t, c) = (xs[0], xs[1]);
        if left + right > c {
            return Err(Error::Dimension(format!(
                "shift groups ({left} + {right}) exceed {c} channels"
            )));
        }
        let inner: usize = xs[2..].iter().product();
        let xd = self.data(x);
        let mut out = vec![0.0; xd.len()];
        for ti in 0..t {
            for ci in 0..c {
                let dst = (ti * c + ci) * inner;
                let src_t = if ci < left {
                    if ti + 1 < t { Some(ti + 1) } else { None }
                } else if ci < left + right {
                    if ti > 0 { Some(ti - 1) } else { None }
                } else {
                    Some(ti)
                };
                if let Some(st) = src_t {
                    let src = (st * c + ci) * inner;
                    out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
                }
            }
        }
        let req = self.nodes[x].tensor.requires_grad;
        self.push(out, xs, req, Op::TemporalShift { x, left, right }, "temporal_shift")
    }
}

/// Which statistics group elements together.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormKind {
    /// One group per channel, pooled over every other axis.
    Batch,
    /// One group per (leading..., channel) slice, pooled over the two
    /// trailing spatial axes.
    Instance,
}

/// Where normalisation statistics come from.
#[derive(Debug, Clone)]
pub enum NormStats {
    /// Compute mean/variance from the tensor being normalised (training).
    FromBatch,
    /// Use frozen per-channel statistics (evaluation).
    Running { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug, Clone)]
pub struct NormOptions {
    pub kind: NormKind,
    pub channel_axis: usize,
    pub eps: f64,
    pub stats: NormStats,
}

impl NormOptions {
    pub fn batch(channel_axis: usize) -> Self {
        NormOptions { kind: NormKind::Batch, channel_axis, eps: 1e-5, stats: NormStats::FromBatch }
    }

    pub fn instance(channel_axis: usize) -> Self {
        NormOptions {
            kind: NormKind::Instance,
            channel_axis,
            eps: 1e-5,
            stats: NormStats::FromBatch,
        }
    }
}

/// Maps a flat element index to its statistics group and its channel.
#[derive(Debug)]
struct Grouping {
    shape: Vec<usize>,
    strides: Vec<usize>,
    channel_axis: usize,
    kind: NormKind,
    n_groups: usize,
    group_size: usize,
}

impl Grouping {
    fn new(shape: &[usize], kind: NormKind, channel_axis: usize) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel == 0 {
            return Err(Error::Dimension("cannot normalise an empty tensor".into()));
        }
        let n_groups = match kind {
            NormKind::Batch => shape[channel_axis],
            NormKind::Instance => shape[..shape.len() - 2].iter().product(),
        };
        Ok(Grouping {
            shape: shape.to_vec(),
            strides: strides_of(shape),
            channel_axis,
            kind,
            n_groups,
            group_size: numel / n_groups,
        })
    }

    fn ids(&self, flat: usize) -> (usize, usize) {
        let ch = (flat / self.strides[self.channel_axis]) % self.shape[self.channel_axis];
        let group = match self.kind {
            NormKind::Batch => ch,
            NormKind::Instance => {
                // Spatial axes are the two innermost, so the group index is
                // just the flat index with them divided out.
                let spatial: usize = self.shape[self.shape.len() - 2..].iter().product();
                flat / spatial
            }
        };
        (group, ch)
    }
}

/// Saved forward state for the norm backward pass.
#[derive(Debug)]
pub(crate) struct NormBack {
    x: TensorId,
    gamma: TensorId,
    beta: TensorId,
    grouping: Grouping,
    from_batch: bool,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

fn pool_forward(
    data: &[f64],
    lead: usize,
    in_dims: &[usize],
    out_dims: &[usize],
) -> (Vec<f64>, usize) {
    let in_spatial: usize = in_dims.iter().product();
    let out_spatial: usize = out_dims.iter().product();
    let ostr = strides_of(out_dims);
    let istr = strides_of(in_dims);
    let mut out = vec![0.0; lead * out_spatial];
    for l in 0..lead {
        let ibase = l * in_spatial;
        for oflat in 0..out_spatial {
            let mut windows = Vec::with_capacity(out_dims.len());
            for d in 0..out_dims.len() {
                let o = (oflat / ostr[d]) % out_dims[d];
                let start = o * in_dims[d] / out_dims[d];
                let end = ((o + 1) * in_dims[d]).div_ceil(out_dims[d]);
                windows.push((start, end));
            }
            let (sum, count) = window_sum(data, ibase, &istr, &windows);
            out[l * out_spatial + oflat] = sum / count as f64;
        }
    }
    (out, out_spatial)
}

fn window_sum(data: &[f64], base: usize, istr: &[usize], windows: &[(usize, usize)]) -> (f64, usize) {
    // Walk the (small) window box with an odometer over its axes.
    let dims: Vec<usize> = windows.iter().map(|&(s, e)| e - s).collect();
    let count: usize = dims.iter().product();
    let mut sum = 0.0;
    let mut coords = vec![0usize; dims.len()];
    for _ in 0..count {
        let mut idx = base;
        for d in 0..dims.len() {
            idx += (windows[d].0 + coords[d]) * istr[d];
        }
        sum += data[idx];
        for d in (0..dims.len()).rev() {
            coords[d] += 1;
            if coords[d] < dims[d] {
                break;
            }
            coords[d] = 0;
        }
    }
    (sum, count)
}

pub(crate) fn backward_conv(
    inputs: &mut [Node],
    x: TensorId,
    w: TensorId,
    b: Option<TensorId>,
    stride: &[usize],
    pad: &[usize],
    gout: &[f64],
    out_shape: &[usize],
) {
    let xs = inputs[x].tensor.shape.clone();
    let ws = inputs[w].tensor.shape.clone();
    if stride.len() == 2 {
        let geo = Geo2 {
            n: xs[0],
            a: xs[1],
            b: ws[0],
            ih: xs[2],
            iw: xs[3],
            oh: out_shape[2],
            ow: out_shape[3],
            kh: ws[2],
            kw: ws[3],
            sh: stride[0],
            sw: stride[1],
            ph: pad[0],
            pw: pad[1],
        };
        if inputs[x].tensor.grad.is_some() {
            // The scatter reads gout's channels and writes x's, so its
            // geometry swaps the channel roles; the (Cout, Cin, kh, kw)
            // kernel layout then lines up as-is.
            let mut dx = vec![0.0; inputs[x].tensor.data.len()];
            let geo_dx = Geo2 { a: geo.b, b: geo.a, ..geo };
            scatter2(gout, &inputs[w].tensor.data, &geo_dx, &mut dx);
            accumulate(&mut inputs[x], &dx);
        }
        if inputs[w].tensor.grad.is_some() {
            let mut dw = vec![0.0; inputs[w].tensor.data.len()];
            weight_grad2(&inputs[x].tensor.data, gout, &geo, &mut dw);
            accumulate(&mut inputs[w], &dw);
        }
        if let Some(bid) = b {
            if inputs[bid].tensor.grad.is_some() {
                let db = bias_grad(gout, geo.n, geo.b, geo.oh * geo.ow);
                accumulate(&mut inputs[bid], &db);
            }
        }
    } else {
        // Single-sample 3-D layout (C, T, H, W).
        let geo = Geo3 {
            n: 1,
            a: xs[0],
            b: ws[0],
            i: [xs[1], xs[2], xs[3]],
            o: [out_shape[1], out_shape[2], out_shape[3]],
            k: [ws[2], ws[3], ws[4]],
            s: [stride[0], stride[1], stride[2]],
            p: [pad[0], pad[1], pad[2]],
        };
        if inputs[x].tensor.grad.is_some() {
            let mut dx = vec![0.0; inputs[x].tensor.data.len()];
            let geo_dx = Geo3 { a: geo.b, b: geo.a, ..geo };
            scatter3(gout, &inputs[w].tensor.data, &geo_dx, &mut dx);
            accumulate(&mut inputs[x], &dx);
        }
        if inputs[w].tensor.grad.is_some() {
            let mut dw = vec![0.0; inputs[w].tensor.data.len()];
            weight_grad3(&inputs[x].tensor.data, gout, &geo, &mut dw);
            accumulate(&mut inputs[w], &dw);
        }
        if let Some(bid) = b {
            if inputs[bid].tensor.grad.is_some() {
                let db = bias_grad(gout, 1, geo.b, geo.o.iter().product());
                accumulate(&mut inputs[bid], &db);
            }
        }
    }
}

pub(crate) fn backward_conv_transpose(
    inputs: &mut [Node],
    x: TensorId,
    w: TensorId,
    b: Option<TensorId>,
    stride: &[usize],
    pad: &[usize],
    gout: &[f64],
    out_shape: &[usize],
) {
    let xs = inputs[x].tensor.shape.clone();
    let ws = inputs[w].tensor.shape.clone();
    if stride.len() == 2 {
        let geo = Geo2 {
            n: xs[0],
            a: xs[1],
            b: ws[1],
            ih: out_shape[2],
            iw: out_shape[3],
            oh: xs[2],
            ow: xs[3],
            kh: ws[2],
            kw: ws[3],
            sh: stride[0],
            sw: stride[1],
            ph: pad[0],
            pw: pad[1],
        };
        if inputs[x].tensor.grad.is_some() {
            // dx gathers from gout exactly like a forward conv whose weight
            // first axis indexes gout's channels.
            let mut dx = vec![0.0; inputs[x].tensor.data.len()];
            let geo_dx = Geo2 { a: geo.b, b: geo.a, ..geo };
            gather2(gout, &inputs[w].tensor.data, &geo_dx, &mut dx);
            accumulate(&mut inputs[x], &dx);
        }
        if inputs[w].tensor.grad.is_some() {
            let mut dw = vec![0.0; inputs[w].tensor.data.len()];
            let geo_dw = Geo2 { a: geo.b, b: geo.a, ..geo };
            weight_grad2(gout, &inputs[x].tensor.data, &geo_dw, &mut dw);
            accumulate(&mut inputs[w], &dw);
        }
        if let Some(bid) = b {
            if inputs[bid].tensor.grad.is_some() {
                let db = bias_grad(gout, geo.n, ws[1], out_shape[2] * out_shape[3]);
                accumulate(&mut inputs[bid], &db);
            }
        }
    } else {
        let geo = Geo3 {
            n: 1,
            a: xs[0],
            b: ws[1],
            i: [out_shape[1], out_shape[2], out_shape[3]],
            o: [xs[1], xs[2], xs[3]],
            k: [ws[2], ws[3], ws[4]],
            s: [stride[0], stride[1], stride[2]],
            p: [pad[0], pad[1], pad[2]],
        };
        if inputs[x].tensor.grad.is_some() {
            let mut dx = vec![0.0; inputs[x].tensor.data.len()];
            let geo_dx = Geo3 { a: geo.b, b: geo.a, ..geo };
            gather3(gout, &inputs[w].tensor.data, &geo_dx, &mut dx);
            accumulate(&mut inputs[x], &dx);
        }
        if inputs[w].tensor.grad.is_some() {
            let mut dw = vec![0.0; inputs[w].tensor.data.len()];
            let geo_dw = Geo3 { a: geo.b, b: geo.a, ..geo };
            weight_grad3(gout, &inputs[x].tensor.data, &geo_dw, &mut dw);
            accumulate(&mut inputs[w], &dw);
        }
        if let Some(bid) = b {
            if inputs[bid].tensor.grad.is_some() {
                let db = bias_grad(gout, 1, ws[1], geo.i.iter().product());
                accumulate(&mut inputs[bid], &db);
            }
        }
    }
}

pub(crate) fn backward_avg_pool(
    inputs: &mut [Node],
    x: TensorId,
    out_dims: &[usize],
    gout: &[f64],
    out_shape: &[usize],
) {
    if inputs[x].tensor.grad.is_none() {
        return;
    }
    let xs = inputs[x].tensor.shape.clone();
    let split = xs.len() - out_dims.len();
    let lead: usize = xs[..split].iter().product();
    let in_dims = &xs[split..];
    let in_spatial: usize = in_dims.iter().product();
    let out_spatial: usize = out_shape[split..].iter().product();
    let ostr = strides_of(out_dims);
    let istr = strides_of(in_dims);
    let mut dx = vec![0.0; inputs[x].tensor.data.len()];
    for l in 0..lead {
        for oflat in 0..out_spatial {
            let mut windows = Vec::with_capacity(out_dims.len());
            for d in 0..out_dims.len() {
                let o = (oflat / ostr[d]) % out_dims[d];
                let start = o * in_dims[d] / out_dims[d];
                let end = ((o + 1) * in_dims[d]).div_ceil(out_dims[d]);
                windows.push((start, end));
            }
            let dims: Vec<usize> = windows.iter().map(|&(s, e)| e - s).collect();
            let count: usize = dims.iter().product();
            let share = gout[l * out_spatial + oflat] / count as f64;
            let mut coords = vec![0usize; dims.len()];
            for _ in 0..count {
                let mut idx = l * in_spatial;
                for d in 0..dims.len() {
                    idx += (windows[d].0 + coords[d]) * istr[d];
                }
                dx[idx] += share;
                for d in (0..dims.len()).rev() {
                    coords[d] += 1;
                    if coords[d] < dims[d] {
                        break;
                    }
                    coords[d] = 0;
                }
            }
        }
    }
    accumulate(&mut inputs[x], &dx);
}

pub(crate) fn backward_norm(inputs: &mut [Node], back: &NormBack, gout: &[f64]) {
    let numel = gout.len();
    let grouping = &back.grouping;
    let gamma_d = inputs[back.gamma].tensor.data.clone();
    // Per-channel affine gradients.
    let c = gamma_d.len();
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for flat in 0..numel {
        let (_, ch) = grouping.ids(flat);
        dgamma[ch] += gout[flat] * back.xhat[flat];
        dbeta[ch] += gout[flat];
    }
    if inputs[back.gamma].tensor.grad.is_some() {
        accumulate(&mut inputs[back.gamma], &dgamma);
    }
    if inputs[back.beta].tensor.grad.is_some() {
        accumulate(&mut inputs[back.beta], &dbeta);
    }
    if inputs[back.x].tensor.grad.is_none() {
        return;
    }
    let mut dx = vec![0.0; numel];
    if back.from_batch {
        // Batch statistics contribute through the mean and variance too.
        let m = grouping.group_size as f64;
        let mut sum_g = vec![0.0; grouping.n_groups];
        let mut sum_gx = vec![0.0; grouping.n_groups];
        for flat in 0..numel {
            let (g, ch) = grouping.ids(flat);
            let dxh = gout[flat] * gamma_d[ch];
            sum_g[g] += dxh;
            sum_gx[g] += dxh * back.xhat[flat];
        }
        for flat in 0..numel {
            let (g, ch) = grouping.ids(flat);
            let dxh = gout[flat] * gamma_d[ch];
            dx[flat] = back.inv_std[g] * (dxh - (sum_g[g] + back.xhat[flat] * sum_gx[g]) / m);
        }
    } else {
        for flat in 0..numel {
            let (_, ch) = grouping.ids(flat);
            dx[flat] = gout[flat] * gamma_d[ch] * back.inv_std[ch];
        }
    }
    accumulate(&mut inputs[back.x], &dx);
}

pub(crate) fn backward_temporal_shift(
    inputs: &mut [Node],
    x: TensorId,
    left: usize,
    right: usize,
    gout: &[f64],
    out_shape: &[usize],
) {
    if inputs[x].tensor.grad.is_none() {
        return;
    }
    let (t, c) = (out_shape[0], out_shape[1]);
    let inner: usize = out_shape[2..].iter().product();
    let mut dx = vec![0.0; gout.len()];
    for ti in 0..t {
        for ci in 0..c {
            let out_base = (ti * c + ci) * inner;
            let src_t = if ci < left {
                if ti + 1 < t { Some(ti + 1) } else { None }
            } else if ci < left + right {
                if ti > 0 { Some(ti - 1) } else { None }
            } else {
                Some(ti)
            };
            if let Some(st) = src_t {
                let src_base = (st * c + ci) * inner;
                for r in 0..inner {
                    dx[src_base + r] += gout[out_base + r];
                }
            }
        }
    }
    accumulate(&mut inputs[x], &dx);
}
