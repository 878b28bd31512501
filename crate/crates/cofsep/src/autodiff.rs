//! Tape-based reverse-mode automatic differentiation over dense `f64`
//! tensors.
//!
//! The op set is exactly what the separation networks need; every op carries
//! a hand-written backward that is exercised by finite-difference checks in
//! the test suite. Convolutions use channels-first layout: 2-d tensors are
//! `[C, H, W]`, spatio-temporal tensors are `[C, T, H, W]`.
//!
//! Tapes are single-threaded and cheap to build; training parallelizes over
//! batch examples, each with its own tape, so no op needs internal locking.

use crate::tensor::Tensor;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy)]
struct MinMax {
    min: f64,
    max: f64,
    argmin: usize,
    argmax: usize,
}

enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
        dilation: usize,
    },
    Conv3d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride_t: usize,
        stride_s: usize,
        pad_t: usize,
        pad_s: usize,
    },
    GroupNorm {
        input: NodeId,
        gain: NodeId,
        bias: NodeId,
        groups: usize,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LeakyRelu {
        input: NodeId,
        slope: f64,
    },
    Sigmoid {
        input: NodeId,
    },
    MaxPool2d {
        input: NodeId,
        argmax: Vec<u32>,
    },
    GlobalMaxPool {
        input: NodeId,
        argmax: Vec<u32>,
    },
    UpsampleNearest2x {
        input: NodeId,
    },
    ConcatCh {
        a: NodeId,
        b: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Sub {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        input: NodeId,
        c: f64,
    },
    AddScalar {
        input: NodeId,
    },
    MulBroadcastHw {
        x: NodeId,
        s: NodeId,
    },
    InflateTime {
        input: NodeId,
        t: usize,
    },
    Transpose01 {
        input: NodeId,
    },
    AffineCombine {
        z: NodeId,
        maps: NodeId,
        alpha: NodeId,
        beta: NodeId,
    },
    DynamicImage {
        frames: NodeId,
        coeffs: Vec<f64>,
        stats: Vec<MinMax>,
    },
    SigmoidBce {
        logits: NodeId,
        target: Tensor,
    },
    L1Mean {
        a: NodeId,
        b: NodeId,
    },
    MeanAbs {
        input: NodeId,
    },
    SumAll {
        input: NodeId,
    },
    WeightedSum {
        terms: Vec<(NodeId, f64)>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Gradients produced by [`Tape::backward`], indexed by node id.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.nodes.len() - 1
    }

    fn any_grad(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    // ---- shape helpers -----------------------------------------------------

    fn dims3(t: &Tensor) -> (usize, usize, usize) {
        let s = t.shape();
        assert_eq!(s.len(), 3, "expected rank-3 tensor, got {s:?}");
        (s[0], s[1], s[2])
    }

    fn dims4(t: &Tensor) -> (usize, usize, usize, usize) {
        let s = t.shape();
        assert_eq!(s.len(), 4, "expected rank-4 tensor, got {s:?}");
        (s[0], s[1], s[2], s[3])
    }

    // ---- convolution -------------------------------------------------------

    /// 2-d convolution, input `[C,H,W]`, weight `[OC,IC,KH,KW]`, bias `[OC]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
        dilation: usize,
    ) -> NodeId {
        let (c_in, h, w) = Self::dims3(self.value(input));
        let ws = self.value(weight).shape().to_vec();
        assert_eq!(ws.len(), 4);
        assert_eq!(ws[1], c_in, "conv2d channel mismatch");
        let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
        assert_eq!(self.value(bias).shape(), &[oc]);
        let oh = conv_out(h, kh, stride, pad, dilation);
        let ow = conv_out(w, kw, stride, pad, dilation);
        let mut out = Tensor::zeros(&[oc, oh, ow]);
        conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            out.data_mut(),
            [c_in, h, w],
            [oc, kh, kw, oh, ow],
            stride,
            pad,
            dilation,
        );
        let rg = self.any_grad(&[input, weight, bias]);
        self.push(
            out,
            rg,
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                dilation,
            },
        )
    }

    /// 3-d convolution, input `[C,T,H,W]`, weight `[OC,IC,KT,KH,KW]`.
    #[allow(clippy::too_many_arguments)]
    pub fn conv3d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride_t: usize,
        stride_s: usize,
        pad_t: usize,
        pad_s: usize,
    ) -> NodeId {
        let (c_in, t, h, w) = Self::dims4(self.value(input));
        let ws = self.value(weight).shape().to_vec();
        assert_eq!(ws.len(), 5);
        assert_eq!(ws[1], c_in, "conv3d channel mismatch");
        let (oc, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
        let ot = conv_out(t, kt, stride_t, pad_t, 1);
        let oh = conv_out(h, kh, stride_s, pad_s, 1);
        let ow = conv_out(w, kw, stride_s, pad_s, 1);
        let mut out = Tensor::zeros(&[oc, ot, oh, ow]);
        conv3d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
            out.data_mut(),
            [c_in, t, h, w],
            [oc, kt, kh, kw, ot, oh, ow],
            [stride_t, stride_s, pad_t, pad_s],
        );
        let rg = self.any_grad(&[input, weight, bias]);
        self.push(
            out,
            rg,
            Op::Conv3d {
                input,
                weight,
                bias,
                stride_t,
                stride_s,
                pad_t,
                pad_s,
            },
        )
    }

    // ---- normalization and activations -------------------------------------

    /// Group normalization over `[C, ...]`: statistics per group of `C /
    /// groups` channels, per-channel affine. Batch-free, so identical in
    /// train and eval; groups of several channels keep relative channel
    /// amplitudes (which carry appearance identity) observable downstream.
    pub fn group_norm(&mut self, input: NodeId, gain: NodeId, bias: NodeId, groups: usize) -> NodeId {
        const EPS: f64 = 1e-5;
        let shape = self.value(input).shape().to_vec();
        let c = shape[0];
        assert!(groups >= 1 && c % groups == 0, "channels {c} not divisible into {groups} groups");
        let per: usize = shape[1..].iter().product();
        let group_len = (c / groups) * per;
        assert_eq!(self.value(gain).shape(), &[c]);
        assert_eq!(self.value(bias).shape(), &[c]);
        let x = self.value(input).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut mean = vec![0.0; groups];
        let mut inv_std = vec![0.0; groups];
        let mut out = Tensor::zeros(&shape);
        for grp in 0..groups {
            let xs = &x[grp * group_len..(grp + 1) * group_len];
            let mu = xs.iter().sum::<f64>() / group_len as f64;
            let var = xs.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / group_len as f64;
            let istd = 1.0 / (var + EPS).sqrt();
            mean[grp] = mu;
            inv_std[grp] = istd;
            let ch0 = grp * (c / groups);
            for (k, ch) in (ch0..ch0 + c / groups).enumerate() {
                let src = &xs[k * per..(k + 1) * per];
                let dst = &mut out.data_mut()[ch * per..(ch + 1) * per];
                for (o, v) in dst.iter_mut().zip(src) {
                    *o = g[ch] * (v - mu) * istd + b[ch];
                }
            }
        }
        let rg = self.any_grad(&[input, gain, bias]);
        self.push(
            out,
            rg,
            Op::GroupNorm {
                input,
                gain,
                bias,
                groups,
                mean,
                inv_std,
            },
        )
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: f64) -> NodeId {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            if *v < 0.0 {
                *v *= slope;
            }
        }
        let rg = self.nodes[input].requires_grad;
        self.push(out, rg, Op::LeakyRelu { input, slope })
    }

    pub fn relu(&mut self, input: NodeId) -> NodeId {
        self.leaky_relu(input, 0.0)
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        let rg = self.nodes[input].requires_grad;
        self.push(out, rg, Op::Sigmoid { input })
    }

    // ---- pooling and resampling ---------------------------------------------

    /// 3x3 stride-2 max pool with padding 1 (the residual stem pooling).
    pub fn max_pool2d_3x3s2(&mut self, input: NodeId) -> NodeId {
        let (c, h, w) = Self::dims3(self.value(input));
        let oh = conv_out(h, 3, 2, 1, 1);
        let ow = conv_out(w, 3, 2, 1, 1);
        let x = self.value(input).data();
        let mut out = Tensor::zeros(&[c, oh, ow]);
        let mut argmax = vec![0u32; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0usize;
                    for ky in 0..3 {
                        let iy = (oy * 2 + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * 2 + kx) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let idx = (ch * h + iy as usize) * w + ix as usize;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    out.data_mut()[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
        let rg = self.nodes[input].requires_grad;
        self.push(out, rg, Op::MaxPool2d { input, argmax })
    }

    /// Max over every dim after the first: `[C, ...] -> [C]`.
    pub fn global_max_pool(&mut self, input: NodeId) -> NodeId {
        let shape = self.value(input).shape().to_vec();
        let c = shape[0];
        let per: usize = shape[1..].iter().product();
        assert!(per > 0);
        let x = self.value(input).data();
        let mut out = Tensor::zeros(&[c]);
        let mut argmax = vec![0u32; c];
        for ch in 0..c {
            let xs = &x[ch * per..(ch + 1) * per];
            let (mut bi, mut bv) = (0usize, xs[0]);
            for (i, &v) in xs.iter().enumerate().skip(1) {
                if v > bv {
                    bv = v;
                    bi = i;
                }
            }
            out.data_mut()[ch] = bv;
            argmax[ch] = (ch * per + bi) as u32;
        }
        let rg = self.nodes[input].requires_grad;
        self.push(out, rg, Op::GlobalMaxPool { input, argmax })
    }

    pub fn upsample_nearest_2x(&mut self, input: NodeId) -> NodeId {
        let (c, h, w) = Self::dims3(self.value(input));
        let x = self.value(input).data();
        let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
        {
            let o = out.data_mut();
            for ch in 0..c {
                for y in 0..2 * h {
                    let sy = y / 2;
                    let src = &x[(ch * h + sy) * w..(ch * h + sy + 1) * w];
                    let dst = &mut o[(ch * 2 * h + y) * 2 * w..(ch * 2 * h + y + 1) * 2 * w];
                    for (dx, &v) in src.iter().enumerate() {
                        dst[2 * dx] = v;
                        dst[2 * dx + 1] = v;
                    }
                }
            }
        }
        let rg = self.nodes[input].requires_grad;
        self.push(out, rg, Op::UpsampleNearest2x { input })
    }

    // ---- structural ops ------------------------------------------------------

    /// Concatenate along the channel axis (dim 0); trailing dims must match.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.value(a).shape().to_vec();
        let sb = self.value(b).shape().to_vec();
        assert_eq!(sa[1..], sb[1..], "concat trailing dims differ");
        let mut shape = sa.clone();
        shape[0] += sb[0];
        let mut data = Vec::with_capacity(self.value(a).numel() + self.value(b).numel());
        data.extend_from_slice(self.value(a).data());
        data.extend_from_slice(self.value(b).data());
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::from_vec(&shape, data), rg, Op::ConcatCh { a, b })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b].value.data()) {
            *o += v;
        }
        let rg = self.any_grad(&[a, b]);
        self.push(out, rg, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b].value.data()) {
            *o -= v;
        }
        let rg = self.any_grad(&[a, b]);
        self.push(out, rg, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.nodes[b].value.data()) {
            *o *= v;
        }
        let rg = self.any_grad(&[a, b]);
        self.push(out, rg, Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: NodeId, c: f64) -> NodeId {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            *v *= c;
        }
        let rg = self.nodes[input].requires_grad;
        self.push(out, rg, Op::Scale { input, c })
    }

    pub fn add_scalar(&mut self, input: NodeId, c: f64) -> NodeId {
        let mut out = self.value(input).clone();
        for v in out.data_mut() {
            *v += c;
        }
        let rg = self.nodes[input].requires_grad;
        self.push(out, rg, Op::AddScalar { input })
    }

    /// Multiply `x` (`[C,H,W]` or `[C,T,H,W]`) by a spatial map `s` of shape
    /// `[1,H,W]`, broadcast over the leading dims.
    pub fn mul_broadcast_hw(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let ss = self.value(s).shape().to_vec();
        assert_eq!(ss.len(), 3);
        assert_eq!(ss[0], 1, "broadcast map must have one channel");
        assert_eq!(&xs[xs.len() - 2..], &ss[1..], "spatial dims differ");
        let plane = ss[1] * ss[2];
        let lead = self.value(x).numel() / plane;
        let mut out = self.value(x).clone();
        {
            let sv = self.nodes[s].value.data();
            let o = out.data_mut();
            for l in 0..lead {
                for p in 0..plane {
                    o[l * plane + p] *= sv[p];
                }
            }
        }
        let rg = self.any_grad(&[x, s]);
        self.push(out, rg, Op::MulBroadcastHw { x, s })
    }

    /// Repeat a `[C,H,W]` map `t` times along a new time axis: `[C,T,H,W]`.
    pub fn inflate_time(&mut self, input: NodeId, t: usize) -> NodeId {
        let (c, h, w) = Self::dims3(self.value(input));
        let x = self.value(input).data();
        let mut out = Tensor::zeros(&[c, t, h, w]);
        {
            let o = out.data_mut();
            let plane = h * w;
            for ch in 0..c {
                let src = &x[ch * plane..(ch + 1) * plane];
                for tt in 0..t {
                    o[(ch * t + tt) * plane..(ch * t + tt + 1) * plane].copy_from_slice(src);
                }
            }
        }
        let rg = self.nodes[input].requires_grad;
        self.push(out, rg, Op::InflateTime { input, t })
    }

    /// Swap the two leading axes of a rank >= 2 tensor.
    pub fn transpose01(&mut self, input: NodeId) -> NodeId {
        let shape = self.value(input).shape().to_vec();
        assert!(shape.len() >= 2);
        let (a, b) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let mut new_shape = shape.clone();
        new_shape.swap(0, 1);
        let x = self.value(input).data();
        let mut out = Tensor::zeros(&new_shape);
        {
            let o = out.data_mut();
            for i in 0..a {
                for j in 0..b {
                    let src = &x[(i * b + j) * inner..(i * b + j + 1) * inner];
                    o[(j * a + i) * inner..(j * a + i + 1) * inner].copy_from_slice(src);
                }
            }
        }
        let rg = self.nodes[input].requires_grad;
        self.push(out, rg, Op::Transpose01 { input })
    }

    /// Spectrum-mask combiner: `out[h,w] = sum_k alpha[k] * z[k] * maps[k,h,w]
    /// + beta`, with `z: [K]`, `maps: [K,H,W]`, `alpha: [K]`, `beta: [1]`.
    pub fn affine_combine(
        &mut self,
        z: NodeId,
        maps: NodeId,
        alpha: NodeId,
        beta: NodeId,
    ) -> NodeId {
        let (k, h, w) = Self::dims3(self.value(maps));
        assert_eq!(self.value(z).shape(), &[k], "visual vector length != K");
        assert_eq!(self.value(alpha).shape(), &[k]);
        assert_eq!(self.value(beta).shape(), &[1]);
        let zd = self.value(z).data();
        let md = self.value(maps).data();
        let ad = self.value(alpha).data();
        let b = self.value(beta).data()[0];
        let plane = h * w;
        let mut out = Tensor::full(&[h, w], b);
        {
            let o = out.data_mut();
            for ch in 0..k {
                let coeff = ad[ch] * zd[ch];
                if coeff == 0.0 {
                    continue;
                }
                let src = &md[ch * plane..(ch + 1) * plane];
                for (ov, &sv) in o.iter_mut().zip(src) {
                    *ov += coeff * sv;
                }
            }
        }
        let rg = self.any_grad(&[z, maps, alpha, beta]);
        self.push(out, rg, Op::AffineCombine { z, maps, alpha, beta })
    }

    /// Approximate rank pooling of `[T,C,H,W]` frames with the supplied
    /// per-frame coefficients, followed by per-channel min-max normalization
    /// to [0,1]. Channels with no dynamic range collapse to 0.5.
    pub fn dynamic_image(&mut self, frames: NodeId, coeffs: &[f64]) -> NodeId {
        let (t, c, h, w) = Self::dims4(self.value(frames));
        assert_eq!(coeffs.len(), t, "one coefficient per frame");
        let plane = h * w;
        let x = self.value(frames).data();
        let mut pooled = vec![0.0f64; c * plane];
        for (tt, &a) in coeffs.iter().enumerate() {
            for ch in 0..c {
                let src = &x[(tt * c + ch) * plane..(tt * c + ch + 1) * plane];
                let dst = &mut pooled[ch * plane..(ch + 1) * plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += a * s;
                }
            }
        }
        let mut out = Tensor::zeros(&[c, h, w]);
        let mut stats = Vec::with_capacity(c);
        for ch in 0..c {
            let src = &pooled[ch * plane..(ch + 1) * plane];
            let (mut mn, mut mni, mut mx, mut mxi) = (src[0], 0usize, src[0], 0usize);
            for (i, &v) in src.iter().enumerate().skip(1) {
                if v < mn {
                    mn = v;
                    mni = i;
                }
                if v > mx {
                    mx = v;
                    mxi = i;
                }
            }
            stats.push(MinMax {
                min: mn,
                max: mx,
                argmin: mni,
                argmax: mxi,
            });
            let dst = &mut out.data_mut()[ch * plane..(ch + 1) * plane];
            if mx - mn < 1e-12 {
                for d in dst.iter_mut() {
                    *d = 0.5;
                }
            } else {
                let denom = mx - mn;
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - mn) / denom;
                }
            }
        }
        let rg = self.nodes[frames].requires_grad;
        self.push(
            out,
            rg,
            Op::DynamicImage {
                frames,
                coeffs: coeffs.to_vec(),
                stats,
            },
        )
    }

    // ---- losses ----------------------------------------------------------------

    /// Mean binary cross entropy of `sigmoid(logits)` against a constant
    /// target grid; probabilities are clamped at 1e-7 for the loss value.
    pub fn sigmoid_bce(&mut self, logits: NodeId, target: Tensor) -> NodeId {
        assert_eq!(self.value(logits).shape(), target.shape());
        const CLAMP: f64 = 1e-7;
        let n = target.numel() as f64;
        let mut acc = 0.0;
        for (&x, &t) in self.value(logits).data().iter().zip(target.data()) {
            let p = (1.0 / (1.0 + (-x).exp())).clamp(CLAMP, 1.0 - CLAMP);
            acc -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        }
        let rg = self.nodes[logits].requires_grad;
        self.push(
            Tensor::scalar(acc / n),
            rg,
            Op::SigmoidBce { logits, target },
        )
    }

    /// Mean absolute difference between two grids of identical shape.
    pub fn l1_mean(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.value(a).shape(), self.value(b).shape());
        let n = self.value(a).numel() as f64;
        let acc: f64 = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::scalar(acc / n), rg, Op::L1Mean { a, b })
    }

    pub fn mean_abs(&mut self, input: NodeId) -> NodeId {
        let n = self.value(input).numel() as f64;
        let acc: f64 = self.value(input).data().iter().map(|v| v.abs()).sum();
        let rg = self.nodes[input].requires_grad;
        self.push(Tensor::scalar(acc / n), rg, Op::MeanAbs { input })
    }

    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let acc: f64 = self.value(input).data().iter().sum();
        let rg = self.nodes[input].requires_grad;
        self.push(Tensor::scalar(acc), rg, Op::SumAll { input })
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let mut acc = 0.0;
        for &(id, c) in terms {
            assert_eq!(self.value(id).numel(), 1, "weighted_sum expects scalars");
            acc += c * self.value(id).data()[0];
        }
        let rg = terms.iter().any(|&(id, _)| self.nodes[id].requires_grad);
        self.push(
            Tensor::scalar(acc),
            rg,
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
        )
    }

    // ---- backward ---------------------------------------------------------------

    /// Reverse sweep from a scalar loss node. Returns per-node gradients for
    /// every node on a `requires_grad` path.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(self.value(loss).numel(), 1, "loss must be scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar(1.0));

        for id in (0..=loss).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.accumulate_parents(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads }
    }

    fn add_grad(&self, grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut grads[id] {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_lines)]
    fn accumulate_parents(&self, id: NodeId, g: &Tensor, grads: &mut Vec<Option<Tensor>>) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                pad,
                dilation,
            } => {
                let (c_in, h, w) = Self::dims3(self.value(*input));
                let ws = self.value(*weight).shape();
                let (oc, kh, kw) = (ws[0], ws[2], ws[3]);
                let os = self.value(id).shape();
                let (oh, ow) = (os[1], os[2]);
                if self.nodes[*bias].requires_grad {
                    let mut db = Tensor::zeros(&[oc]);
                    for c in 0..oc {
                        db.data_mut()[c] = g.data()[c * oh * ow..(c + 1) * oh * ow].iter().sum();
                    }
                    self.add_grad(grads, *bias, db);
                }
                if self.nodes[*weight].requires_grad {
                    let mut dw = Tensor::zeros(self.value(*weight).shape());
                    conv2d_backward_weight(
                        self.value(*input).data(),
                        g.data(),
                        dw.data_mut(),
                        [c_in, h, w],
                        [oc, kh, kw, oh, ow],
                        *stride,
                        *pad,
                        *dilation,
                    );
                    self.add_grad(grads, *weight, dw);
                }
                if self.nodes[*input].requires_grad {
                    let mut dx = Tensor::zeros(self.value(*input).shape());
                    conv2d_backward_input(
                        self.value(*weight).data(),
                        g.data(),
                        dx.data_mut(),
                        [c_in, h, w],
                        [oc, kh, kw, oh, ow],
                        *stride,
                        *pad,
                        *dilation,
                    );
                    self.add_grad(grads, *input, dx);
                }
            }
            Op::Conv3d {
                input,
                weight,
                bias,
                stride_t,
                stride_s,
                pad_t,
                pad_s,
            } => {
                let (c_in, t, h, w) = Self::dims4(self.value(*input));
                let ws = self.value(*weight).shape();
                let (oc, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
                let os = self.value(id).shape();
                let (ot, oh, ow) = (os[1], os[2], os[3]);
                let geom_in = [c_in, t, h, w];
                let geom_out = [oc, kt, kh, kw, ot, oh, ow];
                let strides = [*stride_t, *stride_s, *pad_t, *pad_s];
                if self.nodes[*bias].requires_grad {
                    let per = ot * oh * ow;
                    let mut db = Tensor::zeros(&[oc]);
                    for c in 0..oc {
                        db.data_mut()[c] = g.data()[c * per..(c + 1) * per].iter().sum();
                    }
                    self.add_grad(grads, *bias, db);
                }
                if self.nodes[*weight].requires_grad {
                    let mut dw = Tensor::zeros(self.value(*weight).shape());
                    conv3d_backward_weight(
                        self.value(*input).data(),
                        g.data(),
                        dw.data_mut(),
                        geom_in,
                        geom_out,
                        strides,
                    );
                    self.add_grad(grads, *weight, dw);
                }
                if self.nodes[*input].requires_grad {
                    let mut dx = Tensor::zeros(self.value(*input).shape());
                    conv3d_backward_input(
                        self.value(*weight).data(),
                        g.data(),
                        dx.data_mut(),
                        geom_in,
                        geom_out,
                        strides,
                    );
                    self.add_grad(grads, *input, dx);
                }
            }
            Op::GroupNorm {
                input,
                gain,
                bias,
                groups,
                mean,
                inv_std,
            } => {
                let shape = self.value(*input).shape().to_vec();
                let c = shape[0];
                let per: usize = shape[1..].iter().product();
                let cpg = c / groups;
                let group_len = cpg * per;
                let x = self.value(*input).data();
                let gain_v = self.value(*gain).data();
                if self.nodes[*bias].requires_grad {
                    let mut db = Tensor::zeros(&[c]);
                    for ch in 0..c {
                        db.data_mut()[ch] = g.data()[ch * per..(ch + 1) * per].iter().sum();
                    }
                    self.add_grad(grads, *bias, db);
                }
                if self.nodes[*gain].requires_grad {
                    let mut dg = Tensor::zeros(&[c]);
                    for ch in 0..c {
                        let grp = ch / cpg;
                        let mut acc = 0.0;
                        for i in 0..per {
                            let xh = (x[ch * per + i] - mean[grp]) * inv_std[grp];
                            acc += g.data()[ch * per + i] * xh;
                        }
                        dg.data_mut()[ch] = acc;
                    }
                    self.add_grad(grads, *gain, dg);
                }
                if self.nodes[*input].requires_grad {
                    let mut dx = Tensor::zeros(&shape);
                    for grp in 0..*groups {
                        let base = grp * group_len;
                        // Means of h = gain*g and h*x_hat over the group.
                        let mut h_mean = 0.0;
                        let mut hx_mean = 0.0;
                        for k in 0..cpg {
                            let ch = grp * cpg + k;
                            for i in 0..per {
                                let e = ch * per + i;
                                let h = gain_v[ch] * g.data()[e];
                                let xh = (x[e] - mean[grp]) * inv_std[grp];
                                h_mean += h;
                                hx_mean += h * xh;
                            }
                        }
                        h_mean /= group_len as f64;
                        hx_mean /= group_len as f64;
                        for k in 0..cpg {
                            let ch = grp * cpg + k;
                            for i in 0..per {
                                let e = ch * per + i;
                                let h = gain_v[ch] * g.data()[e];
                                let xh = (x[e] - mean[grp]) * inv_std[grp];
                                dx.data_mut()[e] = inv_std[grp] * (h - h_mean - xh * hx_mean);
                            }
                        }
                        let _ = base;
                    }
                    self.add_grad(grads, *input, dx);
                }
            }
            Op::LeakyRelu { input, slope } => {
                let mut dx = g.clone();
                for (d, &v) in dx.data_mut().iter_mut().zip(self.value(*input).data()) {
                    if v < 0.0 {
                        *d *= slope;
                    }
                }
                self.add_grad(grads, *input, dx);
            }
            Op::Sigmoid { input } => {
                let mut dx = g.clone();
                for (d, &y) in dx.data_mut().iter_mut().zip(self.value(id).data()) {
                    *d *= y * (1.0 - y);
                }
                self.add_grad(grads, *input, dx);
            }
            Op::MaxPool2d { input, argmax } => {
                let mut dx = Tensor::zeros(self.value(*input).shape());
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src as usize] += g.data()[o];
                }
                self.add_grad(grads, *input, dx);
            }
            Op::GlobalMaxPool { input, argmax } => {
                let mut dx = Tensor::zeros(self.value(*input).shape());
                for (c, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src as usize] += g.data()[c];
                }
                self.add_grad(grads, *input, dx);
            }
            Op::UpsampleNearest2x { input } => {
                let (c, h, w) = Self::dims3(self.value(*input));
                let mut dx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            dx.data_mut()[(ch * h + y / 2) * w + x / 2] +=
                                g.data()[(ch * 2 * h + y) * 2 * w + x];
                        }
                    }
                }
                self.add_grad(grads, *input, dx);
            }
            Op::ConcatCh { a, b } => {
                let na = self.value(*a).numel();
                let da = Tensor::from_vec(self.value(*a).shape(), g.data()[..na].to_vec());
                let db = Tensor::from_vec(self.value(*b).shape(), g.data()[na..].to_vec());
                self.add_grad(grads, *a, da);
                self.add_grad(grads, *b, db);
            }
            Op::Add { a, b } => {
                self.add_grad(grads, *a, g.clone());
                self.add_grad(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.add_grad(grads, *a, g.clone());
                let mut db = g.clone();
                for v in db.data_mut() {
                    *v = -*v;
                }
                self.add_grad(grads, *b, db);
            }
            Op::Mul { a, b } => {
                let mut da = g.clone();
                for (d, &v) in da.data_mut().iter_mut().zip(self.value(*b).data()) {
                    *d *= v;
                }
                self.add_grad(grads, *a, da);
                let mut db = g.clone();
                for (d, &v) in db.data_mut().iter_mut().zip(self.value(*a).data()) {
                    *d *= v;
                }
                self.add_grad(grads, *b, db);
            }
            Op::Scale { input, c } => {
                let mut dx = g.clone();
                for v in dx.data_mut() {
                    *v *= c;
                }
                self.add_grad(grads, *input, dx);
            }
            Op::AddScalar { input } => {
                self.add_grad(grads, *input, g.clone());
            }
            Op::MulBroadcastHw { x, s } => {
                let plane = self.value(*s).numel();
                let lead = self.value(*x).numel() / plane;
                if self.nodes[*x].requires_grad {
                    let mut dx = g.clone();
                    let sv = self.value(*s).data();
                    for l in 0..lead {
                        for p in 0..plane {
                            dx.data_mut()[l * plane + p] *= sv[p];
                        }
                    }
                    self.add_grad(grads, *x, dx);
                }
                if self.nodes[*s].requires_grad {
                    let mut ds = Tensor::zeros(self.value(*s).shape());
                    let xv = self.value(*x).data();
                    for l in 0..lead {
                        for p in 0..plane {
                            ds.data_mut()[p] += g.data()[l * plane + p] * xv[l * plane + p];
                        }
                    }
                    self.add_grad(grads, *s, ds);
                }
            }
            Op::InflateTime { input, t } => {
                let (c, h, w) = Self::dims3(self.value(*input));
                let plane = h * w;
                let mut dx = Tensor::zeros(&[c, h, w]);
                for ch in 0..c {
                    for tt in 0..*t {
                        let src = &g.data()[(ch * t + tt) * plane..(ch * t + tt + 1) * plane];
                        let dst = &mut dx.data_mut()[ch * plane..(ch + 1) * plane];
                        for (d, &v) in dst.iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
                self.add_grad(grads, *input, dx);
            }
            Op::Transpose01 { input } => {
                let shape = self.value(id).shape().to_vec();
                let (a, b) = (shape[0], shape[1]);
                let inner: usize = shape[2..].iter().product();
                let mut dx = Tensor::zeros(self.value(*input).shape());
                {
                    let o = dx.data_mut();
                    for i in 0..a {
                        for j in 0..b {
                            let src = &g.data()[(i * b + j) * inner..(i * b + j + 1) * inner];
                            o[(j * a + i) * inner..(j * a + i + 1) * inner]
                                .copy_from_slice(src);
                        }
                    }
                }
                self.add_grad(grads, *input, dx);
            }
            Op::AffineCombine { z, maps, alpha, beta } => {
                let (k, h, w) = Self::dims3(self.value(*maps));
                let plane = h * w;
                let zd = self.value(*z).data();
                let md = self.value(*maps).data();
                let ad = self.value(*alpha).data();
                // Shared per-channel dot product sum_hw g * maps[k].
                let mut dot = vec![0.0f64; k];
                for ch in 0..k {
                    let src = &md[ch * plane..(ch + 1) * plane];
                    dot[ch] = g.data().iter().zip(src).map(|(a, b)| a * b).sum();
                }
                if self.nodes[*beta].requires_grad {
                    self.add_grad(grads, *beta, Tensor::scalar(g.data().iter().sum()));
                }
                if self.nodes[*alpha].requires_grad {
                    let mut da = Tensor::zeros(&[k]);
                    for ch in 0..k {
                        da.data_mut()[ch] = zd[ch] * dot[ch];
                    }
                    self.add_grad(grads, *alpha, da);
                }
                if self.nodes[*z].requires_grad {
                    let mut dz = Tensor::zeros(&[k]);
                    for ch in 0..k {
                        dz.data_mut()[ch] = ad[ch] * dot[ch];
                    }
                    self.add_grad(grads, *z, dz);
                }
                if self.nodes[*maps].requires_grad {
                    let mut dm = Tensor::zeros(&[k, h, w]);
                    for ch in 0..k {
                        let coeff = ad[ch] * zd[ch];
                        if coeff == 0.0 {
                            continue;
                        }
                        let dst = &mut dm.data_mut()[ch * plane..(ch + 1) * plane];
                        for (d, &gv) in dst.iter_mut().zip(g.data()) {
                            *d = coeff * gv;
                        }
                    }
                    self.add_grad(grads, *maps, dm);
                }
            }
            Op::DynamicImage {
                frames,
                coeffs,
                stats,
            } => {
                let (t, c, h, w) = Self::dims4(self.value(*frames));
                let plane = h * w;
                let y = self.value(id).data();
                // Gradient w.r.t. the pooled pre-normalization image.
                let mut dpool = vec![0.0f64; c * plane];
                for (ch, st) in stats.iter().enumerate() {
                    let denom = st.max - st.min;
                    if denom < 1e-12 {
                        continue;
                    }
                    let gs = &g.data()[ch * plane..(ch + 1) * plane];
                    let ys = &y[ch * plane..(ch + 1) * plane];
                    let s1: f64 = gs.iter().sum();
                    let s2: f64 = gs.iter().zip(ys).map(|(a, b)| a * b).sum();
                    let dst = &mut dpool[ch * plane..(ch + 1) * plane];
                    for (d, &gv) in dst.iter_mut().zip(gs) {
                        *d = gv / denom;
                    }
                    dst[st.argmin] += (-s1 + s2) / denom;
                    dst[st.argmax] -= s2 / denom;
                }
                let mut dx = Tensor::zeros(&[t, c, h, w]);
                for (tt, &a) in coeffs.iter().enumerate() {
                    for ch in 0..c {
                        let src = &dpool[ch * plane..(ch + 1) * plane];
                        let dst = &mut dx.data_mut()
                            [(tt * c + ch) * plane..(tt * c + ch + 1) * plane];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d = a * s;
                        }
                    }
                }
                self.add_grad(grads, *frames, dx);
            }
            Op::SigmoidBce { logits, target } => {
                let n = target.numel() as f64;
                let scale = g.data()[0] / n;
                let mut dx = Tensor::zeros(target.shape());
                for ((d, &x), &tgt) in dx
                    .data_mut()
                    .iter_mut()
                    .zip(self.value(*logits).data())
                    .zip(target.data())
                {
                    let p = 1.0 / (1.0 + (-x).exp());
                    *d = scale * (p - tgt);
                }
                self.add_grad(grads, *logits, dx);
            }
            Op::L1Mean { a, b } => {
                let n = self.value(*a).numel() as f64;
                let scale = g.data()[0] / n;
                let mut da = Tensor::zeros(self.value(*a).shape());
                for ((d, &x), &y) in da
                    .data_mut()
                    .iter_mut()
                    .zip(self.value(*a).data())
                    .zip(self.value(*b).data())
                {
                    *d = scale * (x - y).signum_or_zero();
                }
                if self.nodes[*b].requires_grad {
                    let mut db = da.clone();
                    for v in db.data_mut() {
                        *v = -*v;
                    }
                    self.add_grad(grads, *b, db);
                }
                self.add_grad(grads, *a, da);
            }
            Op::MeanAbs { input } => {
                let n = self.value(*input).numel() as f64;
                let scale = g.data()[0] / n;
                let mut dx = Tensor::zeros(self.value(*input).shape());
                for (d, &x) in dx.data_mut().iter_mut().zip(self.value(*input).data()) {
                    *d = scale * x.signum_or_zero();
                }
                self.add_grad(grads, *input, dx);
            }
            Op::SumAll { input } => {
                let dx = Tensor::full(self.value(*input).shape(), g.data()[0]);
                self.add_grad(grads, *input, dx);
            }
            Op::WeightedSum { terms } => {
                for &(tid, c) in terms {
                    self.add_grad(grads, tid, Tensor::scalar(g.data()[0] * c));
                }
            }
        }
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f64;
}

impl SignumOrZero for f64 {
    fn signum_or_zero(self) -> f64 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

pub fn conv_out(n: usize, k: usize, stride: usize, pad: usize, dilation: usize) -> usize {
    let eff = dilation * (k - 1) + 1;
    assert!(
        n + 2 * pad >= eff,
        "input {n} too small for kernel {k} (dilation {dilation}, pad {pad})"
    );
    (n + 2 * pad - eff) / stride + 1
}

// ---- convolution kernels -------------------------------------------------------
//
// im2col + GEMM formulation. The patch matrix is materialized in tiles of
// whole output rows so the working set stays cache-sized and the gather and
// scatter run over contiguous spans (no per-element index arithmetic); the
// three passes (forward, weight gradient, input gradient) then reduce to
// dense products with contiguous inner loops.

/// Output rows per tile, keeping the patch buffer near 2 MB.
fn tile_out_rows(patch_rows: usize, row_width: usize, total_rows: usize) -> usize {
    let budget = 2 * 1024 * 1024 / 8;
    (budget / patch_rows.max(1) / row_width.max(1)).clamp(1, total_rows.max(1))
}

/// C (m x p, row-major) += A (m x k) * B (k x p).
fn gemm_axpy(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * p..(i + 1) * p];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * p..(kk + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// C (m x k) += A (m x p) rows dotted with B (k x p) rows.
fn gemm_abt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * p..(i + 1) * p];
        let crow = &mut c[i * k..(i + 1) * k];
        for kk in 0..k {
            let brow = &b[kk * p..(kk + 1) * p];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            crow[kk] += acc;
        }
    }
}

/// C (k x p) += A^T * B where A is (m x k), B is (m x p).
fn gemm_atb(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, p: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * p..(i + 1) * p];
        for (kk, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[kk * p..(kk + 1) * p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// One patch row's geometry along the output width: the valid output-column
/// interval and the matching input start column.
struct RowSpan {
    ow0: usize,
    ow1: usize,
    ix0: usize,
}

fn row_span(w: usize, ow: usize, stride: usize, dx: isize) -> Option<RowSpan> {
    // Valid ow satisfy 0 <= ow*stride + dx < w.
    let ow0 = if dx >= 0 {
        0
    } else {
        ((-dx) as usize).div_ceil(stride)
    };
    let limit = w as isize - dx; // need ow*stride < limit
    if limit <= 0 {
        return None;
    }
    let ow1 = ow.min(((limit - 1) as usize) / stride + 1);
    if ow0 >= ow1 {
        return None;
    }
    let ix0 = (ow0 * stride) as isize + dx;
    Some(RowSpan {
        ow0,
        ow1,
        ix0: ix0 as usize,
    })
}

#[inline]
fn copy_strided(dst: &mut [f64], src: &[f64], stride: usize) {
    if stride == 1 {
        dst.copy_from_slice(&src[..dst.len()]);
    } else {
        for (i, d) in dst.iter_mut().enumerate() {
            *d = src[i * stride];
        }
    }
}

#[inline]
fn add_strided(dst: &mut [f64], src: &[f64], stride: usize) {
    if stride == 1 {
        for (d, &s) in dst.iter_mut().zip(src) {
            *d += s;
        }
    } else {
        for (i, &s) in src.iter().enumerate() {
            dst[i * stride] += s;
        }
    }
}

struct Geom2d {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ow: usize,
    stride: usize,
    pad: isize,
    dilation: usize,
}

impl Geom2d {
    fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Gather patch rows for output rows `[oh0, oh1)` into `cols`
    /// (`rows x (oh1-oh0)*ow`, row-major).
    fn gather(&self, x: &[f64], oh0: usize, oh1: usize, cols: &mut [f64]) {
        let width = (oh1 - oh0) * self.ow;
        let rows = self.rows();
        cols[..rows * width].fill(0.0);
        for (r, row) in cols[..rows * width].chunks_exact_mut(width).enumerate() {
            let kw = r % self.kw;
            let kh = (r / self.kw) % self.kh;
            let ic = r / (self.kw * self.kh);
            let dy = (kh * self.dilation) as isize - self.pad;
            let dx = (kw * self.dilation) as isize - self.pad;
            let span = match row_span(self.w, self.ow, self.stride, dx) {
                Some(s) => s,
                None => continue,
            };
            let x_ch = &x[ic * self.h * self.w..(ic + 1) * self.h * self.w];
            for oy in oh0..oh1 {
                let iy = (oy * self.stride) as isize + dy;
                if iy < 0 || iy >= self.h as isize {
                    continue;
                }
                let src = &x_ch[iy as usize * self.w + span.ix0..];
                let dst = &mut row[(oy - oh0) * self.ow + span.ow0
                    ..(oy - oh0) * self.ow + span.ow1];
                copy_strided(dst, src, self.stride);
            }
        }
    }

    /// Scatter-add patch-row gradients back into the input gradient.
    fn scatter_add(&self, cols: &[f64], oh0: usize, oh1: usize, dx_out: &mut [f64]) {
        let width = (oh1 - oh0) * self.ow;
        for (r, row) in cols[..self.rows() * width].chunks_exact(width).enumerate() {
            let kw = r % self.kw;
            let kh = (r / self.kw) % self.kh;
            let ic = r / (self.kw * self.kh);
            let dy = (kh * self.dilation) as isize - self.pad;
            let dxs = (kw * self.dilation) as isize - self.pad;
            let span = match row_span(self.w, self.ow, self.stride, dxs) {
                Some(s) => s,
                None => continue,
            };
            let base = ic * self.h * self.w;
            for oy in oh0..oh1 {
                let iy = (oy * self.stride) as isize + dy;
                if iy < 0 || iy >= self.h as isize {
                    continue;
                }
                let src = &row[(oy - oh0) * self.ow + span.ow0
                    ..(oy - oh0) * self.ow + span.ow1];
                let dst_off = base + iy as usize * self.w + span.ix0;
                if self.stride == 1 {
                    let dst = &mut dx_out[dst_off..dst_off + src.len()];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                } else {
                    add_strided(&mut dx_out[dst_off..], src, self.stride);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    out: &mut [f64],
    [c_in, h, win]: [usize; 3],
    [oc, kh, kw, oh, ow]: [usize; 5],
    stride: usize,
    pad: usize,
    dilation: usize,
) {
    let geom = Geom2d {
        c_in,
        h,
        w: win,
        kh,
        kw,
        ow,
        stride,
        pad: pad as isize,
        dilation,
    };
    let rows = geom.rows();
    let total = oh * ow;
    let step = tile_out_rows(rows, ow, oh);
    let mut cols = vec![0.0f64; rows * step * ow];
    let mut tile_out = vec![0.0f64; oc * step * ow];
    let mut oh0 = 0;
    while oh0 < oh {
        let oh1 = (oh0 + step).min(oh);
        let width = (oh1 - oh0) * ow;
        geom.gather(x, oh0, oh1, &mut cols);
        for o in 0..oc {
            tile_out[o * width..(o + 1) * width].fill(b[o]);
        }
        gemm_axpy(w, &cols, &mut tile_out, oc, rows, width);
        for o in 0..oc {
            out[o * total + oh0 * ow..o * total + oh1 * ow]
                .copy_from_slice(&tile_out[o * width..(o + 1) * width]);
        }
        oh0 = oh1;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_weight(
    x: &[f64],
    gout: &[f64],
    dw: &mut [f64],
    [c_in, h, win]: [usize; 3],
    [oc, kh, kw, oh, ow]: [usize; 5],
    stride: usize,
    pad: usize,
    dilation: usize,
) {
    let geom = Geom2d {
        c_in,
        h,
        w: win,
        kh,
        kw,
        ow,
        stride,
        pad: pad as isize,
        dilation,
    };
    let rows = geom.rows();
    let total = oh * ow;
    let step = tile_out_rows(rows, ow, oh);
    let mut cols = vec![0.0f64; rows * step * ow];
    let mut gtile = vec![0.0f64; oc * step * ow];
    let mut oh0 = 0;
    while oh0 < oh {
        let oh1 = (oh0 + step).min(oh);
        let width = (oh1 - oh0) * ow;
        geom.gather(x, oh0, oh1, &mut cols);
        for o in 0..oc {
            gtile[o * width..(o + 1) * width]
                .copy_from_slice(&gout[o * total + oh0 * ow..o * total + oh1 * ow]);
        }
        gemm_abt(&gtile, &cols, dw, oc, rows, width);
        oh0 = oh1;
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward_input(
    w: &[f64],
    gout: &[f64],
    dx: &mut [f64],
    [c_in, h, win]: [usize; 3],
    [oc, kh, kw, oh, ow]: [usize; 5],
    stride: usize,
    pad: usize,
    dilation: usize,
) {
    let geom = Geom2d {
        c_in,
        h,
        w: win,
        kh,
        kw,
        ow,
        stride,
        pad: pad as isize,
        dilation,
    };
    let rows = geom.rows();
    let total = oh * ow;
    let step = tile_out_rows(rows, ow, oh);
    let mut dcols = vec![0.0f64; rows * step * ow];
    let mut gtile = vec![0.0f64; oc * step * ow];
    let mut oh0 = 0;
    while oh0 < oh {
        let oh1 = (oh0 + step).min(oh);
        let width = (oh1 - oh0) * ow;
        for o in 0..oc {
            gtile[o * width..(o + 1) * width]
                .copy_from_slice(&gout[o * total + oh0 * ow..o * total + oh1 * ow]);
        }
        dcols[..rows * width].fill(0.0);
        gemm_atb(w, &gtile, &mut dcols, oc, rows, width);
        geom.scatter_add(&dcols, oh0, oh1, dx);
        oh0 = oh1;
    }
}

/// 3-d geometry: output positions tile over whole (t, y) output rows.
struct Geom3d {
    c_in: usize,
    t: usize,
    h: usize,
    w: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride_t: usize,
    stride_s: usize,
    pad_t: isize,
    pad_s: isize,
}

impl Geom3d {
    fn rows(&self) -> usize {
        self.c_in * self.kt * self.kh * self.kw
    }

    /// Gather patch rows for flattened output rows `[row0, row1)`, where a
    /// flattened row index is `ot * oh + oy`.
    fn gather(&self, x: &[f64], row0: usize, row1: usize, cols: &mut [f64]) {
        let width = (row1 - row0) * self.ow;
        let rows = self.rows();
        cols[..rows * width].fill(0.0);
        let in_plane = self.h * self.w;
        for (r, row) in cols[..rows * width].chunks_exact_mut(width).enumerate() {
            let kw = r % self.kw;
            let kh = (r / self.kw) % self.kh;
            let kt = (r / (self.kw * self.kh)) % self.kt;
            let ic = r / (self.kw * self.kh * self.kt);
            let dz = kt as isize - self.pad_t;
            let dy = kh as isize - self.pad_s;
            let dxs = kw as isize - self.pad_s;
            let span = match row_span(self.w, self.ow, self.stride_s, dxs) {
                Some(s) => s,
                None => continue,
            };
            let x_ch = &x[ic * self.t * in_plane..(ic + 1) * self.t * in_plane];
            for flat in row0..row1 {
                let ot = flat / self.oh;
                let oy = flat % self.oh;
                let iz = (ot * self.stride_t) as isize + dz;
                let iy = (oy * self.stride_s) as isize + dy;
                if iz < 0 || iz >= self.t as isize || iy < 0 || iy >= self.h as isize {
                    continue;
                }
                let src = &x_ch[iz as usize * in_plane + iy as usize * self.w + span.ix0..];
                let dst = &mut row[(flat - row0) * self.ow + span.ow0
                    ..(flat - row0) * self.ow + span.ow1];
                copy_strided(dst, src, self.stride_s);
            }
        }
    }

    fn scatter_add(&self, cols: &[f64], row0: usize, row1: usize, dx_out: &mut [f64]) {
        let width = (row1 - row0) * self.ow;
        let in_plane = self.h * self.w;
        for (r, row) in cols[..self.rows() * width].chunks_exact(width).enumerate() {
            let kw = r % self.kw;
            let kh = (r / self.kw) % self.kh;
            let kt = (r / (self.kw * self.kh)) % self.kt;
            let ic = r / (self.kw * self.kh * self.kt);
            let dz = kt as isize - self.pad_t;
            let dy = kh as isize - self.pad_s;
            let dxs = kw as isize - self.pad_s;
            let span = match row_span(self.w, self.ow, self.stride_s, dxs) {
                Some(s) => s,
                None => continue,
            };
            let base = ic * self.t * in_plane;
            for flat in row0..row1 {
                let ot = flat / self.oh;
                let oy = flat % self.oh;
                let iz = (ot * self.stride_t) as isize + dz;
                let iy = (oy * self.stride_s) as isize + dy;
                if iz < 0 || iz >= self.t as isize || iy < 0 || iy >= self.h as isize {
                    continue;
                }
                let src = &row[(flat - row0) * self.ow + span.ow0
                    ..(flat - row0) * self.ow + span.ow1];
                let dst_off = base + iz as usize * in_plane + iy as usize * self.w + span.ix0;
                if self.stride_s == 1 {
                    let dst = &mut dx_out[dst_off..dst_off + src.len()];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                } else {
                    add_strided(&mut dx_out[dst_off..], src, self.stride_s);
                }
            }
        }
    }
}

fn conv3d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    out: &mut [f64],
    [c_in, t, h, win]: [usize; 4],
    [oc, kt, kh, kw, ot, oh, ow]: [usize; 7],
    [stride_t, stride_s, pad_t, pad_s]: [usize; 4],
) {
    let geom = Geom3d {
        c_in,
        t,
        h,
        w: win,
        kt,
        kh,
        kw,
        oh,
        ow,
        stride_t,
        stride_s,
        pad_t: pad_t as isize,
        pad_s: pad_s as isize,
    };
    let rows = geom.rows();
    let total = ot * oh * ow;
    let flat_rows = ot * oh;
    let step = tile_out_rows(rows, ow, flat_rows);
    let mut cols = vec![0.0f64; rows * step * ow];
    let mut tile_out = vec![0.0f64; oc * step * ow];
    let mut r0 = 0;
    while r0 < flat_rows {
        let r1 = (r0 + step).min(flat_rows);
        let width = (r1 - r0) * ow;
        geom.gather(x, r0, r1, &mut cols);
        for o in 0..oc {
            tile_out[o * width..(o + 1) * width].fill(b[o]);
        }
        gemm_axpy(w, &cols, &mut tile_out, oc, rows, width);
        for o in 0..oc {
            out[o * total + r0 * ow..o * total + r1 * ow]
                .copy_from_slice(&tile_out[o * width..(o + 1) * width]);
        }
        r0 = r1;
    }
}

fn conv3d_backward_weight(
    x: &[f64],
    gout: &[f64],
    dw: &mut [f64],
    [c_in, t, h, win]: [usize; 4],
    [oc, kt, kh, kw, ot, oh, ow]: [usize; 7],
    [stride_t, stride_s, pad_t, pad_s]: [usize; 4],
) {
    let geom = Geom3d {
        c_in,
        t,
        h,
        w: win,
        kt,
        kh,
        kw,
        oh,
        ow,
        stride_t,
        stride_s,
        pad_t: pad_t as isize,
        pad_s: pad_s as isize,
    };
    let rows = geom.rows();
    let total = ot * oh * ow;
    let flat_rows = ot * oh;
    let step = tile_out_rows(rows, ow, flat_rows);
    let mut cols = vec![0.0f64; rows * step * ow];
    let mut gtile = vec![0.0f64; oc * step * ow];
    let mut r0 = 0;
    while r0 < flat_rows {
        let r1 = (r0 + step).min(flat_rows);
        let width = (r1 - r0) * ow;
        geom.gather(x, r0, r1, &mut cols);
        for o in 0..oc {
            gtile[o * width..(o + 1) * width]
                .copy_from_slice(&gout[o * total + r0 * ow..o * total + r1 * ow]);
        }
        gemm_abt(&gtile, &cols, dw, oc, rows, width);
        r0 = r1;
    }
}

fn conv3d_backward_input(
    w: &[f64],
    gout: &[f64],
    dx: &mut [f64],
    [c_in, t, h, win]: [usize; 4],
    [oc, kt, kh, kw, ot, oh, ow]: [usize; 7],
    [stride_t, stride_s, pad_t, pad_s]: [usize; 4],
) {
    let geom = Geom3d {
        c_in,
        t,
        h,
        w: win,
        kt,
        kh,
        kw,
        oh,
        ow,
        stride_t,
        stride_s,
        pad_t: pad_t as isize,
        pad_s: pad_s as isize,
    };
    let rows = geom.rows();
    let total = ot * oh * ow;
    let flat_rows = ot * oh;
    let step = tile_out_rows(rows, ow, flat_rows);
    let mut dcols = vec![0.0f64; rows * step * ow];
    let mut gtile = vec![0.0f64; oc * step * ow];
    let mut r0 = 0;
    while r0 < flat_rows {
        let r1 = (r0 + step).min(flat_rows);
        let width = (r1 - r0) * ow;
        for o in 0..oc {
            gtile[o * width..(o + 1) * width]
                .copy_from_slice(&gout[o * total + r0 * ow..o * total + r1 * ow]);
        }
        dcols[..rows * width].fill(0.0);
        gemm_atb(w, &gtile, &mut dcols, oc, rows, width);
        geom.scatter_add(&dcols, r0, r1, dx);
        r0 = r1;
    }
}
