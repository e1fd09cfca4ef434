use super::conv::{conv_backward, conv_forward, conv_output_len, ConvGeometry};
use super::{Backward, Graph, NodeId, Scalar, Tensor};
use crate::error::{Error, Result};

struct Conv2d {
    geometry: ConvGeometry,
}

impl<S: Scalar> Backward<S> for Conv2d {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, needs: &[bool]) -> Vec<Option<Tensor<S>>> {
        let g = conv_backward(inputs[0].data(), inputs[1].data(), grad.data(), &self.geometry, needs[0], needs[1]);
        vec![
            g.dx.map(|d| Tensor { shape: inputs[0].shape().to_vec(), data: d }),
            g.dw.map(|d| Tensor { shape: inputs[1].shape().to_vec(), data: d }),
        ]
    }
}

/// 2-D cross-correlation of `[N, Cin, H, W]` with `[Cout, Cin, kh, kw]`.
pub fn conv2d<S: Scalar>(g: &mut Graph<S>, input: NodeId, weight: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
    let [n, cin, h, w] = g.value(input).dims4("conv2d")?;
    let [cout, wcin, kh, kw] = g.value(weight).dims4("conv2d")?;
    if wcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels but weight {:?} expects {wcin}", g.value(weight).shape()),
        ));
    }
    let (Some(oh), Some(ow)) = (conv_output_len(h, kh, stride, pad), conv_output_len(w, kw, stride, pad)) else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit input {h}x{w}"),
        ));
    };
    let geometry = ConvGeometry { n, cin, h, w, cout, kh, kw, stride, pad, oh, ow };
    let out = conv_forward(g.value(input).data(), g.value(weight).data(), &geometry);
    let value = Tensor { shape: vec![n, cout, oh, ow], data: out };
    Ok(g.push(value, &[input, weight], Box::new(Conv2d { geometry })))
}

struct MaxPool {
    argmax: Vec<usize>,
}

impl<S: Scalar> Backward<S> for MaxPool {
    fn name(&self) -> &'static str {
        "maxpool2d"
    }

    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, _: &[bool]) -> Vec<Option<Tensor<S>>> {
        let mut dx = Tensor::zeros(inputs[0].shape());
        for (&src, &gv) in self.argmax.iter().zip(grad.data()) {
            dx.data[src] += gv;
        }
        vec![Some(dx)]
    }
}

/// Max pooling without padding. Ties resolve to the first element in
/// row-major window order, which is where the gradient goes.
pub fn maxpool2d<S: Scalar>(g: &mut Graph<S>, input: NodeId, k: usize, stride: usize) -> Result<NodeId> {
    let x = g.value(input);
    let [n, c, h, w] = x.dims4("maxpool2d")?;
    if k == 0 || stride == 0 || k > h || k > w {
        return Err(Error::shape(
            "maxpool2d",
            format!("window {k} stride {stride} does not fit input {h}x{w}"),
        ));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                out.push(xd[best]);
                argmax.push(best);
            }
        }
    }
    let value = Tensor { shape: vec![n, c, oh, ow], data: out };
    Ok(g.push(value, &[input], Box::new(MaxPool { argmax })))
}

struct Upsample2x;

impl<S: Scalar> Backward<S> for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample_nearest2x"
    }

    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, _: &[bool]) -> Vec<Option<Tensor<S>>> {
        let [n, c, h, w] = inputs[0].dims4("upsample").expect("checked in forward");
        let mut dx = Tensor::zeros(inputs[0].shape());
        let gd = grad.data();
        for plane in 0..n * c {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    dx.data[plane * h * w + (y / 2) * w + x / 2] += gd[plane * 4 * h * w + y * 2 * w + x];
                }
            }
        }
        vec![Some(dx)]
    }
}

pub fn upsample_nearest2x<S: Scalar>(g: &mut Graph<S>, input: NodeId) -> Result<NodeId> {
    let x = g.value(input);
    let [n, c, h, w] = x.dims4("upsample_nearest2x")?;
    let xd = x.data();
    let mut out = vec![S::zero(); n * c * 4 * h * w];
    for plane in 0..n * c {
        for y in 0..2 * h {
            for xx in 0..2 * w {
                out[plane * 4 * h * w + y * 2 * w + xx] = xd[plane * h * w + (y / 2) * w + xx / 2];
            }
        }
    }
    let value = Tensor { shape: vec![n, c, 2 * h, 2 * w], data: out };
    Ok(g.push(value, &[input], Box::new(Upsample2x)))
}

struct Concat {
    ca: usize,
    cb: usize,
}

impl<S: Scalar> Backward<S> for Concat {
    fn name(&self) -> &'static str {
        "concat_channels"
    }

    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, needs: &[bool]) -> Vec<Option<Tensor<S>>> {
        let [n, _, h, w] = inputs[0].dims4("concat").expect("checked in forward");
        let plane = h * w;
        let c = self.ca + self.cb;
        let gd = grad.data();
        let split = |offset: usize, width: usize| {
            let mut d = Vec::with_capacity(n * width * plane);
            for img in 0..n {
                let start = (img * c + offset) * plane;
                d.extend_from_slice(&gd[start..start + width * plane]);
            }
            d
        };
        vec![
            needs[0].then(|| Tensor { shape: inputs[0].shape().to_vec(), data: split(0, self.ca) }),
            needs[1].then(|| Tensor { shape: inputs[1].shape().to_vec(), data: split(self.ca, self.cb) }),
        ]
    }
}

/// Channel-wise stacking, `a` first.
pub fn concat_channels<S: Scalar>(g: &mut Graph<S>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let [na, ca, ha, wa] = g.value(a).dims4("concat_channels")?;
    let [nb, cb, hb, wb] = g.value(b).dims4("concat_channels")?;
    if (na, ha, wa) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("cannot stack {:?} with {:?}", g.value(a).shape(), g.value(b).shape()),
        ));
    }
    let plane = ha * wa;
    let (ad, bd) = (g.value(a).data(), g.value(b).data());
    let mut out = Vec::with_capacity(na * (ca + cb) * plane);
    for img in 0..na {
        out.extend_from_slice(&ad[img * ca * plane..(img + 1) * ca * plane]);
        out.extend_from_slice(&bd[img * cb * plane..(img + 1) * cb * plane]);
    }
    let value = Tensor { shape: vec![na, ca + cb, ha, wa], data: out };
    Ok(g.push(value, &[a, b], Box::new(Concat { ca, cb })))
}

struct Add;

impl<S: Scalar> Backward<S> for Add {
    fn name(&self) -> &'static str {
        "add"
    }

    fn backward(&self, _: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, needs: &[bool]) -> Vec<Option<Tensor<S>>> {
        vec![needs[0].then(|| grad.clone()), needs[1].then(|| grad.clone())]
    }
}

pub fn add<S: Scalar>(g: &mut Graph<S>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (x, y) = (g.value(a), g.value(b));
    if x.shape() != y.shape() {
        return Err(Error::shape("add", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
    let value = Tensor { shape: x.shape().to_vec(), data };
    Ok(g.push(value, &[a, b], Box::new(Add)))
}

struct Mul;

impl<S: Scalar> Backward<S> for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }

    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, needs: &[bool]) -> Vec<Option<Tensor<S>>> {
        let prod = |other: &Tensor<S>| Tensor {
            shape: other.shape().to_vec(),
            data: grad.data().iter().zip(other.data()).map(|(&g, &o)| g * o).collect(),
        };
        vec![needs[0].then(|| prod(inputs[1])), needs[1].then(|| prod(inputs[0]))]
    }
}

/// Elementwise product of equal-shaped tensors.
pub fn mul<S: Scalar>(g: &mut Graph<S>, a: NodeId, b: NodeId) -> Result<NodeId> {
    let (x, y) = (g.value(a), g.value(b));
    if x.shape() != y.shape() {
        return Err(Error::shape("mul", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
    let value = Tensor { shape: x.shape().to_vec(), data };
    Ok(g.push(value, &[a, b], Box::new(Mul)))
}

pub fn square<S: Scalar>(g: &mut Graph<S>, a: NodeId) -> Result<NodeId> {
    mul(g, a, a)
}

struct Scale<S> {
    factor: S,
}

impl<S: Scalar> Backward<S> for Scale<S> {
    fn name(&self) -> &'static str {
        "scale"
    }

    fn backward(&self, _: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, _: &[bool]) -> Vec<Option<Tensor<S>>> {
        vec![Some(grad.map(|v| v * self.factor))]
    }
}

pub fn scale<S: Scalar>(g: &mut Graph<S>, a: NodeId, factor: S) -> NodeId {
    let value = g.value(a).map(|v| v * factor);
    g.push(value, &[a], Box::new(Scale { factor }))
}

struct Sum;

impl<S: Scalar> Backward<S> for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }

    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, _: &[bool]) -> Vec<Option<Tensor<S>>> {
        vec![Some(Tensor::full(inputs[0].shape(), grad.data()[0]))]
    }
}

/// Sum of all elements as a one-element tensor.
pub fn sum<S: Scalar>(g: &mut Graph<S>, a: NodeId) -> NodeId {
    let value = Tensor::scalar(g.value(a).sum_all());
    g.push(value, &[a], Box::new(Sum))
}

struct ChannelBias;

impl<S: Scalar> Backward<S> for ChannelBias {
    fn name(&self) -> &'static str {
        "add_channel_bias"
    }

    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, needs: &[bool]) -> Vec<Option<Tensor<S>>> {
        let [n, c, h, w] = inputs[0].dims4("bias").expect("checked in forward");
        let db = needs[1].then(|| {
            let mut db = vec![S::zero(); c];
            for img in 0..n {
                for (ch, acc) in db.iter_mut().enumerate() {
                    let start = (img * c + ch) * h * w;
                    *acc += grad.data()[start..start + h * w].iter().copied().sum::<S>();
                }
            }
            Tensor { shape: vec![c], data: db }
        });
        vec![needs[0].then(|| grad.clone()), db]
    }
}

/// Adds a per-channel bias `[C]` to `[N, C, H, W]`.
pub fn add_channel_bias<S: Scalar>(g: &mut Graph<S>, x: NodeId, bias: NodeId) -> Result<NodeId> {
    let [n, c, h, w] = g.value(x).dims4("add_channel_bias")?;
    let b = g.value(bias);
    if b.shape() != [c] {
        return Err(Error::shape("add_channel_bias", format!("bias {:?} for {c} channels", b.shape())));
    }
    let mut out = g.value(x).data().to_vec();
    for img in 0..n {
        for ch in 0..c {
            let bv = b.data()[ch];
            let start = (img * c + ch) * h * w;
            out[start..start + h * w].iter_mut().for_each(|v| *v += bv);
        }
    }
    let value = Tensor { shape: vec![n, c, h, w], data: out };
    Ok(g.push(value, &[x, bias], Box::new(ChannelBias)))
}

struct RepeatTime {
    steps: usize,
}

impl<S: Scalar> Backward<S> for RepeatTime {
    fn name(&self) -> &'static str {
        "repeat_time"
    }

    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, _: &[bool]) -> Vec<Option<Tensor<S>>> {
        let len = inputs[0].numel();
        let mut dx = Tensor::zeros(inputs[0].shape());
        for t in 0..self.steps {
            for (d, &gv) in dx.data.iter_mut().zip(&grad.data()[t * len..(t + 1) * len]) {
                *d += gv;
            }
        }
        vec![Some(dx)]
    }
}

/// Tiles `[B, ...]` into the time-major `[T·B, ...]` layout; the backward pass
/// sums over time.
pub fn repeat_time<S: Scalar>(g: &mut Graph<S>, x: NodeId, steps: usize) -> Result<NodeId> {
    if steps == 0 {
        return Err(Error::Config("time steps must be at least 1".into()));
    }
    let v = g.value(x);
    let mut shape = v.shape().to_vec();
    shape[0] *= steps;
    let data = v.data().repeat(steps);
    let value = Tensor { shape, data };
    Ok(g.push(value, &[x], Box::new(RepeatTime { steps })))
}

struct MeanTime {
    steps: usize,
}

impl<S: Scalar> Backward<S> for MeanTime {
    fn name(&self) -> &'static str {
        "mean_over_time"
    }

    fn backward(&self, inputs: &[&Tensor<S>], _: &Tensor<S>, grad: &Tensor<S>, _: &[bool]) -> Vec<Option<Tensor<S>>> {
        let inv = S::one() / S::of(self.steps as f64);
        let scaled: Vec<S> = grad.data().iter().map(|&v| v * inv).collect();
        let data = scaled.repeat(self.steps);
        vec![Some(Tensor { shape: inputs[0].shape().to_vec(), data })]
    }
}

/// Averages a time-major `[T·B, ...]` tensor over its `T` steps.
pub fn mean_over_time<S: Scalar>(g: &mut Graph<S>, x: NodeId, steps: usize) -> Result<NodeId> {
    let v = g.value(x);
    if steps == 0 || !v.shape()[0].is_multiple_of(steps) {
        return Err(Error::shape(
            "mean_over_time",
            format!("leading axis {} is not a multiple of T={steps}", v.shape()[0]),
        ));
    }
    let len = v.numel() / steps;
    let inv = S::one() / S::of(steps as f64);
    let mut out = vec![S::zero(); len];
    for t in 0..steps {
        for (o, &x) in out.iter_mut().zip(&v.data()[t * len..(t + 1) * len]) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o *= inv);
    let mut shape = v.shape().to_vec();
    shape[0] /= steps;
    let value = Tensor { shape, data: out };
    Ok(g.push(value, &[x], Box::new(MeanTime { steps })))
}
