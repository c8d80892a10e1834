//! Convolutional building blocks: valid convolution, ReLU, 2×2 max pooling,
//! fully-connected layers, inverted dropout, and the parameter store.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{contract_err, dim_err, Result};
use crate::net::{NetworkConfig, Variant};
use crate::rng::RngStream;
use crate::tensor::{dot, matmul_raw, Graph, Tensor, Var};

/// Stride-1, unpadded convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: (usize, usize)) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 || kernel.0 == 0 || kernel.1 == 0 {
            return Err(dim_err!(
                "conv spec needs positive sizes, got {}→{} with kernel {:?}",
                in_channels,
                out_channels,
                kernel
            ));
        }
        Ok(ConvSpec {
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn output_extent(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        if h < kh || w < kw {
            return Err(dim_err!("input {}×{} is smaller than the {}×{} kernel", h, w, kh, kw));
        }
        Ok((h - kh + 1, w - kw + 1))
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    pub fn fan_out(&self) -> usize {
        self.out_channels * self.kernel.0 * self.kernel.1
    }
}

/// Unrolls valid kh×kw windows into a [c·kh·kw × oh·ow] matrix.
pub fn im2col(x: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let p = oh * ow;
    let mut cols = vec![0.0; c * kh * kw * p];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let src = (ci * h + oy + ky) * w + kx;
                    dst[oy * ow..(oy + 1) * ow].copy_from_slice(&x[src..src + ow]);
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im(cols: &[f64], c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<f64> {
    let (oh, ow) = (h - kh + 1, w - kw + 1);
    let p = oh * ow;
    let mut x = vec![0.0; c * h * w];
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let dst = (ci * h + oy + ky) * w + kx;
                    for (d, s) in x[dst..dst + ow].iter_mut().zip(&src[oy * ow..(oy + 1) * ow]) {
                        *d += s;
                    }
                }
            }
        }
    }
    x
}

fn check_conv_args(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(ConvSpec, usize, usize)> {
    if x.rank() != 3 || w.rank() != 4 || b.rank() != 1 {
        return Err(dim_err!(
            "conv2d expects x[C×H×W], w[O×C×kh×kw], b[O]; got {:?}, {:?}, {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let ws = w.shape();
    if ws[1] != c || b.shape()[0] != ws[0] {
        return Err(dim_err!(
            "conv2d channel mismatch: x {:?}, w {:?}, b {:?}",
            x.shape(),
            ws,
            b.shape()
        ));
    }
    let spec = ConvSpec::new(c, ws[0], (ws[2], ws[3]))?;
    spec.output_extent(h, wd)?;
    Ok((spec, h, wd))
}

/// Valid cross-correlation plus bias via im2col and a row-major GEMM.
pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (spec, h, wd) = check_conv_args(x, w, b)?;
    let (oh, ow) = spec.output_extent(h, wd)?;
    let (kh, kw) = spec.kernel;
    let cols = im2col(x.data(), spec.in_channels, h, wd, kh, kw);
    let mut out = matmul_raw(w.data(), &cols, spec.out_channels, spec.fan_in(), oh * ow);
    for (o, row) in out.chunks_mut(oh * ow).enumerate() {
        let bias = b.data()[o];
        row.iter_mut().for_each(|v| *v += bias);
    }
    Tensor::new(&[spec.out_channels, oh, ow], out)
}

pub fn relu_forward(x: &Tensor) -> Result<Tensor> {
    x.map(|v| v.max(0.0))
}

/// 2×2, stride-2 max pooling. Returns the pooled tensor and, per output
/// element, the flat input index of its maximum (first index wins ties).
pub fn maxpool2_forward(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    if x.rank() != 3 {
        return Err(dim_err!("maxpool2 expects [C×H×W], got {:?}", x.shape()));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h < 2 || w < 2 {
        return Err(dim_err!("maxpool2 needs at least 2×2, got {}×{}", h, w));
    }
    let (oh, ow) = (h / 2, w / 2);
    let d = x.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (ci * h + 2 * oy) * w + 2 * ox;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if d[cand] > d[best] {
                        best = cand;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, arg))
}

pub fn fc_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 || w.rank() != 2 || b.rank() != 1 {
        return Err(dim_err!(
            "fc expects x[d_in], w[d_out×d_in], b[d_out]; got {:?}, {:?}, {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    let (d_out, d_in) = (w.shape()[0], w.shape()[1]);
    if x.len() != d_in || b.len() != d_out {
        return Err(dim_err!(
            "fc shape mismatch: x {:?}, w {:?}, b {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        ));
    }
    let out = (0..d_out)
        .map(|o| dot(&w.data()[o * d_in..(o + 1) * d_in], x.data()) + b.data()[o])
        .collect();
    Tensor::new(&[d_out], out)
}

/// Inverted-dropout multipliers: 0 with probability p, 1/(1−p) otherwise.
pub fn dropout_mask(len: usize, p: f64, stream: RngStream) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p) {
        return Err(contract_err!("dropout probability must be in [0, 1), got {}", p));
    }
    if p == 0.0 {
        return Ok(vec![1.0; len]);
    }
    let keep = 1.0 / (1.0 - p);
    let mut rng = stream.rng();
    Ok((0..len)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect())
}

impl Graph {
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x).clone(), self.value(w).clone(), self.value(b).clone());
        let (spec, h, wd) = check_conv_args(&tx, &tw, &tb)?;
        let out = conv2d_forward(&tx, &tw, &tb)?;
        let (oh, ow) = spec.output_extent(h, wd)?;
        self.push(
            "conv2d",
            &[x, w, b],
            out.shape(),
            out.to_vec(),
            Box::new(move |g, need| {
                let (kh, kw) = spec.kernel;
                let (c_in, c_out, k, p) = (spec.in_channels, spec.out_channels, spec.fan_in(), oh * ow);
                let gd = g.data();
                let gx = if need[0] {
                    // cols_grad[k×p] = Wᵀ·g
                    let mut cg = vec![0.0; k * p];
                    for o in 0..c_out {
                        let g_row = &gd[o * p..(o + 1) * p];
                        for t in 0..k {
                            let wv = tw.data()[o * k + t];
                            if wv == 0.0 {
                                continue;
                            }
                            for (c, &gv) in cg[t * p..(t + 1) * p].iter_mut().zip(g_row) {
                                *c += wv * gv;
                            }
                        }
                    }
                    Some(Tensor::new(tx.shape(), col2im(&cg, c_in, h, wd, kh, kw))?)
                } else {
                    None
                };
                let gw = if need[1] {
                    let cols = im2col(tx.data(), c_in, h, wd, kh, kw);
                    let mut gw = vec![0.0; c_out * k];
                    for o in 0..c_out {
                        let g_row = &gd[o * p..(o + 1) * p];
                        for t in 0..k {
                            gw[o * k + t] = dot(g_row, &cols[t * p..(t + 1) * p]);
                        }
                    }
                    Some(Tensor::new(tw.shape(), gw)?)
                } else {
                    None
                };
                let gb = if need[2] {
                    let sums = gd.chunks(p).map(|r| r.iter().sum()).collect();
                    Some(Tensor::new(&[c_out], sums)?)
                } else {
                    None
                };
                Ok(vec![gx, gw, gb])
            }),
        )
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x).clone();
        let out = relu_forward(&tx)?;
        self.push(
            "relu",
            &[x],
            out.shape(),
            out.to_vec(),
            Box::new(move |g, _| {
                let d = g
                    .data()
                    .iter()
                    .zip(tx.data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                Ok(vec![Some(Tensor::new(tx.shape(), d)?)])
            }),
        )
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let in_shape = self.shape(x).to_vec();
        let (out, arg) = maxpool2_forward(self.value(x))?;
        self.push(
            "maxpool2",
            &[x],
            out.shape(),
            out.to_vec(),
            Box::new(move |g, _| {
                let n: usize = in_shape.iter().product();
                let mut d = vec![0.0; n];
                for (&src, gv) in arg.iter().zip(g.data()) {
                    d[src] += gv;
                }
                Ok(vec![Some(Tensor::new(&in_shape, d)?)])
            }),
        )
    }

    /// y = W·x + b.
    pub fn fc(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x).clone(), self.value(w).clone());
        let out = fc_forward(&tx, &tw, self.value(b))?;
        let (d_out, d_in) = (tw.shape()[0], tw.shape()[1]);
        self.push(
            "fc",
            &[x, w, b],
            out.shape(),
            out.to_vec(),
            Box::new(move |g, need| {
                let gd = g.data();
                let gx = if need[0] {
                    let mut v = vec![0.0; d_in];
                    for (o, &go) in gd.iter().enumerate() {
                        for (a, wv) in v.iter_mut().zip(&tw.data()[o * d_in..(o + 1) * d_in]) {
                            *a += go * wv;
                        }
                    }
                    Some(Tensor::new(&[d_in], v)?)
                } else {
                    None
                };
                let gw = if need[1] {
                    let mut v = vec![0.0; d_out * d_in];
                    for (o, &go) in gd.iter().enumerate() {
                        for (a, xv) in v[o * d_in..(o + 1) * d_in].iter_mut().zip(tx.data()) {
                            *a = go * xv;
                        }
                    }
                    Some(Tensor::new(&[d_out, d_in], v)?)
                } else {
                    None
                };
                let gb = need[2].then(|| g.clone());
                Ok(vec![gx, gw, gb])
            }),
        )
    }

    /// Inverted dropout. In eval mode, or with p = 0, the input passes
    /// through untouched.
    pub fn dropout(&mut self, x: Var, p: f64, stream: RngStream, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(contract_err!("dropout probability must be in [0, 1), got {}", p));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let tx = self.value(x).clone();
        let mask = dropout_mask(tx.len(), p, stream)?;
        let out = tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = tx.shape().to_vec();
        self.push(
            "dropout",
            &[x],
            &shape.clone(),
            out,
            Box::new(move |g, _| {
                let d = g.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
                Ok(vec![Some(Tensor::new(&shape, d)?)])
            }),
        )
    }
}

/// Named trainable tensors plus one momentum buffer per parameter.
/// Iteration order is lexicographic by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
    momentum: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(contract_err!("duplicate parameter name {}", name));
        }
        let zeros = Tensor::zeros(value.shape())?;
        self.params.insert(name.to_string(), value.with_requires_grad(false));
        self.momentum.insert(name.to_string(), zeros);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| contract_err!("missing parameter {}", name))
    }

    pub fn momentum(&self, name: &str) -> Result<&Tensor> {
        self.momentum
            .get(name)
            .ok_or_else(|| contract_err!("missing momentum buffer {}", name))
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| contract_err!("missing parameter {}", name))?;
        if slot.shape() != value.shape() {
            return Err(dim_err!(
                "parameter {} has shape {:?}, refusing {:?}",
                name,
                slot.shape(),
                value.shape()
            ));
        }
        *slot = value.with_requires_grad(false);
        Ok(())
    }

    pub fn set_momentum(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .momentum
            .get_mut(name)
            .ok_or_else(|| contract_err!("missing momentum buffer {}", name))?;
        if slot.shape() != value.shape() {
            return Err(dim_err!(
                "momentum {} has shape {:?}, refusing {:?}",
                name,
                slot.shape(),
                value.shape()
            ));
        }
        *slot = value;
        Ok(())
    }

    /// Zeroes every momentum buffer.
    pub fn reset_momentum(&mut self) -> Result<()> {
        for (name, p) in &self.params {
            self.momentum.insert(name.clone(), Tensor::zeros(p.shape())?);
        }
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars, optionally restricted by name prefix.
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.len())
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in &self.params {
            let m = self.momentum(name)?;
            if m.shape() != p.shape() {
                return Err(dim_err!(
                    "momentum for {} is {:?}, parameter is {:?}",
                    name,
                    m.shape(),
                    p.shape()
                ));
            }
        }
        if self.momentum.len() != self.params.len() {
            return Err(contract_err!("orphan momentum buffers"));
        }
        Ok(())
    }
}

/// Uniform weights in ±√(6/(fan_in+fan_out)).
pub fn init_uniform(shape: &[usize], fan_in: usize, fan_out: usize, stream: RngStream) -> Result<Tensor> {
    let bound = fan_bound(fan_in, fan_out);
    let mut rng = stream.rng();
    Tensor::from_fn(shape, |_| rng.random_range(-bound..=bound))
}

pub fn fan_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// Fresh parameters for `config`: fan-balanced uniform weights, zero biases.
/// Each tensor draws from its own named child of `stream`, so the store is
/// independent of insertion order.
pub fn init_params(config: &NetworkConfig, stream: RngStream) -> Result<ParamStore> {
    config.validate()?;
    let mut store = ParamStore::new();
    let convs = [config.conv1_spec(), config.conv2_spec()];
    for part in 0..3 {
        for s in config.stream_names() {
            for (li, spec) in convs.iter().enumerate() {
                let prefix = format!("part{part}.{s}.conv{}", li + 1);
                let wname = format!("{prefix}.weight");
                let w = init_uniform(
                    &spec.weight_shape(),
                    spec.fan_in(),
                    spec.fan_out(),
                    stream.named(&wname),
                )?;
                store.insert(&wname, w)?;
                store.insert(&format!("{prefix}.bias"), Tensor::zeros(&[spec.out_channels])?)?;
            }
        }
    }
    let (d_out, d_in) = (config.embedding_dim, config.fc_fan_in()?);
    store.insert(
        "fc.weight",
        init_uniform(&[d_out, d_in], d_in, d_out, stream.named("fc.weight"))?,
    )?;
    store.insert("fc.bias", Tensor::zeros(&[d_out])?)?;
    debug_assert!(config.variant != Variant::Cnn || !store.contains("part0.stream_b.conv1.weight"));
    Ok(store)
}
