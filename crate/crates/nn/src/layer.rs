use rand::Rng;

use crate::{NnError, Tensor};

/// One stage of a feed-forward network.
///
/// Dense weights are stored `out × in`; convolution kernels are stored
/// `out_ch × in_ch × kh × kw`. Convolutions use stride 1 and zero "same"
/// padding, putting the odd extra row/column of padding on the high side.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense { weight: Tensor, bias: Tensor },
    Conv2d { weight: Tensor, bias: Tensor },
    Relu,
    Flatten,
}

fn glorot<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, len: usize) -> Vec<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len).map(|_| rng.random_range(-bound..=bound)).collect()
}

impl Layer {
    pub fn dense<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let w = glorot(rng, inputs, outputs, inputs * outputs);
        Layer::Dense {
            weight: Tensor::new(vec![outputs, inputs], w).expect("dense extents are positive"),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn conv2d<R: Rng + ?Sized>(
        in_ch: usize,
        out_ch: usize,
        kh: usize,
        kw: usize,
        rng: &mut R,
    ) -> Self {
        let len = out_ch * in_ch * kh * kw;
        let w = glorot(rng, in_ch * kh * kw, out_ch * kh * kw, len);
        Layer::Conv2d {
            weight: Tensor::new(vec![out_ch, in_ch, kh, kw], w)
                .expect("conv extents are positive"),
            bias: Tensor::zeros(&[out_ch]),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense { .. } => "dense",
            Layer::Conv2d { .. } => "conv2d",
            Layer::Relu => "relu",
            Layer::Flatten => "flatten",
        }
    }

    pub fn parameters(&self) -> Vec<&Tensor> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Layer::Dense { weight, bias } | Layer::Conv2d { weight, bias } => vec![weight, bias],
            _ => Vec::new(),
        }
    }

    pub(crate) fn forward(&self, index: usize, x: &Tensor) -> Result<Tensor, NnError> {
        match self {
            Layer::Dense { weight, bias } => {
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                if x.shape() != [inp] {
                    return Err(NnError::LayerInput {
                        index,
                        kind: "dense",
                        expected: format!("[{inp}]"),
                        got: x.shape().to_vec(),
                    });
                }
                let w = weight.data();
                let xv = x.data();
                let y = (0..out)
                    .map(|o| {
                        let row = &w[o * inp..(o + 1) * inp];
                        bias.data()[o] + row.iter().zip(xv).map(|(a, b)| a * b).sum::<f64>()
                    })
                    .collect();
                Ok(Tensor::vector(y))
            }
            Layer::Conv2d { weight, bias } => {
                let dims = ConvDims::check(index, weight, x)?;
                let mut y = vec![0.0; dims.oc * dims.h * dims.w];
                conv_forward(&dims, weight.data(), bias.data(), x.data(), &mut y);
                Tensor::new(vec![dims.oc, dims.h, dims.w], y)
            }
            Layer::Relu => {
                let y = x.data().iter().map(|&v| v.max(0.0)).collect();
                Tensor::new(x.shape().to_vec(), y)
            }
            Layer::Flatten => {
                let n = x.len();
                x.clone().reshape(vec![n])
            }
        }
    }

    /// Returns the parameter gradients (weight, bias) for parametrized
    /// layers and the gradient with respect to `x`.
    pub(crate) fn backward(
        &self,
        index: usize,
        x: &Tensor,
        grad_out: &Tensor,
    ) -> Result<(Vec<Tensor>, Tensor), NnError> {
        match self {
            Layer::Dense { weight, .. } => {
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                if grad_out.shape() != [out] {
                    return Err(grad_mismatch(index, "dense", grad_out));
                }
                let g = grad_out.data();
                let xv = x.data();
                let w = weight.data();
                let mut gw = vec![0.0; out * inp];
                let mut gx = vec![0.0; inp];
                for o in 0..out {
                    let go = g[o];
                    if go == 0.0 {
                        continue;
                    }
                    let row = &w[o * inp..(o + 1) * inp];
                    let grow = &mut gw[o * inp..(o + 1) * inp];
                    for i in 0..inp {
                        grow[i] = go * xv[i];
                        gx[i] += go * row[i];
                    }
                }
                Ok((
                    vec![
                        Tensor::new(vec![out, inp], gw)?,
                        Tensor::vector(g.to_vec()),
                    ],
                    Tensor::vector(gx),
                ))
            }
            Layer::Conv2d { weight, .. } => {
                let dims = ConvDims::check(index, weight, x)?;
                if grad_out.shape() != [dims.oc, dims.h, dims.w] {
                    return Err(grad_mismatch(index, "conv2d", grad_out));
                }
                let mut gw = vec![0.0; weight.len()];
                let mut gb = vec![0.0; dims.oc];
                let mut gx = vec![0.0; x.len()];
                conv_backward(
                    &dims,
                    weight.data(),
                    x.data(),
                    grad_out.data(),
                    &mut gw,
                    &mut gb,
                    &mut gx,
                );
                Ok((
                    vec![
                        Tensor::new(weight.shape().to_vec(), gw)?,
                        Tensor::vector(gb),
                    ],
                    Tensor::new(x.shape().to_vec(), gx)?,
                ))
            }
            Layer::Relu => {
                if grad_out.shape() != x.shape() {
                    return Err(grad_mismatch(index, "relu", grad_out));
                }
                let gx = x
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                Ok((Vec::new(), Tensor::new(x.shape().to_vec(), gx)?))
            }
            Layer::Flatten => {
                if grad_out.len() != x.len() {
                    return Err(grad_mismatch(index, "flatten", grad_out));
                }
                Ok((Vec::new(), grad_out.clone().reshape(x.shape().to_vec())?))
            }
        }
    }
}

fn grad_mismatch(index: usize, kind: &'static str, g: &Tensor) -> NnError {
    NnError::Shape(format!(
        "layer {index} ({kind}): output gradient has unexpected shape {:?}",
        g.shape()
    ))
}

struct ConvDims {
    ic: usize,
    oc: usize,
    kh: usize,
    kw: usize,
    h: usize,
    w: usize,
    pad_top: usize,
    pad_left: usize,
}

impl ConvDims {
    fn check(index: usize, weight: &Tensor, x: &Tensor) -> Result<Self, NnError> {
        let ws = weight.shape();
        let (oc, ic, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if x.shape().len() != 3 || x.shape()[0] != ic {
            return Err(NnError::LayerInput {
                index,
                kind: "conv2d",
                expected: format!("[{ic}, h, w]"),
                got: x.shape().to_vec(),
            });
        }
        Ok(Self {
            ic,
            oc,
            kh,
            kw,
            h: x.shape()[1],
            w: x.shape()[2],
            pad_top: (kh - 1) / 2,
            pad_left: (kw - 1) / 2,
        })
    }

    /// Input coordinate touched by output `(y, x)` and kernel tap `(i, j)`.
    #[inline]
    fn source(&self, y: usize, x: usize, i: usize, j: usize) -> Option<(usize, usize)> {
        let sy = (y + i).checked_sub(self.pad_top)?;
        let sx = (x + j).checked_sub(self.pad_left)?;
        (sy < self.h && sx < self.w).then_some((sy, sx))
    }
}

fn conv_forward(d: &ConvDims, w: &[f64], b: &[f64], x: &[f64], y: &mut [f64]) {
    let plane = d.h * d.w;
    for o in 0..d.oc {
        for yy in 0..d.h {
            for xx in 0..d.w {
                let mut acc = b[o];
                for c in 0..d.ic {
                    for i in 0..d.kh {
                        for j in 0..d.kw {
                            if let Some((sy, sx)) = d.source(yy, xx, i, j) {
                                acc += w[((o * d.ic + c) * d.kh + i) * d.kw + j]
                                    * x[c * plane + sy * d.w + sx];
                            }
                        }
                    }
                }
                y[o * plane + yy * d.w + xx] = acc;
            }
        }
    }
}

fn conv_backward(
    d: &ConvDims,
    w: &[f64],
    x: &[f64],
    g: &[f64],
    gw: &mut [f64],
    gb: &mut [f64],
    gx: &mut [f64],
) {
    let plane = d.h * d.w;
    for o in 0..d.oc {
        for yy in 0..d.h {
            for xx in 0..d.w {
                let go = g[o * plane + yy * d.w + xx];
                gb[o] += go;
                if go == 0.0 {
                    continue;
                }
                for c in 0..d.ic {
                    for i in 0..d.kh {
                        for j in 0..d.kw {
                            if let Some((sy, sx)) = d.source(yy, xx, i, j) {
                                let wi = ((o * d.ic + c) * d.kh + i) * d.kw + j;
                                let xi = c * plane + sy * d.w + sx;
                                gw[wi] += go * x[xi];
                                gx[xi] += go * w[wi];
                            }
                        }
                    }
                }
            }
        }
    }
}
