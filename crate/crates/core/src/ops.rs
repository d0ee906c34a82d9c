//! Index kernels for the spatial linear operators shared by the VAE layers
//! and the graph nodes. Tensors are flat `(channel, row, col)` slices.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape3 {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    fn at(&self, c: usize, r: usize, col: usize) -> usize {
        (c * self.height + r) * self.width + col
    }
}

/// Zero-padded 2-D convolution geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub input: Shape3,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn new(
        input: Shape3,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let g = Self {
            input,
            out_channels,
            kernel,
            stride,
            padding,
        };
        if kernel == 0 || stride == 0 || out_channels == 0 || input.is_empty() {
            return Err(Error::Graph("conv dimensions must be positive".into()));
        }
        if input.height + 2 * padding < kernel || input.width + 2 * padding < kernel {
            return Err(Error::Graph("conv kernel larger than padded input".into()));
        }
        Ok(g)
    }

    pub fn output(&self) -> Shape3 {
        let h = (self.input.height + 2 * self.padding - self.kernel) / self.stride + 1;
        let w = (self.input.width + 2 * self.padding - self.kernel) / self.stride + 1;
        Shape3::new(self.out_channels, h, w)
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.input.channels * self.kernel * self.kernel
    }

    /// Visit every `(out_index, in_index, weight_index)` triple that
    /// contributes to the output.
    #[inline]
    fn for_each_tap<F: FnMut(usize, usize, usize)>(&self, mut f: F) {
        let out = self.output();
        let k = self.kernel;
        let cin = self.input.channels;
        for oc in 0..out.channels {
            for orow in 0..out.height {
                for ocol in 0..out.width {
                    let o = out.at(oc, orow, ocol);
                    for ic in 0..cin {
                        for kr in 0..k {
                            let r = (orow * self.stride + kr) as isize - self.padding as isize;
                            if r < 0 || r as usize >= self.input.height {
                                continue;
                            }
                            for kc in 0..k {
                                let c = (ocol * self.stride + kc) as isize - self.padding as isize;
                                if c < 0 || c as usize >= self.input.width {
                                    continue;
                                }
                                let i = self.input.at(ic, r as usize, c as usize);
                                let wi = ((oc * cin + ic) * k + kr) * k + kc;
                                f(o, i, wi);
                            }
                        }
                    }
                }
            }
        }
    }

    /// `out = conv(input) + bias`; bias is skipped when `None`.
    pub fn forward(&self, weight: &[f64], bias: Option<&[f64]>, input: &[f64], out: &mut [f64]) {
        let oshape = self.output();
        match bias {
            Some(b) => {
                let plane = oshape.height * oshape.width;
                for (c, chunk) in out.chunks_mut(plane).enumerate() {
                    chunk.fill(b[c]);
                }
            }
            None => out.fill(0.0),
        }
        self.for_each_tap(|o, i, wi| out[o] += weight[wi] * input[i]);
    }

    /// Accumulate gradients for input, weight and bias.
    pub fn backward(
        &self,
        weight: &[f64],
        input: &[f64],
        grad_out: &[f64],
        grad_in: &mut [f64],
        grad_weight: &mut [f64],
        grad_bias: &mut [f64],
    ) {
        let oshape = self.output();
        let plane = oshape.height * oshape.width;
        for (c, chunk) in grad_out.chunks(plane).enumerate() {
            grad_bias[c] += chunk.iter().sum::<f64>();
        }
        self.for_each_tap(|o, i, wi| {
            grad_in[i] += weight[wi] * grad_out[o];
            grad_weight[wi] += input[i] * grad_out[o];
        });
    }
}

/// Output shape of a non-overlapping `window × window` pool.
pub fn pool_output(shape: Shape3, window: usize) -> Result<Shape3> {
    if window == 0 || !shape.height.is_multiple_of(window) || !shape.width.is_multiple_of(window) {
        return Err(Error::Graph(format!(
            "pool window {window} does not tile {}x{}",
            shape.height, shape.width
        )));
    }
    Ok(Shape3::new(shape.channels, shape.height / window, shape.width / window))
}

/// For each pooling window, the flat input index of its maximum. Ties go to
/// the first index in row-major window order.
pub fn maxpool_argmax(shape: Shape3, window: usize, input: &[f64]) -> Vec<usize> {
    let oh = shape.height / window;
    let ow = shape.width / window;
    let mut idx = Vec::with_capacity(shape.channels * oh * ow);
    for c in 0..shape.channels {
        for r in 0..oh {
            for col in 0..ow {
                let mut best = shape.at(c, r * window, col * window);
                for dr in 0..window {
                    for dc in 0..window {
                        let i = shape.at(c, r * window + dr, col * window + dc);
                        if input[i] > input[best] {
                            best = i;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}

/// The flat input indices of each pooling window, row-major.
pub fn pool_windows(shape: Shape3, window: usize) -> Vec<Vec<usize>> {
    let oh = shape.height / window;
    let ow = shape.width / window;
    let mut out = Vec::with_capacity(shape.channels * oh * ow);
    for c in 0..shape.channels {
        for r in 0..oh {
            for col in 0..ow {
                let mut w = Vec::with_capacity(window * window);
                for dr in 0..window {
                    for dc in 0..window {
                        w.push(shape.at(c, r * window + dr, col * window + dc));
                    }
                }
                out.push(w);
            }
        }
    }
    out
}

pub fn meanpool(shape: Shape3, window: usize, input: &[f64], out: &mut [f64]) {
    let scale = 1.0 / (window * window) as f64;
    for (o, w) in pool_windows(shape, window).iter().enumerate() {
        out[o] = w.iter().map(|&i| input[i]).sum::<f64>() * scale;
    }
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample(shape: Shape3, factor: usize, input: &[f64], out: &mut [f64]) {
    let ow = shape.width * factor;
    let oh = shape.height * factor;
    for c in 0..shape.channels {
        for r in 0..oh {
            for col in 0..ow {
                out[(c * oh + r) * ow + col] = input[shape.at(c, r / factor, col / factor)];
            }
        }
    }
}

pub fn upsample_backward(shape: Shape3, factor: usize, grad_out: &[f64], grad_in: &mut [f64]) {
    let ow = shape.width * factor;
    let oh = shape.height * factor;
    for c in 0..shape.channels {
        for r in 0..oh {
            for col in 0..ow {
                grad_in[shape.at(c, r / factor, col / factor)] += grad_out[(c * oh + r) * ow + col];
            }
        }
    }
}

/// `window × window` moving average over in-bounds neighbours only.
pub fn mean_filter(height: usize, width: usize, window: usize, input: &[f64], out: &mut [f64]) {
    let radius = (window / 2) as isize;
    for r in 0..height as isize {
        let r0 = (r - radius).max(0) as usize;
        let r1 = ((r + radius) as usize).min(height - 1);
        for c in 0..width as isize {
            let c0 = (c - radius).max(0) as usize;
            let c1 = ((c + radius) as usize).min(width - 1);
            let mut s = 0.0;
            for rr in r0..=r1 {
                s += input[rr * width + c0..=rr * width + c1].iter().sum::<f64>();
            }
            out[r as usize * width + c as usize] = s / ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
        }
    }
}
