use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{gemm, Checkpoint, CheckpointWriter, HasParams, Param, Tensor};
use crate::error::{Error, Result};

/// Serializable description of a layer's architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    Tanh,
    AvgPool {
        out_h: usize,
        out_w: usize,
    },
}

fn missing_context(layer: &str) -> Error {
    Error::State(format!("{layer}: backward called without a cached forward pass"))
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

/// Fully connected layer `y = x·Wᵀ + b`; inputs of any rank are flattened per batch item.
#[derive(Clone, Debug)]
pub struct Linear {
    pub inputs: usize,
    pub outputs: usize,
    /// `[outputs, inputs]`
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    /// Uniform initialization in `±√(1/fan_in)`.
    pub fn new(inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let bound = (1.0 / inputs as f64).sqrt();
        Self {
            inputs,
            outputs,
            weight: Param::uniform(vec![outputs, inputs], bound, rng),
            bias: Param::uniform(vec![outputs], bound, rng),
            cache: None,
        }
    }

    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            inputs,
            outputs,
            weight: Param::zeros(vec![outputs, inputs]),
            bias: Param::zeros(vec![outputs]),
            cache: None,
        }
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        if x.item_len() != self.inputs {
            return Err(Error::shape("Linear input", &[x.batch(), self.inputs], x.shape()));
        }
        Ok(())
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        self.check(x)?;
        let n = x.batch();
        let mut out = Vec::with_capacity(n * self.outputs);
        for _ in 0..n {
            out.extend_from_slice(&self.bias.value);
        }
        gemm(
            n,
            self.inputs,
            self.outputs,
            x.data(),
            (self.inputs, 1),
            &self.weight.value,
            (1, self.inputs),
            1.0,
            &mut out,
            (self.outputs, 1),
        );
        Tensor::new(vec![n, self.outputs], out)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.cache = Some(x.clone());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.take().ok_or_else(|| missing_context("Linear"))?;
        let n = x.batch();
        if grad.shape() != [n, self.outputs] {
            return Err(Error::shape("Linear grad", &[n, self.outputs], grad.shape()));
        }
        if self.weight.grad.len() != self.weight.len() {
            self.weight.zero_grad();
            self.bias.zero_grad();
        }
        let mut dx = vec![0.0; n * self.inputs];
        gemm(
            n,
            self.outputs,
            self.inputs,
            grad.data(),
            (self.outputs, 1),
            &self.weight.value,
            (self.inputs, 1),
            0.0,
            &mut dx,
            (self.inputs, 1),
        );
        gemm(
            self.outputs,
            n,
            self.inputs,
            grad.data(),
            (1, self.outputs),
            x.data(),
            (self.inputs, 1),
            1.0,
            &mut self.weight.grad,
            (self.inputs, 1),
        );
        for row in grad.data().chunks_exact(self.outputs) {
            for (b, g) in self.bias.grad.iter_mut().zip(row) {
                *b += g;
            }
        }
        Tensor::new(x.shape().to_vec(), dx)
    }
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

/// 2-D cross-correlation over `[N, C, H, W]` with zero padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `[out, in, k, k]`
    pub weight: Param,
    pub bias: Param,
    cache: Option<ConvCache>,
}

#[derive(Clone, Debug)]
struct ConvCache {
    input_shape: Vec<usize>,
    cols: Vec<f64>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (1.0 / (in_channels * kernel * kernel) as f64).sqrt();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::uniform(vec![out_channels, in_channels, kernel, kernel], bound, rng),
            bias: Param::uniform(vec![out_channels], bound, rng),
            cache: None,
        }
    }

    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            weight: Param::zeros(vec![out_channels, in_channels, kernel, kernel]),
            bias: Param::zeros(vec![out_channels]),
            cache: None,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < self.kernel || pw < self.kernel {
            return None;
        }
        Some((
            (ph - self.kernel) / self.stride + 1,
            (pw - self.kernel) / self.stride + 1,
        ))
    }

    fn geometry(&self, x: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(Error::shape(
                "Conv2d input",
                &[s.first().copied().unwrap_or(0), self.in_channels, 0, 0],
                s,
            ));
        }
        let (oh, ow) = self
            .output_size(s[2], s[3])
            .ok_or_else(|| Error::shape("Conv2d input too small", &[self.kernel, self.kernel], s))?;
        Ok((s[0], s[2], s[3], oh, ow))
    }

    fn im2col(&self, sample: &[f64], h: usize, w: usize, oh: usize, ow: usize, cols: &mut [f64]) {
        let k = self.kernel;
        let p = oh * ow;
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane = &sample[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        let dst = &mut row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize {
                            dst.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            *d = if ix < 0 || ix >= w as isize {
                                0.0
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], h: usize, w: usize, oh: usize, ow: usize, out: &mut [f64]) {
        let k = self.kernel;
        let p = oh * ow;
        let pad = self.padding as isize;
        for c in 0..self.in_channels {
            let plane = &mut out[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * p..][..p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                plane[iy as usize * w + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn run(&self, x: &Tensor, keep_cols: bool) -> Result<(Tensor, Option<Vec<f64>>)> {
        let (n, h, w, oh, ow) = self.geometry(x)?;
        let ckk = self.in_channels * self.kernel * self.kernel;
        let p = oh * ow;
        let item = self.in_channels * h * w;
        let mut out = vec![0.0; n * self.out_channels * p];
        let mut all_cols = if keep_cols { vec![0.0; n * ckk * p] } else { Vec::new() };
        let mut scratch = if keep_cols { Vec::new() } else { vec![0.0; ckk * p] };
        for i in 0..n {
            let cols: &mut [f64] = if keep_cols {
                &mut all_cols[i * ckk * p..(i + 1) * ckk * p]
            } else {
                &mut scratch
            };
            self.im2col(&x.data()[i * item..(i + 1) * item], h, w, oh, ow, cols);
            let dst = &mut out[i * self.out_channels * p..(i + 1) * self.out_channels * p];
            for (o, chunk) in dst.chunks_exact_mut(p).enumerate() {
                chunk.iter_mut().for_each(|v| *v = self.bias.value[o]);
            }
            gemm(
                self.out_channels,
                ckk,
                p,
                &self.weight.value,
                (ckk, 1),
                cols,
                (p, 1),
                1.0,
                dst,
                (p, 1),
            );
        }
        let y = Tensor::new(vec![n, self.out_channels, oh, ow], out)?;
        Ok((y, keep_cols.then_some(all_cols)))
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.run(x, false)?.0)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let (y, cols) = self.run(x, true)?;
        self.cache = Some(ConvCache {
            input_shape: x.shape().to_vec(),
            cols: cols.unwrap_or_default(),
        });
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| missing_context("Conv2d"))?;
        let (n, h, w) = (cache.input_shape[0], cache.input_shape[2], cache.input_shape[3]);
        let (oh, ow) = self.output_size(h, w).expect("cached geometry is valid");
        if grad.shape() != [n, self.out_channels, oh, ow] {
            return Err(Error::shape(
                "Conv2d grad",
                &[n, self.out_channels, oh, ow],
                grad.shape(),
            ));
        }
        if self.weight.grad.len() != self.weight.len() {
            self.weight.zero_grad();
            self.bias.zero_grad();
        }
        let ckk = self.in_channels * self.kernel * self.kernel;
        let p = oh * ow;
        let item = self.in_channels * h * w;
        let mut dx = vec![0.0; n * item];
        let mut dcols = vec![0.0; ckk * p];
        for i in 0..n {
            let g = &grad.data()[i * self.out_channels * p..(i + 1) * self.out_channels * p];
            let cols = &cache.cols[i * ckk * p..(i + 1) * ckk * p];
            gemm(
                self.out_channels,
                p,
                ckk,
                g,
                (p, 1),
                cols,
                (1, p),
                1.0,
                &mut self.weight.grad,
                (ckk, 1),
            );
            for (o, chunk) in g.chunks_exact(p).enumerate() {
                self.bias.grad[o] += chunk.iter().sum::<f64>();
            }
            gemm(
                ckk,
                self.out_channels,
                p,
                &self.weight.value,
                (1, ckk),
                g,
                (p, 1),
                0.0,
                &mut dcols,
                (p, 1),
            );
            self.col2im_add(&dcols, h, w, oh, ow, &mut dx[i * item..(i + 1) * item]);
        }
        Tensor::new(cache.input_shape, dx)
    }
}

// ---------------------------------------------------------------------------
// Activations and pooling
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct Relu {
    cache: Option<Tensor>,
}

impl Relu {
    pub fn infer(x: &Tensor) -> Tensor {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        y
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        self.cache = Some(x.clone());
        Self::infer(x)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.cache.take().ok_or_else(|| missing_context("Relu"))?;
        if x.shape() != grad.shape() {
            return Err(Error::shape("Relu grad", x.shape(), grad.shape()));
        }
        let mut g = grad.clone();
        for (gv, xv) in g.data_mut().iter_mut().zip(x.data()) {
            if *xv <= 0.0 {
                *gv = 0.0;
            }
        }
        Ok(g)
    }
}

#[derive(Clone, Debug, Default)]
pub struct Tanh {
    cache: Option<Tensor>,
}

impl Tanh {
    pub fn infer(x: &Tensor) -> Tensor {
        let mut y = x.clone();
        y.data_mut().iter_mut().for_each(|v| *v = v.tanh());
        y
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = Self::infer(x);
        self.cache = Some(y.clone());
        y
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let y = self.cache.take().ok_or_else(|| missing_context("Tanh"))?;
        if y.shape() != grad.shape() {
            return Err(Error::shape("Tanh grad", y.shape(), grad.shape()));
        }
        let mut g = grad.clone();
        for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
            *gv *= 1.0 - yv * yv;
        }
        Ok(g)
    }
}

/// Adaptive average pooling of `[N, C, H, W]` to a fixed `out_h × out_w` grid.
#[derive(Clone, Debug)]
pub struct AdaptiveAvgPool {
    pub out_h: usize,
    pub out_w: usize,
    cache: Option<Vec<usize>>,
}

impl AdaptiveAvgPool {
    pub fn new(out_h: usize, out_w: usize) -> Self {
        Self {
            out_h,
            out_w,
            cache: None,
        }
    }

    fn bounds(i: usize, n_in: usize, n_out: usize) -> (usize, usize) {
        let start = i * n_in / n_out;
        let end = ((i + 1) * n_in).div_ceil(n_out);
        (start, end)
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let s = x.shape();
        if s.len() != 4 || s[2] < self.out_h || s[3] < self.out_w {
            return Err(Error::shape("AvgPool input", &[0, 0, self.out_h, self.out_w], s));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let mut out = Vec::with_capacity(n * c * self.out_h * self.out_w);
        for plane in x.data().chunks_exact(h * w) {
            for oy in 0..self.out_h {
                let (y0, y1) = Self::bounds(oy, h, self.out_h);
                for ox in 0..self.out_w {
                    let (x0, x1) = Self::bounds(ox, w, self.out_w);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        acc += plane[y * w + x0..y * w + x1].iter().sum::<f64>();
                    }
                    out.push(acc / ((y1 - y0) * (x1 - x0)) as f64);
                }
            }
        }
        Tensor::new(vec![n, c, self.out_h, self.out_w], out)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let y = self.infer(x)?;
        self.cache = Some(x.shape().to_vec());
        Ok(y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let s = self.cache.take().ok_or_else(|| missing_context("AvgPool"))?;
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        if grad.shape() != [n, c, self.out_h, self.out_w] {
            return Err(Error::shape(
                "AvgPool grad",
                &[n, c, self.out_h, self.out_w],
                grad.shape(),
            ));
        }
        let mut dx = vec![0.0; n * c * h * w];
        for (plane, g) in dx
            .chunks_exact_mut(h * w)
            .zip(grad.data().chunks_exact(self.out_h * self.out_w))
        {
            for oy in 0..self.out_h {
                let (y0, y1) = Self::bounds(oy, h, self.out_h);
                for ox in 0..self.out_w {
                    let (x0, x1) = Self::bounds(ox, w, self.out_w);
                    let share = g[oy * self.out_w + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                    for y in y0..y1 {
                        for v in &mut plane[y * w + x0..y * w + x1] {
                            *v += share;
                        }
                    }
                }
            }
        }
        Tensor::new(s, dx)
    }
}

// ---------------------------------------------------------------------------
// Layer enum and Sequential
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub enum Layer {
    Linear(Linear),
    Conv2d(Conv2d),
    Relu(Relu),
    Tanh(Tanh),
    AvgPool(AdaptiveAvgPool),
}

impl Layer {
    pub fn from_spec(spec: &LayerSpec, rng: &mut impl Rng) -> Self {
        match *spec {
            LayerSpec::Linear { inputs, outputs } => Layer::Linear(Linear::new(inputs, outputs, rng)),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Layer::Conv2d(Conv2d::new(in_channels, out_channels, kernel, stride, padding, rng)),
            LayerSpec::Relu => Layer::Relu(Relu::default()),
            LayerSpec::Tanh => Layer::Tanh(Tanh::default()),
            LayerSpec::AvgPool { out_h, out_w } => Layer::AvgPool(AdaptiveAvgPool::new(out_h, out_w)),
        }
    }

    pub fn spec(&self) -> LayerSpec {
        match self {
            Layer::Linear(l) => LayerSpec::Linear {
                inputs: l.inputs,
                outputs: l.outputs,
            },
            Layer::Conv2d(c) => LayerSpec::Conv2d {
                in_channels: c.in_channels,
                out_channels: c.out_channels,
                kernel: c.kernel,
                stride: c.stride,
                padding: c.padding,
            },
            Layer::Relu(_) => LayerSpec::Relu,
            Layer::Tanh(_) => LayerSpec::Tanh,
            Layer::AvgPool(p) => LayerSpec::AvgPool {
                out_h: p.out_h,
                out_w: p.out_w,
            },
        }
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Linear(l) => l.infer(x),
            Layer::Conv2d(c) => c.infer(x),
            Layer::Relu(_) => Ok(Relu::infer(x)),
            Layer::Tanh(_) => Ok(Tanh::infer(x)),
            Layer::AvgPool(p) => p.infer(x),
        }
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Linear(l) => l.forward(x),
            Layer::Conv2d(c) => c.forward(x),
            Layer::Relu(r) => Ok(r.forward(x)),
            Layer::Tanh(t) => Ok(t.forward(x)),
            Layer::AvgPool(p) => p.forward(x),
        }
    }

    /// Returns the gradient w.r.t. the layer input and accumulates parameter gradients.
    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Linear(l) => l.backward(grad),
            Layer::Conv2d(c) => c.backward(grad),
            Layer::Relu(r) => r.backward(grad),
            Layer::Tanh(t) => t.backward(grad),
            Layer::AvgPool(p) => p.backward(grad),
        }
    }
}

impl HasParams for Layer {
    fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Conv2d(c) => vec![&c.weight, &c.bias],
            _ => Vec::new(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Conv2d(c) => vec![&mut c.weight, &mut c.bias],
            _ => Vec::new(),
        }
    }
}

impl HasParams for Linear {
    fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Feed-forward stack of layers.
#[derive(Clone, Debug)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn from_specs(specs: &[LayerSpec], rng: &mut impl Rng) -> Self {
        Self::new(specs.iter().map(|s| Layer::from_spec(s, rng)).collect())
    }

    /// Linear layers of the given widths with ReLU between them and an
    /// optional tanh on the output.
    pub fn mlp(widths: &[usize], tanh_output: bool, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        for (i, pair) in widths.windows(2).enumerate() {
            layers.push(Layer::Linear(Linear::new(pair[0], pair[1], rng)));
            if i + 2 < widths.len() {
                layers.push(Layer::Relu(Relu::default()));
            }
        }
        if tanh_output {
            layers.push(Layer::Tanh(Tanh::default()));
        }
        Self::new(layers)
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(Layer::spec).collect()
    }

    pub fn infer(&self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for l in &self.layers {
            cur = l.infer(&cur)?;
        }
        Ok(cur)
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let mut cur = x.clone();
        for l in &mut self.layers {
            cur = l.forward(&cur)?;
        }
        Ok(cur)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let mut cur = grad.clone();
        for l in self.layers.iter_mut().rev() {
            cur = l.backward(&cur)?;
        }
        Ok(cur)
    }

    /// Stores layer specs (as metadata) and weights under `prefix`.
    pub fn save_into(&self, w: &mut CheckpointWriter, prefix: &str) -> Result<()> {
        w.set_meta(&format!("{prefix}.layers"), serde_json::to_value(self.specs())?);
        for (i, layer) in self.layers.iter().enumerate() {
            for (j, p) in layer.params().into_iter().enumerate() {
                w.add(&format!("{prefix}.{i}.{j}"), &p.shape, &p.value);
            }
        }
        Ok(())
    }

    /// Loads weights saved by [`Sequential::save_into`]; architecture must match exactly.
    pub fn load_from(&mut self, ck: &Checkpoint, prefix: &str) -> Result<()> {
        let key = format!("{prefix}.layers");
        let stored: Vec<LayerSpec> = serde_json::from_value(
            ck.meta(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing {key}")))?
                .clone(),
        )?;
        if stored != self.specs() {
            return Err(Error::Checkpoint(format!(
                "architecture mismatch for {prefix}: stored {stored:?}, expected {:?}",
                self.specs()
            )));
        }
        for (i, layer) in self.layers.iter_mut().enumerate() {
            for (j, p) in layer.params_mut().into_iter().enumerate() {
                p.value = ck.tensor(&format!("{prefix}.{i}.{j}"), &p.shape)?;
                p.zero_grad();
            }
        }
        Ok(())
    }
}

impl HasParams for Sequential {
    fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: Vec<usize>, rng: &mut impl Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Six nested loops, zero padding handled by bounds checks.
    fn naive_conv(c: &Conv2d, x: &Tensor) -> Vec<f64> {
        let s = x.shape();
        let (n, ci, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = c.output_size(h, w).unwrap();
        let k = c.kernel;
        let mut out = vec![0.0; n * c.out_channels * oh * ow];
        for b in 0..n {
            for o in 0..c.out_channels {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = c.bias.value[o];
                        for ch in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * c.stride + ky) as isize - c.padding as isize;
                                    let ix = (ox * c.stride + kx) as isize - c.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                                        acc += c.weight.value[((o * ci + ch) * k + ky) * k + kx]
                                            * x.data()[((b * ci + ch) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        out[((b * c.out_channels + o) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = Conv2d::zeros(3, 3, 1, 1, 0);
        for i in 0..3 {
            c.weight.value[i * 3 + i] = 1.0;
        }
        let x = random_tensor(vec![2, 3, 5, 4], &mut rng);
        assert_eq!(c.infer(&x).unwrap(), x);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad, h, w) in [(1, 1, 7, 6), (2, 1, 8, 8), (2, 0, 9, 7), (1, 0, 5, 5)] {
            let c = Conv2d::new(3, 4, 3, stride, pad, &mut rng);
            let x = random_tensor(vec![2, 3, h, w], &mut rng);
            let y = c.infer(&x).unwrap();
            let oracle = naive_conv(&c, &x);
            let err = y
                .data()
                .iter()
                .zip(&oracle)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-9, "stride {stride} pad {pad}: {err}");
        }
    }

    #[test]
    fn relu_forward_and_mask() {
        let x = Tensor::row(vec![-1.0, 0.0, 2.0]);
        let mut r = Relu::default();
        assert_eq!(r.forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = r.backward(&Tensor::row(vec![5.0, 5.0, 5.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 5.0]);
    }

    #[test]
    fn linear_input_grad_is_w_transpose_times_upstream() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut l = Linear::new(4, 3, &mut rng);
        let x = random_tensor(vec![1, 4], &mut rng);
        l.forward(&x).unwrap();
        let up = vec![0.5, -1.0, 2.0];
        let dx = l.backward(&Tensor::row(up.clone())).unwrap();
        for i in 0..4 {
            let expect: f64 = (0..3).map(|o| l.weight.value[o * 4 + i] * up[o]).sum();
            assert!((dx.data()[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_without_forward_is_state_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut l = Linear::new(2, 2, &mut rng);
        assert!(matches!(l.backward(&Tensor::row(vec![1.0, 1.0])), Err(Error::State(_))));
        let mut c = Conv2d::new(1, 1, 3, 1, 1, &mut rng);
        assert!(matches!(
            c.backward(&Tensor::zeros(vec![1, 1, 3, 3])),
            Err(Error::State(_))
        ));
        let mut t = Tanh::default();
        assert!(t.backward(&Tensor::row(vec![0.0])).is_err());
    }

    #[test]
    fn shape_errors_are_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = Linear::new(3, 2, &mut rng);
        match l.infer(&Tensor::row(vec![1.0; 4])) {
            Err(Error::Shape { expected, actual, .. }) => {
                assert_eq!(expected, vec![1, 3]);
                assert_eq!(actual, vec![1, 4]);
            }
            other => panic!("{other:?}"),
        }
        let c = Conv2d::new(3, 2, 3, 1, 1, &mut rng);
        assert!(c.infer(&Tensor::zeros(vec![1, 2, 4, 4])).is_err());
    }

    #[test]
    fn avgpool_divides_evenly() {
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(f64::from).collect()).unwrap();
        let p = AdaptiveAvgPool::new(2, 2);
        assert_eq!(p.infer(&x).unwrap().data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn no_nan_on_bounded_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut net = Sequential::new(vec![
            Layer::Conv2d(Conv2d::new(2, 3, 3, 2, 1, &mut rng)),
            Layer::Relu(Relu::default()),
            Layer::AvgPool(AdaptiveAvgPool::new(2, 2)),
            Layer::Linear(Linear::new(12, 4, &mut rng)),
            Layer::Tanh(Tanh::default()),
        ]);
        for p in net.params_mut() {
            for v in &mut p.value {
                *v = rng.gen_range(-1.0..=1.0);
            }
        }
        let x = Tensor::new(
            vec![3, 2, 8, 8],
            (0..384).map(|_| rng.gen_range(-10.0..=10.0)).collect(),
        )
        .unwrap();
        let y = net.forward(&x).unwrap();
        assert!(y.is_finite());
        let g = net.backward(&Tensor::new(vec![3, 4], vec![1.0; 12]).unwrap()).unwrap();
        assert!(g.is_finite());
    }
}
