//! Non-convolutional layers. Each layer caches what its backward pass
//! needs during a training-mode forward call.

use crate::error::{Error, Result};
use crate::nn::{Mode, ParamVisitor};
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

fn missing_cache(layer: &str) -> Error {
    Error::Usage(format!("{layer}: backward called without a training forward"))
}

#[derive(Clone, Debug, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn forward(&mut self, mut x: Tensor, mode: Mode) -> Tensor {
        if mode == Mode::Train {
            self.mask = Some(x.data().iter().map(|&v| v > 0.0).collect());
        }
        x.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        x
    }

    pub fn backward(&mut self, mut grad: Tensor) -> Result<Tensor> {
        let mask = self.mask.take().ok_or_else(|| missing_cache("relu"))?;
        if mask.len() != grad.len() {
            return Err(Error::dim("relu gradient length differs from forward"));
        }
        for (g, keep) in grad.data_mut().iter_mut().zip(mask) {
            if !keep {
                *g = 0.0;
            }
        }
        Ok(grad)
    }
}

/// 2x2 max pooling with stride 2; odd trailing rows/columns are dropped.
#[derive(Clone, Debug, Default)]
pub struct MaxPool2 {
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2 {
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let [b, c, h, w] = x.dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::dim(format!("maxpool2 input too small: {:?}", x.shape())));
        }
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut arg = Vec::with_capacity(b * c * ho * wo);
        let data = x.data();
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + (2 * oy) * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if data[idx] > data[best] {
                            best = idx;
                        }
                    }
                    out.push(data[best]);
                    arg.push(best);
                }
            }
        }
        if mode == Mode::Train {
            self.cache = Some((x.shape().to_vec(), arg));
        }
        Tensor::from_vec(&[b, c, ho, wo], out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let (shape, arg) = self.cache.take().ok_or_else(|| missing_cache("maxpool2"))?;
        if grad.len() != arg.len() {
            return Err(Error::dim("maxpool2 gradient length differs from forward"));
        }
        let mut gin = Tensor::zeros(&shape);
        for (g, &idx) in grad.data().iter().zip(&arg) {
            gin.data_mut()[idx] += g;
        }
        Ok(gin)
    }
}

/// Mean over the spatial axes: `[B, C, H, W] -> [B, C]`.
#[derive(Clone, Debug, Default)]
pub struct GlobalAvgPool {
    shape: Option<Vec<usize>>,
}

impl GlobalAvgPool {
    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let [b, c, h, w] = x.dims4()?;
        let hw = h * w;
        let out = x
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        if mode == Mode::Train {
            self.shape = Some(x.shape().to_vec());
        }
        Tensor::from_vec(&[b, c], out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let shape = self.shape.take().ok_or_else(|| missing_cache("avgpool"))?;
        let hw = shape[2] * shape[3];
        if grad.len() * hw != shape.iter().product::<usize>() {
            return Err(Error::dim("avgpool gradient length differs from forward"));
        }
        let mut data = Vec::with_capacity(grad.len() * hw);
        for &g in grad.data() {
            data.extend(std::iter::repeat_n(g / hw as f64, hw));
        }
        Tensor::from_vec(&shape, data)
    }
}

/// Fully connected layer, `y = x W^T + b` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
    pub grad_weight: Tensor,
    pub grad_bias: Tensor,
    input: Option<Tensor>,
}

impl Dense {
    /// Uniform `(-1/sqrt(in), 1/sqrt(in))` init for weight and bias.
    pub fn new(inputs: usize, outputs: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| bound * (2.0 * rng.uniform() - 1.0)).collect() };
        let weight = Tensor::from_vec(&[outputs, inputs], draw(outputs * inputs)).expect("dense weight");
        let bias = Tensor::from_vec(&[outputs], draw(outputs)).expect("dense bias");
        Self::from_parts(weight, bias).expect("dense shapes")
    }

    pub fn from_parts(weight: Tensor, bias: Tensor) -> Result<Self> {
        let [out, _] = weight.dims2()?;
        if bias.shape() != [out] {
            return Err(Error::dim("dense bias length differs from output size"));
        }
        Ok(Self {
            grad_weight: Tensor::zeros(weight.shape()),
            grad_bias: Tensor::zeros(bias.shape()),
            weight,
            bias,
            input: None,
        })
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let [b, inputs] = x.dims2()?;
        let [out, w_in] = self.weight.dims2()?;
        if inputs != w_in {
            return Err(Error::dim(format!(
                "dense input {:?} does not match weight {:?}",
                x.shape(),
                self.weight.shape()
            )));
        }
        let mut y = vec![0.0; b * out];
        for row in y.chunks_mut(out) {
            row.copy_from_slice(self.bias.data());
        }
        crate::tensor::gemm(b, inputs, out, 1.0, x.data(), inputs, 1, self.weight.data(), 1, inputs, 1.0, &mut y, out);
        if mode == Mode::Train {
            self.input = Some(x.clone());
        }
        Tensor::from_vec(&[b, out], y)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let x = self.input.take().ok_or_else(|| missing_cache("dense"))?;
        let [b, inputs] = x.dims2()?;
        let [out, _] = self.weight.dims2()?;
        if grad.shape() != [b, out] {
            return Err(Error::dim("dense gradient shape differs from forward output"));
        }
        let g = grad.data();
        // grad_w += g^T x
        crate::tensor::gemm(out, b, inputs, 1.0, g, 1, out, x.data(), inputs, 1, 1.0, self.grad_weight.data_mut(), inputs);
        for row in g.chunks(out) {
            for (gb, v) in self.grad_bias.data_mut().iter_mut().zip(row) {
                *gb += v;
            }
        }
        let mut gin = vec![0.0; b * inputs];
        crate::tensor::gemm(b, out, inputs, 1.0, g, out, 1, self.weight.data(), inputs, 1, 0.0, &mut gin, inputs);
        Tensor::from_vec(&[b, inputs], gin)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&format!("{prefix}.weight"), &mut self.weight, &mut self.grad_weight);
        f(&format!("{prefix}.bias"), &mut self.bias, &mut self.grad_bias);
    }
}

/// Per-channel batch normalization over `[B, C, H, W]`.
///
/// Training mode normalizes with batch statistics (biased variance) and
/// updates the running estimates with momentum 0.1, using the unbiased
/// variance; evaluation mode uses the running estimates.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub grad_gamma: Tensor,
    pub grad_beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    cache: Option<BnCache>,
}

#[derive(Clone, Debug)]
struct BnCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: [usize; 4],
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            grad_gamma: Tensor::zeros(&[channels]),
            grad_beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let [b, c, h, w] = x.dims4()?;
        if c != self.channels() {
            return Err(Error::dim(format!(
                "batchnorm over {} channels got input {:?}",
                self.channels(),
                x.shape()
            )));
        }
        let hw = h * w;
        let n = (b * hw) as f64;
        let data = x.data();
        let mut out = vec![0.0; x.len()];
        match mode {
            Mode::Eval => {
                for ch in 0..c {
                    let inv = 1.0 / (self.running_var.data()[ch] + BN_EPS).sqrt();
                    let (m, g, be) = (self.running_mean.data()[ch], self.gamma.data()[ch], self.beta.data()[ch]);
                    for bi in 0..b {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            out[i] = g * (data[i] - m) * inv + be;
                        }
                    }
                }
            }
            Mode::Train => {
                let mut xhat = vec![0.0; x.len()];
                let mut inv_std = vec![0.0; c];
                for ch in 0..c {
                    let mut sum = 0.0;
                    for bi in 0..b {
                        let off = (bi * c + ch) * hw;
                        sum += data[off..off + hw].iter().sum::<f64>();
                    }
                    let mean = sum / n;
                    let mut sq = 0.0;
                    for bi in 0..b {
                        let off = (bi * c + ch) * hw;
                        sq += data[off..off + hw].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
                    }
                    let var = sq / n;
                    let inv = 1.0 / (var + BN_EPS).sqrt();
                    inv_std[ch] = inv;
                    let (g, be) = (self.gamma.data()[ch], self.beta.data()[ch]);
                    for bi in 0..b {
                        let off = (bi * c + ch) * hw;
                        for i in off..off + hw {
                            let xh = (data[i] - mean) * inv;
                            xhat[i] = xh;
                            out[i] = g * xh + be;
                        }
                    }
                    let unbiased = if n > 1.0 { sq / (n - 1.0) } else { var };
                    let rm = &mut self.running_mean.data_mut()[ch];
                    *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * mean;
                    let rv = &mut self.running_var.data_mut()[ch];
                    *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * unbiased;
                }
                self.cache = Some(BnCache {
                    xhat,
                    inv_std,
                    shape: [b, c, h, w],
                });
            }
        }
        Tensor::from_vec(x.shape(), out)
    }

    pub fn backward(&mut self, grad: &Tensor) -> Result<Tensor> {
        let cache = self.cache.take().ok_or_else(|| missing_cache("batchnorm"))?;
        let [b, c, h, w] = cache.shape;
        if grad.shape() != cache.shape {
            return Err(Error::dim("batchnorm gradient shape differs from forward"));
        }
        let hw = h * w;
        let n = (b * hw) as f64;
        let g = grad.data();
        let mut gin = vec![0.0; grad.len()];
        for ch in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    sum_g += g[i];
                    sum_gx += g[i] * cache.xhat[i];
                }
            }
            self.grad_beta.data_mut()[ch] += sum_g;
            self.grad_gamma.data_mut()[ch] += sum_gx;
            let scale = self.gamma.data()[ch] * cache.inv_std[ch] / n;
            for bi in 0..b {
                let off = (bi * c + ch) * hw;
                for i in off..off + hw {
                    gin[i] = scale * (n * g[i] - sum_g - cache.xhat[i] * sum_gx);
                }
            }
        }
        Tensor::from_vec(grad.shape(), gin)
    }

    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        f(&format!("{prefix}.weight"), &mut self.gamma, &mut self.grad_gamma);
        f(&format!("{prefix}.bias"), &mut self.beta, &mut self.grad_beta);
    }

    pub fn visit_buffers(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.running_mean"), &mut self.running_mean);
        f(&format!("{prefix}.running_var"), &mut self.running_var);
    }
}
