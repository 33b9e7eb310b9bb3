//! 2-D cross-correlation with zero padding, lowered to GEMM through im2col.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Static geometry of one convolution layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvSpec {
    pub fn new(
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        padding: usize,
        h_in: usize,
        w_in: usize,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 || k == 0 || stride == 0 || h_in == 0 || w_in == 0 {
            return Err(Error::config(format!(
                "conv extents must be positive (c_in={c_in}, c_out={c_out}, k={k}, stride={stride}, h_in={h_in}, w_in={w_in})"
            )));
        }
        if h_in + 2 * padding < k || w_in + 2 * padding < k {
            return Err(Error::config(format!(
                "kernel {k} larger than padded input {}x{}",
                h_in + 2 * padding,
                w_in + 2 * padding
            )));
        }
        Ok(Self {
            c_in,
            c_out,
            k,
            stride,
            padding,
            h_in,
            w_in,
            h_out: (h_in + 2 * padding - k) / stride + 1,
            w_out: (w_in + 2 * padding - k) / stride + 1,
        })
    }

    /// Stride-1 layer with `k / 2` padding (odd `k` keeps `h x w`).
    pub fn same(c_in: usize, c_out: usize, k: usize, h: usize, w: usize) -> Result<Self> {
        Self::new(c_in, c_out, k, 1, k / 2, h, w)
    }

    /// Rebuilds the derived output extents; used after deserializing.
    pub fn validated(self) -> Result<Self> {
        let fresh = Self::new(
            self.c_in,
            self.c_out,
            self.k,
            self.stride,
            self.padding,
            self.h_in,
            self.w_in,
        )?;
        if fresh != self {
            return Err(Error::config(format!(
                "output extents {}x{} inconsistent with input {}x{}, k={}, stride={}, padding={}",
                self.h_out, self.w_out, self.h_in, self.w_in, self.k, self.stride, self.padding
            )));
        }
        Ok(fresh)
    }

    /// Length of one flattened filter, `c_in * k * k`.
    pub fn filter_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn out_pixels(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in, self.k, self.k]
    }

    pub(crate) fn check_input(&self, input: &Tensor) -> Result<usize> {
        let [b, c, h, w] = input.dims4()?;
        if c != self.c_in || h != self.h_in || w != self.w_in {
            return Err(Error::dim(format!(
                "conv input {:?} does not match spec {}x{}x{}",
                input.shape(),
                self.c_in,
                self.h_in,
                self.w_in
            )));
        }
        Ok(b)
    }

    pub(crate) fn check_weight(&self, weight: &Tensor, rows: usize) -> Result<()> {
        if weight.shape() != [rows, self.c_in, self.k, self.k] {
            return Err(Error::dim(format!(
                "conv weight {:?}, expected [{rows}, {}, {}, {}]",
                weight.shape(),
                self.c_in,
                self.k,
                self.k
            )));
        }
        Ok(())
    }
}

/// Unfolds one `[c_in, h, w]` image into `[c_in*k*k, h_out*w_out]`.
fn im2col(spec: &ConvSpec, image: &[f64], cols: &mut [f64]) {
    let (k, s, p) = (spec.k, spec.stride, spec.padding as isize);
    let (h, w) = (spec.h_in as isize, spec.w_in as isize);
    let (ho, wo) = (spec.h_out, spec.w_out);
    let npix = ho * wo;
    for c in 0..spec.c_in {
        let plane = &image[c * spec.h_in * spec.w_in..(c + 1) * spec.h_in * spec.w_in];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * npix..(row + 1) * npix];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h {
                        line.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[(iy as usize) * spec.w_in..];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * s + kx) as isize - p;
                        *v = if ix < 0 || ix >= w { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `image`.
fn col2im(spec: &ConvSpec, cols: &[f64], image: &mut [f64]) {
    let (k, s, p) = (spec.k, spec.stride, spec.padding as isize);
    let (h, w) = (spec.h_in as isize, spec.w_in as isize);
    let (ho, wo) = (spec.h_out, spec.w_out);
    let npix = ho * wo;
    for c in 0..spec.c_in {
        let plane = &mut image[c * spec.h_in * spec.w_in..(c + 1) * spec.h_in * spec.w_in];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * npix..(row + 1) * npix];
                for oy in 0..ho {
                    let iy = (oy * s + ky) as isize - p;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let base = (iy as usize) * spec.w_in;
                    for ox in 0..wo {
                        let ix = (ox * s + kx) as isize - p;
                        if ix >= 0 && ix < w {
                            plane[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `weight` may have any number of filters (rows);
/// the output then has that many channels.
pub fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    spec: &ConvSpec,
) -> Result<Tensor> {
    let batch = spec.check_input(input)?;
    let filters = weight.shape().first().copied().unwrap_or(0);
    spec.check_weight(weight, filters)?;
    if let Some(b) = bias {
        if b.shape() != [filters] {
            return Err(Error::dim(format!(
                "bias {:?} does not match {filters} filters",
                b.shape()
            )));
        }
    }
    let flen = spec.filter_len();
    let npix = spec.out_pixels();
    let in_len = spec.c_in * spec.h_in * spec.w_in;
    let mut out = vec![0.0; batch * filters * npix];
    let mut cols = vec![0.0; flen * npix];
    for b in 0..batch {
        im2col(spec, &input.data()[b * in_len..(b + 1) * in_len], &mut cols);
        let dst = &mut out[b * filters * npix..(b + 1) * filters * npix];
        if let Some(bias) = bias {
            for (f, chunk) in dst.chunks_mut(npix).enumerate() {
                chunk.iter_mut().for_each(|v| *v = bias.data()[f]);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(filters, flen, npix, 1.0, weight.data(), flen, 1, &cols, npix, 1, beta, dst, npix);
    }
    Tensor::from_vec(&[batch, filters, spec.h_out, spec.w_out], out)
}

#[derive(Clone, Debug)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Gradients of [`conv2d_forward`] with respect to input, weight and bias.
pub fn conv2d_backward(
    grad_out: &Tensor,
    saved_input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
) -> Result<(Tensor, Tensor, Tensor)> {
    let g = conv2d_backward_opt(grad_out, saved_input, weight, spec, true)?;
    Ok((g.input.expect("input gradient requested"), g.weight, g.bias))
}

/// As [`conv2d_backward`]; the input gradient is skipped when not needed.
pub fn conv2d_backward_opt(
    grad_out: &Tensor,
    saved_input: &Tensor,
    weight: &Tensor,
    spec: &ConvSpec,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let batch = spec.check_input(saved_input)?;
    let filters = weight.shape().first().copied().unwrap_or(0);
    spec.check_weight(weight, filters)?;
    if grad_out.shape() != [batch, filters, spec.h_out, spec.w_out] {
        return Err(Error::dim(format!(
            "grad_out {:?} does not match forward output [{batch}, {filters}, {}, {}]",
            grad_out.shape(),
            spec.h_out,
            spec.w_out
        )));
    }
    let flen = spec.filter_len();
    let npix = spec.out_pixels();
    let in_len = spec.c_in * spec.h_in * spec.w_in;
    let mut gw = vec![0.0; filters * flen];
    let mut gb = vec![0.0; filters];
    let mut gin = if need_input_grad {
        Some(vec![0.0; saved_input.len()])
    } else {
        None
    };
    let mut cols = vec![0.0; flen * npix];
    let mut gcols = vec![0.0; flen * npix];
    for b in 0..batch {
        let go = &grad_out.data()[b * filters * npix..(b + 1) * filters * npix];
        for (f, chunk) in go.chunks(npix).enumerate() {
            gb[f] += chunk.iter().sum::<f64>();
        }
        im2col(spec, &saved_input.data()[b * in_len..(b + 1) * in_len], &mut cols);
        // gw += go * cols^T
        gemm(filters, npix, flen, 1.0, go, npix, 1, &cols, 1, npix, 1.0, &mut gw, flen);
        if let Some(gin) = gin.as_mut() {
            // gcols = w^T * go
            gemm(flen, filters, npix, 1.0, weight.data(), 1, flen, go, npix, 1, 0.0, &mut gcols, npix);
            col2im(spec, &gcols, &mut gin[b * in_len..(b + 1) * in_len]);
        }
    }
    Ok(ConvGrads {
        input: gin
            .map(|g| Tensor::from_vec(saved_input.shape(), g))
            .transpose()?,
        weight: Tensor::from_vec(weight.shape(), gw)?,
        bias: Tensor::from_vec(&[filters], gb)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_extents_follow_conv_arithmetic() {
        let s = ConvSpec::new(3, 8, 7, 2, 3, 32, 32).unwrap();
        assert_eq!((s.h_out, s.w_out), (16, 16));
        let d = ConvSpec::new(8, 16, 1, 2, 0, 8, 8).unwrap();
        assert_eq!((d.h_out, d.w_out), (4, 4));
        assert!(ConvSpec::new(0, 1, 1, 1, 0, 1, 1).is_err());
        assert!(ConvSpec::new(1, 1, 5, 1, 0, 3, 3).is_err());
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let spec = ConvSpec::same(1, 1, 1, 3, 3).unwrap();
        let x = Tensor::randn(&[2, 1, 3, 3], 4);
        let w = Tensor::full(&[1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &w, Some(&b), &spec).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zero_kernel_yields_bias() {
        let spec = ConvSpec::same(2, 3, 3, 4, 4).unwrap();
        let x = Tensor::randn(&[1, 2, 4, 4], 1);
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        let b = Tensor::full(&[3], 1.5);
        let y = conv2d_forward(&x, &w, Some(&b), &spec).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let spec = ConvSpec::same(2, 3, 3, 4, 4).unwrap();
        let x = Tensor::randn(&[2, 2, 4, 4], 1);
        let w = Tensor::randn(&[3, 2, 3, 3], 2);
        let g = Tensor::zeros(&[2, 3, 4, 4]);
        let (gi, gw, gb) = conv2d_backward(&g, &x, &w, &spec).unwrap();
        assert!(gi.data().iter().chain(gw.data()).chain(gb.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn bias_gradient_is_channel_sum() {
        let spec = ConvSpec::same(1, 2, 3, 3, 3).unwrap();
        let x = Tensor::randn(&[2, 1, 3, 3], 1);
        let w = Tensor::randn(&[2, 1, 3, 3], 2);
        let g = Tensor::randn(&[2, 2, 3, 3], 3);
        let (_, _, gb) = conv2d_backward(&g, &x, &w, &spec).unwrap();
        for f in 0..2 {
            let expect: f64 = (0..2)
                .map(|b| g.data()[(b * 2 + f) * 9..(b * 2 + f + 1) * 9].iter().sum::<f64>())
                .sum();
            assert!((gb.data()[f] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let spec = ConvSpec::same(2, 3, 3, 4, 4).unwrap();
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let w = Tensor::zeros(&[3, 2, 3, 3]);
        assert!(matches!(
            conv2d_forward(&x, &w, None, &spec),
            Err(Error::Dimension(_))
        ));
    }
}
