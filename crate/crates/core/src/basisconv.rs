//! Basis convolutions: a layer trains `r` filters (the basis) and derives
//! all `C_out` filters, or their outputs, as linear combinations.
//!
//! Four modes share one layer type:
//!
//! * `Full` is an ordinary convolution.
//! * `WeightCompose` rebuilds `W = C * B` each step, then convolves.
//! * `OutputCompose` convolves with `B` only and mixes the `r` output
//!   channels through the dense `C_out x r` matrix `C`.
//! * `RestrictedCompose` also mixes outputs, but every output channel is
//!   either a copy of one basis output or a weighted sum of two.
//!
//! Bias always has `C_out` entries and is added after composition, which
//! keeps the modes exactly interchangeable.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{svd, ColPivQr};
use crate::nn::conv::{conv2d_backward_opt, conv2d_forward, ConvSpec};
use crate::nn::{Mode, ParamVisitor};
use crate::rng::SeededRng;
use crate::tensor::{gemm, Tensor};

/// Round half up, as used for every fractional channel count.
pub fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor().max(0.0) as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum BasisMode {
    Full,
    WeightCompose { r: usize },
    OutputCompose { r: usize },
    RestrictedCompose { alpha: f64, beta: f64 },
}

/// A [`BasisMode`] resolved against a concrete output width: all channel
/// counts are integers. Layers and the cost model both consume this, so
/// they always agree on the rounded counts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Decomposition {
    Full,
    WeightCompose { r: usize },
    OutputCompose { r: usize },
    Restricted { r: usize, pairs: usize },
}

impl BasisMode {
    pub fn resolve(&self, c_out: usize) -> Result<Decomposition> {
        match *self {
            BasisMode::Full => Ok(Decomposition::Full),
            BasisMode::WeightCompose { r } | BasisMode::OutputCompose { r } => {
                if r == 0 || r > c_out {
                    return Err(Error::config(format!("basis count r={r} outside 1..={c_out}")));
                }
                Ok(match self {
                    BasisMode::WeightCompose { .. } => Decomposition::WeightCompose { r },
                    _ => Decomposition::OutputCompose { r },
                })
            }
            BasisMode::RestrictedCompose { alpha, beta } => {
                if !(alpha > 0.0 && alpha <= 1.0) {
                    return Err(Error::config(format!("alpha={alpha} outside (0, 1]")));
                }
                if !(0.0..=1.0).contains(&beta) {
                    return Err(Error::config(format!("beta={beta} outside [0, 1]")));
                }
                let r = round_half_up(alpha * c_out as f64).max(1);
                let pairs = round_half_up(beta * c_out as f64);
                if pairs > 0 && r < 2 {
                    return Err(Error::config(format!(
                        "beta={beta} needs at least 2 basis filters, alpha={alpha} gives {r} of {c_out}"
                    )));
                }
                if c_out - pairs < r {
                    return Err(Error::config(format!(
                        "alpha={alpha}, beta={beta}: {r} basis outputs do not fit in {} copy slots of {c_out}",
                        c_out - pairs
                    )));
                }
                Ok(Decomposition::Restricted { r, pairs })
            }
        }
    }
}

impl Decomposition {
    /// Number of filters actually convolved with the input.
    pub fn basis_count(&self, c_out: usize) -> usize {
        match *self {
            Decomposition::Full => c_out,
            Decomposition::WeightCompose { r }
            | Decomposition::OutputCompose { r }
            | Decomposition::Restricted { r, .. } => r,
        }
    }
}

/// How output channel `j` of a restricted layer is formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputRule {
    /// Basis output `i`, unchanged.
    Copy(usize),
    /// `w[slot][0] * Y[first] + w[slot][1] * Y[second]`.
    Pair { first: usize, second: usize, slot: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Coeffs {
    None,
    /// `[C_out, r]`, trainable.
    Dense(Tensor),
    /// Frozen routing plus trainable `[pairs, 2]` pair weights.
    Restricted { rules: Vec<OutputRule>, pair_weights: Tensor },
}

#[derive(Clone, Debug)]
enum Cache {
    Plain { input: Tensor },
    Composed { input: Tensor, weight: Tensor },
    Mixed { input: Tensor, basis_out: Tensor },
}

#[derive(Clone, Debug)]
pub struct BasisConvLayer {
    spec: ConvSpec,
    mode: BasisMode,
    decomposition: Decomposition,
    seed: u64,
    basis_weight: Tensor,
    coeffs: Coeffs,
    bias: Tensor,
    grad_basis: Tensor,
    grad_coeffs: Option<Tensor>,
    grad_bias: Tensor,
    cache: Option<Cache>,
}

impl BasisConvLayer {
    /// Seeded random layer in `mode`.
    ///
    /// Basis filters use He fan-in scaling; dense coefficients are
    /// `N(0, 1/r)`; pair weights are `N(0, 1/2)`; bias starts at zero.
    /// Restricted routing: outputs `0..r` copy basis `0..r`, the remaining
    /// copy slots cycle over the basis, and the last `pairs` outputs each
    /// get two distinct basis indices drawn without replacement.
    pub fn new(spec: ConvSpec, mode: BasisMode, seed: u64) -> Result<Self> {
        let decomposition = mode.resolve(spec.c_out)?;
        let r = decomposition.basis_count(spec.c_out);
        let mut rng = SeededRng::new(seed);
        let he = (2.0 / spec.filter_len() as f64).sqrt();
        let basis_weight = Tensor::randn_with(&[r, spec.c_in, spec.k, spec.k], he, &mut rng);
        let coeffs = match decomposition {
            Decomposition::Full => Coeffs::None,
            Decomposition::WeightCompose { r } | Decomposition::OutputCompose { r } => {
                Coeffs::Dense(Tensor::randn_with(&[spec.c_out, r], 1.0 / (r as f64).sqrt(), &mut rng))
            }
            Decomposition::Restricted { r, pairs } => {
                let copies = spec.c_out - pairs;
                let mut rules: Vec<OutputRule> = (0..copies).map(|j| OutputRule::Copy(j % r)).collect();
                let mut weights = Vec::with_capacity(2 * pairs);
                for slot in 0..pairs {
                    let first = rng.below(r);
                    let mut second = rng.below(r - 1);
                    if second >= first {
                        second += 1;
                    }
                    rules.push(OutputRule::Pair { first, second, slot });
                }
                for _ in 0..2 * pairs {
                    weights.push(rng.normal() * std::f64::consts::FRAC_1_SQRT_2);
                }
                Coeffs::Restricted {
                    rules,
                    pair_weights: Tensor::from_vec(&[pairs, 2], weights)?,
                }
            }
        };
        Self::assemble(spec, mode, seed, basis_weight, coeffs, Tensor::zeros(&[spec.c_out]))
    }

    /// Ordinary convolution with the given weight and bias.
    pub fn plain(spec: ConvSpec, weight: Tensor, bias: Tensor) -> Result<Self> {
        Self::assemble(spec, BasisMode::Full, 0, weight, Coeffs::None, bias)
    }

    /// Dense-mode layer (`WeightCompose` or `OutputCompose`) from explicit
    /// basis filters `[r, C_in, K, K]` and coefficients `[C_out, r]`.
    pub fn with_dense(spec: ConvSpec, mode: BasisMode, basis: Tensor, coeffs: Tensor, bias: Tensor) -> Result<Self> {
        if !matches!(mode, BasisMode::WeightCompose { .. } | BasisMode::OutputCompose { .. }) {
            return Err(Error::Usage(format!("with_dense needs a dense mode, got {mode:?}")));
        }
        Self::assemble(spec, mode, 0, basis, Coeffs::Dense(coeffs), bias)
    }

    /// Restricted-mode layer from explicit parts (checkpoint restore).
    pub fn with_restricted(
        spec: ConvSpec,
        alpha: f64,
        beta: f64,
        seed: u64,
        basis: Tensor,
        rules: Vec<OutputRule>,
        pair_weights: Tensor,
        bias: Tensor,
    ) -> Result<Self> {
        Self::assemble(
            spec,
            BasisMode::RestrictedCompose { alpha, beta },
            seed,
            basis,
            Coeffs::Restricted { rules, pair_weights },
            bias,
        )
    }

    fn assemble(
        spec: ConvSpec,
        mode: BasisMode,
        seed: u64,
        basis_weight: Tensor,
        coeffs: Coeffs,
        bias: Tensor,
    ) -> Result<Self> {
        let decomposition = mode.resolve(spec.c_out)?;
        let r = decomposition.basis_count(spec.c_out);
        spec.check_weight(&basis_weight, r)?;
        if bias.shape() != [spec.c_out] {
            return Err(Error::dim(format!("bias {:?}, expected [{}]", bias.shape(), spec.c_out)));
        }
        match (&decomposition, &coeffs) {
            (Decomposition::Full, Coeffs::None) => {}
            (Decomposition::WeightCompose { r } | Decomposition::OutputCompose { r }, Coeffs::Dense(c)) => {
                if c.shape() != [spec.c_out, *r] {
                    return Err(Error::dim(format!("coefficients {:?}, expected [{}, {r}]", c.shape(), spec.c_out)));
                }
            }
            (Decomposition::Restricted { r, pairs }, Coeffs::Restricted { rules, pair_weights }) => {
                validate_rules(rules, *r, *pairs, spec.c_out)?;
                if pair_weights.shape() != [*pairs, 2] {
                    return Err(Error::dim(format!("pair weights {:?}, expected [{pairs}, 2]", pair_weights.shape())));
                }
            }
            _ => return Err(Error::Usage(format!("coefficient structure does not match mode {mode:?}"))),
        }
        let grad_coeffs = match &coeffs {
            Coeffs::None => None,
            Coeffs::Dense(c) => Some(Tensor::zeros(c.shape())),
            Coeffs::Restricted { pair_weights, .. } => Some(Tensor::zeros(pair_weights.shape())),
        };
        Ok(Self {
            spec,
            mode,
            decomposition,
            seed,
            grad_basis: Tensor::zeros(basis_weight.shape()),
            grad_bias: Tensor::zeros(bias.shape()),
            grad_coeffs,
            basis_weight,
            coeffs,
            bias,
            cache: None,
        })
    }

    /// Records the seed the layer was (or claims to be) generated from.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn spec(&self) -> &ConvSpec {
        &self.spec
    }

    pub fn mode(&self) -> BasisMode {
        self.mode
    }

    pub fn decomposition(&self) -> Decomposition {
        self.decomposition
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn basis_weight(&self) -> &Tensor {
        &self.basis_weight
    }

    pub fn coeffs(&self) -> &Coeffs {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut Coeffs {
        &mut self.coeffs
    }

    pub fn bias(&self) -> &Tensor {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut Tensor {
        &mut self.bias
    }

    pub fn basis_weight_mut(&mut self) -> &mut Tensor {
        &mut self.basis_weight
    }

    pub fn basis_count(&self) -> usize {
        self.decomposition.basis_count(self.spec.c_out)
    }

    pub fn is_full(&self) -> bool {
        matches!(self.decomposition, Decomposition::Full)
    }

    /// `r * C_in * K^2` + coefficient parameters + `C_out` (bias).
    ///
    /// Copy routes in restricted mode are not trainable and do not count.
    pub fn trainable_param_count(&self) -> usize {
        let coeff = match &self.coeffs {
            Coeffs::None => 0,
            Coeffs::Dense(c) => c.len(),
            Coeffs::Restricted { pair_weights, .. } => pair_weights.len(),
        };
        self.basis_weight.len() + coeff + self.bias.len()
    }

    /// The `[C_out, r]` matrix this layer mixes with. Restricted rules are
    /// embedded as a sparse matrix (ones for copies, pair weights for
    /// pairs). `None` for a plain layer.
    pub fn dense_embedding(&self) -> Option<Tensor> {
        match &self.coeffs {
            Coeffs::None => None,
            Coeffs::Dense(c) => Some(c.clone()),
            Coeffs::Restricted { rules, pair_weights } => {
                let r = self.basis_count();
                let mut m = Tensor::zeros(&[self.spec.c_out, r]);
                for (j, rule) in rules.iter().enumerate() {
                    match *rule {
                        OutputRule::Copy(i) => m.data_mut()[j * r + i] = 1.0,
                        OutputRule::Pair { first, second, slot } => {
                            m.data_mut()[j * r + first] += pair_weights.data()[2 * slot];
                            m.data_mut()[j * r + second] += pair_weights.data()[2 * slot + 1];
                        }
                    }
                }
                Some(m)
            }
        }
    }

    /// Full `[C_out, C_in, K, K]` weight equivalent to this layer:
    /// `W[j] = sum_i C[j, i] B[i]` (dense), `B[i]` (copy) or
    /// `w1 B[i1] + w2 B[i2]` (pair).
    pub fn compose_full_weight(&self) -> Tensor {
        let spec = &self.spec;
        let flen = spec.filter_len();
        match &self.coeffs {
            Coeffs::None => self.basis_weight.clone(),
            Coeffs::Dense(c) => {
                let r = self.basis_count();
                let mut w = vec![0.0; spec.c_out * flen];
                gemm(spec.c_out, r, flen, 1.0, c.data(), r, 1, self.basis_weight.data(), flen, 1, 0.0, &mut w, flen);
                Tensor::from_vec(&spec.weight_shape(), w).expect("composed weight shape")
            }
            Coeffs::Restricted { rules, pair_weights } => {
                let b = self.basis_weight.data();
                let mut w = vec![0.0; spec.c_out * flen];
                for (j, rule) in rules.iter().enumerate() {
                    let dst = &mut w[j * flen..(j + 1) * flen];
                    match *rule {
                        OutputRule::Copy(i) => dst.copy_from_slice(&b[i * flen..(i + 1) * flen]),
                        OutputRule::Pair { first, second, slot } => {
                            let (w1, w2) = (pair_weights.data()[2 * slot], pair_weights.data()[2 * slot + 1]);
                            for (t, d) in dst.iter_mut().enumerate() {
                                *d = w1 * b[first * flen + t] + w2 * b[second * flen + t];
                            }
                        }
                    }
                }
                Tensor::from_vec(&spec.weight_shape(), w).expect("composed weight shape")
            }
        }
    }

    /// Plain layer carrying the composed weight and this layer's bias.
    pub fn to_full(&self) -> BasisConvLayer {
        BasisConvLayer::plain(self.spec, self.compose_full_weight(), self.bias.clone())
            .expect("composed layer is consistent")
    }

    fn require(&self, want: &str, ok: bool) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(Error::Usage(format!("{want} forward called on a {:?} layer", self.mode)))
        }
    }

    pub fn forward_plain(&self, input: &Tensor) -> Result<Tensor> {
        self.require("plain", self.is_full())?;
        conv2d_forward(input, &self.basis_weight, Some(&self.bias), &self.spec)
    }

    pub fn forward_weight_compose(&self, input: &Tensor) -> Result<Tensor> {
        self.require(
            "weight-compose",
            matches!(self.decomposition, Decomposition::WeightCompose { .. }),
        )?;
        conv2d_forward(input, &self.compose_full_weight(), Some(&self.bias), &self.spec)
    }

    pub fn forward_output_compose(&self, input: &Tensor) -> Result<Tensor> {
        self.require(
            "output-compose",
            matches!(self.decomposition, Decomposition::OutputCompose { .. }),
        )?;
        let basis_out = conv2d_forward(input, &self.basis_weight, None, &self.spec)?;
        self.mix(&basis_out)
    }

    pub fn forward_restricted(&self, input: &Tensor) -> Result<Tensor> {
        self.require(
            "restricted",
            matches!(self.decomposition, Decomposition::Restricted { .. }),
        )?;
        let basis_out = conv2d_forward(input, &self.basis_weight, None, &self.spec)?;
        self.mix(&basis_out)
    }

    /// Mode-dispatched forward; training mode caches for [`Self::backward`].
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<Tensor> {
        let (out, cache) = match self.decomposition {
            Decomposition::Full => (
                self.forward_plain(input)?,
                Cache::Plain { input: input.clone() },
            ),
            Decomposition::WeightCompose { .. } => {
                let weight = self.compose_full_weight();
                let out = conv2d_forward(input, &weight, Some(&self.bias), &self.spec)?;
                (out, Cache::Composed { input: input.clone(), weight })
            }
            Decomposition::OutputCompose { .. } | Decomposition::Restricted { .. } => {
                let basis_out = conv2d_forward(input, &self.basis_weight, None, &self.spec)?;
                let out = self.mix(&basis_out)?;
                (out, Cache::Mixed { input: input.clone(), basis_out })
            }
        };
        if mode == Mode::Train {
            self.cache = Some(cache);
        }
        Ok(out)
    }

    /// Channel mixing of basis outputs `[B, r, H, W]` into `[B, C_out, H, W]`
    /// plus bias.
    fn mix(&self, basis_out: &Tensor) -> Result<Tensor> {
        let [batch, r, h, w] = basis_out.dims4()?;
        let npix = h * w;
        let c_out = self.spec.c_out;
        let mut out = vec![0.0; batch * c_out * npix];
        for b in 0..batch {
            let y = &basis_out.data()[b * r * npix..(b + 1) * r * npix];
            let dst = &mut out[b * c_out * npix..(b + 1) * c_out * npix];
            for (j, chunk) in dst.chunks_mut(npix).enumerate() {
                chunk.iter_mut().for_each(|v| *v = self.bias.data()[j]);
            }
            match &self.coeffs {
                Coeffs::Dense(c) => {
                    gemm(c_out, r, npix, 1.0, c.data(), r, 1, y, npix, 1, 1.0, dst, npix);
                }
                Coeffs::Restricted { rules, pair_weights } => {
                    for (j, rule) in rules.iter().enumerate() {
                        let d = &mut dst[j * npix..(j + 1) * npix];
                        match *rule {
                            OutputRule::Copy(i) => {
                                for (dv, yv) in d.iter_mut().zip(&y[i * npix..(i + 1) * npix]) {
                                    *dv += yv;
                                }
                            }
                            OutputRule::Pair { first, second, slot } => {
                                let (w1, w2) = (pair_weights.data()[2 * slot], pair_weights.data()[2 * slot + 1]);
                                let ya = &y[first * npix..(first + 1) * npix];
                                let yb = &y[second * npix..(second + 1) * npix];
                                for ((dv, a), bv) in d.iter_mut().zip(ya).zip(yb) {
                                    *dv += w1 * a + w2 * bv;
                                }
                            }
                        }
                    }
                }
                Coeffs::None => return Err(Error::Usage("mix called on a plain layer".into())),
            }
        }
        Tensor::from_vec(&[batch, c_out, h, w], out)
    }

    /// Accumulates parameter gradients and returns the input gradient when
    /// `need_input_grad` is set.
    pub fn backward(&mut self, grad_out: &Tensor, need_input_grad: bool) -> Result<Option<Tensor>> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::Usage("basis conv backward without a training forward".into()))?;
        let spec = self.spec;
        let flen = spec.filter_len();
        let r = self.basis_count();
        match cache {
            Cache::Plain { input } => {
                let g = conv2d_backward_opt(grad_out, &input, &self.basis_weight, &spec, need_input_grad)?;
                self.grad_basis.add_assign(&g.weight)?;
                self.grad_bias.add_assign(&g.bias)?;
                Ok(g.input)
            }
            Cache::Composed { input, weight } => {
                let g = conv2d_backward_opt(grad_out, &input, &weight, &spec, need_input_grad)?;
                self.grad_bias.add_assign(&g.bias)?;
                let Coeffs::Dense(c) = &self.coeffs else {
                    return Err(Error::Usage("weight-compose cache on a non-dense layer".into()));
                };
                // dB += C^T dW ; dC += dW B^T
                gemm(r, spec.c_out, flen, 1.0, c.data(), 1, r, g.weight.data(), flen, 1, 1.0, self.grad_basis.data_mut(), flen);
                let gc = self.grad_coeffs.as_mut().expect("dense grads");
                gemm(spec.c_out, flen, r, 1.0, g.weight.data(), flen, 1, self.basis_weight.data(), 1, flen, 1.0, gc.data_mut(), r);
                Ok(g.input)
            }
            Cache::Mixed { input, basis_out } => {
                let [batch, c_out, h, w] = grad_out.dims4()?;
                if c_out != spec.c_out || basis_out.shape() != [batch, r, h, w] {
                    return Err(Error::dim("basis conv gradient shape differs from forward"));
                }
                let npix = h * w;
                let go = grad_out.data();
                let y = basis_out.data();
                let mut grad_y = vec![0.0; batch * r * npix];
                for b in 0..batch {
                    let gb = &go[b * c_out * npix..(b + 1) * c_out * npix];
                    for (j, chunk) in gb.chunks(npix).enumerate() {
                        self.grad_bias.data_mut()[j] += chunk.iter().sum::<f64>();
                    }
                    let yb = &y[b * r * npix..(b + 1) * r * npix];
                    let gy = &mut grad_y[b * r * npix..(b + 1) * r * npix];
                    let gc = self.grad_coeffs.as_mut().expect("mixing grads");
                    match &self.coeffs {
                        Coeffs::Dense(c) => {
                            // dC += g Y^T ; dY = C^T g
                            gemm(c_out, npix, r, 1.0, gb, npix, 1, yb, 1, npix, 1.0, gc.data_mut(), r);
                            gemm(r, c_out, npix, 1.0, c.data(), 1, r, gb, npix, 1, 0.0, gy, npix);
                        }
                        Coeffs::Restricted { rules, pair_weights } => {
                            for (j, rule) in rules.iter().enumerate() {
                                let gj = &gb[j * npix..(j + 1) * npix];
                                match *rule {
                                    OutputRule::Copy(i) => {
                                        for (d, g) in gy[i * npix..(i + 1) * npix].iter_mut().zip(gj) {
                                            *d += g;
                                        }
                                    }
                                    OutputRule::Pair { first, second, slot } => {
                                        let (w1, w2) = (pair_weights.data()[2 * slot], pair_weights.data()[2 * slot + 1]);
                                        let ya = &yb[first * npix..(first + 1) * npix];
                                        let ybb = &yb[second * npix..(second + 1) * npix];
                                        gc.data_mut()[2 * slot] += gj.iter().zip(ya).map(|(g, v)| g * v).sum::<f64>();
                                        gc.data_mut()[2 * slot + 1] += gj.iter().zip(ybb).map(|(g, v)| g * v).sum::<f64>();
                                        for (d, g) in gy[first * npix..(first + 1) * npix].iter_mut().zip(gj) {
                                            *d += w1 * g;
                                        }
                                        for (d, g) in gy[second * npix..(second + 1) * npix].iter_mut().zip(gj) {
                                            *d += w2 * g;
                                        }
                                    }
                                }
                            }
                        }
                        Coeffs::None => unreachable!("mixed cache on a plain layer"),
                    }
                }
                let grad_y = Tensor::from_vec(basis_out.shape(), grad_y)?;
                let g = conv2d_backward_opt(&grad_y, &input, &self.basis_weight, &spec, need_input_grad)?;
                self.grad_basis.add_assign(&g.weight)?;
                Ok(g.input)
            }
        }
    }

    /// Visits trainable tensors: `weight`/`bias` for a plain layer,
    /// otherwise `basis_weight`, `coeffs` or `pair_weights`, and `bias`.
    pub fn visit(&mut self, prefix: &str, f: &mut ParamVisitor<'_>) {
        if self.is_full() {
            f(&format!("{prefix}.weight"), &mut self.basis_weight, &mut self.grad_basis);
        } else {
            f(&format!("{prefix}.basis_weight"), &mut self.basis_weight, &mut self.grad_basis);
            match (&mut self.coeffs, self.grad_coeffs.as_mut()) {
                (Coeffs::Dense(c), Some(g)) => f(&format!("{prefix}.coeffs"), c, g),
                (Coeffs::Restricted { pair_weights, .. }, Some(g)) if !pair_weights.is_empty() => {
                    f(&format!("{prefix}.pair_weights"), pair_weights, g)
                }
                _ => {}
            }
        }
        f(&format!("{prefix}.bias"), &mut self.bias, &mut self.grad_bias);
    }
}

fn validate_rules(rules: &[OutputRule], r: usize, pairs: usize, c_out: usize) -> Result<()> {
    if rules.len() != c_out {
        return Err(Error::config(format!("{} routing rules for {c_out} outputs", rules.len())));
    }
    let mut seen_pairs = 0;
    for (j, rule) in rules.iter().enumerate() {
        match *rule {
            OutputRule::Copy(i) => {
                if i >= r || (j < r && i != j) {
                    return Err(Error::config(format!("output {j}: invalid copy of basis {i}")));
                }
            }
            OutputRule::Pair { first, second, slot } => {
                if first >= r || second >= r || first == second || slot != seen_pairs {
                    return Err(Error::config(format!("output {j}: invalid pair ({first}, {second}, slot {slot})")));
                }
                seen_pairs += 1;
            }
        }
    }
    if seen_pairs != pairs {
        return Err(Error::config(format!("{seen_pairs} pair rules, expected {pairs}")));
    }
    Ok(())
}

/// Extraction result from [`extract_basis_qr`].
#[derive(Clone, Debug)]
pub struct QrBasis {
    pub basis: Tensor,
    pub coeffs: Tensor,
    /// Original filter index of each basis filter, in pivot order.
    pub selected: Vec<usize>,
    /// Numerical rank of the selected filters.
    pub rank: usize,
    /// `||M - C B||_F`.
    pub residual: f64,
}

fn weight_matrix(full_weight: &Tensor, r: usize) -> Result<(Tensor, [usize; 4])> {
    let dims = full_weight.dims4()?;
    let [c_out, c_in, kh, kw] = dims;
    if r == 0 || r > c_out {
        return Err(Error::config(format!("basis count r={r} outside 1..={c_out}")));
    }
    Ok((full_weight.clone().reshape(&[c_out, c_in * kh * kw])?, dims))
}

/// Truncated SVD of the `[C_out, C_in*K*K]` weight matrix `M = U S V^T`:
/// basis `S_r V_r^T` (reshaped to filters) and coefficients `U_r`.
/// `C * B` is the best rank-`r` approximation of `M` in Frobenius norm.
pub fn extract_basis_svd(full_weight: &Tensor, r: usize) -> Result<(Tensor, Tensor)> {
    let (m, [c_out, c_in, kh, kw]) = weight_matrix(full_weight, r)?;
    let flen = c_in * kh * kw;
    let f = svd(&m)?;
    let k = f.s.len();
    let mut basis = vec![0.0; r * flen];
    let mut coeffs = vec![0.0; c_out * r];
    for i in 0..r.min(k) {
        for t in 0..flen {
            basis[i * flen + t] = f.s[i] * f.vt.data()[i * flen + t];
        }
        for j in 0..c_out {
            coeffs[j * r + i] = f.u.data()[j * k + i];
        }
    }
    Ok((
        Tensor::from_vec(&[r, c_in, kh, kw], basis)?,
        Tensor::from_vec(&[c_out, r], coeffs)?,
    ))
}

/// Column-pivoted QR on `M^T` picks `r` actual filters as the basis; the
/// coefficients solve `min ||M - C B||_F` by least squares. Rows for the
/// selected filters are exact unit vectors.
pub fn extract_basis_qr(full_weight: &Tensor, r: usize) -> Result<QrBasis> {
    let (m, [c_out, c_in, kh, kw]) = weight_matrix(full_weight, r)?;
    let flen = c_in * kh * kw;
    let pivots = ColPivQr::new(&m.transpose()?)?;
    let selected: Vec<usize> = pivots.perm()[..r].to_vec();
    let md = m.data();
    let mut basis = vec![0.0; r * flen];
    for (i, &s) in selected.iter().enumerate() {
        basis[i * flen..(i + 1) * flen].copy_from_slice(&md[s * flen..(s + 1) * flen]);
    }
    let basis_mat = Tensor::from_vec(&[r, flen], basis.clone())?;
    let ls = ColPivQr::new(&basis_mat.transpose()?)?;
    let mut coeffs = vec![0.0; c_out * r];
    for j in 0..c_out {
        let row = &mut coeffs[j * r..(j + 1) * r];
        if let Some(pos) = selected.iter().position(|&s| s == j) {
            row[pos] = 1.0;
        } else {
            row.copy_from_slice(&ls.solve_least_squares(&md[j * flen..(j + 1) * flen])?);
        }
    }
    let coeffs = Tensor::from_vec(&[c_out, r], coeffs)?;
    let residual = m.sub(&coeffs.matmul(&basis_mat)?)?.frobenius_norm();
    Ok(QrBasis {
        basis: Tensor::from_vec(&[r, c_in, kh, kw], basis)?,
        coeffs,
        selected,
        rank: ls.rank(),
        residual,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ConvSpec {
        ConvSpec::same(3, 8, 3, 5, 5).unwrap()
    }

    #[test]
    fn restricted_counts_follow_rounding() {
        let layer = BasisConvLayer::new(spec(), BasisMode::RestrictedCompose { alpha: 0.5, beta: 0.25 }, 3).unwrap();
        assert_eq!(layer.basis_count(), 4);
        let Coeffs::Restricted { rules, pair_weights } = layer.coeffs() else {
            panic!("restricted coeffs expected");
        };
        let copies = rules.iter().filter(|r| matches!(r, OutputRule::Copy(_))).count();
        assert_eq!((copies, pair_weights.shape()[0]), (6, 2));
        for (j, rule) in rules.iter().take(4).enumerate() {
            assert_eq!(*rule, OutputRule::Copy(j));
        }
    }

    #[test]
    fn invalid_modes_are_config_errors() {
        let s = spec();
        assert!(matches!(BasisConvLayer::new(s, BasisMode::OutputCompose { r: 9 }, 0), Err(Error::Config(_))));
        assert!(matches!(BasisConvLayer::new(s, BasisMode::WeightCompose { r: 0 }, 0), Err(Error::Config(_))));
        // alpha * 8 rounds to one basis filter, which cannot form pairs.
        assert!(matches!(
            BasisConvLayer::new(s, BasisMode::RestrictedCompose { alpha: 0.1, beta: 0.25 }, 0),
            Err(Error::Config(_))
        ));
        // Basis outputs must fit in the copy slots.
        assert!(matches!(
            BasisConvLayer::new(s, BasisMode::RestrictedCompose { alpha: 0.75, beta: 0.5 }, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn tiny_alpha_keeps_one_filter() {
        let d = BasisMode::RestrictedCompose { alpha: 0.01, beta: 0.0 }.resolve(8).unwrap();
        assert_eq!(d, Decomposition::Restricted { r: 1, pairs: 0 });
    }

    #[test]
    fn same_seed_same_structure() {
        let mode = BasisMode::RestrictedCompose { alpha: 0.5, beta: 0.5 };
        let a = BasisConvLayer::new(spec(), mode, 17).unwrap();
        let b = BasisConvLayer::new(spec(), mode, 17).unwrap();
        assert_eq!(a.coeffs(), b.coeffs());
        assert_eq!(a.basis_weight(), b.basis_weight());
    }

    #[test]
    fn wrong_mode_forward_is_usage_error() {
        let layer = BasisConvLayer::new(spec(), BasisMode::OutputCompose { r: 2 }, 0).unwrap();
        let x = Tensor::zeros(&[1, 3, 5, 5]);
        assert!(matches!(layer.forward_weight_compose(&x), Err(Error::Usage(_))));
        assert!(matches!(layer.forward_restricted(&x), Err(Error::Usage(_))));
        assert!(layer.forward_output_compose(&x).is_ok());
    }

    #[test]
    fn zero_input_gives_bias() {
        let mut layer = BasisConvLayer::new(spec(), BasisMode::OutputCompose { r: 3 }, 0).unwrap();
        layer.bias_mut().data_mut().iter_mut().enumerate().for_each(|(i, b)| *b = i as f64);
        let y = layer.forward_output_compose(&Tensor::zeros(&[1, 3, 5, 5])).unwrap();
        for (j, chunk) in y.data().chunks(25).enumerate() {
            assert!(chunk.iter().all(|&v| v == j as f64));
        }
    }

    #[test]
    fn identity_coefficients_compose_to_basis() {
        let s = spec();
        let basis = Tensor::randn(&[8, 3, 3, 3], 1);
        let mut eye = Tensor::zeros(&[8, 8]);
        for i in 0..8 {
            eye.data_mut()[i * 8 + i] = 1.0;
        }
        let layer = BasisConvLayer::with_dense(s, BasisMode::WeightCompose { r: 8 }, basis.clone(), eye, Tensor::zeros(&[8])).unwrap();
        assert_eq!(layer.compose_full_weight(), basis);
        let zero = BasisConvLayer::with_dense(s, BasisMode::WeightCompose { r: 8 }, basis, Tensor::zeros(&[8, 8]), Tensor::zeros(&[8])).unwrap();
        assert!(zero.compose_full_weight().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_count_matches_formula() {
        let s = spec();
        let dense = BasisConvLayer::new(s, BasisMode::OutputCompose { r: 3 }, 0).unwrap();
        assert_eq!(dense.trainable_param_count(), 3 * 27 + 3 * 8 + 8);
        let restricted = BasisConvLayer::new(s, BasisMode::RestrictedCompose { alpha: 0.5, beta: 0.25 }, 0).unwrap();
        assert_eq!(restricted.trainable_param_count(), 4 * 27 + 2 * 2 + 8);
        let full = BasisConvLayer::new(s, BasisMode::Full, 0).unwrap();
        assert_eq!(full.trainable_param_count(), 8 * 27 + 8);
    }

    #[test]
    fn rank_one_weight_is_recovered_exactly() {
        let filter = Tensor::randn(&[1, 2, 3, 3], 4);
        let mut w = Vec::new();
        for j in 0..5 {
            w.extend(filter.data().iter().map(|v| v * (j as f64 - 1.5)));
        }
        let w = Tensor::from_vec(&[5, 2, 3, 3], w).unwrap();
        let (basis, coeffs) = extract_basis_svd(&w, 1).unwrap();
        let rebuilt = coeffs.matmul(&basis.reshape(&[1, 18]).unwrap()).unwrap();
        assert!(rebuilt.max_abs_diff(&w.reshape(&[5, 18]).unwrap()) < 1e-10);
    }

    #[test]
    fn qr_full_selection_is_exact() {
        let w = Tensor::randn(&[4, 2, 3, 3], 9);
        let q = extract_basis_qr(&w, 4).unwrap();
        assert!(q.residual < 1e-10);
        let mut sel = q.selected.clone();
        sel.sort_unstable();
        assert_eq!(sel, vec![0, 1, 2, 3]);
        for (pos, &s) in q.selected.iter().enumerate() {
            let row = &q.coeffs.data()[s * 4..(s + 1) * 4];
            for (i, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == pos { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn extraction_rejects_bad_rank() {
        let w = Tensor::randn(&[4, 2, 3, 3], 9);
        assert!(matches!(extract_basis_svd(&w, 0), Err(Error::Config(_))));
        assert!(matches!(extract_basis_qr(&w, 5), Err(Error::Config(_))));
    }
}
