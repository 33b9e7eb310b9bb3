//! Counting oracles that share no code with the closed forms.
//!
//! [`instrumented_forward`] evaluates a layer with plain loops over an
//! explicitly zero-padded input and increments a counter at every
//! multiply-accumulate (a copied basis output counts one operation per
//! element). It also returns the output so callers can check that the
//! counted computation is the real one.
//!
//! [`dependency_paths`] builds the layer's data-flow graph, with one node
//! per input, intermediate and output scalar, and counts input-to-output
//! paths by dynamic programming over the graph.

use crate::basisconv::{BasisConvLayer, Coeffs, Decomposition, OutputRule};
use crate::error::{Error, Result};
use crate::nn::conv::ConvSpec;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MacCount {
    /// Building full filters from basis and coefficients.
    pub composition: u64,
    /// Sliding-window multiply-accumulates.
    pub convolution: u64,
    /// Combining basis outputs into output channels.
    pub mixing: u64,
}

impl MacCount {
    pub fn total(&self) -> u64 {
        self.composition + self.convolution + self.mixing
    }
}

fn pad_input(x: &[f64], spec: &ConvSpec) -> (Vec<f64>, usize, usize) {
    let (hp, wp) = (spec.h_in + 2 * spec.padding, spec.w_in + 2 * spec.padding);
    let mut out = vec![0.0; spec.c_in * hp * wp];
    for c in 0..spec.c_in {
        for y in 0..spec.h_in {
            for xx in 0..spec.w_in {
                out[(c * hp + y + spec.padding) * wp + xx + spec.padding] = x[(c * spec.h_in + y) * spec.w_in + xx];
            }
        }
    }
    (out, hp, wp)
}

fn direct_conv(padded: &[f64], hp: usize, wp: usize, filters: &[f64], n: usize, spec: &ConvSpec, macs: &mut u64) -> Vec<f64> {
    let k = spec.k;
    let mut out = vec![0.0; n * spec.h_out * spec.w_out];
    for o in 0..n {
        for oy in 0..spec.h_out {
            for ox in 0..spec.w_out {
                let mut acc = 0.0;
                for c in 0..spec.c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let w = filters[((o * spec.c_in + c) * k + ky) * k + kx];
                            let v = padded[(c * hp + oy * spec.stride + ky) * wp + ox * spec.stride + kx];
                            acc += w * v;
                            *macs += 1;
                        }
                    }
                }
                out[(o * spec.h_out + oy) * spec.w_out + ox] = acc;
            }
        }
    }
    out
}

/// Loop-level forward of `layer` on `input` (any batch size; the count
/// covers the whole batch, so compare against closed forms with batch 1).
pub fn instrumented_forward(layer: &BasisConvLayer, input: &Tensor) -> Result<(Tensor, MacCount)> {
    let spec = *layer.spec();
    let [batch, c, h, w] = input.dims4()?;
    if c != spec.c_in || h != spec.h_in || w != spec.w_in {
        return Err(Error::Dimension(format!("oracle input {:?} does not match layer", input.shape())));
    }
    let flen = spec.filter_len();
    let npix = spec.out_pixels();
    let r = layer.basis_count();
    let basis = layer.basis_weight().data();
    let bias = layer.bias().data();
    let mut count = MacCount::default();

    // Composed filters are input independent; build them once.
    let composed: Option<Vec<f64>> = match (layer.coeffs(), layer.decomposition()) {
        (Coeffs::Dense(cm), Decomposition::WeightCompose { .. }) => {
            let mut wfull = vec![0.0; spec.c_out * flen];
            for j in 0..spec.c_out {
                for t in 0..flen {
                    let mut acc = 0.0;
                    for i in 0..r {
                        acc += cm.data()[j * r + i] * basis[i * flen + t];
                        count.composition += 1;
                    }
                    wfull[j * flen + t] = acc;
                }
            }
            Some(wfull)
        }
        _ => None,
    };

    let mut out = Vec::with_capacity(batch * spec.c_out * npix);
    let per = spec.c_in * spec.h_in * spec.w_in;
    for b in 0..batch {
        let (padded, hp, wp) = pad_input(&input.data()[b * per..(b + 1) * per], &spec);
        let mut y = match (&composed, layer.coeffs()) {
            (Some(wfull), _) => direct_conv(&padded, hp, wp, wfull, spec.c_out, &spec, &mut count.convolution),
            (None, Coeffs::None) => direct_conv(&padded, hp, wp, basis, spec.c_out, &spec, &mut count.convolution),
            (None, Coeffs::Dense(cm)) => {
                let yb = direct_conv(&padded, hp, wp, basis, r, &spec, &mut count.convolution);
                let mut mixed = vec![0.0; spec.c_out * npix];
                for j in 0..spec.c_out {
                    for p in 0..npix {
                        let mut acc = 0.0;
                        for i in 0..r {
                            acc += cm.data()[j * r + i] * yb[i * npix + p];
                            count.mixing += 1;
                        }
                        mixed[j * npix + p] = acc;
                    }
                }
                mixed
            }
            (None, Coeffs::Restricted { rules, pair_weights }) => {
                let yb = direct_conv(&padded, hp, wp, basis, r, &spec, &mut count.convolution);
                let pw = pair_weights.data();
                let mut mixed = vec![0.0; spec.c_out * npix];
                for (j, rule) in rules.iter().enumerate() {
                    for p in 0..npix {
                        mixed[j * npix + p] = match *rule {
                            OutputRule::Copy(i) => {
                                count.mixing += 1;
                                yb[i * npix + p]
                            }
                            OutputRule::Pair { first, second, slot } => {
                                count.mixing += 2;
                                pw[2 * slot] * yb[first * npix + p] + pw[2 * slot + 1] * yb[second * npix + p]
                            }
                        };
                    }
                }
                mixed
            }
        };
        for (j, chunk) in y.chunks_mut(npix).enumerate() {
            chunk.iter_mut().for_each(|v| *v += bias[j]);
        }
        out.extend(y);
    }
    Ok((Tensor::from_vec(&[batch, spec.c_out, spec.h_out, spec.w_out], out)?, count))
}

/// Data-flow graph in compressed adjacency form: `preds[start[n]..start[n+1]]`
/// are the nodes that node `n` reads.
struct Graph {
    start: Vec<usize>,
    preds: Vec<usize>,
}

impl Graph {
    fn new() -> Self {
        Self {
            start: vec![0],
            preds: Vec::new(),
        }
    }

    fn add_node(&mut self, reads: impl IntoIterator<Item = usize>) -> usize {
        self.preds.extend(reads);
        self.start.push(self.preds.len());
        self.start.len() - 2
    }

    fn reads(&self, n: usize) -> &[usize] {
        &self.preds[self.start[n]..self.start[n + 1]]
    }
}

/// Number of (output scalar, input scalar) dependency paths for a single
/// example, through the layer's actual coefficient structure. Padded
/// positions are input nodes too, so every kernel tap is one edge.
pub fn dependency_paths(layer: &BasisConvLayer) -> u64 {
    let spec = *layer.spec();
    let (hp, wp) = (spec.h_in + 2 * spec.padding, spec.w_in + 2 * spec.padding);
    let mut g = Graph::new();
    let n_inputs = spec.c_in * hp * wp;
    for _ in 0..n_inputs {
        g.add_node(std::iter::empty());
    }
    let window = |g: &mut Graph, oy: usize, ox: usize| -> usize {
        let mut reads = Vec::with_capacity(spec.filter_len());
        for c in 0..spec.c_in {
            for ky in 0..spec.k {
                for kx in 0..spec.k {
                    reads.push((c * hp + oy * spec.stride + ky) * wp + ox * spec.stride + kx);
                }
            }
        }
        g.add_node(reads)
    };
    let npix = spec.out_pixels();
    let mut outputs = Vec::with_capacity(spec.c_out * npix);
    // Composing weights touches no data, so a weight-compose layer has the
    // graph of a plain convolution.
    let direct = matches!(layer.decomposition(), Decomposition::Full | Decomposition::WeightCompose { .. });
    match layer.coeffs() {
        _ if direct => {
            for _ in 0..spec.c_out {
                for oy in 0..spec.h_out {
                    for ox in 0..spec.w_out {
                        outputs.push(window(&mut g, oy, ox));
                    }
                }
            }
        }
        coeffs => {
            let r = layer.basis_count();
            let mut basis_nodes = Vec::with_capacity(r * npix);
            for _ in 0..r {
                for oy in 0..spec.h_out {
                    for ox in 0..spec.w_out {
                        basis_nodes.push(window(&mut g, oy, ox));
                    }
                }
            }
            for j in 0..spec.c_out {
                for p in 0..npix {
                    let reads: Vec<usize> = match coeffs {
                        Coeffs::Dense(_) => (0..r).map(|i| basis_nodes[i * npix + p]).collect(),
                        Coeffs::Restricted { rules, .. } => match rules[j] {
                            OutputRule::Copy(i) => vec![basis_nodes[i * npix + p]],
                            OutputRule::Pair { first, second, .. } => {
                                vec![basis_nodes[first * npix + p], basis_nodes[second * npix + p]]
                            }
                        },
                        Coeffs::None => unreachable!("plain layers have no basis nodes"),
                    };
                    outputs.push(g.add_node(reads));
                }
            }
        }
    }
    // Nodes were added in topological order.
    let n_nodes = g.start.len() - 1;
    let mut paths = vec![0u64; n_nodes];
    for n in 0..n_nodes {
        let reads = g.reads(n);
        paths[n] = if reads.is_empty() {
            1
        } else {
            reads.iter().map(|&p| paths[p]).sum()
        };
    }
    outputs.iter().map(|&o| paths[o]).sum()
}
