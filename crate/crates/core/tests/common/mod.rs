//! Central finite-difference gradient checking.
#![allow(dead_code)]

pub mod grad_suite;

use convbasis::rng::SeededRng;
use convbasis::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-5;

/// Norms below this count as this, so gradients that vanish analytically
/// (a conv bias feeding batchnorm) are compared against difference noise.
pub const SCALE_FLOOR: f64 = 1e-6;

/// `||a - n|| / max(||a||, ||n||, SCALE_FLOOR)`.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    rel_error_floor(analytic, numeric, SCALE_FLOOR)
}

pub fn rel_error_floor(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    diff / norm(analytic).max(norm(numeric)).max(floor)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Central differences of `f` at `x`, for the coordinates in `coords`
/// (all when `None`).
pub fn numeric_grad(x: &[f64], coords: Option<&[usize]>, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let all: Vec<usize> = (0..x.len()).collect();
    let coords = coords.unwrap_or(&all);
    let mut xp = x.to_vec();
    coords
        .iter()
        .map(|&j| {
            xp[j] = x[j] + STEP;
            let up = f(&xp);
            xp[j] = x[j] - STEP;
            let down = f(&xp);
            xp[j] = x[j];
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// Random coordinates to probe, or all when the tensor is small.
pub fn sample_coords(len: usize, max: usize, rng: &mut SeededRng) -> Option<Vec<usize>> {
    if len <= max {
        None
    } else {
        Some((0..max).map(|_| rng.below(len)).collect())
    }
}

pub fn pick(v: &[f64], coords: Option<&[usize]>) -> Vec<f64> {
    match coords {
        Some(c) => c.iter().map(|&j| v[j]).collect(),
        None => v.to_vec(),
    }
}

/// A layer under test: forward in training mode, backward from an output
/// gradient (returning the input gradient), and parameter access.
pub trait Probe {
    fn forward(&mut self, x: &Tensor) -> Tensor;
    fn backward(&mut self, grad: &Tensor) -> Tensor;
    fn params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, &mut Tensor));
}

/// Checks the input gradient and every parameter gradient of `layer` on
/// the scalar loss `sum(w * layer(x))` for a random `w`. Returns the
/// worst relative error with the tensor it came from.
pub fn check_probe(layer: &mut dyn Probe, x: &Tensor, seed: u64) -> (f64, String) {
    let mut rng = SeededRng::new(seed);
    layer.params(&mut |_, _, g| g.fill(0.0));
    let y = layer.forward(x);
    let w = Tensor::randn(y.shape(), seed ^ 0x5eed);
    let gin = layer.backward(&w);
    let mut worst = (0.0, String::new());
    let mut note = |err: f64, name: &str| {
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, name.to_string());
        }
    };
    let loss = |layer: &mut dyn Probe, x: &Tensor| layer.forward(x).dot(&w).expect("same shape");

    let coords = sample_coords(x.len(), 64, &mut rng);
    let shape = x.shape().to_vec();
    let num = numeric_grad(x.data(), coords.as_deref(), |xp| {
        loss(layer, &Tensor::from_vec(&shape, xp.to_vec()).unwrap())
    });
    note(rel_error(&pick(gin.data(), coords.as_deref()), &num), "input");

    let mut grads = Vec::new();
    layer.params(&mut |name, p, g| grads.push((name.to_string(), p.clone(), g.clone())));
    for (name, p0, g) in grads {
        let coords = sample_coords(p0.len(), 64, &mut rng);
        let num = numeric_grad(p0.data(), coords.as_deref(), |pp| {
            layer.params(&mut |n, p, _| {
                if n == name {
                    p.data_mut().copy_from_slice(pp);
                }
            });
            loss(layer, x)
        });
        layer.params(&mut |n, p, _| {
            if n == name {
                *p = p0.clone();
            }
        });
        note(rel_error(&pick(g.data(), coords.as_deref()), &num), &name);
    }
    worst
}
