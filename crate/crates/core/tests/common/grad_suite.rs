//! One finite-difference case per operation and basis mode. Each case
//! checks instance `i` and returns the worst relative error with the
//! tensor it came from.

use super::{check_probe, norm, numeric_grad, pick, rel_error, rel_error_floor, sample_coords, Probe, SCALE_FLOOR};
use convbasis::basisconv::{BasisConvLayer, BasisMode};
use convbasis::nn::conv::{conv2d_backward, conv2d_forward, ConvSpec};
use convbasis::nn::layers::{BatchNorm2d, Dense, GlobalAvgPool, MaxPool2, Relu};
use convbasis::nn::loss::cross_entropy;
use convbasis::nn::model::Arch;
use convbasis::nn::Mode;
use convbasis::rng::SeededRng;
use convbasis::Tensor;

pub type Case = fn(u64) -> (f64, String);

pub const CASES: &[(&str, Case)] = &[
    ("conv2d", conv2d),
    ("full", full_mode),
    ("weight_compose", weight_compose),
    ("output_compose", output_compose),
    ("restricted", restricted_compose),
    ("relu", relu),
    ("maxpool", maxpool),
    ("avgpool", global_avgpool),
    ("dense", dense),
    ("batchnorm", batchnorm),
    ("cross_entropy", cross_entropy_case),
    ("model", model),
];

fn random_spec(rng: &mut SeededRng, min_out: usize) -> ConvSpec {
    let k = [1, 3, 5][rng.below(3)];
    let stride = 1 + rng.below(2);
    let padding = rng.below(k / 2 + 1);
    let h = k + rng.below(5);
    let w = k + rng.below(5);
    ConvSpec::new(1 + rng.below(3), min_out + rng.below(5), k, stride, padding, h, w).unwrap()
}

struct Conv {
    spec: ConvSpec,
    w: Tensor,
    b: Tensor,
    gw: Tensor,
    gb: Tensor,
    x: Option<Tensor>,
}

impl Probe for Conv {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.x = Some(x.clone());
        conv2d_forward(x, &self.w, Some(&self.b), &self.spec).unwrap()
    }
    fn backward(&mut self, g: &Tensor) -> Tensor {
        let (gi, gw, gb) = conv2d_backward(g, self.x.as_ref().unwrap(), &self.w, &self.spec).unwrap();
        self.gw.add_assign(&gw).unwrap();
        self.gb.add_assign(&gb).unwrap();
        gi
    }
    fn params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, &mut Tensor)) {
        f("weight", &mut self.w, &mut self.gw);
        f("bias", &mut self.b, &mut self.gb);
    }
}

pub fn conv2d(i: u64) -> (f64, String) {
    let mut rng = SeededRng::new(100 + i);
    let spec = random_spec(&mut rng, 1);
    let mut p = Conv {
        spec,
        w: Tensor::randn(&spec.weight_shape(), i),
        b: Tensor::randn(&[spec.c_out], i + 50),
        gw: Tensor::zeros(&spec.weight_shape()),
        gb: Tensor::zeros(&[spec.c_out]),
        x: None,
    };
    let x = Tensor::randn(&[2, spec.c_in, spec.h_in, spec.w_in], i + 7);
    check_probe(&mut p, &x, i)
}

struct Basis(BasisConvLayer);

impl Probe for Basis {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.0.forward(x, Mode::Train).unwrap()
    }
    fn backward(&mut self, g: &Tensor) -> Tensor {
        self.0.backward(g, true).unwrap().unwrap()
    }
    fn params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, &mut Tensor)) {
        self.0.visit("conv", f);
    }
}

fn check_mode(i: u64, mode_for: impl Fn(&ConvSpec, &mut SeededRng) -> BasisMode, min_out: usize) -> (f64, String) {
    let mut rng = SeededRng::new(200 + i);
    let spec = random_spec(&mut rng, min_out);
    let mode = mode_for(&spec, &mut rng);
    let mut layer = BasisConvLayer::new(spec, mode, i).unwrap();
    // Non-zero bias so its gradient path is exercised away from zero.
    *layer.bias_mut() = Tensor::randn(&[spec.c_out], i + 3);
    let x = Tensor::randn(&[2, spec.c_in, spec.h_in, spec.w_in], i + 11);
    check_probe(&mut Basis(layer), &x, i)
}

pub fn full_mode(i: u64) -> (f64, String) {
    check_mode(i, |_, _| BasisMode::Full, 1)
}

pub fn weight_compose(i: u64) -> (f64, String) {
    check_mode(i, |s, rng| BasisMode::WeightCompose { r: 1 + rng.below(s.c_out) }, 1)
}

pub fn output_compose(i: u64) -> (f64, String) {
    check_mode(i, |s, rng| BasisMode::OutputCompose { r: 1 + rng.below(s.c_out) }, 1)
}

pub fn restricted_compose(i: u64) -> (f64, String) {
    // c_out >= 4 with these ranges always resolves with pairs.
    check_mode(
        i,
        |_, rng| BasisMode::RestrictedCompose {
            alpha: 0.4 + 0.1 * rng.uniform(),
            beta: 0.2 + 0.1 * rng.uniform(),
        },
        4,
    )
}

struct NoParams<F, B>(F, B);

impl<F: FnMut(&Tensor) -> Tensor, B: FnMut(&Tensor) -> Tensor> Probe for NoParams<F, B> {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        (self.0)(x)
    }
    fn backward(&mut self, g: &Tensor) -> Tensor {
        (self.1)(g)
    }
    fn params(&mut self, _: &mut dyn FnMut(&str, &mut Tensor, &mut Tensor)) {}
}

pub fn relu(i: u64) -> (f64, String) {
    let relu = std::cell::RefCell::new(Relu::default());
    let mut p = NoParams(
        |x: &Tensor| relu.borrow_mut().forward(x.clone(), Mode::Train),
        |g: &Tensor| relu.borrow_mut().backward(g.clone()).unwrap(),
    );
    let x = Tensor::randn(&[2, 3, 4, 5], i);
    check_probe(&mut p, &x, i)
}

pub fn maxpool(i: u64) -> (f64, String) {
    let pool = std::cell::RefCell::new(MaxPool2::default());
    let mut p = NoParams(
        |x: &Tensor| pool.borrow_mut().forward(x, Mode::Train).unwrap(),
        |g: &Tensor| pool.borrow_mut().backward(g).unwrap(),
    );
    let side = 4 + i as usize % 3;
    let x = Tensor::randn(&[2, 2, side, side + 1], i);
    check_probe(&mut p, &x, i)
}

pub fn global_avgpool(i: u64) -> (f64, String) {
    let pool = std::cell::RefCell::new(GlobalAvgPool::default());
    let mut p = NoParams(
        |x: &Tensor| pool.borrow_mut().forward(x, Mode::Train).unwrap(),
        |g: &Tensor| pool.borrow_mut().backward(g).unwrap(),
    );
    let x = Tensor::randn(&[3, 4, 3, 2 + i as usize % 3], i);
    check_probe(&mut p, &x, i)
}

struct DenseProbe(Dense);

impl Probe for DenseProbe {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.0.forward(x, Mode::Train).unwrap()
    }
    fn backward(&mut self, g: &Tensor) -> Tensor {
        self.0.backward(g).unwrap()
    }
    fn params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, &mut Tensor)) {
        self.0.visit("fc", f);
    }
}

pub fn dense(i: u64) -> (f64, String) {
    let mut rng = SeededRng::new(300 + i);
    let (inp, out) = (1 + rng.below(6), 1 + rng.below(6));
    let mut p = DenseProbe(Dense::new(inp, out, &mut rng));
    let x = Tensor::randn(&[3, inp], i);
    check_probe(&mut p, &x, i)
}

struct BnProbe(BatchNorm2d);

impl Probe for BnProbe {
    fn forward(&mut self, x: &Tensor) -> Tensor {
        self.0.forward(x, Mode::Train).unwrap()
    }
    fn backward(&mut self, g: &Tensor) -> Tensor {
        self.0.backward(g).unwrap()
    }
    fn params(&mut self, f: &mut dyn FnMut(&str, &mut Tensor, &mut Tensor)) {
        self.0.visit("bn", f);
    }
}

pub fn batchnorm(i: u64) -> (f64, String) {
    let c = 1 + i as usize % 4;
    let mut bn = BatchNorm2d::new(c);
    bn.gamma = Tensor::randn(&[c], i + 1);
    bn.beta = Tensor::randn(&[c], i + 2);
    let x = Tensor::randn(&[3, c, 3, 2], i);
    check_probe(&mut BnProbe(bn), &x, i)
}

pub fn cross_entropy_case(i: u64) -> (f64, String) {
    let mut rng = SeededRng::new(400 + i);
    let (b, classes) = (1 + rng.below(5), 2 + rng.below(8));
    let labels: Vec<usize> = (0..b).map(|_| rng.below(classes)).collect();
    let logits = Tensor::randn(&[b, classes], i);
    let (_, g) = cross_entropy(&logits, &labels).unwrap();
    let num = numeric_grad(logits.data(), None, |z| {
        cross_entropy(&Tensor::from_vec(&[b, classes], z.to_vec()).unwrap(), &labels).unwrap().0
    });
    (rel_error(g.data(), &num), "logits".to_string())
}

/// End-to-end: the model's parameter gradients of the mean cross-entropy,
/// with the basis modes active in some layers. Conv biases feeding
/// batchnorm have an exactly zero gradient, so each tensor's error is
/// scaled by at least 1e-3 of the whole-model gradient norm.
pub fn model(i: u64) -> (f64, String) {
    let modes = [
        BasisMode::Full,
        BasisMode::WeightCompose { r: 3 },
        BasisMode::OutputCompose { r: 2 },
        BasisMode::RestrictedCompose { alpha: 0.25, beta: 0.25 },
    ];
    let mut model = Arch::tiny_cnn(4, 3).build(i).unwrap();
    let mode = modes[i as usize % modes.len()];
    model.apply_basis(&[2, 3], mode, i).unwrap();
    let x = Tensor::randn(&[4, 3, 4, 4], i + 1);
    let labels = vec![0, 1, 2, (i % 3) as usize];
    model.zero_grad();
    let logits = model.forward(&x, Mode::Train).unwrap();
    let (_, g) = cross_entropy(&logits, &labels).unwrap();
    model.backward(&g).unwrap();
    let params = model.named_params();
    let mut grads = Vec::new();
    model.visit_params(&mut |n, _, g| grads.push((n.to_string(), g.clone())));
    let total = norm(&grads.iter().flat_map(|(_, g)| g.data().to_vec()).collect::<Vec<_>>());
    let floor = SCALE_FLOOR.max(1e-3 * total);
    let mut rng = SeededRng::new(i);
    let mut worst = (0.0f64, String::new());
    for ((name, p0), (_, g)) in params.iter().zip(&grads) {
        let coords = sample_coords(p0.len(), 8, &mut rng);
        let num = numeric_grad(p0.data(), coords.as_deref(), |pp| {
            model.visit_params(&mut |n, p, _| {
                if n == name {
                    p.data_mut().copy_from_slice(pp);
                }
            });
            let y = model.forward(&x, Mode::Train).unwrap();
            cross_entropy(&y, &labels).unwrap().0
        });
        model.visit_params(&mut |n, p, _| {
            if n == name {
                *p = p0.clone();
            }
        });
        let err = rel_error_floor(&pick(g.data(), coords.as_deref()), &num, floor);
        if err > worst.0 || worst.1.is_empty() {
            worst = (err, name.clone());
        }
    }
    worst
}
