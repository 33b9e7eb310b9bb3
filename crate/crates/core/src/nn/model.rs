//! Sequential models built from conv/batchnorm/relu stages and residual
//! blocks. Every convolution is a [`BasisConvLayer`]; a freshly built model
//! has them all in `Full` mode.
//!
//! Conv layers are addressed by 1-indexed ordinal in execution order. For
//! the ResNet18 skeleton the order inside a residual block is `conv1`,
//! `conv2`, then `downsample.0`.

use serde::{Deserialize, Serialize};

use crate::basisconv::{BasisConvLayer, BasisMode};
use crate::error::{Error, Result};
use crate::nn::conv::ConvSpec;
use crate::nn::layers::{BatchNorm2d, Dense, GlobalAvgPool, MaxPool2, Relu};
use crate::nn::{Mode, ParamVisitor};
use crate::rng::{derive_seed, SeededRng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ArchKind {
    TinyCnn,
    MicroResnet18 { width_divisor: usize },
}

/// Everything needed to rebuild a model's structure.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub kind: ArchKind,
    pub in_channels: usize,
    pub image_size: usize,
    pub num_classes: usize,
}

impl Arch {
    pub fn tiny_cnn(image_size: usize, num_classes: usize) -> Self {
        Self {
            kind: ArchKind::TinyCnn,
            in_channels: 3,
            image_size,
            num_classes,
        }
    }

    pub fn micro_resnet18(width_divisor: usize, image_size: usize, num_classes: usize) -> Self {
        Self {
            kind: ArchKind::MicroResnet18 { width_divisor },
            in_channels: 3,
            image_size,
            num_classes,
        }
    }

    pub fn build(&self, seed: u64) -> Result<Model> {
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(Error::config("model needs at least one input channel and one class"));
        }
        match self.kind {
            ArchKind::TinyCnn => build_tiny(*self, seed),
            ArchKind::MicroResnet18 { width_divisor } => build_resnet(*self, width_divisor, seed),
        }
    }
}

/// Four-conv test network on 16x16 inputs with 10 classes.
pub fn build_tiny_cnn(seed: u64) -> Result<Model> {
    Arch::tiny_cnn(16, 10).build(seed)
}

/// ResNet18 layout with every width divided by `width_divisor`, on 32x32
/// inputs with 10 classes.
pub fn build_micro_resnet18(width_divisor: usize, seed: u64) -> Result<Model> {
    Arch::micro_resnet18(width_divisor, 32, 10).build(seed)
}

#[derive(Clone, Debug)]
pub struct ConvSlot {
    pub name: String,
    pub layer: BasisConvLayer,
}

#[derive(Clone, Debug)]
struct BasicBlock {
    conv1: usize,
    bn1: (String, BatchNorm2d),
    relu1: Relu,
    conv2: usize,
    bn2: (String, BatchNorm2d),
    down: Option<(usize, String, BatchNorm2d)>,
    relu_out: Relu,
}

#[derive(Clone, Debug)]
enum Stage {
    Conv {
        conv: usize,
        bn: (String, BatchNorm2d),
        relu: Relu,
    },
    MaxPool(MaxPool2),
    Block(Box<BasicBlock>),
    GlobalPool(GlobalAvgPool),
    Fc {
        name: String,
        dense: Dense,
    },
}

#[derive(Clone, Debug)]
pub struct Model {
    arch: Arch,
    seed: u64,
    convs: Vec<ConvSlot>,
    stages: Vec<Stage>,
}

struct Builder {
    seed: u64,
    convs: Vec<ConvSlot>,
}

impl Builder {
    fn conv(&mut self, name: &str, spec: Result<ConvSpec>) -> Result<usize> {
        let layer = BasisConvLayer::new(spec?, BasisMode::Full, derive_seed(self.seed, &format!("init.{name}")))?;
        self.convs.push(ConvSlot {
            name: name.to_string(),
            layer,
        });
        Ok(self.convs.len() - 1)
    }

    fn out(&self, idx: usize) -> ConvSpec {
        *self.convs[idx].layer.spec()
    }

    fn fc(&self, inputs: usize, outputs: usize) -> Stage {
        let mut rng = SeededRng::derived(self.seed, "init.fc");
        Stage::Fc {
            name: "fc".into(),
            dense: Dense::new(inputs, outputs, &mut rng),
        }
    }
}

fn bn(name: String, channels: usize) -> (String, BatchNorm2d) {
    (name, BatchNorm2d::new(channels))
}

fn build_tiny(arch: Arch, seed: u64) -> Result<Model> {
    let s = arch.image_size;
    if s < 4 {
        return Err(Error::config(format!("tiny cnn needs images of at least 4x4, got {s}")));
    }
    let mut b = Builder { seed, convs: Vec::new() };
    let widths = [(arch.in_channels, 8), (8, 16), (16, 16), (16, 16)];
    let mut stages = Vec::new();
    let mut side = s;
    for (i, &(c_in, c_out)) in widths.iter().enumerate() {
        let conv = b.conv(&format!("conv{}", i + 1), ConvSpec::same(c_in, c_out, 3, side, side))?;
        stages.push(Stage::Conv {
            conv,
            bn: bn(format!("bn{}", i + 1), c_out),
            relu: Relu::default(),
        });
        if i < 2 {
            stages.push(Stage::MaxPool(MaxPool2::default()));
            side /= 2;
        }
    }
    stages.push(Stage::GlobalPool(GlobalAvgPool::default()));
    stages.push(b.fc(16, arch.num_classes));
    Ok(Model {
        arch,
        seed,
        convs: b.convs,
        stages,
    })
}

fn build_resnet(arch: Arch, divisor: usize, seed: u64) -> Result<Model> {
    if divisor == 0 || 64 % divisor != 0 {
        return Err(Error::config(format!(
            "width_divisor {divisor} must divide 64, 128, 256 and 512"
        )));
    }
    let s = arch.image_size;
    if s < 32 {
        return Err(Error::config(format!("micro resnet18 needs images of at least 32x32, got {s}")));
    }
    let widths = [64 / divisor, 128 / divisor, 256 / divisor, 512 / divisor];
    let mut b = Builder { seed, convs: Vec::new() };
    let mut stages = Vec::new();

    let stem = b.conv("conv1", ConvSpec::new(arch.in_channels, widths[0], 7, 2, 3, s, s))?;
    let side = b.out(stem).h_out;
    stages.push(Stage::Conv {
        conv: stem,
        bn: bn("bn1".into(), widths[0]),
        relu: Relu::default(),
    });
    stages.push(Stage::MaxPool(MaxPool2::default()));
    let mut side = side / 2;
    let mut c_in = widths[0];
    for (li, &width) in widths.iter().enumerate() {
        for bi in 0..2 {
            let p = format!("layer{}.{bi}", li + 1);
            let stride = if li > 0 && bi == 0 { 2 } else { 1 };
            let conv1 = b.conv(&format!("{p}.conv1"), ConvSpec::new(c_in, width, 3, stride, 1, side, side))?;
            let out_side = b.out(conv1).h_out;
            let conv2 = b.conv(&format!("{p}.conv2"), ConvSpec::same(width, width, 3, out_side, out_side))?;
            let down = if stride != 1 || c_in != width {
                let d = b.conv(&format!("{p}.downsample.0"), ConvSpec::new(c_in, width, 1, stride, 0, side, side))?;
                Some((d, format!("{p}.downsample.1"), BatchNorm2d::new(width)))
            } else {
                None
            };
            stages.push(Stage::Block(Box::new(BasicBlock {
                conv1,
                bn1: bn(format!("{p}.bn1"), width),
                relu1: Relu::default(),
                conv2,
                bn2: bn(format!("{p}.bn2"), width),
                down,
                relu_out: Relu::default(),
            })));
            side = out_side;
            c_in = width;
        }
    }
    stages.push(Stage::GlobalPool(GlobalAvgPool::default()));
    stages.push(b.fc(c_in, arch.num_classes));
    Ok(Model {
        arch,
        seed,
        convs: b.convs,
        stages,
    })
}

impl Model {
    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_convs(&self) -> usize {
        self.convs.len()
    }

    pub fn conv_names(&self) -> Vec<&str> {
        self.convs.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn conv_slots(&self) -> &[ConvSlot] {
        &self.convs
    }

    fn index(&self, ordinal: usize) -> Result<usize> {
        if ordinal == 0 || ordinal > self.convs.len() {
            return Err(Error::config(format!(
                "layer ordinal {ordinal} outside 1..={}",
                self.convs.len()
            )));
        }
        Ok(ordinal - 1)
    }

    /// Conv layer by 1-indexed ordinal.
    pub fn conv(&self, ordinal: usize) -> Result<&ConvSlot> {
        Ok(&self.convs[self.index(ordinal)?])
    }

    /// Replaces the conv at `ordinal`; the geometry must not change.
    pub fn set_conv(&mut self, ordinal: usize, layer: BasisConvLayer) -> Result<()> {
        let i = self.index(ordinal)?;
        if layer.spec() != self.convs[i].layer.spec() {
            return Err(Error::dim(format!(
                "replacement for {} has a different geometry",
                self.convs[i].name
            )));
        }
        self.convs[i].layer = layer;
        Ok(())
    }

    /// Puts fresh seeded basis layers at `ordinals`. Returns the names of
    /// the replaced layers; `Full` mode changes nothing. Nothing is
    /// modified if any ordinal or mode is invalid.
    pub fn apply_basis(&mut self, ordinals: &[usize], mode: BasisMode, seed: u64) -> Result<Vec<String>> {
        let mut fresh = Vec::with_capacity(ordinals.len());
        for &o in ordinals {
            let i = self.index(o)?;
            if mode == BasisMode::Full {
                continue;
            }
            let slot = &self.convs[i];
            let layer = BasisConvLayer::new(*slot.layer.spec(), mode, derive_seed(seed, &format!("basis.{}", slot.name)))
                .map_err(|e| Error::Config(format!("{}: {e}", slot.name)))?;
            fresh.push((i, layer));
        }
        Ok(fresh
            .into_iter()
            .map(|(i, layer)| {
                self.convs[i].layer = layer;
                self.convs[i].name.clone()
            })
            .collect())
    }

    /// Replaces every basis layer by its composed plain equivalent and
    /// returns the names of the rebuilt layers.
    pub fn compose_back(&mut self) -> Vec<String> {
        self.convs
            .iter_mut()
            .filter(|c| !c.layer.is_full())
            .map(|c| {
                c.layer = c.layer.to_full();
                c.name.clone()
            })
            .collect()
    }

    pub fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let convs = &mut self.convs;
        let mut h = x.clone();
        for stage in self.stages.iter_mut() {
            h = match stage {
                Stage::Conv { conv, bn, relu } => {
                    let y = convs[*conv].layer.forward(&h, mode)?;
                    relu.forward(bn.1.forward(&y, mode)?, mode)
                }
                Stage::MaxPool(p) => p.forward(&h, mode)?,
                Stage::Block(blk) => {
                    let y = convs[blk.conv1].layer.forward(&h, mode)?;
                    let y = blk.relu1.forward(blk.bn1.1.forward(&y, mode)?, mode);
                    let y = convs[blk.conv2].layer.forward(&y, mode)?;
                    let mut y = blk.bn2.1.forward(&y, mode)?;
                    match &mut blk.down {
                        Some((d, _, dbn)) => {
                            let s = convs[*d].layer.forward(&h, mode)?;
                            y.add_assign(&dbn.forward(&s, mode)?)?;
                        }
                        None => y.add_assign(&h)?,
                    }
                    blk.relu_out.forward(y, mode)
                }
                Stage::GlobalPool(p) => p.forward(&h, mode)?,
                Stage::Fc { dense, .. } => dense.forward(&h, mode)?,
            };
        }
        Ok(h)
    }

    /// Backpropagates `grad_logits` through the last training-mode forward,
    /// accumulating into parameter gradients.
    pub fn backward(&mut self, grad_logits: &Tensor) -> Result<()> {
        let convs = &mut self.convs;
        let mut g = grad_logits.clone();
        let n = self.stages.len();
        for (pos, stage) in self.stages.iter_mut().rev().enumerate() {
            let first = pos + 1 == n;
            g = match stage {
                Stage::Conv { conv, bn, relu } => {
                    let gy = bn.1.backward(&relu.backward(g)?)?;
                    match convs[*conv].layer.backward(&gy, !first)? {
                        Some(gx) => gx,
                        None => break,
                    }
                }
                Stage::MaxPool(p) => p.backward(&g)?,
                Stage::Block(blk) => {
                    let g = blk.relu_out.backward(g)?;
                    let mut gx = match &mut blk.down {
                        Some((d, _, dbn)) => {
                            let gs = dbn.backward(&g)?;
                            convs[*d].layer.backward(&gs, true)?.expect("input grad requested")
                        }
                        None => g.clone(),
                    };
                    let gy = blk.bn2.1.backward(&g)?;
                    let gy = convs[blk.conv2].layer.backward(&gy, true)?.expect("input grad requested");
                    let gy = blk.bn1.1.backward(&blk.relu1.backward(gy)?)?;
                    let gm = convs[blk.conv1].layer.backward(&gy, true)?.expect("input grad requested");
                    gx.add_assign(&gm)?;
                    gx
                }
                Stage::GlobalPool(p) => p.backward(&g)?,
                Stage::Fc { dense, .. } => dense.backward(&g)?,
            };
        }
        Ok(())
    }

    /// Visits every trainable tensor in execution order.
    pub fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        let convs = &mut self.convs;
        for stage in self.stages.iter_mut() {
            match stage {
                Stage::Conv { conv, bn, .. } => {
                    let slot = &mut convs[*conv];
                    slot.layer.visit(&slot.name, f);
                    bn.1.visit(&bn.0, f);
                }
                Stage::Block(blk) => {
                    let slot = &mut convs[blk.conv1];
                    slot.layer.visit(&slot.name, f);
                    blk.bn1.1.visit(&blk.bn1.0, f);
                    let slot = &mut convs[blk.conv2];
                    slot.layer.visit(&slot.name, f);
                    blk.bn2.1.visit(&blk.bn2.0, f);
                    if let Some((d, name, dbn)) = &mut blk.down {
                        let slot = &mut convs[*d];
                        slot.layer.visit(&slot.name, f);
                        dbn.visit(name, f);
                    }
                }
                Stage::Fc { name, dense } => dense.visit(name, f),
                Stage::MaxPool(_) | Stage::GlobalPool(_) => {}
            }
        }
    }

    /// Visits batchnorm running statistics.
    pub fn visit_buffers(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for stage in self.stages.iter_mut() {
            match stage {
                Stage::Conv { bn, .. } => bn.1.visit_buffers(&bn.0, f),
                Stage::Block(blk) => {
                    blk.bn1.1.visit_buffers(&blk.bn1.0, f);
                    blk.bn2.1.visit_buffers(&blk.bn2.0, f);
                    if let Some((_, name, dbn)) = &mut blk.down {
                        dbn.visit_buffers(name, f);
                    }
                }
                _ => {}
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.visit_params(&mut |_, _, g| g.fill(0.0));
    }

    pub fn trainable_params(&self) -> usize {
        let mut n = 0;
        self.clone().visit_params(&mut |_, p, _| n += p.len());
        n
    }

    /// `(name, parameter)` copies in visiting order.
    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.clone().visit_params(&mut |name, p, _| out.push((name.to_string(), p.clone())));
        out
    }

    pub fn named_buffers(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.clone().visit_buffers(&mut |name, b| out.push((name.to_string(), b.clone())));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const RESNET18_CONVS: [&str; 20] = [
        "conv1",
        "layer1.0.conv1",
        "layer1.0.conv2",
        "layer1.1.conv1",
        "layer1.1.conv2",
        "layer2.0.conv1",
        "layer2.0.conv2",
        "layer2.0.downsample.0",
        "layer2.1.conv1",
        "layer2.1.conv2",
        "layer3.0.conv1",
        "layer3.0.conv2",
        "layer3.0.downsample.0",
        "layer3.1.conv1",
        "layer3.1.conv2",
        "layer4.0.conv1",
        "layer4.0.conv2",
        "layer4.0.downsample.0",
        "layer4.1.conv1",
        "layer4.1.conv2",
    ];

    #[test]
    fn micro_resnet_names_match_reference_list() {
        let m = build_micro_resnet18(8, 0).unwrap();
        assert_eq!(m.conv_names(), RESNET18_CONVS.to_vec());
        assert_eq!(m.conv(16).unwrap().name, "layer4.0.conv1");
    }

    #[test]
    fn bad_divisor_is_config_error() {
        assert!(matches!(build_micro_resnet18(3, 0), Err(Error::Config(_))));
        assert!(matches!(build_micro_resnet18(0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn tiny_cnn_shape() {
        let mut m = build_tiny_cnn(1).unwrap();
        assert_eq!(m.num_convs(), 4);
        let y = m.forward(&Tensor::randn(&[2, 3, 16, 16], 0), Mode::Eval).unwrap();
        assert_eq!(y.shape(), &[2, 10]);
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_micro_resnet18(8, 5).unwrap().named_params();
        let b = build_micro_resnet18(8, 5).unwrap().named_params();
        assert_eq!(a, b);
        let c = build_micro_resnet18(8, 6).unwrap().named_params();
        assert_ne!(a, c);
    }

    #[test]
    fn resnet_forward_backward_runs() {
        let mut m = build_micro_resnet18(16, 2).unwrap();
        let x = Tensor::randn(&[2, 3, 32, 32], 1);
        let y = m.forward(&x, Mode::Train).unwrap();
        assert_eq!(y.shape(), &[2, 10]);
        m.backward(&Tensor::full(&[2, 10], 0.1)).unwrap();
    }

    #[test]
    fn apply_basis_is_all_or_nothing() {
        let mut m = build_tiny_cnn(0).unwrap();
        let before = m.named_params();
        assert!(m.apply_basis(&[1, 9], BasisMode::OutputCompose { r: 2 }, 0).is_err());
        assert_eq!(m.named_params(), before);
        assert!(m.apply_basis(&[2], BasisMode::Full, 0).unwrap().is_empty());
        let names = m.apply_basis(&[2, 3], BasisMode::OutputCompose { r: 2 }, 0).unwrap();
        assert_eq!(names, vec!["conv2", "conv3"]);
        assert!(m.trainable_params() < build_tiny_cnn(0).unwrap().trainable_params());
        assert_eq!(m.compose_back(), names);
    }
}
