//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CVBASIS\0" | version u32
//! arch: kind u8 | width_divisor u32 | in_channels u32 | image_size u32 | num_classes u32 | seed u64
//! conv manifest: count u32, then per conv
//!     name | mode u8 | r u32 | alpha f64 | beta f64 | layer seed u64
//!     restricted only: rule count u32, then per rule tag u8 | a u32 | b u32 | slot u32
//! tensors: count u32, then per tensor name | ndim u32 | dims u32.. | data f64..
//! ```
//!
//! Strings are a u32 byte length followed by UTF-8. Tensors cover every
//! trainable parameter and batchnorm buffer of the model.

use std::collections::BTreeMap;
use std::path::Path;

use crate::basisconv::{BasisConvLayer, BasisMode, Coeffs, OutputRule};
use crate::error::{Error, Result};
use crate::nn::model::{Arch, ArchKind, Model};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CVBASIS\0";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(u32::try_from(v).expect("checkpoint field fits u32")).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, t: &Tensor) {
        self.str(name);
        self.u32(t.ndim());
        for &d in t.shape() {
            self.u32(d);
        }
        for &v in t.data() {
            self.f64(v);
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated: {what} needs {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }
    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let at = self.pos;
        let n = self.u32(what)?;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::format(at as u64, format!("{what} is not UTF-8")))
    }
    fn bad(&self, at: usize, msg: impl Into<String>) -> Error {
        Error::format(at as u64, msg)
    }
}

struct ConvEntry {
    offset: usize,
    name: String,
    mode: BasisMode,
    seed: u64,
    rules: Vec<OutputRule>,
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    let arch = model.arch();
    match arch.kind {
        ArchKind::TinyCnn => {
            w.u8(0);
            w.u32(0);
        }
        ArchKind::MicroResnet18 { width_divisor } => {
            w.u8(1);
            w.u32(width_divisor);
        }
    }
    w.u32(arch.in_channels);
    w.u32(arch.image_size);
    w.u32(arch.num_classes);
    w.u64(model.seed());

    let slots = model.conv_slots();
    w.u32(slots.len());
    for slot in slots {
        let l = &slot.layer;
        w.str(&slot.name);
        let (tag, r, alpha, beta) = match l.mode() {
            BasisMode::Full => (0, 0, 0.0, 0.0),
            BasisMode::WeightCompose { r } => (1, r, 0.0, 0.0),
            BasisMode::OutputCompose { r } => (2, r, 0.0, 0.0),
            BasisMode::RestrictedCompose { alpha, beta } => (3, 0, alpha, beta),
        };
        w.u8(tag);
        w.u32(r);
        w.f64(alpha);
        w.f64(beta);
        w.u64(l.seed());
        if let Coeffs::Restricted { rules, .. } = l.coeffs() {
            w.u32(rules.len());
            for rule in rules {
                match *rule {
                    OutputRule::Copy(i) => {
                        w.u8(0);
                        w.u32(i);
                        w.u32(0);
                        w.u32(0);
                    }
                    OutputRule::Pair { first, second, slot } => {
                        w.u8(1);
                        w.u32(first);
                        w.u32(second);
                        w.u32(slot);
                    }
                }
            }
        }
    }

    let params = model.named_params();
    let buffers = model.named_buffers();
    w.u32(params.len() + buffers.len());
    for (name, t) in params.iter().chain(&buffers) {
        w.tensor(name, t);
    }
    w.0
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(r.bad(0, "not a checkpoint (bad magic)"));
    }
    let version = r.u32("version")?;
    if version != VERSION as usize {
        return Err(r.bad(8, format!("unsupported checkpoint version {version}")));
    }
    let kind_at = r.pos;
    let kind = r.u8("arch kind")?;
    let divisor = r.u32("width divisor")?;
    let kind = match kind {
        0 => ArchKind::TinyCnn,
        1 => ArchKind::MicroResnet18 { width_divisor: divisor },
        k => return Err(r.bad(kind_at, format!("unknown architecture tag {k}"))),
    };
    let arch = Arch {
        kind,
        in_channels: r.u32("in channels")?,
        image_size: r.u32("image size")?,
        num_classes: r.u32("classes")?,
    };
    let seed = r.u64("model seed")?;

    let n_convs = r.u32("conv count")?;
    let mut convs = Vec::with_capacity(n_convs.min(1024));
    for _ in 0..n_convs {
        let offset = r.pos;
        let name = r.str("conv name")?;
        let tag_at = r.pos;
        let tag = r.u8("mode")?;
        let rr = r.u32("basis count")?;
        let alpha = r.f64("alpha")?;
        let beta = r.f64("beta")?;
        let seed = r.u64("layer seed")?;
        let mode = match tag {
            0 => BasisMode::Full,
            1 => BasisMode::WeightCompose { r: rr },
            2 => BasisMode::OutputCompose { r: rr },
            3 => BasisMode::RestrictedCompose { alpha, beta },
            t => return Err(r.bad(tag_at, format!("unknown mode tag {t}"))),
        };
        let mut rules = Vec::new();
        if tag == 3 {
            let n = r.u32("rule count")?;
            for _ in 0..n.min(bytes.len()) {
                let at = r.pos;
                let t = r.u8("rule tag")?;
                let (a, b, s) = (r.u32("rule")?, r.u32("rule")?, r.u32("rule")?);
                rules.push(match t {
                    0 => OutputRule::Copy(a),
                    1 => OutputRule::Pair { first: a, second: b, slot: s },
                    t => return Err(r.bad(at, format!("unknown rule tag {t}"))),
                });
            }
        }
        convs.push(ConvEntry {
            offset,
            name,
            mode,
            seed,
            rules,
        });
    }

    let n_tensors = r.u32("tensor count")?;
    let mut tensors: BTreeMap<String, (usize, Tensor)> = BTreeMap::new();
    for _ in 0..n_tensors {
        let at = r.pos;
        let name = r.str("tensor name")?;
        let ndim = r.u32("tensor rank")?;
        if ndim > 8 {
            return Err(r.bad(at, format!("tensor {name}: rank {ndim} too large")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("tensor dim")?);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(8).ok_or_else(|| r.bad(at, "tensor too large"))?, "tensor data")?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor::from_vec(&shape, data).map_err(|e| r.bad(at, e.to_string()))?;
        if tensors.insert(name.clone(), (at, t)).is_some() {
            return Err(r.bad(at, format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(r.bad(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let end = bytes.len();
    let mut model = arch.build(seed).map_err(|e| Error::format(kind_at as u64, e.to_string()))?;
    if convs.len() != model.num_convs() {
        return Err(Error::format(
            kind_at as u64,
            format!("{} conv entries for an architecture with {}", convs.len(), model.num_convs()),
        ));
    }
    let take = |name: &str, offset: usize| -> Result<Tensor> {
        tensors
            .get(name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::format(offset as u64, format!("missing tensor {name}")))
    };
    for (i, entry) in convs.iter().enumerate() {
        let slot = model.conv(i + 1)?;
        if slot.name != entry.name {
            return Err(Error::format(
                entry.offset as u64,
                format!("conv {} is {:?}, expected {:?}", i + 1, entry.name, slot.name),
            ));
        }
        let spec = *slot.layer.spec();
        let p = &entry.name;
        let wrap = |e: Error| Error::format(entry.offset as u64, format!("{p}: {e}"));
        let layer = match entry.mode {
            BasisMode::Full => BasisConvLayer::plain(spec, take(&format!("{p}.weight"), entry.offset)?, take(&format!("{p}.bias"), entry.offset)?),
            BasisMode::WeightCompose { .. } | BasisMode::OutputCompose { .. } => BasisConvLayer::with_dense(
                spec,
                entry.mode,
                take(&format!("{p}.basis_weight"), entry.offset)?,
                take(&format!("{p}.coeffs"), entry.offset)?,
                take(&format!("{p}.bias"), entry.offset)?,
            ),
            BasisMode::RestrictedCompose { alpha, beta } => {
                let pairs = entry.rules.iter().filter(|r| matches!(r, OutputRule::Pair { .. })).count();
                let pw = if pairs == 0 {
                    Tensor::zeros(&[0, 2])
                } else {
                    take(&format!("{p}.pair_weights"), entry.offset)?
                };
                BasisConvLayer::with_restricted(
                    spec,
                    alpha,
                    beta,
                    entry.seed,
                    take(&format!("{p}.basis_weight"), entry.offset)?,
                    entry.rules.clone(),
                    pw,
                    take(&format!("{p}.bias"), entry.offset)?,
                )
            }
        }
        .map_err(wrap)?;
        model.set_conv(i + 1, layer.with_seed(entry.seed)).map_err(wrap)?;
    }

    // Every model tensor must be present with the right shape, and every
    // stored tensor must be used.
    let mut used = 0usize;
    let mut failure: Option<Error> = None;
    let mut assign = |name: &str, dst: &mut Tensor| {
        if failure.is_some() {
            return;
        }
        match tensors.get(name) {
            Some((_, t)) if t.shape() == dst.shape() => {
                dst.data_mut().copy_from_slice(t.data());
                used += 1;
            }
            Some((at, t)) => {
                failure = Some(Error::format(
                    *at as u64,
                    format!("tensor {name} has shape {:?}, model expects {:?}", t.shape(), dst.shape()),
                ))
            }
            None => failure = Some(Error::format(end as u64, format!("missing tensor {name}"))),
        }
    };
    model.visit_params(&mut |name, p, _| assign(name, p));
    model.visit_buffers(&mut |name, b| assign(name, b));
    if let Some(e) = failure {
        return Err(e);
    }
    if used != tensors.len() {
        return Err(Error::format(end as u64, format!("{} unused tensors", tensors.len() - used)));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    decode_checkpoint(&std::fs::read(path)?)
}
