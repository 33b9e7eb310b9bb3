//! Experiment runners: baseline training, skip training, the extraction
//! sanity check, the light/heavy comparison and selected-combination
//! runs.
//!
//! Every run derives its randomness from `TrainConfig::seed` through
//! [`derive_seed`]: `model` (initial weights), `basis` (basis layers),
//! `shuffle.{epoch}` (data order) and `augment.{epoch}.{step}`. Keying by
//! epoch lets a resumed run draw exactly what an uninterrupted one would.

pub mod checkpoint;
pub mod metrics;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::basisconv::{extract_basis_qr, extract_basis_svd, round_half_up, BasisConvLayer, BasisMode};
use crate::costmodel::{count_backward, count_forward, params_decomposed};
use crate::data::{augment, eval_transform, AugmentPolicy, Dataset};
use crate::error::{Error, Result};
use crate::nn::loss::{argmax_rows, cross_entropy};
use crate::nn::model::{Arch, Model};
use crate::nn::optim::{cosine_lr, Sgd, TrainConfig};
use crate::nn::Mode;
use crate::rng::{derive_seed, SeededRng};
use crate::sensitivity::group_subsets;
use crate::tensor::Tensor;

pub use metrics::{EpochRow, MetricsLog, TransitionCheck, METRICS_HEADER};

#[derive(Clone, Debug)]
pub struct Data {
    pub train: Dataset,
    pub valid: Dataset,
}

/// Source of `epoch_seconds`.
///
/// `Modeled` charges every training example the closed-form forward plus
/// backward count of each conv layer in its current mode, divided by
/// `ops_per_second`. It is exactly reproducible, which keeps logs
/// byte-identical across runs and machines. `Wall` measures real time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "clock", rename_all = "snake_case", deny_unknown_fields)]
pub enum Clock {
    Modeled { ops_per_second: f64 },
    Wall,
}

impl Default for Clock {
    fn default() -> Self {
        Clock::Modeled { ops_per_second: 1e9 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunOptions {
    #[serde(default)]
    pub augment: AugmentPolicy,
    #[serde(default)]
    pub clock: Clock,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

fn default_eval_batch() -> usize {
    256
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            augment: AugmentPolicy::None,
            clock: Clock::default(),
            eval_batch: default_eval_batch(),
        }
    }
}

/// Length of the basis phase: a fraction of all epochs (floored) or an
/// absolute epoch count.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Skip {
    Epochs(usize),
    Fraction(f64),
}

impl Skip {
    pub fn resolve(&self, epochs: usize) -> Result<usize> {
        match *self {
            Skip::Epochs(0) => Ok(0),
            Skip::Epochs(n) if n < epochs => Ok(n),
            Skip::Epochs(n) => Err(Error::config(format!("skip of {n} epochs must be below the {epochs} total"))),
            Skip::Fraction(f) if (0.0..1.0).contains(&f) => Ok((f * epochs as f64).floor() as usize),
            Skip::Fraction(f) => Err(Error::config(format!("skip fraction {f} outside [0, 1)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipConfig {
    pub skip: Skip,
    pub basis_layers: Vec<usize>,
    pub mode: BasisMode,
}

pub fn model_seed(cfg: &TrainConfig) -> u64 {
    derive_seed(cfg.seed, "model")
}

pub fn basis_seed(cfg: &TrainConfig) -> u64 {
    derive_seed(cfg.seed, "basis")
}

/// Closed-form conv operations per training example (forward + backward).
pub fn modeled_ops_per_example(model: &Model) -> u64 {
    model
        .conv_slots()
        .iter()
        .map(|s| {
            let d = s.layer.decomposition();
            count_forward(s.layer.spec(), d) + count_backward(s.layer.spec(), d)
        })
        .sum()
}

/// Validation accuracy and the full logit matrix, in evaluation mode.
pub fn evaluate(model: &mut Model, ds: &Dataset, opts: &RunOptions) -> Result<(f64, Tensor)> {
    if ds.is_empty() {
        return Err(Error::input("empty validation set"));
    }
    let step = opts.eval_batch.max(1);
    let mut correct = 0usize;
    let mut logits = Vec::new();
    let mut classes = 0;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(step) {
        let (x, labels) = ds.batch(chunk);
        let x = eval_transform(&x, &opts.augment)?;
        let y = model.forward(&x, Mode::Eval)?;
        classes = y.shape()[1];
        for (p, l) in argmax_rows(&y)?.into_iter().zip(labels) {
            correct += (p == l) as usize;
        }
        logits.extend_from_slice(y.data());
    }
    Ok((correct as f64 / ds.len() as f64, Tensor::from_vec(&[ds.len(), classes], logits)?))
}

/// Minibatch index lists for one epoch; a trailing batch of one sample is
/// merged into the previous batch so batch statistics stay defined.
fn epoch_batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let order = SeededRng::derived(seed, &format!("shuffle.{epoch}")).permutation(n);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("non-empty");
        batches.last_mut().expect("non-empty").extend(last);
    }
    batches
}

struct Session<'a> {
    model: Model,
    opt: Sgd,
    cfg: &'a TrainConfig,
    data: &'a Data,
    opts: &'a RunOptions,
    log: MetricsLog,
}

impl<'a> Session<'a> {
    fn new(model: Model, cfg: &'a TrainConfig, data: &'a Data, opts: &'a RunOptions) -> Result<Self> {
        cfg.validate()?;
        opts.augment.validate()?;
        if data.train.is_empty() {
            return Err(Error::input("empty training set"));
        }
        Ok(Self {
            model,
            opt: Sgd::new(cfg.momentum, cfg.weight_decay),
            cfg,
            data,
            opts,
            log: MetricsLog::default(),
        })
    }

    fn log_initial(&mut self, epoch: usize) -> Result<()> {
        let (acc, _) = evaluate(&mut self.model, &self.data.valid, self.opts)?;
        self.log.rows.push(EpochRow {
            epoch,
            lr: cosine_lr(epoch, self.cfg),
            train_loss: None,
            valid_acc: acc,
            epoch_seconds: 0.0,
            trainable_params: self.model.trainable_params(),
        });
        Ok(())
    }

    /// Mean training loss of the epoch, or `None` on a non-finite loss.
    fn train_epoch(&mut self, epoch: usize) -> Result<Option<f64>> {
        let lr = cosine_lr(epoch, self.cfg);
        let batches = epoch_batches(self.data.train.len(), self.cfg.batch_size, self.cfg.seed, epoch);
        let mut total = 0.0;
        for (step, idx) in batches.iter().enumerate() {
            let (x, labels) = self.data.train.batch(idx);
            let x = augment(&x, &self.opts.augment, derive_seed(self.cfg.seed, &format!("augment.{epoch}.{step}")))?;
            self.model.zero_grad();
            let logits = self.model.forward(&x, Mode::Train)?;
            let (loss, grad) = cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Ok(None);
            }
            total += loss * idx.len() as f64;
            self.model.backward(&grad)?;
            let model = &mut self.model;
            self.opt.step(lr, |f| model.visit_params(f));
        }
        Ok(Some(total / self.data.train.len() as f64))
    }

    /// Trains epochs `from..to`, logging after each. Stops early on
    /// divergence with `log.diverged` set.
    fn run(&mut self, from: usize, to: usize) -> Result<()> {
        for epoch in from..to {
            let ops = modeled_ops_per_example(&self.model);
            let start = Instant::now();
            let loss = self.train_epoch(epoch)?;
            let seconds = match self.opts.clock {
                Clock::Wall => start.elapsed().as_secs_f64(),
                Clock::Modeled { ops_per_second } => self.data.train.len() as f64 * ops as f64 / ops_per_second,
            };
            let Some(loss) = loss else {
                self.log.diverged = true;
                return Ok(());
            };
            let (acc, _) = evaluate(&mut self.model, &self.data.valid, self.opts)?;
            self.log.rows.push(EpochRow {
                epoch: epoch + 1,
                lr: cosine_lr(epoch + 1, self.cfg),
                train_loss: Some(loss),
                valid_acc: acc,
                epoch_seconds: seconds,
                trainable_params: self.model.trainable_params(),
            });
        }
        Ok(())
    }

    /// Composes every basis layer back into a plain conv and resets the
    /// momentum of the rebuilt layers.
    fn transition(&mut self, epoch: usize) -> Result<()> {
        let (acc_before, before) = evaluate(&mut self.model, &self.data.valid, self.opts)?;
        let rebuilt = self.model.compose_back();
        for name in &rebuilt {
            self.opt.reset_layer(name);
        }
        let (acc_after, after) = evaluate(&mut self.model, &self.data.valid, self.opts)?;
        self.log.transition = Some(TransitionCheck {
            epoch,
            acc_before,
            acc_after,
            max_logit_diff: before.max_abs_diff(&after),
            rebuilt_layers: rebuilt,
        });
        Ok(())
    }
}

/// Trains with `mode` in `layers` for the first `basis_epochs` epochs and
/// plain convolutions afterwards. `basis_epochs == cfg.epochs` keeps the
/// basis layers to the end (no transition).
pub fn train_phased(
    arch: &Arch,
    cfg: &TrainConfig,
    layers: &[usize],
    mode: BasisMode,
    basis_epochs: usize,
    data: &Data,
    opts: &RunOptions,
) -> Result<(Model, MetricsLog)> {
    if basis_epochs > cfg.epochs {
        return Err(Error::config(format!(
            "basis phase of {basis_epochs} epochs exceeds the {} total",
            cfg.epochs
        )));
    }
    let mut model = arch.build(model_seed(cfg))?;
    let active = basis_epochs > 0 && !layers.is_empty() && mode != BasisMode::Full;
    if active {
        model.apply_basis(layers, mode, basis_seed(cfg))?;
    } else {
        // Still reject bad ordinals.
        model.apply_basis(layers, BasisMode::Full, 0)?;
    }
    let mut s = Session::new(model, cfg, data, opts)?;
    s.log_initial(0)?;
    if active {
        s.run(0, basis_epochs)?;
        if s.log.diverged {
            return Ok((s.model, s.log));
        }
        if basis_epochs < cfg.epochs {
            s.transition(basis_epochs)?;
        }
        s.run(basis_epochs, cfg.epochs)?;
    } else {
        s.run(0, cfg.epochs)?;
    }
    Ok((s.model, s.log))
}

pub fn train_baseline(arch: &Arch, cfg: &TrainConfig, data: &Data, opts: &RunOptions) -> Result<(Model, MetricsLog)> {
    train_phased(arch, cfg, &[], BasisMode::Full, 0, data, opts)
}

pub fn skip_train(arch: &Arch, cfg: &TrainConfig, skip: &SkipConfig, data: &Data, opts: &RunOptions) -> Result<(Model, MetricsLog)> {
    let n = skip.skip.resolve(cfg.epochs)?;
    train_phased(arch, cfg, &skip.basis_layers, skip.mode, n, data, opts)
}

/// Continues training `model` from `start_epoch` to `cfg.epochs` with a
/// fresh optimizer and the schedule at `start_epoch`. The log starts with
/// a row for `start_epoch`.
pub fn resume_training(model: Model, cfg: &TrainConfig, start_epoch: usize, data: &Data, opts: &RunOptions) -> Result<(Model, MetricsLog)> {
    let mut s = Session::new(model, cfg, data, opts)?;
    s.log_initial(start_epoch)?;
    s.run(start_epoch, cfg.epochs)?;
    Ok((s.model, s.log))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Extraction {
    Svd,
    Qr,
}

/// Basis count for a fraction of `c_out`, clamped to `1..=c_out`.
pub fn rank_for_fraction(fraction: f64, c_out: usize) -> usize {
    round_half_up(fraction * c_out as f64).clamp(1, c_out)
}

/// Copy of `checkpoint` whose conv weights are replaced by their rank-`r`
/// reconstructions `C * B`; everything else is kept. Also returns the
/// parameter count of the extracted basis-plus-coefficient form.
pub fn extract_model(checkpoint: &Model, extraction: Extraction, fraction: f64) -> Result<(Model, u64)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::config(format!("sanity r fraction {fraction} outside (0, 1]")));
    }
    let mut model = checkpoint.clone();
    let mut params = 0;
    for ordinal in 1..=model.num_convs() {
        let layer = model.conv(ordinal)?.layer.clone();
        let spec = *layer.spec();
        let w = layer.compose_full_weight();
        let r = rank_for_fraction(fraction, spec.c_out);
        let (basis, coeffs) = match extraction {
            Extraction::Svd => extract_basis_svd(&w, r)?,
            Extraction::Qr => {
                let q = extract_basis_qr(&w, r)?;
                (q.basis, q.coeffs)
            }
        };
        let rebuilt = BasisConvLayer::with_dense(spec, BasisMode::OutputCompose { r }, basis, coeffs, layer.bias().clone())?;
        model.set_conv(ordinal, rebuilt.to_full())?;
        params += params_decomposed(&spec, r);
    }
    Ok((model, params))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SanityRow {
    /// `svd`, `qr`, `random` or `copy_paste`.
    pub label: String,
    pub r_fraction: Option<f64>,
    pub extracted_params: Option<u64>,
    pub pre_resume_acc: f64,
    pub final_acc: f64,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SanityReport {
    pub resume_epoch: usize,
    pub baseline_acc: f64,
    pub rows: Vec<SanityRow>,
    pub logs: Vec<MetricsLog>,
}

/// Resume point of the sanity protocol: `floor(0.7 * epochs)`.
pub fn sanity_resume_epoch(epochs: usize) -> usize {
    (0.7 * epochs as f64).floor() as usize
}

/// For each fraction, rebuilds every conv from a rank-`r` extraction of the
/// end-of-training checkpoint and resumes at 70% of the schedule; then
/// the `random` (fresh init) and `copy_paste` (checkpoint as is) controls.
/// Trains the checkpoint first when none is given.
pub fn sanity_check(
    arch: &Arch,
    cfg: &TrainConfig,
    extraction: Extraction,
    r_values: &[f64],
    data: &Data,
    opts: &RunOptions,
    checkpoint: Option<(Model, f64)>,
) -> Result<SanityReport> {
    let (ckpt, baseline_acc) = match checkpoint {
        Some(c) => c,
        None => {
            let (m, log) = train_baseline(arch, cfg, data, opts)?;
            if log.diverged {
                return Err(Error::Usage("sanity baseline diverged".into()));
            }
            let acc = log.final_accuracy();
            (m, acc)
        }
    };
    let resume = sanity_resume_epoch(cfg.epochs);
    let label = match extraction {
        Extraction::Svd => "svd",
        Extraction::Qr => "qr",
    };
    let mut rows = Vec::new();
    let mut logs = Vec::new();
    let mut push = |label: &str, fraction: Option<f64>, params: Option<u64>, model: Model| -> Result<()> {
        let (_, log) = resume_training(model, cfg, resume, data, opts)?;
        rows.push(SanityRow {
            label: label.to_string(),
            r_fraction: fraction,
            extracted_params: params,
            pre_resume_acc: log.rows[0].valid_acc,
            final_acc: log.final_accuracy(),
            diverged: log.diverged,
        });
        logs.push(log);
        Ok(())
    };
    for &f in r_values {
        let (model, params) = extract_model(&ckpt, extraction, f)?;
        push(label, Some(f), Some(params), model)?;
    }
    push("random", None, None, arch.build(derive_seed(cfg.seed, "sanity.random"))?)?;
    push("copy_paste", None, None, ckpt.clone())?;
    Ok(SanityReport {
        resume_epoch: resume,
        baseline_acc,
        rows,
        logs,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LightHeavy {
    pub light_cfg: SkipConfig,
    pub heavy_cfg: SkipConfig,
    pub light: MetricsLog,
    pub heavy: MetricsLog,
}

/// Two skip runs that differ only in `basis_layers`: the first five and
/// the last five conv layers.
pub fn run_light_heavy(arch: &Arch, cfg: &TrainConfig, template: &SkipConfig, data: &Data, opts: &RunOptions) -> Result<LightHeavy> {
    let (light, heavy) = group_subsets();
    let light_cfg = SkipConfig {
        basis_layers: light,
        ..template.clone()
    };
    let heavy_cfg = SkipConfig {
        basis_layers: heavy,
        ..template.clone()
    };
    let (_, light_log) = skip_train(arch, cfg, &light_cfg, data, opts)?;
    let (_, heavy_log) = skip_train(arch, cfg, &heavy_cfg, data, opts)?;
    Ok(LightHeavy {
        light_cfg,
        heavy_cfg,
        light: light_log,
        heavy: heavy_log,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectedSummary {
    /// Space-separated ordinals; empty for the baseline.
    pub layers: String,
    pub bitmask: u64,
    pub final_acc: f64,
    pub total_seconds: f64,
    pub baseline_acc: f64,
    pub baseline_seconds: f64,
    pub skip_phase_params: usize,
    pub baseline_params: usize,
    pub transition_epoch: Option<usize>,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SelectedRuns {
    pub baseline: MetricsLog,
    pub logs: Vec<MetricsLog>,
    pub summary: Vec<SelectedSummary>,
}

pub fn layers_label(layers: &[usize]) -> String {
    layers.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

/// One skip run per combination, plus the shared baseline.
pub fn run_selected_combinations(
    arch: &Arch,
    cfg: &TrainConfig,
    combos: &[Vec<usize>],
    skip: Skip,
    mode: BasisMode,
    data: &Data,
    opts: &RunOptions,
) -> Result<SelectedRuns> {
    let (_, baseline) = train_baseline(arch, cfg, data, opts)?;
    let base_params = baseline.rows[0].trainable_params;
    let mut logs = Vec::new();
    let mut summary = Vec::new();
    for combo in combos {
        let sc = SkipConfig {
            skip,
            basis_layers: combo.clone(),
            mode,
        };
        let (_, log) = skip_train(arch, cfg, &sc, data, opts)?;
        summary.push(SelectedSummary {
            layers: layers_label(combo),
            bitmask: combo.iter().fold(0u64, |m, &o| m | (1u64 << (o - 1))),
            final_acc: log.final_accuracy(),
            total_seconds: log.total_seconds(),
            baseline_acc: baseline.final_accuracy(),
            baseline_seconds: baseline.total_seconds(),
            skip_phase_params: log.rows[0].trainable_params,
            baseline_params: base_params,
            transition_epoch: log.transition_epoch(),
            diverged: log.diverged,
        });
        logs.push(log);
    }
    Ok(SelectedRuns { baseline, logs, summary })
}
