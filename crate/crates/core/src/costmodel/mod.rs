//! Closed-form operation and parameter counts for each basis mode.
//!
//! Forward counts are multiply-accumulates. Backward counts are
//! dependency paths: for every output scalar, the number of distinct
//! paths through the computation graph back to an input scalar (kernel
//! taps that land in the zero padding included). The two models are kept
//! separate. Spatial extents are always the layer's output extents, and
//! biases are excluded from every count.
//!
//! Shorthand: `F = C_in * K^2`, `P = h_out * w_out`.

pub mod oracle;

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::basisconv::{BasisMode, Decomposition};
use crate::error::{Error, Result};
use crate::nn::conv::ConvSpec;

fn f_len(spec: &ConvSpec) -> u64 {
    spec.filter_len() as u64
}

fn pixels(spec: &ConvSpec) -> u64 {
    spec.out_pixels() as u64
}

/// `C_out * F`.
pub fn params_full(spec: &ConvSpec) -> u64 {
    spec.c_out as u64 * f_len(spec)
}

/// `r * F + r * C_out`.
pub fn params_decomposed(spec: &ConvSpec, r: usize) -> u64 {
    let r = r as u64;
    r * f_len(spec) + r * spec.c_out as u64
}

/// `r * F + 2 * pairs`: restricted layers train only the pair weights.
pub fn params_restricted(spec: &ConvSpec, r: usize, pairs: usize) -> u64 {
    r as u64 * f_len(spec) + 2 * pairs as u64
}

/// `C_out * F / (F + C_out)`; `r` reduces parameters iff `r` is below it.
pub fn param_reduction_threshold(spec: &ConvSpec) -> f64 {
    let (c, f) = (spec.c_out as f64, spec.filter_len() as f64);
    c * f / (f + c)
}

/// `C_out / (1 + C_out / F)`; output composition runs fewer forward
/// operations iff `r` is below it. Numerically equal to the parameter
/// threshold.
pub fn forward_accel_threshold(spec: &ConvSpec) -> f64 {
    let (c, f) = (spec.c_out as f64, spec.filter_len() as f64);
    c * f / (c + f)
}

/// `2 / (1 + 1/C_out + 1/F)`; output composition lowers the forward plus
/// backward total iff `r` is below it.
pub fn total_accel_threshold_b(spec: &ConvSpec) -> f64 {
    let (c, f) = (spec.c_out as f64, spec.filter_len() as f64);
    2.0 * c * f / (c * f + c + f)
}

/// Forward MACs for a resolved mode.
///
/// * full: `F * P * C_out`
/// * weight compose: `C_out * r * F + F * P * C_out`
/// * output compose: `F * P * r + C_out * r * P`
/// * restricted: `F * P * r + copies * P + 2 * pairs * P`
pub fn count_forward(spec: &ConvSpec, d: Decomposition) -> u64 {
    let (f, p, c) = (f_len(spec), pixels(spec), spec.c_out as u64);
    let n0 = f * p * c;
    match d {
        Decomposition::Full => n0,
        Decomposition::WeightCompose { r } => c * r as u64 * f + n0,
        Decomposition::OutputCompose { r } => f * p * r as u64 + c * r as u64 * p,
        Decomposition::Restricted { r, pairs } => {
            let (r, pairs) = (r as u64, pairs as u64);
            f * p * r + (c - pairs) * p + 2 * pairs * p
        }
    }
}

/// Backward dependency paths for a resolved mode.
///
/// * full and weight compose: `P * C_out * F`
/// * output compose: `P * C_out * r * F`
/// * restricted: `P * copies * F + P * pairs * 2F`
pub fn count_backward(spec: &ConvSpec, d: Decomposition) -> u64 {
    let (f, p, c) = (f_len(spec), pixels(spec), spec.c_out as u64);
    match d {
        Decomposition::Full | Decomposition::WeightCompose { .. } => p * c * f,
        Decomposition::OutputCompose { r } => p * c * r as u64 * f,
        Decomposition::Restricted { pairs, .. } => {
            let pairs = pairs as u64;
            p * (c - pairs) * f + p * pairs * 2 * f
        }
    }
}

/// Output-composition total minus the plain total,
/// `P * (r F + r C_out + r C_out F - 2 C_out F)`, i.e.
/// `P C_out F (r + r/C_out + r/F - 2)`.
pub fn delta_b(spec: &ConvSpec, r: usize) -> i64 {
    let (f, p, c, r) = (f_len(spec) as i64, pixels(spec) as i64, spec.c_out as i64, r as i64);
    p * (r * f + r * c + r * c * f - 2 * c * f)
}

/// Restricted total minus the plain total,
/// `P * (r F + copies + 2 pairs + copies F + 2 pairs F - 2 C_out F)`.
pub fn delta_c(spec: &ConvSpec, r: usize, pairs: usize) -> i64 {
    let (f, p, c) = (f_len(spec) as i64, pixels(spec) as i64, spec.c_out as i64);
    let (r, pairs) = (r as i64, pairs as i64);
    let copies = c - pairs;
    p * (r * f + copies + 2 * pairs + copies * f + 2 * pairs * f - 2 * c * f)
}

/// Both forms of the restricted-mode acceleration condition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeCCondition {
    /// `alpha + beta * (1 + 1/F)`.
    pub exact_lhs: f64,
    /// `1 - 1/F`.
    pub exact_rhs: f64,
    pub accelerated: bool,
    /// `alpha + beta < 1`.
    pub simplified: bool,
}

fn near_integer(x: f64) -> Option<i64> {
    let n = x.round();
    ((x - n).abs() < 1e-9).then_some(n as i64)
}

/// Evaluates the restricted-mode condition. When `alpha * C_out` and
/// `beta * C_out` are whole numbers the verdict is decided in integer
/// arithmetic, so it agrees with the sign of [`delta_c`] even at equality.
pub fn mode_c_condition(spec: &ConvSpec, alpha: f64, beta: f64) -> Result<ModeCCondition> {
    if !(alpha > 0.0 && alpha <= 1.0) || !(0.0..=1.0).contains(&beta) {
        return Err(Error::config(format!("alpha={alpha} must be in (0, 1] and beta={beta} in [0, 1]")));
    }
    let big_f = spec.filter_len() as f64;
    let q = 1.0 / big_f;
    let exact_lhs = alpha + beta * (1.0 + q);
    let exact_rhs = 1.0 - q;
    let c = spec.c_out as f64;
    let accelerated = match (near_integer(alpha * c), near_integer(beta * c)) {
        (Some(r), Some(pairs)) => {
            let (f, c) = (spec.filter_len() as i64, spec.c_out as i64);
            r * f + pairs * (f + 1) < (f - 1) * c
        }
        _ => exact_lhs < exact_rhs,
    };
    Ok(ModeCCondition {
        exact_lhs,
        exact_rhs,
        accelerated,
        simplified: alpha + beta < 1.0,
    })
}

/// Every count, threshold and verdict for one layer in one mode.
///
/// `na_f`, `nb_f`, `nb_b` and `delta_b` use the layer's basis count `r`;
/// the `nc_*` fields and `delta_c` need the restricted pair count and are
/// only present in restricted mode. A full-mode report has every
/// decomposed count equal to the baseline and zero deltas.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub spec: ConvSpec,
    pub decomposition: Decomposition,
    pub params_full: u64,
    pub params_decomposed: u64,
    pub n0_f: u64,
    pub na_f: u64,
    pub nb_f: u64,
    pub nc_f: Option<u64>,
    pub n0_b: u64,
    pub nb_b: u64,
    pub nc_b: Option<u64>,
    pub delta_b: i64,
    pub delta_c: Option<i64>,
    pub param_threshold: f64,
    pub forward_threshold: f64,
    pub total_threshold_b: f64,
    pub param_reduced: bool,
    pub forward_accelerated: bool,
    pub total_accelerated_b: bool,
    pub mode_c: Option<ModeCCondition>,
}

impl CostReport {
    pub fn basis_count(&self) -> usize {
        self.decomposition.basis_count(self.spec.c_out)
    }

    /// Forward count of the mode this report describes.
    pub fn forward_count(&self) -> u64 {
        count_forward(&self.spec, self.decomposition)
    }

    pub fn backward_count(&self) -> u64 {
        count_backward(&self.spec, self.decomposition)
    }

    /// Recomputes both deltas from the report's own count fields.
    pub fn deltas_consistent(&self) -> bool {
        let base = (self.n0_f + self.n0_b) as i64;
        let b_ok = self.delta_b == (self.nb_f + self.nb_b) as i64 - base;
        let c_ok = match (self.nc_f, self.nc_b, self.delta_c) {
            (Some(f), Some(b), Some(d)) => d == (f + b) as i64 - base,
            (None, None, None) => true,
            _ => false,
        };
        b_ok && c_ok
    }
}

pub fn report(spec: &ConvSpec, mode: BasisMode) -> Result<CostReport> {
    Ok(report_resolved(spec, mode.resolve(spec.c_out)?))
}

pub fn report_resolved(spec: &ConvSpec, d: Decomposition) -> CostReport {
    let n0_f = count_forward(spec, Decomposition::Full);
    let n0_b = count_backward(spec, Decomposition::Full);
    let r = d.basis_count(spec.c_out);
    let param_threshold = param_reduction_threshold(spec);
    let forward_threshold = forward_accel_threshold(spec);
    let total_threshold_b = total_accel_threshold_b(spec);
    let mut rep = CostReport {
        spec: *spec,
        decomposition: d,
        params_full: params_full(spec),
        params_decomposed: params_decomposed(spec, r),
        n0_f,
        na_f: count_forward(spec, Decomposition::WeightCompose { r }),
        nb_f: count_forward(spec, Decomposition::OutputCompose { r }),
        nc_f: None,
        n0_b,
        nb_b: count_backward(spec, Decomposition::OutputCompose { r }),
        nc_b: None,
        delta_b: delta_b(spec, r),
        delta_c: None,
        param_threshold,
        forward_threshold,
        total_threshold_b,
        param_reduced: (r as f64) < param_threshold,
        forward_accelerated: (r as f64) < forward_threshold,
        total_accelerated_b: (r as f64) < total_threshold_b,
        mode_c: None,
    };
    match d {
        Decomposition::Full => {
            rep.params_decomposed = rep.params_full;
            rep.na_f = n0_f;
            rep.nb_f = n0_f;
            rep.nb_b = n0_b;
            rep.nc_f = Some(n0_f);
            rep.nc_b = Some(n0_b);
            rep.delta_b = 0;
            rep.delta_c = Some(0);
            rep.param_reduced = false;
            rep.forward_accelerated = false;
            rep.total_accelerated_b = false;
        }
        Decomposition::WeightCompose { .. } | Decomposition::OutputCompose { .. } => {}
        Decomposition::Restricted { r, pairs } => {
            rep.params_decomposed = params_restricted(spec, r, pairs);
            rep.param_reduced = rep.params_decomposed < rep.params_full;
            rep.nc_f = Some(count_forward(spec, d));
            rep.nc_b = Some(count_backward(spec, d));
            rep.delta_c = Some(delta_c(spec, r, pairs));
            let c = spec.c_out as f64;
            rep.mode_c = Some(
                mode_c_condition(spec, r as f64 / c, pairs as f64 / c).expect("resolved fractions are in range"),
            );
        }
    }
    rep
}

/// Flat CSV record: layer identity, mode parameters, geometry and every
/// report field. Columns that do not apply to the mode are empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub ordinal: usize,
    pub layer: String,
    pub mode: String,
    pub r: usize,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub pairs: Option<usize>,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_in: usize,
    pub w_in: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub params_full: u64,
    pub params_decomposed: u64,
    pub n0_f: u64,
    pub na_f: u64,
    pub nb_f: u64,
    pub nc_f: Option<u64>,
    pub n0_b: u64,
    pub nb_b: u64,
    pub nc_b: Option<u64>,
    pub delta_b: i64,
    pub delta_c: Option<i64>,
    pub param_threshold: f64,
    pub forward_threshold: f64,
    pub total_threshold_b: f64,
    pub param_reduced: bool,
    pub forward_accelerated: bool,
    pub total_accelerated_b: bool,
    pub mode_c_lhs: Option<f64>,
    pub mode_c_rhs: Option<f64>,
    pub mode_c_accelerated: Option<bool>,
    pub mode_c_simplified: Option<bool>,
}

pub fn mode_label(mode: &BasisMode) -> &'static str {
    match mode {
        BasisMode::Full => "full",
        BasisMode::WeightCompose { .. } => "weight_compose",
        BasisMode::OutputCompose { .. } => "output_compose",
        BasisMode::RestrictedCompose { .. } => "restricted",
    }
}

impl CostRow {
    pub fn new(ordinal: usize, layer: &str, mode: &BasisMode, rep: &CostReport) -> Self {
        let (alpha, beta) = match *mode {
            BasisMode::RestrictedCompose { alpha, beta } => (Some(alpha), Some(beta)),
            _ => (None, None),
        };
        let pairs = match rep.decomposition {
            Decomposition::Restricted { pairs, .. } => Some(pairs),
            _ => None,
        };
        let s = &rep.spec;
        Self {
            ordinal,
            layer: layer.to_string(),
            mode: mode_label(mode).to_string(),
            r: rep.basis_count(),
            alpha,
            beta,
            pairs,
            c_in: s.c_in,
            c_out: s.c_out,
            k: s.k,
            stride: s.stride,
            padding: s.padding,
            h_in: s.h_in,
            w_in: s.w_in,
            h_out: s.h_out,
            w_out: s.w_out,
            params_full: rep.params_full,
            params_decomposed: rep.params_decomposed,
            n0_f: rep.n0_f,
            na_f: rep.na_f,
            nb_f: rep.nb_f,
            nc_f: rep.nc_f,
            n0_b: rep.n0_b,
            nb_b: rep.nb_b,
            nc_b: rep.nc_b,
            delta_b: rep.delta_b,
            delta_c: rep.delta_c,
            param_threshold: rep.param_threshold,
            forward_threshold: rep.forward_threshold,
            total_threshold_b: rep.total_threshold_b,
            param_reduced: rep.param_reduced,
            forward_accelerated: rep.forward_accelerated,
            total_accelerated_b: rep.total_accelerated_b,
            mode_c_lhs: rep.mode_c.map(|m| m.exact_lhs),
            mode_c_rhs: rep.mode_c.map(|m| m.exact_rhs),
            mode_c_accelerated: rep.mode_c.map(|m| m.accelerated),
            mode_c_simplified: rep.mode_c.map(|m| m.simplified),
        }
    }

    /// Geometry and mode recovered from the row.
    pub fn spec_and_mode(&self) -> Result<(ConvSpec, BasisMode)> {
        let spec = ConvSpec {
            c_in: self.c_in,
            c_out: self.c_out,
            k: self.k,
            stride: self.stride,
            padding: self.padding,
            h_in: self.h_in,
            w_in: self.w_in,
            h_out: self.h_out,
            w_out: self.w_out,
        }
        .validated()?;
        let mode = match self.mode.as_str() {
            "full" => BasisMode::Full,
            "weight_compose" => BasisMode::WeightCompose { r: self.r },
            "output_compose" => BasisMode::OutputCompose { r: self.r },
            "restricted" => BasisMode::RestrictedCompose {
                alpha: self.alpha.ok_or_else(|| Error::input(format!("row {}: restricted row without alpha", self.ordinal)))?,
                beta: self.beta.ok_or_else(|| Error::input(format!("row {}: restricted row without beta", self.ordinal)))?,
            },
            other => return Err(Error::input(format!("row {}: unknown mode {other:?}", self.ordinal))),
        };
        Ok((spec, mode))
    }
}

pub fn write_cost_csv<W: Write>(rows: &[CostRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_cost_csv<R: std::io::Read>(input: R) -> Result<Vec<CostRow>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for row in r.deserialize() {
        rows.push(row?);
    }
    Ok(rows)
}

/// Fixed-width summary table of the main counts.
pub fn format_table(rows: &[CostRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>3} {:<22} {:<14} {:>4} {:>12} {:>12} {:>12} {:>12} {:>13} {:>8} {:>8} {:>5}",
        "#", "layer", "mode", "r", "n0_f", "mode_f", "n0_b", "mode_b", "delta", "thr_f", "thr_b", "accel"
    );
    for row in rows {
        let (mode_f, mode_b, delta, accel) = match row.mode.as_str() {
            "full" => (row.n0_f, row.n0_b, 0, false),
            "weight_compose" => (row.na_f, row.n0_b, (row.na_f as i64) - (row.n0_f as i64), false),
            "output_compose" => (row.nb_f, row.nb_b, row.delta_b, row.total_accelerated_b),
            _ => (
                row.nc_f.unwrap_or(0),
                row.nc_b.unwrap_or(0),
                row.delta_c.unwrap_or(0),
                row.mode_c_accelerated.unwrap_or(false),
            ),
        };
        let _ = writeln!(
            s,
            "{:>3} {:<22} {:<14} {:>4} {:>12} {:>12} {:>12} {:>12} {:>13} {:>8.3} {:>8.4} {:>5}",
            row.ordinal,
            row.layer,
            row.mode,
            row.r,
            row.n0_f,
            mode_f,
            row.n0_b,
            mode_b,
            delta,
            row.forward_threshold,
            row.total_threshold_b,
            if accel { "yes" } else { "no" }
        );
    }
    s
}
