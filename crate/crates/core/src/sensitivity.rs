//! One-layer-only sensitivity profiling and the combination search built on
//! it.
//!
//! A subset of layers is a bitmask with bit `l - 1` set for ordinal `l`.
//! Estimates for a subset average, over all `L` layers, the single-layer
//! record of each member and the baseline record for everyone else.

use std::collections::HashSet;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::basisconv::BasisMode;
use crate::error::{Error, Result};
use crate::nn::model::Arch;
use crate::nn::optim::TrainConfig;
use crate::pipeline::{train_baseline, train_phased, Data, MetricsLog, RunOptions};
use crate::rng::SeededRng;

/// Largest layer count enumerated exhaustively.
pub const EXHAUSTIVE_LIMIT: usize = 24;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRecord {
    /// 0 for the baseline record.
    pub ordinal: usize,
    pub acc: f64,
    pub drop: f64,
    pub time_s: f64,
    pub params: u64,
    pub diverged: bool,
}

impl SensitivityRecord {
    pub fn from_log(ordinal: usize, log: &MetricsLog, baseline_acc: f64) -> Self {
        let params = log.rows.first().map_or(0, |r| r.trainable_params as u64);
        if log.diverged {
            return Self {
                ordinal,
                acc: 0.0,
                drop: 1.0,
                time_s: log.total_seconds(),
                params,
                diverged: true,
            };
        }
        let acc = log.final_accuracy();
        Self {
            ordinal,
            acc,
            drop: baseline_acc - acc,
            time_s: log.total_seconds(),
            params,
            diverged: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombinationEstimate {
    pub bitmask: u64,
    pub est_drop: f64,
    pub est_time: f64,
    pub est_size: f64,
}

impl CombinationEstimate {
    pub fn subset(&self) -> Vec<usize> {
        mask_to_subset(self.bitmask)
    }

    pub fn cardinality(&self) -> u32 {
        self.bitmask.count_ones()
    }
}

pub fn mask_to_subset(mask: u64) -> Vec<usize> {
    (0..64).filter(|b| mask >> b & 1 == 1).map(|b| b + 1).collect()
}

pub fn subset_to_mask(subset: &[usize]) -> Result<u64> {
    subset.iter().try_fold(0u64, |m, &o| {
        if (1..=64).contains(&o) {
            Ok(m | 1 << (o - 1))
        } else {
            Err(Error::input(format!("layer ordinal {o} outside 1..=64")))
        }
    })
}

/// Light and heavy groups: the first five and the last five of the 20
/// micro-ResNet18 convolutions.
pub fn group_subsets() -> (Vec<usize>, Vec<usize>) {
    ((1..=5).collect(), (16..=20).collect())
}

/// Baseline record (ordinal 0) from a plain training run.
pub fn profile_baseline(arch: &Arch, cfg: &TrainConfig, data: &Data, opts: &RunOptions) -> Result<SensitivityRecord> {
    let (_, log) = train_baseline(arch, cfg, data, opts)?;
    if log.diverged {
        return Err(Error::Usage("baseline run diverged".into()));
    }
    Ok(SensitivityRecord::from_log(0, &log, log.final_accuracy()))
}

/// Trains with `mode` in layer `ordinal` only, for the whole run.
pub fn profile_layer(
    arch: &Arch,
    cfg: &TrainConfig,
    ordinal: usize,
    mode: BasisMode,
    data: &Data,
    opts: &RunOptions,
    baseline_acc: f64,
) -> Result<SensitivityRecord> {
    if ordinal == 0 {
        return Err(Error::config("layer ordinals start at 1"));
    }
    let (_, log) = train_phased(arch, cfg, &[ordinal], mode, cfg.epochs, data, opts)?;
    Ok(SensitivityRecord::from_log(ordinal, &log, baseline_acc))
}

/// Checks that `records` holds exactly one record for each of `1..=L` and
/// returns them ordered by ordinal.
pub fn order_records(records: &[SensitivityRecord]) -> Result<Vec<SensitivityRecord>> {
    let l = records.len();
    let mut slots: Vec<Option<SensitivityRecord>> = vec![None; l];
    for r in records {
        if r.ordinal == 0 || r.ordinal > l {
            return Err(Error::input(format!("record ordinal {} outside 1..={l}", r.ordinal)));
        }
        if slots[r.ordinal - 1].replace(r.clone()).is_some() {
            return Err(Error::input(format!("duplicate record for layer {}", r.ordinal)));
        }
    }
    slots
        .into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| Error::input(format!("missing record for layer {}", i + 1))))
        .collect()
}

fn combine_ordered(ordered: &[SensitivityRecord], baseline: &SensitivityRecord, mask: u64) -> CombinationEstimate {
    let l = ordered.len() as f64;
    let (mut drop, mut time, mut size) = (0.0, 0.0, 0.0);
    for (i, r) in ordered.iter().enumerate() {
        let m = if mask >> i & 1 == 1 { r } else { baseline };
        drop += if m.ordinal == 0 { 0.0 } else { m.drop };
        time += m.time_s;
        size += m.params as f64;
    }
    CombinationEstimate {
        bitmask: mask,
        est_drop: drop / l,
        est_time: time / l,
        est_size: size / l,
    }
}

pub fn combine(records: &[SensitivityRecord], baseline: &SensitivityRecord, subset: &[usize]) -> Result<CombinationEstimate> {
    let ordered = order_records(records)?;
    let mask = subset_to_mask(subset)?;
    if mask >> ordered.len() != 0 {
        return Err(Error::input(format!("subset {subset:?} exceeds {} layers", ordered.len())));
    }
    Ok(combine_ordered(&ordered, baseline, mask))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case", deny_unknown_fields)]
pub enum LimitPolicy {
    #[default]
    Exhaustive,
    Sampled {
        count: usize,
        seed: u64,
    },
}

/// All `2^L` subsets in bitmask order, or `count` distinct seeded draws in
/// draw order.
pub fn enumerate_combinations(records: &[SensitivityRecord], baseline: &SensitivityRecord, policy: LimitPolicy) -> Result<Vec<CombinationEstimate>> {
    let ordered = order_records(records)?;
    let l = ordered.len();
    match policy {
        LimitPolicy::Exhaustive => {
            if l > EXHAUSTIVE_LIMIT {
                return Err(Error::config(format!(
                    "{l} layers exceed the exhaustive limit of {EXHAUSTIVE_LIMIT}; configure sampling"
                )));
            }
            Ok((0..1u64 << l).map(|m| combine_ordered(&ordered, baseline, m)).collect())
        }
        LimitPolicy::Sampled { count, seed } => {
            if l > 64 {
                return Err(Error::config("sampling supports at most 64 layers"));
            }
            if l < 64 && count as u128 > 1u128 << l {
                return Err(Error::config(format!("cannot draw {count} distinct subsets of {l} layers")));
            }
            let mut rng = SeededRng::new(seed);
            let full = if l == 64 { u64::MAX } else { (1u64 << l) - 1 };
            let mut seen = HashSet::with_capacity(count);
            let mut out = Vec::with_capacity(count);
            while out.len() < count {
                let m = rng.next_u64() & full;
                if seen.insert(m) {
                    out.push(combine_ordered(&ordered, baseline, m));
                }
            }
            Ok(out)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub points: Vec<CombinationEstimate>,
    /// Set when no estimate lies under the baseline time.
    pub warning: Option<String>,
}

fn better(a: &CombinationEstimate, b: &CombinationEstimate) -> bool {
    (a.est_drop, a.est_time, a.cardinality(), a.bitmask) < (b.est_drop, b.est_time, b.cardinality(), b.bitmask)
}

/// `a` is no worse than `b` on both axes and better on one.
pub fn dominates(a: &CombinationEstimate, b: &CombinationEstimate) -> bool {
    a.est_time <= b.est_time && a.est_drop <= b.est_drop && (a.est_time < b.est_time || a.est_drop < b.est_drop)
}

/// Bucketed argmin selection. Candidates are the estimates strictly faster
/// than `baseline_time`; their time range is split into `n_buckets` equal
/// buckets, the lowest-drop point of each non-empty bucket is kept, and
/// kept points dominated by another kept point are removed. Output is
/// ordered by time.
pub fn pareto_select(estimates: &[CombinationEstimate], baseline_time: f64, n_buckets: usize) -> Result<Selection> {
    if estimates.is_empty() {
        return Err(Error::input("no estimates to select from"));
    }
    if n_buckets == 0 {
        return Err(Error::config("n_buckets must be positive"));
    }
    let cands: Vec<&CombinationEstimate> = estimates.iter().filter(|e| e.est_time < baseline_time).collect();
    if cands.is_empty() {
        return Ok(Selection {
            points: Vec::new(),
            warning: Some(format!("no combination is faster than the baseline time {baseline_time}")),
        });
    }
    let lo = cands.iter().map(|e| e.est_time).fold(f64::INFINITY, f64::min);
    let hi = cands.iter().map(|e| e.est_time).fold(f64::NEG_INFINITY, f64::max);
    let mut best: Vec<Option<CombinationEstimate>> = vec![None; n_buckets];
    for e in cands {
        let b = if hi > lo {
            (((e.est_time - lo) / (hi - lo) * n_buckets as f64).floor() as usize).min(n_buckets - 1)
        } else {
            0
        };
        if best[b].as_ref().is_none_or(|cur| better(e, cur)) {
            best[b] = Some(*e);
        }
    }
    let kept: Vec<CombinationEstimate> = best.into_iter().flatten().collect();
    let mut points: Vec<CombinationEstimate> = kept.iter().filter(|p| !kept.iter().any(|q| dominates(q, p))).copied().collect();
    points.sort_by(|a, b| a.est_time.total_cmp(&b.est_time));
    Ok(Selection { points, warning: None })
}

pub fn write_records<W: Write>(records: &[SensitivityRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: Read>(input: R) -> Result<Vec<SensitivityRecord>> {
    let mut r = csv::Reader::from_reader(input);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Splits a profiling table into the baseline (ordinal 0) and layer records.
pub fn split_baseline(records: Vec<SensitivityRecord>) -> Result<(SensitivityRecord, Vec<SensitivityRecord>)> {
    let (base, layers): (Vec<_>, Vec<_>) = records.into_iter().partition(|r| r.ordinal == 0);
    match <[SensitivityRecord; 1]>::try_from(base) {
        Ok([b]) => Ok((b, layers)),
        Err(v) => Err(Error::input(format!("expected one baseline row (ordinal 0), found {}", v.len()))),
    }
}

#[derive(Serialize, Deserialize)]
struct EstimateRow {
    bitmask: u64,
    layers: String,
    drop: f64,
    time_s: f64,
    params: f64,
}

pub fn write_estimates<W: Write>(estimates: &[CombinationEstimate], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for e in estimates {
        w.serialize(EstimateRow {
            bitmask: e.bitmask,
            layers: e.subset().iter().map(usize::to_string).collect::<Vec<_>>().join(" "),
            drop: e.est_drop,
            time_s: e.est_time,
            params: e.est_size,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_estimates<R: Read>(input: R) -> Result<Vec<CombinationEstimate>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: EstimateRow = row?;
        let parsed: Vec<usize> = row
            .layers
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::input(format!("bad layer list {:?}", row.layers))))
            .collect::<Result<_>>()?;
        if subset_to_mask(&parsed)? != row.bitmask {
            return Err(Error::input(format!("bitmask {} disagrees with layers {:?}", row.bitmask, row.layers)));
        }
        out.push(CombinationEstimate {
            bitmask: row.bitmask,
            est_drop: row.drop,
            est_time: row.time_s,
            est_size: row.params,
        });
    }
    Ok(out)
}
