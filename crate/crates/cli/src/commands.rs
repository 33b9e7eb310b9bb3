use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use convbasis::basisconv::{round_half_up, BasisConvLayer, BasisMode, Decomposition};
use convbasis::costmodel::oracle::{dependency_paths, instrumented_forward};
use convbasis::costmodel::{format_table, read_cost_csv, report, write_cost_csv, CostRow};
use convbasis::nn::conv::ConvSpec;
use convbasis::nn::model::Model;
use convbasis::pipeline::checkpoint::{load_checkpoint, save_checkpoint};
use convbasis::pipeline::metrics::write_xy;
use convbasis::pipeline::{
    evaluate, layers_label, run_light_heavy, run_selected_combinations, sanity_check, skip_train, train_baseline, train_phased,
    MetricsLog, SelectedSummary, Skip,
};
use convbasis::sensitivity::{
    enumerate_combinations, pareto_select, read_estimates, read_records, split_baseline, subset_to_mask, write_estimates, write_records,
    CombinationEstimate, SensitivityRecord,
};
use convbasis::{Error, Result, Tensor};
use serde::Serialize;

use crate::config::RunConfig;
use crate::{Command, CostMode, Global};

/// Points beyond this are thinned (every k-th estimate) in plot files.
const PLOT_LIMIT: usize = 65_536;

pub fn run(global: &Global, command: &Command) -> Result<ExitCode> {
    let mut cfg = match &global.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = global.seed {
        cfg.train.seeds = vec![seed];
    }
    apply_flags(&mut cfg, command)?;
    cfg.validate()?;
    let out = Out::prepare(&global.out, global.overwrite)?;
    out.write("config.toml", cfg.to_toml())?;
    let diverged = match command {
        Command::Cost { mode, r, alpha, beta, spec } => cmd_cost(&cfg, &out, *mode, *r, *alpha, *beta, spec.as_deref())?,
        Command::VerifyCost { input } => return cmd_verify_cost(&out, input),
        Command::Arch => cmd_arch(&cfg, &out)?,
        Command::Train => cmd_train(&cfg, &out)?,
        Command::SkipTrain { .. } => cmd_skip_train(&cfg, &out)?,
        Command::Sanity { checkpoint } => cmd_sanity(&cfg, &out, checkpoint.as_deref())?,
        Command::Profile { layers } => cmd_profile(&cfg, &out, layers.as_deref(), global.jobs)?,
        Command::Search {
            profile,
            cloud,
            baseline_time,
            n_buckets,
        } => cmd_search(&cfg, &out, profile.as_deref(), cloud.as_deref(), *baseline_time, *n_buckets)?,
        Command::RunSelected { selection } => cmd_run_selected(&cfg, &out, selection.as_deref())?,
        Command::LightHeavy => cmd_light_heavy(&cfg, &out)?,
    };
    if diverged {
        eprintln!("a training run diverged; partial logs are in {}", out.dir.display());
        return Ok(ExitCode::from(3));
    }
    Ok(ExitCode::SUCCESS)
}

/// Subcommand flags that mirror config keys override the file.
fn apply_flags(cfg: &mut RunConfig, command: &Command) -> Result<()> {
    if let Command::SkipTrain { skip, layers } = command {
        if let Some(s) = skip {
            cfg.basis.skip = parse_skip(s)?;
        }
        if let Some(l) = layers {
            cfg.basis.layers = parse_layers(l)?;
        }
    }
    Ok(())
}

fn parse_skip(s: &str) -> Result<Skip> {
    let bad = || Error::Input(format!("--skip {s:?} is neither an epoch count nor a fraction"));
    if s.contains(['.', 'e', 'E']) {
        s.parse().map(Skip::Fraction).map_err(|_| bad())
    } else {
        s.parse().map(Skip::Epochs).map_err(|_| bad())
    }
}

fn parse_layers(s: &str) -> Result<Vec<usize>> {
    s.split([',', ' '])
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Input(format!("bad layer ordinal {t:?}"))))
        .collect()
}

pub struct Out {
    pub dir: PathBuf,
}

impl Out {
    fn prepare(dir: &Path, overwrite: bool) -> Result<Self> {
        if dir.exists() {
            if !dir.is_dir() {
                return Err(Error::Usage(format!("{} exists and is not a directory", dir.display())));
            }
            if !overwrite && std::fs::read_dir(dir)?.next().is_some() {
                return Err(Error::Usage(format!("{} is not empty; pass --overwrite to reuse it", dir.display())));
            }
        }
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    fn path(&self, rel: &str) -> Result<PathBuf> {
        let p = self.dir.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn write(&self, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        std::fs::write(self.path(rel)?, contents)?;
        Ok(())
    }

    fn csv<T: Serialize>(&self, rel: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_path(self.path(rel)?)?;
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Metrics CSV plus its accuracy-vs-epoch plot file.
    fn log(&self, stem: &str, log: &MetricsLog) -> Result<()> {
        log.save(&self.path(&format!("{stem}.csv"))?)?;
        let f = std::fs::File::create(self.path(&format!("{stem}_accuracy.csv"))?)?;
        write_xy("epoch", "valid_acc", &log.accuracy_curve(), f)?;
        if let Some(t) = &log.transition {
            self.csv(
                &format!("{stem}_transition.csv"),
                &[TransitionRow {
                    epoch: t.epoch,
                    acc_before: t.acc_before,
                    acc_after: t.acc_after,
                    max_logit_diff: t.max_logit_diff,
                    rebuilt_layers: t.rebuilt_layers.join(" "),
                }],
            )?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct TransitionRow {
    epoch: usize,
    acc_before: f64,
    acc_after: f64,
    max_logit_diff: f64,
    rebuilt_layers: String,
}

#[derive(Serialize)]
struct RunSummary {
    seed: u64,
    run: String,
    final_acc: f64,
    total_seconds: f64,
    transition_epoch: Option<usize>,
    diverged: bool,
}

impl RunSummary {
    fn new(seed: u64, run: &str, log: &MetricsLog) -> Self {
        Self {
            seed,
            run: run.to_string(),
            final_acc: log.final_accuracy(),
            total_seconds: log.total_seconds(),
            transition_epoch: log.transition_epoch(),
            diverged: log.diverged,
        }
    }
}

fn parse_spec(s: &str) -> Result<ConvSpec> {
    let v: Vec<usize> = s
        .split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::Input(format!("--spec: bad number {t:?}"))))
        .collect::<Result<_>>()?;
    match v[..] {
        [c_in, c_out, k, h, w] => ConvSpec::new(c_in, c_out, k, 1, k / 2, h, w),
        [c_in, c_out, k, h, w, stride] => ConvSpec::new(c_in, c_out, k, stride, k / 2, h, w),
        [c_in, c_out, k, h, w, stride, padding] => ConvSpec::new(c_in, c_out, k, stride, padding, h, w),
        _ => Err(Error::Input("--spec needs C_IN,C_OUT,K,H,W[,STRIDE[,PADDING]]".into())),
    }
}

fn cmd_cost(
    cfg: &RunConfig,
    out: &Out,
    mode: CostMode,
    r: Option<usize>,
    alpha: Option<f64>,
    beta: Option<f64>,
    spec: Option<&str>,
) -> Result<bool> {
    let layers: Vec<(String, ConvSpec)> = match spec {
        Some(s) => vec![("layer".to_string(), parse_spec(s)?)],
        None => cfg
            .arch()
            .build(0)?
            .conv_slots()
            .iter()
            .map(|s| (s.name.clone(), *s.layer.spec()))
            .collect(),
    };
    let r = r.or(cfg.basis.r);
    let alpha = alpha.unwrap_or(cfg.basis.alpha);
    let beta = beta.unwrap_or(cfg.basis.beta);
    let modes: &[CostMode] = match mode {
        CostMode::All => &[CostMode::Full, CostMode::WeightCompose, CostMode::OutputCompose, CostMode::RestrictedCompose],
        ref m => std::slice::from_ref(m),
    };
    let mut rows = Vec::new();
    for &m in modes {
        for (i, (name, spec)) in layers.iter().enumerate() {
            let dense_r = r.unwrap_or_else(|| round_half_up(cfg.basis.r_fraction * spec.c_out as f64).clamp(1, spec.c_out));
            let bm = match m {
                CostMode::Full | CostMode::All => BasisMode::Full,
                CostMode::WeightCompose => BasisMode::WeightCompose { r: dense_r },
                CostMode::OutputCompose => BasisMode::OutputCompose { r: dense_r },
                CostMode::RestrictedCompose => BasisMode::RestrictedCompose { alpha, beta },
            };
            let rep = report(spec, bm).map_err(|e| Error::Config(format!("layer {} ({name}): {e}", i + 1)))?;
            rows.push(CostRow::new(i + 1, name, &bm, &rep));
        }
    }
    print!("{}", format_table(&rows));
    write_cost_csv(&rows, std::fs::File::create(out.path("cost.csv")?)?)?;
    Ok(false)
}

#[derive(Serialize)]
struct VerifyRow {
    ordinal: usize,
    layer: String,
    mode: String,
    quantity: &'static str,
    closed_form: u64,
    oracle: u64,
    matches: bool,
}

fn cmd_verify_cost(out: &Out, input: &Path) -> Result<ExitCode> {
    let rows = read_cost_csv(std::fs::File::open(input)?)?;
    if rows.is_empty() {
        return Err(Error::Input(format!("{} has no rows", input.display())));
    }
    let mut checks = Vec::new();
    for row in &rows {
        let (spec, mode) = row.spec_and_mode()?;
        let layer = BasisConvLayer::new(spec, mode, 0)?;
        let plain = BasisConvLayer::new(spec, BasisMode::Full, 0)?;
        let probe = Tensor::randn(&[1, spec.c_in, spec.h_in, spec.w_in], 1);
        let (_, base_f) = instrumented_forward(&plain, &probe)?;
        let (_, mode_f) = instrumented_forward(&layer, &probe)?;
        let base_b = dependency_paths(&plain);
        let mode_b = dependency_paths(&layer);
        let (cf_f, cf_b) = match layer.decomposition() {
            Decomposition::Full => (row.n0_f, row.n0_b),
            Decomposition::WeightCompose { .. } => (row.na_f, row.n0_b),
            Decomposition::OutputCompose { .. } => (row.nb_f, row.nb_b),
            Decomposition::Restricted { .. } => (
                row.nc_f.ok_or_else(|| Error::Input(format!("row {}: missing nc_f", row.ordinal)))?,
                row.nc_b.ok_or_else(|| Error::Input(format!("row {}: missing nc_b", row.ordinal)))?,
            ),
        };
        for (quantity, closed_form, oracle) in [
            ("n0_f", row.n0_f, base_f.total()),
            ("n0_b", row.n0_b, base_b),
            ("mode_f", cf_f, mode_f.total()),
            ("mode_b", cf_b, mode_b),
        ] {
            checks.push(VerifyRow {
                ordinal: row.ordinal,
                layer: row.layer.clone(),
                mode: row.mode.clone(),
                quantity,
                closed_form,
                oracle,
                matches: closed_form == oracle,
            });
        }
    }
    out.csv("verify.csv", &checks)?;
    let mismatches = checks.iter().filter(|c| !c.matches).count();
    println!("checked {} quantities over {} rows: {mismatches} mismatches", checks.len(), rows.len());
    Ok(if mismatches == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

#[derive(Serialize)]
struct ArchRow {
    ordinal: usize,
    layer: String,
    c_in: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_in: usize,
    w_in: usize,
    h_out: usize,
    w_out: usize,
    params: usize,
}

fn cmd_arch(cfg: &RunConfig, out: &Out) -> Result<bool> {
    let model = cfg.arch().build(0)?;
    let rows: Vec<ArchRow> = model
        .conv_slots()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let sp = *s.layer.spec();
            ArchRow {
                ordinal: i + 1,
                layer: s.name.clone(),
                c_in: sp.c_in,
                c_out: sp.c_out,
                k: sp.k,
                stride: sp.stride,
                padding: sp.padding,
                h_in: sp.h_in,
                w_in: sp.w_in,
                h_out: sp.h_out,
                w_out: sp.w_out,
                params: s.layer.trainable_param_count(),
            }
        })
        .collect();
    for r in &rows {
        println!("{:>3} {:<22} {:>3} -> {:<3} k{} s{} {}x{} -> {}x{}", r.ordinal, r.layer, r.c_in, r.c_out, r.k, r.stride, r.h_in, r.w_in, r.h_out, r.w_out);
    }
    out.csv("arch.csv", &rows)?;
    Ok(false)
}

fn cmd_train(cfg: &RunConfig, out: &Out) -> Result<bool> {
    let data = cfg.load_data()?;
    let mut summary = Vec::new();
    for &seed in &cfg.train.seeds {
        let (model, log) = train_baseline(&cfg.arch(), &cfg.train_config(seed), &data, &cfg.run_options())?;
        out.log(&format!("seed_{seed}/metrics"), &log)?;
        if !log.diverged {
            save_checkpoint(&model, &out.path(&format!("seed_{seed}/checkpoint.bin"))?)?;
        }
        summary.push(RunSummary::new(seed, "baseline", &log));
    }
    out.csv("summary.csv", &summary)?;
    Ok(summary.iter().any(|s| s.diverged))
}

fn cmd_skip_train(cfg: &RunConfig, out: &Out) -> Result<bool> {
    let data = cfg.load_data()?;
    let sc = cfg.skip_config()?;
    let mut summary = Vec::new();
    for &seed in &cfg.train.seeds {
        let (model, log) = skip_train(&cfg.arch(), &cfg.train_config(seed), &sc, &data, &cfg.run_options())?;
        out.log(&format!("seed_{seed}/metrics"), &log)?;
        if !log.diverged {
            save_checkpoint(&model, &out.path(&format!("seed_{seed}/checkpoint.bin"))?)?;
        }
        summary.push(RunSummary::new(seed, "skip", &log));
    }
    out.csv("summary.csv", &summary)?;
    Ok(summary.iter().any(|s| s.diverged))
}

#[derive(Serialize)]
struct SanityCsvRow {
    seed: u64,
    label: String,
    r_fraction: Option<f64>,
    extracted_params: Option<u64>,
    resume_epoch: usize,
    baseline_acc: f64,
    pre_resume_acc: f64,
    final_acc: f64,
    diverged: bool,
}

fn cmd_sanity(cfg: &RunConfig, out: &Out, checkpoint: Option<&Path>) -> Result<bool> {
    if checkpoint.is_some() && cfg.train.seeds.len() != 1 {
        return Err(Error::Config("--checkpoint needs exactly one seed".into()));
    }
    let data = cfg.load_data()?;
    let opts = cfg.run_options();
    let mut rows = Vec::new();
    for &seed in &cfg.train.seeds {
        let tc = cfg.train_config(seed);
        let ckpt = match checkpoint {
            Some(p) => {
                let mut m: Model = load_checkpoint(p)?;
                if m.arch() != cfg.arch() {
                    return Err(Error::Config(format!("checkpoint {} does not match the [model] section", p.display())));
                }
                let (acc, _) = evaluate(&mut m, &data.valid, &opts)?;
                Some((m, acc))
            }
            None => {
                let (m, log) = train_baseline(&cfg.arch(), &tc, &data, &opts)?;
                out.log(&format!("seed_{seed}/baseline"), &log)?;
                if log.diverged {
                    return Ok(true);
                }
                Some((m, log.final_accuracy()))
            }
        };
        let rep = sanity_check(&cfg.arch(), &tc, cfg.sanity.extraction, &cfg.sanity.r_values, &data, &opts, ckpt)?;
        for (row, log) in rep.rows.iter().zip(&rep.logs) {
            let stem = match row.r_fraction {
                Some(f) => format!("seed_{seed}/{}_r{f}", row.label),
                None => format!("seed_{seed}/{}", row.label),
            };
            out.log(&stem, log)?;
            rows.push(SanityCsvRow {
                seed,
                label: row.label.clone(),
                r_fraction: row.r_fraction,
                extracted_params: row.extracted_params,
                resume_epoch: rep.resume_epoch,
                baseline_acc: rep.baseline_acc,
                pre_resume_acc: row.pre_resume_acc,
                final_acc: row.final_acc,
                diverged: row.diverged,
            });
        }
    }
    out.csv("sanity.csv", &rows)?;
    Ok(rows.iter().any(|r| r.diverged))
}

/// Runs `tasks` on up to `jobs` threads; results keep task order.
fn fan_out<T: Sync, R: Send>(tasks: &[T], jobs: usize, f: impl Fn(&T) -> Result<R> + Sync) -> Result<Vec<R>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = tasks.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, tasks.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= tasks.len() {
                    break;
                }
                let r = f(&tasks[i]);
                *slots[i].lock().expect("result slot") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("result slot").expect("task ran")).collect()
}

fn cmd_profile(cfg: &RunConfig, out: &Out, layers: Option<&str>, jobs: usize) -> Result<bool> {
    let data = cfg.load_data()?;
    let arch = cfg.arch();
    let n = arch.build(0)?.num_convs();
    let ordinals = match layers {
        Some(s) => parse_layers(s)?,
        None => (1..=n).collect(),
    };
    if let Some(&bad) = ordinals.iter().find(|&&o| o == 0 || o > n) {
        return Err(Error::Config(format!("layer ordinal {bad} outside 1..={n}")));
    }
    let mode = cfg.basis_mode()?;
    let opts = cfg.run_options();
    // Ordinal 0 is the baseline run.
    let tasks: Vec<(u64, usize)> = cfg
        .train
        .seeds
        .iter()
        .flat_map(|&s| std::iter::once(0).chain(ordinals.iter().copied()).map(move |o| (s, o)))
        .collect();
    let logs = fan_out(&tasks, jobs, |&(seed, o)| {
        let tc = cfg.train_config(seed);
        if o == 0 {
            train_baseline(&arch, &tc, &data, &opts).map(|(_, l)| l)
        } else {
            train_phased(&arch, &tc, &[o], mode, tc.epochs, &data, &opts).map(|(_, l)| l)
        }
    })?;
    let mut per_seed: Vec<Vec<SensitivityRecord>> = Vec::new();
    let mut diverged = false;
    for (chunk_tasks, chunk_logs) in tasks.chunks(ordinals.len() + 1).zip(logs.chunks(ordinals.len() + 1)) {
        let seed = chunk_tasks[0].0;
        let base = &chunk_logs[0];
        diverged |= chunk_logs.iter().any(|l| l.diverged);
        if base.diverged {
            out.log(&format!("seed_{seed}/baseline"), base)?;
            return Ok(true);
        }
        let base_acc = base.final_accuracy();
        let mut recs = Vec::new();
        for (&(_, o), log) in chunk_tasks.iter().zip(chunk_logs) {
            let stem = if o == 0 { format!("seed_{seed}/baseline") } else { format!("seed_{seed}/layer_{o}") };
            out.log(&stem, log)?;
            recs.push(SensitivityRecord::from_log(o, log, base_acc));
        }
        write_records(&recs, std::fs::File::create(out.path(&format!("seed_{seed}/profile.csv"))?)?)?;
        per_seed.push(recs);
    }
    // Seed average: accuracy and drop are averaged; time and size are
    // seed independent under the modeled clock and averaged as well.
    let k = per_seed.len() as f64;
    let merged: Vec<SensitivityRecord> = (0..per_seed[0].len())
        .map(|i| {
            let col = per_seed.iter().map(|v| &v[i]);
            SensitivityRecord {
                ordinal: per_seed[0][i].ordinal,
                acc: col.clone().map(|r| r.acc).sum::<f64>() / k,
                drop: col.clone().map(|r| r.drop).sum::<f64>() / k,
                time_s: col.clone().map(|r| r.time_s).sum::<f64>() / k,
                params: per_seed[0][i].params,
                diverged: col.clone().any(|r| r.diverged),
            }
        })
        .collect();
    write_records(&merged, std::fs::File::create(out.path("profile.csv")?)?)?;
    Ok(diverged)
}

fn thin(points: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    let step = points.len().div_ceil(PLOT_LIMIT).max(1);
    points.into_iter().step_by(step).collect()
}

fn cmd_search(
    cfg: &RunConfig,
    out: &Out,
    profile: Option<&Path>,
    cloud: Option<&Path>,
    baseline_time: Option<f64>,
    n_buckets: Option<usize>,
) -> Result<bool> {
    let n_buckets = n_buckets.unwrap_or(cfg.search.n_buckets);
    if n_buckets == 0 {
        return Err(Error::Config("--n-buckets must be at least 1".into()));
    }
    let (estimates, base_time) = match (profile, cloud) {
        (Some(p), None) => {
            let (base, layers) = split_baseline(read_records(std::fs::File::open(p)?)?)?;
            let est = enumerate_combinations(&layers, &base, cfg.search.limit)?;
            write_estimates(&est, std::fs::File::create(out.path("cloud.csv")?)?)?;
            (est, baseline_time.unwrap_or(base.time_s))
        }
        (None, Some(c)) => (
            read_estimates(std::fs::File::open(c)?)?,
            baseline_time.ok_or_else(|| Error::Input("--cloud needs --baseline-time".into()))?,
        ),
        _ => return Err(Error::Input("search needs --profile or --cloud".into())),
    };
    let sel = pareto_select(&estimates, base_time, n_buckets)?;
    if let Some(w) = &sel.warning {
        eprintln!("warning: {w}");
    }
    let drop_time = |e: &CombinationEstimate| (e.est_time, e.est_drop);
    write_xy("time_s", "drop", &thin(estimates.iter().map(drop_time).collect()), std::fs::File::create(out.path("plot_drop_time.csv")?)?)?;
    write_xy(
        "params",
        "drop",
        &thin(estimates.iter().map(|e| (e.est_size, e.est_drop)).collect()),
        std::fs::File::create(out.path("plot_drop_size.csv")?)?,
    )?;
    write_xy("time_s", "drop", &sel.points.iter().map(drop_time).collect::<Vec<_>>(), std::fs::File::create(out.path("plot_selected.csv")?)?)?;
    write_estimates(&sel.points, std::fs::File::create(out.path("selection.csv")?)?)?;
    for p in &sel.points {
        println!("{:<40} time {:.4} drop {:.5}", layers_label(&p.subset()), p.est_time, p.est_drop);
    }
    Ok(false)
}

#[derive(Serialize)]
struct SelectedCsvRow {
    seed: u64,
    layers: String,
    bitmask: u64,
    final_acc: f64,
    total_seconds: f64,
    baseline_acc: f64,
    baseline_seconds: f64,
    skip_phase_params: usize,
    baseline_params: usize,
    transition_epoch: Option<usize>,
    diverged: bool,
}

impl SelectedCsvRow {
    fn new(seed: u64, s: SelectedSummary) -> Self {
        Self {
            seed,
            layers: s.layers,
            bitmask: s.bitmask,
            final_acc: s.final_acc,
            total_seconds: s.total_seconds,
            baseline_acc: s.baseline_acc,
            baseline_seconds: s.baseline_seconds,
            skip_phase_params: s.skip_phase_params,
            baseline_params: s.baseline_params,
            transition_epoch: s.transition_epoch,
            diverged: s.diverged,
        }
    }
}

fn cmd_run_selected(cfg: &RunConfig, out: &Out, selection: Option<&Path>) -> Result<bool> {
    let combos: Vec<Vec<usize>> = match selection {
        Some(p) => read_estimates(std::fs::File::open(p)?)?.iter().map(|e| e.subset()).collect(),
        None => cfg.search.combos.clone(),
    };
    if combos.is_empty() {
        return Err(Error::Input("no combinations: pass --selection or set search.combos".into()));
    }
    let n = cfg.arch().build(0)?.num_convs();
    for c in &combos {
        if subset_to_mask(c)? >> n != 0 {
            return Err(Error::Input(format!("combination {c:?} uses layers beyond {n}")));
        }
    }
    let data = cfg.load_data()?;
    let mode = cfg.basis_mode()?;
    let mut rows = Vec::new();
    let mut diverged = false;
    for &seed in &cfg.train.seeds {
        let runs = run_selected_combinations(&cfg.arch(), &cfg.train_config(seed), &combos, cfg.basis.skip, mode, &data, &cfg.run_options())?;
        out.log(&format!("seed_{seed}/baseline"), &runs.baseline)?;
        diverged |= runs.baseline.diverged;
        for (i, (log, s)) in runs.logs.iter().zip(runs.summary).enumerate() {
            out.log(&format!("seed_{seed}/combo_{}", i + 1), log)?;
            diverged |= s.diverged;
            rows.push(SelectedCsvRow::new(seed, s));
        }
    }
    out.csv("summary.csv", &rows)?;
    Ok(diverged)
}

fn cmd_light_heavy(cfg: &RunConfig, out: &Out) -> Result<bool> {
    let data = cfg.load_data()?;
    let template = cfg.skip_config()?;
    let mut summary = Vec::new();
    for &seed in &cfg.train.seeds {
        let lh = run_light_heavy(&cfg.arch(), &cfg.train_config(seed), &template, &data, &cfg.run_options())?;
        out.log(&format!("seed_{seed}/light"), &lh.light)?;
        out.log(&format!("seed_{seed}/heavy"), &lh.heavy)?;
        summary.push(RunSummary::new(seed, "light", &lh.light));
        summary.push(RunSummary::new(seed, "heavy", &lh.heavy));
    }
    out.csv("summary.csv", &summary)?;
    Ok(summary.iter().any(|s| s.diverged))
}
