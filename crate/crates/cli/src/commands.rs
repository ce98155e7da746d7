use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use featclip::analysis::{
    entropy_table, estimate_sigma, feature_histogram, format_entropy_table, overconfidence_counts,
    select_groups, unit_mean_profile, UnitSubset,
};
use featclip::calibrators::{self, fit_feature_clip, fit_method, sweep_clip, sweep_to_csv};
use featclip::datastore::{load_dataset_verbose, LoadReport, LOGIT_DISCREPANCY_WARN};
use featclip::synthetic::ClipFixture;
use featclip::theory::{self, Model};
use featclip::{apply, save_dataset, split, CalibratorSpec, Dataset, Error, Method, MetricReport, SplitSpec};
use serde::Serialize;
use serde_json::{json, Value};

use crate::output::OutDir;
use crate::{Cli, CliError, Command, Global, Part};

type CmdResult = Result<(), CliError>;

/// Everything that determines a run's outputs.
#[derive(Debug, Serialize)]
struct RunConfig {
    data_dir: Option<String>,
    split: Option<SplitSpec>,
    bins: usize,
    /// Calibrator spec, or the fit directive for `fit`.
    calibrator: Option<Value>,
    seed: u64,
    out_dir: String,
    args: Value,
}

impl RunConfig {
    fn new(g: &Global, split: Option<SplitSpec>, args: Value) -> Self {
        Self {
            data_dir: g.data.as_ref().map(|p| p.display().to_string()),
            split,
            bins: g.bins,
            calibrator: None,
            seed: g.seed,
            out_dir: g.out.display().to_string(),
            args,
        }
    }
}

pub fn run(cli: &Cli) -> CmdResult {
    let g = &cli.global;
    match &cli.command {
        Command::Ingest { synthetic, n, checksums } => ingest(g, *synthetic, *n, *checksums),
        Command::Fit { method } => fit(g, method),
        Command::Apply { calibrator, on } => apply_cmd(g, calibrator, *on),
        Command::Eval { calibrator, on } => eval(g, calibrator.as_deref(), *on),
        Command::Sweep { grid, on } => sweep(g, grid.as_deref(), *on),
        Command::Analyze { tau, c, hist_bins, units, abs, include_zeros, thresholds, on } => analyze(
            g,
            &AnalyzeArgs {
                tau: *tau,
                c: *c,
                hist_bins: *hist_bins,
                units: *units,
                abs: *abs,
                include_zeros: *include_zeros,
                thresholds: thresholds.clone(),
                on: *on,
            },
        ),
        Command::Theory { model, c, sigma_grid } => theory_cmd(g, model, c, sigma_grid),
    }
}

fn load(g: &Global) -> Result<LoadReport, CliError> {
    let dir = g
        .data
        .as_ref()
        .ok_or_else(|| CliError::Usage("this command needs --data <DIR>".into()))?;
    let report = load_dataset_verbose(dir)?;
    if let Some(gap) = report.dataset.logit_discrepancy() {
        if gap > LOGIT_DISCREPANCY_WARN {
            eprintln!("featclip: warning: stored logits differ from W x + b by up to {gap:.3e}");
        }
    }
    Ok(report)
}

fn split_spec(g: &Global) -> Result<SplitSpec, CliError> {
    match &g.split_file {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.clone(), source })?;
            Ok(serde_json::from_str(&text).map_err(Error::from)?)
        }
        None => Ok(SplitSpec::Fraction { val_fraction: g.val_fraction, seed: g.seed }),
    }
}

/// Row indices for `part`, plus the split spec that produced them.
fn rows(g: &Global, ds: &Dataset, part: Part) -> Result<(Vec<usize>, Option<SplitSpec>), CliError> {
    if part == Part::All {
        return Ok((ds.all_indices(), None));
    }
    let spec = split_spec(g)?;
    let s = split(ds.n(), &spec)?;
    Ok((if part == Part::Val { s.val } else { s.test }, Some(spec)))
}

fn read_calibrator(path: &Path) -> Result<CalibratorSpec, CliError> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io { path: path.to_path_buf(), source })?;
    let spec: CalibratorSpec = serde_json::from_str(&text).map_err(Error::from)?;
    spec.validate()?;
    Ok(spec)
}

/// `lo:hi:n` inclusive and evenly spaced, or a comma list.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, CliError> {
    let bad = |why: &str| CliError::Usage(format!("grid {s:?}: {why}"));
    let num = |t: &str| t.trim().parse::<f64>().map_err(|_| bad("not a number"));
    let parts: Vec<&str> = s.split(':').collect();
    let grid = match parts.as_slice() {
        [lo, hi, n] => {
            let (lo, hi) = (num(lo)?, num(hi)?);
            let n: usize = n.trim().parse().map_err(|_| bad("point count is not an integer"))?;
            if n == 0 || !(hi >= lo) || (n == 1 && hi != lo) {
                return Err(bad("need lo <= hi and n >= 1 (n = 1 only when lo = hi)"));
            }
            if n == 1 {
                vec![lo]
            } else {
                (0..n).map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect()
            }
        }
        [list] => list.split(',').map(num).collect::<Result<_, _>>()?,
        _ => return Err(bad("expected lo:hi:n or a comma list")),
    };
    if grid.iter().any(|v: &f64| !v.is_finite()) {
        return Err(bad("non-finite value"));
    }
    Ok(grid)
}

fn dataset_summary(report: &LoadReport) -> Value {
    let ds = &report.dataset;
    let mut per_class = vec![0usize; ds.k()];
    for &y in ds.labels() {
        per_class[y as usize] += 1;
    }
    json!({
        "n": ds.n(),
        "d": ds.d(),
        "k": ds.k(),
        "has_features": ds.features().is_some(),
        "has_head": ds.has_head(),
        "has_logits": ds.stored_logits().is_some(),
        "checksums_verified": report.checksums_verified,
        "logit_discrepancy": ds.logit_discrepancy(),
        "logit_discrepancy_warning": ds.logit_discrepancy().is_some_and(|v| v > LOGIT_DISCREPANCY_WARN),
        "label_counts": per_class,
        "source": ds.source(),
    })
}

fn ingest(g: &Global, synthetic: bool, n: Option<usize>, checksums: bool) -> CmdResult {
    let mut out = OutDir::create(&g.out)?;
    let mut config = RunConfig::new(g, None, json!({ "synthetic": synthetic, "n": n, "checksums": checksums }));
    let report = if synthetic {
        let mut fixture = ClipFixture { seed: g.seed, ..Default::default() };
        if let Some(n) = n {
            fixture.n = n;
        }
        let ds = fixture.generate()?;
        save_dataset(&ds, &out.path("dataset"), true)?;
        out.record_tree("dataset")?;
        load_dataset_verbose(&out.path("dataset"))?
    } else {
        let report = load(g)?;
        if checksums {
            save_dataset(&report.dataset, &out.path("dataset"), true)?;
            out.record_tree("dataset")?;
        }
        report
    };
    if synthetic {
        config.data_dir = Some(out.path("dataset").display().to_string());
    }
    let summary = dataset_summary(&report);
    out.write_json("summary.json", &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary).map_err(Error::from)?);
    out.finish("ingest", &config)?;
    Ok(())
}

fn fit(g: &Global, method: &str) -> CmdResult {
    let method: Method = method.parse()?;
    let report = load(g)?;
    let ds = &report.dataset;
    let (val, spec) = rows(g, ds, Part::Val)?;
    let (calibrator, reports) = fit_method(ds, &val, method)?;

    let mut out = OutDir::create(&g.out)?;
    out.write_json("calibrator.json", &calibrator)?;
    out.write_json("fit_report.json", &reports)?;
    for r in &reports {
        println!(
            "{:<10} val NLL {:.6} -> {:.6}  {}{}",
            r.method,
            r.val_nll_before,
            r.val_nll_after,
            serde_json::to_string(&r.stage).map_err(Error::from)?,
            r.note.as_deref().map(|n| format!("  ({n})")).unwrap_or_default()
        );
    }
    let mut config = RunConfig::new(g, spec, json!({ "method": method_name(method) }));
    config.calibrator = Some(json!({ "fit": method_name(method) }));
    out.finish("fit", &config)?;
    Ok(())
}

fn method_name(m: Method) -> &'static str {
    match m {
        Method::Fc => "fc",
        Method::Ts => "ts",
        Method::Ets => "ets",
        Method::Cts => "cts",
        Method::LogitClip => "logit_clip",
        Method::FcTs => "fc+ts",
        Method::FcEts => "fc+ets",
        Method::FcCts => "fc+cts",
    }
}

fn apply_cmd(g: &Global, calibrator: &Path, on: Part) -> CmdResult {
    let spec = read_calibrator(calibrator)?;
    let report = load(g)?;
    let ds = &report.dataset;
    let (idx, split) = rows(g, ds, on)?;
    let probs = apply(&spec, ds, &idx)?;

    let mut csv = String::from("index,label");
    for j in 0..ds.k() {
        let _ = write!(csv, ",p_{j}");
    }
    csv.push('\n');
    for (r, &i) in idx.iter().enumerate() {
        let _ = write!(csv, "{i},{}", ds.labels()[i]);
        for p in probs.row(r) {
            let _ = write!(csv, ",{p}");
        }
        csv.push('\n');
    }
    let mut out = OutDir::create(&g.out)?;
    out.write("probs.csv", csv)?;
    let mut config = RunConfig::new(g, split, json!({ "on": on, "calibrator_file": calibrator.display().to_string() }));
    config.calibrator = Some(serde_json::to_value(&spec).map_err(Error::from)?);
    out.finish("apply", &config)?;
    println!("wrote {} rows to {}", idx.len(), g.out.join("probs.csv").display());
    Ok(())
}

/// Human-readable metric summary; the only place percentages appear.
fn format_report(title: &str, r: &MetricReport) -> String {
    let pct = |v: f64| format!("{:.2}%", 100.0 * v);
    let mut s = format!("{title} (n = {}, {} bins)\n", r.n, r.n_bins);
    for (name, v) in [
        ("ECE", pct(r.ece)),
        ("adaptive ECE", pct(r.adaptive_ece)),
        ("classwise ECE", pct(r.classwise_ece)),
        ("accuracy", pct(r.accuracy)),
        ("NLL", format!("{:.4}", r.nll)),
        ("Brier", format!("{:.4}", r.brier)),
        ("mean entropy", format!("{:.4}", r.mean_entropy)),
    ] {
        let _ = writeln!(s, "  {name:<14} {v}");
    }
    if r.nll_floored > 0 {
        let _ = writeln!(s, "  ({} true-class probabilities floored for NLL)", r.nll_floored);
    }
    s
}

fn eval(g: &Global, calibrator: Option<&Path>, on: Part) -> CmdResult {
    let spec = match calibrator {
        Some(p) => read_calibrator(p)?,
        None => CalibratorSpec::identity(),
    };
    let report = load(g)?;
    let ds = &report.dataset;
    let (idx, split) = rows(g, ds, on)?;
    let probs = apply(&spec, ds, &idx)?;
    let metrics = MetricReport::evaluate(&probs, &ds.labels_at(&idx), g.bins)?;

    let mut out = OutDir::create(&g.out)?;
    out.write_json("metrics.json", &metrics)?;
    out.write("reliability.csv", metrics.bins.to_csv())?;
    out.write("reliability_adaptive.csv", metrics.adaptive_bins.to_csv())?;
    let title = if calibrator.is_some() { "calibrated" } else { "vanilla" };
    print!("{}", format_report(title, &metrics));
    let mut config = RunConfig::new(
        g,
        split,
        json!({ "on": on, "calibrator_file": calibrator.map(|p| p.display().to_string()) }),
    );
    config.calibrator = Some(serde_json::to_value(&spec).map_err(Error::from)?);
    out.finish("eval", &config)?;
    Ok(())
}

const DEFAULT_SWEEP_POINTS: usize = 40;

fn sweep(g: &Global, grid: Option<&str>, on: Part) -> CmdResult {
    let report = load(g)?;
    let ds = &report.dataset;
    let (_, x) = ds.head_and_features("the clip sweep needs the classifier head")?;
    let (idx, split) = rows(g, ds, on)?;
    let grid = match grid {
        Some(s) => parse_grid(s)?,
        None => {
            let max = x.select_rows(&idx).max_abs();
            if !(max > 0.0) {
                return Err(Error::Degenerate("all features are zero; no default clip grid".into()).into());
            }
            (1..=DEFAULT_SWEEP_POINTS).map(|i| max * i as f64 / DEFAULT_SWEEP_POINTS as f64).collect()
        }
    };
    let table = sweep_clip(ds, &idx, &grid, g.bins)?;

    let mut out = OutDir::create(&g.out)?;
    out.write("sweep.csv", sweep_to_csv(&table))?;
    println!("{:>12} {:>9} {:>9} {:>9} {:>9}", "c", "ECE", "AdaECE", "acc", "NLL");
    for r in &table {
        println!(
            "{:>12.6} {:>8.2}% {:>8.2}% {:>8.2}% {:>9.4}",
            r.c,
            100.0 * r.ece,
            100.0 * r.adaptive_ece,
            100.0 * r.accuracy,
            r.nll
        );
    }
    let config = RunConfig::new(g, split, json!({ "on": on, "grid": grid }));
    out.finish("sweep", &config)?;
    Ok(())
}

struct AnalyzeArgs {
    tau: f64,
    c: Option<f64>,
    hist_bins: usize,
    units: Option<usize>,
    abs: bool,
    include_zeros: bool,
    thresholds: Vec<f64>,
    on: Part,
}

fn analyze(g: &Global, a: &AnalyzeArgs) -> CmdResult {
    let report = load(g)?;
    let ds = &report.dataset;
    let (_, x) = ds.head_and_features("group analysis needs features and the classifier head")?;
    let (idx, split) = rows(g, ds, a.on)?;
    let labels = ds.labels_at(&idx);

    let (c, c_source) = match a.c {
        Some(c) => (c, "given"),
        None => {
            let val = featclip::split(ds.n(), &split_spec(g)?)?.val;
            (fit_feature_clip(ds, &val)?.0, "fitted on validation split")
        }
    };
    let clip = CalibratorSpec::new(vec![calibrators::Stage::FeatureClip { c }]);

    let vanilla = apply(&CalibratorSpec::identity(), ds, &idx)?;
    let clipped = apply(&clip, ds, &idx)?;
    let selection = select_groups(&vanilla, &labels, a.tau)?.remap(&idx);

    let mut out = OutDir::create(&g.out)?;

    let mut over = String::from("calibrator,threshold,correct,wrong\n");
    for (name, probs) in [("vanilla", &vanilla), ("feature_clip", &clipped)] {
        for r in overconfidence_counts(probs, &labels, &a.thresholds)? {
            let _ = writeln!(over, "{name},{},{},{}", r.threshold, r.correct, r.wrong);
        }
    }
    out.write("overconfidence.csv", over)?;

    let mut sigma_hat = BTreeMap::new();
    for (name, group) in [("hce", &selection.hce_idx), ("lce", &selection.lce_idx)] {
        if !group.is_empty() {
            sigma_hat.insert(name, estimate_sigma(x, group, a.include_zeros)?);
        }
    }

    let both = !selection.hce_empty() && !selection.lce_empty();
    let table = if both { Some(entropy_table(ds, &selection, c)?) } else { None };
    if both {
        let subset = match a.units {
            Some(size) => UnitSubset::Random { size, seed: g.seed },
            None => UnitSubset::All,
        };
        out.write("unit_means.csv", unit_mean_profile(x, &selection, subset, a.abs)?.to_csv())?;
        out.write("histogram.csv", feature_histogram(x, &selection, a.hist_bins, a.abs)?.to_csv())?;
    }

    let groups = json!({
        "tau": a.tau,
        "n_rows": idx.len(),
        "n_hce": selection.hce_idx.len(),
        "n_lce": selection.lce_idx.len(),
        "hce_empty": selection.hce_empty(),
        "lce_empty": selection.lce_empty(),
        "c": c,
        "c_source": c_source,
        "sigma_hat": sigma_hat,
        "entropy_table": table,
    });
    out.write_json("groups.json", &groups)?;

    println!(
        "tau = {}: {} high-confidence wrong (HCE), {} high-confidence correct (LCE) of {} rows; c = {c} ({c_source})",
        a.tau,
        selection.hce_idx.len(),
        selection.lce_idx.len(),
        idx.len()
    );
    match &table {
        Some(t) => print!("{}", format_entropy_table(t)),
        None => println!(
            "{} group is empty; profiles, histogram and entropy table skipped",
            if selection.hce_empty() { "HCE" } else { "LCE" }
        ),
    }

    let config = RunConfig::new(
        g,
        split,
        json!({
            "on": a.on, "tau": a.tau, "c": a.c, "hist_bins": a.hist_bins, "units": a.units,
            "abs": a.abs, "include_zeros": a.include_zeros, "thresholds": a.thresholds,
        }),
    );
    out.finish("analyze", &config)?;
    Ok(())
}

fn theory_cmd(g: &Global, model: &str, c_set: &[f64], sigma_grid: &str) -> CmdResult {
    let model: Model = model.parse()?;
    let sigmas = parse_grid(sigma_grid)?;
    let curves = theory::emit_theory_curves(model, c_set, &sigmas)?;
    let comparison = theory::comparison_report(model, c_set, &sigmas)?;

    let (lo, hi) = sigmas.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &s| (l.min(s), h.max(s)));
    let mut crossings = Vec::with_capacity(c_set.len());
    for &c in c_set {
        let sigma = if hi > lo {
            theory::derivative_sign_change(model, c, lo, hi, 4 * sigmas.len())?
        } else {
            None
        };
        crossings.push(json!({ "c": c, "sigma": sigma }));
    }

    let mut out = OutDir::create(&g.out)?;
    out.write("theory_curves.csv", theory::curves_to_csv(&curves))?;
    out.write_json(
        "theory_comparison.json",
        &json!({ "report": comparison, "derivative_sign_change": crossings }),
    )?;

    println!(
        "{model}: {} points; closed-form vs finite-difference derivative max |diff| {:.3e}, max rel {:.3e}, {} sign disagreements",
        comparison.points.len(),
        comparison.max_abs_diff,
        comparison.max_rel_diff,
        comparison.sign_disagreements
    );
    for x in &crossings {
        match x["sigma"].as_f64() {
            Some(s) => println!("  c = {}: delta_h stops increasing at sigma = {s:.6}", x["c"]),
            None => println!("  c = {}: delta_h increasing over the whole grid", x["c"]),
        }
    }
    let config = RunConfig::new(g, None, json!({ "model": model, "c": c_set, "sigma_grid": sigma_grid }));
    out.finish("theory", &config)?;
    Ok(())
}
