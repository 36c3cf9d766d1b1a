//! Run orchestration for the `catmix` command-line tool.
//!
//! Every subcommand flows through [`run`]: it loads inputs, calls into
//! the analysis modules, and writes artifacts into an output directory.
//! Writes are atomic (temp file + rename) and a `manifest.json` listing
//! every artifact, the inputs, the seed, and a build identifier is
//! written last. Given the same config and inputs, artifacts are
//! byte-identical across runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::compare::{agreement, crosstab, CrossTab};
use crate::dataset::{collapse_patterns, describe, load_csv, CategoricalDataset, Schema};
use crate::diagnostics::{diagnose, DiagnosticsReport};
use crate::error::Error;
use crate::kmodes::{fit_kmodes, silhouette_width, sweep_k, KModesConfig, KModesModel, KSweepRow};
use crate::lca::{simulate, LcaFit, LcaParams, MultistartReport, StartPolicy};
use crate::rng;
use crate::selection::{enumerate_classes, EnumerationTable};
use crate::threestep::{fit_threestep, ThreeStepResult};
use crate::Result;

/// Human-readable output formats for tables. Machine artifacts (model
/// JSON, assignment CSVs, plot CSVs, manifest) are always written.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum OutputFormat {
    Text,
    Csv,
    Json,
}

/// What to run, with subcommand-specific parameters.
#[derive(Debug, Clone)]
pub enum Command {
    Describe,
    FitKmodes {
        k: usize,
        restarts: usize,
        max_iter: usize,
    },
    SweepK {
        k_min: usize,
        k_max: usize,
        restarts: usize,
        max_iter: usize,
    },
    FitLca {
        classes: usize,
        starts: StartPolicy,
        tol: f64,
        write_posteriors: bool,
    },
    Simulate {
        params_file: PathBuf,
        n: usize,
    },
    Enumerate {
        max_classes: usize,
        starts: StartPolicy,
        blrt: Option<usize>,
    },
    Diagnose {
        fit_file: PathBuf,
        bootstrap: usize,
        level: f64,
    },
    ThreeStep {
        fit_file: PathBuf,
        covariate: String,
        outcome: String,
    },
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Percentages conditioned on columns (labels of `b`) when true.
        column_pct: bool,
    },
    Replicate {
        k_max: usize,
        max_classes: usize,
        classes: usize,
        clusters: usize,
        starts: StartPolicy,
        blrt: Option<usize>,
        bootstrap: usize,
        covariate: Option<String>,
        outcome: Option<String>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Describe => "describe",
            Command::FitKmodes { .. } => "fit-kmodes",
            Command::SweepK { .. } => "sweep-k",
            Command::FitLca { .. } => "fit-lca",
            Command::Simulate { .. } => "simulate",
            Command::Enumerate { .. } => "enumerate",
            Command::Diagnose { .. } => "diagnose",
            Command::ThreeStep { .. } => "three-step",
            Command::Compare { .. } => "compare",
            Command::Replicate { .. } => "replicate",
        }
    }
}

/// A full run request.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub command: Command,
    /// Input data CSV; required by every subcommand except `simulate`
    /// and `compare`.
    pub input: Option<PathBuf>,
    pub schema: Schema,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub formats: Vec<OutputFormat>,
}

/// What a run produced.
#[derive(Debug, Clone)]
pub struct RunSummary {
    /// Artifact paths, relative to the output directory.
    pub files: Vec<String>,
    /// One-line notes for the console.
    pub notes: Vec<String>,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    build: String,
    seed: u64,
    inputs: Vec<String>,
    files: &'a [String],
    notes: &'a [String],
}

/// Collects artifacts and writes them atomically.
struct Emitter {
    out_dir: PathBuf,
    formats: Vec<OutputFormat>,
    files: Vec<String>,
    notes: Vec<String>,
}

impl Emitter {
    fn new(cfg: &RunConfig) -> Result<Self> {
        fs::create_dir_all(&cfg.out_dir)?;
        Ok(Self {
            out_dir: cfg.out_dir.clone(),
            formats: cfg.formats.clone(),
            files: Vec::new(),
            notes: Vec::new(),
        })
    }

    fn wants(&self, f: OutputFormat) -> bool {
        self.formats.contains(&f)
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out_dir.join(name);
        write_atomic(&path, bytes)?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut body = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidConfig {
            context: format!("serialization failed: {e}"),
        })?;
        body.push('\n');
        self.write(name, body.as_bytes())
    }

    fn note(&mut self, s: impl Into<String>) {
        self.notes.push(s.into());
    }

    fn finish(mut self, cfg: &RunConfig) -> Result<RunSummary> {
        let manifest = Manifest {
            command: cfg.command.name(),
            build: format!("catmix {}", env!("CARGO_PKG_VERSION")),
            seed: cfg.seed,
            inputs: manifest_inputs(cfg),
            files: &self.files,
            notes: &self.notes,
        };
        let mut body = serde_json::to_string_pretty(&manifest).map_err(|e| Error::InvalidConfig {
            context: format!("serialization failed: {e}"),
        })?;
        body.push('\n');
        write_atomic(&self.out_dir.join("manifest.json"), body.as_bytes())?;
        self.files.push("manifest.json".to_string());
        Ok(RunSummary {
            files: self.files,
            notes: self.notes,
        })
    }
}

fn manifest_inputs(cfg: &RunConfig) -> Vec<String> {
    let mut inputs = Vec::new();
    if let Some(p) = &cfg.input {
        inputs.push(p.display().to_string());
    }
    match &cfg.command {
        Command::Simulate { params_file, .. } => inputs.push(params_file.display().to_string()),
        Command::Diagnose { fit_file, .. } | Command::ThreeStep { fit_file, .. } => {
            inputs.push(fit_file.display().to_string())
        }
        Command::Compare { a, b, .. } => {
            inputs.push(a.display().to_string());
            inputs.push(b.display().to_string());
        }
        _ => {}
    }
    inputs
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Execute a run request end to end.
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    let mut em = Emitter::new(cfg)?;
    match &cfg.command {
        Command::Describe => {
            let ds = load_input(cfg, &mut em)?;
            run_describe(&ds, &mut em)?;
        }
        Command::FitKmodes {
            k,
            restarts,
            max_iter,
        } => {
            let ds = load_input(cfg, &mut em)?;
            run_fit_kmodes(&ds, *k, *restarts, *max_iter, cfg.seed, "", &mut em)?;
        }
        Command::SweepK {
            k_min,
            k_max,
            restarts,
            max_iter,
        } => {
            let ds = load_input(cfg, &mut em)?;
            run_sweep(&ds, *k_min, *k_max, *restarts, *max_iter, cfg.seed, &mut em)?;
        }
        Command::FitLca {
            classes,
            starts,
            tol,
            write_posteriors,
        } => {
            let ds = load_input(cfg, &mut em)?;
            run_fit_lca(&ds, *classes, *starts, *tol, cfg.seed, *write_posteriors, "", &mut em)?;
        }
        Command::Simulate { params_file, n } => {
            let params = read_params(params_file)?;
            run_simulate(&params, *n, cfg.seed, &mut em)?;
        }
        Command::Enumerate {
            max_classes,
            starts,
            blrt,
        } => {
            let ds = load_input(cfg, &mut em)?;
            run_enumerate(&ds, *max_classes, *starts, *blrt, cfg.seed, &mut em)?;
        }
        Command::Diagnose {
            fit_file,
            bootstrap,
            level,
        } => {
            let ds = load_input(cfg, &mut em)?;
            let fit = read_fit(fit_file)?;
            run_diagnose(&ds, &fit, *bootstrap, *level, cfg.seed, &mut em)?;
        }
        Command::ThreeStep {
            fit_file,
            covariate,
            outcome,
        } => {
            let ds = load_input(cfg, &mut em)?;
            let fit = read_fit(fit_file)?;
            run_threestep(&ds, &fit, covariate, outcome, &mut em)?;
        }
        Command::Compare { a, b, column_pct } => {
            run_compare(a, b, *column_pct, &mut em)?;
        }
        Command::Replicate {
            k_max,
            max_classes,
            classes,
            clusters,
            starts,
            blrt,
            bootstrap,
            covariate,
            outcome,
        } => {
            let ds = load_input(cfg, &mut em)?;
            run_replicate(
                &ds,
                ReplicateOpts {
                    k_max: *k_max,
                    max_classes: *max_classes,
                    classes: *classes,
                    clusters: *clusters,
                    starts: *starts,
                    blrt: *blrt,
                    bootstrap: *bootstrap,
                    covariate: covariate.clone(),
                    outcome: outcome.clone(),
                },
                cfg.seed,
                &mut em,
            )?;
        }
    }
    em.finish(cfg)
}

fn load_input(cfg: &RunConfig, em: &mut Emitter) -> Result<CategoricalDataset> {
    let path = cfg.input.as_ref().ok_or_else(|| Error::InvalidConfig {
        context: format!("`{}` needs an input file", cfg.command.name()),
    })?;
    let report = load_csv(path, &cfg.schema)?;
    if !report.dropped.is_empty() {
        em.note(format!(
            "dropped {} row(s) with missing cells: {}",
            report.dropped.len(),
            report
                .dropped
                .iter()
                .map(|d| format!("row {} ({})", d.row, d.column))
                .collect::<Vec<_>>()
                .join(", ")
        ));
    }
    em.note(format!(
        "loaded {} observations, {} indicators",
        report.dataset.n(),
        report.dataset.n_items()
    ));
    Ok(report.dataset)
}

fn read_params(path: &Path) -> Result<LcaParams> {
    let body = fs::read_to_string(path)?;
    serde_json::from_str(&body).map_err(|e| Error::InvalidConfig {
        context: format!("cannot parse parameter file {}: {e}", path.display()),
    })
}

fn read_fit(path: &Path) -> Result<LcaFit> {
    let body = fs::read_to_string(path)?;
    serde_json::from_str(&body).map_err(|e| Error::InvalidConfig {
        context: format!("cannot parse fit file {}: {e}", path.display()),
    })
}

// ---------------------------------------------------------------- describe

fn run_describe(ds: &CategoricalDataset, em: &mut Emitter) -> Result<()> {
    let summary = describe(ds);
    let patterns = collapse_patterns(ds);
    em.note(format!(
        "{} distinct response patterns; mean selections {:.2} (sd {:.2})",
        patterns.n_patterns(),
        summary.count_mean,
        summary.count_sd
    ));

    if em.wants(OutputFormat::Json) {
        // proportions keyed by indicator name
        let by_name: BTreeMap<&str, f64> = summary
            .endorsement
            .iter()
            .map(|(n, p)| (n.as_str(), *p))
            .collect();
        #[derive(Serialize)]
        struct DescribeJson<'a> {
            n: usize,
            n_items: usize,
            endorsement: BTreeMap<&'a str, f64>,
            count_histogram: &'a [usize],
            count_mean: f64,
            count_sd: f64,
            n_patterns: usize,
        }
        em.write_json(
            "describe.json",
            &DescribeJson {
                n: ds.n(),
                n_items: ds.n_items(),
                endorsement: by_name,
                count_histogram: &summary.count_histogram,
                count_mean: summary.count_mean,
                count_sd: summary.count_sd,
                n_patterns: patterns.n_patterns(),
            },
        )?;
    }
    if em.wants(OutputFormat::Csv) {
        let mut w = csv_writer();
        w.write_record(["indicator", "endorsement"]).map_err(Error::from)?;
        for (name, p) in &summary.endorsement {
            w.write_record([name.as_str(), &p.to_string()]).map_err(Error::from)?;
        }
        em.write("describe.csv", &csv_bytes(w)?)?;
    }
    if em.wants(OutputFormat::Text) {
        em.write("describe.txt", summary.to_string().as_bytes())?;
    }
    Ok(())
}

// ---------------------------------------------------------------- k-modes

#[derive(Serialize)]
struct KModesJson<'a> {
    k: usize,
    cost: usize,
    converged: bool,
    iterations: usize,
    restart: usize,
    sizes: Vec<usize>,
    centroids: &'a [Vec<u8>],
    silhouette: Option<f64>,
}

fn run_fit_kmodes(
    ds: &CategoricalDataset,
    k: usize,
    restarts: usize,
    max_iter: usize,
    seed: u64,
    prefix: &str,
    em: &mut Emitter,
) -> Result<KModesModel> {
    let cfg = KModesConfig {
        k,
        max_iter,
        n_restarts: restarts,
        seed,
    };
    let model = fit_kmodes(ds, &cfg)?;
    let silhouette = if k >= 2 {
        Some(silhouette_width(&model, ds)?.mean)
    } else {
        None
    };
    em.note(format!(
        "k-modes k={k}: cost {} over {} restarts{}",
        model.cost,
        restarts,
        silhouette
            .map(|s| format!(", mean silhouette {s:.4}"))
            .unwrap_or_default()
    ));

    em.write_json(
        &format!("{prefix}kmodes_model.json"),
        &KModesJson {
            k,
            cost: model.cost,
            converged: model.converged,
            iterations: model.iterations,
            restart: model.restart,
            sizes: model.cluster_sizes(),
            centroids: &model.centroids,
            silhouette,
        },
    )?;
    em.write(
        &format!("{prefix}kmodes_assign.csv"),
        &assignment_csv(&model.assignment)?,
    )?;
    let profile = emit_profile_plot(ProfileSource::KModes(&model), ds)?;
    em.write(&format!("{prefix}kmodes_profile.csv"), &profile_csv(&profile)?)?;
    Ok(model)
}

fn run_sweep(
    ds: &CategoricalDataset,
    k_min: usize,
    k_max: usize,
    restarts: usize,
    max_iter: usize,
    seed: u64,
    em: &mut Emitter,
) -> Result<()> {
    let table = sweep_k(ds, k_min, k_max, restarts, max_iter, seed)?;
    em.note(format!("swept k = {k_min}..={k_max}"));

    let mut w = csv_writer();
    w.write_record(["k", "cost", "silhouette"]).map_err(Error::from)?;
    for row in &table {
        w.write_record([
            row.k.to_string(),
            row.cost.to_string(),
            row.silhouette.map(|s| s.to_string()).unwrap_or_default(),
        ])
        .map_err(Error::from)?;
    }
    em.write("ksweep.csv", &csv_bytes(w)?)?;

    if em.wants(OutputFormat::Json) {
        em.write_json("ksweep.json", &table)?;
    }
    if em.wants(OutputFormat::Text) {
        em.write("ksweep.txt", render_sweep(&table).as_bytes())?;
    }
    Ok(())
}

fn render_sweep(table: &[KSweepRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "{:>4} {:>10} {:>12}", "k", "cost", "silhouette");
    for row in table {
        let sil = row
            .silhouette
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(s, "{:>4} {:>10} {:>12}", row.k, row.cost, sil);
    }
    s
}

// ---------------------------------------------------------------- LCA

#[derive(Serialize)]
struct LcaSummaryJson<'a> {
    classes: usize,
    loglik: f64,
    npar: usize,
    converged: bool,
    iterations: usize,
    pct_converged: f64,
    pct_replicated: f64,
    n_initial: usize,
    n_final: usize,
    pi: &'a [f64],
    rho: &'a [Vec<f64>],
    /// Share of the sample modally assigned to each class.
    modal_shares: Vec<f64>,
    /// Mean of each observation's largest posterior.
    mean_max_posterior: f64,
}

fn run_fit_lca(
    ds: &CategoricalDataset,
    classes: usize,
    starts: StartPolicy,
    tol: f64,
    seed: u64,
    write_posteriors: bool,
    prefix: &str,
    em: &mut Emitter,
) -> Result<MultistartReport> {
    let report = crate::lca::fit_multistart_tol(ds, classes, starts, seed, tol)?;
    let fit = &report.best_fit;
    em.note(format!(
        "LCA K={classes}: LL {:.4}, {}% converged, {}% replicated",
        fit.loglik, report.pct_converged, report.pct_replicated
    ));

    let labels = crate::diagnostics::modal_assignment(&fit.posteriors)?;
    let modal_shares = crate::diagnostics::mcap(&labels, classes)?;
    let mean_max_posterior = fit
        .posteriors
        .iter()
        .map(|row| row.iter().cloned().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / ds.n() as f64;

    em.write_json(&format!("{prefix}lca_fit.json"), fit)?;
    em.write_json(
        &format!("{prefix}lca_summary.json"),
        &LcaSummaryJson {
            classes,
            loglik: fit.loglik,
            npar: fit.npar,
            converged: fit.converged,
            iterations: fit.iterations,
            pct_converged: report.pct_converged,
            pct_replicated: report.pct_replicated,
            n_initial: report.n_initial,
            n_final: report.n_final,
            pi: fit.params.pi(),
            rho: fit.params.rho(),
            modal_shares,
            mean_max_posterior,
        },
    )?;
    em.write(&format!("{prefix}lca_assign.csv"), &assignment_csv(&labels)?)?;
    let profile = emit_profile_plot(ProfileSource::Lca(fit), ds)?;
    em.write(&format!("{prefix}lca_profile.csv"), &profile_csv(&profile)?)?;

    if write_posteriors {
        let mut w = csv_writer();
        let mut header = vec!["row".to_string()];
        header.extend((1..=classes).map(|c| format!("p{c}")));
        w.write_record(&header).map_err(Error::from)?;
        for (i, row) in fit.posteriors.iter().enumerate() {
            let mut rec = vec![(i + 1).to_string()];
            rec.extend(row.iter().map(|p| p.to_string()));
            w.write_record(&rec).map_err(Error::from)?;
        }
        em.write(&format!("{prefix}lca_posteriors.csv"), &csv_bytes(w)?)?;
    }
    Ok(report)
}

fn run_simulate(params: &LcaParams, n: usize, seed: u64, em: &mut Emitter) -> Result<()> {
    let (ds, labels) = simulate(params, n, seed)?;
    em.note(format!(
        "simulated {n} observations from a {}-class model",
        params.n_classes()
    ));

    let mut w = csv_writer();
    let header: Vec<String> = ds
        .indicator_names()
        .iter()
        .map(|name| format!("i:{name}"))
        .collect();
    w.write_record(&header).map_err(Error::from)?;
    for row in ds.rows() {
        w.write_record(row.iter().map(|v| v.to_string())).map_err(Error::from)?;
    }
    em.write("simulated.csv", &csv_bytes(w)?)?;
    em.write("simulated_labels.csv", &assignment_csv(&labels)?)?;
    Ok(())
}

// ---------------------------------------------------------------- enumerate

fn run_enumerate(
    ds: &CategoricalDataset,
    max_classes: usize,
    starts: StartPolicy,
    blrt: Option<usize>,
    seed: u64,
    em: &mut Emitter,
) -> Result<()> {
    let table = enumerate_classes(ds, max_classes, starts, blrt, seed)?;
    for (k, err) in &table.failures {
        em.note(format!("K={k} failed: {err}"));
    }
    if !table.ll_decrease_at.is_empty() {
        em.note(format!(
            "log-likelihood decreased at K = {:?}; likely local optima",
            table.ll_decrease_at
        ));
    }

    let mut w = csv_writer();
    w.write_record([
        "classes",
        "npar",
        "loglik",
        "pct_converged",
        "pct_replicated",
        "bic",
        "abic",
        "caic",
        "awe",
        "vlmr_p",
        "blrt_p",
        "smallest_class_n",
        "smallest_class_pct",
    ])
    .map_err(Error::from)?;
    for row in &table.rows {
        w.write_record([
            row.k.to_string(),
            row.npar.to_string(),
            row.loglik.to_string(),
            row.pct_converged.to_string(),
            row.pct_replicated.to_string(),
            row.bic.to_string(),
            row.abic.to_string(),
            row.caic.to_string(),
            row.awe.to_string(),
            "not computed".to_string(),
            row.blrt_p.map(|p| p.to_string()).unwrap_or_default(),
            row.smallest_class_n.to_string(),
            row.smallest_class_pct.to_string(),
        ])
        .map_err(Error::from)?;
    }
    em.write("enumeration.csv", &csv_bytes(w)?)?;

    // plot-ready IC curves
    let mut w = csv_writer();
    w.write_record(["classes", "bic", "abic", "caic", "awe"]).map_err(Error::from)?;
    for row in &table.rows {
        w.write_record([
            row.k.to_string(),
            row.bic.to_string(),
            row.abic.to_string(),
            row.caic.to_string(),
            row.awe.to_string(),
        ])
        .map_err(Error::from)?;
    }
    em.write("ic_curves.csv", &csv_bytes(w)?)?;

    if em.wants(OutputFormat::Json) {
        em.write_json("enumeration.json", &table)?;
    }
    if em.wants(OutputFormat::Text) {
        em.write("enumeration.txt", render_enumeration(&table).as_bytes())?;
    }
    Ok(())
}

fn render_enumeration(table: &EnumerationTable) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>7} {:>5} {:>12} {:>7} {:>7} {:>10} {:>10} {:>10} {:>10} {:>6} {:>8} {:>14}",
        "Classes", "npar", "LL", "%Conv", "%Repl", "BIC", "aBIC", "CAIC", "AWE", "VLMR", "BLRT", "Smallest n(%)"
    );
    for r in &table.rows {
        let blrt = r
            .blrt_p
            .map(|p| format!("{p:.3}"))
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:>7} {:>5} {:>12.2} {:>6.0}% {:>6.0}% {:>10.2} {:>10.2} {:>10.2} {:>10.2} {:>6} {:>8} {:>9} ({:.1}%)",
            r.k,
            r.npar,
            r.loglik,
            r.pct_converged,
            r.pct_replicated,
            r.bic,
            r.abic,
            r.caic,
            r.awe,
            "n/c",
            blrt,
            r.smallest_class_n,
            r.smallest_class_pct
        );
    }
    let _ = writeln!(
        s,
        "start policy: {} initial / {} final; VLMR is not computed by this tool",
        table.policy.n_initial, table.policy.n_final
    );
    s
}

// ---------------------------------------------------------------- diagnose

fn run_diagnose(
    ds: &CategoricalDataset,
    fit: &LcaFit,
    bootstrap: usize,
    level: f64,
    seed: u64,
    em: &mut Emitter,
) -> Result<DiagnosticsReport> {
    let report = diagnose(ds, fit, bootstrap, seed, level)?;
    em.note(format!("entropy {:.3}", report.entropy));
    if let Some(excluded) = report.ci_excluded {
        if excluded > 0 {
            em.note(format!("{excluded} bootstrap replicate(s) excluded"));
        }
    }

    if em.wants(OutputFormat::Json) {
        em.write_json("diagnostics.json", &report)?;
    }
    if em.wants(OutputFormat::Csv) {
        let mut w = csv_writer();
        w.write_record([
            "class",
            "proportion",
            "ci_lower",
            "ci_upper",
            "mcap",
            "avepp",
            "occ",
        ])
        .map_err(Error::from)?;
        for c in &report.classes {
            w.write_record([
                (c.class + 1).to_string(),
                c.proportion.to_string(),
                c.ci.map(|(lo, _)| lo.to_string()).unwrap_or_default(),
                c.ci.map(|(_, hi)| hi.to_string()).unwrap_or_default(),
                c.mcap.to_string(),
                c.avepp.map(|a| a.to_string()).unwrap_or_default(),
                c.occ
                    .map(|o| if o.is_infinite() { "Inf".into() } else { o.to_string() })
                    .unwrap_or_default(),
            ])
            .map_err(Error::from)?;
        }
        em.write("diagnostics.csv", &csv_bytes(w)?)?;
    }
    if em.wants(OutputFormat::Text) {
        em.write("diagnostics.txt", render_diagnostics(&report).as_bytes())?;
    }
    Ok(report)
}

fn render_diagnostics(report: &DiagnosticsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "entropy: {:.3}", report.entropy);
    let _ = writeln!(
        s,
        "{:>7} {:>12} {:>18} {:>7} {:>7} {:>8}",
        "class", "proportion", "95% CI", "mcaP", "AvePP", "OCC"
    );
    for c in &report.classes {
        let ci = c
            .ci
            .map(|(lo, hi)| format!("[{lo:.3}, {hi:.3}]"))
            .unwrap_or_else(|| "-".into());
        let avepp = c
            .avepp
            .map(|a| format!("{a:.3}"))
            .unwrap_or_else(|| "-".into());
        let occ = c
            .occ
            .map(|o| {
                if o.is_infinite() {
                    "Inf".to_string()
                } else {
                    format!("{o:.2}")
                }
            })
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            s,
            "{:>7} {:>12.3} {:>18} {:>7.3} {:>7} {:>8}",
            c.class + 1,
            c.proportion,
            ci,
            c.mcap,
            avepp,
            occ
        );
    }
    s
}

// ---------------------------------------------------------------- three-step

fn run_threestep(
    ds: &CategoricalDataset,
    fit: &LcaFit,
    covariate: &str,
    outcome: &str,
    em: &mut Emitter,
) -> Result<ThreeStepResult> {
    let res = fit_threestep(ds, fit, covariate, outcome)?;
    em.note(format!(
        "three-step: Wald chi2({}) = {:.3}, p = {:.4}",
        res.wald.df, res.wald.statistic, res.wald.p
    ));
    if res.hessian_warning {
        em.note("observed information not positive definite; standard errors unavailable");
    }
    if res.separation_warning {
        em.note("separation detected in the covariate logits");
    }

    em.write_json("threestep.json", &res)?;

    let mut w = csv_writer();
    w.write_record(["class", "intercept", "logit", "se", "p", "odds_ratio"]).map_err(Error::from)?;
    for e in &res.covariate_logits {
        w.write_record([
            (e.class + 1).to_string(),
            e.intercept.to_string(),
            e.logit.to_string(),
            e.se.map(|v| v.to_string()).unwrap_or_default(),
            e.p.map(|v| v.to_string()).unwrap_or_default(),
            e.odds_ratio.to_string(),
        ])
        .map_err(Error::from)?;
    }
    em.write("threestep_logits.csv", &csv_bytes(w)?)?;

    let mut w = csv_writer();
    w.write_record(["class", "mean_at_zero", "mean_at_covariate_mean"]).map_err(Error::from)?;
    for c in 0..res.class_means.len() {
        w.write_record([
            (c + 1).to_string(),
            res.class_means[c].to_string(),
            res.class_means_at_covariate_mean[c].to_string(),
        ])
        .map_err(Error::from)?;
    }
    em.write("threestep_means.csv", &csv_bytes(w)?)?;

    let mut w = csv_writer();
    w.write_record(["class_a", "class_b", "diff", "se", "p"]).map_err(Error::from)?;
    for d in &res.pairwise {
        w.write_record([
            (d.a + 1).to_string(),
            (d.b + 1).to_string(),
            d.diff.to_string(),
            d.se.to_string(),
            d.p.to_string(),
        ])
        .map_err(Error::from)?;
    }
    em.write("threestep_pairwise.csv", &csv_bytes(w)?)?;

    if em.wants(OutputFormat::Text) {
        em.write("threestep.txt", render_threestep(&res).as_bytes())?;
    }
    Ok(res)
}

fn render_threestep(res: &ThreeStepResult) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "covariate effects on class membership (reference class {}):",
        res.reference_class + 1
    );
    let _ = writeln!(s, "{:>7} {:>10} {:>10} {:>8} {:>8} {:>8}", "class", "logit", "OR", "SE", "p", "intcpt");
    for e in &res.covariate_logits {
        let _ = writeln!(
            s,
            "{:>7} {:>10.3} {:>10.3} {:>8} {:>8} {:>8.3}",
            e.class + 1,
            e.logit,
            e.odds_ratio,
            e.se.map(|v| format!("{v:.3}")).unwrap_or_else(|| "-".into()),
            e.p.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into()),
            e.intercept,
        );
    }
    let _ = writeln!(s);
    let _ = writeln!(
        s,
        "adjusted outcome means (direct effect {:.3}, residual variance {:.3}):",
        res.direct_effect.coef, res.residual_variance
    );
    for (c, (m0, mbar)) in res
        .class_means
        .iter()
        .zip(&res.class_means_at_covariate_mean)
        .enumerate()
    {
        let _ = writeln!(
            s,
            "  class {}: {:.3} at covariate 0, {:.3} at covariate mean {:.3}",
            c + 1,
            m0,
            mbar,
            res.covariate_mean
        );
    }
    let _ = writeln!(
        s,
        "omnibus Wald: chi2({}) = {:.3}, p = {:.4}",
        res.wald.df, res.wald.statistic, res.wald.p
    );
    let _ = writeln!(s, "pairwise mean differences:");
    for d in res.pairwise.iter().filter(|d| d.a < d.b) {
        let _ = writeln!(
            s,
            "  class {} - class {}: {:.3} (se {:.3}, p {:.4})",
            d.a + 1,
            d.b + 1,
            d.diff,
            d.se,
            d.p
        );
    }
    s
}

// ---------------------------------------------------------------- compare

fn run_compare(a: &Path, b: &Path, column_pct: bool, em: &mut Emitter) -> Result<CrossTab> {
    let labels_a = read_labels(a)?;
    let labels_b = read_labels(b)?;
    let tab = if column_pct {
        crosstab(&labels_a, &labels_b)?
    } else {
        crosstab(&labels_b, &labels_a)?.transposed()
    };
    let agr = agreement(&tab)?;
    em.note(format!(
        "overall best-match agreement {:.1}%",
        100.0 * agr.overall
    ));

    if em.wants(OutputFormat::Json) {
        #[derive(Serialize)]
        struct CompareJson<'a> {
            crosstab: &'a CrossTab,
            agreement: &'a crate::compare::Agreement,
        }
        em.write_json(
            "crosstab.json",
            &CompareJson {
                crosstab: &tab,
                agreement: &agr,
            },
        )?;
    }
    if em.wants(OutputFormat::Csv) {
        let mut w = csv_writer();
        let mut header = vec!["a\\b".to_string()];
        header.extend(tab.col_labels.iter().cloned());
        header.push("total".into());
        w.write_record(&header).map_err(Error::from)?;
        for (r, row) in tab.counts.iter().enumerate() {
            let mut rec = vec![tab.row_labels[r].clone()];
            rec.extend(row.iter().map(|v| v.to_string()));
            rec.push(tab.row_totals[r].to_string());
            w.write_record(&rec).map_err(Error::from)?;
        }
        let mut rec = vec!["total".to_string()];
        rec.extend(tab.col_totals.iter().map(|v| v.to_string()));
        rec.push(tab.n.to_string());
        w.write_record(&rec).map_err(Error::from)?;
        em.write("crosstab.csv", &csv_bytes(w)?)?;
    }
    if em.wants(OutputFormat::Text) {
        em.write("crosstab.txt", render_crosstab(&tab).as_bytes())?;
    }
    Ok(tab)
}

fn render_crosstab(tab: &CrossTab) -> String {
    let mut s = String::new();
    let _ = write!(s, "{:>8}", "");
    for c in &tab.col_labels {
        let _ = write!(s, " {:>16}", format!("b={c}"));
    }
    let _ = writeln!(s, " {:>8}", "total");
    for (r, row) in tab.counts.iter().enumerate() {
        let _ = write!(s, "{:>8}", format!("a={}", tab.row_labels[r]));
        for (c, &v) in row.iter().enumerate() {
            let _ = write!(s, " {:>16}", format!("{v} ({:.1}%)", tab.col_pct[r][c]));
        }
        let _ = writeln!(s, " {:>8}", tab.row_totals[r]);
    }
    let _ = write!(s, "{:>8}", "total");
    for &t in &tab.col_totals {
        let _ = write!(s, " {:>16}", t);
    }
    let _ = writeln!(s, " {:>8}", tab.n);
    s
}

/// Read a two-column assignment CSV (`row,label`); labels are integers.
fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut raw = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(Error::from)?;
        let cell = record
            .get(record.len().saturating_sub(1))
            .unwrap_or("")
            .trim()
            .to_string();
        let v: i64 = cell.parse().map_err(|_| Error::InvalidNumber {
            column: "label".into(),
            row: i + 1,
            value: cell,
        })?;
        raw.push(v);
    }
    if raw.is_empty() {
        return Err(Error::EmptyFile {
            path: path.display().to_string(),
        });
    }
    // densify to 0-based in sorted label order
    let mut distinct: Vec<i64> = raw.clone();
    distinct.sort_unstable();
    distinct.dedup();
    Ok(raw
        .iter()
        .map(|v| distinct.binary_search(v).expect("value present") )
        .collect())
}

// ---------------------------------------------------------------- replicate

struct ReplicateOpts {
    k_max: usize,
    max_classes: usize,
    classes: usize,
    clusters: usize,
    starts: StartPolicy,
    blrt: Option<usize>,
    bootstrap: usize,
    covariate: Option<String>,
    outcome: Option<String>,
}

/// The full pipeline: describe, k-sweep, k-modes fits, class
/// enumeration, diagnostics for the chosen class count, the three-step
/// model (when auxiliary columns exist), and the cluster-vs-class
/// cross-tabulation.
fn run_replicate(
    ds: &CategoricalDataset,
    opts: ReplicateOpts,
    seed: u64,
    em: &mut Emitter,
) -> Result<()> {
    run_describe(ds, em)?;
    run_sweep(ds, 1, opts.k_max.min(ds.n()), 50, 300, rng::derive_seed(seed, 1), em)?;

    let mut kmodes_assign: Option<Vec<usize>> = None;
    for k in [opts.clusters, opts.clusters + 1] {
        let prefix = format!("k{k}_");
        let model = run_fit_kmodes(ds, k, 50, 300, rng::derive_seed(seed, 2 + k as u64), &prefix, em)?;
        if k == opts.clusters {
            kmodes_assign = Some(model.assignment.clone());
        }
    }

    run_enumerate(
        ds,
        opts.max_classes,
        opts.starts,
        opts.blrt,
        rng::derive_seed(seed, 10),
        em,
    )?;

    let lca_report = run_fit_lca(
        ds,
        opts.classes,
        opts.starts,
        1e-6,
        rng::derive_seed(seed, 11),
        false,
        "chosen_",
        em,
    )?;
    let fit = &lca_report.best_fit;

    run_diagnose(ds, fit, opts.bootstrap, 0.95, rng::derive_seed(seed, 12), em)?;

    let covariate = opts
        .covariate
        .or_else(|| ds.covariate_names().first().map(|s| s.to_string()));
    let outcome = opts
        .outcome
        .or_else(|| ds.outcome_names().first().map(|s| s.to_string()));
    match (covariate, outcome) {
        (Some(cov), Some(out)) => {
            run_threestep(ds, fit, &cov, &out, em)?;
        }
        _ => em.note("three-step skipped: dataset has no covariate/outcome columns"),
    }

    // cluster vs class cross-tabulation
    let lca_labels = crate::diagnostics::modal_assignment(&fit.posteriors)?;
    if let Some(km) = kmodes_assign {
        let tab = crosstab(&km, &lca_labels)?;
        let agr = agreement(&tab)?;
        em.note(format!(
            "k-modes vs LCA best-match agreement {:.1}%",
            100.0 * agr.overall
        ));
        if em.wants(OutputFormat::Json) {
            em.write_json("crosstab.json", &tab)?;
        }
        if em.wants(OutputFormat::Csv) {
            let mut w = csv_writer();
            let mut header = vec!["cluster\\class".to_string()];
            header.extend(tab.col_labels.iter().cloned());
            w.write_record(&header).map_err(Error::from)?;
            for (r, row) in tab.counts.iter().enumerate() {
                let mut rec = vec![tab.row_labels[r].clone()];
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(Error::from)?;
            }
            em.write("crosstab.csv", &csv_bytes(w)?)?;
        }
        if em.wants(OutputFormat::Text) {
            em.write("crosstab.txt", render_crosstab(&tab).as_bytes())?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- profiles

/// What to plot: endorsement curves of a fitted model.
pub enum ProfileSource<'a> {
    Lca(&'a LcaFit),
    KModes(&'a KModesModel),
}

/// Plot-ready per-class endorsement curves.
#[derive(Debug, Clone, Serialize)]
pub struct ProfilePlot {
    pub items: Vec<String>,
    pub series: Vec<ProfileSeries>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ProfileSeries {
    /// Legend label including the class share, e.g. `Class 1 (27.3%)`.
    pub label: String,
    pub share_pct: f64,
    /// Endorsement proportion per item, in item order.
    pub values: Vec<f64>,
}

/// Per-class endorsement curves: model item probabilities ρ̂ for a latent
/// class fit, within-cluster item means for a k-modes model. Legend
/// percentages are the class proportions (LCA) or cluster shares
/// (k-modes).
pub fn emit_profile_plot(source: ProfileSource<'_>, ds: &CategoricalDataset) -> Result<ProfilePlot> {
    let items: Vec<String> = ds.indicator_names().to_vec();
    let series = match source {
        ProfileSource::Lca(fit) => {
            if fit.params.n_items() != ds.n_items() {
                return Err(Error::DimensionMismatch {
                    context: format!(
                        "fit covers {} items, dataset has {}",
                        fit.params.n_items(),
                        ds.n_items()
                    ),
                });
            }
            fit.params
                .rho()
                .iter()
                .enumerate()
                .map(|(k, rho)| {
                    let share = 100.0 * fit.params.pi()[k];
                    ProfileSeries {
                        label: format!("Class {} ({share:.1}%)", k + 1),
                        share_pct: share,
                        values: rho.clone(),
                    }
                })
                .collect()
        }
        ProfileSource::KModes(model) => {
            if model.assignment.len() != ds.n() {
                return Err(Error::DimensionMismatch {
                    context: format!(
                        "model assigns {} rows, dataset has {}",
                        model.assignment.len(),
                        ds.n()
                    ),
                });
            }
            let k = model.k();
            let j = ds.n_items();
            let mut ones = vec![vec![0usize; j]; k];
            let mut sizes = vec![0usize; k];
            for (row, &c) in ds.rows().iter().zip(&model.assignment) {
                sizes[c] += 1;
                for (jj, &v) in row.iter().enumerate() {
                    ones[c][jj] += v as usize;
                }
            }
            (0..k)
                .map(|c| {
                    let share = 100.0 * sizes[c] as f64 / ds.n() as f64;
                    let values = (0..j)
                        .map(|jj| {
                            if sizes[c] > 0 {
                                ones[c][jj] as f64 / sizes[c] as f64
                            } else {
                                0.0
                            }
                        })
                        .collect();
                    ProfileSeries {
                        label: format!("Cluster {} ({share:.1}%)", c + 1),
                        share_pct: share,
                        values,
                    }
                })
                .collect()
        }
    };
    Ok(ProfilePlot { items, series })
}

// ---------------------------------------------------------------- helpers

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().from_writer(Vec::new())
}

fn csv_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::InvalidConfig {
        context: format!("csv buffer: {e}"),
    })
}

/// `row,label` CSV with 1-based rows and labels.
fn assignment_csv(labels: &[usize]) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record(["row", "label"]).map_err(Error::from)?;
    for (i, &c) in labels.iter().enumerate() {
        w.write_record([(i + 1).to_string(), (c + 1).to_string()]).map_err(Error::from)?;
    }
    csv_bytes(w)
}

fn profile_csv(plot: &ProfilePlot) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    let mut header = vec!["label".to_string(), "share_pct".to_string()];
    header.extend(plot.items.iter().cloned());
    w.write_record(&header).map_err(Error::from)?;
    for s in &plot.series {
        let mut rec = vec![s.label.clone(), s.share_pct.to_string()];
        rec.extend(s.values.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(Error::from)?;
    }
    csv_bytes(w)
}
