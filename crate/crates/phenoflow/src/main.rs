//! Stage-by-stage command line front end for the phenotype pipeline.
//!
//! Every stage reads its predecessor's files from the work directory and
//! writes its own there, so any stage can be rerun in isolation. Progress
//! and diagnostics go to standard error; machine output goes to files only.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::DMatrix;

use phenoflow::config::PipelineConfig;
use phenoflow::cross_section::{
    build_matrix, draw_sample_times, fit_cohort_curves, read_curve_file, read_matrix,
    write_curve_file, write_matrix, VariableCatalog,
};
use phenoflow::error::{Error, Result};
use phenoflow::evaluation::{run_reproduction, write_importances, write_loadings_report};
use phenoflow::forest::{
    auc, build_hcc_cohort, compute_record_meta, oob_scores, predict_proba,
    read_record_meta_file, split_by_record, train_forest, write_record_meta_file,
    LabeledInstances,
};
use phenoflow::ica::{
    fit_cross_section, read_expressions, read_model, write_expressions, write_model,
};
use phenoflow::ingest::{
    parse_event_file, parse_value_file, write_event_file, write_value_file, ParseMode,
    ParseReport,
};
use phenoflow::plot::emit_phenotype_plot;
use phenoflow::synth::{
    default_phenotypes, diagnosis_by_record, generate_cohort, write_ground_truth_file,
};

const EVENTS_FILE: &str = "events.tsv";
const VALUES_FILE: &str = "values.tsv";
const RECORDS_FILE: &str = "records.tsv";
const TRUTH_FILE: &str = "truth.txt";
const CURVES_FILE: &str = "curves.bin";
const MATRIX_FILE: &str = "matrix.bin";
const MODEL_FILE: &str = "model.bin";
const EXPRESSIONS_FILE: &str = "expressions.bin";
const REPORT_FILE: &str = "report.tsv";
const COHORT_FILE: &str = "cohort.tsv";
const IMPORTANCES_FILE: &str = "importances.tsv";
const TRAIN_METRICS_FILE: &str = "train_metrics.txt";
const RESOLVED_FILE: &str = "resolved.cfg";
const PLOTS_DIR: &str = "plots";

#[derive(Parser)]
#[command(
    name = "phenoflow",
    about = "Phenotype discovery from episodic clinical observations",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Directory stage files are read from and written to.
    #[arg(long, default_value = ".")]
    work: PathBuf,
    /// Pipeline configuration file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with known ground-truth phenotypes.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Normalize raw observation files into the work directory.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Event file: record, code, time per line.
        #[arg(long)]
        events: PathBuf,
        /// Value file: record, lab, time, value per line.
        #[arg(long)]
        values: PathBuf,
        /// Keep going on malformed lines, reporting each to stderr.
        #[arg(long)]
        lenient: bool,
        /// Comma-separated codes whose first occurrence is the outcome.
        #[arg(long, default_value = "155.0,155.1,155.2")]
        target_codes: String,
    },
    /// Fit per-record intensity and value curves.
    Curves {
        #[command(flatten)]
        common: Common,
    },
    /// Sample curves at random instants into the cross-section matrix.
    Sample {
        #[command(flatten)]
        common: Common,
    },
    /// Factor the matrix into independent components.
    Ica {
        #[command(flatten)]
        common: Common,
    },
    /// Write the top-loadings report for every component.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Select labeled instances for the lookahead prediction task.
    Cohort {
        #[command(flatten)]
        common: Common,
    },
    /// Train the forest on a record-level split and score the held-out side.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Run the full synthetic reproduction experiment in one shot.
    Reproduce {
        #[command(flatten)]
        common: Common,
    },
    /// Render component loading plots (SVG plus companion CSV).
    Plot {
        #[command(flatten)]
        common: Common,
        /// Component to plot; all components when omitted.
        #[arg(long)]
        component: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            eprint!("{e}");
            return if ok { ExitCode::SUCCESS } else { ExitCode::from(1) };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("PHENOFLOW_THREADS") else {
        return Ok(());
    };
    let n: usize = raw.trim().parse().map_err(|_| {
        Error::InvalidInput(format!(
            "PHENOFLOW_THREADS must be a positive integer, got {raw:?}"
        ))
    })?;
    if n == 0 {
        return Err(Error::InvalidInput(
            "PHENOFLOW_THREADS must be at least 1".into(),
        ));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Numerical(format!("thread pool setup failed: {e}")))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Synth { common } => cmd_synth(&prepare(&common)?, &common.work),
        Command::Ingest {
            common,
            events,
            values,
            lenient,
            target_codes,
        } => {
            prepare(&common)?;
            cmd_ingest(&common.work, &events, &values, lenient, &target_codes)
        }
        Command::Curves { common } => cmd_curves(&prepare(&common)?, &common.work),
        Command::Sample { common } => cmd_sample(&prepare(&common)?, &common.work),
        Command::Ica { common } => cmd_ica(&prepare(&common)?, &common.work),
        Command::Report { common } => cmd_report(&prepare(&common)?, &common.work),
        Command::Cohort { common } => cmd_cohort(&prepare(&common)?, &common.work),
        Command::Train { common } => cmd_train(&prepare(&common)?, &common.work),
        Command::Reproduce { common } => {
            let cfg = prepare(&common)?;
            let summary = run_reproduction(&cfg, &common.work)?;
            eprintln!(
                "reproduce: mean matched |corr| {:.4}, held-out AUC {:.4}, summary in {}",
                summary.recovery.mean_correlation,
                summary.auc_test,
                common.work.join("summary.txt").display()
            );
            Ok(())
        }
        Command::Plot { common, component } => {
            cmd_plot(&prepare(&common)?, &common.work, component)
        }
    }
}

/// Loads and validates the configuration, creates the work directory, and
/// writes the fully resolved configuration next to the outputs.
fn prepare(common: &Common) -> Result<PipelineConfig> {
    let cfg = match &common.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    cfg.validate()?;
    std::fs::create_dir_all(&common.work).map_err(|e| Error::io(&common.work, e))?;
    cfg.write_resolved(common.work.join(RESOLVED_FILE))?;
    Ok(cfg)
}

fn cmd_synth(cfg: &PipelineConfig, work: &Path) -> Result<()> {
    let phenos = default_phenotypes(cfg.k_true, cfg.n_codes, cfg.n_labs, cfg.seed);
    let cohort = generate_cohort(&phenos, &cfg.synth_config())?;
    write_event_file(work.join(EVENTS_FILE), &cohort.events)?;
    write_value_file(work.join(VALUES_FILE), &cohort.values)?;
    write_ground_truth_file(&cohort.truth, work.join(TRUTH_FILE))?;
    let mut metas = compute_record_meta(&cohort.events, &cohort.values, &BTreeSet::new());
    let diagnosis = diagnosis_by_record(&cohort.truth);
    for meta in &mut metas {
        meta.first_target_time = diagnosis.get(meta.record_id.as_str()).copied().flatten();
    }
    write_record_meta_file(work.join(RECORDS_FILE), &metas)?;
    let diagnosed = metas.iter().filter(|m| m.first_target_time.is_some()).count();
    eprintln!(
        "synth: {} records ({diagnosed} with a future diagnosis), {} event series, {} value series",
        metas.len(),
        cohort.events.len(),
        cohort.values.len()
    );
    Ok(())
}

fn report_rejects(origin: &Path, report: &ParseReport) {
    for (line, message) in &report.rejected {
        eprintln!("{}:{line}: rejected: {message}", origin.display());
    }
}

fn cmd_ingest(
    work: &Path,
    events_path: &Path,
    values_path: &Path,
    lenient: bool,
    target_codes: &str,
) -> Result<()> {
    let mode = if lenient {
        ParseMode::Lenient
    } else {
        ParseMode::Strict
    };
    let (events, event_report) = parse_event_file(events_path, mode)?;
    let (values, value_report) = parse_value_file(values_path, mode)?;
    report_rejects(events_path, &event_report);
    report_rejects(values_path, &value_report);
    let targets: BTreeSet<String> = target_codes
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(String::from)
        .collect();
    let metas = compute_record_meta(&events, &values, &targets);
    if metas.is_empty() {
        return Err(Error::InvalidInput("no observations survived parsing".into()));
    }
    write_event_file(work.join(EVENTS_FILE), &events)?;
    write_value_file(work.join(VALUES_FILE), &values)?;
    write_record_meta_file(work.join(RECORDS_FILE), &metas)?;
    let with_target = metas.iter().filter(|m| m.first_target_time.is_some()).count();
    eprintln!(
        "ingest: {} records ({with_target} with a target code), {} lines parsed, {} rejected",
        metas.len(),
        event_report.parsed_lines + value_report.parsed_lines,
        event_report.rejected.len() + value_report.rejected.len()
    );
    Ok(())
}

fn load_observations(work: &Path) -> Result<(Vec<phenoflow::ingest::EventSeries>, Vec<phenoflow::ingest::ValueSeries>)> {
    let (events, _) = parse_event_file(work.join(EVENTS_FILE), ParseMode::Strict)?;
    let (values, _) = parse_value_file(work.join(VALUES_FILE), ParseMode::Strict)?;
    Ok((events, values))
}

fn cmd_curves(cfg: &PipelineConfig, work: &Path) -> Result<()> {
    let (events, values) = load_observations(work)?;
    let metas = read_record_meta_file(work.join(RECORDS_FILE))?;
    let spans: Vec<_> = metas.iter().map(|m| m.span.clone()).collect();
    let sets = fit_cohort_curves(
        &spans,
        &events,
        &values,
        cfg.points_per_year,
        &cfg.intensity_config(),
    )?;
    write_curve_file(work.join(CURVES_FILE), &sets, cfg.points_per_year)?;
    let n_curves: usize = sets.iter().map(|s| s.curves().count()).sum();
    eprintln!("curves: {n_curves} curves over {} records", sets.len());
    Ok(())
}

fn cmd_sample(cfg: &PipelineConfig, work: &Path) -> Result<()> {
    let sets = read_curve_file(work.join(CURVES_FILE))?;
    let metas = read_record_meta_file(work.join(RECORDS_FILE))?;
    if sets.len() != metas.len()
        || sets
            .iter()
            .zip(&metas)
            .any(|(s, m)| s.record_id != m.record_id)
    {
        return Err(Error::InvalidInput(
            "curve file does not match the record file; rerun the curves stage".into(),
        ));
    }
    let (events, values) = load_observations(work)?;
    let catalog = VariableCatalog::from_observations(&events, &values)?;
    let mut times = metas
        .iter()
        .map(|m| draw_sample_times(&m.span, cfg.sample_rate, cfg.seed))
        .collect::<Result<Vec<_>>>()?;
    // Records heading for the outcome also get one instance exactly a
    // horizon before it (when that instant has enough history), so the task
    // builder always finds an instance inside its day window.
    let mut lookahead = 0usize;
    for (i, meta) in metas.iter().enumerate() {
        if let Some(target) = meta.first_target_time {
            let t_star = target - cfg.horizon;
            if t_star >= meta.span.start && t_star <= meta.span.end {
                times[i].push(t_star);
                lookahead += 1;
            }
        }
    }
    let matrix = build_matrix(&sets, &catalog, &times)?;
    write_matrix(work.join(MATRIX_FILE), &matrix)?;
    eprintln!(
        "sample: {} variables x {} instances ({lookahead} at the lookahead point)",
        matrix.x.nrows(),
        matrix.x.ncols()
    );
    Ok(())
}

fn cmd_ica(cfg: &PipelineConfig, work: &Path) -> Result<()> {
    let matrix = read_matrix(work.join(MATRIX_FILE))?;
    let (model, expr) = fit_cross_section(&matrix, &cfg.ica_options())?;
    write_model(work.join(MODEL_FILE), &model)?;
    write_expressions(work.join(EXPRESSIONS_FILE), &expr)?;
    eprintln!(
        "ica: rank {} over {} instances in {} iterations ({})",
        model.rank,
        expr.s.ncols(),
        model.convergence.iterations,
        if model.convergence.converged {
            "converged"
        } else {
            "hit the iteration cap"
        }
    );
    Ok(())
}

fn cmd_report(cfg: &PipelineConfig, work: &Path) -> Result<()> {
    let model = read_model(work.join(MODEL_FILE))?;
    let matrix = read_matrix(work.join(MATRIX_FILE))?;
    write_loadings_report(&work.join(REPORT_FILE), &model, &matrix.catalog, cfg.report_top)?;
    eprintln!(
        "report: top {} loadings for {} components",
        cfg.report_top.min(matrix.catalog.len()),
        model.rank
    );
    Ok(())
}

fn cmd_cohort(cfg: &PipelineConfig, work: &Path) -> Result<()> {
    let metas = read_record_meta_file(work.join(RECORDS_FILE))?;
    let expr = read_expressions(work.join(EXPRESSIONS_FILE))?;
    let selection = build_hcc_cohort(&metas, &expr.provenance, &cfg.cohort_config())?;
    let mut out = String::new();
    for (&index, &label) in selection.indices.iter().zip(&selection.labels) {
        let inst = &expr.provenance[index];
        let _ = writeln!(
            out,
            "{index}\t{}\t{}\t{}",
            inst.record_id,
            inst.time,
            if label { 1 } else { 0 }
        );
    }
    let path = work.join(COHORT_FILE);
    std::fs::write(&path, out).map_err(|e| Error::io(&path, e))?;
    eprintln!(
        "cohort: {} instances from {} positive and {} negative records ({} excluded for thin data)",
        selection.indices.len(),
        selection.n_positive_records,
        selection.n_negative_records,
        selection.n_excluded_min_data
    );
    Ok(())
}

fn read_cohort_file(path: &Path) -> Result<Vec<(usize, bool)>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::malformed(
                path,
                i + 1,
                format!("expected 4 fields, got {}", fields.len()),
            ));
        }
        let index: usize = fields[0]
            .parse()
            .map_err(|_| Error::malformed(path, i + 1, format!("bad index {:?}", fields[0])))?;
        let label = match fields[3] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::malformed(path, i + 1, format!("bad label {other:?}")))
            }
        };
        out.push((index, label));
    }
    Ok(out)
}

fn cmd_train(cfg: &PipelineConfig, work: &Path) -> Result<()> {
    let expr = read_expressions(work.join(EXPRESSIONS_FILE))?;
    let rows = read_cohort_file(&work.join(COHORT_FILE))?;
    let k = expr.s.nrows();
    for &(index, _) in &rows {
        if index >= expr.s.ncols() {
            return Err(Error::InvalidInput(format!(
                "cohort references instance {index}, expressions have {}",
                expr.s.ncols()
            )));
        }
    }
    let data = LabeledInstances {
        features: DMatrix::from_fn(k, rows.len(), |i, j| expr.s[(i, rows[j].0)]),
        labels: rows.iter().map(|&(_, l)| l).collect(),
        provenance: rows
            .iter()
            .map(|&(index, _)| expr.provenance[index].clone())
            .collect(),
    };
    let (train_idx, test_idx) = split_by_record(&data, cfg.test_fraction, cfg.seed)?;
    let train = data.select(&train_idx);
    let test = data.select(&test_idx);
    let model = train_forest(&train, &cfg.forest_params(), cfg.seed)?;
    let oob = oob_scores(&model, &train)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (j, s) in oob.iter().enumerate() {
        if let Some(s) = s {
            scores.push(*s);
            labels.push(train.labels[j]);
        }
    }
    let auc_oob = auc(&scores, &labels)?;
    let test_scores = predict_proba(&model, &test.features)?;
    let auc_test = auc(&test_scores, &test.labels)?;
    write_importances(&work.join(IMPORTANCES_FILE), &model.importances)?;
    let metrics = format!(
        "auc_oob = {auc_oob:.6}\nauc_test = {auc_test:.6}\nn_train = {}\nn_test = {}\nn_trees = {}\n",
        train.len(),
        test.len(),
        model.trees.len()
    );
    let path = work.join(TRAIN_METRICS_FILE);
    std::fs::write(&path, metrics).map_err(|e| Error::io(&path, e))?;
    eprintln!(
        "train: {} trees on {} instances; OOB AUC {auc_oob:.4}, held-out AUC {auc_test:.4}",
        model.trees.len(),
        train.len()
    );
    Ok(())
}

fn cmd_plot(cfg: &PipelineConfig, work: &Path, component: Option<usize>) -> Result<()> {
    let model = read_model(work.join(MODEL_FILE))?;
    let matrix = read_matrix(work.join(MATRIX_FILE))?;
    let dir = work.join(PLOTS_DIR);
    let components: Vec<usize> = match component {
        Some(c) => vec![c],
        None => (0..model.rank).collect(),
    };
    for c in &components {
        let (svg, csv) = emit_phenotype_plot(&model, &matrix.catalog, *c, cfg.report_top, &dir)?;
        eprintln!("plot: wrote {} and {}", svg.display(), csv.display());
    }
    Ok(())
}
