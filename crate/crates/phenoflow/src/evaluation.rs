//! Source-recovery metrics against ground truth, and the end-to-end
//! reproduction experiment on a synthetic cohort.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use pathfinding::matrix::Matrix as WeightMatrix;
use pathfinding::prelude::kuhn_munkres;

use crate::config::PipelineConfig;
use crate::cross_section::{
    build_matrix, draw_sample_times, fit_cohort_curves, write_matrix, Instance, VariableCatalog,
};
use crate::error::{Error, Result};
use crate::forest::{
    auc, build_hcc_cohort, compute_record_meta, oob_scores, predict_proba, split_by_record,
    train_forest, LabeledInstances,
};
use crate::ica::{fit_cross_section, phenotype_report, project, write_model, IcaModel};
use crate::ingest::{write_event_file, write_value_file};
use crate::plot::emit_phenotype_plot;
use crate::synth::{default_phenotypes, generate_cohort, write_ground_truth_file, SynthCohort};

/// One matched (true source, recovered component) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPair {
    pub truth: usize,
    pub recovered: usize,
    /// Absolute Pearson correlation across the shared columns.
    pub correlation: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    /// One entry per matched pair, ascending by truth index.
    pub pairs: Vec<MatchedPair>,
    /// Mean |correlation| over ALL true sources; sources left unmatched
    /// (possible only when fewer components than sources were recovered)
    /// count as zero.
    pub mean_correlation: f64,
}

impl RecoveryReport {
    pub fn pair_for_truth(&self, truth: usize) -> Option<&MatchedPair> {
        self.pairs.iter().find(|p| p.truth == truth)
    }
}

fn centered_rows(m: &DMatrix<f64>) -> (Vec<Vec<f64>>, Vec<f64>) {
    let cols = m.ncols() as f64;
    let mut rows = Vec::with_capacity(m.nrows());
    let mut norms = Vec::with_capacity(m.nrows());
    for r in m.row_iter() {
        let mean = r.iter().sum::<f64>() / cols;
        let c: Vec<f64> = r.iter().map(|v| v - mean).collect();
        norms.push(c.iter().map(|v| v * v).sum::<f64>().sqrt());
        rows.push(c);
    }
    (rows, norms)
}

/// Pairs each true source with a distinct recovered component, maximizing
/// total absolute Pearson correlation (optimal assignment). Zero-variance
/// rows correlate 0 with everything.
pub fn match_components(
    s_true: &DMatrix<f64>,
    s_rec: &DMatrix<f64>,
) -> Result<RecoveryReport> {
    let k_true = s_true.nrows();
    let k_rec = s_rec.nrows();
    let m = s_true.ncols();
    if s_rec.ncols() != m {
        return Err(Error::ShapeMismatch(format!(
            "true sources have {m} columns, recovered have {}",
            s_rec.ncols()
        )));
    }
    if k_true == 0 || k_rec == 0 || m < 2 {
        return Err(Error::InvalidInput(
            "matching needs nonempty matrices with at least two columns".into(),
        ));
    }
    if s_true.iter().chain(s_rec.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite expression values".into()));
    }
    let (true_rows, true_norms) = centered_rows(s_true);
    let (rec_rows, rec_norms) = centered_rows(s_rec);
    let mut corr = vec![vec![0.0f64; k_rec]; k_true];
    for (i, ti) in true_rows.iter().enumerate() {
        for (j, rj) in rec_rows.iter().enumerate() {
            let denom = true_norms[i] * rec_norms[j];
            if denom > 0.0 {
                let dot: f64 = ti.iter().zip(rj).map(|(a, b)| a * b).sum();
                corr[i][j] = (dot / denom).abs().min(1.0);
            }
        }
    }
    // The assignment solver wants integer weights and no more rows than
    // columns; transpose when fewer components were recovered than sources.
    const SCALE: f64 = 1e12;
    let transposed = k_rec < k_true;
    let (rows, cols) = if transposed { (k_rec, k_true) } else { (k_true, k_rec) };
    let weights = WeightMatrix::from_fn(rows, cols, |(r, c)| {
        let v = if transposed { corr[c][r] } else { corr[r][c] };
        (v * SCALE).round() as i64
    });
    let (_, assignment) = kuhn_munkres(&weights);
    let mut pairs: Vec<MatchedPair> = if transposed {
        assignment
            .iter()
            .enumerate()
            .map(|(rec, &truth)| MatchedPair {
                truth,
                recovered: rec,
                correlation: corr[truth][rec],
            })
            .collect()
    } else {
        assignment
            .iter()
            .enumerate()
            .map(|(truth, &rec)| MatchedPair {
                truth,
                recovered: rec,
                correlation: corr[truth][rec],
            })
            .collect()
    };
    pairs.sort_by_key(|p| p.truth);
    let mean_correlation = pairs.iter().map(|p| p.correlation).sum::<f64>() / k_true as f64;
    Ok(RecoveryReport {
        pairs,
        mean_correlation,
    })
}

/// Amari index of a square composite map: 0 iff the map is a scaled
/// permutation, growing toward 1 as mass spreads off the permutation
/// pattern. Rows and columns are treated symmetrically.
pub fn amari_index(p: &DMatrix<f64>) -> Result<f64> {
    let k = p.nrows();
    if p.ncols() != k {
        return Err(Error::ShapeMismatch(format!(
            "composite map is {}x{}, expected square",
            k,
            p.ncols()
        )));
    }
    if k < 2 {
        return Err(Error::InvalidInput(
            "Amari index needs at least a 2x2 map".into(),
        ));
    }
    if p.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite composite map".into()));
    }
    let abs = p.map(f64::abs);
    let mut total = 0.0f64;
    for i in 0..k {
        let row = abs.row(i);
        let max = row.iter().cloned().fold(0.0f64, f64::max);
        if max == 0.0 {
            return Err(Error::Numerical(format!("composite row {i} is all zero")));
        }
        total += row.iter().sum::<f64>() / max - 1.0;
    }
    for j in 0..k {
        let col = abs.column(j);
        let max = col.iter().cloned().fold(0.0f64, f64::max);
        if max == 0.0 {
            return Err(Error::Numerical(format!("composite column {j} is all zero")));
        }
        total += col.iter().sum::<f64>() / max - 1.0;
    }
    Ok(total / (2.0 * k as f64 * (k as f64 - 1.0)))
}

/// Reorders composite rows by the recovered-component matching so row j
/// corresponds to true source j, giving the square map the Amari index
/// scores. Requires a complete matching.
pub fn matched_composite(p: &DMatrix<f64>, report: &RecoveryReport) -> Result<DMatrix<f64>> {
    let k_true = p.ncols();
    if report.pairs.len() != k_true {
        return Err(Error::InvalidInput(format!(
            "matching covers {} of {k_true} sources",
            report.pairs.len()
        )));
    }
    let mut out = DMatrix::zeros(k_true, k_true);
    for pair in &report.pairs {
        if pair.recovered >= p.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "matched component {} outside composite with {} rows",
                pair.recovered,
                p.nrows()
            )));
        }
        out.set_row(pair.truth, &p.row(pair.recovered));
    }
    Ok(out)
}

/// Everything the reproduction experiment reports.
#[derive(Debug, Clone)]
pub struct ReproductionSummary {
    pub n_records: usize,
    pub n_instances: usize,
    pub n_variables: usize,
    pub ica_iterations: usize,
    pub ica_converged: bool,
    pub recovery: RecoveryReport,
    /// Amari index of the matched composite map; present only when every
    /// true source got a distinct recovered component.
    pub amari_matched: Option<f64>,
    /// Recovered component matched to the target phenotype.
    pub target_component: Option<usize>,
    pub target_correlation: f64,
    pub n_task_instances: usize,
    pub n_positive: usize,
    pub n_negative: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub auc_oob: f64,
    pub auc_test: f64,
    pub importances: Vec<f64>,
    /// 1-based rank of the target component's importance, descending.
    pub target_importance_rank: Option<usize>,
}

impl ReproductionSummary {
    /// The machine-readable key = value block embedded in summary.txt.
    pub fn metrics_block(&self) -> String {
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("n_records", self.n_records.to_string());
        put("n_instances", self.n_instances.to_string());
        put("n_variables", self.n_variables.to_string());
        put("ica_iterations", self.ica_iterations.to_string());
        put("ica_converged", self.ica_converged.to_string());
        put(
            "mean_matched_correlation",
            format!("{:.6}", self.recovery.mean_correlation),
        );
        put(
            "amari_matched",
            self.amari_matched
                .map_or_else(|| "-".into(), |v| format!("{v:.6}")),
        );
        put(
            "target_component",
            self.target_component
                .map_or_else(|| "-".into(), |v| v.to_string()),
        );
        put(
            "target_correlation",
            format!("{:.6}", self.target_correlation),
        );
        put("n_task_instances", self.n_task_instances.to_string());
        put("n_positive", self.n_positive.to_string());
        put("n_negative", self.n_negative.to_string());
        put("n_train", self.n_train.to_string());
        put("n_test", self.n_test.to_string());
        put("auc_oob", format!("{:.6}", self.auc_oob));
        put("auc_test", format!("{:.6}", self.auc_test));
        put(
            "target_importance_rank",
            self.target_importance_rank
                .map_or_else(|| "-".into(), |v| v.to_string()),
        );
        out
    }
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::stage(name, e))
}

fn ground_truth_expressions(
    cohort: &SynthCohort,
    provenance: &[Instance],
) -> Result<DMatrix<f64>> {
    let k_true = cohort.truth.phenotypes.len();
    let patient_idx: HashMap<&str, usize> = cohort
        .truth
        .patients
        .iter()
        .enumerate()
        .map(|(i, p)| (p.record_id.as_str(), i))
        .collect();
    let mut s_true = DMatrix::zeros(k_true, provenance.len());
    for (col, inst) in provenance.iter().enumerate() {
        let Some(&p) = patient_idx.get(inst.record_id.as_str()) else {
            return Err(Error::InvalidInput(format!(
                "instance references unknown record {:?}",
                inst.record_id
            )));
        };
        for j in 0..k_true {
            s_true[(j, col)] = cohort.truth.expression(p, j, inst.time);
        }
    }
    Ok(s_true)
}

/// Writes component importances sorted descending: `component\timportance`.
pub fn write_importances(path: &Path, importances: &[f64]) -> Result<()> {
    let mut order: Vec<usize> = (0..importances.len()).collect();
    order.sort_by(|&a, &b| importances[b].total_cmp(&importances[a]).then(a.cmp(&b)));
    let mut out = String::new();
    for i in order {
        let _ = writeln!(out, "{i}\t{:.12e}", importances[i]);
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn write_labels(path: &Path, data: &LabeledInstances) -> Result<()> {
    let mut out = String::new();
    for (inst, &label) in data.provenance.iter().zip(&data.labels) {
        let _ = writeln!(
            out,
            "{}\t{}\t{}",
            inst.record_id,
            inst.time,
            if label { 1 } else { 0 }
        );
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes the top loadings of every component:
/// `component\tkind\tvariable\tloading`.
pub fn write_loadings_report(
    path: &Path,
    model: &IcaModel,
    catalog: &VariableCatalog,
    top: usize,
) -> Result<()> {
    let report = phenotype_report(model, catalog, top)?;
    let mut out = String::new();
    for comp in &report.components {
        for e in &comp.entries {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.12e}",
                comp.component,
                e.kind.as_str(),
                e.variable_id,
                e.loading
            );
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Runs the whole experiment: synthesize a cohort, fit curves, sample the
/// cross-section matrix, decompose, score recovery against ground truth,
/// build the lookahead task, train the forest, and write every artifact
/// into `out_dir`. Rerunning with the same config is byte-identical.
pub fn run_reproduction(cfg: &PipelineConfig, out_dir: &Path) -> Result<ReproductionSummary> {
    cfg.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    cfg.write_resolved(out_dir.join("resolved.cfg"))?;

    // Synthetic cohort with known sources.
    let phenos = default_phenotypes(cfg.k_true, cfg.n_codes, cfg.n_labs, cfg.seed);
    let synth_cfg = cfg.synth_config();
    let cohort = stage("synth", generate_cohort(&phenos, &synth_cfg))?;
    stage(
        "synth",
        write_event_file(out_dir.join("events.tsv"), &cohort.events),
    )?;
    stage(
        "synth",
        write_value_file(out_dir.join("values.tsv"), &cohort.values),
    )?;
    stage(
        "synth",
        write_ground_truth_file(&cohort.truth, out_dir.join("truth.txt")),
    )?;

    // Realized spans and observation counts drive everything downstream;
    // the latent diagnosis time substitutes for a target billing code.
    let mut metas = compute_record_meta(&cohort.events, &cohort.values, &BTreeSet::new());
    let diagnosis: HashMap<&str, Option<f64>> = cohort
        .truth
        .patients
        .iter()
        .map(|p| (p.record_id.as_str(), p.diagnosis_time))
        .collect();
    for meta in &mut metas {
        meta.first_target_time = diagnosis.get(meta.record_id.as_str()).copied().flatten();
    }
    let catalog = stage(
        "ingest",
        VariableCatalog::from_observations(&cohort.events, &cohort.values),
    )?;

    let spans: Vec<_> = metas.iter().map(|m| m.span.clone()).collect();
    let curve_sets = stage(
        "curves",
        fit_cohort_curves(
            &spans,
            &cohort.events,
            &cohort.values,
            cfg.points_per_year,
            &cfg.intensity_config(),
        ),
    )?;
    let sample_times = stage(
        "sample",
        metas
            .iter()
            .map(|m| draw_sample_times(&m.span, cfg.sample_rate, cfg.seed))
            .collect::<Result<Vec<_>>>(),
    )?;

    let x_main = stage("sample", build_matrix(&curve_sets, &catalog, &sample_times))?;
    stage("sample", write_matrix(out_dir.join("matrix.bin"), &x_main))?;

    let ica_opts = cfg.ica_options();
    let (model, expr) = stage("ica", fit_cross_section(&x_main, &ica_opts))?;
    stage("ica", write_model(out_dir.join("model.bin"), &model))?;
    stage(
        "report",
        write_loadings_report(&out_dir.join("report.tsv"), &model, &catalog, cfg.report_top),
    )?;

    // Recovery metrics against the generator's sources.
    let s_true = stage("evaluate", ground_truth_expressions(&cohort, &expr.provenance))?;
    let recovery = stage("evaluate", match_components(&s_true, &expr.s))?;
    let a_true = cohort.truth.mixing_matrix(&catalog);
    let composite = &model.unmixing * (&model.whitener * &a_true);
    let amari_matched = if cfg.k >= cfg.k_true {
        let matched = stage("evaluate", matched_composite(&composite, &recovery))?;
        Some(stage("evaluate", amari_index(&matched))?)
    } else {
        None
    };
    let target_truth_idx = cohort
        .truth
        .phenotypes
        .iter()
        .position(|p| p.id == cohort.truth.target.phenotype_id)
        .expect("validated by the generator");
    let target_pair = recovery.pair_for_truth(target_truth_idx);
    let target_component = target_pair.map(|p| p.recovered);
    let target_correlation = target_pair.map_or(0.0, |p| p.correlation);

    // The prediction task: all sampled instances plus, for each diagnosed
    // record with enough history, one instance exactly a horizon before the
    // diagnosis.
    let mut extra_times: Vec<Vec<f64>> = vec![Vec::new(); metas.len()];
    for (i, meta) in metas.iter().enumerate() {
        if let Some(td) = meta.first_target_time {
            let t_star = td - cfg.horizon;
            if t_star >= meta.span.start && t_star <= meta.span.end {
                extra_times[i].push(t_star);
            }
        }
    }
    let x_extra = stage("cohort", build_matrix(&curve_sets, &catalog, &extra_times))?;
    let s_extra = stage("cohort", project(&model, &x_extra.x))?;
    let mut task_features = DMatrix::zeros(cfg.k, expr.s.ncols() + s_extra.ncols());
    task_features.view_mut((0, 0), (cfg.k, expr.s.ncols())).copy_from(&expr.s);
    task_features
        .view_mut((0, expr.s.ncols()), (cfg.k, s_extra.ncols()))
        .copy_from(&s_extra);
    let mut task_provenance = expr.provenance.clone();
    task_provenance.extend(x_extra.provenance.iter().cloned());

    let cohort_cfg = cfg.cohort_config();
    let selection = stage("cohort", build_hcc_cohort(&metas, &task_provenance, &cohort_cfg))?;
    let selected = LabeledInstances {
        features: DMatrix::from_fn(cfg.k, selection.indices.len(), |i, j| {
            task_features[(i, selection.indices[j])]
        }),
        labels: selection.labels.clone(),
        provenance: selection
            .indices
            .iter()
            .map(|&j| task_provenance[j].clone())
            .collect(),
    };
    stage("cohort", write_labels(&out_dir.join("labels.tsv"), &selected))?;

    // Train, score held-out, rank importances.
    let (train_idx, test_idx) = stage(
        "train",
        split_by_record(&selected, cfg.test_fraction, cfg.seed),
    )?;
    let train = selected.select(&train_idx);
    let test = selected.select(&test_idx);
    let hp = cfg.forest_params();
    let fmodel = stage("train", train_forest(&train, &hp, cfg.seed))?;
    let oob = stage("train", oob_scores(&fmodel, &train))?;
    let mut oob_s = Vec::new();
    let mut oob_l = Vec::new();
    for (j, s) in oob.iter().enumerate() {
        if let Some(s) = s {
            oob_s.push(*s);
            oob_l.push(train.labels[j]);
        }
    }
    let auc_oob = stage("train", auc(&oob_s, &oob_l))?;
    let test_scores = stage("train", predict_proba(&fmodel, &test.features))?;
    let auc_test = stage("train", auc(&test_scores, &test.labels))?;
    let target_importance_rank = target_component.map(|c| {
        1 + fmodel
            .importances
            .iter()
            .filter(|&&v| v > fmodel.importances[c])
            .count()
    });
    stage(
        "train",
        write_importances(&out_dir.join("importances.tsv"), &fmodel.importances),
    )?;

    let plots_dir = out_dir.join("plots");
    for c in 0..model.rank {
        stage(
            "report",
            emit_phenotype_plot(&model, &catalog, c, cfg.report_top, &plots_dir).map(|_| ()),
        )?;
    }

    let summary = ReproductionSummary {
        n_records: metas.len(),
        n_instances: expr.s.ncols(),
        n_variables: catalog.len(),
        ica_iterations: model.convergence.iterations,
        ica_converged: model.convergence.converged,
        recovery,
        amari_matched,
        target_component,
        target_correlation,
        n_task_instances: selected.len(),
        n_positive: selected.labels.iter().filter(|&&b| b).count(),
        n_negative: selected.labels.iter().filter(|&&b| !b).count(),
        n_train: train.len(),
        n_test: test.len(),
        auc_oob,
        auc_test,
        importances: fmodel.importances.clone(),
        target_importance_rank,
    };
    write_summary(&out_dir.join("summary.txt"), cfg, &summary)?;

    let metrics_path = out_dir.join("metrics.txt");
    std::fs::write(&metrics_path, summary.metrics_block())
        .map_err(|e| Error::io(&metrics_path, e))?;
    Ok(summary)
}

fn write_summary(path: &Path, cfg: &PipelineConfig, s: &ReproductionSummary) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "reproduction experiment summary");
    let _ = writeln!(out, "===============================");
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "cohort: {} records, {} variables, {} sampled instances",
        s.n_records, s.n_variables, s.n_instances
    );
    let _ = writeln!(
        out,
        "decomposition: rank {} on seed {}, {} iterations ({})",
        cfg.k,
        cfg.seed,
        s.ica_iterations,
        if s.ica_converged {
            "converged"
        } else {
            "not converged"
        }
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "source recovery (true -> recovered, |corr|):");
    for p in &s.recovery.pairs {
        let _ = writeln!(
            out,
            "  {:>2} -> {:>2}   {:.4}",
            p.truth, p.recovered, p.correlation
        );
    }
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "prediction task: {} instances ({} positive, {} negative), {}/{} train/test",
        s.n_task_instances, s.n_positive, s.n_negative, s.n_train, s.n_test
    );
    let _ = writeln!(out);
    let _ = writeln!(out, "[metrics]");
    out.push_str(&s.metrics_block());
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
