//! Synthetic cohort generation from known independent latent phenotypes.
//!
//! Each patient activates each phenotype independently; active phenotypes
//! contribute a logistic expression ramp that drives code event rates and
//! lab value offsets. Knowing the generator exactly makes source recovery
//! objectively measurable downstream.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;

use crate::cross_section::{VarKind, VariableCatalog};
use crate::error::{Error, Result};
use crate::ingest::{EventSeries, RecordSpan, ValueSeries};
use crate::rng;

/// One latent process: sparse non-negative code-rate loadings plus signed
/// lab offsets, expressed per patient as a logistic ramp.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthPhenotype {
    pub id: String,
    /// Events/year added per variable at full expression.
    pub code_loadings: Vec<(String, f64)>,
    /// Offset from the variable's baseline level at full expression.
    pub lab_loadings: Vec<(String, f64)>,
    pub prevalence: f64,
    /// Onset is drawn as start + frac · span_length with frac in this range.
    pub onset_frac: (f64, f64),
    /// Logistic ramp width in years.
    pub width_range: (f64, f64),
    /// Patient-specific full-expression amplitude.
    pub amplitude_range: (f64, f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub phenotype_id: String,
    /// Expression level whose crossing defines the diagnosis event.
    pub threshold: f64,
    pub horizon_years: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_patients: usize,
    pub n_codes: usize,
    pub n_labs: usize,
    /// Record lengths are uniform in this range (years).
    pub span_years: (f64, f64),
    pub start_year: f64,
    /// Mean baseline event rate; per-code baselines scatter around it.
    pub baseline_code_rate: f64,
    pub lab_noise_sd: f64,
    pub lab_rate_per_year: f64,
    pub seed: u64,
    pub target: TargetSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_patients: 200,
            n_codes: 25,
            n_labs: 15,
            span_years: (8.0, 20.0),
            start_year: 2000.0,
            baseline_code_rate: 0.2,
            lab_noise_sd: 5.0,
            lab_rate_per_year: 6.0,
            seed: 0,
            target: TargetSpec {
                phenotype_id: "pheno_00".into(),
                threshold: 0.5,
                horizon_years: 10.0,
            },
        }
    }
}

/// One phenotype's realization in one patient.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveExpression {
    pub phenotype: usize,
    pub amplitude: f64,
    pub onset: f64,
    pub width: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatientTruth {
    pub record_id: String,
    pub span: RecordSpan,
    pub active: Vec<ActiveExpression>,
    /// Time the target expression crosses its threshold, when that happens
    /// within the record.
    pub diagnosis_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub phenotypes: Vec<GroundTruthPhenotype>,
    pub patients: Vec<PatientTruth>,
    pub code_baselines: Vec<(String, f64)>,
    pub lab_baselines: Vec<(String, f64)>,
    pub target: TargetSpec,
}

#[derive(Debug, Clone)]
pub struct SynthCohort {
    pub events: Vec<EventSeries>,
    pub values: Vec<ValueSeries>,
    pub truth: GroundTruth,
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl GroundTruth {
    /// Expression level e_{p,j}(t); zero when the phenotype is inactive.
    pub fn expression(&self, patient: usize, phenotype: usize, t: f64) -> f64 {
        self.patients[patient]
            .active
            .iter()
            .find(|a| a.phenotype == phenotype)
            .map_or(0.0, |a| {
                a.amplitude * logistic((t - a.onset) / a.width)
            })
    }

    /// True mixing matrix in variable space: entry (i, j) is how much one
    /// unit of phenotype j's expression moves variable i.
    pub fn mixing_matrix(&self, catalog: &VariableCatalog) -> DMatrix<f64> {
        let k = self.phenotypes.len();
        let vars = catalog.variables();
        let mut a = DMatrix::zeros(vars.len(), k);
        for (i, var) in vars.iter().enumerate() {
            for (j, ph) in self.phenotypes.iter().enumerate() {
                let loadings = match var.kind {
                    VarKind::Code => &ph.code_loadings,
                    VarKind::Lab => &ph.lab_loadings,
                };
                if let Some((_, l)) = loadings.iter().find(|(v, _)| *v == var.id) {
                    a[(i, j)] = *l;
                }
            }
        }
        a
    }
}

/// Time at which a logistic ramp reaches `threshold`, if it ever does.
pub fn crossing_time(active: &ActiveExpression, threshold: f64) -> Option<f64> {
    if threshold <= 0.0 || threshold >= active.amplitude {
        return None;
    }
    Some(active.onset + active.width * (threshold / (active.amplitude - threshold)).ln())
}

fn draw_range(rng: &mut ChaCha8Rng, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        rng.random_range(range.0..range.1)
    } else {
        range.0
    }
}

fn thin<F: Fn(f64) -> f64>(
    rate_fn: &F,
    bound: f64,
    span: (f64, f64),
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    if !bound.is_finite() || bound < 0.0 {
        return Err(Error::InvalidInput(format!(
            "rate bound {bound} must be finite and non-negative"
        )));
    }
    if !(span.1 >= span.0) {
        return Err(Error::InvalidInput(format!(
            "span ({}, {}) is not ordered",
            span.0, span.1
        )));
    }
    let mut out = Vec::new();
    if bound == 0.0 || span.1 == span.0 {
        return Ok(out);
    }
    let gaps = Exp::new(bound).expect("positive rate");
    let mut t = span.0;
    loop {
        t += gaps.sample(rng);
        if t > span.1 {
            break;
        }
        let r = rate_fn(t);
        if !(r >= 0.0) {
            return Err(Error::InvalidInput(format!(
                "rate function returned {r} at t = {t}"
            )));
        }
        if r > bound {
            return Err(Error::InvalidInput(format!(
                "rate {r} exceeds declared bound {bound} at t = {t}"
            )));
        }
        if rng.random::<f64>() * bound < r {
            out.push(t);
        }
    }
    Ok(out)
}

/// Draws event times from a nonhomogeneous Poisson process by Lewis-Shedler
/// thinning: homogeneous candidates at the bound rate, each kept with
/// probability rate_fn(t)/bound.
pub fn thinning_sampler<F: Fn(f64) -> f64>(
    rate_fn: F,
    rate_upper_bound: f64,
    span: (f64, f64),
    seed: u64,
) -> Result<Vec<f64>> {
    let mut rng = rng::stream(seed, &["thinning"]);
    thin(&rate_fn, rate_upper_bound, span, &mut rng)
}

/// Deterministic phenotype set with sparse random supports. Index 0 is the
/// slow-ramp target phenotype referenced by the default config.
pub fn default_phenotypes(k: usize, n_codes: usize, n_labs: usize, seed: u64) -> Vec<GroundTruthPhenotype> {
    let mut out = Vec::with_capacity(k);
    for j in 0..k {
        let id = format!("pheno_{j:02}");
        let mut r = rng::stream(seed, &["synth", "pheno", &id]);
        let target = j == 0;
        // The target rides on a broad support so its slow ramp survives curve
        // estimation noise; the rest stay sparse.
        let n_support_codes = if target { 7 } else { 4 + j % 3 }.min(n_codes);
        let n_support_labs = if target { 4 } else { 3 + j % 2 }.min(n_labs);
        let mut code_pool: Vec<usize> = (0..n_codes).collect();
        for i in 0..n_support_codes {
            let pick = r.random_range(i..n_codes);
            code_pool.swap(i, pick);
        }
        let mut lab_pool: Vec<usize> = (0..n_labs).collect();
        for i in 0..n_support_labs {
            let pick = r.random_range(i..n_labs);
            lab_pool.swap(i, pick);
        }
        let code_floor = if target { 3.0 } else { 2.5 };
        let lab_floor = if target { 20.0 } else { 12.0 };
        let mut code_loadings: Vec<(String, f64)> = code_pool[..n_support_codes]
            .iter()
            .map(|&c| (format!("code_{c:02}"), r.random_range(code_floor..6.0)))
            .collect();
        let mut lab_loadings: Vec<(String, f64)> = lab_pool[..n_support_labs]
            .iter()
            .map(|&c| {
                let magnitude = r.random_range(lab_floor..40.0);
                let sign = if r.random_range(0..2) == 0 { -1.0 } else { 1.0 };
                (format!("lab_{c:02}"), sign * magnitude)
            })
            .collect();
        code_loadings.sort_by(|a, b| a.0.cmp(&b.0));
        lab_loadings.sort_by(|a, b| a.0.cmp(&b.0));
        // Non-target amplitudes sit in a narrow per-phenotype band: expressed
        // levels then cluster at two points (off / on) instead of smearing
        // into a near-Gaussian blob that ICA cannot orient.
        let level = r.random_range(0.7..1.5);
        out.push(GroundTruthPhenotype {
            id,
            code_loadings,
            lab_loadings,
            // Non-target prevalence stays high enough that the expressed
            // fraction never drifts toward the q where a two-point mixture
            // loses its fourth-order signature (q(1-q) -> 1/6).
            prevalence: if target {
                0.45
            } else {
                r.random_range(0.35..0.5)
            },
            onset_frac: if target { (0.4, 1.0) } else { (-0.8, 0.9) },
            width_range: if target { (8.0, 11.0) } else { (0.3, 1.0) },
            amplitude_range: if target {
                (1.0, 1.25)
            } else {
                (level, level + 0.2)
            },
        });
    }
    out
}

fn validate(phenos: &[GroundTruthPhenotype], cfg: &SynthConfig) -> Result<()> {
    if phenos.is_empty() {
        return Err(Error::InvalidInput("at least one phenotype required".into()));
    }
    if cfg.n_patients == 0 {
        return Err(Error::InvalidInput("n_patients must be positive".into()));
    }
    if cfg.n_codes == 0 || cfg.n_labs == 0 {
        return Err(Error::InvalidInput(
            "need at least one code and one lab variable".into(),
        ));
    }
    if !(cfg.span_years.0 > 0.0 && cfg.span_years.1 >= cfg.span_years.0) {
        return Err(Error::InvalidInput(format!(
            "span range ({}, {}) invalid",
            cfg.span_years.0, cfg.span_years.1
        )));
    }
    if !(cfg.baseline_code_rate >= 0.0) || !(cfg.lab_rate_per_year > 0.0) {
        return Err(Error::InvalidInput(
            "baseline code rate must be >= 0 and lab rate > 0".into(),
        ));
    }
    if !(cfg.lab_noise_sd >= 0.0) {
        return Err(Error::InvalidInput("lab noise sd must be >= 0".into()));
    }
    if !(cfg.target.threshold > 0.0) || !(cfg.target.horizon_years > 0.0) {
        return Err(Error::InvalidInput(
            "target threshold and horizon must be positive".into(),
        ));
    }
    if !phenos.iter().any(|p| p.id == cfg.target.phenotype_id) {
        return Err(Error::InvalidInput(format!(
            "target phenotype {:?} not among the ground-truth set",
            cfg.target.phenotype_id
        )));
    }
    let code_ok = |v: &str| {
        v.strip_prefix("code_")
            .and_then(|s| s.parse::<usize>().ok())
            .is_some_and(|i| i < cfg.n_codes)
    };
    let lab_ok = |v: &str| {
        v.strip_prefix("lab_")
            .and_then(|s| s.parse::<usize>().ok())
            .is_some_and(|i| i < cfg.n_labs)
    };
    for ph in phenos {
        if !(0.0..=1.0).contains(&ph.prevalence) {
            return Err(Error::InvalidInput(format!(
                "{}: prevalence {} outside [0, 1]",
                ph.id, ph.prevalence
            )));
        }
        let nonzero = ph.code_loadings.iter().any(|&(_, l)| l != 0.0)
            || ph.lab_loadings.iter().any(|&(_, l)| l != 0.0);
        if !nonzero {
            return Err(Error::InvalidInput(format!("{}: all loadings zero", ph.id)));
        }
        if ph.code_loadings.iter().any(|&(_, l)| !(l >= 0.0)) {
            return Err(Error::InvalidInput(format!(
                "{}: code loadings must be non-negative",
                ph.id
            )));
        }
        if ph.lab_loadings.iter().any(|&(_, l)| !l.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "{}: non-finite lab loading",
                ph.id
            )));
        }
        for (v, _) in &ph.code_loadings {
            if !code_ok(v) {
                return Err(Error::InvalidInput(format!(
                    "{}: loading references unknown variable {v:?}",
                    ph.id
                )));
            }
        }
        for (v, _) in &ph.lab_loadings {
            if !lab_ok(v) {
                return Err(Error::InvalidInput(format!(
                    "{}: loading references unknown variable {v:?}",
                    ph.id
                )));
            }
        }
        for (name, vars) in [("code", &ph.code_loadings), ("lab", &ph.lab_loadings)] {
            let mut seen: Vec<&str> = vars.iter().map(|(v, _)| v.as_str()).collect();
            seen.sort_unstable();
            if seen.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidInput(format!(
                    "{}: duplicate {name} loading entry",
                    ph.id
                )));
            }
        }
        if !(ph.width_range.0 > 0.0 && ph.width_range.1 >= ph.width_range.0) {
            return Err(Error::InvalidInput(format!("{}: bad width range", ph.id)));
        }
        if !(ph.amplitude_range.0 > 0.0 && ph.amplitude_range.1 >= ph.amplitude_range.0) {
            return Err(Error::InvalidInput(format!("{}: bad amplitude range", ph.id)));
        }
        if !(ph.onset_frac.1 >= ph.onset_frac.0) || !ph.onset_frac.0.is_finite() {
            return Err(Error::InvalidInput(format!("{}: bad onset range", ph.id)));
        }
    }
    Ok(())
}

/// Generates a full synthetic cohort. Patient p's data depends only on
/// (seed, p), so generation parallelizes with a deterministic merge.
pub fn generate_cohort(
    phenos: &[GroundTruthPhenotype],
    cfg: &SynthConfig,
) -> Result<SynthCohort> {
    validate(phenos, cfg)?;
    let code_ids: Vec<String> = (0..cfg.n_codes).map(|i| format!("code_{i:02}")).collect();
    let lab_ids: Vec<String> = (0..cfg.n_labs).map(|i| format!("lab_{i:02}")).collect();
    let code_baselines: Vec<(String, f64)> = code_ids
        .iter()
        .map(|id| {
            let mut r = rng::stream(cfg.seed, &["synth", "baseline", id]);
            (id.clone(), cfg.baseline_code_rate * r.random_range(0.5..1.5))
        })
        .collect();
    let lab_baselines: Vec<(String, f64)> = lab_ids
        .iter()
        .map(|id| {
            let mut r = rng::stream(cfg.seed, &["synth", "baseline", id]);
            (id.clone(), r.random_range(50.0..150.0))
        })
        .collect();
    let target_idx = phenos
        .iter()
        .position(|p| p.id == cfg.target.phenotype_id)
        .expect("checked in validate");

    // Per-phenotype loading lookup tables in catalog order.
    let code_table: Vec<Vec<f64>> = phenos
        .iter()
        .map(|ph| {
            code_ids
                .iter()
                .map(|id| {
                    ph.code_loadings
                        .iter()
                        .find(|(v, _)| v == id)
                        .map_or(0.0, |&(_, l)| l)
                })
                .collect()
        })
        .collect();
    let lab_table: Vec<Vec<f64>> = phenos
        .iter()
        .map(|ph| {
            lab_ids
                .iter()
                .map(|id| {
                    ph.lab_loadings
                        .iter()
                        .find(|(v, _)| v == id)
                        .map_or(0.0, |&(_, l)| l)
                })
                .collect()
        })
        .collect();

    let per_patient: Vec<(PatientTruth, Vec<EventSeries>, Vec<ValueSeries>)> = (0..cfg
        .n_patients)
        .into_par_iter()
        .map(|p| -> Result<(PatientTruth, Vec<EventSeries>, Vec<ValueSeries>)> {
            let record_id = format!("p{p:05}");
            let mut rng = rng::stream(cfg.seed, &["synth", "patient", &record_id]);
            let span_len = draw_range(&mut rng, cfg.span_years);
            let start = cfg.start_year;
            let end = start + span_len;
            let mut active = Vec::new();
            for (j, ph) in phenos.iter().enumerate() {
                if rng.random::<f64>() < ph.prevalence {
                    let amplitude = draw_range(&mut rng, ph.amplitude_range);
                    let width = draw_range(&mut rng, ph.width_range);
                    let frac = draw_range(&mut rng, ph.onset_frac);
                    active.push(ActiveExpression {
                        phenotype: j,
                        amplitude,
                        onset: start + frac * span_len,
                        width,
                    });
                }
            }
            let diagnosis_time = active
                .iter()
                .find(|a| a.phenotype == target_idx)
                .and_then(|a| crossing_time(a, cfg.target.threshold))
                .filter(|&tc| tc <= end);

            let mut events = Vec::new();
            for (ci, cid) in code_ids.iter().enumerate() {
                let baseline = code_baselines[ci].1;
                let contribs: Vec<(&ActiveExpression, f64)> = active
                    .iter()
                    .filter_map(|a| {
                        let l = code_table[a.phenotype][ci];
                        (l != 0.0).then_some((a, l))
                    })
                    .collect();
                // Same summation order as the rate keeps bound >= rate
                // exactly in floating point.
                let bound = baseline
                    + contribs
                        .iter()
                        .map(|(a, l)| a.amplitude * l)
                        .sum::<f64>();
                let rate = |t: f64| {
                    baseline
                        + contribs
                            .iter()
                            .map(|(a, l)| {
                                a.amplitude * logistic((t - a.onset) / a.width) * l
                            })
                            .sum::<f64>()
                };
                let times = thin(&rate, bound, (start, end), &mut rng)?;
                if !times.is_empty() {
                    events.push(EventSeries {
                        record_id: record_id.clone(),
                        variable_id: cid.clone(),
                        times,
                    });
                }
            }

            let mut values = Vec::new();
            let noise = if cfg.lab_noise_sd > 0.0 {
                Some(Normal::new(0.0, cfg.lab_noise_sd).expect("valid sd"))
            } else {
                None
            };
            for (li, lid) in lab_ids.iter().enumerate() {
                let baseline = lab_baselines[li].1;
                let times = thin(
                    &|_| cfg.lab_rate_per_year,
                    cfg.lab_rate_per_year,
                    (start, end),
                    &mut rng,
                )?;
                if times.is_empty() {
                    continue;
                }
                let points: Vec<(f64, f64)> = times
                    .into_iter()
                    .map(|t| {
                        let mut v = baseline;
                        for a in &active {
                            let l = lab_table[a.phenotype][li];
                            if l != 0.0 {
                                v += a.amplitude * logistic((t - a.onset) / a.width) * l;
                            }
                        }
                        if let Some(n) = &noise {
                            v += n.sample(&mut rng);
                        }
                        (t, v)
                    })
                    .collect();
                values.push(ValueSeries {
                    record_id: record_id.clone(),
                    variable_id: lid.clone(),
                    points,
                });
            }

            Ok((
                PatientTruth {
                    record_id: record_id.clone(),
                    span: RecordSpan {
                        record_id,
                        start,
                        end,
                    },
                    active,
                    diagnosis_time,
                },
                events,
                values,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut events = Vec::new();
    let mut values = Vec::new();
    let mut patients = Vec::with_capacity(cfg.n_patients);
    for (truth, ev, va) in per_patient {
        events.extend(ev);
        values.extend(va);
        patients.push(truth);
    }
    Ok(SynthCohort {
        events,
        values,
        truth: GroundTruth {
            phenotypes: phenos.to_vec(),
            patients,
            code_baselines,
            lab_baselines,
            target: cfg.target.clone(),
        },
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| x.to_string())
}

fn write_truth<W: Write>(truth: &GroundTruth, writer: W) -> std::io::Result<()> {
    let mut w = BufWriter::new(writer);
    writeln!(w, "phenoflow-truth v1")?;
    writeln!(
        w,
        "target\t{}\t{}\t{}",
        truth.target.phenotype_id, truth.target.threshold, truth.target.horizon_years
    )?;
    writeln!(w, "phenotypes\t{}", truth.phenotypes.len())?;
    for ph in &truth.phenotypes {
        writeln!(
            w,
            "pheno\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            ph.id,
            ph.prevalence,
            ph.onset_frac.0,
            ph.onset_frac.1,
            ph.width_range.0,
            ph.width_range.1,
            ph.amplitude_range.0,
            ph.amplitude_range.1,
            ph.code_loadings.len() + ph.lab_loadings.len()
        )?;
        for (v, l) in &ph.code_loadings {
            writeln!(w, "load\tcode\t{v}\t{l}")?;
        }
        for (v, l) in &ph.lab_loadings {
            writeln!(w, "load\tlab\t{v}\t{l}")?;
        }
    }
    writeln!(
        w,
        "baselines\t{}",
        truth.code_baselines.len() + truth.lab_baselines.len()
    )?;
    for (v, b) in &truth.code_baselines {
        writeln!(w, "base\tcode\t{v}\t{b}")?;
    }
    for (v, b) in &truth.lab_baselines {
        writeln!(w, "base\tlab\t{v}\t{b}")?;
    }
    writeln!(w, "patients\t{}", truth.patients.len())?;
    for pt in &truth.patients {
        writeln!(
            w,
            "patient\t{}\t{}\t{}\t{}\t{}",
            pt.record_id,
            pt.span.start,
            pt.span.end,
            fmt_opt(pt.diagnosis_time),
            pt.active.len()
        )?;
        for a in &pt.active {
            writeln!(
                w,
                "active\t{}\t{}\t{}\t{}",
                a.phenotype, a.amplitude, a.onset, a.width
            )?;
        }
    }
    w.flush()
}

/// Writes the ground truth as a line-oriented text file that round-trips
/// every float exactly.
pub fn write_ground_truth_file(truth: &GroundTruth, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_truth(truth, file).map_err(|e| Error::io(path, e))
}

struct Lines<'a, B> {
    inner: std::io::Lines<B>,
    origin: &'a Path,
    lineno: usize,
}

impl<B: BufRead> Lines<'_, B> {
    fn next_line(&mut self) -> Result<String> {
        self.lineno += 1;
        match self.inner.next() {
            Some(Ok(l)) => Ok(l),
            Some(Err(e)) => Err(Error::io(self.origin, e)),
            None => Err(Error::malformed(
                self.origin,
                self.lineno,
                "truth file ended early",
            )),
        }
    }

    fn expect_fields(&mut self, tag: &str, n: usize) -> Result<Vec<String>> {
        let line = self.next_line()?;
        let fields: Vec<String> = line.split('\t').map(String::from).collect();
        if fields.len() != n || fields[0] != tag {
            return Err(Error::malformed(
                self.origin,
                self.lineno,
                format!("expected {n}-field {tag:?} row, got {line:?}"),
            ));
        }
        Ok(fields)
    }

    fn f64(&self, s: &str, what: &str) -> Result<f64> {
        s.parse::<f64>().map_err(|_| {
            Error::malformed(self.origin, self.lineno, format!("unparseable {what}: {s:?}"))
        })
    }

    fn usize(&self, s: &str, what: &str) -> Result<usize> {
        s.parse::<usize>().map_err(|_| {
            Error::malformed(self.origin, self.lineno, format!("unparseable {what}: {s:?}"))
        })
    }
}

fn read_truth<R: Read>(reader: R, origin: &Path) -> Result<GroundTruth> {
    let mut lines = Lines {
        inner: BufReader::new(reader).lines(),
        origin,
        lineno: 0,
    };
    let header = lines.next_line()?;
    if header != "phenoflow-truth v1" {
        return Err(Error::malformed(
            origin,
            1,
            format!("unrecognized truth header {header:?}"),
        ));
    }
    let t = lines.expect_fields("target", 4)?;
    let target = TargetSpec {
        phenotype_id: t[1].clone(),
        threshold: lines.f64(&t[2], "threshold")?,
        horizon_years: lines.f64(&t[3], "horizon")?,
    };
    let ph_row = lines.expect_fields("phenotypes", 2)?;
    let n_ph = lines.usize(&ph_row[1], "phenotype count")?;
    let mut phenotypes = Vec::with_capacity(n_ph);
    for _ in 0..n_ph {
        let f = lines.expect_fields("pheno", 10)?;
        let n_load = lines.usize(&f[9], "loading count")?;
        let mut code_loadings = Vec::new();
        let mut lab_loadings = Vec::new();
        for _ in 0..n_load {
            let l = lines.expect_fields("load", 4)?;
            let entry = (l[2].clone(), lines.f64(&l[3], "loading")?);
            match l[1].as_str() {
                "code" => code_loadings.push(entry),
                "lab" => lab_loadings.push(entry),
                other => {
                    return Err(Error::malformed(
                        origin,
                        lines.lineno,
                        format!("unknown loading kind {other:?}"),
                    ))
                }
            }
        }
        phenotypes.push(GroundTruthPhenotype {
            id: f[1].clone(),
            prevalence: lines.f64(&f[2], "prevalence")?,
            onset_frac: (lines.f64(&f[3], "onset")?, lines.f64(&f[4], "onset")?),
            width_range: (lines.f64(&f[5], "width")?, lines.f64(&f[6], "width")?),
            amplitude_range: (lines.f64(&f[7], "amplitude")?, lines.f64(&f[8], "amplitude")?),
            code_loadings,
            lab_loadings,
        });
    }
    let base_row = lines.expect_fields("baselines", 2)?;
    let n_base = lines.usize(&base_row[1], "baseline count")?;
    let mut code_baselines = Vec::new();
    let mut lab_baselines = Vec::new();
    for _ in 0..n_base {
        let b = lines.expect_fields("base", 4)?;
        let entry = (b[2].clone(), lines.f64(&b[3], "baseline")?);
        match b[1].as_str() {
            "code" => code_baselines.push(entry),
            "lab" => lab_baselines.push(entry),
            other => {
                return Err(Error::malformed(
                    origin,
                    lines.lineno,
                    format!("unknown baseline kind {other:?}"),
                ))
            }
        }
    }
    let pt_row = lines.expect_fields("patients", 2)?;
    let n_pt = lines.usize(&pt_row[1], "patient count")?;
    let mut patients = Vec::with_capacity(n_pt);
    for _ in 0..n_pt {
        let f = lines.expect_fields("patient", 6)?;
        let diagnosis_time = if f[4] == "-" {
            None
        } else {
            Some(lines.f64(&f[4], "diagnosis time")?)
        };
        let n_active = lines.usize(&f[5], "active count")?;
        let mut active = Vec::with_capacity(n_active);
        for _ in 0..n_active {
            let a = lines.expect_fields("active", 5)?;
            active.push(ActiveExpression {
                phenotype: lines.usize(&a[1], "phenotype index")?,
                amplitude: lines.f64(&a[2], "amplitude")?,
                onset: lines.f64(&a[3], "onset")?,
                width: lines.f64(&a[4], "width")?,
            });
        }
        patients.push(PatientTruth {
            record_id: f[1].clone(),
            span: RecordSpan {
                record_id: f[1].clone(),
                start: lines.f64(&f[2], "span start")?,
                end: lines.f64(&f[3], "span end")?,
            },
            active,
            diagnosis_time,
        });
    }
    Ok(GroundTruth {
        phenotypes,
        patients,
        code_baselines,
        lab_baselines,
        target,
    })
}

pub fn read_ground_truth_file(path: impl AsRef<Path>) -> Result<GroundTruth> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_truth(file, path)
}

/// Per-record earliest-diagnosis lookup used when labeling synthetic tasks.
pub fn diagnosis_by_record(truth: &GroundTruth) -> HashMap<&str, Option<f64>> {
    truth
        .patients
        .iter()
        .map(|p| (p.record_id.as_str(), p.diagnosis_time))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let n = n + n % 2;
        let h = (b - a) / n as f64;
        let mut acc = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            acc += w * f(a + i as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn thinning_accepts_every_candidate_at_the_bound() {
        let calls = Cell::new(0usize);
        let events = thinning_sampler(
            |_| {
                calls.set(calls.get() + 1);
                3.0
            },
            3.0,
            (0.0, 50.0),
            7,
        )
        .unwrap();
        assert_eq!(events.len(), calls.get());
        assert!(!events.is_empty());
        assert!(events.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn thinning_zero_rate_yields_no_events() {
        let events = thinning_sampler(|_| 0.0, 5.0, (0.0, 100.0), 3).unwrap();
        assert!(events.is_empty());
        let none = thinning_sampler(|_| 0.0, 0.0, (0.0, 100.0), 3).unwrap();
        assert!(none.is_empty());
    }

    #[test]
    fn thinning_detects_bound_violation() {
        let err = thinning_sampler(|_| 2.0, 1.0, (0.0, 50.0), 11).unwrap_err();
        assert!(err.is_validation());
        assert!(err.to_string().contains("bound"));
    }

    #[test]
    fn thinning_mean_count_matches_rate_integral() {
        let rate = |t: f64| 5.0 * (1.0 + (t).sin());
        let span = (0.0, 2.0 * std::f64::consts::PI);
        let expected = simpson(rate, span.0, span.1, 4096);
        let mut total = 0usize;
        let replicates = 10_000u64;
        for s in 0..replicates {
            total += thinning_sampler(rate, 10.0, span, s).unwrap().len();
        }
        let mean = total as f64 / replicates as f64;
        let rel = (mean - expected).abs() / expected;
        assert!(
            rel <= 0.02,
            "mean {mean} vs integral {expected} (rel {rel})"
        );
    }

    #[test]
    fn thinning_events_stay_inside_span() {
        let events = thinning_sampler(|t| 2.0 + (t * 0.3).cos(), 3.0, (10.0, 30.0), 19).unwrap();
        assert!(events.iter().all(|&t| (10.0..=30.0).contains(&t)));
    }

    fn single_code_pheno() -> Vec<GroundTruthPhenotype> {
        vec![GroundTruthPhenotype {
            id: "pheno_00".into(),
            code_loadings: vec![("code_00".into(), 5.0)],
            lab_loadings: vec![("lab_00".into(), 20.0)],
            prevalence: 1.0,
            onset_frac: (0.25, 0.25),
            width_range: (2.0, 2.0),
            amplitude_range: (1.0, 1.0),
        }]
    }

    fn tiny_config(n: usize, seed: u64) -> SynthConfig {
        SynthConfig {
            n_patients: n,
            n_codes: 2,
            n_labs: 1,
            span_years: (12.0, 12.0),
            baseline_code_rate: 0.0,
            lab_noise_sd: 0.0,
            seed,
            ..Default::default()
        }
    }

    #[test]
    fn event_counts_match_expression_integral() {
        // One phenotype always on: rate(t) = 5 · logistic((t - onset)/2).
        let cfg = tiny_config(200, 5);
        let cohort = generate_cohort(&single_code_pheno(), &cfg).unwrap();
        let onset = 2000.0 + 0.25 * 12.0;
        let w = 2.0;
        let softplus = |x: f64| (1.0 + x.exp()).ln();
        let expected_per_patient =
            5.0 * w * (softplus((2012.0 - onset) / w) - softplus((2000.0 - onset) / w));
        let total: usize = cohort
            .events
            .iter()
            .filter(|s| s.variable_id == "code_00")
            .map(|s| s.times.len())
            .sum();
        let expected = expected_per_patient * 200.0;
        let rel = (total as f64 - expected).abs() / expected;
        assert!(rel <= 0.10, "total {total} vs expected {expected} (rel {rel})");
    }

    #[test]
    fn activations_are_independent_across_phenotypes() {
        let phenos = default_phenotypes(3, 10, 5, 21);
        let cfg = SynthConfig {
            n_patients: 5_000,
            n_codes: 10,
            n_labs: 5,
            seed: 21,
            ..Default::default()
        };
        let cohort = generate_cohort(&phenos, &cfg).unwrap();
        let indicator: Vec<Vec<f64>> = (0..3)
            .map(|j| {
                cohort
                    .truth
                    .patients
                    .iter()
                    .map(|p| p.active.iter().any(|a| a.phenotype == j) as u8 as f64)
                    .collect()
            })
            .collect();
        for a in 0..3 {
            for b in a + 1..3 {
                let n = indicator[a].len() as f64;
                let ma = indicator[a].iter().sum::<f64>() / n;
                let mb = indicator[b].iter().sum::<f64>() / n;
                let cov = indicator[a]
                    .iter()
                    .zip(&indicator[b])
                    .map(|(x, y)| (x - ma) * (y - mb))
                    .sum::<f64>()
                    / n;
                let sa = (indicator[a].iter().map(|x| (x - ma).powi(2)).sum::<f64>() / n).sqrt();
                let sb = (indicator[b].iter().map(|x| (x - mb).powi(2)).sum::<f64>() / n).sqrt();
                let corr = cov / (sa * sb);
                assert!(corr.abs() <= 0.05, "phenotypes {a},{b}: corr {corr}");
            }
        }
    }

    #[test]
    fn zero_prevalence_gives_pure_baseline_labs() {
        let mut phenos = single_code_pheno();
        phenos[0].prevalence = 0.0;
        let cfg = SynthConfig {
            lab_noise_sd: 2.0,
            baseline_code_rate: 0.5,
            ..tiny_config(50, 9)
        };
        let cohort = generate_cohort(&phenos, &cfg).unwrap();
        let baseline = cohort.truth.lab_baselines[0].1;
        let mut vals = Vec::new();
        for s in cohort.values.iter().filter(|s| s.variable_id == "lab_00") {
            vals.extend(s.points.iter().map(|&(_, v)| v));
        }
        assert!(vals.len() > 1_000);
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!(
            (mean - baseline).abs() <= 0.5,
            "mean {mean} vs baseline {baseline}"
        );
        assert!(cohort.truth.patients.iter().all(|p| p.active.is_empty()));
    }

    #[test]
    fn events_lie_within_the_patient_span() {
        let phenos = default_phenotypes(4, 12, 6, 33);
        let cfg = SynthConfig {
            n_patients: 40,
            n_codes: 12,
            n_labs: 6,
            seed: 33,
            ..Default::default()
        };
        let cohort = generate_cohort(&phenos, &cfg).unwrap();
        let spans: HashMap<&str, &RecordSpan> = cohort
            .truth
            .patients
            .iter()
            .map(|p| (p.record_id.as_str(), &p.span))
            .collect();
        for s in &cohort.events {
            let span = spans[s.record_id.as_str()];
            assert!(s.times.iter().all(|&t| t >= span.start && t <= span.end));
        }
        for s in &cohort.values {
            let span = spans[s.record_id.as_str()];
            assert!(s.points.iter().all(|&(t, _)| t >= span.start && t <= span.end));
        }
    }

    #[test]
    fn generation_is_deterministic_and_per_patient_stable() {
        let phenos = default_phenotypes(3, 8, 4, 2);
        let cfg = SynthConfig {
            n_patients: 6,
            n_codes: 8,
            n_labs: 4,
            seed: 2,
            ..Default::default()
        };
        let a = generate_cohort(&phenos, &cfg).unwrap();
        let b = generate_cohort(&phenos, &cfg).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.values, b.values);
        assert_eq!(a.truth, b.truth);
        // Extending the cohort must not disturb earlier patients.
        let bigger = generate_cohort(
            &phenos,
            &SynthConfig {
                n_patients: 9,
                ..cfg
            },
        )
        .unwrap();
        assert_eq!(a.truth.patients, bigger.truth.patients[..6]);
        let first_six: Vec<&EventSeries> = bigger
            .events
            .iter()
            .filter(|s| s.record_id.as_str() < "p00006")
            .collect();
        assert_eq!(a.events.iter().collect::<Vec<_>>(), first_six);
    }

    #[test]
    fn diagnosis_time_is_the_threshold_crossing() {
        let a = ActiveExpression {
            phenotype: 0,
            amplitude: 1.0,
            onset: 2006.0,
            width: 2.0,
        };
        // amp · logistic((t − onset)/w) = θ at onset + w·ln(θ/(amp − θ)).
        let t = crossing_time(&a, 0.5).unwrap();
        assert!((t - 2006.0).abs() < 1e-12);
        let t = crossing_time(&a, 0.25).unwrap();
        assert!((t - (2006.0 + 2.0 * (0.25f64 / 0.75).ln())).abs() < 1e-12);
        let e = 1.0 * logistic((t - 2006.0) / 2.0);
        assert!((e - 0.25).abs() < 1e-12);
        assert_eq!(crossing_time(&a, 1.0), None);
        assert_eq!(crossing_time(&a, 1.5), None);
    }

    #[test]
    fn diagnosis_requires_crossing_inside_the_record() {
        let mut phenos = single_code_pheno();
        phenos[0].onset_frac = (0.5, 0.5); // onset 2006, crossing 2006 < 2012
        let cohort = generate_cohort(&phenos, &tiny_config(3, 4)).unwrap();
        for p in &cohort.truth.patients {
            assert!((p.diagnosis_time.unwrap() - 2006.0).abs() < 1e-9);
        }
        // Amplitude below the threshold: never crosses.
        phenos[0].amplitude_range = (0.4, 0.4);
        let cohort = generate_cohort(&phenos, &tiny_config(3, 4)).unwrap();
        assert!(cohort.truth.patients.iter().all(|p| p.diagnosis_time.is_none()));
    }

    #[test]
    fn expression_and_mixing_matrix_report_the_truth() {
        let phenos = single_code_pheno();
        let cfg = tiny_config(2, 8);
        let cohort = generate_cohort(&phenos, &cfg).unwrap();
        let catalog = VariableCatalog::from_observations(&cohort.events, &cohort.values).unwrap();
        let a = cohort.truth.mixing_matrix(&catalog);
        assert_eq!(a.shape(), (catalog.variables().len(), 1));
        let code_row = catalog
            .position(VarKind::Code, "code_00")
            .expect("code present");
        assert_eq!(a[(code_row, 0)], 5.0);
        let active = &cohort.truth.patients[0].active[0];
        let t = active.onset + active.width;
        let want = active.amplitude * logistic(1.0);
        assert!((cohort.truth.expression(0, 0, t) - want).abs() < 1e-12);
        assert_eq!(cohort.truth.expression(0, 7, t), 0.0);
    }

    #[test]
    fn ground_truth_file_round_trips() {
        let phenos = default_phenotypes(3, 8, 4, 6);
        let cfg = SynthConfig {
            n_patients: 5,
            n_codes: 8,
            n_labs: 4,
            seed: 6,
            ..Default::default()
        };
        let cohort = generate_cohort(&phenos, &cfg).unwrap();
        let mut buf = Vec::new();
        write_truth(&cohort.truth, &mut buf).unwrap();
        let back = read_truth(buf.as_slice(), Path::new("-")).unwrap();
        assert_eq!(back, cohort.truth);
        // Corrupt header rejected.
        assert!(read_truth(&b"nope\n"[..], Path::new("-")).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let phenos = single_code_pheno();
        let ok = tiny_config(3, 1);
        assert!(generate_cohort(&[], &ok).is_err());
        let mut bad = ok.clone();
        bad.span_years = (0.0, 10.0);
        assert!(generate_cohort(&phenos, &bad).is_err());
        let mut bad = ok.clone();
        bad.target.phenotype_id = "missing".into();
        assert!(generate_cohort(&phenos, &bad).is_err());
        let mut bad_ph = phenos.clone();
        bad_ph[0].code_loadings[0].1 = -1.0;
        assert!(generate_cohort(&bad_ph, &ok).is_err());
        let mut bad_ph = phenos.clone();
        bad_ph[0].code_loadings = vec![("code_99".into(), 1.0)];
        assert!(generate_cohort(&bad_ph, &ok).is_err());
        let mut bad_ph = phenos.clone();
        bad_ph[0].code_loadings = vec![];
        bad_ph[0].lab_loadings = vec![("lab_00".into(), 0.0)];
        assert!(generate_cohort(&bad_ph, &ok).is_err());
    }

    #[test]
    fn default_phenotypes_are_deterministic_and_distinct() {
        let a = default_phenotypes(6, 25, 15, 42);
        let b = default_phenotypes(6, 25, 15, 42);
        assert_eq!(a, b);
        assert_eq!(a.len(), 6);
        for ph in &a {
            assert!(!ph.code_loadings.is_empty());
            assert!(!ph.lab_loadings.is_empty());
        }
        let supports: Vec<Vec<&str>> = a
            .iter()
            .map(|p| p.code_loadings.iter().map(|(v, _)| v.as_str()).collect())
            .collect();
        for i in 0..supports.len() {
            for j in i + 1..supports.len() {
                assert_ne!(supports[i], supports[j], "phenotypes {i} and {j}");
            }
        }
    }
}
