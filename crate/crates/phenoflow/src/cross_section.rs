//! Cross-section sampling: dense data matrix assembly from curve sets.
//!
//! Each record's curves are evaluated at randomly drawn sample times; every
//! evaluation instant contributes one matrix column holding all catalog
//! variables. Variables a record never exhibited are filled per kind: zero
//! intensity for codes, the population median for labs.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use rand::RngExt;
use rand_distr::{Distribution, Poisson};
use rayon::prelude::*;

use crate::curves::{evaluate_curve, CurveKind, Grid, LongitudinalCurve};
use crate::error::{Error, Result};
use crate::ingest::{EventSeries, RecordSpan, ValueSeries};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKind {
    Code,
    Lab,
}

impl VarKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            VarKind::Code => "code",
            VarKind::Lab => "lab",
        }
    }

    pub fn curve_kind(&self) -> CurveKind {
        match self {
            VarKind::Code => CurveKind::Intensity,
            VarKind::Lab => CurveKind::Value,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub id: String,
    pub kind: VarKind,
    /// Population median; present for labs, absent for codes.
    pub median: Option<f64>,
}

/// Fixed, ordered list of all variables: grouped codes first, then labs,
/// each block sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct VariableCatalog {
    vars: Vec<Variable>,
    index: HashMap<(VarKind, String), usize>,
}

impl VariableCatalog {
    pub fn new(
        code_ids: Vec<String>,
        lab_ids: Vec<String>,
        medians: &BTreeMap<String, f64>,
    ) -> Result<VariableCatalog> {
        let mut codes = code_ids;
        codes.sort();
        let mut labs = lab_ids;
        labs.sort();
        let mut vars = Vec::with_capacity(codes.len() + labs.len());
        for id in codes {
            vars.push(Variable {
                id,
                kind: VarKind::Code,
                median: None,
            });
        }
        for id in labs {
            let median = *medians.get(&id).ok_or_else(|| {
                Error::InvalidInput(format!("lab {id:?} has no population median"))
            })?;
            if !median.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "lab {id:?} median is not finite"
                )));
            }
            vars.push(Variable {
                id,
                kind: VarKind::Lab,
                median: Some(median),
            });
        }
        let mut index = HashMap::with_capacity(vars.len());
        let mut seen_ids = HashMap::new();
        for (i, v) in vars.iter().enumerate() {
            if let Some(prev) = seen_ids.insert(v.id.clone(), v.kind) {
                return Err(Error::InvalidInput(format!(
                    "variable id {:?} appears as both {} and {}",
                    v.id,
                    prev.as_str(),
                    v.kind.as_str()
                )));
            }
            index.insert((v.kind, v.id.clone()), i);
        }
        Ok(VariableCatalog { vars, index })
    }

    /// Catalog of every variable observed in the cohort, with lab medians
    /// computed over all raw observations.
    pub fn from_observations(
        events: &[EventSeries],
        values: &[ValueSeries],
    ) -> Result<VariableCatalog> {
        let mut code_ids: Vec<String> = events.iter().map(|s| s.variable_id.clone()).collect();
        code_ids.sort();
        code_ids.dedup();
        let mut lab_ids: Vec<String> = values.iter().map(|s| s.variable_id.clone()).collect();
        lab_ids.sort();
        lab_ids.dedup();
        let medians = compute_population_medians(values)?;
        VariableCatalog::new(code_ids, lab_ids, &medians)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn variables(&self) -> &[Variable] {
        &self.vars
    }

    pub fn get(&self, i: usize) -> &Variable {
        &self.vars[i]
    }

    pub fn position(&self, kind: VarKind, id: &str) -> Option<usize> {
        self.index.get(&(kind, id.to_string())).copied()
    }
}

/// Median of raw values; even counts average the two middle elements.
pub fn median(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("median of empty set".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("median of non-finite values".into()));
    }
    let mut v = values.to_vec();
    let n = v.len();
    if n % 2 == 1 {
        let (_, mid, _) = v.select_nth_unstable_by(n / 2, f64::total_cmp);
        Ok(*mid)
    } else {
        let (below, upper, _) = v.select_nth_unstable_by(n / 2, f64::total_cmp);
        let lower = below.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Ok((lower + *upper) / 2.0)
    }
}

/// Per-lab medians over all raw observations across the cohort.
pub fn compute_population_medians(values: &[ValueSeries]) -> Result<BTreeMap<String, f64>> {
    let mut pooled: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for series in values {
        pooled
            .entry(series.variable_id.clone())
            .or_default()
            .extend(series.points.iter().map(|&(_, v)| v));
    }
    let mut out = BTreeMap::new();
    for (id, vals) in pooled {
        if vals.is_empty() {
            return Err(Error::InvalidInput(format!(
                "lab {id:?} has no observations"
            )));
        }
        out.insert(id.clone(), median(&vals)?);
    }
    Ok(out)
}

/// Random cross-section instants for one record: a Poisson-distributed count
/// (at least 1) of i.i.d. uniform times over the span, sorted.
pub fn draw_sample_times(span: &RecordSpan, rate: f64, seed: u64) -> Result<Vec<f64>> {
    if !(rate > 0.0) || !rate.is_finite() {
        return Err(Error::InvalidInput(format!("invalid sample rate {rate}")));
    }
    let mut rng = rng::stream(seed, &["sample", &span.record_id]);
    let expected = rate * span.length();
    let count = Poisson::new(expected)
        .map_err(|e| Error::InvalidInput(format!("invalid sample count distribution: {e}")))?
        .sample(&mut rng) as usize;
    let count = count.max(1);
    let mut times: Vec<f64> = (0..count)
        .map(|_| rng.random_range(span.start..span.end))
        .collect();
    times.sort_by(f64::total_cmp);
    Ok(times)
}

/// All curves of one record, sharing a single grid that covers the span.
#[derive(Debug, Clone)]
pub struct RecordCurveSet {
    pub record_id: String,
    grid: Grid,
    curves: HashMap<(VarKind, String), LongitudinalCurve>,
}

impl RecordCurveSet {
    pub fn new(record_id: impl Into<String>, grid: Grid) -> RecordCurveSet {
        RecordCurveSet {
            record_id: record_id.into(),
            grid,
            curves: HashMap::new(),
        }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn insert(&mut self, curve: LongitudinalCurve) -> Result<()> {
        if curve.grid != self.grid {
            return Err(Error::ShapeMismatch(format!(
                "curve grid differs from record grid for {}/{}",
                curve.record_id, curve.variable_id
            )));
        }
        let kind = match curve.kind {
            CurveKind::Intensity => VarKind::Code,
            CurveKind::Value => VarKind::Lab,
        };
        self.curves.insert((kind, curve.variable_id.clone()), curve);
        Ok(())
    }

    pub fn curves(&self) -> impl Iterator<Item = &LongitudinalCurve> {
        self.curves.values()
    }

    pub fn curve(&self, kind: VarKind, id: &str) -> Option<&LongitudinalCurve> {
        self.curves.get(&(kind, id.to_string()))
    }
}

/// One matrix column's origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub record_id: String,
    pub time: f64,
}

/// The dense data matrix: one row per catalog variable, one column per
/// sampled instant.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossSectionMatrix {
    pub x: DMatrix<f64>,
    pub provenance: Vec<Instance>,
    pub catalog: VariableCatalog,
}

/// Assembles the cross-section matrix. `times_per_record` aligns with
/// `cohort`; columns appear in record order, then time order.
pub fn build_matrix(
    cohort: &[RecordCurveSet],
    catalog: &VariableCatalog,
    times_per_record: &[Vec<f64>],
) -> Result<CrossSectionMatrix> {
    if cohort.len() != times_per_record.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} curve sets vs {} sample-time lists",
            cohort.len(),
            times_per_record.len()
        )));
    }
    for set in cohort {
        for curve in set.curves() {
            let kind = match curve.kind {
                CurveKind::Intensity => VarKind::Code,
                CurveKind::Value => VarKind::Lab,
            };
            if catalog.position(kind, &curve.variable_id).is_none() {
                return Err(Error::InvalidInput(format!(
                    "variable {}:{} of record {} is not in the catalog",
                    kind.as_str(),
                    curve.variable_id,
                    set.record_id
                )));
            }
        }
    }
    let n = catalog.len();
    let blocks: Vec<Result<Vec<f64>>> = cohort
        .par_iter()
        .zip(times_per_record.par_iter())
        .map(|(set, times)| {
            let mut sorted = times.clone();
            sorted.sort_by(f64::total_cmp);
            let mut block = vec![0.0f64; n * sorted.len()];
            for (j, &t) in sorted.iter().enumerate() {
                if t < set.grid().start() || t > set.grid().end() {
                    return Err(Error::InvalidInput(format!(
                        "sample time {t} outside span [{}, {}] of record {}",
                        set.grid().start(),
                        set.grid().end(),
                        set.record_id
                    )));
                }
                for (v, var) in catalog.variables().iter().enumerate() {
                    let entry = match set.curve(var.kind, &var.id) {
                        Some(curve) => evaluate_curve(curve, t)?,
                        None => match var.kind {
                            VarKind::Code => 0.0,
                            VarKind::Lab => var.median.unwrap(),
                        },
                    };
                    block[j * n + v] = entry;
                }
            }
            Ok(block)
        })
        .collect();
    let mut m = 0usize;
    let mut columns: Vec<f64> = Vec::new();
    let mut provenance = Vec::new();
    for ((set, times), block) in cohort.iter().zip(times_per_record).zip(blocks) {
        let block = block?;
        let mut sorted = times.clone();
        sorted.sort_by(f64::total_cmp);
        for &t in &sorted {
            provenance.push(Instance {
                record_id: set.record_id.clone(),
                time: t,
            });
        }
        columns.extend_from_slice(&block);
        m += sorted.len();
    }
    let x = DMatrix::from_vec(n, m, columns);
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix contains non-finite entries".into()));
    }
    Ok(CrossSectionMatrix {
        x,
        provenance,
        catalog: catalog.clone(),
    })
}

fn check_token(token: &str, what: &str) -> Result<()> {
    if token.is_empty() || token.contains([':', '\t', '\n', '\r']) {
        return Err(Error::InvalidInput(format!(
            "{what} {token:?} cannot be stored (empty or contains ':', tab, or newline)"
        )));
    }
    Ok(())
}

/// Writes the matrix file: `n m` on line 1, catalog entries on line 2,
/// instance provenance triples on line 3, then the row-major payload as
/// 64-bit little-endian floats.
pub fn write_matrix(path: impl AsRef<Path>, matrix: &CrossSectionMatrix) -> Result<()> {
    let path = path.as_ref();
    let n = matrix.x.nrows();
    let m = matrix.x.ncols();
    if matrix.catalog.len() != n || matrix.provenance.len() != m {
        return Err(Error::ShapeMismatch(format!(
            "matrix {n}x{m} vs catalog {} and provenance {}",
            matrix.catalog.len(),
            matrix.provenance.len()
        )));
    }
    let mut header = format!("{n} {m}\n");
    let vars: Vec<String> = matrix
        .catalog
        .variables()
        .iter()
        .map(|v| -> Result<String> {
            check_token(&v.id, "variable id")?;
            Ok(match v.kind {
                VarKind::Code => format!("code:{}", v.id),
                VarKind::Lab => format!("lab:{}:{}", v.id, v.median.unwrap()),
            })
        })
        .collect::<Result<_>>()?;
    header.push_str(&vars.join("\t"));
    header.push('\n');
    let insts: Vec<String> = matrix
        .provenance
        .iter()
        .enumerate()
        .map(|(j, inst)| -> Result<String> {
            check_token(&inst.record_id, "record id")?;
            Ok(format!("{j}:{}:{}", inst.record_id, inst.time))
        })
        .collect::<Result<_>>()?;
    header.push_str(&insts.join("\t"));
    header.push('\n');
    let mut payload = Vec::with_capacity(n * m * 8);
    for i in 0..n {
        for j in 0..m {
            payload.extend_from_slice(&matrix.x[(i, j)].to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(&payload))
        .map_err(|e| Error::io(path, e))
}

fn read_header_line(
    reader: &mut impl std::io::BufRead,
    path: &Path,
    lineno: usize,
) -> Result<String> {
    let mut line = String::new();
    let n = reader
        .read_line(&mut line)
        .map_err(|e| Error::io(path, e))?;
    if n == 0 || !line.ends_with('\n') {
        return Err(Error::malformed(path, lineno, "truncated header"));
    }
    line.pop();
    Ok(line)
}

/// Reads a matrix file written by [`write_matrix`].
pub fn read_matrix(path: impl AsRef<Path>) -> Result<CrossSectionMatrix> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let dims = read_header_line(&mut reader, path, 1)?;
    let (n, m) = dims
        .split_once(' ')
        .and_then(|(a, b)| Some((a.parse::<usize>().ok()?, b.parse::<usize>().ok()?)))
        .ok_or_else(|| Error::malformed(path, 1, format!("bad dimension line {dims:?}")))?;
    let var_line = read_header_line(&mut reader, path, 2)?;
    let mut code_ids = Vec::new();
    let mut lab_ids = Vec::new();
    let mut medians = BTreeMap::new();
    let mut order = Vec::new();
    if !var_line.is_empty() {
        for entry in var_line.split('\t') {
            let mut parts = entry.split(':');
            match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some("code"), Some(id), None, None) => {
                    code_ids.push(id.to_string());
                    order.push((VarKind::Code, id.to_string()));
                }
                (Some("lab"), Some(id), Some(med), None) => {
                    let med: f64 = med.parse().map_err(|_| {
                        Error::malformed(path, 2, format!("bad median in {entry:?}"))
                    })?;
                    lab_ids.push(id.to_string());
                    medians.insert(id.to_string(), med);
                    order.push((VarKind::Lab, id.to_string()));
                }
                _ => {
                    return Err(Error::malformed(
                        path,
                        2,
                        format!("bad variable entry {entry:?}"),
                    ))
                }
            }
        }
    }
    let catalog = VariableCatalog::new(code_ids, lab_ids, &medians)?;
    if catalog.len() != n {
        return Err(Error::malformed(
            path,
            2,
            format!("{} variables declared, dimension says {n}", catalog.len()),
        ));
    }
    for (i, (kind, id)) in order.iter().enumerate() {
        if catalog.position(*kind, id) != Some(i) {
            return Err(Error::malformed(
                path,
                2,
                "variable entries are not in catalog order (codes sorted, then labs sorted)",
            ));
        }
    }
    let inst_line = read_header_line(&mut reader, path, 3)?;
    let mut provenance = Vec::with_capacity(m);
    if !inst_line.is_empty() {
        for entry in inst_line.split('\t') {
            let mut parts = entry.splitn(3, ':');
            let (idx, record_id, time) = match (parts.next(), parts.next(), parts.next()) {
                (Some(i), Some(r), Some(t)) => (i, r, t),
                _ => {
                    return Err(Error::malformed(
                        path,
                        3,
                        format!("bad instance entry {entry:?}"),
                    ))
                }
            };
            let idx: usize = idx
                .parse()
                .map_err(|_| Error::malformed(path, 3, format!("bad instance index in {entry:?}")))?;
            if idx != provenance.len() {
                return Err(Error::malformed(
                    path,
                    3,
                    format!("instance index {idx} out of order"),
                ));
            }
            let time: f64 = time
                .parse()
                .map_err(|_| Error::malformed(path, 3, format!("bad instance time in {entry:?}")))?;
            provenance.push(Instance {
                record_id: record_id.to_string(),
                time,
            });
        }
    }
    if provenance.len() != m {
        return Err(Error::malformed(
            path,
            3,
            format!("{} instances declared, dimension says {m}", provenance.len()),
        ));
    }
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    if payload.len() != n * m * 8 {
        return Err(Error::InvalidInput(format!(
            "{}: payload is {} bytes, expected {}",
            path.display(),
            payload.len(),
            n * m * 8
        )));
    }
    let mut x = DMatrix::zeros(n, m);
    for i in 0..n {
        for j in 0..m {
            let off = (i * m + j) * 8;
            let v = f64::from_le_bytes(payload[off..off + 8].try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "{}: non-finite entry at ({i}, {j})",
                    path.display()
                )));
            }
            x[(i, j)] = v;
        }
    }
    for (i, var) in catalog.variables().iter().enumerate() {
        if var.kind == VarKind::Code && x.row(i).iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "{}: negative intensity in code row {}",
                path.display(),
                var.id
            )));
        }
    }
    Ok(CrossSectionMatrix {
        x,
        provenance,
        catalog,
    })
}

/// Fits every record's curves: one intensity curve per observed code, one
/// value curve per observed lab, all on a shared per-record grid covering
/// the span. Output order follows `spans`.
pub fn fit_cohort_curves(
    spans: &[RecordSpan],
    events: &[EventSeries],
    values: &[ValueSeries],
    points_per_year: f64,
    intensity: &crate::curves::IntensityConfig,
) -> Result<Vec<RecordCurveSet>> {
    let mut events_by_record: HashMap<&str, Vec<&EventSeries>> = HashMap::new();
    for s in events {
        events_by_record.entry(&s.record_id).or_default().push(s);
    }
    let mut values_by_record: HashMap<&str, Vec<&ValueSeries>> = HashMap::new();
    for s in values {
        values_by_record.entry(&s.record_id).or_default().push(s);
    }
    spans
        .par_iter()
        .map(|span| -> Result<RecordCurveSet> {
            let grid = Grid::covering(span, points_per_year)?;
            let mut set = RecordCurveSet::new(span.record_id.clone(), grid.clone());
            if let Some(series) = events_by_record.get(span.record_id.as_str()) {
                for s in series {
                    set.insert(crate::curves::estimate_intensity(s, span, &grid, intensity)?)?;
                }
            }
            if let Some(series) = values_by_record.get(span.record_id.as_str()) {
                for s in series {
                    set.insert(crate::curves::interpolate_values(s, span, &grid)?)?;
                }
            }
            Ok(set)
        })
        .collect()
}

/// Writes a cohort's curve sets: a text header describing every record's
/// grid and curve list, then all curve values as 64-bit little-endian
/// floats in header order.
pub fn write_curve_file(
    path: impl AsRef<Path>,
    cohort: &[RecordCurveSet],
    points_per_year: f64,
) -> Result<()> {
    let path = path.as_ref();
    let mut header = format!("{}\n", cohort.len());
    let mut payload: Vec<u8> = Vec::new();
    for set in cohort {
        check_token(&set.record_id, "record id")?;
        let grid = set.grid();
        let mut curves: Vec<&LongitudinalCurve> = set.curves().collect();
        curves.sort_by(|a, b| {
            let rank = |k: &CurveKind| matches!(k, CurveKind::Value) as u8;
            rank(&a.kind)
                .cmp(&rank(&b.kind))
                .then_with(|| a.variable_id.cmp(&b.variable_id))
        });
        use std::fmt::Write;
        let _ = writeln!(
            header,
            "{}\t{}\t{}\t{}\t{}\t{}",
            set.record_id,
            grid.start(),
            grid.end(),
            points_per_year,
            grid.len(),
            curves.len()
        );
        for curve in curves {
            check_token(&curve.variable_id, "variable id")?;
            let kind = match curve.kind {
                CurveKind::Intensity => "intensity",
                CurveKind::Value => "value",
            };
            let _ = writeln!(header, "{kind}:{}", curve.variable_id);
            for v in &curve.values {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(header.as_bytes())
        .and_then(|_| file.write_all(&payload))
        .map_err(|e| Error::io(path, e))
}

/// Reads a curve file written by [`write_curve_file`].
pub fn read_curve_file(path: impl AsRef<Path>) -> Result<Vec<RecordCurveSet>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = std::io::BufReader::new(file);
    let mut lineno = 1usize;
    let count_line = read_header_line(&mut reader, path, lineno)?;
    let n_records: usize = count_line
        .trim()
        .parse()
        .map_err(|_| Error::malformed(path, 1, format!("bad record count {count_line:?}")))?;
    struct PendingCurve {
        kind: CurveKind,
        variable_id: String,
    }
    struct PendingRecord {
        record_id: String,
        grid: Grid,
        curves: Vec<PendingCurve>,
    }
    let mut pending = Vec::with_capacity(n_records);
    for _ in 0..n_records {
        lineno += 1;
        let line = read_header_line(&mut reader, path, lineno)?;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(Error::malformed(
                path,
                lineno,
                format!("expected 6 record fields, got {}", fields.len()),
            ));
        }
        let num = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::malformed(path, lineno, format!("bad number {s:?}")))
        };
        let (start, end, ppy) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        let n_points: usize = fields[4]
            .parse()
            .map_err(|_| Error::malformed(path, lineno, format!("bad point count {:?}", fields[4])))?;
        let n_curves: usize = fields[5]
            .parse()
            .map_err(|_| Error::malformed(path, lineno, format!("bad curve count {:?}", fields[5])))?;
        let grid = Grid::new(start, end, ppy)?;
        if grid.len() != n_points {
            return Err(Error::malformed(
                path,
                lineno,
                format!("grid rebuilds to {} points, header says {n_points}", grid.len()),
            ));
        }
        let mut curves = Vec::with_capacity(n_curves);
        for _ in 0..n_curves {
            lineno += 1;
            let line = read_header_line(&mut reader, path, lineno)?;
            let (kind, variable_id) = match line.split_once(':') {
                Some(("intensity", id)) => (CurveKind::Intensity, id.to_string()),
                Some(("value", id)) => (CurveKind::Value, id.to_string()),
                _ => {
                    return Err(Error::malformed(
                        path,
                        lineno,
                        format!("bad curve entry {line:?}"),
                    ))
                }
            };
            curves.push(PendingCurve { kind, variable_id });
        }
        pending.push(PendingRecord {
            record_id: fields[0].to_string(),
            grid,
            curves,
        });
    }
    let total_values: usize = pending
        .iter()
        .map(|r| r.grid.len() * r.curves.len())
        .sum();
    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    if payload.len() != total_values * 8 {
        return Err(Error::InvalidInput(format!(
            "{}: payload is {} bytes, expected {}",
            path.display(),
            payload.len(),
            total_values * 8
        )));
    }
    let mut off = 0usize;
    let mut out = Vec::with_capacity(pending.len());
    for rec in pending {
        let mut set = RecordCurveSet::new(rec.record_id.clone(), rec.grid.clone());
        for c in rec.curves {
            let n = rec.grid.len();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(f64::from_le_bytes(payload[off..off + 8].try_into().unwrap()));
                off += 8;
            }
            set.insert(LongitudinalCurve {
                record_id: rec.record_id.clone(),
                variable_id: c.variable_id,
                kind: c.kind,
                grid: rec.grid.clone(),
                values,
            })?;
        }
        out.push(set);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::curves::IntensityConfig;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn span(id: &str, start: f64, end: f64) -> RecordSpan {
        RecordSpan {
            record_id: id.into(),
            start,
            end,
        }
    }

    #[test]
    fn median_odd_and_even() {
        assert_eq!(median(&[1.0, 2.0, 3.0]).unwrap(), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 10.0]).unwrap(), 2.5);
        assert_eq!(median(&[5.0]).unwrap(), 5.0);
        assert!(median(&[]).is_err());
        assert!(median(&[1.0, f64::NAN]).is_err());
    }

    proptest! {
        #[test]
        fn median_matches_full_sort_oracle(mut v in proptest::collection::vec(-1e6f64..1e6, 1..1000)) {
            let got = median(&v).unwrap();
            v.sort_by(f64::total_cmp);
            let n = v.len();
            let expected = if n % 2 == 1 {
                v[n / 2]
            } else {
                (v[n / 2 - 1] + v[n / 2]) / 2.0
            };
            prop_assert_eq!(got, expected);
        }
    }

    #[test]
    fn catalog_orders_codes_then_labs() {
        let medians: BTreeMap<String, f64> =
            [("AST".to_string(), 30.0), ("ALT".to_string(), 25.0)].into();
        let cat = VariableCatalog::new(
            vec!["571.8".into(), "250.0".into()],
            vec!["AST".into(), "ALT".into()],
            &medians,
        )
        .unwrap();
        let ids: Vec<&str> = cat.variables().iter().map(|v| v.id.as_str()).collect();
        assert_eq!(ids, vec!["250.0", "571.8", "ALT", "AST"]);
        assert_eq!(cat.position(VarKind::Code, "571.8"), Some(1));
        assert_eq!(cat.position(VarKind::Lab, "AST"), Some(3));
        assert_eq!(cat.position(VarKind::Lab, "571.8"), None);
    }

    #[test]
    fn catalog_rejects_lab_without_median() {
        let medians = BTreeMap::new();
        assert!(VariableCatalog::new(vec![], vec!["AST".into()], &medians).is_err());
    }

    #[test]
    fn catalog_rejects_duplicate_id_across_kinds() {
        let medians: BTreeMap<String, f64> = [("X".to_string(), 1.0)].into();
        assert!(VariableCatalog::new(vec!["X".into()], vec!["X".into()], &medians).is_err());
    }

    #[test]
    fn population_medians_pool_across_records() {
        let values = vec![
            ValueSeries {
                record_id: "p1".into(),
                variable_id: "AST".into(),
                points: vec![(2000.0, 1.0), (2001.0, 2.0)],
            },
            ValueSeries {
                record_id: "p2".into(),
                variable_id: "AST".into(),
                points: vec![(2000.0, 3.0), (2001.0, 10.0)],
            },
        ];
        let medians = compute_population_medians(&values).unwrap();
        assert_eq!(medians["AST"], 2.5);
    }

    #[test]
    fn sample_times_sorted_within_span_at_least_one() {
        for seed in 0..20 {
            let sp = span("p1", 2000.0, 2000.0 + 1.0 / 365.0);
            let times = draw_sample_times(&sp, 1.0, seed).unwrap();
            assert!(!times.is_empty());
            assert!(times.windows(2).all(|w| w[0] <= w[1]));
            assert!(times.iter().all(|&t| sp.contains(t)));
        }
    }

    #[test]
    fn sample_count_tracks_rate() {
        // 10,000 draws on a 5-year span at rate 2.0: mean within 3% of 10.
        let mut total = 0usize;
        for i in 0..10_000u64 {
            let sp = span(&format!("p{i}"), 2000.0, 2005.0);
            let times = draw_sample_times(&sp, 2.0, 77).unwrap();
            total += times.len();
        }
        let mean = total as f64 / 10_000.0;
        assert_relative_eq!(mean, 10.0, max_relative = 0.03);
    }

    #[test]
    fn sample_times_deterministic_per_seed_and_record() {
        let sp = span("p1", 2000.0, 2010.0);
        let a = draw_sample_times(&sp, 1.0, 5).unwrap();
        let b = draw_sample_times(&sp, 1.0, 5).unwrap();
        assert_eq!(a, b);
        let c = draw_sample_times(&sp, 1.0, 6).unwrap();
        assert_ne!(a, c);
    }

    fn tiny_cohort() -> (Vec<RecordCurveSet>, VariableCatalog, Vec<Vec<f64>>) {
        let sp = span("p1", 2000.0, 2010.0);
        let grid = Grid::covering(&sp, 52.0).unwrap();
        let mut set = RecordCurveSet::new("p1", grid.clone());
        let ev = EventSeries {
            record_id: "p1".into(),
            variable_id: "571.8".into(),
            times: vec![2001.0, 2002.0, 2002.5],
        };
        set.insert(
            crate::curves::estimate_intensity(&ev, &sp, &grid, &IntensityConfig::default())
                .unwrap(),
        )
        .unwrap();
        let vs = ValueSeries {
            record_id: "p1".into(),
            variable_id: "AST".into(),
            points: vec![(2001.0, 20.0), (2005.0, 40.0)],
        };
        set.insert(crate::curves::interpolate_values(&vs, &sp, &grid).unwrap())
            .unwrap();
        let medians: BTreeMap<String, f64> =
            [("AST".to_string(), 31.5), ("ALT".to_string(), 4.3)].into();
        let catalog = VariableCatalog::new(
            vec!["571.8".into(), "250.0".into()],
            vec!["AST".into(), "ALT".into()],
            &medians,
        )
        .unwrap();
        (vec![set], catalog, vec![vec![2003.0, 2001.5, 2008.0]])
    }

    #[test]
    fn matrix_applies_fill_rules_exactly() {
        let (cohort, catalog, times) = tiny_cohort();
        let m = build_matrix(&cohort, &catalog, &times).unwrap();
        assert_eq!(m.x.nrows(), 4);
        assert_eq!(m.x.ncols(), 3);
        let absent_code = catalog.position(VarKind::Code, "250.0").unwrap();
        let absent_lab = catalog.position(VarKind::Lab, "ALT").unwrap();
        for j in 0..3 {
            assert_eq!(m.x[(absent_code, j)], 0.0);
            assert_eq!(m.x[(absent_lab, j)], 4.3);
        }
    }

    #[test]
    fn matrix_columns_sorted_by_time_and_match_curves() {
        let (cohort, catalog, times) = tiny_cohort();
        let m = build_matrix(&cohort, &catalog, &times).unwrap();
        let ts: Vec<f64> = m.provenance.iter().map(|i| i.time).collect();
        assert_eq!(ts, vec![2001.5, 2003.0, 2008.0]);
        let code_row = catalog.position(VarKind::Code, "571.8").unwrap();
        let lab_row = catalog.position(VarKind::Lab, "AST").unwrap();
        for (j, &t) in ts.iter().enumerate() {
            let code_curve = cohort[0].curve(VarKind::Code, "571.8").unwrap();
            let lab_curve = cohort[0].curve(VarKind::Lab, "AST").unwrap();
            assert_eq!(m.x[(code_row, j)], evaluate_curve(code_curve, t).unwrap());
            assert_eq!(m.x[(lab_row, j)], evaluate_curve(lab_curve, t).unwrap());
        }
    }

    #[test]
    fn matrix_rejects_time_outside_span() {
        let (cohort, catalog, _) = tiny_cohort();
        let err = build_matrix(&cohort, &catalog, &[vec![1999.0]]).unwrap_err();
        assert!(err.is_validation());
    }

    #[test]
    fn matrix_rejects_unknown_variable() {
        let (cohort, _, times) = tiny_cohort();
        let medians: BTreeMap<String, f64> = [("AST".to_string(), 31.5)].into();
        let smaller = VariableCatalog::new(vec!["571.8".into()], vec!["AST".into()], &medians)
            .unwrap();
        // Catalog without ALT is fine (ALT was absent), but dropping the
        // observed code 571.8 must fail.
        let no_code = VariableCatalog::new(vec![], vec!["AST".into()], &medians).unwrap();
        assert!(build_matrix(&cohort, &smaller, &times).is_ok());
        assert!(build_matrix(&cohort, &no_code, &times).is_err());
    }

    #[test]
    fn matrix_file_round_trip_is_exact() {
        let (cohort, catalog, times) = tiny_cohort();
        let m = build_matrix(&cohort, &catalog, &times).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("matrix.bin");
        write_matrix(&path, &m).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(m, back);
        // Byte determinism of the writer.
        let path2 = dir.path().join("matrix2.bin");
        write_matrix(&path2, &m).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn matrix_read_rejects_corrupt_payloads() {
        let (cohort, catalog, times) = tiny_cohort();
        let m = build_matrix(&cohort, &catalog, &times).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("matrix.bin");
        write_matrix(&path, &m).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, &bytes).unwrap();
        assert!(read_matrix(&path).is_err());
        assert!(read_matrix(dir.path().join("missing.bin")).is_err());
    }

    #[test]
    fn single_instance_matrix_matches_individual_evaluations() {
        let (cohort, catalog, _) = tiny_cohort();
        let m = build_matrix(&cohort, &catalog, &[vec![2004.25]]).unwrap();
        assert_eq!(m.x.ncols(), 1);
        for (v, var) in catalog.variables().iter().enumerate() {
            let expected = match cohort[0].curve(var.kind, &var.id) {
                Some(c) => evaluate_curve(c, 2004.25).unwrap(),
                None => match var.kind {
                    VarKind::Code => 0.0,
                    VarKind::Lab => var.median.unwrap(),
                },
            };
            assert_eq!(m.x[(v, 0)], expected);
        }
    }
}
