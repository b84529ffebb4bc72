//! Parsing and normalization of episodic observation files.
//!
//! Two tab-separated input formats are supported, both with fractional-year
//! timestamps:
//!
//! * event files:  `record_id <TAB> variable_id <TAB> time`
//! * value files:  `record_id <TAB> variable_id <TAB> time <TAB> value`
//!
//! Lines are grouped into one series per (record, variable) pair, sorted by
//! time. Blank lines are skipped. In lenient mode malformed lines are
//! rejected and reported; in strict mode the first malformed line is an error.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use crate::error::{Error, Result};

/// Minimum record span in years; degenerate spans are padded to one day.
pub const MIN_SPAN_YEARS: f64 = 1.0 / 365.0;

/// Occurrence times of one coded event type for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct EventSeries {
    pub record_id: String,
    pub variable_id: String,
    /// Sorted ascending; duplicates allowed.
    pub times: Vec<f64>,
}

/// Timestamped measurements of one continuous variable for one record.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueSeries {
    pub record_id: String,
    pub variable_id: String,
    /// (time, value), sorted ascending by time; duplicate times allowed.
    pub points: Vec<(f64, f64)>,
}

/// Observation window of a record, in fractional years.
#[derive(Debug, Clone, PartialEq)]
pub struct RecordSpan {
    pub record_id: String,
    pub start: f64,
    pub end: f64,
}

impl RecordSpan {
    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.start && t <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseMode {
    /// Reject malformed lines, keep going, report them.
    Lenient,
    /// Fail on the first malformed line.
    Strict,
}

/// What the parser accepted and what it rejected.
#[derive(Debug, Clone, Default)]
pub struct ParseReport {
    pub parsed_lines: usize,
    /// (1-based line number, reason), in file order.
    pub rejected: Vec<(usize, String)>,
}

fn parse_time(field: &str) -> std::result::Result<f64, String> {
    let t: f64 = field
        .parse()
        .map_err(|_| format!("unparseable time {field:?}"))?;
    if !t.is_finite() {
        return Err(format!("non-finite time {field:?}"));
    }
    Ok(t)
}

fn parse_value(field: &str) -> std::result::Result<f64, String> {
    let v: f64 = field
        .parse()
        .map_err(|_| format!("unparseable value {field:?}"))?;
    if !v.is_finite() {
        return Err(format!("non-finite value {field:?}"));
    }
    Ok(v)
}

fn split_line(line: &str, want: usize) -> std::result::Result<Vec<&str>, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != want {
        return Err(format!("expected {} fields, found {}", want, fields.len()));
    }
    if fields.iter().any(|f| f.is_empty()) {
        return Err("empty field".to_string());
    }
    Ok(fields)
}

fn read_lines<R: BufRead, T>(
    reader: R,
    mode: ParseMode,
    origin: &Path,
    mut parse: impl FnMut(&str) -> std::result::Result<Option<T>, String>,
) -> Result<(Vec<T>, ParseReport)> {
    let mut out = Vec::new();
    let mut report = ParseReport::default();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(origin, e))?;
        match parse(&line) {
            Ok(Some(item)) => {
                out.push(item);
                report.parsed_lines += 1;
            }
            Ok(None) => {}
            Err(reason) => match mode {
                ParseMode::Strict => return Err(Error::malformed(origin, lineno, reason)),
                ParseMode::Lenient => report.rejected.push((lineno, reason)),
            },
        }
    }
    Ok((out, report))
}

fn group_events(rows: Vec<(String, String, f64)>) -> Vec<EventSeries> {
    let mut grouped: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for (record, variable, t) in rows {
        grouped.entry((record, variable)).or_default().push(t);
    }
    grouped
        .into_iter()
        .map(|((record_id, variable_id), mut times)| {
            times.sort_by(f64::total_cmp);
            EventSeries {
                record_id,
                variable_id,
                times,
            }
        })
        .collect()
}

fn group_values(rows: Vec<(String, String, f64, f64)>) -> Vec<ValueSeries> {
    let mut grouped: BTreeMap<(String, String), Vec<(f64, f64)>> = BTreeMap::new();
    for (record, variable, t, v) in rows {
        grouped.entry((record, variable)).or_default().push((t, v));
    }
    grouped
        .into_iter()
        .map(|((record_id, variable_id), mut points)| {
            points.sort_by(|a, b| a.0.total_cmp(&b.0));
            ValueSeries {
                record_id,
                variable_id,
                points,
            }
        })
        .collect()
}

/// Parses an event file from a reader. Series come back sorted by
/// (record_id, variable_id).
pub fn parse_event_reader<R: BufRead>(
    reader: R,
    mode: ParseMode,
    origin: &Path,
) -> Result<(Vec<EventSeries>, ParseReport)> {
    let (rows, report) = read_lines(reader, mode, origin, |line| {
        if line.is_empty() {
            return Ok(None);
        }
        let f = split_line(line, 3)?;
        let t = parse_time(f[2])?;
        Ok(Some((f[0].to_string(), f[1].to_string(), t)))
    })?;
    Ok((group_events(rows), report))
}

/// Parses a value file from a reader. Series come back sorted by
/// (record_id, variable_id).
pub fn parse_value_reader<R: BufRead>(
    reader: R,
    mode: ParseMode,
    origin: &Path,
) -> Result<(Vec<ValueSeries>, ParseReport)> {
    let (rows, report) = read_lines(reader, mode, origin, |line| {
        if line.is_empty() {
            return Ok(None);
        }
        let f = split_line(line, 4)?;
        let t = parse_time(f[2])?;
        let v = parse_value(f[3])?;
        Ok(Some((f[0].to_string(), f[1].to_string(), t, v)))
    })?;
    Ok((group_values(rows), report))
}

pub fn parse_event_file(
    path: impl AsRef<Path>,
    mode: ParseMode,
) -> Result<(Vec<EventSeries>, ParseReport)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_event_reader(std::io::BufReader::new(file), mode, path)
}

pub fn parse_value_file(
    path: impl AsRef<Path>,
    mode: ParseMode,
) -> Result<(Vec<ValueSeries>, ParseReport)> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_value_reader(std::io::BufReader::new(file), mode, path)
}

/// Writes event series in the input format, one line per observation, in
/// the order given.
pub fn write_event_file(path: impl AsRef<Path>, series: &[EventSeries]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for s in series {
        for &t in &s.times {
            use std::fmt::Write;
            let _ = writeln!(out, "{}\t{}\t{}", s.record_id, s.variable_id, t);
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes value series in the input format, one line per observation, in
/// the order given.
pub fn write_value_file(path: impl AsRef<Path>, series: &[ValueSeries]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for s in series {
        for &(t, v) in &s.points {
            use std::fmt::Write;
            let _ = writeln!(out, "{}\t{}\t{}\t{}", s.record_id, s.variable_id, t, v);
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ThresholdOp {
    Greater,
    Less,
}

/// A lab-based inclusion rule; `Greater` means strictly above the cutoff.
#[derive(Debug, Clone)]
pub struct LabThreshold {
    pub variable_id: String,
    pub op: ThresholdOp,
    pub value: f64,
}

impl LabThreshold {
    pub fn matches(&self, v: f64) -> bool {
        match self.op {
            ThresholdOp::Greater => v > self.value,
            ThresholdOp::Less => v < self.value,
        }
    }
}

/// Cohort entry rules: a record qualifies if any lab observation satisfies a
/// threshold or any event carries one of the qualifying codes.
#[derive(Debug, Clone)]
pub struct InclusionCriteria {
    pub lab_thresholds: Vec<LabThreshold>,
    pub code_set: BTreeSet<String>,
}

impl Default for InclusionCriteria {
    /// Liver-disease screen: elevated AST/ALT/alkaline phosphatase or a
    /// fatty-liver diagnosis code.
    fn default() -> Self {
        let gt = |id: &str, value: f64| LabThreshold {
            variable_id: id.to_string(),
            op: ThresholdOp::Greater,
            value,
        };
        InclusionCriteria {
            lab_thresholds: vec![gt("AST", 40.0), gt("ALT", 55.0), gt("AlkPhos", 150.0)],
            code_set: ["571.8", "571.9", "571.5"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

/// Record ids qualifying under the criteria, in sorted order.
pub fn apply_inclusion_criteria(
    events: &[EventSeries],
    values: &[ValueSeries],
    criteria: &InclusionCriteria,
) -> BTreeSet<String> {
    let mut included = BTreeSet::new();
    for series in events {
        if !series.times.is_empty() && criteria.code_set.contains(&series.variable_id) {
            included.insert(series.record_id.clone());
        }
    }
    let mut by_var: HashMap<&str, Vec<&LabThreshold>> = HashMap::new();
    for th in &criteria.lab_thresholds {
        by_var.entry(th.variable_id.as_str()).or_default().push(th);
    }
    for series in values {
        if included.contains(&series.record_id) {
            continue;
        }
        if let Some(ths) = by_var.get(series.variable_id.as_str()) {
            if series
                .points
                .iter()
                .any(|&(_, v)| ths.iter().any(|th| th.matches(v)))
            {
                included.insert(series.record_id.clone());
            }
        }
    }
    included
}

/// Observation window of a record: the min and max time over all of its
/// observations, padded to at least one day.
pub fn compute_record_span(
    record_id: &str,
    events: &[EventSeries],
    values: &[ValueSeries],
) -> Result<RecordSpan> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    let mut seen = false;
    for series in events.iter().filter(|s| s.record_id == record_id) {
        for &t in &series.times {
            lo = lo.min(t);
            hi = hi.max(t);
            seen = true;
        }
    }
    for series in values.iter().filter(|s| s.record_id == record_id) {
        for &(t, _) in &series.points {
            lo = lo.min(t);
            hi = hi.max(t);
            seen = true;
        }
    }
    if !seen {
        return Err(Error::InvalidInput(format!(
            "record {record_id:?} has no observations"
        )));
    }
    let end = if hi - lo < MIN_SPAN_YEARS {
        lo + MIN_SPAN_YEARS
    } else {
        hi
    };
    Ok(RecordSpan {
        record_id: record_id.to_string(),
        start: lo,
        end,
    })
}

/// Mapping from raw event codes to grouped codes.
#[derive(Debug, Clone, Default)]
pub struct CodeGroupMap {
    entries: HashMap<String, String>,
}

/// What to do with codes absent from the map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnmappedPolicy {
    /// Keep the raw code as its own group.
    PassThrough,
    /// Discard the series.
    Drop,
}

/// Unmapped raw codes encountered while grouping, for logging.
#[derive(Debug, Clone, Default)]
pub struct GroupReport {
    pub unmapped: BTreeSet<String>,
}

impl CodeGroupMap {
    pub fn new(entries: impl IntoIterator<Item = (String, String)>) -> Self {
        CodeGroupMap {
            entries: entries.into_iter().collect(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn target(&self, raw: &str) -> Option<&str> {
        self.entries.get(raw).map(String::as_str)
    }

    /// Loads a two-column tab-separated `raw_code <TAB> group_code` file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut entries = HashMap::new();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let f = split_line(line, 2).map_err(|m| Error::malformed(path, idx + 1, m))?;
            if let Some(previous) = entries.insert(f[0].to_string(), f[1].to_string()) {
                if previous != f[1] {
                    return Err(Error::malformed(
                        path,
                        idx + 1,
                        format!("code {:?} mapped to both {:?} and {:?}", f[0], previous, f[1]),
                    ));
                }
            }
        }
        Ok(CodeGroupMap { entries })
    }
}

/// Rewrites event series onto grouped codes, merging series that land on the
/// same group. Unmapped codes pass through or are dropped per the policy, and
/// are reported either way.
pub fn group_codes(
    events: &[EventSeries],
    map: &CodeGroupMap,
    policy: UnmappedPolicy,
) -> (Vec<EventSeries>, GroupReport) {
    let mut report = GroupReport::default();
    let mut grouped: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for series in events {
        let target = match map.target(&series.variable_id) {
            Some(t) => t.to_string(),
            None => {
                report.unmapped.insert(series.variable_id.clone());
                match policy {
                    UnmappedPolicy::PassThrough => series.variable_id.clone(),
                    UnmappedPolicy::Drop => continue,
                }
            }
        };
        grouped
            .entry((series.record_id.clone(), target))
            .or_default()
            .extend_from_slice(&series.times);
    }
    let out = grouped
        .into_iter()
        .map(|((record_id, variable_id), mut times)| {
            times.sort_by(f64::total_cmp);
            EventSeries {
                record_id,
                variable_id,
                times,
            }
        })
        .collect();
    (out, report)
}
