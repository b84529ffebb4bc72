//! Continuous longitudinal curves from episodic observations.
//!
//! Coded events become intensity curves (events per year) via a randomized
//! histogram partition, averaged over many random binnings. Measured values
//! become smooth curves via shape-preserving monotone cubic interpolation.
//! Both are sampled onto a uniform per-record grid.

use rand::RngExt;

use crate::error::{Error, Result};
use crate::ingest::{EventSeries, RecordSpan, ValueSeries};
use crate::rng;

/// Uniform time grid, inclusive of both endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    start: f64,
    end: f64,
    count: usize,
}

/// Default grid resolution, in points per year.
pub const DEFAULT_POINTS_PER_YEAR: f64 = 52.0;

impl Grid {
    pub fn new(start: f64, end: f64, points_per_year: f64) -> Result<Grid> {
        if !start.is_finite() || !end.is_finite() || end <= start {
            return Err(Error::InvalidInput(format!(
                "invalid grid range [{start}, {end}]"
            )));
        }
        if !(points_per_year > 0.0) || !points_per_year.is_finite() {
            return Err(Error::InvalidInput(format!(
                "invalid grid resolution {points_per_year}"
            )));
        }
        let count = (((end - start) * points_per_year).ceil() as usize + 1).max(2);
        Ok(Grid { start, end, count })
    }

    pub fn covering(span: &RecordSpan, points_per_year: f64) -> Result<Grid> {
        Grid::new(span.start, span.end, points_per_year)
    }

    pub fn start(&self) -> f64 {
        self.start
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn spacing(&self) -> f64 {
        (self.end - self.start) / (self.count - 1) as f64
    }

    /// The i-th grid point; the last one is exactly `end`.
    pub fn point(&self, i: usize) -> f64 {
        debug_assert!(i < self.count);
        if i == self.count - 1 {
            self.end
        } else {
            self.start + i as f64 * self.spacing()
        }
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.count).map(|i| self.point(i))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurveKind {
    Intensity,
    Value,
}

/// A curve sampled on a grid; between grid points it is piecewise linear.
#[derive(Debug, Clone, PartialEq)]
pub struct LongitudinalCurve {
    pub record_id: String,
    pub variable_id: String,
    pub kind: CurveKind,
    pub grid: Grid,
    pub values: Vec<f64>,
}

/// Evaluates the stored piecewise representation at time `t`.
pub fn evaluate_curve(curve: &LongitudinalCurve, t: f64) -> Result<f64> {
    let g = &curve.grid;
    if !t.is_finite() || t < g.start() || t > g.end() {
        return Err(Error::InvalidInput(format!(
            "time {t} outside curve range [{}, {}]",
            g.start(),
            g.end()
        )));
    }
    let spacing = g.spacing();
    let i = (((t - g.start()) / spacing) as usize).min(g.len() - 2);
    let left = g.point(i);
    let right = g.point(i + 1);
    let u = ((t - left) / (right - left)).clamp(0.0, 1.0);
    Ok(curve.values[i] * (1.0 - u) + curve.values[i + 1] * u)
}

/// Settings for the randomized-partition intensity estimator.
#[derive(Debug, Clone)]
pub struct IntensityConfig {
    /// Random partitions to average over.
    pub iterations: usize,
    /// Upper limit on bins per partition.
    pub max_bins: usize,
    pub seed: u64,
}

impl Default for IntensityConfig {
    fn default() -> Self {
        IntensityConfig {
            iterations: 100,
            max_bins: 50,
            seed: 0,
        }
    }
}

/// Events per bin; a boundary point belongs to the bin on its right.
fn bin_counts(times: &[f64], edges: &[f64]) -> Vec<usize> {
    let b = edges.len() - 1;
    let mut counts = vec![0usize; b];
    let mut p = 0;
    for (i, count) in counts.iter_mut().enumerate() {
        if i < b - 1 {
            let hi = edges[i + 1];
            let start = p;
            while p < times.len() && times[p] < hi {
                p += 1;
            }
            *count = p - start;
        } else {
            *count = times.len() - p;
        }
    }
    counts
}

/// The bin containing `t` under the same membership rule as `bin_counts`.
fn bin_index(edges: &[f64], t: f64) -> usize {
    let b = edges.len() - 1;
    (edges.partition_point(|e| *e <= t) - 1).min(b - 1)
}

/// Estimates an event-intensity curve (events per year) on the grid.
///
/// Each iteration draws a partition of the span into `B` bins with uniformly
/// random interior boundaries, where `B` is uniform on
/// `1..=min(n_events, max_bins)`, and evaluates the per-bin event density at
/// every grid point. The curve is the pointwise mean over iterations, which
/// by construction integrates to the event count over the span.
pub fn estimate_intensity(
    events: &EventSeries,
    span: &RecordSpan,
    grid: &Grid,
    cfg: &IntensityConfig,
) -> Result<LongitudinalCurve> {
    if grid.start() > span.start || grid.end() < span.end {
        return Err(Error::InvalidInput(format!(
            "grid [{}, {}] does not cover span [{}, {}]",
            grid.start(),
            grid.end(),
            span.start,
            span.end
        )));
    }
    if let Some(&t) = events
        .times
        .iter()
        .find(|&&t| t < span.start || t > span.end)
    {
        return Err(Error::InvalidInput(format!(
            "event at {t} outside record span [{}, {}]",
            span.start, span.end
        )));
    }
    if cfg.iterations == 0 || cfg.max_bins == 0 {
        return Err(Error::InvalidInput(
            "intensity estimation needs at least one iteration and one bin".into(),
        ));
    }
    let n = events.times.len();
    let mut acc = vec![0.0f64; grid.len()];
    if n > 0 {
        let mut rng = rng::stream(cfg.seed, &["intensity", &events.record_id, &events.variable_id]);
        let max_b = n.min(cfg.max_bins);
        let mut edges = Vec::with_capacity(max_b + 1);
        for _ in 0..cfg.iterations {
            let b = rng.random_range(1..=max_b);
            edges.clear();
            edges.push(span.start);
            for _ in 0..b - 1 {
                edges.push(rng.random_range(span.start..span.end));
            }
            edges.push(span.end);
            edges.sort_by(f64::total_cmp);
            let counts = bin_counts(&events.times, &edges);
            let densities: Vec<f64> = counts
                .iter()
                .enumerate()
                .map(|(i, &c)| {
                    if c == 0 {
                        0.0
                    } else {
                        c as f64 / (edges[i + 1] - edges[i])
                    }
                })
                .collect();
            for (g, slot) in acc.iter_mut().enumerate() {
                let t = grid.point(g);
                if t >= span.start && t <= span.end {
                    *slot += densities[bin_index(&edges, t)];
                }
            }
        }
        let k = cfg.iterations as f64;
        for slot in &mut acc {
            *slot /= k;
        }
    }
    Ok(LongitudinalCurve {
        record_id: events.record_id.clone(),
        variable_id: events.variable_id.clone(),
        kind: CurveKind::Intensity,
        grid: grid.clone(),
        values: acc,
    })
}

/// Shape-preserving cubic interpolant: passes through every knot, never
/// overshoots the data, and extends as a constant beyond the first and last
/// knots.
#[derive(Debug, Clone)]
pub struct MonotoneCubic {
    xs: Vec<f64>,
    ys: Vec<f64>,
    ds: Vec<f64>,
}

fn edge_slope(h0: f64, h1: f64, d0: f64, d1: f64) -> f64 {
    let d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
    if d * d0 <= 0.0 {
        0.0
    } else if d0 * d1 <= 0.0 && d.abs() > 3.0 * d0.abs() {
        3.0 * d0
    } else {
        d
    }
}

impl MonotoneCubic {
    /// Fits the interpolant to strictly increasing knots.
    pub fn new(xs: Vec<f64>, ys: Vec<f64>) -> Result<MonotoneCubic> {
        if xs.len() != ys.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} knot times vs {} values",
                xs.len(),
                ys.len()
            )));
        }
        if xs.len() < 2 {
            return Err(Error::InvalidInput("need at least two knots".into()));
        }
        if xs.windows(2).any(|w| !(w[1] > w[0])) || xs.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(
                "knot times must be finite and strictly increasing".into(),
            ));
        }
        if ys.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidInput("knot values must be finite".into()));
        }
        let n = xs.len();
        let h: Vec<f64> = xs.windows(2).map(|w| w[1] - w[0]).collect();
        let delta: Vec<f64> = (0..n - 1).map(|i| (ys[i + 1] - ys[i]) / h[i]).collect();
        let mut ds = vec![0.0; n];
        if n == 2 {
            ds[0] = delta[0];
            ds[1] = delta[0];
        } else {
            for i in 1..n - 1 {
                let (dl, dr) = (delta[i - 1], delta[i]);
                if dl == 0.0 || dr == 0.0 || (dl > 0.0) != (dr > 0.0) {
                    ds[i] = 0.0;
                } else {
                    let w1 = 2.0 * h[i] + h[i - 1];
                    let w2 = h[i] + 2.0 * h[i - 1];
                    ds[i] = (w1 + w2) / (w1 / dl + w2 / dr);
                }
            }
            ds[0] = edge_slope(h[0], h[1], delta[0], delta[1]);
            ds[n - 1] = edge_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
        }
        Ok(MonotoneCubic { xs, ys, ds })
    }

    pub fn first_knot(&self) -> f64 {
        self.xs[0]
    }

    pub fn last_knot(&self) -> f64 {
        *self.xs.last().unwrap()
    }

    /// Evaluates at `t`, constant outside the knot range.
    pub fn eval(&self, t: f64) -> f64 {
        if t <= self.xs[0] {
            return self.ys[0];
        }
        if t >= *self.xs.last().unwrap() {
            return *self.ys.last().unwrap();
        }
        let i = (self.xs.partition_point(|x| *x <= t) - 1).min(self.xs.len() - 2);
        let h = self.xs[i + 1] - self.xs[i];
        let u = (t - self.xs[i]) / h;
        let u2 = u * u;
        let u3 = u2 * u;
        let h00 = 2.0 * u3 - 3.0 * u2 + 1.0;
        let h10 = u3 - 2.0 * u2 + u;
        let h01 = -2.0 * u3 + 3.0 * u2;
        let h11 = u3 - u2;
        h00 * self.ys[i] + h10 * h * self.ds[i] + h01 * self.ys[i + 1] + h11 * h * self.ds[i + 1]
    }
}

/// Collapses duplicate observation times to their mean value.
fn dedup_points(points: &[(f64, f64)]) -> (Vec<f64>, Vec<f64>) {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut i = 0;
    while i < points.len() {
        let t = points[i].0;
        let mut sum = 0.0;
        let mut n = 0usize;
        while i < points.len() && points[i].0 == t {
            sum += points[i].1;
            n += 1;
            i += 1;
        }
        xs.push(t);
        ys.push(sum / n as f64);
    }
    (xs, ys)
}

fn validated_knots(series: &ValueSeries) -> Result<(Vec<f64>, Vec<f64>)> {
    if series.points.is_empty() {
        return Err(Error::InvalidInput(format!(
            "series {}/{} has no points",
            series.record_id, series.variable_id
        )));
    }
    if series
        .points
        .iter()
        .any(|&(t, v)| !t.is_finite() || !v.is_finite())
    {
        return Err(Error::InvalidInput(format!(
            "series {}/{} has non-finite points",
            series.record_id, series.variable_id
        )));
    }
    if series.points.windows(2).any(|w| w[0].0 > w[1].0) {
        return Err(Error::InvalidInput(format!(
            "series {}/{} is not sorted by time",
            series.record_id, series.variable_id
        )));
    }
    Ok(dedup_points(&series.points))
}

/// Builds the interpolant for a measurement series (duplicate times averaged).
pub fn fit_value_interpolant(series: &ValueSeries) -> Result<MonotoneCubic> {
    let (xs, ys) = validated_knots(series)?;
    if xs.len() == 1 {
        // Degenerate: a flat interpolant through the single value.
        let x = xs[0];
        return Ok(MonotoneCubic {
            xs: vec![x, x + 1.0],
            ys: vec![ys[0], ys[0]],
            ds: vec![0.0, 0.0],
        });
    }
    MonotoneCubic::new(xs, ys)
}

/// Samples the measurement interpolant onto the grid. A series with a single
/// distinct observation time yields a constant curve.
pub fn interpolate_values(
    series: &ValueSeries,
    span: &RecordSpan,
    grid: &Grid,
) -> Result<LongitudinalCurve> {
    if grid.start() > span.start || grid.end() < span.end {
        return Err(Error::InvalidInput(format!(
            "grid [{}, {}] does not cover span [{}, {}]",
            grid.start(),
            grid.end(),
            span.start,
            span.end
        )));
    }
    let (xs, ys) = validated_knots(series)?;
    let values = if xs.len() == 1 {
        vec![ys[0]; grid.len()]
    } else {
        let interp = MonotoneCubic::new(xs, ys)?;
        grid.points().map(|t| interp.eval(t)).collect()
    };
    Ok(LongitudinalCurve {
        record_id: series.record_id.clone(),
        variable_id: series.variable_id.clone(),
        kind: CurveKind::Value,
        grid: grid.clone(),
        values,
    })
}
