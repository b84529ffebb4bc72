//! Static loading visualizations: one SVG bar chart and one CSV per
//! component, deterministic byte-for-byte under identical inputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::cross_section::VariableCatalog;
use crate::error::{Error, Result};
use crate::ica::{phenotype_report, IcaModel, LoadingEntry};

const BAR_HEIGHT: f64 = 18.0;
const ROW_GAP: f64 = 6.0;
const SECTION_GAP: f64 = 34.0;
const LABEL_WIDTH: f64 = 150.0;
const VALUE_WIDTH: f64 = 80.0;
const BAR_SPAN: f64 = 360.0;
const MARGIN: f64 = 20.0;
const HEADER: f64 = 46.0;

fn xml_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            _ => out.push(c),
        }
    }
    out
}

fn bar_rows(out: &mut String, entries: &[&LoadingEntry], max_abs: f64, y0: f64, color: &str) -> f64 {
    let zero_x = MARGIN + LABEL_WIDTH + BAR_SPAN / 2.0;
    let mut y = y0;
    for e in entries {
        let frac = if max_abs > 0.0 { e.loading / max_abs } else { 0.0 };
        let len = frac.abs() * (BAR_SPAN / 2.0);
        let x = if frac < 0.0 { zero_x - len } else { zero_x };
        let _ = writeln!(
            out,
            r#"  <text x="{:.1}" y="{:.1}" font-size="12" text-anchor="end" dominant-baseline="middle">{}</text>"#,
            MARGIN + LABEL_WIDTH - 8.0,
            y + BAR_HEIGHT / 2.0,
            xml_escape(&e.variable_id)
        );
        let _ = writeln!(
            out,
            r#"  <rect x="{x:.2}" y="{y:.1}" width="{len:.2}" height="{BAR_HEIGHT:.1}" fill="{color}"/>"#,
        );
        let _ = writeln!(
            out,
            r#"  <text x="{:.1}" y="{:.1}" font-size="11" dominant-baseline="middle">{:.4}</text>"#,
            MARGIN + LABEL_WIDTH + BAR_SPAN + 8.0,
            y + BAR_HEIGHT / 2.0,
            e.loading
        );
        y += BAR_HEIGHT + ROW_GAP;
    }
    y
}

fn render_svg(component: usize, codes: &[&LoadingEntry], labs: &[&LoadingEntry]) -> String {
    let rows = codes.len() + labs.len();
    let sections = (!codes.is_empty()) as usize + (!labs.is_empty()) as usize;
    let height = HEADER
        + rows as f64 * (BAR_HEIGHT + ROW_GAP)
        + sections as f64 * SECTION_GAP
        + MARGIN;
    let width = MARGIN * 2.0 + LABEL_WIDTH + BAR_SPAN + VALUE_WIDTH;
    let max_abs = codes
        .iter()
        .chain(labs.iter())
        .map(|e| e.loading.abs())
        .fold(0.0f64, f64::max);
    let zero_x = MARGIN + LABEL_WIDTH + BAR_SPAN / 2.0;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}">"#
    );
    let _ = writeln!(
        out,
        r#"  <rect x="0" y="0" width="{width:.0}" height="{height:.0}" fill="white"/>"#
    );
    let _ = writeln!(
        out,
        r#"  <text x="{MARGIN:.1}" y="24" font-size="16" font-weight="bold">component {component}</text>"#
    );
    let mut y = HEADER;
    if !codes.is_empty() {
        let _ = writeln!(
            out,
            r#"  <text x="{MARGIN:.1}" y="{:.1}" font-size="13" font-weight="bold">codes (events/year)</text>"#,
            y + 12.0
        );
        y = bar_rows(&mut out, codes, max_abs, y + SECTION_GAP - 12.0, "#4682b4");
    }
    if !labs.is_empty() {
        let _ = writeln!(
            out,
            r#"  <text x="{MARGIN:.1}" y="{:.1}" font-size="13" font-weight="bold">labs (value offset)</text>"#,
            y + 12.0
        );
        y = bar_rows(&mut out, labs, max_abs, y + SECTION_GAP - 12.0, "#e08214");
    }
    let _ = writeln!(
        out,
        r##"  <line x1="{zero_x:.1}" y1="{HEADER:.1}" x2="{zero_x:.1}" y2="{y:.1}" stroke="#555" stroke-width="1"/>"##
    );
    out.push_str("</svg>\n");
    out
}

/// Emits `component_<id>.svg` and `component_<id>.csv` into `out_dir`,
/// showing the component's top loadings with codes and labs separated.
/// Returns the two paths.
pub fn emit_phenotype_plot(
    model: &IcaModel,
    catalog: &VariableCatalog,
    component: usize,
    top: usize,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf)> {
    if component >= model.rank {
        return Err(Error::InvalidInput(format!(
            "component {component} out of range (rank {})",
            model.rank
        )));
    }
    if top == 0 {
        return Err(Error::InvalidInput("need at least one loading".into()));
    }
    let report = phenotype_report(model, catalog, top)?;
    let entries = &report.components[component].entries;
    let codes: Vec<&LoadingEntry> = report.components[component].codes().collect();
    let labs: Vec<&LoadingEntry> = report.components[component].labs().collect();

    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let svg_path = out_dir.join(format!("component_{component:02}.svg"));
    let csv_path = out_dir.join(format!("component_{component:02}.csv"));

    let svg = render_svg(component, &codes, &labs);
    std::fs::write(&svg_path, svg).map_err(|e| Error::io(&svg_path, e))?;

    let mut csv = String::new();
    for e in entries {
        let _ = writeln!(csv, "{},{},{:.12e}", e.variable_id, e.kind.as_str(), e.loading);
    }
    std::fs::write(&csv_path, csv).map_err(|e| Error::io(&csv_path, e))?;
    Ok((svg_path, csv_path))
}
