//! SVG accuracy charts and before/after summary tables built from report CSVs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::eval::ReportRow;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const PANEL_W: f64 = 420.0;
const PANEL_H: f64 = 280.0;
const GRID_COLS: usize = 3;

/// One accuracy curve with its spread.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Rows of one (source, target, strategy, norm) combination.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct SeriesKey {
    pub source: u8,
    pub target: u8,
    pub strategy: String,
    pub norm: String,
}

impl SeriesKey {
    pub fn label(&self) -> String {
        format!("{} / {} norm", self.strategy, self.norm)
    }
}

/// Groups rows by series and orders each group by iteration.
pub fn group_rows(rows: &[ReportRow]) -> Result<BTreeMap<SeriesKey, Vec<ReportRow>>> {
    let mut groups: BTreeMap<SeriesKey, Vec<ReportRow>> = BTreeMap::new();
    for r in rows {
        let key = SeriesKey {
            source: r.source_activity,
            target: r.target_activity,
            strategy: r.strategy.clone(),
            norm: r.norm.clone(),
        };
        groups.entry(key).or_default().push(r.clone());
    }
    for (key, g) in &mut groups {
        g.sort_by_key(|r| r.iteration);
        if g.iter().enumerate().any(|(i, r)| r.iteration != i) {
            return Err(Error::Report(format!(
                "series {} A{}->A{} does not cover iterations 0..{} exactly once",
                key.label(),
                key.source,
                key.target,
                g.len()
            )));
        }
    }
    Ok(groups)
}

fn test_series(key: &SeriesKey, rows: &[ReportRow]) -> Series {
    Series {
        label: key.label(),
        mean: rows.iter().map(|r| r.mean_test_acc).collect(),
        std: rows.iter().map(|r| r.std_test_acc).collect(),
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Draws one chart into `out` at offset `(x0, y0)`.
fn draw_panel(out: &mut String, x0: f64, y0: f64, title: &str, series: &[Series]) {
    let (left, right, top, bottom) = (52.0, 12.0, 28.0, 58.0);
    let pw = PANEL_W - left - right;
    let ph = PANEL_H - top - bottom;
    let steps = series.iter().map(|s| s.mean.len().saturating_sub(1)).max().unwrap_or(0);
    let x_span = steps.max(1) as f64;

    // y range covers every band, snapped to 0.05 and clamped to [0, 1]
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in series {
        for (m, d) in s.mean.iter().zip(&s.std) {
            lo = lo.min(m - d);
            hi = hi.max(m + d);
        }
    }
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    lo = ((lo / 0.05).floor() * 0.05).clamp(0.0, 1.0);
    hi = ((hi / 0.05).ceil() * 0.05).clamp(0.0, 1.0);
    if hi - lo < 0.05 {
        (lo, hi) = ((lo - 0.05).max(0.0), (hi + 0.05).min(1.0));
    }
    let px = |i: f64| x0 + left + i / x_span * pw;
    let py = |v: f64| y0 + top + (hi - v.clamp(lo, hi)) / (hi - lo) * ph;

    let _ = writeln!(
        out,
        r##"<text x="{:.1}" y="{:.1}" font-size="13" text-anchor="middle">{}</text>"##,
        x0 + left + pw / 2.0,
        y0 + 18.0,
        escape(title)
    );
    let _ = writeln!(
        out,
        r##"<rect x="{:.1}" y="{:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#444"/>"##,
        x0 + left,
        y0 + top
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let y = py(v);
        let _ = writeln!(
            out,
            r##"<line x1="{:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" font-size="10" text-anchor="end">{:.0}%</text>"##,
            x0 + left,
            x0 + left + pw,
            x0 + left - 4.0,
            y + 3.0,
            v * 100.0
        );
    }
    for i in 0..=steps {
        let x = px(i as f64);
        let _ = writeln!(
            out,
            r##"<text x="{x:.1}" y="{:.1}" font-size="10" text-anchor="middle">{i}</text>"##,
            y0 + top + ph + 13.0
        );
    }
    let _ = writeln!(
        out,
        r##"<text x="{:.1}" y="{:.1}" font-size="11" text-anchor="middle">iteration</text>"##,
        x0 + left + pw / 2.0,
        y0 + top + ph + 27.0
    );

    for (si, s) in series.iter().enumerate() {
        let color = PALETTE[si % PALETTE.len()];
        let pts = |f: &dyn Fn(usize) -> f64| -> Vec<String> {
            (0..s.mean.len()).map(|i| format!("{:.2},{:.2}", px(i as f64), py(f(i)))).collect()
        };
        if s.mean.len() == 1 {
            let _ = writeln!(
                out,
                r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"##,
                px(0.0),
                py(s.mean[0])
            );
        } else {
            let mut band = pts(&|i| s.mean[i] + s.std[i]);
            band.extend(pts(&|i| s.mean[i] - s.std[i]).into_iter().rev());
            let _ = writeln!(
                out,
                r##"<polygon points="{}" fill="{color}" fill-opacity="0.18" stroke="none"/>"##,
                band.join(" ")
            );
            let _ = writeln!(
                out,
                r##"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"##,
                pts(&|i| s.mean[i]).join(" ")
            );
        }
        let ly = y0 + PANEL_H - 14.0;
        let lx = x0 + left + (si as f64) * (pw / series.len().max(1) as f64);
        let _ = writeln!(
            out,
            r##"<rect x="{lx:.1}" y="{:.1}" width="10" height="10" fill="{color}"/><text x="{:.1}" y="{ly:.1}" font-size="10">{}</text>"##,
            ly - 9.0,
            lx + 13.0,
            escape(&s.label)
        );
    }
}

fn svg_document(width: f64, height: f64, body: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" viewBox=\"0 0 {width:.0} {height:.0}\" font-family=\"sans-serif\">\n<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{body}</svg>\n"
    )
}

/// A single chart of test accuracy against fine-tuning iteration.
pub fn line_chart(title: &str, series: &[Series]) -> String {
    let mut body = String::new();
    draw_panel(&mut body, 0.0, 0.0, title, series);
    svg_document(PANEL_W, PANEL_H, &body)
}

/// Panels laid out row-major, `GRID_COLS` per row.
pub fn grid_chart(panels: &[(String, Vec<Series>)]) -> String {
    let rows = panels.len().div_ceil(GRID_COLS).max(1);
    let cols = panels.len().clamp(1, GRID_COLS);
    let mut body = String::new();
    for (i, (title, series)) in panels.iter().enumerate() {
        let x0 = (i % GRID_COLS) as f64 * PANEL_W;
        let y0 = (i / GRID_COLS) as f64 * PANEL_H;
        draw_panel(&mut body, x0, y0, title, series);
    }
    svg_document(cols as f64 * PANEL_W, rows as f64 * PANEL_H, &body)
}

/// Writes one chart per within-activity target and, when cross-activity rows
/// exist, a grid with one panel per (source, target) pair. Returns the files written.
pub fn render_plots(rows: &[ReportRow], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        return Err(Error::Report("no report rows to plot".into()));
    }
    let groups = group_rows(rows)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut within: BTreeMap<u8, Vec<Series>> = BTreeMap::new();
    let mut cross: BTreeMap<(u8, u8), Vec<Series>> = BTreeMap::new();
    for (key, g) in &groups {
        let s = test_series(key, g);
        if key.source == key.target {
            within.entry(key.source).or_default().push(s);
        } else {
            cross.entry((key.source, key.target)).or_default().push(s);
        }
    }
    let mut written = Vec::new();
    for (a, series) in &within {
        let path = out_dir.join(format!("activity_{a}.svg"));
        let svg = line_chart(&format!("Test accuracy during fine-tuning, activity {a}"), series);
        std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    if !cross.is_empty() {
        let panels: Vec<(String, Vec<Series>)> = cross
            .into_iter()
            .map(|((i, j), s)| (format!("Adapting from activity {i} to {j}"), s))
            .collect();
        let path = out_dir.join("cross_activity.svg");
        std::fs::write(&path, grid_chart(&panels)).map_err(|e| Error::io(&path, e))?;
        written.push(path);
    }
    Ok(written)
}

/// Externally supplied before/after numbers, in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceRow {
    pub label: String,
    pub activity: u8,
    pub before: (f64, f64),
    pub after: (f64, f64),
}

fn pm(mean: f64, std: f64) -> String {
    format!("{mean:.2} ± {std:.2}")
}

/// Markdown table of iteration-0 ("before adaptation") and final-iteration
/// ("after adaptation") test accuracy, in percent, one row per series.
pub fn compare_table(reports: &[Vec<ReportRow>], references: &[ReferenceRow]) -> Result<String> {
    let rows: Vec<ReportRow> = reports.iter().flatten().cloned().collect();
    if rows.is_empty() {
        return Err(Error::Report("no reports to compare".into()));
    }
    let groups = group_rows(&rows)?;
    let mut protocol = None;
    for (key, g) in &groups {
        let p = (g.len(), g[0].runs);
        if g.iter().any(|r| r.runs != p.1) {
            return Err(Error::Report(format!("series {} mixes run counts", key.label())));
        }
        match protocol {
            None => protocol = Some(p),
            Some(q) if q != p => {
                return Err(Error::Report(format!(
                    "protocols differ: {} iterations x {} runs vs {} x {}",
                    q.0 - 1,
                    q.1,
                    p.0 - 1,
                    p.1
                )))
            }
            _ => {}
        }
    }
    let mut out = String::from(
        "| source | target | strategy | norm | before adaptation | after adaptation |\n|---|---|---|---|---|---|\n",
    );
    for (key, g) in &groups {
        let (first, last) = (&g[0], &g[g.len() - 1]);
        let _ = writeln!(
            out,
            "| A{} | A{} | {} | {} | {} | {} |",
            key.source,
            key.target,
            key.strategy,
            key.norm,
            pm(first.mean_test_acc * 100.0, first.std_test_acc * 100.0),
            pm(last.mean_test_acc * 100.0, last.std_test_acc * 100.0)
        );
    }
    for r in references {
        let _ = writeln!(
            out,
            "| A{a} | A{a} | {} | - | {} | {} |",
            r.label,
            pm(r.before.0, r.before.1),
            pm(r.after.0, r.after.1),
            a = r.activity
        );
    }
    Ok(out)
}
