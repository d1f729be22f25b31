//! Memorization diagnostics: smoothed pre/post loss-gap curves, terminal and
//! peak gaps per run and phase, and an SVG plot of the curves.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use memiml::metalearn::{peak_gap, smooth, terminal_gap, Phase};

pub const CURVES_FILE: &str = "gap_curves.csv";
pub const REPORT_FILE: &str = "gap_report.csv";
pub const PLOT_FILE: &str = "gap_curves.svg";

const REQUIRED: [&str; 5] = ["step", "phase", "pre_update_loss", "post_update_loss", "gap"];
const PHASES: [Phase; 2] = [Phase::Train, Phase::Test];

#[derive(Clone, Debug, PartialEq)]
pub struct RunCurves {
    pub label: String,
    /// Comment lines of the source file, without the leading `#`.
    pub comments: Vec<String>,
    pub train: Vec<(usize, f64)>,
    pub test: Vec<(usize, f64)>,
}

impl RunCurves {
    pub fn phase(&self, phase: Phase) -> &[(usize, f64)] {
        match phase {
            Phase::Train => &self.train,
            Phase::Test => &self.test,
        }
    }
}

pub fn read_metrics(path: &Path, label: String) -> Result<RunCurves> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let comments = text
        .lines()
        .filter_map(|l| l.strip_prefix('#'))
        .map(|l| l.trim().to_string())
        .collect();
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let missing: Vec<&str> = REQUIRED.iter().copied().filter(|c| col(c).is_none()).collect();
    if !missing.is_empty() {
        bail!("{}: missing column(s): {}", path.display(), missing.join(", "));
    }
    let [step, phase, _, _, gap] = REQUIRED.map(|c| col(c).expect("checked above"));
    let mut curves = RunCurves {
        label,
        comments,
        train: Vec::new(),
        test: Vec::new(),
    };
    for rec in reader.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("");
        let s: usize = field(step)
            .parse()
            .with_context(|| format!("{}:{line}: bad step `{}`", path.display(), field(step)))?;
        let g: f64 = field(gap)
            .parse()
            .with_context(|| format!("{}:{line}: bad gap `{}`", path.display(), field(gap)))?;
        match Phase::parse(field(phase)) {
            Some(Phase::Train) => curves.train.push((s, g)),
            Some(Phase::Test) => curves.test.push((s, g)),
            None => bail!("{}:{line}: unknown phase `{}`", path.display(), field(phase)),
        }
    }
    Ok(curves)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GapSummary {
    pub label: String,
    pub phase: Phase,
    pub points: usize,
    pub peak_gap: f64,
    pub terminal_gap: f64,
}

/// The parent directory name of each file (a run directory), made unique.
fn labels(inputs: &[PathBuf]) -> Vec<String> {
    let mut seen = HashSet::new();
    inputs
        .iter()
        .map(|p| {
            let base = p
                .parent()
                .and_then(Path::file_name)
                .or_else(|| p.file_stem())
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into());
            let mut label = base.clone();
            let mut i = 2;
            while !seen.insert(label.clone()) {
                label = format!("{base}-{i}");
                i += 1;
            }
            label
        })
        .collect()
}

pub fn summarize(runs: &[RunCurves]) -> Vec<GapSummary> {
    let mut out = Vec::new();
    for run in runs {
        for phase in PHASES {
            let gaps: Vec<f64> = run.phase(phase).iter().map(|&(_, g)| g).collect();
            if let (Some(peak), Some(terminal)) = (peak_gap(&gaps), terminal_gap(&gaps)) {
                out.push(GapSummary {
                    label: run.label.clone(),
                    phase,
                    points: gaps.len(),
                    peak_gap: peak,
                    terminal_gap: terminal,
                });
            }
        }
    }
    out
}

fn comment_block(runs: &[RunCurves]) -> String {
    let mut s = String::new();
    for run in runs {
        for c in &run.comments {
            let _ = writeln!(s, "# {}: {c}", run.label);
        }
    }
    s
}

fn write_csv(path: &Path, comments: &str, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut buf = comments.as_bytes().to_vec();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
    }
    fs::write(path, buf).with_context(|| format!("writing {}", path.display()))
}

/// Reads two or more metrics files and writes `gap_curves.csv`,
/// `gap_report.csv` and `gap_curves.svg` into `out`.
pub fn diagnose(inputs: &[PathBuf], out: &Path) -> Result<Vec<GapSummary>> {
    if inputs.len() < 2 {
        bail!("diagnose compares runs and needs at least two metrics files");
    }
    let runs = inputs
        .iter()
        .zip(labels(inputs))
        .map(|(p, l)| read_metrics(p, l))
        .collect::<Result<Vec<_>>>()?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let comments = comment_block(&runs);

    let mut curve_rows = Vec::new();
    for run in &runs {
        for phase in PHASES {
            let points = run.phase(phase);
            let gaps: Vec<f64> = points.iter().map(|&(_, g)| g).collect();
            for (&(step, g), s) in points.iter().zip(smooth(&gaps)) {
                curve_rows.push(vec![
                    run.label.clone(),
                    phase.as_str().into(),
                    step.to_string(),
                    g.to_string(),
                    s.to_string(),
                ]);
            }
        }
    }
    write_csv(
        &out.join(CURVES_FILE),
        &comments,
        &["run", "phase", "step", "gap", "smoothed_gap"],
        curve_rows,
    )?;

    let summary = summarize(&runs);
    let report_rows = summary
        .iter()
        .map(|s| {
            vec![
                s.label.clone(),
                s.phase.as_str().into(),
                s.points.to_string(),
                s.peak_gap.to_string(),
                s.terminal_gap.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join(REPORT_FILE),
        &comments,
        &["run", "phase", "points", "peak_gap", "terminal_gap"],
        report_rows,
    )?;
    fs::write(out.join(PLOT_FILE), plot_svg(&runs))?;
    Ok(summary)
}

const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];
const WIDTH: f64 = 760.0;
const PANEL: f64 = 300.0;
const MARGIN: f64 = 60.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Two panels (train, test) of smoothed gap against step, one line per run.
pub fn plot_svg(runs: &[RunCurves]) -> String {
    let height = 2.0 * (PANEL + MARGIN) + MARGIN;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, "<desc>{}</desc>", escape(&comment_block(runs)));
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (p, phase) in PHASES.iter().enumerate() {
        let top = MARGIN + p as f64 * (PANEL + MARGIN);
        let left = MARGIN;
        let right = WIDTH - 170.0;
        let curves: Vec<(usize, Vec<(usize, f64)>)> = runs
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let pts = r.phase(*phase);
                let gaps: Vec<f64> = pts.iter().map(|&(_, g)| g).collect();
                (i, pts.iter().map(|&(st, _)| st).zip(smooth(&gaps)).collect())
            })
            .collect();
        let all = curves.iter().flat_map(|(_, c)| c.iter());
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, 0.0f64, 0.0f64);
        for &(x, y) in all {
            x0 = x0.min(x as f64);
            x1 = x1.max(x as f64);
            if y.is_finite() {
                y0 = y0.min(y);
                y1 = y1.max(y);
            }
        }
        if !x0.is_finite() {
            (x0, x1) = (0.0, 1.0);
        }
        if x1 <= x0 {
            x1 = x0 + 1.0;
        }
        if y1 <= y0 {
            y1 = y0 + 1.0;
        }
        let sx = |x: f64| left + (x - x0) / (x1 - x0) * (right - left);
        let sy = |y: f64| top + PANEL - (y - y0) / (y1 - y0) * PANEL;
        let _ = writeln!(
            s,
            r##"<text x="{left}" y="{}" font-weight="bold">{} phase: smoothed gap (pre - post query loss)</text>"##,
            top - 10.0,
            phase.as_str()
        );
        let _ = writeln!(
            s,
            r##"<rect x="{left}" y="{top}" width="{}" height="{PANEL}" fill="none" stroke="#444"/>"##,
            right - left
        );
        if y0 < 0.0 {
            let z = sy(0.0);
            let _ = writeln!(
                s,
                r##"<line x1="{left}" y1="{z:.2}" x2="{right}" y2="{z:.2}" stroke="#aaa" stroke-dasharray="4 3"/>"##
            );
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y1:.3}</text>"#, left - 4.0, top + 10.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.3}</text>"#, left - 4.0, top + PANEL);
        let _ = writeln!(s, r#"<text x="{left}" y="{}">{x0}</text>"#, top + PANEL + 16.0);
        let _ = writeln!(s, r#"<text x="{right}" y="{}" text-anchor="end">step {x1}</text>"#, top + PANEL + 16.0);
        for (i, pts) in &curves {
            let color = COLORS[i % COLORS.len()];
            let finite: Vec<String> = pts
                .iter()
                .filter(|(_, y)| y.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x as f64), sy(y)))
                .collect();
            if finite.len() == 1 {
                let (cx, cy) = finite[0].split_once(',').expect("formatted pair");
                let _ = writeln!(s, r#"<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>"#);
            } else if !finite.is_empty() {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    finite.join(" ")
                );
            }
            let ly = top + 14.0 + 18.0 * *i as f64;
            let _ = writeln!(
                s,
                r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="3"/>"#,
                right + 10.0,
                right + 30.0
            );
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}">{}</text>"#,
                right + 36.0,
                ly + 4.0,
                escape(&runs[*i].label)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}
