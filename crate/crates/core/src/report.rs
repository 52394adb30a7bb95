//! Turns matrices and summaries into artifacts: a long-form CSV of every
//! cell, a markdown report with one 4x4 table per architecture, and an SVG
//! bar chart of overall means. Renderers are pure string builders over their
//! inputs, so identical inputs yield identical bytes.

use std::path::{Path, PathBuf};

use crate::data::Mag;
use crate::error::{Error, Result};
use crate::protocol::{compare, load_matrix, ArchSummary, CrossMagMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
    Svg,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::Markdown, ReportFormat::Svg];

    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
            ReportFormat::Svg => "svg",
        }
    }

    /// Accepts csv, md, markdown, svg, all, or a comma-separated mix.
    /// Duplicates collapse; order follows first appearance.
    pub fn parse_list(s: &str) -> Result<Vec<ReportFormat>> {
        let mut out = Vec::new();
        let mut push = |f: ReportFormat| {
            if !out.contains(&f) {
                out.push(f);
            }
        };
        for tok in s.split(',') {
            match tok.trim().to_ascii_lowercase().as_str() {
                "csv" => push(ReportFormat::Csv),
                "md" | "markdown" => push(ReportFormat::Markdown),
                "svg" => push(ReportFormat::Svg),
                "all" => ReportFormat::ALL.into_iter().for_each(&mut push),
                other => return Err(Error::UnknownFormat { got: other.to_string() }),
            }
        }
        if out.is_empty() {
            return Err(Error::UnknownFormat { got: s.to_string() });
        }
        Ok(out)
    }
}

/// One CSV line per present cell: the winning run's seed and its accuracy.
pub fn render_csv(matrices: &[CrossMagMatrix]) -> String {
    let mut out = String::from("arch,train_mag,test_mag,run_seed,accuracy\n");
    for m in matrices {
        for (i, train_mag) in Mag::ALL.iter().enumerate() {
            for (j, test_mag) in Mag::ALL.iter().enumerate() {
                let Some(acc) = m.cells[i][j] else { continue };
                let seed = m.rows[i].as_ref().map_or(0, |r| r.winning_seed);
                out.push_str(&format!(
                    "{},{},{},{},{:.6}\n",
                    m.arch,
                    train_mag.label(),
                    test_mag.label(),
                    seed,
                    acc
                ));
            }
        }
    }
    out
}

fn f3(v: f64) -> String {
    format!("{v:.3}")
}

fn cell_str(c: Option<f64>) -> String {
    c.map_or_else(|| "n/a".to_string(), f3)
}

/// Markdown report: per-architecture accuracy tables, aggregate statistics,
/// and rankings when at least one complete matrix exists.
pub fn render_markdown(matrices: &[CrossMagMatrix], summaries: &[ArchSummary]) -> Result<String> {
    let mut out = String::from("# Magnification robustness report\n\n");
    if let Some(m) = matrices.first() {
        out.push_str(&format!("Dataset snapshot: `{}`\n\n", m.dataset_fingerprint));
    }

    out.push_str("## Accuracy matrices\n\nRows are the training magnification, columns the test magnification.\n");
    for m in matrices {
        let missing = m.missing();
        let note = if missing > 0 { format!(" (incomplete: {missing} cells missing)") } else { String::new() };
        out.push_str(&format!("\n### {}{}\n\n", m.arch, note));
        out.push_str(&format!(
            "{} parameters, {} activation elems, {} mult-adds per sample.\n\n",
            m.profile.param_count, m.profile.activation_elems, m.profile.mult_adds
        ));
        out.push_str("| train mag | test 40X | test 100X | test 200X | test 400X |\n");
        out.push_str("|---|---:|---:|---:|---:|\n");
        for (i, mag) in Mag::ALL.iter().enumerate() {
            out.push_str(&format!("| {} |", mag.label()));
            for j in 0..4 {
                out.push_str(&format!(" {} |", cell_str(m.cells[i][j])));
            }
            out.push('\n');
        }
    }

    if summaries.is_empty() {
        out.push_str("\nNo complete matrices; statistics and rankings are omitted.\n");
        return Ok(out);
    }

    out.push_str("\n## Statistics\n\n");
    out.push_str("| arch | overall mean | diagonal mean | min cell | min off-diag | gap | params | activation elems |\n");
    out.push_str("|---|---:|---:|---:|---:|---:|---:|---:|\n");
    for s in summaries {
        let offdiag_mean = (16.0 * s.overall_mean - 4.0 * s.diagonal_mean) / 12.0;
        out.push_str(&format!(
            "| {} | {} | {} | {} | {} | {} | {} | {} |\n",
            s.arch,
            f3(s.overall_mean),
            f3(s.diagonal_mean),
            f3(s.min_cell),
            f3(s.min_offdiag_cell),
            f3(s.diagonal_mean - offdiag_mean),
            s.param_count,
            s.activation_elems
        ));
    }

    out.push_str("\n### Mean accuracy by training magnification\n\n");
    out.push_str("| arch | train 40X | train 100X | train 200X | train 400X |\n");
    out.push_str("|---|---:|---:|---:|---:|\n");
    for s in summaries {
        out.push_str(&format!("| {} |", s.arch));
        for rm in s.row_means {
            out.push_str(&format!(" {} |", f3(rm)));
        }
        out.push('\n');
    }

    let report = compare(summaries)?;
    out.push_str("\n## Rankings\n");
    for (title, ranking) in [
        ("By overall mean", &report.by_overall_mean),
        ("By diagonal mean", &report.by_diagonal_mean),
        ("By worst cell", &report.by_min_cell),
        ("By generalization gap (diagonal minus off-diagonal mean)", &report.generalization_gaps),
    ] {
        out.push_str(&format!("\n### {title}\n\n"));
        for (rank, entry) in ranking.iter().enumerate() {
            out.push_str(&format!("{}. {} ({})\n", rank + 1, entry.arch, f3(entry.value)));
        }
    }
    out.push_str("\n## Reference expectations\n\n");
    for note in &report.expectation_notes {
        out.push_str(&format!("- {note}\n"));
    }
    Ok(out)
}

/// Horizontal bar chart of overall mean accuracy, best first.
pub fn render_svg(summaries: &[ArchSummary]) -> String {
    let mut order: Vec<&ArchSummary> = summaries.iter().collect();
    order.sort_by(|a, b| {
        b.overall_mean.partial_cmp(&a.overall_mean).unwrap().then_with(|| a.arch.cmp(&b.arch))
    });

    let label_w = 150.0;
    let bar_max = 460.0;
    let row_h = 34.0;
    let top = 48.0;
    let width = 700.0;
    let height = top + row_h * order.len() as f64 + 16.0;

    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" viewBox=\"0 0 {width} {height}\" font-family=\"sans-serif\">\n"
    );
    out.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{width}\" height=\"{height}\" fill=\"#ffffff\"/>\n"
    ));
    out.push_str(
        "  <text x=\"16\" y=\"28\" font-size=\"16\" fill=\"#202020\">Overall mean accuracy across the magnification grid</text>\n",
    );
    for (k, s) in order.iter().enumerate() {
        let y = top + row_h * k as f64;
        let w = s.overall_mean.clamp(0.0, 1.0) * bar_max;
        out.push_str(&format!(
            "  <text x=\"{x}\" y=\"{ty:.1}\" font-size=\"13\" fill=\"#202020\" text-anchor=\"end\">{arch}</text>\n",
            x = label_w - 8.0,
            ty = y + 21.0,
            arch = s.arch
        ));
        out.push_str(&format!(
            "  <rect class=\"bar\" x=\"{label_w}\" y=\"{y:.1}\" width=\"{w:.1}\" height=\"24\" fill=\"#4878a8\"/>\n"
        ));
        out.push_str(&format!(
            "  <text x=\"{tx:.1}\" y=\"{ty:.1}\" font-size=\"13\" fill=\"#202020\">{v}</text>\n",
            tx = label_w + w + 8.0,
            ty = y + 21.0,
            v = f3(s.overall_mean)
        ));
    }
    out.push_str(&format!(
        "  <line x1=\"{label_w}\" y1=\"{top}\" x2=\"{label_w}\" y2=\"{y2:.1}\" stroke=\"#202020\" stroke-width=\"1\"/>\n",
        y2 = top + row_h * order.len() as f64
    ));
    out.push_str("</svg>\n");
    out
}

/// Loads every `<subdir>/matrix.json` under `dir`, in lexicographic subdir
/// order. Errors when none exist; a malformed matrix file is an error too.
pub fn load_matrices_dir(dir: impl AsRef<Path>) -> Result<Vec<CrossMagMatrix>> {
    let dir = dir.as_ref();
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut paths = Vec::new();
    for entry in rd {
        let entry = entry.map_err(|e| Error::io(dir.display().to_string(), e))?;
        let candidate = entry.path().join("matrix.json");
        if candidate.is_file() {
            paths.push(candidate);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty { what: format!("matrix.json files under {}", dir.display()) });
    }
    paths.iter().map(load_matrix).collect()
}

/// Writes report.{csv,md,svg} into `out_dir` for each requested format and
/// returns the written paths in request order.
pub fn emit_report(
    out_dir: impl AsRef<Path>,
    matrices: &[CrossMagMatrix],
    summaries: &[ArchSummary],
    formats: &[ReportFormat],
) -> Result<Vec<PathBuf>> {
    if matrices.is_empty() {
        return Err(Error::Empty { what: "matrix list".into() });
    }
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut written = Vec::new();
    for &fmt in formats {
        let body = match fmt {
            ReportFormat::Csv => render_csv(matrices),
            ReportFormat::Markdown => render_markdown(matrices, summaries)?,
            ReportFormat::Svg => render_svg(summaries),
        };
        let path = out_dir.join(format!("report.{}", fmt.extension()));
        std::fs::write(&path, body).map_err(|e| Error::io(path.display().to_string(), e))?;
        written.push(path);
    }
    Ok(written)
}
