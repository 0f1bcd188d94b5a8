//! Tables, curve data, storage summaries and image grids derived from a
//! [`TransferMatrix`].

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::attacks::Method;
use crate::eval::{CraftedSet, EvalCell, TransferMatrix};
use crate::experiment::StorageSweep;
use crate::pipeline;
use crate::raster::Image;

/// A rectangular table of already formatted strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    /// Leading label columns; the rest hold numbers and are right-aligned
    /// in markdown.
    pub key_columns: usize,
}

impl Table {
    pub fn to_csv(&self) -> Result<String, String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::CRLF)
            .from_writer(Vec::new());
        w.write_record(&self.header).map_err(|e| e.to_string())?;
        for r in &self.rows {
            w.write_record(r).map_err(|e| e.to_string())?;
        }
        let bytes = w.into_inner().map_err(|e| e.to_string())?;
        String::from_utf8(bytes).map_err(|e| e.to_string())
    }

    pub fn to_markdown(&self) -> String {
        let esc = |s: &str| s.replace('|', "\\|");
        let mut out = String::new();
        let _ = writeln!(
            out,
            "| {} |",
            self.header.iter().map(|h| esc(h)).collect::<Vec<_>>().join(" | ")
        );
        let align: Vec<&str> = (0..self.header.len())
            .map(|i| if i < self.key_columns { "---" } else { "---:" })
            .collect();
        let _ = writeln!(out, "| {} |", align.join(" | "));
        for r in &self.rows {
            let _ = writeln!(out, "| {} |", r.iter().map(|c| esc(c)).collect::<Vec<_>>().join(" | "));
        }
        out
    }
}

pub fn fmt_value(v: f64) -> String {
    format!("{v:.1}")
}

pub fn fmt_eps(eps: f32) -> String {
    format!("{eps}")
}

fn cell_value(cell: Option<&EvalCell>, k: usize) -> String {
    match cell.and_then(|c| c.top(k)) {
        Some(v) => fmt_value(v),
        None => "error".into(),
    }
}

fn targets(matrix: &TransferMatrix) -> Vec<String> {
    matrix.meta.models.iter().map(|m| m.id.clone()).collect()
}

/// Rows keyed by (source, method, epsilon); one column per (target, k).
pub fn transfer_table(matrix: &TransferMatrix) -> Table {
    let targets = targets(matrix);
    let mut header = vec!["source".to_string(), "method".to_string(), "epsilon".to_string()];
    for t in &targets {
        for k in &matrix.meta.k_set {
            header.push(format!("{t} top-{k}"));
        }
    }
    let mut rows = Vec::new();
    for source in &targets {
        for &method in &matrix.meta.methods {
            for &eps in &matrix.meta.epsilons {
                let mut row = vec![source.clone(), method.to_string(), fmt_eps(eps)];
                for t in &targets {
                    let cell = matrix.cell(source, method, eps, t);
                    for &k in &matrix.meta.k_set {
                        row.push(cell_value(cell, k));
                    }
                }
                rows.push(row);
            }
        }
    }
    Table {
        header,
        rows,
        key_columns: 3,
    }
}

/// PSR against epsilon for one (source, method, k): one series per target.
pub fn curve(matrix: &TransferMatrix, source: &str, method: Method, k: usize) -> Table {
    let targets = targets(matrix);
    let mut header = vec!["epsilon".to_string()];
    header.extend(targets.iter().cloned());
    let rows = matrix
        .meta
        .epsilons
        .iter()
        .map(|&eps| {
            let mut row = vec![fmt_eps(eps)];
            for t in &targets {
                row.push(cell_value(matrix.cell(source, method, eps, t), k));
            }
            row
        })
        .collect();
    Table {
        header,
        rows,
        key_columns: 1,
    }
}

/// BIM minus ILLC PSR per (source, epsilon, target, k), when both methods
/// were run.
pub fn bim_illc_delta(matrix: &TransferMatrix) -> Option<Table> {
    let methods = &matrix.meta.methods;
    if !(methods.contains(&Method::Bim) && methods.contains(&Method::Illc)) {
        return None;
    }
    let targets = targets(matrix);
    let mut header = vec!["source".to_string(), "epsilon".to_string()];
    for t in &targets {
        for k in &matrix.meta.k_set {
            header.push(format!("{t} top-{k}"));
        }
    }
    let mut rows = Vec::new();
    for source in &targets {
        for &eps in &matrix.meta.epsilons {
            let mut row = vec![source.clone(), fmt_eps(eps)];
            for t in &targets {
                for &k in &matrix.meta.k_set {
                    let b = matrix.cell(source, Method::Bim, eps, t).and_then(|c| c.top(k));
                    let i = matrix.cell(source, Method::Illc, eps, t).and_then(|c| c.top(k));
                    row.push(match (b, i) {
                        (Some(b), Some(i)) => fmt_value(b - i),
                        _ => "error".into(),
                    });
                }
            }
            rows.push(row);
        }
    }
    Some(Table {
        header,
        rows,
        key_columns: 2,
    })
}

/// Mean BIM - ILLC Top-1 difference over transfer cells (source != target)
/// and over white-box cells.
pub fn bim_illc_summary(matrix: &TransferMatrix) -> Option<(f64, f64)> {
    let mut transfer = Vec::new();
    let mut white = Vec::new();
    for c in matrix.cells.iter().filter(|c| c.method == Method::Bim) {
        let other = matrix.cell(&c.source, Method::Illc, c.epsilon, &c.target);
        if let (Some(b), Some(i)) = (c.top(1), other.and_then(|o| o.top(1))) {
            if c.source == c.target {
                white.push(b - i);
            } else {
                transfer.push(b - i);
            }
        }
    }
    let mean = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    (!transfer.is_empty() || !white.is_empty()).then(|| (mean(&transfer), mean(&white)))
}

pub fn storage_cells_table(sweep: &StorageSweep, k_set: &[usize]) -> Table {
    let mut header: Vec<String> = ["quality", "source", "method", "epsilon", "target", "samples"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(k_set.iter().map(|k| format!("top-{k}")));
    let rows = sweep
        .cells
        .iter()
        .map(|(q, c)| {
            let mut row = vec![
                q.to_string(),
                c.source.clone(),
                c.method.to_string(),
                fmt_eps(c.epsilon),
                c.target.clone(),
                c.samples.to_string(),
            ];
            row.extend(k_set.iter().map(|&k| cell_value(Some(c), k)));
            row
        })
        .collect();
    Table {
        header,
        rows,
        key_columns: 5,
    }
}

pub fn storage_images_table(sweep: &StorageSweep) -> Table {
    let header = [
        "quality",
        "source",
        "method",
        "epsilon",
        "index",
        "storage_max_delta",
        "max_deviation_after_storage",
        "exceeds_epsilon",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows = sweep
        .images
        .iter()
        .map(|i| {
            vec![
                i.quality.to_string(),
                i.source.clone(),
                i.method.to_string(),
                fmt_eps(i.epsilon),
                i.index.to_string(),
                format!("{}", i.storage_delta),
                format!("{}", i.deviation_after_storage),
                (i.deviation_after_storage > i.epsilon).to_string(),
            ]
        })
        .collect();
    Table {
        header,
        rows,
        key_columns: 5,
    }
}

/// Per-quality summary: mean and max of the per-image storage delta.
pub fn storage_summary(sweep: &StorageSweep) -> Table {
    let header = [
        "quality",
        "images",
        "mean_storage_max_delta",
        "max_storage_max_delta",
        "images_outside_budget",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let rows = sweep
        .qualities
        .iter()
        .map(|&q| {
            let imgs: Vec<_> = sweep.images.iter().filter(|i| i.quality == q).collect();
            let n = imgs.len().max(1) as f64;
            let mean = imgs.iter().map(|i| f64::from(i.storage_delta)).sum::<f64>() / n;
            let max = imgs.iter().map(|i| i.storage_delta).fold(0.0f32, f32::max);
            let outside = imgs.iter().filter(|i| i.deviation_after_storage > i.epsilon).count();
            vec![
                q.to_string(),
                imgs.len().to_string(),
                format!("{mean:.2}"),
                format!("{max}"),
                outside.to_string(),
            ]
        })
        .collect();
    Table {
        header,
        rows,
        key_columns: 1,
    }
}

const GAP: usize = 2;
const BACKGROUND: f32 = 255.0;

/// Lays images out on a grid of equal cells; smaller images sit in the top
/// left corner of their cell. `None` leaves a cell blank.
pub fn contact_sheet(rows: &[Vec<Option<&Image>>]) -> Image {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let cell = rows
        .iter()
        .flatten()
        .flatten()
        .map(|i| i.height().max(i.width()))
        .max()
        .unwrap_or(1);
    let height = rows.len() * (cell + GAP) + GAP;
    let width = cols * (cell + GAP) + GAP;
    let mut sheet = Image::filled(height, width, BACKGROUND);
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            let Some(img) = img else { continue };
            let (oy, ox) = (GAP + r * (cell + GAP), GAP + c * (cell + GAP));
            for y in 0..img.height() {
                for x in 0..img.width() {
                    for ch in 0..3 {
                        sheet.set(oy + y, ox + x, ch, img.get(y, x, ch));
                    }
                }
            }
        }
    }
    sheet
}

fn set_for<'a>(sets: &'a [CraftedSet], source: &str, method: Method, eps: f32) -> Option<&'a CraftedSet> {
    sets.iter()
        .find(|s| s.source == source && s.method == method && s.epsilon.to_bits() == eps.to_bits())
}

fn adv_image(set: Option<&CraftedSet>, index: usize) -> Option<&Image> {
    set.and_then(|s| s.records.get(index))
        .and_then(|r| r.as_ref().ok())
        .map(|r| &r.x_adv)
}

fn original_image<'a>(sets: &'a [CraftedSet], source: &str, index: usize) -> Option<&'a Image> {
    sets.iter()
        .filter(|s| s.source == source)
        .find_map(|s| s.records.get(index).and_then(|r| r.as_ref().ok()))
        .map(|r| &r.x)
}

/// One row per (model, method) for evaluation image `index`: the original
/// first, then one column per epsilon.
pub fn overview_grid(matrix: &TransferMatrix, sets: &[CraftedSet], index: usize) -> Image {
    let mut rows = Vec::new();
    for m in &matrix.meta.models {
        for &method in &matrix.meta.methods {
            let mut row = vec![original_image(sets, &m.id, index)];
            for &eps in &matrix.meta.epsilons {
                row.push(adv_image(set_for(sets, &m.id, method, eps), index));
            }
            rows.push(row);
        }
    }
    contact_sheet(&rows)
}

/// Contact sheet for one (model, method): one row per image, original
/// first, then one column per epsilon.
pub fn method_grid(matrix: &TransferMatrix, sets: &[CraftedSet], source: &str, method: Method, images: usize) -> Image {
    let rows: Vec<Vec<Option<&Image>>> = (0..images)
        .map(|i| {
            let mut row = vec![original_image(sets, source, i)];
            for &eps in &matrix.meta.epsilons {
                row.push(adv_image(set_for(sets, source, method, eps), i));
            }
            row
        })
        .collect();
    contact_sheet(&rows)
}

fn write_text(path: &Path, text: &str, written: &mut Vec<PathBuf>) -> Result<(), String> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
    }
    fs::write(path, text).map_err(|e| format!("{}: {e}", path.display()))?;
    written.push(path.to_path_buf());
    Ok(())
}

fn write_png(path: &Path, img: &Image, written: &mut Vec<PathBuf>) -> Result<(), String> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| format!("{}: {e}", parent.display()))?;
    }
    pipeline::save_png(img, path).map_err(|e| e.to_string())?;
    written.push(path.to_path_buf());
    Ok(())
}

fn summary_markdown(matrix: &TransferMatrix, sweep: Option<&StorageSweep>) -> String {
    let m = &matrix.meta;
    let mut out = String::new();
    let _ = writeln!(out, "# Transferability report\n");
    let _ = writeln!(out, "- dataset: `{}` ({} classes)", m.dataset_id, m.num_classes);
    let _ = writeln!(out, "- evaluation images per cell: {}", m.eval_samples);
    let _ = writeln!(
        out,
        "- models: {}",
        m.models
            .iter()
            .map(|i| format!("{} ({}px, seed {})", i.id, i.input_size, i.seed))
            .collect::<Vec<_>>()
            .join(", ")
    );
    let _ = writeln!(out, "- global seed: {}", m.global_seed);
    let _ = writeln!(
        out,
        "- storage JPEG quality: {}",
        m.jpeg_quality.map_or("none".to_string(), |q| q.to_string())
    );
    let _ = writeln!(out, "- step size alpha: {}", m.alpha);
    let _ = writeln!(out, "- detector: {}", m.detector);
    if !m.dropped_k.is_empty() {
        let _ = writeln!(
            out,
            "- k values dropped (larger than the class count): {:?}",
            m.dropped_k
        );
    }
    let _ = writeln!(out, "\n## Protection success rate (%)\n");
    out.push_str(&transfer_table(matrix).to_markdown());
    if let Some(delta) = bim_illc_delta(matrix) {
        let _ = writeln!(out, "\n## BIM minus ILLC (percentage points)\n");
        if let Some((transfer, white)) = bim_illc_summary(matrix) {
            let _ = writeln!(
                out,
                "Mean Top-1 difference: {transfer:.1} on transfer cells, {white:.1} on white-box cells.\n"
            );
        }
        out.push_str(&delta.to_markdown());
    }
    if let Some(s) = sweep {
        let _ = writeln!(out, "\n## JPEG storage\n");
        out.push_str(&storage_summary(s).to_markdown());
    }
    let errors = matrix.errors();
    if !errors.is_empty() {
        let _ = writeln!(out, "\n## Failed cells\n");
        for c in errors {
            let _ = writeln!(
                out,
                "- {} {} eps={} -> {}: {}",
                c.source,
                c.method,
                c.epsilon,
                c.target,
                c.error.as_deref().unwrap_or_default()
            );
        }
    }
    out
}

/// Writes every report under `dir` and returns the paths written.
pub fn write_all(
    dir: &Path,
    matrix: &TransferMatrix,
    sweep: Option<&StorageSweep>,
    sets: &[CraftedSet],
    grid_samples: usize,
) -> Result<Vec<PathBuf>, String> {
    let mut written = Vec::new();
    let table = transfer_table(matrix);
    write_text(&dir.join("transfer_matrix.csv"), &table.to_csv()?, &mut written)?;
    write_text(&dir.join("transfer_matrix.md"), &table.to_markdown(), &mut written)?;
    for src in targets(matrix) {
        for &method in &matrix.meta.methods {
            for &k in &matrix.meta.k_set {
                let name = format!("curves/{src}_{}_top{k}.csv", method.as_str().to_ascii_lowercase());
                write_text(&dir.join(name), &curve(matrix, &src, method, k).to_csv()?, &mut written)?;
            }
        }
    }
    if let Some(delta) = bim_illc_delta(matrix) {
        write_text(&dir.join("bim_minus_illc.csv"), &delta.to_csv()?, &mut written)?;
        write_text(&dir.join("bim_minus_illc.md"), &delta.to_markdown(), &mut written)?;
    }
    if let Some(s) = sweep {
        write_text(
            &dir.join("storage_cells.csv"),
            &storage_cells_table(s, &matrix.meta.k_set).to_csv()?,
            &mut written,
        )?;
        write_text(
            &dir.join("storage_images.csv"),
            &storage_images_table(s).to_csv()?,
            &mut written,
        )?;
        write_text(
            &dir.join("storage_summary.csv"),
            &storage_summary(s).to_csv()?,
            &mut written,
        )?;
    }
    write_text(&dir.join("report.md"), &summary_markdown(matrix, sweep), &mut written)?;
    if !sets.is_empty() {
        write_png(
            &dir.join("grids/overview.png"),
            &overview_grid(matrix, sets, 0),
            &mut written,
        )?;
        let images = grid_samples.min(matrix.meta.eval_samples);
        for m in &matrix.meta.models {
            for &method in &matrix.meta.methods {
                let name = format!("grids/{}_{}.png", m.id, method.as_str().to_ascii_lowercase());
                write_png(
                    &dir.join(name),
                    &method_grid(matrix, sets, &m.id, method, images),
                    &mut written,
                )?;
            }
        }
    }
    Ok(written)
}
