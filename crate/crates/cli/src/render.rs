//! Token heatmaps and highlighted-token exports.

use std::fmt::Write as _;
use std::path::Path;

use crate::{PipelineError, Result};

/// Fill of one cell: white at 0, pure green at +1, pure red at −1.
pub fn cell_color(v: f64) -> (u8, u8, u8) {
    let m = v.abs().min(1.0);
    let fade = (255.0 * (1.0 - m)).round() as u8;
    if v > 0.0 {
        (fade, 255, fade)
    } else if v < 0.0 {
        (255, fade, fade)
    } else {
        (255, 255, 255)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const CELL_H: usize = 22;
const ROW_WIDTH: usize = 640;

/// SVG of the tokens with backgrounds scaled by `max |phi|`.
pub fn render_heatmap(words: &[String], phi: &[f64]) -> Result<String> {
    if words.len() != phi.len() {
        return Err(PipelineError::Config(
            "heatmap needs one score per token".into(),
        ));
    }
    let peak = phi.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut cells = String::new();
    let (mut x, mut y) = (0usize, 0usize);
    for (w, &v) in words.iter().zip(phi) {
        let width = 8 * w.chars().count() + 10;
        if x > 0 && x + width > ROW_WIDTH {
            x = 0;
            y += CELL_H;
        }
        let (r, g, b) = cell_color(if peak > 0.0 { v / peak } else { 0.0 });
        let _ = writeln!(
            cells,
            "<rect x=\"{x}\" y=\"{y}\" width=\"{width}\" height=\"{CELL_H}\" fill=\"#{r:02x}{g:02x}{b:02x}\"/>\
             <text x=\"{}\" y=\"{}\">{}</text>",
            x + 5,
            y + 15,
            escape(w)
        );
        x += width;
    }
    Ok(format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{ROW_WIDTH}\" height=\"{}\" \
         font-family=\"monospace\" font-size=\"13\">\n{cells}</svg>\n",
        y + CELL_H
    ))
}

/// Indices of the top `fraction` of tokens by `|phi|`, in token order. Ties at the cut go to
/// the lower index.
pub fn highlight_positions(phi: &[f64], fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PipelineError::Config(format!(
            "highlight fraction must lie in (0, 1], got {fraction}"
        )));
    }
    let keep = ((fraction * phi.len() as f64).ceil() as usize).min(phi.len());
    let mut order: Vec<usize> = (0..phi.len()).collect();
    order.sort_by(|&a, &b| phi[b].abs().total_cmp(&phi[a].abs()).then(a.cmp(&b)));
    let mut picked = order[..keep].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// One exported sample: its full text and, per method, its token words and scores.
pub struct HighlightRow {
    pub text: String,
    pub words: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

/// Writes `char,<method>...` with the highlighted words of each method per row.
pub fn export_highlight_csv(
    path: &Path,
    methods: &[String],
    rows: &[HighlightRow],
    fraction: f64,
) -> Result<()> {
    if methods.len() < 2 {
        return Err(PipelineError::Config(
            "highlight export needs at least two methods".into(),
        ));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| PipelineError::Io(e.into()))?;
    let mut header = vec!["char".to_string()];
    header.extend(methods.iter().cloned());
    w.write_record(&header)
        .map_err(|e| PipelineError::Io(e.into()))?;
    for row in rows {
        if row.scores.len() != methods.len() {
            return Err(PipelineError::Config(
                "one score vector per method is required".into(),
            ));
        }
        let mut rec = vec![row.text.clone()];
        for s in &row.scores {
            let picked = highlight_positions(s, fraction)?;
            rec.push(
                picked
                    .iter()
                    .map(|&i| row.words[i].as_str())
                    .collect::<Vec<_>>()
                    .join(" "),
            );
        }
        w.write_record(&rec)
            .map_err(|e| PipelineError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}
