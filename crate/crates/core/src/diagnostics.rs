//! Token-wise over-smoothing measurements.
//!
//! For a sentence with token states `h_1..h_m` the token-wise similarity is
//! the mean cosine over ordered pairs `i != j`:
//!
//! ```text
//! 1 / (m (m - 1)) * Σ_{i≠j} <h_i, h_j> / (|h_i| |h_j|)
//! ```
//!
//! Callers must strip padding tokens before measuring; the synthetic tasks
//! never pad.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::model::ForwardTrace;
use crate::numcore::Matrix;

/// Pairwise cosine matrix of the rows of `h`; diagonal set to 1.
pub fn similarity_matrix(h: &Matrix) -> Result<Matrix> {
    let m = h.rows();
    let norms: Vec<f64> = (0..m)
        .map(|i| h.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    if let Some(i) = norms.iter().position(|n| *n == 0.0) {
        return Err(LabError::Compute(format!("token row {i} has zero norm")));
    }
    let mut out = Matrix::zeros(m, m);
    for i in 0..m {
        for j in 0..m {
            let value = if i == j {
                1.0
            } else {
                let dot: f64 = h.row(i).iter().zip(h.row(j)).map(|(a, b)| a * b).sum();
                dot / (norms[i] * norms[j])
            };
            out.set(i, j, value);
        }
    }
    Ok(out)
}

/// Mean of the off-diagonal entries, visited row-major.
fn off_diagonal_mean(sim: &Matrix) -> f64 {
    let m = sim.rows();
    let mut total = 0.0;
    for i in 0..m {
        for j in 0..m {
            if i != j {
                total += sim.get(i, j);
            }
        }
    }
    total / (m * (m - 1)) as f64
}

/// Mean pairwise cosine over distinct tokens.
pub fn tokenwise_similarity(h: &Matrix) -> Result<f64> {
    if h.rows() < 2 {
        return Err(LabError::Input(format!(
            "token-wise similarity needs at least 2 tokens, got {}",
            h.rows()
        )));
    }
    Ok(off_diagonal_mean(&similarity_matrix(h)?))
}

/// Identifies the run a report came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub lambda: f64,
    pub method: String,
    pub dataset: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityReport {
    /// Indexed by layer `0..=L`.
    pub per_layer_mean: Vec<f64>,
    /// `per_sentence[s][l]` is the `m x m` cosine matrix of sentence `s` at layer `l`.
    #[serde(skip)]
    pub per_sentence: Vec<Vec<Matrix>>,
    pub meta: ReportMeta,
}

impl SimilarityReport {
    pub fn n_layers(&self) -> usize {
        self.per_layer_mean.len()
    }

    pub fn last(&self) -> f64 {
        *self.per_layer_mean.last().expect("report has at least one layer")
    }

    /// `layer,mean_similarity` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,mean_similarity\n");
        for (l, v) in self.per_layer_mean.iter().enumerate() {
            let _ = writeln!(out, "{l},{v}");
        }
        out
    }

    /// Line chart of the per-layer means.
    pub fn to_svg(&self) -> String {
        profile_svg(&self.per_layer_mean, &self.meta.method)
    }
}

/// Per-layer similarity averaged over sentences (sentence means first).
pub fn layer_profile(traces: &[ForwardTrace], meta: ReportMeta) -> Result<SimilarityReport> {
    let first = traces
        .first()
        .ok_or_else(|| LabError::Input("similarity profile of an empty batch".into()))?;
    let n_layers = first.hidden.len();
    let mut sums = vec![0.0; n_layers];
    let mut per_sentence = Vec::with_capacity(traces.len());
    for (s, trace) in traces.iter().enumerate() {
        if trace.hidden.len() != n_layers {
            return Err(LabError::Input(format!(
                "sentence {s} has {} layers, expected {n_layers}",
                trace.hidden.len()
            )));
        }
        if trace.h0.rows() < 2 {
            return Err(LabError::Input(format!("sentence {s} has fewer than 2 tokens")));
        }
        let mut mats = Vec::with_capacity(n_layers);
        for (l, h) in trace.hidden.iter().enumerate() {
            let sim = similarity_matrix(h)?;
            sums[l] += off_diagonal_mean(&sim);
            mats.push(sim);
        }
        per_sentence.push(mats);
    }
    let n = traces.len() as f64;
    Ok(SimilarityReport {
        per_layer_mean: sums.into_iter().map(|s| s / n).collect(),
        per_sentence,
        meta,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDelta {
    pub layer: usize,
    pub vanilla: f64,
    pub sibo: f64,
    /// `sibo - vanilla`
    pub delta: f64,
    pub sibo_lower: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<LayerDelta>,
    pub warnings: Vec<String>,
}

impl ComparisonTable {
    pub fn mean_vanilla(&self) -> f64 {
        self.rows.iter().map(|r| r.vanilla).sum::<f64>() / self.rows.len() as f64
    }

    pub fn mean_sibo(&self) -> f64 {
        self.rows.iter().map(|r| r.sibo).sum::<f64>() / self.rows.len() as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,vanilla,sibo,delta,sibo_lower\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{},{}", r.layer, r.vanilla, r.sibo, r.delta, r.sibo_lower);
        }
        out
    }
}

/// Per-layer deltas over the last `k` layers (clamped to the full profile).
pub fn last_layers_compare(vanilla: &SimilarityReport, sibo: &SimilarityReport, k: usize) -> Result<ComparisonTable> {
    let n = vanilla.n_layers();
    if n != sibo.n_layers() || n == 0 {
        return Err(LabError::Input(format!(
            "cannot compare profiles with {} and {} layers",
            n,
            sibo.n_layers()
        )));
    }
    if vanilla.per_sentence.len() != sibo.per_sentence.len() {
        return Err(LabError::Input("reports cover different batch sizes".into()));
    }
    let mut warnings = Vec::new();
    let k = if k > n {
        let msg = format!("k={k} exceeds {n} profile layers; using all of them");
        log::warn!("{msg}");
        warnings.push(msg);
        n
    } else {
        k
    };
    let rows = (n - k..n)
        .map(|layer| {
            let (v, s) = (vanilla.per_layer_mean[layer], sibo.per_layer_mean[layer]);
            LayerDelta {
                layer,
                vanilla: v,
                sibo: s,
                delta: s - v,
                sibo_lower: s < v,
            }
        })
        .collect();
    Ok(ComparisonTable { rows, warnings })
}

/// Writes `<base>.csv` (`i,j,value`) and `<base>.svg` for a square similarity matrix.
///
/// The SVG maps `[-1, 1]` linearly from blue (`-1`) through white (`0`) to red (`1`).
pub fn heatmap_export(matrix: &Matrix, base: &Path) -> Result<(PathBuf, PathBuf)> {
    if matrix.rows() != matrix.cols() {
        return Err(LabError::Input(format!(
            "heatmap needs a square matrix, got {:?}",
            matrix.shape()
        )));
    }
    for i in 0..matrix.rows() {
        for j in 0..i {
            if (matrix.get(i, j) - matrix.get(j, i)).abs() > 1e-12 {
                return Err(LabError::Input(format!("heatmap matrix not symmetric at ({i}, {j})")));
            }
        }
    }
    let csv_path = with_suffix(base, "csv");
    let svg_path = with_suffix(base, "svg");
    std::fs::write(&csv_path, matrix_csv(matrix)).map_err(|e| LabError::io(&csv_path, e))?;
    std::fs::write(&svg_path, heatmap_svg(matrix)).map_err(|e| LabError::io(&svg_path, e))?;
    Ok((csv_path, svg_path))
}

fn with_suffix(base: &Path, ext: &str) -> PathBuf {
    let mut name = base.as_os_str().to_owned();
    name.push(".");
    name.push(ext);
    PathBuf::from(name)
}

pub fn matrix_csv(matrix: &Matrix) -> String {
    let mut out = String::from("i,j,value\n");
    for i in 0..matrix.rows() {
        for j in 0..matrix.cols() {
            let _ = writeln!(out, "{i},{j},{}", matrix.get(i, j));
        }
    }
    out
}

/// Parses `i,j,value` rows back into a square matrix.
pub fn read_matrix_csv(text: &str) -> Result<Matrix> {
    let mut cells = Vec::new();
    for (n, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        let parse_err = || LabError::Format(format!("bad heatmap csv line {}: {line}", n + 1));
        if parts.len() != 3 {
            return Err(parse_err());
        }
        let i: usize = parts[0].parse().map_err(|_| parse_err())?;
        let j: usize = parts[1].parse().map_err(|_| parse_err())?;
        let v: f64 = parts[2].parse().map_err(|_| parse_err())?;
        cells.push((i, j, v));
    }
    let size = cells.iter().map(|(i, j, _)| i.max(j) + 1).max().unwrap_or(0);
    let mut m = Matrix::zeros(size, size);
    for (i, j, v) in cells {
        m.set(i, j, v);
    }
    Ok(m)
}

/// RGB for a value in `[-1, 1]`.
pub fn diverging_color(v: f64) -> (u8, u8, u8) {
    let t = v.clamp(-1.0, 1.0);
    let fade = |x: f64| (255.0 * (1.0 - x)).round() as u8;
    if t >= 0.0 {
        (255, fade(t), fade(t))
    } else {
        (fade(-t), fade(-t), 255)
    }
}

pub fn heatmap_svg(matrix: &Matrix) -> String {
    const CELL: usize = 20;
    let n = matrix.rows();
    let size = n * CELL;
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n"
    );
    for i in 0..n {
        for j in 0..n {
            let (r, g, b) = diverging_color(matrix.get(i, j));
            let _ = writeln!(
                out,
                "<rect x=\"{}\" y=\"{}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"rgb({r},{g},{b})\"><title>{i},{j}: {:.4}</title></rect>",
                j * CELL,
                i * CELL,
                matrix.get(i, j)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

fn profile_svg(values: &[f64], label: &str) -> String {
    const W: f64 = 400.0;
    const H: f64 = 240.0;
    const PAD: f64 = 30.0;
    let n = values.len().max(2) - 1;
    let x = |l: usize| PAD + (W - 2.0 * PAD) * l as f64 / n as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v.clamp(-1.0, 1.0) + 1.0) / 2.0;
    let points: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(l, v)| format!("{:.2},{:.2}", x(l), y(*v)))
        .collect();
    let mut out = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\">\n");
    let _ = writeln!(
        out,
        "<line x1=\"{PAD}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"#999\"/>",
        y(0.0),
        W - PAD
    );
    let _ = writeln!(
        out,
        "<polyline fill=\"none\" stroke=\"#c33\" stroke-width=\"2\" points=\"{}\"/>",
        points.join(" ")
    );
    let _ = writeln!(
        out,
        "<text x=\"{PAD}\" y=\"16\" font-size=\"12\">{label}: token-wise similarity by layer</text>"
    );
    out.push_str("</svg>\n");
    out
}
