// SPDX-License-Identifier: MIT OR Apache-2.0

//! Diagnostics: two-component PCA of a layer's high/low activations, the
//! `|d|` threshold census and the dual-criterion scatter categories.

use std::fmt::Write as _;
use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::dumpio::{ActivationMatrix, Direction};
use crate::error::{Error, Result};
use crate::select::{check_q, quantile_threshold, SelectionParams};
use crate::stats::LayerStats;

/// How the top principal directions are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcaMethod {
    /// Covariance when `K <= N`, Gram otherwise.
    Auto,
    /// Eigendecomposition of the `K x K` covariance.
    Covariance,
    /// Eigendecomposition of the `N x N` Gram matrix, mapped back to
    /// neuron space. Cheap when samples are far fewer than neurons.
    Gram,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub point: [f64; 2],
    pub label: Direction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    pub layer_index: usize,
    /// Two orthonormal rows of length K.
    pub components: [Vec<f64>; 2],
    pub explained_variance_ratio: [f64; 2],
    pub projections: Vec<ProjectedPoint>,
}

pub fn pca_layer(high: &ActivationMatrix, low: &ActivationMatrix) -> Result<PcaResult> {
    pca_layer_with(high, low, PcaMethod::Auto)
}

pub fn pca_layer_with(high: &ActivationMatrix, low: &ActivationMatrix, method: PcaMethod) -> Result<PcaResult> {
    if high.n_neurons() != low.n_neurons() {
        return Err(Error::ShapeMismatch(format!(
            "high has {} neurons, low has {}",
            high.n_neurons(),
            low.n_neurons()
        )));
    }
    let k = high.n_neurons();
    let n = high.n_samples() + low.n_samples();
    if n < 3 {
        return Err(Error::InsufficientSamples(format!("PCA needs at least 3 samples, got {n}")));
    }
    if k < 2 {
        return Err(Error::InvalidParam("PCA needs at least 2 neurons".into()));
    }

    let labels: Vec<Direction> = std::iter::repeat_n(Direction::High, high.n_samples())
        .chain(std::iter::repeat_n(Direction::Low, low.n_samples()))
        .collect();
    let mut x = DMatrix::<f64>::from_iterator(
        k,
        n,
        high.data().iter().chain(low.data()).map(|&v| f64::from(v)),
    )
    .transpose();
    let mean = x.row_mean();
    for mut row in x.row_iter_mut() {
        row -= &mean;
    }
    let dof = (n - 1) as f64;
    let total_var = x.iter().map(|v| v * v).sum::<f64>() / dof;
    if !(total_var > 0.0) {
        return Err(Error::Degenerate("all samples are identical; no variance to decompose".into()));
    }

    let method = match method {
        PcaMethod::Auto if k <= n => PcaMethod::Covariance,
        PcaMethod::Auto => PcaMethod::Gram,
        m => m,
    };
    let (values, mut comps) = match method {
        PcaMethod::Covariance => top2_covariance(&x, dof),
        _ => top2_gram(&x, dof),
    };
    for c in comps.iter_mut() {
        orient(c);
    }

    let projections = x
        .row_iter()
        .zip(labels)
        .map(|(row, label)| ProjectedPoint {
            point: [row.dot(&comps[0].transpose()), row.dot(&comps[1].transpose())],
            label,
        })
        .collect();
    let [c0, c1] = comps;
    Ok(PcaResult {
        layer_index: high.layer_index(),
        components: [c0.iter().copied().collect(), c1.iter().copied().collect()],
        explained_variance_ratio: [
            (values[0] / total_var).clamp(0.0, 1.0),
            (values[1] / total_var).clamp(0.0, 1.0),
        ],
        projections,
    })
}

/// Indices of eigenvalues in descending order.
fn descending(values: &DVector<f64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order
}

fn top2_covariance(x: &DMatrix<f64>, dof: f64) -> ([f64; 2], [DVector<f64>; 2]) {
    let cov = (x.transpose() * x) / dof;
    let eig = SymmetricEigen::new(cov);
    let order = descending(&eig.eigenvalues);
    let pick = |i: usize| eig.eigenvectors.column(order[i]).into_owned();
    (
        [eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]].max(0.0)],
        [pick(0), pick(1)],
    )
}

fn top2_gram(x: &DMatrix<f64>, dof: f64) -> ([f64; 2], [DVector<f64>; 2]) {
    let gram = (x * x.transpose()) / dof;
    let eig = SymmetricEigen::new(gram);
    let order = descending(&eig.eigenvalues);
    let lambda = [eig.eigenvalues[order[0]].max(0.0), eig.eigenvalues[order[1]].max(0.0)];
    let lift = |i: usize| {
        let u = eig.eigenvectors.column(order[i]);
        let v = x.transpose() * u;
        let norm = v.norm();
        v / norm
    };
    let first = lift(0);
    let second = if lambda[1] > lambda[0] * 1e-12 {
        let mut v = lift(1);
        // re-orthogonalise against rounding
        v -= &first * first.dot(&v);
        v.normalize()
    } else {
        orthogonal_complement(&first)
    };
    (lambda, [first, second])
}

/// A deterministic unit vector orthogonal to `v`, used when the second
/// principal direction carries no variance.
fn orthogonal_complement(v: &DVector<f64>) -> DVector<f64> {
    let j = (0..v.len())
        .min_by(|&a, &b| v[a].abs().total_cmp(&v[b].abs()))
        .unwrap_or(0);
    let mut e = DVector::zeros(v.len());
    e[j] = 1.0;
    e -= v * v[j];
    e.normalize()
}

/// Flips `v` so its largest-magnitude coordinate is positive.
fn orient(v: &mut DVector<f64>) {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.neg_mut();
    }
}

/// Distance between the two cluster centroids in PC space divided by the
/// mean distance of points to their own centroid.
pub fn separation_score(result: &PcaResult) -> Result<f64> {
    let centroid = |label: Direction| {
        let pts: Vec<[f64; 2]> = result
            .projections
            .iter()
            .filter(|p| p.label == label)
            .map(|p| p.point)
            .collect();
        if pts.is_empty() {
            return None;
        }
        let n = pts.len() as f64;
        Some([
            pts.iter().map(|p| p[0]).sum::<f64>() / n,
            pts.iter().map(|p| p[1]).sum::<f64>() / n,
        ])
    };
    let (Some(ch), Some(cl)) = (centroid(Direction::High), centroid(Direction::Low)) else {
        return Err(Error::InvalidParam("separation score needs both high and low points".into()));
    };
    let dist = |a: [f64; 2], b: [f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let between = dist(ch, cl);
    let within = result
        .projections
        .iter()
        .map(|p| dist(p.point, if p.label == Direction::High { ch } else { cl }))
        .sum::<f64>()
        / result.projections.len() as f64;
    Ok(if between == 0.0 {
        0.0
    } else if within == 0.0 {
        f64::INFINITY
    } else {
        between / within
    })
}

pub fn write_projections_csv<W: Write>(writer: W, result: &PcaResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::format("<projections csv>", e);
    w.write_record(["layer", "label", "pc1", "pc2"]).map_err(err)?;
    for p in &result.projections {
        w.write_record([
            result.layer_index.to_string(),
            p.label.to_string(),
            p.point[0].to_string(),
            p.point[1].to_string(),
        ])
        .map_err(err)?;
    }
    w.flush().map_err(|e| Error::io("<projections csv>", e))?;
    Ok(())
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

const SVG_W: f64 = 480.0;
const SVG_H: f64 = 400.0;
const PAD: f64 = 40.0;

impl Frame {
    fn fit(points: impl Iterator<Item = [f64; 2]>) -> Self {
        let mut f = Frame {
            x0: f64::INFINITY,
            x1: f64::NEG_INFINITY,
            y0: f64::INFINITY,
            y1: f64::NEG_INFINITY,
        };
        for [x, y] in points.filter(|p| p[0].is_finite() && p[1].is_finite()) {
            f.x0 = f.x0.min(x);
            f.x1 = f.x1.max(x);
            f.y0 = f.y0.min(y);
            f.y1 = f.y1.max(y);
        }
        if !f.x0.is_finite() {
            (f.x0, f.x1, f.y0, f.y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if f.x1 - f.x0 == 0.0 {
            f.x1 = f.x0 + 1.0;
        }
        if f.y1 - f.y0 == 0.0 {
            f.y1 = f.y0 + 1.0;
        }
        f
    }

    fn map(&self, [x, y]: [f64; 2]) -> (f64, f64) {
        (
            PAD + (x - self.x0) / (self.x1 - self.x0) * (SVG_W - 2.0 * PAD),
            SVG_H - PAD - (y - self.y0) / (self.y1 - self.y0) * (SVG_H - 2.0 * PAD),
        )
    }
}

fn svg_open(title: &str, x_label: &str, y_label: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SVG_W}" height="{SVG_H}" viewBox="0 0 {SVG_W} {SVG_H}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{title}</text>"#, SVG_W / 2.0);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{x_label}</text>"#,
        SVG_W / 2.0,
        SVG_H - 8.0
    );
    let _ = writeln!(
        s,
        r#"<text x="12" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 12 {})">{y_label}</text>"#,
        SVG_H / 2.0,
        SVG_H / 2.0
    );
    s
}

/// PCA scatter, high samples red and low samples blue.
pub fn pca_svg(result: &PcaResult) -> String {
    let frame = Frame::fit(result.projections.iter().map(|p| p.point));
    let mut s = svg_open(
        &format!("Layer {} PCA", result.layer_index),
        &format!("PC1 ({:.1}%)", 100.0 * result.explained_variance_ratio[0]),
        &format!("PC2 ({:.1}%)", 100.0 * result.explained_variance_ratio[1]),
    );
    for p in &result.projections {
        let (x, y) = frame.map(p.point);
        let color = match p.label {
            Direction::High => "red",
            Direction::Low => "blue",
        };
        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2.5" fill="{color}" fill-opacity="0.6"/>"#);
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CensusRow {
    pub threshold: f64,
    pub count: usize,
    pub fraction: f64,
}

/// Number and fraction of neurons with `|d|` strictly above each threshold.
/// Thresholds are expected in ascending order.
pub fn census(d: &[f64], thresholds: &[f64]) -> Vec<CensusRow> {
    thresholds
        .iter()
        .map(|&t| {
            let count = d.iter().filter(|v| v.abs() > t).count();
            CensusRow {
                threshold: t,
                count,
                fraction: if d.is_empty() { 0.0 } else { count as f64 / d.len() as f64 },
            }
        })
        .collect()
}

/// `1234567` -> `"1,234,567"`.
pub fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::with_capacity(digits.len() + digits.len() / 3);
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// One line per row, e.g. `|d| > 0.8 → 5,799 (40.5%)`.
pub fn render_census(rows: &[CensusRow]) -> String {
    rows.iter()
        .map(|r| {
            format!(
                "|d| > {} → {} ({:.1}%)\n",
                r.threshold,
                group_thousands(r.count),
                100.0 * r.fraction
            )
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScatterCategory {
    Both,
    OnlyQuantile,
    OnlyEffectSize,
    Neither,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScatterPoint {
    pub neuron: usize,
    pub abs_s: f64,
    pub abs_d: f64,
    pub category: ScatterCategory,
}

/// Dual-criterion scatter for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DualScatter {
    pub layer_index: usize,
    pub quantile_threshold: f64,
    pub tau_d: f64,
    pub points: Vec<ScatterPoint>,
}

impl DualScatter {
    pub fn count(&self, category: ScatterCategory) -> usize {
        self.points.iter().filter(|p| p.category == category).count()
    }

    pub fn indices(&self, category: ScatterCategory) -> Vec<usize> {
        self.points
            .iter()
            .filter(|p| p.category == category)
            .map(|p| p.neuron)
            .collect()
    }
}

/// Places every neuron in exactly one criterion category. Unlike selection
/// this accepts `tau_d = 0`.
pub fn dual_scatter(stats: &LayerStats, params: &SelectionParams) -> Result<DualScatter> {
    check_q(params.q)?;
    if !(params.tau_d >= 0.0) {
        return Err(Error::InvalidParam(format!("tau_d must be >= 0, got {}", params.tau_d)));
    }
    let magnitudes: Vec<f64> = stats.steering.iter().map(|s| s.abs()).collect();
    let threshold = quantile_threshold(&magnitudes, params.q)?;
    let points = magnitudes
        .iter()
        .zip(&stats.cohens_d)
        .enumerate()
        .map(|(neuron, (&abs_s, &d))| {
            let abs_d = d.abs();
            let category = match (abs_s > threshold, abs_d > params.tau_d) {
                (true, true) => ScatterCategory::Both,
                (true, false) => ScatterCategory::OnlyQuantile,
                (false, true) => ScatterCategory::OnlyEffectSize,
                (false, false) => ScatterCategory::Neither,
            };
            ScatterPoint {
                neuron,
                abs_s,
                abs_d,
                category,
            }
        })
        .collect();
    Ok(DualScatter {
        layer_index: stats.layer_index,
        quantile_threshold: threshold,
        tau_d: params.tau_d,
        points,
    })
}

/// Scatter of `|s|` against `|d|`: green both criteria, red crosses only the
/// quantile, orange only the effect size, gray neither.
pub fn dual_scatter_svg(scatter: &DualScatter) -> String {
    // the sentinel effect size would flatten everything else
    let clip = |d: f64| d.min(10.0);
    let frame = Frame::fit(
        scatter
            .points
            .iter()
            .map(|p| [p.abs_s, clip(p.abs_d)])
            .chain([[scatter.quantile_threshold, scatter.tau_d]]),
    );
    let mut s = svg_open(&format!("Layer {} dual criterion", scatter.layer_index), "|s|", "|d|");
    for p in &scatter.points {
        let (x, y) = frame.map([p.abs_s, clip(p.abs_d)]);
        let _ = match p.category {
            ScatterCategory::OnlyQuantile => writeln!(
                s,
                r#"<path d="M{:.2} {:.2}l5 5m0 -5l-5 5" stroke="red" stroke-width="1.2"/>"#,
                x - 2.5,
                y - 2.5
            ),
            c => {
                let color = match c {
                    ScatterCategory::Both => "green",
                    ScatterCategory::OnlyEffectSize => "orange",
                    _ => "gray",
                };
                writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="2" fill="{color}" fill-opacity="0.6"/>"#)
            }
        };
    }
    let (tx, _) = frame.map([scatter.quantile_threshold, 0.0]);
    let (_, ty) = frame.map([0.0, scatter.tau_d]);
    let _ = writeln!(
        s,
        r#"<line x1="{tx:.2}" y1="{PAD}" x2="{tx:.2}" y2="{}" stroke="purple" stroke-dasharray="4 3"/>"#,
        SVG_H - PAD
    );
    let _ = writeln!(
        s,
        r#"<line x1="{PAD}" y1="{ty:.2}" x2="{}" y2="{ty:.2}" stroke="black" stroke-dasharray="4 3"/>"#,
        SVG_W - PAD
    );
    s.push_str("</svg>\n");
    s
}
