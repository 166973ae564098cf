// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-neuron steering values and Cohen's d effect sizes.
//!
//! All accumulation happens in f64 with a two-pass mean/variance so that
//! large dumps (thousands of samples) do not lose precision.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dumpio::{ActivationDump, ActivationMatrix};
use crate::error::{Error, Result};

/// Stand-in effect size for neurons whose pooled standard deviation is
/// exactly zero but whose means differ.
pub const DMAX: f64 = 1e6;

/// Column means and sample variances (ddof = 1) of a matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnMoments {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub n_samples: usize,
}

pub fn column_means(m: &ActivationMatrix) -> Vec<f64> {
    let mut sum = vec![0.0f64; m.n_neurons()];
    for row in m.rows() {
        for (acc, &v) in sum.iter_mut().zip(row) {
            *acc += f64::from(v);
        }
    }
    let n = m.n_samples() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    sum
}

pub fn column_moments(m: &ActivationMatrix) -> Result<ColumnMoments> {
    if m.n_samples() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "layer {} ({}) has {} samples, variance needs at least 2",
            m.layer_index(),
            m.direction(),
            m.n_samples()
        )));
    }
    let mean = column_means(m);
    let mut ss = vec![0.0f64; m.n_neurons()];
    for row in m.rows() {
        for ((acc, &v), mu) in ss.iter_mut().zip(row).zip(&mean) {
            let dev = f64::from(v) - mu;
            *acc += dev * dev;
        }
    }
    let denom = (m.n_samples() - 1) as f64;
    let var = ss.into_iter().map(|s| s / denom).collect();
    Ok(ColumnMoments {
        mean,
        var,
        n_samples: m.n_samples(),
    })
}

fn check_pair(high: &ActivationMatrix, low: &ActivationMatrix) -> Result<()> {
    if high.n_neurons() != low.n_neurons() {
        return Err(Error::ShapeMismatch(format!(
            "high has {} neurons, low has {}",
            high.n_neurons(),
            low.n_neurons()
        )));
    }
    Ok(())
}

/// Mean activation difference, high minus low, per neuron.
pub fn build_steering_vector(high: &ActivationMatrix, low: &ActivationMatrix) -> Result<Vec<f64>> {
    check_pair(high, low)?;
    if high.n_samples() == 0 || low.n_samples() == 0 {
        return Err(Error::InsufficientSamples("steering vector needs at least one sample per direction".into()));
    }
    let mh = column_means(high);
    let ml = column_means(low);
    Ok(mh.iter().zip(&ml).map(|(h, l)| h - l).collect())
}

/// Effect size for a single neuron given its mean difference and the two
/// sample variances.
pub fn effect_size(mean_diff: f64, var_high: f64, var_low: f64) -> f64 {
    let pooled = ((var_high + var_low) / 2.0).sqrt();
    if pooled > 0.0 {
        mean_diff / pooled
    } else if mean_diff == 0.0 {
        0.0
    } else {
        DMAX.copysign(mean_diff)
    }
}

/// Cohen's d per neuron with the pooled std `sqrt((var_h + var_l) / 2)`.
pub fn cohens_d(high: &ActivationMatrix, low: &ActivationMatrix) -> Result<Vec<f64>> {
    check_pair(high, low)?;
    let h = column_moments(high)?;
    let l = column_moments(low)?;
    Ok((0..h.mean.len())
        .map(|k| effect_size(h.mean[k] - l.mean[k], h.var[k], l.var[k]))
        .collect())
}

/// Everything the selection and analysis stages need about one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStats {
    pub layer_index: usize,
    pub n_samples_high: usize,
    pub n_samples_low: usize,
    pub mean_high: Vec<f64>,
    pub mean_low: Vec<f64>,
    pub std_high: Vec<f64>,
    pub std_low: Vec<f64>,
    pub steering: Vec<f64>,
    pub cohens_d: Vec<f64>,
}

impl LayerStats {
    pub fn from_matrices(high: &ActivationMatrix, low: &ActivationMatrix) -> Result<Self> {
        check_pair(high, low)?;
        let h = column_moments(high)?;
        let l = column_moments(low)?;
        let k = h.mean.len();
        let steering: Vec<f64> = (0..k).map(|i| h.mean[i] - l.mean[i]).collect();
        let cohens_d = (0..k)
            .map(|i| effect_size(steering[i], h.var[i], l.var[i]))
            .collect();
        Ok(Self {
            layer_index: high.layer_index(),
            n_samples_high: h.n_samples,
            n_samples_low: l.n_samples,
            std_high: h.var.iter().map(|v| v.sqrt()).collect(),
            std_low: l.var.iter().map(|v| v.sqrt()).collect(),
            mean_high: h.mean,
            mean_low: l.mean,
            steering,
            cohens_d,
        })
    }

    pub fn n_neurons(&self) -> usize {
        self.steering.len()
    }
}

pub fn compute_layer_stats(dump: &ActivationDump, layer_index: usize) -> Result<LayerStats> {
    let layer = dump.layer(layer_index).ok_or(Error::MissingLayer(layer_index))?;
    LayerStats::from_matrices(&layer.high, &layer.low)
}

/// Stats for every requested layer (all dump layers when `layers` is
/// `None`), computed in parallel and keyed by layer index.
pub fn compute_all_layer_stats(
    dump: &ActivationDump,
    layers: Option<&[usize]>,
) -> Result<BTreeMap<usize, LayerStats>> {
    let wanted = match layers {
        Some(l) => l.to_vec(),
        None => dump.layer_indices(),
    };
    wanted
        .par_iter()
        .map(|&l| compute_layer_stats(dump, l).map(|s| (l, s)))
        .collect()
}

/// One row of the stats CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub layer: usize,
    pub neuron: usize,
    pub mean_high: f64,
    pub mean_low: f64,
    pub std_high: f64,
    pub std_low: f64,
    pub s: f64,
    pub d: f64,
}

/// Writes `layer,neuron,mean_high,mean_low,std_high,std_low,s,d` rows.
///
/// Floats are printed in shortest round-trip form, so reading the file
/// back reproduces every value exactly.
pub fn write_stats_csv<'a, W: Write>(
    writer: W,
    stats: impl IntoIterator<Item = &'a LayerStats>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let err = |e: csv::Error| Error::format("<stats csv>", e);
    for st in stats {
        for k in 0..st.n_neurons() {
            w.serialize(StatsRow {
                layer: st.layer_index,
                neuron: k,
                mean_high: st.mean_high[k],
                mean_low: st.mean_low[k],
                std_high: st.std_high[k],
                std_low: st.std_low[k],
                s: st.steering[k],
                d: st.cohens_d[k],
            })
            .map_err(err)?;
        }
    }
    w.flush().map_err(|e| Error::io("<stats csv>", e))?;
    Ok(())
}

/// Reads a stats CSV back. Sample counts are not part of the CSV and come
/// back as zero.
pub fn read_stats_csv<R: Read>(reader: R) -> Result<BTreeMap<usize, LayerStats>> {
    let mut r = csv::Reader::from_reader(reader);
    let mut out: BTreeMap<usize, LayerStats> = BTreeMap::new();
    for rec in r.deserialize::<StatsRow>() {
        let row = rec.map_err(|e| Error::format("<stats csv>", e))?;
        let st = out.entry(row.layer).or_insert_with(|| LayerStats {
            layer_index: row.layer,
            n_samples_high: 0,
            n_samples_low: 0,
            mean_high: vec![],
            mean_low: vec![],
            std_high: vec![],
            std_low: vec![],
            steering: vec![],
            cohens_d: vec![],
        });
        if row.neuron != st.n_neurons() {
            return Err(Error::format(
                "<stats csv>",
                format!("layer {}: expected neuron {}, found {}", row.layer, st.n_neurons(), row.neuron),
            ));
        }
        if !(row.s.is_finite() && row.d.is_finite()) {
            return Err(Error::format(
                "<stats csv>",
                format!("layer {} neuron {}: non-finite s or d", row.layer, row.neuron),
            ));
        }
        st.mean_high.push(row.mean_high);
        st.mean_low.push(row.mean_low);
        st.std_high.push(row.std_high);
        st.std_low.push(row.std_low);
        st.steering.push(row.s);
        st.cohens_d.push(row.d);
    }
    Ok(out)
}
