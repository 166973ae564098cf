// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dual-criterion neuron selection.
//!
//! A neuron is kept when its effect size clears `tau_d` in absolute value
//! and its steering magnitude sits strictly above the layer's `q`-quantile
//! of `|s|`. The sign of `d` decides whether it joins the high or the low
//! set, so the two sets can never intersect.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dumpio::Trait;
use crate::error::{Error, Result};
use crate::stats::LayerStats;

/// Weight given to the top-ranked neuron of a layer.
pub const WEIGHT_MAX: f64 = 1.0;
/// Weight given to the lowest-ranked neuron of a layer.
pub const WEIGHT_MIN: f64 = 0.75;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionParams {
    pub tau_d: f64,
    pub q: f64,
    pub target_layers: Vec<usize>,
}

impl SelectionParams {
    pub fn new(tau_d: f64, q: f64, target_layers: Vec<usize>) -> Result<Self> {
        let p = Self { tau_d, q, target_layers };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_d > 0.0) {
            return Err(Error::InvalidParam(format!("tau_d must be > 0, got {}", self.tau_d)));
        }
        check_q(self.q)?;
        if self.target_layers.is_empty() {
            return Err(Error::InvalidParam("target_layers is empty".into()));
        }
        if self.target_layers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParam("target_layers must be strictly ascending".into()));
        }
        Ok(())
    }
}

pub(crate) fn check_q(q: f64) -> Result<()> {
    if q > 0.0 && q < 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParam(format!("q must lie in (0, 1), got {q}")))
    }
}

/// Linear-interpolation quantile of `values` at level `q`.
///
/// With the values sorted ascending as `v[0..K]` and `p = q * (K - 1)`,
/// returns `v[floor(p)] + frac(p) * (v[floor(p) + 1] - v[floor(p)])`.
pub fn quantile_threshold(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidParam("quantile of an empty vector".into()));
    }
    check_q(q)?;
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    Ok(match sorted.get(lo + 1) {
        Some(&next) if frac > 0.0 => sorted[lo] + frac * (next - sorted[lo]),
        _ => sorted[lo],
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedNeuron {
    pub idx: usize,
    pub d: f64,
    pub s: f64,
    pub weight: f64,
}

impl SelectedNeuron {
    pub fn abs_s(&self) -> f64 {
        self.s.abs()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSelection {
    pub layer: usize,
    pub n_neurons: usize,
    /// The `|s|` quantile the magnitude criterion compared against.
    pub threshold: f64,
    pub high: Vec<SelectedNeuron>,
    pub low: Vec<SelectedNeuron>,
}

impl LayerSelection {
    /// `N_high ∪ N_low`, sorted by neuron index.
    pub fn union(&self) -> Vec<&SelectedNeuron> {
        let mut all: Vec<_> = self.high.iter().chain(&self.low).collect();
        all.sort_by_key(|n| n.idx);
        all
    }

    pub fn len(&self) -> usize {
        self.high.len() + self.low.len()
    }

    pub fn is_empty(&self) -> bool {
        self.high.is_empty() && self.low.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionTotals {
    pub high: usize,
    pub low: usize,
    pub total: usize,
}

/// Selected neurons for every target layer of one trait.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSelection {
    #[serde(rename = "trait")]
    pub trait_name: Trait,
    pub params: SelectionParams,
    pub layers: Vec<LayerSelection>,
    pub totals: SelectionTotals,
}

impl NeuronSelection {
    pub fn layer(&self, layer: usize) -> Option<&LayerSelection> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    /// Dense steering vectors rebuilt from the `s` values recorded for the
    /// selected neurons (zero elsewhere).
    pub fn recorded_steering(&self) -> BTreeMap<usize, Vec<f64>> {
        self.layers
            .iter()
            .map(|l| {
                let mut s = vec![0.0; l.n_neurons];
                for n in l.high.iter().chain(&l.low) {
                    s[n.idx] = n.s;
                }
                (l.layer, s)
            })
            .collect()
    }

    /// Checks the structural invariants a selection file must satisfy.
    pub fn validate(&self) -> Result<()> {
        for l in &self.layers {
            let mut seen = std::collections::BTreeSet::new();
            for (set, n) in l.high.iter().map(|n| ("high", n)).chain(l.low.iter().map(|n| ("low", n))) {
                if n.idx >= l.n_neurons {
                    return Err(Error::IndexOutOfRange {
                        index: n.idx,
                        width: l.n_neurons,
                    });
                }
                if !seen.insert(n.idx) {
                    return Err(Error::InvalidParam(format!(
                        "layer {}: neuron {} listed twice ({set})",
                        l.layer, n.idx
                    )));
                }
                if !(WEIGHT_MIN..=WEIGHT_MAX).contains(&n.weight) {
                    return Err(Error::InvalidParam(format!(
                        "layer {}: neuron {} has weight {} outside [0.75, 1]",
                        l.layer, n.idx, n.weight
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format("<selection>", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let sel: Self = serde_json::from_str(text).map_err(|e| Error::format("<selection>", e))?;
        sel.validate()?;
        Ok(sel)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Format { message, .. } => Error::format(path, message),
            other => other,
        })
    }
}

/// Rank-based weights: rank `r` of `m` (by `|d|` descending, ties by
/// ascending index) maps linearly onto `[0.75, 1.0]`.
pub fn rank_weights(indices_and_d: &[(usize, f64)]) -> BTreeMap<usize, f64> {
    let mut order: Vec<(usize, f64)> = indices_and_d.to_vec();
    order.sort_by(|a, b| b.1.abs().total_cmp(&a.1.abs()).then(a.0.cmp(&b.0)));
    let m = order.len();
    order
        .into_iter()
        .enumerate()
        .map(|(rank, (idx, _))| {
            let w = if m == 1 {
                WEIGHT_MAX
            } else {
                WEIGHT_MAX - (WEIGHT_MAX - WEIGHT_MIN) * rank as f64 / (m - 1) as f64
            };
            (idx, w)
        })
        .collect()
}

/// Applies both criteria to one layer.
pub fn select_layer(stats: &LayerStats, params: &SelectionParams) -> Result<LayerSelection> {
    params.validate()?;
    let k = stats.n_neurons();
    if k < 2 {
        return Err(Error::InvalidParam(format!(
            "layer {} has {k} neurons, selection needs at least 2",
            stats.layer_index
        )));
    }
    let magnitudes: Vec<f64> = stats.steering.iter().map(|s| s.abs()).collect();
    let threshold = quantile_threshold(&magnitudes, params.q)?;

    let mut high_idx = Vec::new();
    let mut low_idx = Vec::new();
    for (i, (&s, &d)) in stats.steering.iter().zip(&stats.cohens_d).enumerate() {
        if s.abs() <= threshold {
            continue;
        }
        if d > params.tau_d {
            high_idx.push(i);
        } else if d < -params.tau_d {
            low_idx.push(i);
        }
    }

    let ranked: Vec<(usize, f64)> = high_idx
        .iter()
        .chain(&low_idx)
        .map(|&i| (i, stats.cohens_d[i]))
        .collect();
    let weights = rank_weights(&ranked);
    let entry = |i: usize| SelectedNeuron {
        idx: i,
        d: stats.cohens_d[i],
        s: stats.steering[i],
        weight: weights[&i],
    };
    Ok(LayerSelection {
        layer: stats.layer_index,
        n_neurons: k,
        threshold,
        high: high_idx.into_iter().map(entry).collect(),
        low: low_idx.into_iter().map(entry).collect(),
    })
}

/// Runs [`select_layer`] over every target layer.
pub fn select_all(
    trait_name: Trait,
    stats_by_layer: &BTreeMap<usize, LayerStats>,
    params: &SelectionParams,
) -> Result<NeuronSelection> {
    params.validate()?;
    let layers: Vec<LayerSelection> = params
        .target_layers
        .par_iter()
        .map(|l| {
            let st = stats_by_layer.get(l).ok_or(Error::MissingLayer(*l))?;
            select_layer(st, params)
        })
        .collect::<Result<_>>()?;
    let high = layers.iter().map(|l| l.high.len()).sum();
    let low = layers.iter().map(|l| l.low.len()).sum();
    Ok(NeuronSelection {
        trait_name,
        params: params.clone(),
        layers,
        totals: SelectionTotals {
            high,
            low,
            total: high + low,
        },
    })
}
