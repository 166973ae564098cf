// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse intervention plans and their application to hidden vectors.
//!
//! A plan stores precomputed deltas per layer, so applying it is a plain
//! sparse add: `out[k] = h[k] + delta[k]` on the configured neurons and
//! `out[k] = h[k]` everywhere else.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::dumpio::Trait;
use crate::error::{Error, Result};
use crate::select::{rank_weights, NeuronSelection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SteerDirection {
    Enhance,
    Suppress,
}

impl SteerDirection {
    pub fn sign(self) -> f64 {
        match self {
            SteerDirection::Enhance => 1.0,
            SteerDirection::Suppress => -1.0,
        }
    }
}

impl fmt::Display for SteerDirection {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SteerDirection::Enhance => "enhance",
            SteerDirection::Suppress => "suppress",
        })
    }
}

impl FromStr for SteerDirection {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "enhance" => Ok(Self::Enhance),
            "suppress" => Ok(Self::Suppress),
            _ => Err(Error::InvalidParam(format!("unknown direction {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Uniform,
    Weighted,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Uniform => "uniform",
            Mode::Weighted => "weighted",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uniform" => Ok(Self::Uniform),
            "weighted" => Ok(Self::Weighted),
            _ => Err(Error::InvalidParam(format!("unknown mode {s:?}"))),
        }
    }
}

/// Per-layer rank weights for the selected neurons.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightAssignment {
    pub layers: BTreeMap<usize, BTreeMap<usize, f64>>,
}

impl WeightAssignment {
    pub fn get(&self, layer: usize, idx: usize) -> Option<f64> {
        self.layers.get(&layer)?.get(&idx).copied()
    }
}

/// Ranks each layer's `N_high ∪ N_low` by `|d|` and maps rank onto
/// `[0.75, 1.0]` linearly. Layers without selected neurons get an empty map.
pub fn assign_weights(selection: &NeuronSelection) -> Result<WeightAssignment> {
    if selection.layers.iter().all(|l| l.is_empty()) {
        return Err(Error::InvalidParam("selection is empty in every layer".into()));
    }
    let layers = selection
        .layers
        .iter()
        .map(|l| {
            let pairs: Vec<(usize, f64)> = l.high.iter().chain(&l.low).map(|n| (n.idx, n.d)).collect();
            (l.layer, rank_weights(&pairs))
        })
        .collect();
    Ok(WeightAssignment { layers })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edit {
    pub idx: usize,
    pub delta: f64,
}

/// Edits for one layer, sorted by neuron index with no duplicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEdits {
    pub layer: usize,
    pub edits: Vec<Edit>,
}

impl LayerEdits {
    pub fn new(layer: usize, mut edits: Vec<Edit>) -> Result<Self> {
        edits.sort_by_key(|e| e.idx);
        if let Some(w) = edits.windows(2).find(|w| w[0].idx == w[1].idx) {
            return Err(Error::InvalidParam(format!("layer {layer}: neuron {} edited twice", w[0].idx)));
        }
        Ok(Self { layer, edits })
    }

    /// Returns `hidden` with the deltas added; the input is left untouched.
    pub fn apply(&self, hidden: &[f64]) -> Result<Vec<f64>> {
        let mut out = hidden.to_vec();
        self.apply_in_place(&mut out)?;
        Ok(out)
    }

    pub fn apply_in_place(&self, hidden: &mut [f64]) -> Result<()> {
        self.check_width(hidden.len())?;
        for e in &self.edits {
            hidden[e.idx] += e.delta;
        }
        Ok(())
    }

    pub fn check_width(&self, width: usize) -> Result<()> {
        match self.edits.iter().find(|e| e.idx >= width) {
            Some(e) => Err(Error::IndexOutOfRange { index: e.idx, width }),
            None => Ok(()),
        }
    }
}

/// Sparse edit plan for one trait.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterventionConfig {
    #[serde(rename = "trait")]
    pub trait_name: Trait,
    pub direction: SteerDirection,
    pub mode: Mode,
    pub gamma: f64,
    pub layers: Vec<LayerEdits>,
}

impl InterventionConfig {
    /// A plan that edits nothing.
    pub fn empty(trait_name: Trait) -> Self {
        Self {
            trait_name,
            direction: SteerDirection::Enhance,
            mode: Mode::Uniform,
            gamma: 0.0,
            layers: vec![],
        }
    }

    pub fn layer(&self, layer: usize) -> Option<&LayerEdits> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    pub fn n_edits(&self) -> usize {
        self.layers.iter().map(|l| l.edits.len()).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidParam(format!("gamma must be finite and >= 0, got {}", self.gamma)));
        }
        if self.layers.windows(2).any(|w| w[1].layer <= w[0].layer) {
            return Err(Error::InvalidParam("config layers must be strictly ascending".into()));
        }
        for l in &self.layers {
            if l.edits.windows(2).any(|w| w[1].idx <= w[0].idx) {
                return Err(Error::InvalidParam(format!(
                    "layer {}: edit indices must be unique and ascending",
                    l.layer
                )));
            }
            if l.edits.iter().any(|e| !e.delta.is_finite()) {
                return Err(Error::InvalidParam(format!("layer {}: non-finite delta", l.layer)));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::format("<config>", e))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::format("<config>", e))?;
        cfg.validate()?;
        Ok(cfg)
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

/// Turns a selection into deltas `sign * gamma * s[idx]` (uniform) or
/// `sign * gamma * s[idx] * w[idx]` (weighted) over `N_high ∪ N_low`.
pub fn build_config(
    selection: &NeuronSelection,
    steering_by_layer: &BTreeMap<usize, Vec<f64>>,
    gamma: f64,
    mode: Mode,
    direction: SteerDirection,
) -> Result<InterventionConfig> {
    if !(gamma >= 0.0) || !gamma.is_finite() {
        return Err(Error::InvalidParam(format!("gamma must be finite and >= 0, got {gamma}")));
    }
    let weights = match mode {
        Mode::Weighted => Some(assign_weights(selection)?),
        Mode::Uniform => None,
    };
    let sign = direction.sign();
    let mut layers = Vec::with_capacity(selection.layers.len());
    for l in &selection.layers {
        let steering = steering_by_layer.get(&l.layer).ok_or(Error::MissingLayer(l.layer))?;
        if steering.len() != l.n_neurons {
            return Err(Error::ShapeMismatch(format!(
                "layer {}: steering has {} entries, selection expects {}",
                l.layer,
                steering.len(),
                l.n_neurons
            )));
        }
        let edits = l
            .union()
            .into_iter()
            .map(|n| {
                let base = sign * gamma * steering[n.idx];
                let delta = match &weights {
                    Some(w) => base * w.get(l.layer, n.idx).expect("weight for every selected neuron"),
                    None => base,
                };
                Edit { idx: n.idx, delta }
            })
            .collect();
        layers.push(LayerEdits::new(l.layer, edits)?);
    }
    Ok(InterventionConfig {
        trait_name: selection.trait_name,
        direction,
        mode,
        gamma,
        layers,
    })
}
