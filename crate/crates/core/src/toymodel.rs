// SPDX-License-Identifier: MIT OR Apache-2.0

//! A seeded miniature decoder with gated MLP blocks, plus a planted-neuron
//! dump generator used as ground truth for selection.
//!
//! Each block is
//!
//! ```text
//! x += W_o W_v mean_{j <= t} rms(x_j)          causal mean-pooling "attention"
//! h  = silu(W_gate rms(x)) * (W_up rms(x))     <- capture / edit point (width K)
//! x += W_down h
//! ```
//!
//! `h` is the down-projection input; edits are added to it at every token
//! position before `W_down` consumes it.

use std::collections::BTreeSet;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dumpio::{ActivationDump, ActivationMatrix, Direction, LayerActivations, Trait};
use crate::error::{Error, Result};
use crate::intervene::InterventionConfig;
use crate::select::NeuronSelection;

const RMS_EPS: f64 = 1e-6;

/// Per-layer last-token vectors of one forward pass.
type Captures = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub vocab: usize,
    pub seed: u64,
}

impl Default for ToyModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 32,
            d_mlp: 128,
            vocab: 64,
            seed: 0,
        }
    }
}

/// Row-major `rows x cols` weight matrix.
#[derive(Debug, Clone)]
struct Linear {
    cols: usize,
    w: Vec<f64>,
}

impl Linear {
    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Self {
        let scale = 1.0 / (cols as f64).sqrt();
        let w = (0..rows * cols)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                scale * z
            })
            .collect();
        Self { cols, w }
    }

    fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        self.w
            .chunks_exact(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }
}

#[derive(Debug, Clone)]
struct Block {
    value: Linear,
    out: Linear,
    gate: Linear,
    up: Linear,
    down: Linear,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    config: ToyModelConfig,
    embed: Vec<Vec<f64>>,
    blocks: Vec<Block>,
    unembed: Linear,
}

/// Result of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Next-token logits at the last position.
    pub logits: Vec<f64>,
    /// Down-projection input at the last position, per layer, after edits.
    pub captures: Vec<Vec<f64>>,
    /// The same vectors before any edit of that layer was added.
    pub pre_edit: Vec<Vec<f64>>,
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

impl ToyModel {
    pub fn new(config: ToyModelConfig) -> Result<Self> {
        let ToyModelConfig {
            n_layers,
            d_model,
            d_mlp,
            vocab,
            seed,
        } = config;
        if n_layers == 0 || d_model == 0 || d_mlp == 0 || vocab == 0 {
            return Err(Error::InvalidParam(format!("toy model dims must be >= 1: {config:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embed = (0..vocab)
            .map(|_| (0..d_model).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        let blocks = (0..n_layers)
            .map(|_| Block {
                value: Linear::random(&mut rng, d_model, d_model),
                out: Linear::random(&mut rng, d_model, d_model),
                gate: Linear::random(&mut rng, d_mlp, d_model),
                up: Linear::random(&mut rng, d_mlp, d_model),
                down: Linear::random(&mut rng, d_model, d_mlp),
            })
            .collect();
        let unembed = Linear::random(&mut rng, vocab, d_model);
        Ok(Self {
            config,
            embed,
            blocks,
            unembed,
        })
    }

    pub fn config(&self) -> &ToyModelConfig {
        &self.config
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::InvalidParam("empty token sequence".into()));
        }
        match tokens.iter().find(|&&t| t >= self.config.vocab) {
            Some(&token) => Err(Error::TokenOutOfRange {
                token,
                vocab: self.config.vocab,
            }),
            None => Ok(()),
        }
    }

    fn check_config(&self, config: &InterventionConfig) -> Result<()> {
        for l in &config.layers {
            if l.layer >= self.config.n_layers {
                return Err(Error::InvalidParam(format!(
                    "config edits layer {} but the model has {} layers",
                    l.layer, self.config.n_layers
                )));
            }
            l.check_width(self.config.d_mlp)?;
        }
        Ok(())
    }

    fn run(&self, tokens: &[usize], config: Option<&InterventionConfig>) -> Result<ForwardOutput> {
        self.check_tokens(tokens)?;
        if let Some(c) = config {
            self.check_config(c)?;
        }
        let d = self.config.d_model;
        let mut xs: Vec<Vec<f64>> = tokens.iter().map(|&t| self.embed[t].clone()).collect();
        let mut captures = Vec::with_capacity(self.blocks.len());
        let mut pre_edit = Vec::with_capacity(self.blocks.len());

        for (layer, block) in self.blocks.iter().enumerate() {
            let edits = config.and_then(|c| c.layer(layer));

            let mut prefix = vec![0.0; d];
            for (t, x) in xs.iter_mut().enumerate() {
                for (p, v) in prefix.iter_mut().zip(rms_norm(x)) {
                    *p += v;
                }
                let mean: Vec<f64> = prefix.iter().map(|p| p / (t + 1) as f64).collect();
                let attn = block.out.forward(&block.value.forward(&mean));
                x.iter_mut().zip(attn).for_each(|(a, b)| *a += b);
            }

            let last = xs.len() - 1;
            for (t, x) in xs.iter_mut().enumerate() {
                let n = rms_norm(x);
                let mut h: Vec<f64> = block
                    .gate
                    .forward(&n)
                    .into_iter()
                    .zip(block.up.forward(&n))
                    .map(|(g, u)| silu(g) * u)
                    .collect();
                if t == last {
                    pre_edit.push(h.clone());
                }
                if let Some(e) = edits {
                    e.apply_in_place(&mut h)?;
                }
                if t == last {
                    captures.push(h.clone());
                }
                x.iter_mut().zip(block.down.forward(&h)).for_each(|(a, b)| *a += b);
            }
        }

        let logits = self.unembed.forward(&rms_norm(&xs[xs.len() - 1]));
        Ok(ForwardOutput {
            logits,
            captures,
            pre_edit,
        })
    }

    /// Plain forward pass.
    pub fn forward(&self, tokens: &[usize]) -> Result<ForwardOutput> {
        self.run(tokens, None)
    }

    /// Down-projection input of every layer at the last token.
    pub fn forward_capture(&self, tokens: &[usize]) -> Result<Vec<Vec<f64>>> {
        Ok(self.run(tokens, None)?.captures)
    }

    /// Forward pass with `config` added to the down-projection input at every
    /// position of every configured layer.
    pub fn forward_intervened(&self, tokens: &[usize], config: &InterventionConfig) -> Result<ForwardOutput> {
        self.run(tokens, Some(config))
    }

    /// Captures every prompt pair into a dump restricted to `layers`.
    pub fn capture_dump(
        &self,
        pairs: &[PromptPair],
        layers: &[usize],
        trait_name: Trait,
        model_id: &str,
    ) -> Result<ActivationDump> {
        if let Some(&bad) = layers.iter().find(|&&l| l >= self.config.n_layers) {
            return Err(Error::MissingLayer(bad));
        }
        let captured: Vec<(Captures, Captures)> = pairs
            .par_iter()
            .map(|p| Ok((self.forward_capture(&p.high)?, self.forward_capture(&p.low)?)))
            .collect::<Result<_>>()?;
        let k = self.config.d_mlp;
        let mut out = Vec::with_capacity(layers.len());
        for &layer in layers {
            let gather = |pick: fn(&(Captures, Captures)) -> &Captures| -> Vec<f32> {
                captured
                    .iter()
                    .flat_map(|c| pick(c)[layer].iter().map(|&v| v as f32))
                    .collect()
            };
            out.push(LayerActivations {
                high: ActivationMatrix::new(layer, Direction::High, pairs.len(), k, gather(|c| &c.0))?,
                low: ActivationMatrix::new(layer, Direction::Low, pairs.len(), k, gather(|c| &c.1))?,
            });
        }
        ActivationDump::new(model_id, trait_name, out)
    }
}

/// A contrastive pair of token sequences differing only in the persona
/// description segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptPair {
    pub high: Vec<usize>,
    pub low: Vec<usize>,
}

/// Token layout of the toy prompt template: an instruction marker, a
/// description section, a question section and a response marker.
pub mod template {
    pub const INSTRUCTION: usize = 0;
    pub const DESCRIPTION: usize = 1;
    pub const QUESTION: usize = 2;
    pub const RESPONSE: usize = 3;
    pub const HIGH_POOL: std::ops::Range<usize> = 4..12;
    pub const LOW_POOL: std::ops::Range<usize> = 12..20;
    pub const QUESTION_START: usize = 20;
    /// Smallest vocabulary that leaves room for question tokens.
    pub const MIN_VOCAB: usize = 24;
}

/// Seeded contrastive prompts for the toy model: each pair shares its
/// question and draws its description from the high or the low pool.
pub fn toy_prompt_pairs(vocab: usize, n_pairs: usize, seed: u64) -> Result<Vec<PromptPair>> {
    use rand::Rng;
    use template::*;
    if vocab < MIN_VOCAB {
        return Err(Error::InvalidParam(format!("toy prompts need a vocabulary of at least {MIN_VOCAB}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let render = |desc: &[usize], question: &[usize]| {
        let mut t = vec![INSTRUCTION, DESCRIPTION];
        t.extend_from_slice(desc);
        t.push(QUESTION);
        t.extend_from_slice(question);
        t.push(RESPONSE);
        t
    };
    Ok((0..n_pairs)
        .map(|_| {
            let q_len = rng.random_range(3..=8);
            let question: Vec<usize> = (0..q_len).map(|_| rng.random_range(QUESTION_START..vocab)).collect();
            let hi: Vec<usize> = (0..3).map(|_| rng.random_range(HIGH_POOL)).collect();
            let lo: Vec<usize> = (0..3).map(|_| rng.random_range(LOW_POOL)).collect();
            PromptPair {
                high: render(&hi, &question),
                low: render(&lo, &question),
            }
        })
        .collect())
}

/// Recipe for a synthetic dump with known trait-carrying neurons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub planted_high: BTreeSet<(usize, usize)>,
    pub planted_low: BTreeSet<(usize, usize)>,
    pub shift: f64,
    pub noise_std: f64,
    pub n_pairs: usize,
    pub n_neurons: usize,
    pub layers: Vec<usize>,
    pub seed: u64,
    #[serde(rename = "trait")]
    pub trait_name: Trait,
}

impl PlantSpec {
    /// Picks `n_high + n_low` distinct neurons per layer at random.
    #[allow(clippy::too_many_arguments)]
    pub fn random(
        layers: Vec<usize>,
        n_neurons: usize,
        n_high: usize,
        n_low: usize,
        shift: f64,
        noise_std: f64,
        n_pairs: usize,
        seed: u64,
    ) -> Result<Self> {
        if n_high + n_low > n_neurons {
            return Err(Error::InvalidParam(format!(
                "cannot plant {} neurons in a layer of {n_neurons}",
                n_high + n_low
            )));
        }
        // separate stream so planting choices do not shift the sample noise
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut planted_high = BTreeSet::new();
        let mut planted_low = BTreeSet::new();
        for &l in &layers {
            let picks = index::sample(&mut rng, n_neurons, n_high + n_low).into_vec();
            planted_high.extend(picks[..n_high].iter().map(|&k| (l, k)));
            planted_low.extend(picks[n_high..].iter().map(|&k| (l, k)));
        }
        let spec = Self {
            planted_high,
            planted_low,
            shift,
            noise_std,
            n_pairs,
            n_neurons,
            layers,
            seed,
            trait_name: Trait::Openness,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(x) = self.planted_high.intersection(&self.planted_low).next() {
            return Err(Error::InvalidParam(format!("{x:?} planted in both directions")));
        }
        if !(self.shift >= 0.0 && self.shift.is_finite()) {
            return Err(Error::InvalidParam(format!("shift must be >= 0, got {}", self.shift)));
        }
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(Error::InvalidParam(format!("noise_std must be > 0, got {}", self.noise_std)));
        }
        if self.n_neurons == 0 {
            return Err(Error::InvalidParam("n_neurons must be >= 1".into()));
        }
        if self.layers.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidParam("layers must be strictly ascending".into()));
        }
        for &(l, k) in self.planted_high.iter().chain(&self.planted_low) {
            if k >= self.n_neurons {
                return Err(Error::IndexOutOfRange {
                    index: k,
                    width: self.n_neurons,
                });
            }
            if !self.layers.contains(&l) {
                return Err(Error::InvalidParam(format!("planted layer {l} is not generated")));
            }
        }
        Ok(())
    }

    /// Shift-to-noise ratio of at least 4.
    pub fn is_margin_separated(&self) -> bool {
        self.shift / self.noise_std >= 4.0
    }

    pub fn planted_in(&self, layer: usize, direction: Direction) -> BTreeSet<usize> {
        let set = match direction {
            Direction::High => &self.planted_high,
            Direction::Low => &self.planted_low,
        };
        set.iter().filter(|(l, _)| *l == layer).map(|&(_, k)| k).collect()
    }

    /// Unit vector along the planted mean difference of `layer`.
    pub fn planted_direction(&self, layer: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.n_neurons];
        for k in self.planted_in(layer, Direction::High) {
            v[k] = 1.0;
        }
        for k in self.planted_in(layer, Direction::Low) {
            v[k] = -1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}

/// Gaussian dump: noise everywhere, `+shift` on planted-high and `-shift` on
/// planted-low neurons in high samples, mirrored in low samples.
pub fn plant(spec: &PlantSpec) -> Result<ActivationDump> {
    spec.validate()?;
    let noise = Normal::new(0.0, spec.noise_std).map_err(|e| Error::InvalidParam(e.to_string()))?;
    let k = spec.n_neurons;
    let layers: Vec<LayerActivations> = spec
        .layers
        .par_iter()
        .map(|&layer| {
            let mut offsets = vec![0.0f64; k];
            for n in spec.planted_in(layer, Direction::High) {
                offsets[n] = spec.shift;
            }
            for n in spec.planted_in(layer, Direction::Low) {
                offsets[n] = -spec.shift;
            }
            let gen = |direction: Direction, sign: f64| {
                let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
                rng.set_stream(2 * layer as u64 + u64::from(direction == Direction::Low));
                let data: Vec<f32> = (0..spec.n_pairs)
                    .flat_map(|_| (0..k).map(|n| (sign * offsets[n] + noise.sample(&mut rng)) as f32).collect::<Vec<_>>())
                    .collect();
                ActivationMatrix::new(layer, direction, spec.n_pairs, k, data)
            };
            Ok(LayerActivations {
                high: gen(Direction::High, 1.0)?,
                low: gen(Direction::Low, -1.0)?,
            })
        })
        .collect::<Result<_>>()?;
    ActivationDump::new("synthetic-plant", spec.trait_name, layers)
}

/// Planted-set recovery of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerRecovery {
    pub layer: usize,
    pub planted_high: usize,
    /// Planted-high neurons found in the selection's high set.
    pub recovered_high: usize,
    pub planted_low: usize,
    pub recovered_low: usize,
    /// Selected neurons that were not planted in either direction.
    pub unplanted_selected: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RecoveryReport {
    pub layers: Vec<LayerRecovery>,
}

fn rate(found: usize, planted: usize) -> f64 {
    if planted == 0 {
        1.0
    } else {
        found as f64 / planted as f64
    }
}

impl RecoveryReport {
    pub fn high_rate(&self) -> f64 {
        rate(self.layers.iter().map(|l| l.recovered_high).sum(), self.layers.iter().map(|l| l.planted_high).sum())
    }

    pub fn low_rate(&self) -> f64 {
        rate(self.layers.iter().map(|l| l.recovered_low).sum(), self.layers.iter().map(|l| l.planted_low).sum())
    }

    pub fn overall_rate(&self) -> f64 {
        let found: usize = self.layers.iter().map(|l| l.recovered_high + l.recovered_low).sum();
        let planted: usize = self.layers.iter().map(|l| l.planted_high + l.planted_low).sum();
        rate(found, planted)
    }

    pub fn max_unplanted(&self) -> usize {
        self.layers.iter().map(|l| l.unplanted_selected).max().unwrap_or(0)
    }
}

/// Compares a selection against the planted sets, layer by layer over the
/// spec's layers. Layers missing from the selection count as empty.
pub fn planted_recovery(spec: &PlantSpec, selection: &NeuronSelection) -> RecoveryReport {
    let layers = spec
        .layers
        .iter()
        .map(|&layer| {
            let high = spec.planted_in(layer, Direction::High);
            let low = spec.planted_in(layer, Direction::Low);
            let (sel_high, sel_low): (BTreeSet<usize>, BTreeSet<usize>) = match selection.layer(layer) {
                Some(l) => (l.high.iter().map(|n| n.idx).collect(), l.low.iter().map(|n| n.idx).collect()),
                None => Default::default(),
            };
            let unplanted = sel_high
                .union(&sel_low)
                .filter(|k| !high.contains(k) && !low.contains(k))
                .count();
            LayerRecovery {
                layer,
                planted_high: high.len(),
                recovered_high: high.intersection(&sel_high).count(),
                planted_low: low.len(),
                recovered_low: low.intersection(&sel_low).count(),
                unplanted_selected: unplanted,
            }
        })
        .collect();
    RecoveryReport { layers }
}
