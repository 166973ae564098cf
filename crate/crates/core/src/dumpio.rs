// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `DPNA` activation-dump container.
//!
//! One file holds the high-trait and low-trait activation matrices of every
//! captured layer for a single trait. Layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic      b"DPNA"
//! offset 4   version    u32 = 1
//! offset 8   meta_len   u64
//! offset 16  metadata   meta_len bytes of UTF-8 JSON (DumpMetadata)
//! offset 16 + meta_len  tensor region
//! ```
//!
//! `byte_offset_high` / `byte_offset_low` are measured from the start of the
//! tensor region. Each matrix is `n_samples * n_neurons` f32 values,
//! sample-major. The writer lays layers out in ascending order, high before
//! low, with no padding.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: [u8; 4] = *b"DPNA";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 16;
pub const DTYPE: &str = "f32le";
pub const TOKEN_POSITION: &str = "last_prefill";

/// Big Five personality trait a dump was collected for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trait {
    Openness,
    Conscientiousness,
    Extraversion,
    Agreeableness,
    Neuroticism,
}

impl Trait {
    pub const ALL: [Trait; 5] = [
        Trait::Openness,
        Trait::Conscientiousness,
        Trait::Extraversion,
        Trait::Agreeableness,
        Trait::Neuroticism,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Trait::Openness => "openness",
            Trait::Conscientiousness => "conscientiousness",
            Trait::Extraversion => "extraversion",
            Trait::Agreeableness => "agreeableness",
            Trait::Neuroticism => "neuroticism",
        }
    }
}

impl fmt::Display for Trait {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Trait {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        Trait::ALL
            .into_iter()
            .find(|t| t.as_str() == lower)
            .ok_or_else(|| Error::InvalidParam(format!("unknown trait {s:?}")))
    }
}

/// Which half of a contrastive pair a matrix came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    High,
    Low,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::High => "high",
            Direction::Low => "low",
        })
    }
}

/// Activations of one layer for one direction: `n_samples x n_neurons`,
/// sample-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    layer_index: usize,
    direction: Direction,
    n_samples: usize,
    n_neurons: usize,
    data: Vec<f32>,
}

impl ActivationMatrix {
    pub fn new(
        layer_index: usize,
        direction: Direction,
        n_samples: usize,
        n_neurons: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        let expected = n_samples.checked_mul(n_neurons).ok_or_else(|| {
            Error::ShapeMismatch(format!("{n_samples} x {n_neurons} overflows"))
        })?;
        if data.len() != expected {
            return Err(Error::ShapeMismatch(format!(
                "layer {layer_index} ({direction}): {} values for a {n_samples} x {n_neurons} matrix",
                data.len()
            )));
        }
        Ok(Self {
            layer_index,
            direction,
            n_samples,
            n_neurons,
            data,
        })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f32]>>(
        layer_index: usize,
        direction: Direction,
        rows: &[R],
    ) -> Result<Self> {
        let n_neurons = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * n_neurons);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n_neurons {
                return Err(Error::ShapeMismatch(format!(
                    "row {i} has {} values, expected {n_neurons}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(layer_index, direction, rows.len(), n_neurons, data)
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn direction(&self) -> Direction {
        self.direction
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_neurons(&self) -> usize {
        self.n_neurons
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, sample: usize) -> &[f32] {
        &self.data[sample * self.n_neurons..(sample + 1) * self.n_neurons]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        // chunks_exact(0) panics; a zero-width matrix has no meaningful rows
        let width = self.n_neurons.max(1);
        self.data
            .chunks_exact(width)
            .take(if self.n_neurons == 0 { 0 } else { self.n_samples })
    }

    /// First non-finite entry, reported with its position.
    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(pos) => Err(Error::NonFinite {
                layer: self.layer_index,
                direction: self.direction,
                sample: pos / self.n_neurons,
                neuron: pos % self.n_neurons,
                value: self.data[pos],
            }),
        }
    }
}

/// High and low matrices for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivations {
    pub high: ActivationMatrix,
    pub low: ActivationMatrix,
}

impl LayerActivations {
    pub fn layer_index(&self) -> usize {
        self.high.layer_index
    }
}

/// All captured layers for one trait. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationDump {
    model_id: String,
    trait_name: Trait,
    layers: Vec<LayerActivations>,
}

impl ActivationDump {
    /// Validates layer ordering, widths and finiteness.
    pub fn new(model_id: impl Into<String>, trait_name: Trait, layers: Vec<LayerActivations>) -> Result<Self> {
        let dump = Self {
            model_id: model_id.into(),
            trait_name,
            layers,
        };
        dump.validate()?;
        Ok(dump)
    }

    fn validate(&self) -> Result<()> {
        let width = self.n_neurons();
        if width == Some(0) {
            return Err(Error::InvalidDump("n_neurons must be at least 1".into()));
        }
        let mut prev: Option<usize> = None;
        for layer in &self.layers {
            let idx = layer.high.layer_index;
            if layer.low.layer_index != idx {
                return Err(Error::InvalidDump(format!(
                    "layer entry pairs high layer {idx} with low layer {}",
                    layer.low.layer_index
                )));
            }
            if layer.high.direction != Direction::High || layer.low.direction != Direction::Low {
                return Err(Error::InvalidDump(format!("layer {idx}: matrix directions swapped")));
            }
            if let Some(p) = prev {
                if idx <= p {
                    return Err(Error::InvalidDump(format!(
                        "layer indices not strictly ascending ({p} then {idx})"
                    )));
                }
            }
            prev = Some(idx);
            for m in [&layer.high, &layer.low] {
                if Some(m.n_neurons) != width {
                    return Err(Error::InvalidDump(format!(
                        "layer {idx} ({}) has {} neurons, expected {}",
                        m.direction,
                        m.n_neurons,
                        width.unwrap_or(0)
                    )));
                }
                m.check_finite()?;
            }
        }
        Ok(())
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn trait_name(&self) -> Trait {
        self.trait_name
    }

    pub fn layers(&self) -> &[LayerActivations] {
        &self.layers
    }

    pub fn layer(&self, layer_index: usize) -> Option<&LayerActivations> {
        self.layers
            .binary_search_by_key(&layer_index, LayerActivations::layer_index)
            .ok()
            .map(|i| &self.layers[i])
    }

    pub fn layer_indices(&self) -> Vec<usize> {
        self.layers.iter().map(LayerActivations::layer_index).collect()
    }

    /// Shared neuron width, `None` for an empty dump.
    pub fn n_neurons(&self) -> Option<usize> {
        self.layers.first().map(|l| l.high.n_neurons)
    }

    /// Metadata as the writer lays it out.
    pub fn metadata(&self) -> DumpMetadata {
        let mut offset = 0u64;
        let mut layer_entries = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let high_bytes = (layer.high.data.len() * 4) as u64;
            let low_bytes = (layer.low.data.len() * 4) as u64;
            layer_entries.push(LayerEntry {
                layer_index: layer.layer_index(),
                n_samples_high: layer.high.n_samples,
                n_samples_low: layer.low.n_samples,
                n_neurons: layer.high.n_neurons,
                byte_offset_high: offset,
                byte_offset_low: offset + high_bytes,
            });
            offset += high_bytes + low_bytes;
        }
        DumpMetadata {
            model_id: self.model_id.clone(),
            trait_name: self.trait_name,
            num_layers: self.layers.len(),
            layer_entries,
            dtype: DTYPE.to_string(),
            token_position: TOKEN_POSITION.to_string(),
        }
    }
}

/// JSON header of a dump file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DumpMetadata {
    pub model_id: String,
    #[serde(rename = "trait")]
    pub trait_name: Trait,
    pub num_layers: usize,
    pub layer_entries: Vec<LayerEntry>,
    pub dtype: String,
    pub token_position: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerEntry {
    pub layer_index: usize,
    pub n_samples_high: usize,
    pub n_samples_low: usize,
    pub n_neurons: usize,
    pub byte_offset_high: u64,
    pub byte_offset_low: u64,
}

/// Serializes a dump to the bytes `write_dump` would put on disk.
pub fn encode_dump(dump: &ActivationDump) -> Result<Vec<u8>> {
    dump.validate()?;
    let meta = serde_json::to_vec(&dump.metadata()).map_err(|e| Error::Metadata(e.to_string()))?;
    let tensor_bytes: usize = dump
        .layers
        .iter()
        .map(|l| (l.high.data.len() + l.low.data.len()) * 4)
        .sum();
    let mut out = Vec::with_capacity(HEADER_LEN + meta.len() + tensor_bytes);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(&meta);
    for layer in &dump.layers {
        for m in [&layer.high, &layer.low] {
            for v in &m.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Parses and fully validates a dump from raw bytes.
pub fn decode_dump(bytes: &[u8]) -> Result<ActivationDump> {
    let len = bytes.len() as u64;
    if bytes.len() < 4 {
        return Err(Error::TruncatedHeader { len });
    }
    let magic: [u8; 4] = bytes[0..4].try_into().expect("4 bytes");
    if magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedHeader { len });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let meta_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let meta_end = (HEADER_LEN as u64)
        .checked_add(meta_len)
        .filter(|&end| end <= len)
        .ok_or_else(|| Error::OffsetOutOfBounds {
            what: "metadata".into(),
            start: HEADER_LEN as u64,
            end: (HEADER_LEN as u64).saturating_add(meta_len),
            len,
        })? as usize;
    let meta: DumpMetadata = serde_json::from_slice(&bytes[HEADER_LEN..meta_end])
        .map_err(|e| Error::Metadata(e.to_string()))?;
    check_metadata(&meta)?;

    let data = &bytes[meta_end..];
    check_tensor_regions(&meta, meta_end as u64, len)?;

    let mut layers = Vec::with_capacity(meta.layer_entries.len());
    for entry in &meta.layer_entries {
        let high = read_matrix(data, entry, Direction::High)?;
        let low = read_matrix(data, entry, Direction::Low)?;
        layers.push(LayerActivations { high, low });
    }
    ActivationDump::new(meta.model_id, meta.trait_name, layers)
}

fn check_metadata(meta: &DumpMetadata) -> Result<()> {
    if meta.dtype != DTYPE {
        return Err(Error::Metadata(format!("dtype {:?}, expected {DTYPE:?}", meta.dtype)));
    }
    if meta.token_position != TOKEN_POSITION {
        return Err(Error::Metadata(format!(
            "token_position {:?}, expected {TOKEN_POSITION:?}",
            meta.token_position
        )));
    }
    if meta.num_layers != meta.layer_entries.len() {
        return Err(Error::Metadata(format!(
            "num_layers = {} but {} layer entries",
            meta.num_layers,
            meta.layer_entries.len()
        )));
    }
    for pair in meta.layer_entries.windows(2) {
        if pair[1].layer_index <= pair[0].layer_index {
            return Err(Error::Metadata(format!(
                "layer entries not strictly ascending ({} then {})",
                pair[0].layer_index, pair[1].layer_index
            )));
        }
    }
    if let Some(first) = meta.layer_entries.first() {
        if let Some(bad) = meta.layer_entries.iter().find(|e| e.n_neurons != first.n_neurons) {
            return Err(Error::Metadata(format!(
                "layer {} has {} neurons, layer {} has {}",
                bad.layer_index, bad.n_neurons, first.layer_index, first.n_neurons
            )));
        }
    }
    Ok(())
}

/// Bounds- and overlap-checks every tensor region.
fn check_tensor_regions(meta: &DumpMetadata, data_start: u64, file_len: u64) -> Result<()> {
    let data_len = file_len - data_start;
    let mut regions = Vec::with_capacity(meta.layer_entries.len() * 2);
    for e in &meta.layer_entries {
        for (dir, offset, n_samples) in [
            (Direction::High, e.byte_offset_high, e.n_samples_high),
            (Direction::Low, e.byte_offset_low, e.n_samples_low),
        ] {
            let what = format!("layer {} ({dir})", e.layer_index);
            let size = (n_samples as u64)
                .checked_mul(e.n_neurons as u64)
                .and_then(|n| n.checked_mul(4));
            let end = size.and_then(|s| offset.checked_add(s));
            match end {
                Some(end) if end <= data_len => regions.push((offset, end, what)),
                _ => {
                    return Err(Error::OffsetOutOfBounds {
                        what,
                        start: data_start.saturating_add(offset),
                        end: end.map_or(u64::MAX, |x| data_start.saturating_add(x)),
                        len: file_len,
                    })
                }
            }
        }
    }
    regions.sort();
    for pair in regions.windows(2) {
        let (a, b) = (&pair[0], &pair[1]);
        // empty regions cannot overlap anything
        if a.1 > b.0 && a.0 < a.1 && b.0 < b.1 {
            return Err(Error::OverlappingRegions {
                first: a.2.clone(),
                second: b.2.clone(),
            });
        }
    }
    Ok(())
}

fn read_matrix(data: &[u8], entry: &LayerEntry, direction: Direction) -> Result<ActivationMatrix> {
    let (offset, n_samples) = match direction {
        Direction::High => (entry.byte_offset_high, entry.n_samples_high),
        Direction::Low => (entry.byte_offset_low, entry.n_samples_low),
    };
    let start = offset as usize;
    let end = start + n_samples * entry.n_neurons * 4;
    let values: Vec<f32> = data[start..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let m = ActivationMatrix::new(entry.layer_index, direction, n_samples, entry.n_neurons, values)?;
    m.check_finite()?;
    Ok(m)
}

/// Writes `dump` to `path`. Nothing is written if the dump is invalid.
pub fn write_dump(path: impl AsRef<Path>, dump: &ActivationDump) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_dump(dump)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dump(path: impl AsRef<Path>) -> Result<ActivationDump> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dump(&bytes)
}

/// Lossy decimal export, one row per sample: `layer,direction,sample,n0,..`.
pub fn write_dump_csv<W: Write>(writer: W, dump: &ActivationDump) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let csv_err = |e: csv::Error| Error::Format {
        path: "<csv>".into(),
        message: e.to_string(),
    };
    let k = dump.n_neurons().unwrap_or(0);
    let mut header = vec!["layer".to_string(), "direction".into(), "sample".into()];
    header.extend((0..k).map(|i| format!("n{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for layer in &dump.layers {
        for m in [&layer.high, &layer.low] {
            for (i, row) in m.rows().enumerate() {
                let mut rec = vec![m.layer_index.to_string(), m.direction.to_string(), i.to_string()];
                rec.extend(row.iter().map(|v| v.to_string()));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
