//! Flat parameter vectors and the layer registry that partitions them.

use std::fmt::Write as _;
use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense real vector with one entry per model parameter.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FlatVector(pub Vec<f64>);

impl FlatVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        assert_eq!(self.len(), other.len(), "dot: length mismatch");
        self.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for FlatVector {
    type Target = Vec<f64>;
    fn deref(&self) -> &Vec<f64> {
        &self.0
    }
}

impl DerefMut for FlatVector {
    fn deref_mut(&mut self) -> &mut Vec<f64> {
        &mut self.0
    }
}

impl From<Vec<f64>> for FlatVector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

/// One contiguous block of the flat vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub offset: usize,
    pub len: usize,
}

impl LayerEntry {
    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Ordered, disjoint entries whose union is `[0, n)`.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayerRegistry {
    entries: Vec<LayerEntry>,
}

impl LayerRegistry {
    /// Build a registry from `(name, len)` pairs laid out back to back.
    pub fn from_lengths<S: Into<String>>(layers: impl IntoIterator<Item = (S, usize)>) -> Self {
        let mut offset = 0;
        let entries = layers
            .into_iter()
            .map(|(name, len)| {
                let e = LayerEntry { name: name.into(), offset, len };
                offset += len;
                e
            })
            .collect();
        Self { entries }
    }

    /// Checks that entries tile `[0, n)` in order without gaps.
    pub fn from_entries(entries: Vec<LayerEntry>) -> Result<Self> {
        let mut next = 0;
        for e in &entries {
            if e.offset != next || e.len == 0 {
                return Err(Error::Config(format!(
                    "layer '{}' at offset {} (len {}) breaks the contiguous layout",
                    e.name, e.offset, e.len
                )));
            }
            next += e.len;
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[LayerEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total parameter count covered.
    pub fn total(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len)
    }

    /// Index of the entry containing flat position `i`.
    pub fn layer_of(&self, i: usize) -> Option<usize> {
        self.entries.iter().position(|e| e.range().contains(&i))
    }
}

/// Parameter values plus the registry describing their layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore {
    pub values: FlatVector,
    pub registry: LayerRegistry,
}

const MAGIC: &str = "hessreg-params v1";

impl ParamStore {
    pub fn new(values: FlatVector, registry: LayerRegistry) -> Result<Self> {
        if values.len() != registry.total() {
            return Err(Error::Shape(format!(
                "{} values for a registry covering {}",
                values.len(),
                registry.total()
            )));
        }
        Ok(Self { values, registry })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn layer(&self, idx: usize) -> &[f64] {
        &self.values[self.registry.entries()[idx].range()]
    }

    /// Text encoding: header, spec hash, registry, then one IEEE-754 bit
    /// pattern per line in hex. Round-trips bit-exactly.
    pub fn to_text(&self, spec_hash: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{MAGIC}");
        let _ = writeln!(s, "spec {spec_hash}");
        for e in self.registry.entries() {
            let _ = writeln!(s, "layer {} {} {}", e.name, e.offset, e.len);
        }
        let _ = writeln!(s, "values {}", self.values.len());
        for v in self.values.iter() {
            let _ = writeln!(s, "{:016x}", v.to_bits());
        }
        s
    }

    /// Parse [`to_text`](Self::to_text) output; returns the store and its spec hash.
    pub fn from_text(text: &str) -> Result<(Self, String)> {
        let bad = |row: usize, message: &str| Error::Ingestion { row, message: message.to_string() };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => return Err(bad(1, "missing parameter-file header")),
        }
        let (row, spec_line) = lines.next().ok_or_else(|| bad(2, "missing spec line"))?;
        let hash = spec_line
            .strip_prefix("spec ")
            .ok_or_else(|| bad(row, "expected 'spec <hash>'"))?
            .to_string();

        let mut entries = Vec::new();
        let count = loop {
            let (row, line) = lines.next().ok_or_else(|| bad(row, "unexpected end of file"))?;
            let fields: Vec<&str> = line.split_whitespace().collect();
            match fields.as_slice() {
                ["layer", name, offset, len] => {
                    let offset = offset.parse().map_err(|_| bad(row, "bad layer offset"))?;
                    let len = len.parse().map_err(|_| bad(row, "bad layer length"))?;
                    entries.push(LayerEntry { name: name.to_string(), offset, len });
                }
                ["values", n] => break n.parse::<usize>().map_err(|_| bad(row, "bad value count"))?,
                _ => return Err(bad(row, "expected a layer or values line")),
            }
        };
        let mut values = Vec::with_capacity(count);
        for (row, line) in lines.by_ref().take(count) {
            let bits = u64::from_str_radix(line, 16).map_err(|_| bad(row, "bad hex value"))?;
            values.push(f64::from_bits(bits));
        }
        if values.len() != count {
            return Err(bad(0, "fewer values than declared"));
        }
        let registry = LayerRegistry::from_entries(entries)?;
        Ok((Self::new(FlatVector(values), registry)?, hash))
    }
}
