use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::tape::Gradients;

const CHECKPOINT_MAGIC: &str = "VEGN-PARAMS 1";

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: Tensor,
    grad: Tensor,
}

/// Named trainable tensors with their gradient accumulators.
///
/// Iteration is lexicographic by name, which fixes the order of every
/// flatten/unflatten, checkpoint and gradient-sync round.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) {
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.entries.insert(name.to_string(), Entry { value, grad });
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.grad)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    /// `(name, value, grad)` in lexicographic order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor, &Tensor)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.as_str(), &e.value, &e.grad))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor, &Tensor)> {
        self.entries
            .iter_mut()
            .map(|(k, e)| (k.as_str(), &mut e.value, &e.grad))
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.data_mut().fill(0.0);
        }
    }

    /// Adds a backward pass's gradients into the accumulators.
    pub fn accumulate(&mut self, grads: &Gradients) -> Result<()> {
        for (name, g) in grads {
            let e = self
                .entries
                .get_mut(name)
                .ok_or_else(|| Error::UnknownParam(name.clone()))?;
            e.grad.add_assign(g)?;
        }
        Ok(())
    }

    pub fn scale_grads(&mut self, s: f64) {
        for e in self.entries.values_mut() {
            for g in e.grad.data_mut() {
                *g *= s;
            }
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.entries.values().all(|e| e.grad.is_finite())
    }

    /// All gradients concatenated in name order.
    pub fn flat_grads(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for e in self.entries.values() {
            out.extend_from_slice(e.grad.data());
        }
        out
    }

    pub fn set_flat_grads(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::Shape {
                op: "set_flat_grads",
                lhs: vec![self.num_scalars()],
                rhs: vec![flat.len()],
            });
        }
        let mut offset = 0;
        for e in self.entries.values_mut() {
            let n = e.grad.len();
            e.grad.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// All values concatenated in name order.
    pub fn flat_values(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for e in self.entries.values() {
            out.extend_from_slice(e.value.data());
        }
        out
    }

    /// Shapes by name, for comparing a checkpoint against a model layout.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        self.entries
            .iter()
            .map(|(k, e)| (k.clone(), e.value.shape().to_vec()))
            .collect()
    }

    /// Writes the checkpoint format: a text manifest of `name rows cols`
    /// lines followed by every value as little-endian `f64`, in name order.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CHECKPOINT_MAGIC}")?;
        writeln!(w, "params {}", self.entries.len())?;
        for (name, e) in &self.entries {
            writeln!(w, "{} {} {}", name, e.value.rows(), e.value.cols())?;
        }
        writeln!(w, "end")?;
        for e in self.entries.values() {
            for v in e.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = String::new();
        let mut next_line = |r: &mut BufReader<R>| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("checkpoint manifest truncated".into()));
            }
            Ok(line.trim_end().to_string())
        };
        let magic = next_line(&mut r)?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic `{magic}`")));
        }
        let count_line = next_line(&mut r)?;
        let count: usize = count_line
            .strip_prefix("params ")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad count line `{count_line}`")))?;
        let mut layout = Vec::with_capacity(count);
        for _ in 0..count {
            let l = next_line(&mut r)?;
            let parts: Vec<&str> = l.split_whitespace().collect();
            let parse = |s: &str| {
                s.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad manifest line `{l}`")))
            };
            if parts.len() != 3 {
                return Err(Error::Format(format!("bad manifest line `{l}`")));
            }
            layout.push((parts[0].to_string(), parse(parts[1])?, parse(parts[2])?));
        }
        if next_line(&mut r)? != "end" {
            return Err(Error::Format("missing manifest terminator".into()));
        }
        let mut store = ParamStore::new();
        let mut buf = [0u8; 8];
        for (name, rows, cols) in layout {
            let mut data = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                r.read_exact(&mut buf)
                    .map_err(|_| Error::Format("checkpoint values truncated".into()))?;
                data.push(f64::from_le_bytes(buf));
            }
            store.insert(&name, Tensor::new(rows, cols, data)?);
        }
        if r.read(&mut buf)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(f);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_checkpoint(std::fs::File::open(path)?)
    }
}
