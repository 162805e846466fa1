//! Flat parameter vectors with a layer layout, plus the checkpoint file format.

use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const CHECKPOINT_MAGIC: &[u8; 8] = b"FGMCKPT1";

#[derive(Debug, Error)]
pub enum ParamError {
    #[error("layout mismatch: {0}")]
    LayoutMismatch(String),
    #[error("layout describes {expected} elements but {got} values were supplied")]
    Length { expected: usize, got: usize },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One named tensor inside a [`ParamVec`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Layer {
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Total element count of a layout.
pub fn layout_numel(layout: &[Layer]) -> usize {
    layout.iter().map(Layer::numel).sum()
}

/// A flat model parameter vector; the unit exchanged in federated rounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamVec {
    values: Vec<f64>,
    layout: Vec<Layer>,
}

impl ParamVec {
    pub fn new(values: Vec<f64>, layout: Vec<Layer>) -> Result<Self, ParamError> {
        let expected = layout_numel(&layout);
        if expected != values.len() {
            return Err(ParamError::Length {
                expected,
                got: values.len(),
            });
        }
        Ok(Self { values, layout })
    }

    pub fn zeros(layout: Vec<Layer>) -> Self {
        Self {
            values: vec![0.0; layout_numel(&layout)],
            layout,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn layout(&self) -> &[Layer] {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Offset and layer of the tensor called `name`.
    pub fn locate(&self, name: &str) -> Option<(usize, &Layer)> {
        let mut offset = 0;
        for layer in &self.layout {
            if layer.name == name {
                return Some((offset, layer));
            }
            offset += layer.numel();
        }
        None
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        let (off, layer) = self.locate(name)?;
        Some(&self.values[off..off + layer.numel()])
    }

    pub fn ensure_compatible(&self, other: &ParamVec) -> Result<(), ParamError> {
        if self.layout != other.layout {
            return Err(ParamError::LayoutMismatch(format!(
                "{} layers vs {} layers",
                self.layout.len(),
                other.layout.len()
            )));
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParamVec, scale: f64) -> Result<(), ParamError> {
        self.ensure_compatible(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
        Ok(())
    }

    /// Plain element-wise mean of identically laid out vectors.
    pub fn mean(parts: &[ParamVec]) -> Result<ParamVec, ParamError> {
        let first = parts
            .first()
            .ok_or_else(|| ParamError::LayoutMismatch("no vectors to average".into()))?;
        let mut acc = ParamVec::zeros(first.layout.clone());
        for p in parts {
            acc.add_scaled(p, 1.0)?;
        }
        let n = parts.len() as f64;
        acc.values.iter_mut().for_each(|v| *v /= n);
        Ok(acc)
    }

    /// Concatenates vectors, prefixing each layer name with `prefixes[i]`.
    pub fn concat(parts: &[ParamVec], prefixes: &[String]) -> ParamVec {
        let mut values = Vec::new();
        let mut layout = Vec::new();
        for (p, prefix) in parts.iter().zip(prefixes) {
            values.extend_from_slice(&p.values);
            layout.extend(p.layout.iter().map(|l| Layer {
                name: format!("{prefix}{}", l.name),
                shape: l.shape.clone(),
            }));
        }
        ParamVec { values, layout }
    }

    /// Inverse of [`ParamVec::concat`]: cuts the vector into consecutive chunks
    /// whose layouts are given, stripping nothing from names.
    pub fn split(&self, layouts: &[Vec<Layer>]) -> Result<Vec<ParamVec>, ParamError> {
        let total: usize = layouts.iter().map(|l| layout_numel(l)).sum();
        if total != self.values.len() {
            return Err(ParamError::Length {
                expected: total,
                got: self.values.len(),
            });
        }
        let mut out = Vec::with_capacity(layouts.len());
        let mut off = 0;
        for layout in layouts {
            let n = layout_numel(layout);
            out.push(ParamVec {
                values: self.values[off..off + n].to_vec(),
                layout: layout.clone(),
            });
            off += n;
        }
        Ok(out)
    }

    /// Writes the checkpoint format:
    ///
    /// ```text
    /// magic "FGMCKPT1"
    /// u32 layer count
    /// per layer: u32 name length, UTF-8 name, u32 rank, rank x u64 dims
    /// u64 value count
    /// value count x f64
    /// ```
    /// All integers and reals are little-endian.
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<(), ParamError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.layout.len() as u32).to_le_bytes())?;
        for layer in &self.layout {
            let name = layer.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(layer.shape.len() as u32).to_le_bytes())?;
            for d in &layer.shape {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
        }
        w.write_all(&(self.values.len() as u64).to_le_bytes())?;
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ParamVec, ParamError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(ParamError::Checkpoint("bad magic".into()));
        }
        let n_layers = read_u32(&mut r)? as usize;
        let mut layout = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| ParamError::Checkpoint("layer name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u64(&mut r)? as usize);
            }
            layout.push(Layer { name, shape });
        }
        let count = read_u64(&mut r)? as usize;
        if count != layout_numel(&layout) {
            return Err(ParamError::Checkpoint(format!(
                "value count {count} disagrees with layout"
            )));
        }
        let mut values = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            values.push(f64::from_le_bytes(buf));
        }
        ParamVec::new(values, layout)
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ParamVec {
        ParamVec::new(
            vec![1.0, -2.0, 0.5],
            vec![Layer::new("w", &[1, 2]), Layer::new("b", &[1])],
        )
        .unwrap()
    }

    #[test]
    fn length_must_match_layout() {
        let err = ParamVec::new(vec![1.0], vec![Layer::new("w", &[2, 2])]).unwrap_err();
        assert!(matches!(err, ParamError::Length { expected: 4, got: 1 }));
    }

    #[test]
    fn incompatible_layouts_do_not_combine() {
        let mut a = small();
        let b = ParamVec::zeros(vec![Layer::new("w", &[3])]);
        assert!(a.add_scaled(&b, 1.0).is_err());
    }

    #[test]
    fn checkpoint_golden_bytes() {
        let bytes = small().to_checkpoint_bytes();
        let expected: Vec<u8> = [
            &b"FGMCKPT1"[..],
            &2u32.to_le_bytes(),
            &1u32.to_le_bytes(),
            b"w",
            &2u32.to_le_bytes(),
            &1u64.to_le_bytes(),
            &2u64.to_le_bytes(),
            &1u32.to_le_bytes(),
            b"b",
            &1u32.to_le_bytes(),
            &1u64.to_le_bytes(),
            &3u64.to_le_bytes(),
            // 1.0, -2.0, 0.5 as IEEE-754 little-endian
            &[0, 0, 0, 0, 0, 0, 0xf0, 0x3f],
            &[0, 0, 0, 0, 0, 0, 0x00, 0xc0],
            &[0, 0, 0, 0, 0, 0, 0xe0, 0x3f],
        ]
        .concat();
        assert_eq!(bytes, expected);
        let back = ParamVec::read_checkpoint(&bytes[..]).unwrap();
        assert_eq!(back, small());
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let bytes = small().to_checkpoint_bytes();
        assert!(ParamVec::read_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }

    #[test]
    fn concat_then_split() {
        let a = small();
        let cat = ParamVec::concat(&[a.clone(), a.clone()], &["m0.".into(), "m1.".into()]);
        assert_eq!(cat.len(), 6);
        assert_eq!(cat.layout()[2].name, "m1.w");
        let parts = cat
            .split(&[a.layout().to_vec(), a.layout().to_vec()])
            .unwrap();
        assert_eq!(parts[1], a);
    }
}
