//! Binary container shared by model, jet-pack and feature-cloud files.
//!
//! ```text
//! [u64 LE: header length H][H bytes: UTF-8 JSON header][f64 LE payload]
//! ```
//!
//! The header carries `format_version` and an `arrays` table of
//! `{name, shape}` entries in payload order. Arrays are row-major.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{LabError, Result};

pub const FORMAT_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArraySpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ArraySpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Accumulates named arrays for writing.
#[derive(Debug, Default)]
pub struct ArrayWriter {
    specs: Vec<ArraySpec>,
    payload: Vec<f64>,
}

impl ArrayWriter {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: &[f64]) {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "array shape/data mismatch");
        self.specs.push(ArraySpec { name: name.into(), shape: shape.to_vec() });
        self.payload.extend_from_slice(data);
    }

    /// Writes the container; `header` gets `format_version` and `arrays` added.
    pub fn write_to(self, mut header: serde_json::Map<String, Value>, w: &mut impl Write) -> Result<()> {
        header.insert("format_version".into(), Value::String(FORMAT_VERSION.into()));
        header.insert("arrays".into(), serde_json::to_value(&self.specs)?);
        let bytes = serde_json::to_vec(&Value::Object(header))?;
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(&bytes)?;
        let mut buf = Vec::with_capacity(self.payload.len() * 8);
        for v in &self.payload {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }
}

/// A parsed container: header plus arrays in order.
#[derive(Debug)]
pub struct Container {
    pub header: serde_json::Map<String, Value>,
    arrays: Vec<(ArraySpec, Vec<f64>)>,
    cursor: usize,
}

impl Container {
    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut len_buf = [0u8; 8];
        r.read_exact(&mut len_buf)?;
        let hlen = u64::from_le_bytes(len_buf) as usize;
        if hlen > 64 << 20 {
            return Err(LabError::Format(format!("header length {hlen} is implausible")));
        }
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header: Value = serde_json::from_slice(&hbuf)?;
        let Value::Object(header) = header else {
            return Err(LabError::Format("header is not a JSON object".into()));
        };
        match header.get("format_version").and_then(Value::as_str) {
            Some(FORMAT_VERSION) => {}
            other => return Err(LabError::Format(format!("unsupported format_version {other:?}"))),
        }
        let specs: Vec<ArraySpec> = serde_json::from_value(
            header.get("arrays").cloned().ok_or_else(|| LabError::Format("missing arrays table".into()))?,
        )?;
        let mut arrays = Vec::with_capacity(specs.len());
        for spec in specs {
            let mut raw = vec![0u8; spec.len() * 8];
            r.read_exact(&mut raw)
                .map_err(|_| LabError::Format(format!("truncated payload in array {}", spec.name)))?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            arrays.push((spec, data));
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(LabError::Format("trailing bytes after payload".into()));
        }
        Ok(Self { header, arrays, cursor: 0 })
    }

    /// Next array in order; checks its name and shape.
    pub fn take(&mut self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let (spec, data) = self
            .arrays
            .get_mut(self.cursor)
            .ok_or_else(|| LabError::Format(format!("missing array {name}")))?;
        if spec.name != name || spec.shape != shape {
            return Err(LabError::Format(format!(
                "expected array {name} {shape:?}, found {} {:?}",
                spec.name, spec.shape
            )));
        }
        self.cursor += 1;
        Ok(std::mem::take(data))
    }

    pub fn finish(&self) -> Result<()> {
        if self.cursor != self.arrays.len() {
            return Err(LabError::Format(format!("{} unread arrays", self.arrays.len() - self.cursor)));
        }
        Ok(())
    }

    pub fn header_field<T: serde::de::DeserializeOwned>(&self, key: &str) -> Result<T> {
        let v = self.header.get(key).cloned().ok_or_else(|| LabError::Format(format!("missing header field {key}")))?;
        Ok(serde_json::from_value(v)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_shape_checks() {
        let mut w = ArrayWriter::default();
        w.push("a", &[2, 2], &[1.0, 2.0, 3.0, -0.0]);
        w.push("b", &[1], &[f64::MIN_POSITIVE]);
        let mut buf = Vec::new();
        let mut h = serde_json::Map::new();
        h.insert("kind".into(), "test".into());
        w.write_to(h, &mut buf).unwrap();

        let mut c = Container::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(c.header_field::<String>("kind").unwrap(), "test");
        assert!(c.take("a", &[4]).is_err());
        let a = c.take("a", &[2, 2]).unwrap();
        assert_eq!(a[3].to_bits(), (-0.0f64).to_bits());
        assert!(c.finish().is_err());
        c.take("b", &[1]).unwrap();
        c.finish().unwrap();

        let mut truncated = buf.clone();
        truncated.pop();
        assert!(Container::read_from(&mut truncated.as_slice()).is_err());
    }
}
