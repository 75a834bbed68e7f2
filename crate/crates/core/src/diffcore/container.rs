//! Checkpoint container: a textual header followed by little-endian arrays.
//!
//! ```text
//! HEADSDF-CKPT
//! version 1
//! precision f32
//! header-bytes <n>
//! <n bytes of JSON>
//! arrays <k>
//! <name> <rows> <cols>      (k lines)
//! end
//! <raw little-endian data, arrays in listed order>
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

const MAGIC: &str = "HEADSDF-CKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    fn tag(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }

    fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub precision: Precision,
    pub header: serde_json::Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Container {
    pub fn array(&self, name: &str) -> Option<&Tensor> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_string(&self.header).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        let mut text = format!(
            "{MAGIC}\nversion {FORMAT_VERSION}\nprecision {}\nheader-bytes {}\n{header}\narrays {}\n",
            self.precision.tag(),
            header.len(),
            self.arrays.len()
        );
        for (name, t) in &self.arrays {
            if name.is_empty() || name.contains(char::is_whitespace) {
                return Err(Error::Format(format!("invalid array name `{name}`")));
            }
            text.push_str(&format!("{name} {} {}\n", t.rows(), t.cols()));
        }
        text.push_str("end\n");
        out.extend_from_slice(text.as_bytes());
        for (_, t) in &self.arrays {
            for &v in t.data() {
                match self.precision {
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.line()? != MAGIC {
            return Err(Error::Format("missing checkpoint magic".into()));
        }
        let version: u32 = cur.keyed("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let precision = match cur.keyed::<String>("precision")?.as_str() {
            "f32" => Precision::F32,
            "f64" => Precision::F64,
            other => return Err(Error::Format(format!("unknown precision `{other}`"))),
        };
        let header_len: usize = cur.keyed("header-bytes")?;
        let raw = cur.take(header_len)?;
        let header = serde_json::from_slice(raw).map_err(|e| Error::Format(format!("header json: {e}")))?;
        if cur.take(1)? != b"\n" {
            return Err(Error::Format("header not newline-terminated".into()));
        }
        let count: usize = cur.keyed("arrays")?;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let line = cur.line()?;
            let mut parts = line.split(' ');
            let (Some(name), Some(r), Some(c), None) = (parts.next(), parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Format(format!("bad array entry `{line}`")));
            };
            let rows = r.parse().map_err(|_| Error::Format(format!("bad rows in `{line}`")))?;
            let cols = c.parse().map_err(|_| Error::Format(format!("bad cols in `{line}`")))?;
            table.push((name.to_string(), rows, cols));
        }
        if cur.line()? != "end" {
            return Err(Error::Format("missing array table terminator".into()));
        }
        let mut arrays = Vec::with_capacity(count);
        for (name, rows, cols) in table {
            let n: usize = rows * cols;
            let raw = cur.take(n * precision.width())?;
            let data: Vec<f64> = match precision {
                Precision::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
                Precision::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            };
            arrays.push((name, Tensor::new(rows, cols, data)?));
        }
        if cur.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(Self { precision, header, arrays })
    }

    /// Writes to a temporary sibling, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode()?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("unexpected end of checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.bytes[self.pos..];
        let end = rest.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format("unterminated header line".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Format("header is not utf-8".into()))
    }

    fn keyed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|v| v.strip_prefix(' '))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Format(format!("expected `{key} <value>`, got `{line}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample(precision: Precision, values: Vec<f64>) -> Container {
        let n = values.len();
        Container {
            precision,
            header: serde_json::json!({"stage": 1, "alpha": 10.0}),
            arrays: vec![
                ("a.weight".into(), Tensor::new(1, n, values).unwrap()),
                ("b".into(), Tensor::zeros(2, 3)),
            ],
        }
    }

    proptest! {
        #[test]
        fn f32_roundtrip_is_bit_exact(values in prop::collection::vec(-1e6f64..1e6, 1..40)) {
            let c = sample(Precision::F32, values);
            let bytes = c.encode().unwrap();
            let back = Container::decode(&bytes).unwrap();
            prop_assert_eq!(back.encode().unwrap(), bytes);
            for (x, y) in c.arrays[0].1.data().iter().zip(back.arrays[0].1.data()) {
                prop_assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits());
            }
        }

        #[test]
        fn f64_roundtrip_is_identity(values in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..40)) {
            let c = sample(Precision::F64, values);
            let back = Container::decode(&c.encode().unwrap()).unwrap();
            prop_assert_eq!(back, c);
        }
    }

    #[test]
    fn truncated_input_is_rejected() {
        let bytes = sample(Precision::F32, vec![1.0, 2.0]).encode().unwrap();
        assert!(Container::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(Container::decode(b"nope\n").is_err());
    }
}
