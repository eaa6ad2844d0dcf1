use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"XLSTTNSR";
pub const FORMAT_VERSION: u32 = 1;
const CHECKSUM_LEN: usize = 32;

const TAG_F32: u8 = 0;
const TAG_F64: u8 = 1;
const TAG_U32: u8 = 2;
const TAG_U8: u8 = 3;

/// One named array in a [`TensorFile`].
#[derive(Clone, Debug, PartialEq)]
pub enum Entry {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    F64 { shape: Vec<usize>, data: Vec<f64> },
    U32 { shape: Vec<usize>, data: Vec<u32> },
    U8(Vec<u8>),
}

impl Entry {
    fn tag(&self) -> u8 {
        match self {
            Entry::F32 { .. } => TAG_F32,
            Entry::F64 { .. } => TAG_F64,
            Entry::U32 { .. } => TAG_U32,
            Entry::U8(_) => TAG_U8,
        }
    }

    fn shape(&self) -> Vec<usize> {
        match self {
            Entry::F32 { shape, .. } | Entry::F64 { shape, .. } | Entry::U32 { shape, .. } => {
                shape.clone()
            }
            Entry::U8(bytes) => vec![bytes.len()],
        }
    }

    fn payload(&self, out: &mut Vec<u8>) {
        match self {
            Entry::F32 { data, .. } => data
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Entry::F64 { data, .. } => data
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Entry::U32 { data, .. } => data
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            Entry::U8(bytes) => out.extend_from_slice(bytes),
        }
    }
}

/// Self-describing binary container of named arrays.
///
/// Layout: magic, version (u32), entry count (u32), then per entry the name
/// (u32 length + UTF-8), dtype tag (u8), rank (u32), dims (u64 each) and the
/// little-endian payload; finally the SHA-256 of everything before it.
/// Entries are written in name order, so equal files have equal bytes.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TensorFile {
    pub entries: BTreeMap<String, Entry>,
}

impl TensorFile {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, entry: Entry) {
        self.entries.insert(name.into(), entry);
    }

    pub fn insert_tensor<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let shape = t.shape().to_vec();
        let entry = match T::PRECISION {
            Precision::F32 => Entry::F32 {
                shape,
                data: t.data().iter().map(|v| v.f64() as f32).collect(),
            },
            Precision::F64 => Entry::F64 {
                shape,
                data: t.data().iter().map(|v| v.f64()).collect(),
            },
        };
        self.insert(name, entry);
    }

    pub fn insert_labels(&mut self, name: impl Into<String>, labels: &[usize]) -> Result<()> {
        let data = labels
            .iter()
            .map(|&l| u32::try_from(l).map_err(|_| Error::Format(format!("label {l} exceeds u32"))))
            .collect::<Result<Vec<_>>>()?;
        self.insert(
            name,
            Entry::U32 {
                shape: vec![data.len()],
                data,
            },
        );
        Ok(())
    }

    pub fn insert_json<S: Serialize>(&mut self, name: impl Into<String>, value: &S) -> Result<()> {
        let bytes =
            serde_json::to_vec(value).map_err(|e| Error::Format(format!("json encode: {e}")))?;
        self.insert(name, Entry::U8(bytes));
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    fn get(&self, name: &str) -> Result<&Entry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Format(format!("missing entry `{name}`")))
    }

    /// Reads a float entry, converting between 32 and 64 bits if needed.
    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        match self.get(name)? {
            Entry::F32 { shape, data } => Tensor::new(
                shape.clone(),
                data.iter().map(|&v| T::lit(v as f64)).collect(),
            ),
            Entry::F64 { shape, data } => {
                Tensor::new(shape.clone(), data.iter().map(|&v| T::lit(v)).collect())
            }
            _ => Err(Error::Format(format!(
                "entry `{name}` is not a float tensor"
            ))),
        }
    }

    pub fn labels(&self, name: &str) -> Result<Vec<usize>> {
        match self.get(name)? {
            Entry::U32 { data, .. } => Ok(data.iter().map(|&v| v as usize).collect()),
            _ => Err(Error::Format(format!(
                "entry `{name}` is not a label array"
            ))),
        }
    }

    pub fn json<D: DeserializeOwned>(&self, name: &str) -> Result<D> {
        match self.get(name)? {
            Entry::U8(bytes) => serde_json::from_slice(bytes)
                .map_err(|e| Error::Format(format!("entry `{name}`: {e}"))),
            _ => Err(Error::Format(format!("entry `{name}` is not a byte array"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_bytes_with_version(FORMAT_VERSION)
    }

    pub(crate) fn to_bytes_with_version(&self, version: u32) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&version.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(entry.tag());
            let shape = entry.shape();
            out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
            for d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            entry.payload(&mut out);
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format("not a tensor container (bad magic)".into()));
        }
        if bytes.len() < MAGIC.len() + 8 + CHECKSUM_LEN {
            return Err(Error::Checksum);
        }
        let (body, trailer) = bytes.split_at(bytes.len() - CHECKSUM_LEN);
        if Sha256::digest(body).as_slice() != trailer {
            return Err(Error::Checksum);
        }
        let mut r = Reader {
            bytes: body,
            pos: MAGIC.len(),
        };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let count = r.u32()?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("entry name is not UTF-8".into()))?;
            let tag = r.take(1)?[0];
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let entry = match tag {
                TAG_F32 => Entry::F32 {
                    data: r
                        .take(numel * 4)?
                        .chunks_exact(4)
                        .map(f32::from_le_slice)
                        .collect(),
                    shape,
                },
                TAG_F64 => Entry::F64 {
                    data: r
                        .take(numel * 8)?
                        .chunks_exact(8)
                        .map(f64::from_le_slice)
                        .collect(),
                    shape,
                },
                TAG_U32 => Entry::U32 {
                    data: r
                        .take(numel * 4)?
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                    shape,
                },
                TAG_U8 if rank == 1 => Entry::U8(r.take(numel)?.to_vec()),
                other => {
                    return Err(Error::Format(format!(
                        "unknown dtype tag {other} for `{name}`"
                    )))
                }
            };
            if entries.insert(name.clone(), entry).is_some() {
                return Err(Error::Format(format!("duplicate entry `{name}`")));
            }
        }
        if r.pos != body.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                body.len() - r.pos
            )));
        }
        Ok(Self { entries })
    }

    /// Writes through a temporary file and a rename, so readers never see a partial file.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("entry runs past the end of the file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorFile {
        let mut f = TensorFile::new();
        f.insert_tensor(
            "w",
            &Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.2),
        );
        f.insert_tensor("x", &Tensor::<f64>::from_fn(&[4], |i| (i as f64).exp()));
        f.insert_tensor("s", &Tensor::<f64>::scalar(0.9999));
        f.insert_labels("labels", &[3, 1, 4, 1, 5]).unwrap();
        f.insert_json("meta", &serde_json::json!({"step": 7, "lr": 1e-3}))
            .unwrap();
        f
    }

    #[test]
    fn round_trip_is_exact() {
        let f = sample();
        let bytes = f.to_bytes();
        let g = TensorFile::from_bytes(&bytes).unwrap();
        assert_eq!(f, g);
        assert_eq!(g.to_bytes(), bytes);
        assert_eq!(g.tensor::<f64>("s").unwrap().shape(), &[] as &[usize]);
        assert_eq!(g.labels("labels").unwrap(), vec![3, 1, 4, 1, 5]);
        let meta: serde_json::Value = g.json("meta").unwrap();
        assert_eq!(meta["step"], 7);
    }

    #[test]
    fn truncation_and_corruption_fail_the_checksum() {
        let bytes = sample().to_bytes();
        for cut in [bytes.len() - 1, bytes.len() - 40, 30] {
            assert!(matches!(
                TensorFile::from_bytes(&bytes[..cut]),
                Err(Error::Checksum)
            ));
        }
        let mut flipped = bytes.clone();
        flipped[20] ^= 1;
        assert!(matches!(
            TensorFile::from_bytes(&flipped),
            Err(Error::Checksum)
        ));
    }

    #[test]
    fn other_versions_are_refused_by_name() {
        let bytes = sample().to_bytes_with_version(7);
        let err = TensorFile::from_bytes(&bytes).unwrap_err();
        assert!(matches!(
            err,
            Error::Version {
                found: 7,
                expected: 1
            }
        ));
        let msg = err.to_string();
        assert!(msg.contains('7') && msg.contains('1'));
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        assert!(matches!(
            TensorFile::from_bytes(b"hello world"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn type_mismatches_are_reported() {
        let f = sample();
        assert!(f.tensor::<f32>("labels").is_err());
        assert!(f.labels("w").is_err());
        assert!(f.tensor::<f32>("nope").is_err());
    }

    #[test]
    fn save_and_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nested/file.xt");
        sample().save(&path).unwrap();
        assert_eq!(TensorFile::load(&path).unwrap(), sample());
    }
}
