//! Parameter registry and checkpoint archive.
//!
//! [`ParamStore`] is an insertion-ordered map from dotted names to arrays.
//! Checkpoints are a self-describing archive: the magic `CGTK1`, a textual
//! manifest (one `name dtype ndim extents...` line per parameter), a blank
//! line, then raw little-endian value blocks in manifest order. Save→load
//! round trips are bit-exact and manifest order is stable, so checkpoint
//! files can be compared byte-for-byte.

use crate::error::{Error, Result};
use crate::tensor::{Elem, NdArray};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

const MAGIC: &[u8] = b"CGTK1\n";

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) u32);

impl ParamId {
    fn i(self) -> usize {
        self.0 as usize
    }

    /// Dense slot index (ids are assigned in registration order).
    pub(crate) fn index(self) -> usize {
        self.0 as usize
    }
}

/// Insertion-ordered parameter registry.
pub struct ParamStore<T> {
    names: Vec<String>,
    arrays: Vec<NdArray<T>>,
    index: BTreeMap<String, u32>,
}

impl<T: Elem> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { names: Vec::new(), arrays: Vec::new(), index: BTreeMap::new() }
    }

    /// Registers a named array. Names must be unique and whitespace-free.
    pub fn register(&mut self, name: &str, arr: NdArray<T>) -> Result<ParamId> {
        if name.is_empty() || name.chars().any(|c| c.is_whitespace()) {
            return Err(Error::Usage(format!("invalid parameter name {:?}", name)));
        }
        if self.index.contains_key(name) {
            return Err(Error::Usage(format!("duplicate parameter {:?}", name)));
        }
        let id = self.names.len() as u32;
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.arrays.push(arr);
        Ok(ParamId(id))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.i()]
    }

    pub fn get(&self, id: ParamId) -> &NdArray<T> {
        &self.arrays[id.i()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut NdArray<T> {
        &mut self.arrays[id.i()]
    }

    pub fn get_by_name(&self, name: &str) -> Option<&NdArray<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    /// Iterates `(name, array)` in insertion order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &NdArray<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.arrays.iter())
    }

    /// Mutable variant of [`ParamStore::iter`].
    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut NdArray<T>)> {
        self.names.iter().map(|s| s.as_str()).zip(self.arrays.iter_mut())
    }

    /// Ids of all trainable parameters, in insertion order.
    pub fn trainable_ids(&self) -> Vec<ParamId> {
        (0..self.arrays.len())
            .filter(|&i| self.arrays[i].requires_grad)
            .map(|i| ParamId(i as u32))
            .collect()
    }

    /// Total trainable scalar count.
    pub fn trainable_params(&self) -> u64 {
        self.arrays.iter().filter(|a| a.requires_grad).map(|a| a.numel() as u64).sum()
    }

    /// Copies values (not flags) from `other`, requiring identical names and
    /// shapes on both sides.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            let missing: Vec<_> =
                self.names.iter().filter(|n| other.index.contains_key(*n) == false).collect();
            let extra: Vec<_> =
                other.names.iter().filter(|n| self.index.contains_key(*n) == false).collect();
            return Err(Error::Input(format!(
                "parameter sets differ (missing here: {:?}, unexpected: {:?})",
                extra, missing
            )));
        }
        for i in 0..self.arrays.len() {
            if self.arrays[i].shape() != other.arrays[i].shape() {
                return Err(Error::Input(format!(
                    "shape mismatch for {:?}: {:?} vs {:?}",
                    self.names[i],
                    self.arrays[i].shape(),
                    other.arrays[i].shape()
                )));
            }
            let src = other.arrays[i].data().to_vec();
            self.arrays[i].data_mut().copy_from_slice(&src);
        }
        Ok(())
    }

    /// Serializes the archive to bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        for (name, arr) in self.iter() {
            let mut line = format!("{} {} {}", name, T::DTYPE, arr.shape().len());
            for d in arr.shape() {
                line.push_str(&format!(" {}", d));
            }
            line.push('\n');
            out.extend_from_slice(line.as_bytes());
        }
        out.push(b'\n');
        for arr in &self.arrays {
            for &v in arr.data() {
                v.write_le(&mut out);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    /// Parses an archive. `requires_grad` is re-derived by convention: names
    /// prefixed `meta.` or ending in `.running_mean`/`.running_var` are
    /// buffers, everything else is trainable. (Loading into a freshly built
    /// model via [`ParamStore::copy_values_from`] keeps the model's own flags.)
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad magic, expected CGTK1".into() });
        }
        let mut store = ParamStore::new();
        let mut pos = MAGIC.len();
        let mut entries: Vec<(String, Vec<usize>)> = Vec::new();
        loop {
            let line_start = pos;
            let Some(nl) = bytes[pos..].iter().position(|&b| b == b'\n') else {
                return Err(Error::Format { offset: line_start, msg: "unterminated manifest".into() });
            };
            let line = &bytes[pos..pos + nl];
            pos += nl + 1;
            if line.is_empty() {
                break; // blank line ends the manifest
            }
            let text = std::str::from_utf8(line).map_err(|_| Error::Format {
                offset: line_start,
                msg: "manifest line is not UTF-8".into(),
            })?;
            let mut it = text.split_ascii_whitespace();
            let (Some(name), Some(dtype), Some(ndim)) = (it.next(), it.next(), it.next()) else {
                return Err(Error::Format {
                    offset: line_start,
                    msg: format!("short manifest line {:?}", text),
                });
            };
            if dtype != T::DTYPE {
                return Err(Error::Format {
                    offset: line_start,
                    msg: format!("dtype {} in archive, expected {}", dtype, T::DTYPE),
                });
            }
            let ndim: usize = ndim.parse().map_err(|_| Error::Format {
                offset: line_start,
                msg: format!("bad ndim in {:?}", text),
            })?;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let d = it.next().ok_or_else(|| Error::Format {
                    offset: line_start,
                    msg: format!("missing extent in {:?}", text),
                })?;
                shape.push(d.parse().map_err(|_| Error::Format {
                    offset: line_start,
                    msg: format!("bad extent in {:?}", text),
                })?);
            }
            if it.next().is_some() {
                return Err(Error::Format {
                    offset: line_start,
                    msg: format!("trailing tokens in {:?}", text),
                });
            }
            entries.push((name.to_string(), shape));
        }
        for (name, shape) in entries {
            let numel: usize = shape.iter().product();
            let nbytes = numel * T::BYTES;
            if pos + nbytes > bytes.len() {
                return Err(Error::Format {
                    offset: pos,
                    msg: format!("truncated data block for {:?}", name),
                });
            }
            let mut data = Vec::with_capacity(numel);
            for k in 0..numel {
                data.push(T::from_le(&bytes[pos + k * T::BYTES..pos + (k + 1) * T::BYTES]));
            }
            pos += nbytes;
            let mut arr = NdArray::from_vec(&shape, data)?;
            arr.requires_grad = !(name.starts_with("meta.")
                || name.ends_with(".running_mean")
                || name.ends_with(".running_var"));
            store.register(&name, arr)?;
        }
        if pos != bytes.len() {
            return Err(Error::Format { offset: pos, msg: "trailing bytes after data blocks".into() });
        }
        Ok(store)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}
