//! Named parameter collections and their binary checkpoint format.

use crate::scalar::Scalar;
use crate::tensor::Tensor;
use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

const MAGIC: &[u8; 4] = b"CGWT";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
    /// Buffers (running statistics) are persisted but never receive gradients.
    pub buffer: bool,
    pub trainable: bool,
}

/// Ordered parameter set owned by one network. Every store carries a process-unique
/// id so several networks can be bound into one graph without collisions.
#[derive(Debug, PartialEq)]
pub struct ParamStore<T> {
    uid: u64,
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> Clone for ParamStore<T> {
    fn clone(&self) -> Self {
        ParamStore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            entries: self.entries.clone(),
        }
    }
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
        }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            buffer: false,
            trainable: true,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            buffer: true,
            trainable: false,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries.iter().filter(|e| !e.buffer).map(|e| e.value.numel()).sum()
    }

    /// Marks every non-buffer entry whose name satisfies `pred` as trainable and the
    /// rest as frozen.
    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for e in &mut self.entries {
            if !e.buffer {
                e.trainable = pred(&e.name);
            }
        }
    }

    /// Copies values from a store with an identical layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) {
        assert_eq!(self.entries.len(), other.entries.len(), "store layouts differ");
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            assert_eq!(a.value.shape(), b.value.shape(), "shape of {} differs", a.name);
            a.value = b.value.clone();
        }
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for e in &self.entries {
            let name = e.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[e.buffer as u8, e.trainable as u8])?;
            w.write_all(&(e.value.ndim() as u32).to_le_bytes())?;
            for &d in e.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in e.value.data() {
                w.write_all(&v.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> io::Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "not a weight file"));
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!("unsupported weight file version {version}"),
            ));
        }
        let count = read_u32(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
            let mut flags = [0u8; 2];
            r.read_exact(&mut flags)?;
            let ndim = read_u32(r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                data.push(T::from_f64_lossy(f64::from_le_bytes(b)));
            }
            store.entries.push(ParamEntry {
                name,
                value: Tensor::new(shape, data),
                buffer: flags[0] != 0,
                trainable: flags[1] != 0,
            });
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()
    }

    pub fn load(path: impl AsRef<Path>) -> io::Result<Self> {
        let mut f = io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    /// Loads values into this store, checking names and shapes against the file.
    pub fn load_values(&mut self, path: impl AsRef<Path>) -> io::Result<()> {
        let other = Self::load(path)?;
        if other.entries.len() != self.entries.len() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                format!(
                    "weight file has {} entries, network expects {}",
                    other.entries.len(),
                    self.entries.len()
                ),
            ));
        }
        for (a, b) in self.entries.iter_mut().zip(other.entries) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!(
                        "weight mismatch: expected {} {:?}, found {} {:?}",
                        a.name,
                        a.value.shape(),
                        b.name,
                        b.value.shape()
                    ),
                ));
            }
            a.value = b.value;
            a.trainable = b.trainable;
        }
        Ok(())
    }
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_file_round_trips_f32_values_exactly() {
        let mut s = ParamStore::<f32>::new();
        s.add("conv.w", Tensor::from_fn([2, 3], |i| i as f32 * 0.1 - 0.25));
        s.add_buffer("bn.mean", Tensor::full([3], 0.5));
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = ParamStore::<f32>::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back.entries(), s.entries());
        assert_ne!(back.uid(), s.uid());
    }

    #[test]
    fn clone_gets_fresh_uid() {
        let s = ParamStore::<f64>::new();
        assert_ne!(s.clone().uid(), s.uid());
    }
}
