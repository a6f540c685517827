//! Named parameters, graph binding, and the `VNSCPARM` parameter file.
//!
//! File layout (little-endian): magic `VNSCPARM`, format version `u32`,
//! parameter count `u32`, then per parameter: name length `u16`, UTF-8 name,
//! rank `u8`, one `u32` per extent, raw `f32` data.

use std::cell::RefCell;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::graph::{Gradients, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

pub const PARAM_MAGIC: &[u8; 8] = b"VNSCPARM";
pub const PARAM_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor<f32>,
    pub trainable: bool,
}

/// Ordered, uniquely named parameter collection.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<f32>, trainable: bool) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParameter(name));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<f32>> {
        self.get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| TensorError::MissingParameter(name.to_owned()))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<f32>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.params[i].tensor),
            None => Err(TensorError::MissingParameter(name.to_owned())),
        }
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let slot = self.tensor_mut(name)?;
        if slot.shape() != value.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "ParamStore::set",
                detail: format!("`{name}`: {:?} vs {:?}", slot.shape(), value.shape()),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter().filter(|p| p.trainable)
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(PARAM_MAGIC)?;
        w.write_all(&PARAM_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            let name = p.name.as_bytes();
            let len = u16::try_from(name.len())
                .map_err(|_| TensorError::Format(format!("name too long: `{}`", p.name)))?;
            w.write_all(&len.to_le_bytes())?;
            w.write_all(name)?;
            let rank = u8::try_from(p.tensor.rank())
                .map_err(|_| TensorError::Format(format!("rank too large for `{}`", p.name)))?;
            w.write_all(&[rank])?;
            for &d in p.tensor.shape() {
                let d = u32::try_from(d)
                    .map_err(|_| TensorError::Format(format!("extent too large for `{}`", p.name)))?;
                w.write_all(&d.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(4 * p.tensor.numel());
            for v in p.tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Reads every entry of a parameter file. Entries are untagged, so they
    /// come back as trainable; use [`ParamStore::load_values`] to restore
    /// into a store built by a model.
    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut store = Self::new();
        for (name, tensor) in read_entries(r)? {
            store.insert(name, tensor, true)?;
        }
        Ok(store)
    }

    /// Overwrites values from a parameter file. The file must hold exactly
    /// this store's names with matching shapes.
    pub fn load_values(&mut self, r: impl Read) -> Result<()> {
        let entries = read_entries(r)?;
        if entries.len() != self.params.len() {
            return Err(TensorError::Format(format!(
                "file holds {} parameters, model expects {}",
                entries.len(),
                self.params.len()
            )));
        }
        for (name, tensor) in entries {
            let slot = self
                .tensor_mut(&name)
                .map_err(|_| TensorError::Format(format!("unexpected parameter `{name}`")))?;
            if slot.shape() != tensor.shape() {
                return Err(TensorError::Format(format!(
                    "`{name}` has shape {:?} in file, model expects {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            *slot = tensor;
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_values_from(&mut self, path: impl AsRef<Path>) -> Result<()> {
        self.load_values(BufReader::new(File::open(path)?))
    }
}

fn read_exact<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => TensorError::Format("truncated file".into()),
        _ => TensorError::Io(e),
    })?;
    Ok(buf)
}

fn read_entries(mut r: impl Read) -> Result<Vec<(String, Tensor<f32>)>> {
    let magic: [u8; 8] = read_exact(&mut r)?;
    if &magic != PARAM_MAGIC {
        return Err(TensorError::Format("bad magic".into()));
    }
    let version = u32::from_le_bytes(read_exact(&mut r)?);
    if version != PARAM_VERSION {
        return Err(TensorError::Format(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?) as usize;
    let mut out = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| TensorError::Format("truncated name".into()))?;
        let name = String::from_utf8(name).map_err(|_| TensorError::Format("name is not UTF-8".into()))?;
        let rank = read_exact::<1>(&mut r)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        if rank == 0 || n == 0 {
            return Err(TensorError::Format(format!("`{name}` has empty shape {shape:?}")));
        }
        let mut raw = vec![0u8; 4 * n];
        r.read_exact(&mut raw)
            .map_err(|_| TensorError::Format(format!("truncated data for `{name}`")))?;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(TensorError::Format("trailing bytes after last parameter".into()));
    }
    Ok(out)
}

/// Binds stored parameters into a [`Graph`] for one forward pass.
///
/// Trainable parameters become gradient leaves, frozen ones constants. A
/// parameter is cast to the graph's element type once per session.
pub struct Session<'g, 's, E: Real = f32> {
    graph: &'g Graph<E>,
    store: &'s ParamStore,
    training: bool,
    bound: RefCell<HashMap<String, Var<'g, E>>>,
    updates: RefCell<Vec<(String, Tensor<f32>)>>,
}

impl<'g, 's, E: Real> Session<'g, 's, E> {
    pub fn new(graph: &'g Graph<E>, store: &'s ParamStore, training: bool) -> Self {
        Self {
            graph,
            store,
            training,
            bound: RefCell::new(HashMap::new()),
            updates: RefCell::new(Vec::new()),
        }
    }

    /// Uses `var` for parameter `name` instead of the stored value.
    pub fn bind(&self, name: impl Into<String>, var: Var<'g, E>) {
        self.bound.borrow_mut().insert(name.into(), var);
    }

    pub fn graph(&self) -> &'g Graph<E> {
        self.graph
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    /// Training mode selects batch statistics and enables buffer updates.
    pub fn training(&self) -> bool {
        self.training
    }

    pub fn param(&self, name: &str) -> Result<Var<'g, E>> {
        if let Some(v) = self.bound.borrow().get(name) {
            return Ok(v.clone());
        }
        let p = self
            .store
            .get(name)
            .ok_or_else(|| TensorError::MissingParameter(name.to_owned()))?;
        let value = p.tensor.cast::<E>();
        let var = if p.trainable {
            self.graph.leaf(value)
        } else {
            self.graph.constant(value)
        };
        self.bound.borrow_mut().insert(name.to_owned(), var.clone());
        Ok(var)
    }

    /// Raw stored tensor (codebooks, running statistics).
    pub fn tensor(&self, name: &str) -> Result<&'s Tensor<f32>> {
        self.store.tensor(name)
    }

    /// Queues a new value for a non-trainable buffer.
    pub fn push_update(&self, name: impl Into<String>, value: Tensor<f32>) {
        self.updates.borrow_mut().push((name.into(), value));
    }

    pub fn take_updates(&self) -> Vec<(String, Tensor<f32>)> {
        std::mem::take(&mut *self.updates.borrow_mut())
    }

    /// Gradients of every trainable parameter touched by this session, in
    /// store order; untouched parameters are omitted.
    pub fn param_grads(&self, grads: &Gradients<E>) -> Vec<(String, Tensor<E>)> {
        let bound = self.bound.borrow();
        self.store
            .trainable()
            .filter_map(|p| {
                let v = bound.get(&p.name)?;
                Some((p.name.clone(), grads.get_or_zeros(v)))
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.weight", Tensor::from_fn(&[2, 3], |i| i as f32 * 0.1 - 0.2), true)
            .unwrap();
        s.insert("a.stats", Tensor::new(&[1], vec![f32::MIN_POSITIVE]).unwrap(), false)
            .unwrap();
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = sample_store();
        assert!(matches!(
            s.insert("a.weight", Tensor::zeros(&[1]), true),
            Err(TensorError::DuplicateParameter(_))
        ));
    }

    #[test]
    fn file_round_trip_is_bit_exact() {
        let s = sample_store();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..8], PARAM_MAGIC);
        let mut fresh = sample_store();
        fresh.tensor_mut("a.weight").unwrap().data_mut().fill(0.0);
        fresh.load_values(buf.as_slice()).unwrap();
        assert_eq!(fresh, s);
        let raw = ParamStore::read_from(buf.as_slice()).unwrap();
        assert_eq!(raw.tensor("a.stats").unwrap(), s.tensor("a.stats").unwrap());
    }

    #[test]
    fn corrupt_files_rejected() {
        let s = sample_store();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let mut fresh = sample_store();
        assert!(fresh.load_values(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(fresh.load_values(bad.as_slice()).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(fresh.load_values(extra.as_slice()).is_err());
        let mut other = ParamStore::new();
        other.insert("a.weight", Tensor::zeros(&[3, 2]), true).unwrap();
        other.insert("a.stats", Tensor::zeros(&[1]), false).unwrap();
        assert!(other.load_values(buf.as_slice()).is_err());
    }

    #[test]
    fn session_binds_trainable_as_leaves() {
        let s = sample_store();
        let g = Graph::<f64>::new();
        let sess = Session::new(&g, &s, true);
        let w = sess.param("a.weight").unwrap();
        let st = sess.param("a.stats").unwrap();
        assert!(w.tracked());
        assert!(!st.tracked());
        let loss = w.sum();
        let grads = g.backward(&loss);
        let pg = sess.param_grads(&grads);
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].0, "a.weight");
        assert!(sess.param("missing").is_err());
    }
}
