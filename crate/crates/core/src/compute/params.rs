use std::collections::HashMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ComputeError, Tensor};

/// The three optimizer groups, each with its own learning rate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Seq2Seq,
    SelectorPointer,
    SelectorEncoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 3] = [ParamGroup::Seq2Seq, ParamGroup::SelectorPointer, ParamGroup::SelectorEncoder];

    fn code(self) -> u8 {
        match self {
            ParamGroup::Seq2Seq => 0,
            ParamGroup::SelectorPointer => 1,
            ParamGroup::SelectorEncoder => 2,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, ParamId>,
}

const MAGIC: &[u8; 4] = b"PKRK";
const FORMAT_VERSION: u32 = 1;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> Result<ParamId, ComputeError> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(ComputeError::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, group, value });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn group_ids(&self, group: ParamGroup) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.group == group).map(|(id, _)| id).collect()
    }

    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Binary checkpoint: magic, format version, record count, then for each
    /// parameter its name, group, shape and row-major values (little endian).
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ComputeError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&[p.group.code()])?;
            w.write_all(&(p.value.rank() as u32).to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ComputeError> {
        let bad = |m: &str| ComputeError::Checkpoint(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("not a parameter checkpoint"));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(ComputeError::Checkpoint(format!("unsupported format version {version}")));
        }
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
            let mut g = [0u8; 1];
            r.read_exact(&mut g)?;
            let group = ParamGroup::from_code(g[0]).ok_or_else(|| bad("unknown parameter group"))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut b = [0u8; 8];
                r.read_exact(&mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            store.add(name, group, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    /// Same names, groups and shapes as `self`, all values zero.
    pub fn zeros_like(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.add(p.name.clone(), p.group, Tensor::zeros(p.value.shape())).expect("names are unique");
        }
        out
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ComputeError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Gradient buffers parallel to a [`ParamStore`]. Backward passes add into
/// these; nothing resets them except [`Grads::zero`] / [`Grads::zero_all`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    data: Vec<Vec<f64>>,
}

impl Grads {
    pub fn new(store: &ParamStore) -> Self {
        Self { data: store.params.iter().map(|p| vec![0.0; p.value.numel()]).collect() }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    pub(crate) fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    /// Resets exactly the listed parameters.
    pub fn zero(&mut self, ids: &[ParamId]) {
        for id in ids {
            self.data[id.0].iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn zero_all(&mut self) {
        self.data.iter_mut().flatten().for_each(|v| *v = 0.0);
    }

    pub fn global_norm(&self) -> f64 {
        self.data.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        self.data.iter_mut().flatten().for_each(|v| *v *= c);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trip_is_byte_stable() {
        let mut s = ParamStore::new();
        s.add("enc.w", ParamGroup::Seq2Seq, Tensor::matrix(2, 2, vec![1.0, -2.5, 3.25, 1e-300]).unwrap()).unwrap();
        s.add("ptr.w", ParamGroup::SelectorPointer, Tensor::scalar(0.5)).unwrap();
        let mut a = Vec::new();
        s.write_to(&mut a).unwrap();
        let back = ParamStore::read_from(a.as_slice()).unwrap();
        assert_eq!(back, s);
        let mut b = Vec::new();
        back.write_to(&mut b).unwrap();
        assert_eq!(a, b);
        assert!(ParamStore::read_from(&b"nope"[..]).is_err());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", ParamGroup::Seq2Seq, Tensor::scalar(0.0)).unwrap();
        assert!(matches!(s.add("w", ParamGroup::Seq2Seq, Tensor::scalar(0.0)), Err(ComputeError::DuplicateParam(_))));
    }

    #[test]
    fn zero_resets_only_listed_params() {
        let mut s = ParamStore::new();
        let a = s.add("a", ParamGroup::Seq2Seq, Tensor::scalar(0.0)).unwrap();
        let b = s.add("b", ParamGroup::Seq2Seq, Tensor::scalar(0.0)).unwrap();
        let mut g = Grads::new(&s);
        g.get_mut(a)[0] = 1.0;
        g.get_mut(b)[0] = 2.0;
        g.zero(&[a]);
        assert_eq!((g.get(a)[0], g.get(b)[0]), (0.0, 2.0));
    }
}
