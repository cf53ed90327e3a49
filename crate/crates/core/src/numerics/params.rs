use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use super::{NumericsError, Tensor};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named learnable (or frozen) tensor.
#[derive(Clone, Debug)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }

    /// Frozen parameters take part in forward passes but never receive
    /// gradients or optimizer updates.
    pub fn is_frozen(&self) -> bool {
        !self.tensor.requires_grad()
    }
}

/// Ordered collection of parameters with unique names.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"ASCR1";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId, NumericsError> {
        self.insert(name.into(), tensor.with_requires_grad(true))
    }

    pub fn add_frozen(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
    ) -> Result<ParamId, NumericsError> {
        self.insert(name.into(), tensor.with_requires_grad(false))
    }

    fn insert(&mut self, name: String, tensor: Tensor) -> Result<ParamId, NumericsError> {
        if self.by_name.contains_key(&name) {
            return Err(NumericsError::DuplicateParameter(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Exact number of scalar values across all parameters.
    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Parameter count restricted to names starting with `prefix`.
    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.tensor.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(|p| p.tensor.zero_grad());
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, delta: &[f64]) -> Result<(), NumericsError> {
        let p = &mut self.params[id.0];
        if p.is_frozen() {
            return Ok(());
        }
        p.tensor.accumulate_grad(delta)
    }

    /// FNV-1a over names, shapes and raw value bits of the matching
    /// parameters. Used to prove frozen parameters are left untouched.
    pub fn fingerprint(&self, prefix: &str) -> u64 {
        const PRIME: u64 = 0x0000_0100_0000_01b3;
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                hash ^= u64::from(*b);
                hash = hash.wrapping_mul(PRIME);
            }
        };
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            feed(p.name.as_bytes());
            for d in p.tensor.shape() {
                feed(&(*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        hash
    }

    /// Writes every parameter in store order using the `ASCR1` layout:
    /// magic, then per parameter a little-endian `u32` name length, the UTF-8
    /// name, `u32` rank, `u32` dims and the raw little-endian `f64` values.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<(), NumericsError> {
        out.write_all(CHECKPOINT_MAGIC)?;
        for p in &self.params {
            let name = p.name.as_bytes();
            out.write_all(&u32_len(name.len())?.to_le_bytes())?;
            out.write_all(name)?;
            out.write_all(&u32_len(p.tensor.rank())?.to_le_bytes())?;
            for &d in p.tensor.shape() {
                out.write_all(&u32_len(d)?.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(p.tensor.numel() * 8);
            for v in p.tensor.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf)?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), NumericsError> {
        let file = std::fs::File::create(path)?;
        self.write_checkpoint(std::io::BufWriter::new(file))
    }

    /// Loads values into existing parameters by name. Every stored tensor must
    /// match a parameter of identical shape and every parameter must be present.
    pub fn load(&mut self, path: &Path) -> Result<(), NumericsError> {
        let bytes = std::fs::read(path)?;
        let entries = read_checkpoint(&bytes[..])?;
        self.assign(entries)
    }

    pub fn assign(&mut self, entries: Vec<(String, Tensor)>) -> Result<(), NumericsError> {
        let mut seen = vec![false; self.params.len()];
        for (name, tensor) in entries {
            let id = self
                .id(&name)
                .ok_or_else(|| NumericsError::Checkpoint(format!("unknown parameter '{name}'")))?;
            let p = &mut self.params[id.0];
            if p.tensor.shape() != tensor.shape() {
                return Err(NumericsError::Checkpoint(format!(
                    "parameter '{name}' has shape {:?}, checkpoint holds {:?}",
                    p.tensor.shape(),
                    tensor.shape()
                )));
            }
            p.tensor.data_mut().copy_from_slice(tensor.data());
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(NumericsError::Checkpoint(format!(
                "checkpoint lacks parameter '{}'",
                self.params[missing].name
            )));
        }
        Ok(())
    }
}

fn u32_len(n: usize) -> Result<u32, NumericsError> {
    u32::try_from(n).map_err(|_| NumericsError::Checkpoint(format!("length {n} exceeds u32")))
}

/// Parses an `ASCR1` stream into `(name, tensor)` pairs in file order.
pub fn read_checkpoint<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>, NumericsError> {
    let mut magic = [0u8; 5];
    input
        .read_exact(&mut magic)
        .map_err(|_| NumericsError::Checkpoint("missing magic".into()))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NumericsError::Checkpoint("bad magic".into()));
    }
    let mut entries = Vec::new();
    loop {
        let mut len = [0u8; 4];
        match read_exact_or_eof(&mut input, &mut len)? {
            false => break,
            true => {}
        }
        let name_len = u32::from_le_bytes(len) as usize;
        let mut name = vec![0u8; name_len];
        input.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name)
            .map_err(|_| NumericsError::Checkpoint("parameter name is not UTF-8".into()))?;
        let rank = read_u32(&mut input)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut input)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 8];
        input.read_exact(&mut raw).map_err(truncated)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        let tensor = Tensor::new(&shape, data)
            .map_err(|e| NumericsError::Checkpoint(format!("parameter '{name}': {e}")))?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32, NumericsError> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(_: std::io::Error) -> NumericsError {
    NumericsError::Checkpoint("truncated checkpoint".into())
}

fn read_exact_or_eof<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<bool, NumericsError> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = input.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(false);
            }
            return Err(NumericsError::Checkpoint("truncated checkpoint".into()));
        }
        filled += n;
    }
    Ok(true)
}
