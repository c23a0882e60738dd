use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::seeded_rng;
use crate::error::{Error, Result};

/// A named parameter snapshot: shape plus row-major 32-bit payload.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub type ParamTable = BTreeMap<String, ParamTensor>;

pub struct ParamStore {
    device: Device,
    dtype: DType,
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            vars: BTreeMap::new(),
            rng: seeded_rng(seed),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-bound..=bound)).collect();
        self.insert(name, shape, data)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.insert(name, shape, vec![value; n])
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    /// All variables in name order.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    pub fn to_table(&self) -> Result<ParamTable> {
        self.vars
            .iter()
            .map(|(name, var)| {
                let data = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
                Ok((
                    name.clone(),
                    ParamTensor {
                        shape: var.dims().to_vec(),
                        data,
                    },
                ))
            })
            .collect()
    }

    /// Overwrites every parameter from `table`; names and shapes must match exactly.
    pub fn load_table(&self, table: &ParamTable) -> Result<()> {
        if table.len() != self.vars.len() || !table.keys().eq(self.vars.keys()) {
            return Err(Error::Checkpoint("parameter names do not match the model".into()));
        }
        for (name, var) in &self.vars {
            let p = &table[name];
            if p.shape != var.dims() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?} does not match model {:?}",
                    p.shape,
                    var.dims()
                )));
            }
            let t = Tensor::from_vec(p.data.clone(), p.shape.as_slice(), &self.device)?.to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }

    /// Copies parameters named `src_prefix*` in `other` onto `dst_prefix*` here.
    pub fn copy_prefix(&self, other: &ParamStore, src_prefix: &str, dst_prefix: &str) -> Result<usize> {
        let mut copied = 0;
        for (name, src) in other.vars_with_prefix(src_prefix) {
            let dst_name = format!("{dst_prefix}{}", &name[src_prefix.len()..]);
            let dst = self
                .vars
                .get(&dst_name)
                .ok_or_else(|| Error::Checkpoint(format!("no parameter {dst_name} to copy into")))?;
            if dst.dims() != src.dims() {
                return Err(Error::Checkpoint(format!("{dst_name}: shape mismatch on copy")));
            }
            dst.set(&src.as_tensor().to_dtype(self.dtype)?)?;
            copied += 1;
        }
        Ok(copied)
    }
}
