//! Named trainable-parameter registry.
//!
//! Every model parameter lives in a flat name → Var map with dotted names
//! whose first segment is the owning component (E, P, R1..R6, S, R, flow, …).
//! Creation order is code order and all randomness comes from the caller's
//! seeded rng, so initialization is reproducible.

use std::collections::BTreeMap;

use candle_core::{Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// He-style uniform for conv/linear weights; `fan_in` scalars per output.
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

pub struct ParamStore {
    device: Device,
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new(device: Device) -> Self {
        ParamStore {
            device,
            vars: BTreeMap::new(),
        }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn create(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let numel: usize = shape.iter().product();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; numel],
            Init::Ones => vec![1.0; numel],
            Init::HeUniform { fan_in } => {
                let bound = (6.0 / fan_in as f32).sqrt();
                (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
            }
        };
        let tensor = Tensor::from_vec(data, shape, &self.device)?;
        let var = Var::from_tensor(&tensor)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Vars in name order; the deterministic order seen by the optimizer.
    pub fn all_vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    /// Vars whose name starts with one of the given dotted prefixes.
    pub fn vars_with_prefixes(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(name, _)| {
                prefixes
                    .iter()
                    .any(|p| name.as_str() == *p || name.starts_with(&format!("{p}.")))
            })
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.vars.keys().cloned().collect()
    }

    /// Top-level component of each parameter (prefix before the first dot).
    pub fn component_names(&self) -> Vec<String> {
        let mut out: Vec<String> = self
            .vars
            .keys()
            .map(|k| k.split('.').next().unwrap_or(k).to_string())
            .collect();
        out.dedup();
        out
    }

    pub fn count_scalars(&self) -> usize {
        self.vars
            .values()
            .map(|v| v.as_tensor().elem_count())
            .sum()
    }

    /// Copy values for `name` from another store; shapes must match.
    pub fn copy_from(&mut self, other: &ParamStore, name: &str) -> Result<()> {
        let src = other
            .vars
            .get(name)
            .ok_or_else(|| Error::Transfer(format!("source is missing parameter {name}")))?;
        let dst = self
            .vars
            .get(name)
            .ok_or_else(|| Error::Transfer(format!("target is missing parameter {name}")))?;
        if src.shape() != dst.shape() {
            return Err(Error::Transfer(format!(
                "parameter {name}: shape {:?} does not match {:?}",
                src.shape(),
                dst.shape()
            )));
        }
        dst.set(src.as_tensor())?;
        Ok(())
    }

    /// Overwrite all parameters under `prefix` from another store.
    pub fn copy_component(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let names: Vec<String> = self
            .vars
            .keys()
            .filter(|n| n.split('.').next() == Some(prefix))
            .cloned()
            .collect();
        if names.is_empty() {
            return Err(Error::Transfer(format!(
                "target has no parameters in component {prefix}"
            )));
        }
        for name in &names {
            self.copy_from(other, name)?;
        }
        Ok(names.len())
    }

    /// Named (shape, data) pairs for checkpointing.
    pub fn export(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        let mut out = Vec::with_capacity(self.vars.len());
        for (name, var) in &self.vars {
            let t = var.as_tensor();
            let shape = t.dims().to_vec();
            let data = t.flatten_all()?.to_vec1::<f32>()?;
            out.push((name.clone(), shape, data));
        }
        Ok(out)
    }

    /// Load values by name. In strict mode every parameter on either side
    /// must match; in lenient mode unmatched target parameters keep their
    /// initialization and are reported.
    pub fn import(
        &mut self,
        entries: &BTreeMap<String, (Vec<usize>, Vec<f32>)>,
        strict: bool,
    ) -> Result<Vec<String>> {
        let mut unmatched: Vec<String> = Vec::new();
        for (name, var) in &self.vars {
            match entries.get(name) {
                Some((shape, data)) => {
                    if shape != var.dims() {
                        return Err(Error::Transfer(format!(
                            "parameter {name}: checkpoint shape {shape:?} does not match {:?}",
                            var.dims()
                        )));
                    }
                    let t = Tensor::from_vec(data.clone(), shape.as_slice(), &self.device)?;
                    var.set(&t)?;
                }
                None => unmatched.push(name.clone()),
            }
        }
        let orphan: Vec<String> = entries
            .keys()
            .filter(|k| !self.vars.contains_key(*k))
            .cloned()
            .collect();
        if strict && (!unmatched.is_empty() || !orphan.is_empty()) {
            return Err(Error::Transfer(format!(
                "strict load mismatch; missing in checkpoint: {unmatched:?}; not in model: {orphan:?}"
            )));
        }
        unmatched.extend(orphan);
        Ok(unmatched)
    }
}
