//! Named parameter storage shared by every model.
//!
//! A model owns one [`ParamStore`]; layers hold [`ParamId`]s into it. Two layers
//! that hold the same id share storage, which is how the dual-branch encoder
//! shares its convolution weights.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StatsId(pub(crate) usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
    pub grad: Tensor,
}

/// Batch-norm running statistics for one channel set.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Batch statistics observed by a train-mode batch norm, applied after the step.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub id: StatsId,
    pub mean: Vec<f64>,
    /// Unbiased batch variance.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    stats: Vec<RunningStats>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(tensor.shape());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor, trainable: true, grad });
        Ok(id)
    }

    pub fn add_stats(&mut self, name: impl Into<String>, channels: usize) -> StatsId {
        let id = StatsId(self.stats.len());
        self.stats.push(RunningStats { name: name.into(), mean: vec![0.0; channels], var: vec![1.0; channels] });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].tensor
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0]
    }

    pub fn stats_mut(&mut self, id: StatsId) -> &mut RunningStats {
        &mut self.stats[id.0]
    }

    pub fn all_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn params(&self) -> &[Parameter] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[f64]) {
        for (a, b) in self.params[id.0].grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn freeze(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
        }
    }

    /// Number of scalars among `ids`, frozen or not.
    pub fn count(&self, ids: impl IntoIterator<Item = ParamId>) -> usize {
        ids.into_iter().map(|id| self.get(id).tensor.numel()).sum()
    }

    /// Number of scalars the optimizer may update.
    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.numel()).sum()
    }

    /// Exponential moving average update of running statistics.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate], momentum: f64) {
        for u in updates {
            let s = &mut self.stats[u.id.0];
            for (r, b) in s.mean.iter_mut().zip(&u.mean) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
            for (r, b) in s.var.iter_mut().zip(&u.var) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }

    /// Copies values (and running statistics) for every name present in both stores.
    ///
    /// `rename` maps a name in `self` to the name to look up in `src`; returning
    /// `None` skips the entry. Returns the number of copied parameters.
    pub fn copy_from(&mut self, src: &ParamStore, rename: impl Fn(&str) -> Option<String>) -> Result<usize> {
        let mut copied = 0;
        for p in &mut self.params {
            let Some(src_name) = rename(&p.name) else { continue };
            let Some(sid) = src.id_of(&src_name) else { continue };
            let sp = src.get(sid);
            if sp.tensor.shape() != p.tensor.shape() {
                return Err(Error::shape(
                    "copy_from",
                    format!("{} {} vs {} {}", p.name, p.tensor.shape(), sp.name, sp.tensor.shape()),
                ));
            }
            p.tensor = sp.tensor.clone();
            copied += 1;
        }
        let src_stats: HashMap<&str, &RunningStats> = src.stats.iter().map(|s| (s.name.as_str(), s)).collect();
        for s in &mut self.stats {
            let Some(src_name) = rename(&s.name) else { continue };
            if let Some(ss) = src_stats.get(src_name.as_str()) {
                if ss.mean.len() != s.mean.len() {
                    return Err(Error::shape("copy_from", format!("running stats {} length", s.name)));
                }
                s.mean = ss.mean.clone();
                s.var = ss.var.clone();
            }
        }
        Ok(copied)
    }

    /// Overwrites a parameter's values by name, checking the shape.
    pub fn load_named(&mut self, name: &str, shape: Shape, values: Vec<f64>) -> Result<()> {
        let id = self.id_of(name).ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        let p = self.get_mut(id);
        if p.tensor.shape() != shape {
            return Err(Error::Checkpoint(format!("{name}: shape {shape} does not match model {}", p.tensor.shape())));
        }
        p.tensor = Tensor::new(shape, values)?;
        Ok(())
    }

    pub fn load_stats_named(&mut self, name: &str, mean: Vec<f64>, var: Vec<f64>) -> Result<()> {
        let s = self
            .stats
            .iter_mut()
            .find(|s| s.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown running stats {name}")))?;
        if s.mean.len() != mean.len() || s.var.len() != var.len() {
            return Err(Error::Checkpoint(format!("{name}: running stats length mismatch")));
        }
        s.mean = mean;
        s.var = var;
        Ok(())
    }

    /// Order-sensitive FNV-1a hash over all parameter and statistic bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for b in bytes {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        for p in &self.params {
            eat(p.name.as_bytes());
            for v in p.tensor.data() {
                eat(&v.to_le_bytes());
            }
        }
        for s in &self.stats {
            eat(s.name.as_bytes());
            for v in s.mean.iter().chain(&s.var) {
                eat(&v.to_le_bytes());
            }
        }
        h
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::zeros([1, 1, 1, 1])).unwrap();
        assert!(s.add("a.weight", Tensor::zeros([1, 1, 1, 1])).is_err());
    }

    #[test]
    fn ema_uses_momentum() {
        let mut s = ParamStore::new();
        let id = s.add_stats("bn", 1);
        s.apply_stat_updates(&[StatUpdate { id, mean: vec![1.0], var: vec![3.0] }], 0.1);
        let st = s.stats(id);
        assert!((st.mean[0] - 0.1).abs() < 1e-15);
        assert!((st.var[0] - 1.2).abs() < 1e-15);
    }

    #[test]
    fn frozen_params_still_count_but_are_not_trainable() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros([2, 3, 1, 1])).unwrap();
        assert_eq!((s.count([a]), s.trainable_count()), (6, 6));
        s.freeze();
        assert_eq!((s.count([a]), s.trainable_count()), (6, 0));
    }
}
