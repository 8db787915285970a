//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CSKNETCK"  version u32
//! kind str  model-config str (TOML)  run-config str (TOML echo)
//! epoch u64  best_miou f64
//! params:  u32 count, each { name str, trainable u8, dims 4 x u32, values f64 x numel }
//! stats:   u32 count, each { name str, u32 len, mean f64 x len, var f64 x len }
//! optimizer: u8 present, then { step u64, u32 count, each { name str, u32 len, f64 x len } }
//! rng: u8 present, then { seed [u8; 32], stream u64, word_pos u128 }
//! ```
//! `str` is a u32 byte length followed by UTF-8.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::ModelConfig;
use crate::optim::OptimizerState;
use crate::param::ParamStore;
use crate::tensor::{Shape, Tensor};

const MAGIC: &[u8; 8] = b"CSKNETCK";
const VERSION: u32 = 1;

/// What a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    BaselineEo,
    BaselineIr,
    CskNet,
}

impl ModelKind {
    pub fn tag(&self) -> &'static str {
        match self {
            ModelKind::BaselineEo => "baseline-eo",
            ModelKind::BaselineIr => "baseline-ir",
            ModelKind::CskNet => "csknet",
        }
    }

    fn from_tag(s: &str) -> Result<Self> {
        match s {
            "baseline-eo" => Ok(ModelKind::BaselineEo),
            "baseline-ir" => Ok(ModelKind::BaselineIr),
            "csknet" => Ok(ModelKind::CskNet),
            other => Err(Error::Checkpoint(format!("unknown model kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedParam {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SavedStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState { seed: rng.get_seed(), stream: rng.get_stream(), word_pos: rng.get_word_pos() }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub run_config: String,
    /// Completed epochs.
    pub epoch: usize,
    pub best_miou: f64,
    pub params: Vec<SavedParam>,
    pub stats: Vec<SavedStats>,
    /// Momentum buffers by parameter name, and the step counter.
    pub optimizer: Option<SavedOptimizer>,
    pub rng: Option<RngState>,
}

/// Step counter and momentum buffers keyed by parameter name.
pub type SavedOptimizer = (u64, Vec<(String, Vec<f64>)>);

impl Checkpoint {
    pub fn capture(kind: ModelKind, model: &ModelConfig, store: &ParamStore) -> Self {
        Checkpoint {
            kind,
            model: model.clone(),
            run_config: String::new(),
            epoch: 0,
            best_miou: 0.0,
            params: store
                .params()
                .iter()
                .map(|p| SavedParam { name: p.name.clone(), trainable: p.trainable, value: p.tensor.clone() })
                .collect(),
            stats: store
                .all_stats()
                .iter()
                .map(|s| SavedStats { name: s.name.clone(), mean: s.mean.clone(), var: s.var.clone() })
                .collect(),
            optimizer: None,
            rng: None,
        }
    }

    pub fn with_optimizer(mut self, store: &ParamStore, opt: &OptimizerState) -> Self {
        let bufs = store.params().iter().zip(&opt.velocity).map(|(p, v)| (p.name.clone(), v.data().to_vec())).collect();
        self.optimizer = Some((opt.step, bufs));
        self
    }

    /// Writes parameters and running statistics into a store built from the same config.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.params.len() != store.len() {
            return Err(Error::Checkpoint(format!("checkpoint has {} parameters, model has {}", self.params.len(), store.len())));
        }
        for p in &self.params {
            store.load_named(&p.name, p.value.shape(), p.value.data().to_vec())?;
            let id = store.id_of(&p.name).expect("loaded above");
            store.get_mut(id).trainable = p.trainable;
        }
        for s in &self.stats {
            store.load_stats_named(&s.name, s.mean.clone(), s.var.clone())?;
        }
        Ok(())
    }

    pub fn restore_optimizer(&self, store: &ParamStore) -> Result<Option<OptimizerState>> {
        let Some((step, bufs)) = &self.optimizer else { return Ok(None) };
        let mut state = OptimizerState::new(store);
        for (name, values) in bufs {
            let id =
                store.id_of(name).ok_or_else(|| Error::Checkpoint(format!("momentum buffer for unknown parameter {name}")))?;
            let shape = store.value(id).shape();
            state.velocity[id.0] = Tensor::new(shape, values.clone()).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        }
        state.step = *step;
        Ok(Some(state))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION);
        w.str(self.kind.tag());
        let model = toml::to_string(&self.model).map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        w.str(&model);
        w.str(&self.run_config);
        w.u64(self.epoch as u64);
        w.f64(self.best_miou);
        w.u32(self.params.len() as u32);
        for p in &self.params {
            w.str(&p.name);
            w.0.push(u8::from(p.trainable));
            for d in p.value.shape().dims() {
                w.u32(d as u32);
            }
            w.f64s(p.value.data());
        }
        w.u32(self.stats.len() as u32);
        for s in &self.stats {
            w.str(&s.name);
            w.u32(s.mean.len() as u32);
            w.f64s(&s.mean);
            w.f64s(&s.var);
        }
        match &self.optimizer {
            None => w.0.push(0),
            Some((step, bufs)) => {
                w.0.push(1);
                w.u64(*step);
                w.u32(bufs.len() as u32);
                for (name, v) in bufs {
                    w.str(name);
                    w.u32(v.len() as u32);
                    w.f64s(v);
                }
            }
        }
        match &self.rng {
            None => w.0.push(0),
            Some(r) => {
                w.0.push(1);
                w.0.extend_from_slice(&r.seed);
                w.u64(r.stream);
                w.0.extend_from_slice(&r.word_pos.to_le_bytes());
            }
        }
        Ok(w.0)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let kind = ModelKind::from_tag(&r.str()?)?;
        let model: ModelConfig = toml::from_str(&r.str()?).map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        let run_config = r.str()?;
        let epoch = r.u64()? as usize;
        let best_miou = r.f64()?;
        let mut params = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let trainable = r.take(1)?[0] != 0;
            let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?].map(|d| d as usize);
            let shape = Shape::from(dims);
            let value = Tensor::new(shape, r.f64s(shape.numel())?)?;
            params.push(SavedParam { name, trainable, value });
        }
        let mut stats = Vec::new();
        for _ in 0..r.u32()? {
            let name = r.str()?;
            let len = r.u32()? as usize;
            let mean = r.f64s(len)?;
            let var = r.f64s(len)?;
            stats.push(SavedStats { name, mean, var });
        }
        let optimizer = if r.take(1)?[0] == 1 {
            let step = r.u64()?;
            let mut bufs = Vec::new();
            for _ in 0..r.u32()? {
                let name = r.str()?;
                let len = r.u32()? as usize;
                bufs.push((name, r.f64s(len)?));
            }
            Some((step, bufs))
        } else {
            None
        };
        let rng = if r.take(1)?[0] == 1 {
            let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
            let stream = r.u64()?;
            let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
            Some(RngState { seed, stream, word_pos })
        } else {
            None
        };
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { kind, model, run_config, epoch, best_miou, params, stats, optimizer, rng })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, v: &[f64]) {
        for &x in v {
            self.f64(x);
        }
    }

    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_csknet;

    #[test]
    fn bytes_round_trip() {
        let model =
            build_csknet(&ModelConfig { widths: vec![2, 2, 2, 2, 2], decoder_width: 2, embed_dim: 2, ..ModelConfig::default() })
                .unwrap();
        let mut ck = Checkpoint::capture(ModelKind::CskNet, &model.config, &model.store)
            .with_optimizer(&model.store, &OptimizerState::new(&model.store));
        ck.rng = Some(RngState::capture(&ChaCha8Rng::seed_from_u64(3)));
        ck.epoch = 4;
        ck.best_miou = 0.625;
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }
}
