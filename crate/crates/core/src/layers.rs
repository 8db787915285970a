//! Convolution and batch-norm layers expressed over a [`ParamStore`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Mode, Tape, Var};
use crate::param::{ParamId, ParamStore, StatsId};
use crate::tensor::{Shape, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Modality {
    Eo,
    Ir,
}

impl Modality {
    pub fn tag(&self) -> &'static str {
        match self {
            Modality::Eo => "eo",
            Modality::Ir => "ir",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eo" | "optical" => Ok(Modality::Eo),
            "ir" => Ok(Modality::Ir),
            other => Err(Error::Config(format!("unknown modality {other:?} (expected eo or ir)"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    /// Kaiming-uniform (fan-in, ReLU gain) weights; zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = (c_in * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let weight = store.add(format!("{name}.weight"), Tensor::uniform([c_out, c_in, k, k], -bound, bound, rng))?;
        let bias = if bias { Some(store.add(format!("{name}.bias"), Tensor::zeros([1, c_out, 1, 1]))?) } else { None };
        Ok(Conv { weight, bias, stride, pad: k / 2 })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

/// Affine parameters plus running statistics of one batch norm.
#[derive(Debug, Clone)]
pub struct BnSlot {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: StatsId,
}

impl BnSlot {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones([1, channels, 1, 1]))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros([1, channels, 1, 1]))?;
        let stats = store.add_stats(name, channels);
        Ok(BnSlot { gamma, beta, stats })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        match mode {
            Mode::Train => tape.batch_norm_train(x, g, b, self.stats, BN_EPS),
            Mode::Eval => {
                let st = store.stats(self.stats);
                tape.batch_norm_eval(x, g, b, &st.mean, &st.var, BN_EPS)
            }
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        vec![self.gamma, self.beta]
    }

    pub fn gamma_values<'a>(&self, store: &'a ParamStore) -> &'a [f64] {
        store.value(self.gamma).data()
    }
}

/// Per-modality batch norms that accompany one set of shared conv weights.
/// The two slots never share storage.
#[derive(Debug, Clone)]
pub struct ModalityBatchNorm {
    pub eo: BnSlot,
    pub ir: BnSlot,
}

impl ModalityBatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        Ok(ModalityBatchNorm {
            eo: BnSlot::new(store, &format!("{name}.eo"), channels)?,
            ir: BnSlot::new(store, &format!("{name}.ir"), channels)?,
        })
    }

    pub fn slot(&self, m: Modality) -> &BnSlot {
        match m {
            Modality::Eo => &self.eo,
            Modality::Ir => &self.ir,
        }
    }
}

/// conv -> BN -> ReLU.
pub(crate) fn conv_bn_relu(tape: &mut Tape, store: &ParamStore, conv: &Conv, bn: &BnSlot, x: Var, mode: Mode) -> Result<Var> {
    let y = conv.forward(tape, store, x)?;
    let y = bn.forward(tape, store, y, mode)?;
    tape.relu(y)
}

/// Bring a raw modality image to the encoder's input channel count
/// (single-channel IR is replicated).
pub(crate) fn to_encoder_input(img: &Tensor, channels: usize) -> Result<Tensor> {
    let s: Shape = img.shape();
    if s.c == channels {
        Ok(img.clone())
    } else if s.c == 1 {
        img.repeat_channels(channels)
    } else {
        Err(Error::shape("encoder input", format!("image {s} for a {channels}-channel encoder")))
    }
}
