//! Gated Spectral Unit: gated fusion of the IR and optical decoder features.
//!
//! Three tanh candidates (IR, optical, their sum) are blended by three sigmoid
//! gates, each computed from the concatenation `[F_I, F_O, F_I + F_O]`:
//!
//! ```text
//! h1 = tanh(W1 * F_I)   h2 = tanh(W2 * F_O)   h3 = tanh(W3 * (F_I + F_O))
//! Zk = sigmoid(Wzk * [F_I, F_O, F_I + F_O])
//! F_fuse = Z1*h1 + Z2*h2 + Z3*h3
//! ```

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::layers::Conv;
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct GatedSpectralUnit {
    /// 3x3 candidate convs W1..W3.
    pub candidates: [Conv; 3],
    /// 1x1 gate convs Wz1..Wz3 over the 3c-channel concatenation.
    pub gates: [Conv; 3],
    pub channels: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GsuOutput {
    pub fuse: Var,
    pub gates: [Var; 3],
    pub candidates: [Var; 3],
}

impl GatedSpectralUnit {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, channels: usize) -> Result<Self> {
        let c = channels;
        let cand =
            |i: usize, rng: &mut R, store: &mut ParamStore| Conv::new(store, rng, &format!("{name}.cand{i}"), c, c, 3, 1, true);
        let candidates = [cand(1, rng, store)?, cand(2, rng, store)?, cand(3, rng, store)?];
        let gate = |i: usize, rng: &mut R, store: &mut ParamStore| {
            Conv::new(store, rng, &format!("{name}.gate{i}"), 3 * c, c, 1, 1, true)
        };
        let gates = [gate(1, rng, store)?, gate(2, rng, store)?, gate(3, rng, store)?];
        Ok(GatedSpectralUnit { candidates, gates, channels })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.candidates.iter().chain(&self.gates).flat_map(Conv::params).collect()
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f_ir: Var, f_eo: Var) -> Result<GsuOutput> {
        self.forward_with_gates(tape, store, f_ir, f_eo, None)
    }

    /// Forward pass; `gate_override` replaces the three gate activations with
    /// fixed values (inspection harness).
    pub fn forward_with_gates(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        f_ir: Var,
        f_eo: Var,
        gate_override: Option<&[Tensor; 3]>,
    ) -> Result<GsuOutput> {
        let (si, so) = (tape.shape(f_ir), tape.shape(f_eo));
        if si != so {
            return Err(Error::shape("gsu", format!("F_I {si} vs F_O {so}")));
        }
        if si.c != self.channels {
            return Err(Error::shape("gsu", format!("features have {} channels, unit expects {}", si.c, self.channels)));
        }
        let sum = tape.add(f_ir, f_eo)?;
        let inputs = [f_ir, f_eo, sum];
        let mut candidates = [sum; 3];
        for (k, (conv, x)) in self.candidates.iter().zip(inputs).enumerate() {
            let pre = conv.forward(tape, store, x)?;
            candidates[k] = tape.tanh(pre)?;
        }
        let mut gates = [sum; 3];
        match gate_override {
            Some(fixed) => {
                for (k, z) in fixed.iter().enumerate() {
                    if z.shape() != si {
                        return Err(Error::shape("gsu", format!("gate override {} for {si}", z.shape())));
                    }
                    gates[k] = tape.constant(z.clone());
                }
            }
            None => {
                let cat = tape.concat_channels(&inputs)?;
                for (k, conv) in self.gates.iter().enumerate() {
                    let pre = conv.forward(tape, store, cat)?;
                    gates[k] = tape.sigmoid(pre)?;
                }
            }
        }
        let mut fuse = None;
        for (z, h) in gates.iter().zip(&candidates) {
            let term = tape.mul(*z, *h)?;
            fuse = Some(match fuse {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        Ok(GsuOutput { fuse: fuse.expect("three terms"), gates, candidates })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn unit(c: usize, seed: u64) -> (ParamStore, GatedSpectralUnit) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gsu = GatedSpectralUnit::new(&mut store, &mut rng, "gsu", c).unwrap();
        (store, gsu)
    }

    #[test]
    fn zero_inputs_give_zero_fusion() {
        let (store, gsu) = unit(3, 0);
        let mut t = Tape::new();
        let z = t.constant(Tensor::zeros([2, 3, 4, 4]));
        let out = gsu.forward(&mut t, &store, z, z).unwrap();
        assert!(t.value(out.fuse).data().iter().all(|&v| v == 0.0));
        for g in out.gates {
            assert!(t.value(g).data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn ranges_hold_on_large_inputs() {
        let (store, gsu) = unit(4, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new();
        let a = t.constant(Tensor::uniform([2, 4, 5, 5], -50.0, 50.0, &mut rng));
        let b = t.constant(Tensor::uniform([2, 4, 5, 5], -50.0, 50.0, &mut rng));
        let out = gsu.forward(&mut t, &store, a, b).unwrap();
        for g in out.gates {
            assert!(t.value(g).data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        for h in out.candidates {
            assert!(t.value(h).data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
        }
        assert!(t.value(out.fuse).data().iter().all(|v| v.abs() <= 3.0));
    }

    #[test]
    fn forced_gates_select_first_candidate() {
        let (store, gsu) = unit(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut t = Tape::new();
        let shape = [1, 2, 3, 3];
        let a = t.constant(Tensor::uniform(shape, -1.0, 1.0, &mut rng));
        let b = t.constant(Tensor::uniform(shape, -1.0, 1.0, &mut rng));
        let forced = [Tensor::ones(shape), Tensor::zeros(shape), Tensor::zeros(shape)];
        let out = gsu.forward_with_gates(&mut t, &store, a, b, Some(&forced)).unwrap();
        assert_eq!(t.value(out.fuse), t.value(out.candidates[0]));
    }

    #[test]
    fn unit_is_not_symmetric() {
        let (store, gsu) = unit(3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut t = Tape::new();
        let a = t.constant(Tensor::uniform([1, 3, 4, 4], -1.0, 1.0, &mut rng));
        let b = t.constant(Tensor::uniform([1, 3, 4, 4], -1.0, 1.0, &mut rng));
        let ab = gsu.forward(&mut t, &store, a, b).unwrap().fuse;
        let ba = gsu.forward(&mut t, &store, b, a).unwrap().fuse;
        assert!(t.value(ab).max_abs_diff(t.value(ba)) > 1e-6);
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let (store, gsu) = unit(3, 0);
        let mut t = Tape::new();
        let a = t.constant(Tensor::zeros([1, 3, 4, 4]));
        let b = t.constant(Tensor::zeros([1, 3, 4, 2]));
        assert!(gsu.forward(&mut t, &store, a, b).is_err());
    }
}
