//! Mixed feature exchange between the optical and infrared encoder branches.
//!
//! Channel exchange replaces a branch's channels whose batch-norm scale is
//! below a threshold with the partner branch's channels. Spatial exchange swaps
//! every odd width column between the branches. Both are pure routing: every
//! output element is an input element of one branch at the same position.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::Shape;

pub const STAGES: std::ops::RangeInclusive<usize> = 1..=5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExchangeConfig {
    /// A channel is exchanged when its |gamma| is strictly below this.
    pub channel_threshold: f64,
    pub channel_stages: BTreeSet<usize>,
    pub spatial_stages: BTreeSet<usize>,
}

impl Default for ExchangeConfig {
    fn default() -> Self {
        ExchangeConfig { channel_threshold: 1e-2, channel_stages: STAGES.collect(), spatial_stages: [4, 5].into_iter().collect() }
    }
}

impl ExchangeConfig {
    pub fn disabled() -> Self {
        ExchangeConfig { channel_threshold: 0.0, channel_stages: BTreeSet::new(), spatial_stages: BTreeSet::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.channel_threshold >= 0.0) {
            return Err(Error::Config(format!("channel_threshold must be >= 0, got {}", self.channel_threshold)));
        }
        if let Some(s) = self.channel_stages.iter().chain(&self.spatial_stages).find(|s| !STAGES.contains(s)) {
            return Err(Error::Config(format!("exchange stage {s} outside 1..=5")));
        }
        Ok(())
    }
}

/// Binary mask over (n, c, h, w): 1 (exchange) at odd width indices, 0 at even ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExchangeMask {
    shape: Shape,
    bits: Vec<bool>,
}

impl ExchangeMask {
    pub fn spatial(shape: Shape) -> Self {
        let bits = (0..shape.numel()).map(|i| (i % shape.w) % 2 == 1).collect();
        ExchangeMask { shape, bits }
    }

    /// Whole channels selected by `pick[c]`.
    pub fn channels(shape: Shape, pick: &[bool]) -> Self {
        let bits = (0..shape.numel()).map(|i| pick[(i / shape.plane()) % shape.c]).collect();
        ExchangeMask { shape, bits }
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> bool {
        self.bits[self.shape.index(n, c, h, w)]
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn into_bits(self) -> Vec<bool> {
        self.bits
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<Shape> {
    let (sa, sb) = (tape.shape(a), tape.shape(b));
    if sa != sb {
        return Err(Error::shape(op, format!("branch features {sa} vs {sb}")));
    }
    Ok(sa)
}

/// Swaps the two branches at every odd width index.
pub fn spatial_exchange(tape: &mut Tape, a: Var, b: Var) -> Result<(Var, Var)> {
    let s = same_shape(tape, "spatial_exchange", a, b)?;
    let mask = ExchangeMask::spatial(s).into_bits();
    let a2 = tape.select(a, b, mask.clone())?;
    let b2 = tape.select(b, a, mask)?;
    Ok((a2, b2))
}

/// Channels with |gamma| below `threshold` take the partner's channel. Each
/// direction is decided by that branch's own gamma.
pub fn channel_exchange(tape: &mut Tape, a: Var, b: Var, gamma_a: &[f64], gamma_b: &[f64], threshold: f64) -> Result<(Var, Var)> {
    let s = same_shape(tape, "channel_exchange", a, b)?;
    if gamma_a.len() != s.c || gamma_b.len() != s.c {
        return Err(Error::shape(
            "channel_exchange",
            format!("gamma lengths {} and {} for {} channels", gamma_a.len(), gamma_b.len(), s.c),
        ));
    }
    let pick = |g: &[f64]| g.iter().map(|g| g.abs() < threshold).collect::<Vec<_>>();
    let (pa, pb) = (pick(gamma_a), pick(gamma_b));
    let a2 = if pa.contains(&true) { tape.select(a, b, ExchangeMask::channels(s, &pa).into_bits())? } else { a };
    let b2 = if pb.contains(&true) { tape.select(b, a, ExchangeMask::channels(s, &pb).into_bits())? } else { b };
    Ok((a2, b2))
}

/// Channel exchange (if enabled for `stage`) followed by spatial exchange (if enabled).
#[allow(clippy::too_many_arguments)]
pub fn mixed_exchange(
    tape: &mut Tape,
    stage: usize,
    a: Var,
    b: Var,
    gamma_a: &[f64],
    gamma_b: &[f64],
    config: &ExchangeConfig,
) -> Result<(Var, Var)> {
    if !STAGES.contains(&stage) {
        return Err(Error::Invalid(format!("exchange stage {stage} outside 1..=5")));
    }
    let (mut a, mut b) = (a, b);
    if config.channel_stages.contains(&stage) {
        (a, b) = channel_exchange(tape, a, b, gamma_a, gamma_b, config.channel_threshold)?;
    }
    if config.spatial_stages.contains(&stage) {
        (a, b) = spatial_exchange(tape, a, b)?;
    }
    Ok((a, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::ParamStore;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pair(tape: &mut Tape, a: Vec<f64>, b: Vec<f64>, shape: [usize; 4]) -> (Var, Var) {
        (tape.constant(Tensor::new(shape, a).unwrap()), tape.constant(Tensor::new(shape, b).unwrap()))
    }

    #[test]
    fn spatial_swaps_odd_columns() {
        let mut t = Tape::new();
        let (a, b) = pair(&mut t, vec![0.0, 1.0, 2.0, 3.0], vec![10.0, 11.0, 12.0, 13.0], [1, 1, 1, 4]);
        let (a2, b2) = spatial_exchange(&mut t, a, b).unwrap();
        assert_eq!(t.value(a2).data(), &[0.0, 11.0, 2.0, 13.0]);
        assert_eq!(t.value(b2).data(), &[10.0, 1.0, 12.0, 3.0]);
    }

    #[test]
    fn mask_follows_width_parity_only() {
        let m = ExchangeMask::spatial(Shape::new(2, 3, 4, 5));
        for n in 0..2 {
            for c in 0..3 {
                for h in 0..4 {
                    for w in 0..5 {
                        assert_eq!(m.at(n, c, h, w), w % 2 == 1);
                    }
                }
            }
        }
    }

    #[test]
    fn spatial_exchange_of_equal_branches_is_identity() {
        let mut t = Tape::new();
        let v = vec![1.0, -2.0, 3.5, 4.0, 0.25, 7.0];
        let (a, b) = pair(&mut t, v.clone(), v.clone(), [1, 1, 2, 3]);
        let (a2, b2) = spatial_exchange(&mut t, a, b).unwrap();
        assert_eq!(t.value(a2).data(), v.as_slice());
        assert_eq!(t.value(b2).data(), v.as_slice());
    }

    #[test]
    fn zero_threshold_never_exchanges() {
        let mut t = Tape::new();
        let (a, b) = pair(&mut t, vec![1.0, 2.0], vec![3.0, 4.0], [1, 2, 1, 1]);
        let (a2, b2) = channel_exchange(&mut t, a, b, &[0.0, 0.0], &[0.0, 0.0], 0.0).unwrap();
        assert_eq!(t.value(a2).data(), &[1.0, 2.0]);
        assert_eq!(t.value(b2).data(), &[3.0, 4.0]);
    }

    #[test]
    fn small_gamma_channel_is_taken_from_partner() {
        let mut t = Tape::new();
        let (a, b) = pair(&mut t, vec![1.0, 2.0], vec![3.0, 4.0], [1, 2, 1, 1]);
        let (a2, b2) = channel_exchange(&mut t, a, b, &[0.0, 1.0], &[1.0, 1.0], 0.5).unwrap();
        assert_eq!(t.value(a2).data(), &[3.0, 2.0]);
        // directional: b keeps its own channels because its gammas are large
        assert_eq!(t.value(b2).data(), &[3.0, 4.0]);
    }

    #[test]
    fn gamma_length_mismatch_is_an_error() {
        let mut t = Tape::new();
        let (a, b) = pair(&mut t, vec![1.0, 2.0], vec![3.0, 4.0], [1, 2, 1, 1]);
        assert!(channel_exchange(&mut t, a, b, &[0.0], &[1.0, 1.0], 0.5).is_err());
    }

    #[test]
    fn mixed_exchange_per_stage() {
        let cfg = ExchangeConfig { channel_threshold: 0.5, ..ExchangeConfig::default() };
        let a_vals = vec![1.0, 2.0, 3.0, 4.0];
        let b_vals = vec![5.0, 6.0, 7.0, 8.0];
        let ga = [0.1, 1.0];
        let gb = [1.0, 1.0];
        let mut t = Tape::new();
        let (a, b) = pair(&mut t, a_vals.clone(), b_vals.clone(), [1, 2, 1, 2]);
        // stage 1: channel exchange only
        let (a1, _) = mixed_exchange(&mut t, 1, a, b, &ga, &gb, &cfg).unwrap();
        assert_eq!(t.value(a1).data(), &[5.0, 6.0, 3.0, 4.0]);
        // stage 5: channel then spatial
        let (a5, b5) = mixed_exchange(&mut t, 5, a, b, &ga, &gb, &cfg).unwrap();
        assert_eq!(t.value(a5).data(), &[5.0, 6.0, 3.0, 8.0]);
        assert_eq!(t.value(b5).data(), &[5.0, 6.0, 7.0, 4.0]);
        // empty config: identity
        let (ae, be) = mixed_exchange(&mut t, 5, a, b, &ga, &gb, &ExchangeConfig::disabled()).unwrap();
        assert_eq!((ae, be), (a, b));
        assert!(mixed_exchange(&mut t, 6, a, b, &ga, &gb, &cfg).is_err());
        assert!(mixed_exchange(&mut t, 0, a, b, &ga, &gb, &cfg).is_err());
    }

    #[test]
    fn gradient_only_crosses_at_exchanged_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut t = Tape::new();
        let a = t.constant(Tensor::uniform([1, 2, 2, 4], -1.0, 1.0, &mut rng));
        let b = t.constant(Tensor::uniform([1, 2, 2, 4], -1.0, 1.0, &mut rng));
        let (_, b2) = spatial_exchange(&mut t, a, b).unwrap();
        let loss = t.sum(b2).unwrap();
        let g = t.backward(loss, &mut ParamStore::new()).unwrap();
        let ga = g.get(a).unwrap();
        let gb = g.get(b).unwrap();
        let mask = ExchangeMask::spatial(Shape::new(1, 2, 2, 4));
        for (i, &m) in mask.bits().iter().enumerate() {
            assert_eq!(ga.data()[i], if m { 1.0 } else { 0.0 });
            assert_eq!(gb.data()[i], if m { 0.0 } else { 1.0 });
        }
    }
}
