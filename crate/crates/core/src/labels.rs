//! Integer class maps.

use crate::error::{Error, Result};

/// Pixels with this label are excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// Per-pixel class labels for a batch, laid out n x h x w.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<u8>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != n * h * w {
            return Err(Error::shape("labels", format!("{} labels for {n}x{h}x{w}", data.len())));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn filled(n: usize, h: usize, w: usize, label: u8) -> Self {
        LabelMap { n, h, w, data: vec![label; n * h * w] }
    }

    pub fn at(&self, n: usize, y: usize, x: usize) -> u8 {
        self.data[(n * self.h + y) * self.w + x]
    }

    pub fn pixels(&self) -> usize {
        self.data.len()
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self.data.iter().find(|&&l| l != IGNORE_INDEX && usize::from(l) >= num_classes) {
            Some(&label) => Err(Error::LabelOutOfRange { label, num_classes }),
            None => Ok(()),
        }
    }

    pub fn stack(items: &[&LabelMap]) -> Result<LabelMap> {
        let first = items.first().ok_or_else(|| Error::shape("labels", "empty stack"))?;
        let mut data = Vec::new();
        let mut n = 0;
        for l in items {
            if (l.h, l.w) != (first.h, first.w) {
                return Err(Error::shape("labels", format!("{}x{} vs {}x{}", l.h, l.w, first.h, first.w)));
            }
            n += l.n;
            data.extend_from_slice(&l.data);
        }
        Ok(LabelMap { n, h: first.h, w: first.w, data })
    }

    /// Majority label of each `factor x factor` block, ignoring ignore-index
    /// pixels; ties go to the smaller class. All-ignored blocks stay ignored.
    pub fn downsample_majority(&self, factor: usize) -> Result<LabelMap> {
        if factor == 0 || !self.h.is_multiple_of(factor) || !self.w.is_multiple_of(factor) {
            return Err(Error::shape("labels", format!("cannot downsample {}x{} by {factor}", self.h, self.w)));
        }
        let (h, w) = (self.h / factor, self.w / factor);
        let mut data = Vec::with_capacity(self.n * h * w);
        let mut counts = [0u32; 256];
        for n in 0..self.n {
            for by in 0..h {
                for bx in 0..w {
                    counts.fill(0);
                    for y in by * factor..(by + 1) * factor {
                        for x in bx * factor..(bx + 1) * factor {
                            counts[usize::from(self.at(n, y, x))] += 1;
                        }
                    }
                    counts[usize::from(IGNORE_INDEX)] = 0;
                    let best = (0..256).max_by(|&a, &b| counts[a].cmp(&counts[b]).then(b.cmp(&a))).unwrap_or(0);
                    data.push(if counts[best] == 0 { IGNORE_INDEX } else { best as u8 });
                }
            }
        }
        Ok(LabelMap { n: self.n, h, w, data })
    }

    /// Width-reversed copy.
    pub fn flipped(&self) -> LabelMap {
        let mut data = self.data.clone();
        for row in data.chunks_mut(self.w) {
            row.reverse();
        }
        LabelMap { data, ..*self }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_downsample() {
        let l = LabelMap::new(1, 2, 4, vec![1, 1, 2, 255, 1, 0, 2, 3]).unwrap();
        let d = l.downsample_majority(2).unwrap();
        assert_eq!(d.data, vec![1, 2]);
        let ignored = LabelMap::filled(1, 2, 2, IGNORE_INDEX).downsample_majority(2).unwrap();
        assert_eq!(ignored.data, vec![IGNORE_INDEX]);
        // tie between 0 and 3 goes to 0
        let tie = LabelMap::new(1, 1, 2, vec![3, 0]).unwrap();
        assert!(tie.downsample_majority(2).is_err());
        let tie = LabelMap::new(1, 2, 2, vec![3, 0, 3, 0]).unwrap();
        assert_eq!(tie.downsample_majority(2).unwrap().data, vec![0]);
    }

    #[test]
    fn validate_range() {
        let l = LabelMap::new(1, 1, 3, vec![0, 3, IGNORE_INDEX]).unwrap();
        assert!(l.validate(4).is_ok());
        assert!(matches!(l.validate(3), Err(Error::LabelOutOfRange { label: 3, num_classes: 3 })));
    }
}
