//! Confusion matrices, IoU, the three inference modes and ablation tables.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{with_threads, Dataset, PairedSample};
use crate::error::{Error, Result};
use crate::graph::{Mode, Tape, Var};
use crate::labels::{LabelMap, IGNORE_INDEX};
use crate::layers::Modality;
use crate::network::{BaselineModel, CskNetModel, ForwardOptions};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub classes: usize,
    /// `counts[gt * classes + pred]`.
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds every pixel whose ground truth is not the ignore index.
    pub fn update(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.n, pred.h, pred.w) != (gt.n, gt.h, gt.w) {
            return Err(Error::shape(
                "confusion",
                format!("pred {}x{}x{} vs gt {}x{}x{}", pred.n, pred.h, pred.w, gt.n, gt.h, gt.w),
            ));
        }
        gt.validate(self.classes)?;
        for (&p, &g) in pred.data.iter().zip(&gt.data) {
            if g == IGNORE_INDEX {
                continue;
            }
            if usize::from(p) >= self.classes {
                return Err(Error::LabelOutOfRange { label: p, num_classes: self.classes });
            }
            self.counts[usize::from(g) * self.classes + usize::from(p)] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// `TP / (TP + FP + FN)` per class; `None` where the union is empty.
    pub fn iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let gt: u64 = (0..self.classes).map(|p| self.get(c, p)).sum();
                let pred: u64 = (0..self.classes).map(|g| self.get(g, c)).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Mean IoU over classes with a non-empty union (0 if there are none).
    pub fn miou(&self) -> f64 {
        let present: Vec<f64> = self.iou().into_iter().flatten().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Fused,
    Optical,
    IrOnly,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::Fused => "fused",
            EvalMode::Optical => "optical",
            EvalMode::IrOnly => "ir-only",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(EvalMode::Fused),
            "optical" => Ok(EvalMode::Optical),
            "ir-only" | "ir_only" => Ok(EvalMode::IrOnly),
            other => Err(Error::Config(format!("unknown eval mode {other:?} (expected fused, optical or ir-only)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mode: EvalMode,
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
    pub samples: usize,
    pub confusion: ConfusionMatrix,
}

impl EvalReport {
    pub fn from_confusion(mode: EvalMode, confusion: ConfusionMatrix, samples: usize) -> Self {
        EvalReport { mode, per_class: confusion.iou(), miou: confusion.miou(), samples, confusion }
    }

    /// Tab-separated `class iou` rows followed by the mean.
    pub fn to_tsv(&self) -> String {
        let mut s = format!("# mode\t{}\n# samples\t{}\nclass\tiou\n", self.mode, self.samples);
        for (c, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => s.push_str(&format!("{c}\t{v:.6}\n")),
                None => s.push_str(&format!("{c}\tabsent\n")),
            }
        }
        s.push_str(&format!("mean\t{:.6}\n", self.miou));
        s
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode {} over {} samples", self.mode, self.samples)?;
        for (c, iou) in self.per_class.iter().enumerate() {
            match iou {
                Some(v) => writeln!(f, "  class {c}: IoU {:6.2}%", 100.0 * v)?,
                None => writeln!(f, "  class {c}: absent")?,
            }
        }
        write!(f, "  mIoU {:.2}%", 100.0 * self.miou)
    }
}

/// Per-pixel argmax over channels (ties go to the lower class).
pub fn argmax_labels(logits: &Tensor) -> LabelMap {
    let s = logits.shape();
    let plane = s.plane();
    let mut data = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        for p in 0..plane {
            let mut best = 0;
            for c in 1..s.c {
                if logits.data()[(n * s.c + c) * plane + p] > logits.data()[(n * s.c + best) * plane + p] {
                    best = c;
                }
            }
            data.push(best as u8);
        }
    }
    LabelMap { n: s.n, h: s.h, w: s.w, data }
}

/// Any model that can label a sample in eval mode.
pub trait Segmenter: Sync {
    fn num_classes(&self) -> usize;
    fn predict(&self, sample: &PairedSample, mode: EvalMode) -> Result<LabelMap>;
}

fn logits_of(tape: &Tape, v: Var) -> LabelMap {
    argmax_labels(tape.value(v))
}

impl Segmenter for CskNetModel {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict(&self, sample: &PairedSample, mode: EvalMode) -> Result<LabelMap> {
        let mut tape = Tape::new();
        let v = match mode {
            EvalMode::IrOnly => self.forward_ir_only(&mut tape, sample.ir()?, Mode::Eval)?,
            EvalMode::Optical => {
                let opts = ForwardOptions { embeddings: false, ..ForwardOptions::default() };
                self.forward(&mut tape, sample.eo()?, sample.ir()?, Mode::Eval, opts)?.p_o
            }
            EvalMode::Fused => {
                let opts = ForwardOptions { embeddings: false, ..ForwardOptions::default() };
                self.forward(&mut tape, sample.eo()?, sample.ir()?, Mode::Eval, opts)?.p_f
            }
        };
        Ok(logits_of(&tape, v))
    }
}

/// A CSK-Net evaluated with non-default forward options (ablation variants).
pub struct Variant<'a> {
    pub model: &'a CskNetModel,
    pub options: ForwardOptions,
}

impl Segmenter for Variant<'_> {
    fn num_classes(&self) -> usize {
        self.model.config.num_classes
    }

    fn predict(&self, sample: &PairedSample, mode: EvalMode) -> Result<LabelMap> {
        if mode == EvalMode::IrOnly {
            return self.model.predict(sample, mode);
        }
        let mut tape = Tape::new();
        let opts = ForwardOptions { embeddings: false, ..self.options };
        let out = self.model.forward(&mut tape, sample.eo()?, sample.ir()?, Mode::Eval, opts)?;
        Ok(logits_of(&tape, if mode == EvalMode::Fused { out.p_f } else { out.p_o }))
    }
}

impl Segmenter for BaselineModel {
    fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    fn predict(&self, sample: &PairedSample, mode: EvalMode) -> Result<LabelMap> {
        let image = match (self.modality, mode) {
            (Modality::Eo, EvalMode::Optical) => sample.eo()?,
            (Modality::Ir, EvalMode::IrOnly) => sample.ir()?,
            (m, mode) => return Err(Error::Config(format!("a {m} baseline cannot be evaluated in {mode} mode"))),
        };
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, image, Mode::Eval)?;
        Ok(logits_of(&tape, out.logits))
    }
}

/// Scores a split. Samples are processed independently (eval-mode BN), in
/// parallel when `threads > 1`; counts are merged in sample order.
pub fn evaluate_model<S: Segmenter>(model: &S, data: &Dataset, mode: EvalMode, threads: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Invalid("cannot evaluate an empty split".into()));
    }
    let classes = model.num_classes();
    let per_sample: Vec<Result<ConfusionMatrix>> = with_threads(threads, || {
        data.samples
            .par_iter()
            .map(|s| {
                let pred = model.predict(s, mode)?;
                let mut cm = ConfusionMatrix::new(classes);
                cm.update(&pred, &s.label)?;
                Ok(cm)
            })
            .collect()
    })?;
    let mut total = ConfusionMatrix::new(classes);
    for cm in per_sample {
        total.merge(&cm?);
    }
    Ok(EvalReport::from_confusion(mode, total, data.len()))
}

/// The five configurations compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoContrastive,
    NoGsu,
    NoExchange,
    NoContrastiveNoExchange,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [
        AblationVariant::Full,
        AblationVariant::NoContrastive,
        AblationVariant::NoGsu,
        AblationVariant::NoExchange,
        AblationVariant::NoContrastiveNoExchange,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoContrastive => "w/o contrastive",
            AblationVariant::NoGsu => "w/o gated fusion",
            AblationVariant::NoExchange => "w/o feature exchange",
            AblationVariant::NoContrastiveNoExchange => "w/o contrastive + exchange",
        }
    }

    /// Published mIoU of the corresponding full-scale row, for reference only.
    pub fn paper_miou(&self) -> f64 {
        match self {
            AblationVariant::Full => 69.38,
            AblationVariant::NoContrastive => 68.01,
            AblationVariant::NoGsu => 68.90,
            AblationVariant::NoExchange => 68.54,
            AblationVariant::NoContrastiveNoExchange => 68.37,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: AblationVariant,
    pub seed: u64,
    pub miou: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

impl AblationTable {
    pub fn median(&self, variant: AblationVariant) -> f64 {
        let v: Vec<f64> = self.rows.iter().filter(|r| r.variant == variant).map(|r| r.miou).collect();
        median(&v)
    }

    /// One row per variant and seed, a median row per variant (each printed
    /// next to the full model's median), then the published reference values.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("variant\tseed\tmiou\n");
        for r in &self.rows {
            s.push_str(&format!("{}\t{}\t{:.6}\n", r.variant.label(), r.seed, r.miou));
        }
        let full = self.median(AblationVariant::Full);
        s.push_str("\nvariant\tmedian_miou\tfull_median_miou\tdelta\n");
        for v in AblationVariant::ALL {
            let m = self.median(v);
            s.push_str(&format!("{}\t{:.6}\t{:.6}\t{:+.6}\n", v.label(), m, full, m - full));
        }
        s.push_str("\n# published full-scale mIoU (reference only, not comparable at this scale)\n");
        for v in AblationVariant::ALL {
            s.push_str(&format!("# {}\t{:.2}\n", v.label(), v.paper_miou()));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_two_by_two() {
        let gt = LabelMap::new(1, 2, 2, vec![0, 0, 1, 1]).unwrap();
        let pred = LabelMap::new(1, 2, 2, vec![0, 1, 1, 1]).unwrap();
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&pred, &gt).unwrap();
        assert_eq!(cm.iou(), vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((cm.miou() - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn absent_classes_are_skipped_and_ignore_is_excluded() {
        let gt = LabelMap::new(1, 1, 3, vec![0, IGNORE_INDEX, 0]).unwrap();
        let pred = LabelMap::new(1, 1, 3, vec![0, 3, 0]).unwrap();
        let mut cm = ConfusionMatrix::new(4);
        cm.update(&pred, &gt).unwrap();
        assert_eq!(cm.total(), 2);
        assert_eq!(cm.iou(), vec![Some(1.0), None, None, None]);
        assert_eq!(cm.miou(), 1.0);
    }

    #[test]
    fn argmax_prefers_lower_class_on_ties() {
        let t = Tensor::new([1, 3, 1, 2], vec![1.0, 0.0, 1.0, 2.0, 0.5, 2.0]).unwrap();
        assert_eq!(argmax_labels(&t).data, vec![0, 1]);
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
