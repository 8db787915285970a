//! Training objectives: segmentation (CE + dice), prediction distillation,
//! feature distillation, pixel contrastive, and their joint sum.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ContrastiveTerm, Tape, Var};
use crate::labels::{LabelMap, IGNORE_INDEX};
use crate::network::CskOutputs;
use crate::tensor::{Shape, Tensor};

/// Smoothing added to the dice numerator and denominator.
pub const DICE_EPS: f64 = 1.0;

/// Tolerance on the per-pixel sum of teacher probabilities.
pub const PROB_TOLERANCE: f64 = 1e-4;

fn label_tensors(labels: &LabelMap, s: Shape) -> Result<(Tensor, Tensor, usize)> {
    if (labels.n, labels.h, labels.w) != (s.n, s.h, s.w) {
        return Err(Error::shape("seg_loss", format!("labels {}x{}x{} for logits {s}", labels.n, labels.h, labels.w)));
    }
    labels.validate(s.c)?;
    let mut onehot = Tensor::zeros(s);
    let mut valid = Tensor::zeros(s);
    let mut count = 0;
    for n in 0..s.n {
        for y in 0..s.h {
            for x in 0..s.w {
                let l = labels.at(n, y, x);
                if l == IGNORE_INDEX {
                    continue;
                }
                count += 1;
                onehot.set(n, usize::from(l), y, x, 1.0);
                for c in 0..s.c {
                    valid.set(n, c, y, x, 1.0);
                }
            }
        }
    }
    Ok((onehot, valid, count))
}

#[derive(Debug, Clone, Copy)]
pub struct SegLoss {
    pub total: Var,
    pub ce: Var,
    pub dice: Var,
}

/// Cross-entropy plus macro-averaged soft dice over the classes. Both terms
/// skip ignore-index pixels.
pub fn seg_loss(tape: &mut Tape, logits: Var, labels: &LabelMap) -> Result<SegLoss> {
    let s = tape.shape(logits);
    let (onehot, valid, count) = label_tensors(labels, s)?;
    if count == 0 {
        let zero = tape.scalar_mul(logits, 0.0)?;
        let zero = tape.sum(zero)?;
        return Ok(SegLoss { total: zero, ce: zero, dice: zero });
    }
    let y = tape.constant(onehot);
    let mask = tape.constant(valid);

    let log_p = tape.log_softmax_channel(logits)?;
    let picked = tape.mul(log_p, y)?;
    let picked = tape.sum(picked)?;
    let ce = tape.scalar_mul(picked, -1.0 / count as f64)?;

    let p = tape.softmax_channel(logits)?;
    let p_valid = tape.mul(p, mask)?;
    let p_sum = tape.sum_per_channel(p_valid)?;
    let inter = tape.mul(p, y)?;
    let inter = tape.sum_per_channel(inter)?;
    let y_sum = tape.sum_per_channel(y)?;
    let num = tape.scalar_mul(inter, 2.0)?;
    let num = tape.add_scalar(num, DICE_EPS)?;
    let den = tape.add(p_sum, y_sum)?;
    let den = tape.add_scalar(den, DICE_EPS)?;
    let ratio = tape.div(num, den)?;
    let ratio = tape.mean(ratio)?;
    let dice = tape.scalar_mul(ratio, -1.0)?;
    let dice = tape.add_scalar(dice, 1.0)?;

    let total = tape.add(ce, dice)?;
    Ok(SegLoss { total, ce, dice })
}

#[derive(Debug, Clone, Copy)]
pub struct DistillPredLoss {
    /// KL(p_teacher || p) + H(p_teacher, p), averaged over pixels.
    pub total: Var,
    pub kl: Var,
    pub ce: Var,
}

/// Prediction distillation against fixed teacher probabilities. Gradients
/// reach only the student logits.
pub fn distill_pred_loss(tape: &mut Tape, logits: Var, teacher_probs: &Tensor) -> Result<DistillPredLoss> {
    let s = tape.shape(logits);
    if teacher_probs.shape() != s {
        return Err(Error::shape("distill_pred_loss", format!("teacher {} vs student {s}", teacher_probs.shape())));
    }
    let plane = s.plane();
    let mut entropy_sum = 0.0;
    for n in 0..s.n {
        for p in 0..plane {
            let mut total = 0.0;
            for c in 0..s.c {
                let q = teacher_probs.data()[(n * s.c + c) * plane + p];
                if !(q >= 0.0) {
                    return Err(Error::Invalid(format!("teacher probability {q} is negative or NaN")));
                }
                total += q;
                if q > 0.0 {
                    entropy_sum += q * q.ln();
                }
            }
            if (total - 1.0).abs() > PROB_TOLERANCE {
                return Err(Error::Invalid(format!("teacher probabilities sum to {total} at pixel {p} of item {n}")));
            }
        }
    }
    let pixels = (s.n * plane) as f64;
    let q = tape.constant(teacher_probs.clone());
    let log_p = tape.log_softmax_channel(logits)?;
    let cross = tape.mul(log_p, q)?;
    let cross = tape.sum(cross)?;
    let ce = tape.scalar_mul(cross, -1.0 / pixels)?;
    let kl = tape.add_scalar(ce, entropy_sum / pixels)?;
    let total = tape.add(kl, ce)?;
    Ok(DistillPredLoss { total, kl, ce })
}

/// Sum over feature pairs of the mean squared difference.
pub fn distill_feat_loss(tape: &mut Tape, student: &[Var], teacher: &[&Tensor]) -> Result<Var> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(Error::shape(
            "distill_feat_loss",
            format!("{} student vs {} teacher features", student.len(), teacher.len()),
        ));
    }
    let mut total: Option<Var> = None;
    for (&f, t) in student.iter().zip(teacher) {
        if tape.shape(f) != t.shape() {
            return Err(Error::shape("distill_feat_loss", format!("student {} vs teacher {}", tape.shape(f), t.shape())));
        }
        let target = tape.constant((*t).clone());
        let diff = tape.sub(f, target)?;
        let sq = tape.mul(diff, diff)?;
        let term = tape.mean(sq)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.expect("non-empty"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositiveSelection {
    /// Keep the farthest `fraction` of positives (hard positives).
    KeepFarthest,
    /// Drop the farthest `fraction` of positives and keep the rest.
    DiscardFarthest,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveConfig {
    pub tau: f64,
    pub anchors_per_class: usize,
    pub semi_hard_fraction: f64,
    pub positives: PositiveSelection,
}

impl Default for ContrastiveConfig {
    fn default() -> Self {
        ContrastiveConfig {
            tau: 0.1,
            anchors_per_class: 64,
            semi_hard_fraction: 0.10,
            positives: PositiveSelection::KeepFarthest,
        }
    }
}

impl ContrastiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("contrastive tau must be > 0, got {}", self.tau)));
        }
        if !(self.semi_hard_fraction > 0.0 && self.semi_hard_fraction <= 1.0) {
            return Err(Error::Config(format!("semi_hard_fraction must be in (0, 1], got {}", self.semi_hard_fraction)));
        }
        if self.anchors_per_class == 0 {
            return Err(Error::Config("anchors_per_class must be positive".into()));
        }
        Ok(())
    }

    fn keep(&self, len: usize) -> usize {
        ((self.semi_hard_fraction * len as f64).ceil() as usize).clamp(1, len)
    }
}

/// Embeddings at the contrastive tap points with labels at each tap's resolution.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch<'a> {
    pub embeddings: Vec<Var>,
    pub labels: Vec<LabelMap>,
    pub config: &'a ContrastiveConfig,
}

impl<'a> ContrastiveBatch<'a> {
    /// Labels for each tap are majority-downsampled from the full-resolution map.
    pub fn new(tape: &Tape, embeddings: Vec<Var>, full_labels: &LabelMap, config: &'a ContrastiveConfig) -> Result<Self> {
        let labels = embeddings
            .iter()
            .map(|&e| full_labels.downsample_majority(full_labels.h / tape.shape(e).h.max(1)))
            .collect::<Result<_>>()?;
        Ok(ContrastiveBatch { embeddings, labels, config })
    }
}

/// Anchor / positive / negative selection for one tap.
///
/// Anchors: up to `anchors_per_class` pixels per class per image, drawn
/// uniformly. Positives and negatives come from every labelled pixel in the
/// batch; each anchor keeps its nearest `fraction` of negatives and (by
/// default) its farthest `fraction` of positives under cosine similarity.
/// Draws from `rng` in image order, then class order.
pub fn plan_contrastive<R: Rng>(
    embeddings: &Tensor,
    labels: &LabelMap,
    config: &ContrastiveConfig,
    rng: &mut R,
) -> Result<Vec<ContrastiveTerm>> {
    config.validate()?;
    let s = embeddings.shape();
    if (labels.n, labels.h, labels.w) != (s.n, s.h, s.w) {
        return Err(Error::shape("contrastive", format!("labels {}x{}x{} for embeddings {s}", labels.n, labels.h, labels.w)));
    }
    let (z, _) = crate::graph::l2_normalized(embeddings);
    let pool: Vec<usize> = (0..labels.pixels()).filter(|&i| labels.data[i] != IGNORE_INDEX).collect();
    let mut classes: Vec<u8> = pool.iter().map(|&i| labels.data[i]).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Ok(Vec::new());
    }
    let plane = s.plane();
    let mut anchors = Vec::new();
    for n in 0..s.n {
        for &c in &classes {
            let members: Vec<usize> = (n * plane..(n + 1) * plane).filter(|&i| labels.data[i] == c).collect();
            if members.is_empty() {
                continue;
            }
            let k = members.len().min(config.anchors_per_class);
            anchors.extend(index::sample(rng, members.len(), k).into_iter().map(|j| members[j]));
        }
    }
    let mut terms = Vec::with_capacity(anchors.len());
    for a in anchors {
        let class = labels.data[a];
        let mut pos: Vec<(f64, usize)> = Vec::new();
        let mut neg: Vec<(f64, usize)> = Vec::new();
        for &j in &pool {
            if j == a {
                continue;
            }
            let sim = crate::graph::pixel_dot(&z, a, j);
            if labels.data[j] == class {
                pos.push((sim, j));
            } else {
                neg.push((sim, j));
            }
        }
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        // nearest negatives first
        neg.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        neg.truncate(config.keep(neg.len()));
        // farthest positives first
        pos.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
        let k = config.keep(pos.len());
        let positives: Vec<usize> = match config.positives {
            PositiveSelection::KeepFarthest => pos[..k].iter().map(|p| p.1).collect(),
            PositiveSelection::DiscardFarthest if k < pos.len() => pos[k..].iter().map(|p| p.1).collect(),
            PositiveSelection::DiscardFarthest => pos.iter().map(|p| p.1).collect(),
        };
        terms.push(ContrastiveTerm { anchor: a, positives, negatives: neg.into_iter().map(|n| n.1).collect() });
    }
    Ok(terms)
}

/// Contrastive loss for already-planned anchors, one plan per embedding.
pub fn contrastive_from_plans(tape: &mut Tape, embeddings: &[Var], plans: &[Vec<ContrastiveTerm>], tau: f64) -> Result<Var> {
    let mut total: Option<Var> = None;
    for (&e, plan) in embeddings.iter().zip(plans) {
        if plan.is_empty() {
            continue;
        }
        let z = tape.l2_normalize_channels(e)?;
        let term = tape.contrastive(z, plan.clone(), tau)?;
        total = Some(match total {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }
    Ok(total.unwrap_or_else(|| tape.constant(Tensor::scalar(0.0))))
}

/// Plans every tap from the current embedding values, then builds the loss.
pub fn plan_batch<R: Rng>(tape: &Tape, batch: &ContrastiveBatch<'_>, rng: &mut R) -> Result<Vec<Vec<ContrastiveTerm>>> {
    batch.embeddings.iter().zip(&batch.labels).map(|(&e, l)| plan_contrastive(tape.value(e), l, batch.config, rng)).collect()
}

/// Pixel contrastive loss summed over the tap points.
pub fn pixel_contrastive_loss<R: Rng>(tape: &mut Tape, batch: &ContrastiveBatch<'_>, rng: &mut R) -> Result<Var> {
    let plans = plan_batch(tape, batch, rng)?;
    contrastive_from_plans(tape, &batch.embeddings, &plans, batch.config.tau)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub seg: f64,
    pub d1: f64,
    pub d2: f64,
    pub cl: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { seg: 1.0, d1: 1.0, d2: 1.0, cl: 1.0 }
    }
}

/// Frozen-teacher values the distillation terms compare against.
#[derive(Debug, Clone)]
pub struct TeacherTargets {
    pub probs: Tensor,
    pub f4: Tensor,
    pub f5: Tensor,
    pub fd: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub l_seg: f64,
    pub l_d1: f64,
    pub l_d1_kl: f64,
    pub l_d1_ce: f64,
    pub l_d2: f64,
    pub l_cl: f64,
    pub l_total: f64,
}

/// Where the contrastive anchors come from.
pub enum ContrastiveSource<'a, R: Rng> {
    Sample { config: &'a ContrastiveConfig, rng: &'a mut R },
    Plans { plans: &'a [Vec<ContrastiveTerm>], tau: f64 },
}

/// Weighted sum: seg loss on the fused and IR heads, prediction and feature
/// distillation into the optical branch, and pixel contrastive loss. Terms
/// with zero weight are not built at all.
pub fn joint_loss<R: Rng>(
    tape: &mut Tape,
    out: &CskOutputs,
    labels: &LabelMap,
    teacher: Option<&TeacherTargets>,
    weights: &LossWeights,
    contrastive: ContrastiveSource<'_, R>,
) -> Result<(Var, LossReport)> {
    let mut report = LossReport::default();
    let mut terms: Vec<Var> = Vec::new();
    let mut weighted = |tape: &mut Tape, v: Var, w: f64| -> Result<()> {
        terms.push(tape.scalar_mul(v, w)?);
        Ok(())
    };
    if weights.seg != 0.0 {
        let fused = seg_loss(tape, out.p_f, labels)?.total;
        let ir = seg_loss(tape, out.p_ir, labels)?.total;
        let seg = tape.add(fused, ir)?;
        report.l_seg = tape.value(seg).item()?;
        weighted(tape, seg, weights.seg)?;
    }
    if weights.d1 != 0.0 || weights.d2 != 0.0 {
        let t = teacher.ok_or_else(|| Error::Invalid("distillation terms need teacher targets".into()))?;
        if weights.d1 != 0.0 {
            let d1 = distill_pred_loss(tape, out.p_o, &t.probs)?;
            report.l_d1 = tape.value(d1.total).item()?;
            report.l_d1_kl = tape.value(d1.kl).item()?;
            report.l_d1_ce = tape.value(d1.ce).item()?;
            weighted(tape, d1.total, weights.d1)?;
        }
        if weights.d2 != 0.0 {
            let student = [out.eo_stages[3], out.eo_stages[4], out.f_o];
            let d2 = distill_feat_loss(tape, &student, &[&t.f4, &t.f5, &t.fd])?;
            report.l_d2 = tape.value(d2).item()?;
            weighted(tape, d2, weights.d2)?;
        }
    }
    if weights.cl != 0.0 && !out.embeddings.is_empty() {
        let embeddings: Vec<Var> = out.embeddings.iter().map(|e| e.var).collect();
        let cl = match contrastive {
            ContrastiveSource::Sample { config, rng } => {
                let batch = ContrastiveBatch::new(tape, embeddings, labels, config)?;
                pixel_contrastive_loss(tape, &batch, rng)?
            }
            ContrastiveSource::Plans { plans, tau } => contrastive_from_plans(tape, &embeddings, plans, tau)?,
        };
        report.l_cl = tape.value(cl).item()?;
        weighted(tape, cl, weights.cl)?;
    }
    let mut total = match terms.first() {
        Some(&t) => t,
        None => return Err(Error::Config("all loss weights are zero".into())),
    };
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    report.l_total = tape.value(total).item()?;
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const LN4: f64 = 1.386_294_361_119_890_6;

    #[test]
    fn uniform_logits_give_ln_c_cross_entropy() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros([2, 4, 3, 3]));
        let labels = LabelMap::new(2, 3, 3, (0..18).map(|i| (i % 4) as u8).collect()).unwrap();
        let l = seg_loss(&mut t, logits, &labels).unwrap();
        assert!((t.value(l.ce).item().unwrap() - LN4).abs() < 1e-12);
    }

    #[test]
    fn peaked_logits_drive_seg_loss_to_zero() {
        let labels = LabelMap::new(1, 2, 2, vec![0, 1, 2, 3]).unwrap();
        let mut logits = Tensor::zeros([1, 4, 2, 2]);
        for (i, &l) in labels.data.iter().enumerate() {
            logits.set(0, usize::from(l), i / 2, i % 2, 60.0);
        }
        let mut t = Tape::new();
        let v = t.constant(logits);
        let l = seg_loss(&mut t, v, &labels).unwrap();
        assert!(t.value(l.ce).item().unwrap() < 1e-20);
        assert!(t.value(l.total).item().unwrap() < 1e-12);
    }

    #[test]
    fn ignore_pixels_do_not_count() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros([1, 4, 1, 2]));
        let labels = LabelMap::new(1, 1, 2, vec![1, IGNORE_INDEX]).unwrap();
        let l = seg_loss(&mut t, logits, &labels).unwrap();
        assert!((t.value(l.ce).item().unwrap() - LN4).abs() < 1e-12);
        let bad = LabelMap::new(1, 1, 2, vec![1, 4]).unwrap();
        assert!(matches!(seg_loss(&mut t, logits, &bad), Err(Error::LabelOutOfRange { label: 4, .. })));
    }

    #[test]
    fn one_hot_teacher_and_uniform_student() {
        let mut teacher = Tensor::zeros([1, 4, 1, 2]);
        teacher.set(0, 2, 0, 0, 1.0);
        teacher.set(0, 0, 0, 1, 1.0);
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros([1, 4, 1, 2]));
        let d = distill_pred_loss(&mut t, logits, &teacher).unwrap();
        assert!((t.value(d.total).item().unwrap() - 2.0 * LN4).abs() < 1e-12);
        assert!((t.value(d.ce).item().unwrap() - LN4).abs() < 1e-12);
    }

    #[test]
    fn unnormalized_teacher_is_rejected() {
        let mut t = Tape::new();
        let logits = t.constant(Tensor::zeros([1, 2, 1, 1]));
        let teacher = Tensor::new([1, 2, 1, 1], vec![0.5, 0.6]).unwrap();
        assert!(distill_pred_loss(&mut t, logits, &teacher).is_err());
    }

    #[test]
    fn feature_distillation_closed_form() {
        let mut t = Tape::new();
        let ones = Tensor::ones([2, 3, 2, 2]);
        let zeros = Tensor::zeros([2, 3, 2, 2]);
        let f: Vec<Var> = (0..3).map(|_| t.constant(ones.clone())).collect();
        let l = distill_feat_loss(&mut t, &f, &[&zeros, &zeros, &zeros]).unwrap();
        assert_eq!(t.value(l).item().unwrap(), 3.0);
        let same = distill_feat_loss(&mut t, &f, &[&ones, &ones, &ones]).unwrap();
        assert_eq!(t.value(same).item().unwrap(), 0.0);
    }

    fn two_class_embeddings() -> (Tensor, LabelMap) {
        // pixels A A B B with e_A = (1, 0) and e_B = (0, 1)
        let t = Tensor::new([1, 2, 1, 4], vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0]).unwrap();
        (t, LabelMap::new(1, 1, 4, vec![0, 0, 1, 1]).unwrap())
    }

    #[test]
    fn contrastive_closed_form() {
        let (e, labels) = two_class_embeddings();
        let cfg = ContrastiveConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut t = Tape::new();
        let v = t.constant(e);
        let batch = ContrastiveBatch { embeddings: vec![v], labels: vec![labels], config: &cfg };
        let plans = plan_batch(&t, &batch, &mut rng).unwrap();
        let n_neg = plans[0][0].negatives.len();
        assert_eq!(n_neg, 1); // ceil(0.1 * 2)
        let l = contrastive_from_plans(&mut t, &[v], &plans, cfg.tau).unwrap();
        // unit embeddings normalize to 1/sqrt(1 + eps^2), so self-similarity is slightly below 1
        let sim = 1.0 / (1.0 + crate::graph::NORM_EPS_SQ) / cfg.tau;
        let expected = -(sim.exp() / (sim.exp() + n_neg as f64)).ln();
        assert!((t.value(l).item().unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn single_class_contrastive_is_zero() {
        let (e, _) = two_class_embeddings();
        let labels = LabelMap::filled(1, 1, 4, 2);
        let cfg = ContrastiveConfig::default();
        let mut t = Tape::new();
        let v = t.constant(e);
        let batch = ContrastiveBatch { embeddings: vec![v], labels: vec![labels], config: &cfg };
        let l = pixel_contrastive_loss(&mut t, &batch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(t.value(l).item().unwrap(), 0.0);
    }

    #[test]
    fn non_positive_tau_is_an_error() {
        let cfg = ContrastiveConfig { tau: 0.0, ..ContrastiveConfig::default() };
        let (e, labels) = two_class_embeddings();
        assert!(plan_contrastive(&e, &labels, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }
}
