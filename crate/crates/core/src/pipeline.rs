//! Two-stage training: a single-modality baseline (stage 1), then CSK-Net
//! distilled from the frozen optical baseline (stage 2), plus the ablation
//! harness built on both.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, ModelKind, RngState};
use crate::data::{Dataset, PairedSample};
use crate::error::{Error, Result};
use crate::evaluate::{evaluate_model, AblationRow, AblationTable, AblationVariant, EvalMode, Variant};
use crate::graph::{Mode, Tape, Var};
use crate::labels::LabelMap;
use crate::layers::{Modality, BN_MOMENTUM};
use crate::losses::{joint_loss, seg_loss, ContrastiveConfig, ContrastiveSource, LossReport, LossWeights, TeacherTargets};
use crate::network::{build_baseline, build_csknet, BaselineModel, CskNetModel, ForwardOptions, Fusion, ModelConfig};
use crate::optim::{draw_flip, hflip, poly_lr, sgd_step, OptimizerState, POLY_POWER};
use crate::param::ParamStore;
use crate::tensor::Tensor;

pub const METRICS_FILE: &str = "metrics.tsv";
pub const METRICS_HEADER: &str = "epoch\tlr\tl_seg\tl_d1\tl_d2\tl_cl\tl_total\ttrain_miou";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub poly_power: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub weights: LossWeights,
    pub contrastive: ContrastiveConfig,
    /// Feature exchange in the stage-2 forward pass.
    pub exchange: bool,
    pub fusion: Fusion,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 8,
            base_lr: 5e-3,
            momentum: 0.9,
            poly_power: POLY_POWER,
            weight_decay: 0.0,
            seed: 0,
            weights: LossWeights::default(),
            contrastive: ContrastiveConfig::default(),
            exchange: true,
            fusion: Fusion::Gsu,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config(format!("batch_size must be at least 2 for batch statistics, got {}", self.batch_size)));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be > 0, got {}", self.base_lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) || !(self.poly_power > 0.0) {
            return Err(Error::Config("need 0 <= momentum < 1, weight_decay >= 0 and poly_power > 0".into()));
        }
        self.contrastive.validate()
    }

    /// Learning rate used throughout epoch `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> Result<f64> {
        poly_lr(epoch, self.epochs, self.base_lr, self.poly_power)
    }

    fn forward_options(&self) -> ForwardOptions {
        ForwardOptions { exchange: self.exchange, fusion: self.fusion, embeddings: self.weights.cl != 0.0 }
    }
}

/// One metrics-log record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's batches.
    pub loss: LossReport,
    pub train_miou: f64,
}

impl EpochRecord {
    pub fn tsv(&self) -> String {
        let l = &self.loss;
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.epoch, self.lr, l.l_seg, l.l_d1, l.l_d2, l.l_cl, l.l_total, self.train_miou
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = || Error::Invalid(format!("malformed metrics line {line:?}"));
        if f.len() != 8 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        Ok(EpochRecord {
            epoch: f[0].parse().map_err(|_| bad())?,
            lr: num(1)?,
            loss: LossReport {
                l_seg: num(2)?,
                l_d1: num(3)?,
                l_d2: num(4)?,
                l_cl: num(5)?,
                l_total: num(6)?,
                ..LossReport::default()
            },
            train_miou: num(7)?,
        })
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().skip(1).filter(|l| !l.is_empty()).map(EpochRecord::parse).collect()
}

/// Where a run writes its log and checkpoints. `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
    /// Effective configuration, stored in every checkpoint.
    pub run_config: String,
}

impl RunOutput {
    pub fn to_dir(dir: impl Into<PathBuf>, run_config: impl Into<String>) -> Self {
        RunOutput { dir: Some(dir.into()), run_config: run_config.into() }
    }
}

/// Everything needed to continue training after epoch `epoch`.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub best_miou: f64,
    pub optimizer: OptimizerState,
    pub rng: ChaCha8Rng,
}

impl TrainState {
    pub fn fresh(store: &ParamStore, seed: u64) -> Self {
        TrainState {
            epoch: 0,
            best_miou: f64::NEG_INFINITY,
            optimizer: OptimizerState::new(store),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint, store: &ParamStore) -> Result<Self> {
        let optimizer = ck
            .restore_optimizer(store)?
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state; cannot resume".into()))?;
        let rng =
            ck.rng.as_ref().ok_or_else(|| Error::Checkpoint("checkpoint has no RNG state; cannot resume".into()))?.restore();
        Ok(TrainState { epoch: ck.epoch, best_miou: ck.best_miou, optimizer, rng })
    }
}

/// A paired mini-batch, already augmented.
pub struct Batch {
    pub eo: Option<Tensor>,
    pub ir: Option<Tensor>,
    pub labels: LabelMap,
}

impl Batch {
    fn assemble(samples: &[PairedSample]) -> Result<Self> {
        let stack = |pick: fn(&PairedSample) -> Option<&Tensor>| -> Result<Option<Tensor>> {
            let items: Option<Vec<&Tensor>> = samples.iter().map(pick).collect();
            items.map(|v| Tensor::stack(&v)).transpose()
        };
        let labels: Vec<&LabelMap> = samples.iter().map(|s| &s.label).collect();
        Ok(Batch { eo: stack(|s| s.eo.as_ref())?, ir: stack(|s| s.ir.as_ref())?, labels: LabelMap::stack(&labels)? })
    }

    fn eo(&self) -> Result<&Tensor> {
        self.eo.as_ref().ok_or_else(|| Error::Invalid("this stage needs EO images".into()))
    }

    fn ir(&self) -> Result<&Tensor> {
        self.ir.as_ref().ok_or_else(|| Error::Invalid("this stage needs IR images".into()))
    }
}

/// What the shared epoch loop needs from a model being trained.
trait Learner {
    fn kind(&self) -> ModelKind;
    fn model_config(&self) -> &ModelConfig;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn loss(&self, tape: &mut Tape, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<(Var, LossReport)>;
    fn train_miou(&self, data: &Dataset, threads: usize) -> Result<f64>;
}

struct Stage1<'a>(&'a mut BaselineModel);

impl Learner for Stage1<'_> {
    fn kind(&self) -> ModelKind {
        match self.0.modality {
            Modality::Eo => ModelKind::BaselineEo,
            Modality::Ir => ModelKind::BaselineIr,
        }
    }

    fn model_config(&self) -> &ModelConfig {
        &self.0.config
    }

    fn store(&self) -> &ParamStore {
        &self.0.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.0.store
    }

    fn loss(&self, tape: &mut Tape, batch: &Batch, _rng: &mut ChaCha8Rng) -> Result<(Var, LossReport)> {
        let image = match self.0.modality {
            Modality::Eo => batch.eo()?,
            Modality::Ir => batch.ir()?,
        };
        let out = self.0.forward(tape, image, Mode::Train)?;
        let seg = seg_loss(tape, out.logits, &batch.labels)?;
        let v = tape.value(seg.total).item()?;
        Ok((seg.total, LossReport { l_seg: v, l_total: v, ..LossReport::default() }))
    }

    fn train_miou(&self, data: &Dataset, threads: usize) -> Result<f64> {
        let mode = match self.0.modality {
            Modality::Eo => EvalMode::Optical,
            Modality::Ir => EvalMode::IrOnly,
        };
        Ok(evaluate_model(&*self.0, data, mode, threads)?.miou)
    }
}

struct Stage2<'a> {
    model: &'a mut CskNetModel,
    teacher: &'a BaselineModel,
    config: &'a TrainConfig,
}

/// Runs the frozen teacher in eval mode on an EO batch.
pub fn teacher_targets(teacher: &BaselineModel, eo: &Tensor) -> Result<TeacherTargets> {
    let mut tape = Tape::new();
    let out = teacher.forward(&mut tape, eo, Mode::Eval)?;
    let probs = tape.softmax_channel(out.logits)?;
    Ok(TeacherTargets {
        probs: tape.value(probs).clone(),
        f4: tape.value(out.f4()).clone(),
        f5: tape.value(out.f5()).clone(),
        fd: tape.value(out.decoder).clone(),
    })
}

impl Learner for Stage2<'_> {
    fn kind(&self) -> ModelKind {
        ModelKind::CskNet
    }

    fn model_config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn store(&self) -> &ParamStore {
        &self.model.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.model.store
    }

    fn loss(&self, tape: &mut Tape, batch: &Batch, rng: &mut ChaCha8Rng) -> Result<(Var, LossReport)> {
        let w = &self.config.weights;
        let targets = if w.d1 != 0.0 || w.d2 != 0.0 { Some(teacher_targets(self.teacher, batch.eo()?)?) } else { None };
        let out = self.model.forward(tape, batch.eo()?, batch.ir()?, Mode::Train, self.config.forward_options())?;
        let source = ContrastiveSource::Sample { config: &self.config.contrastive, rng };
        joint_loss(tape, &out, &batch.labels, targets.as_ref(), w, source)
    }

    fn train_miou(&self, data: &Dataset, threads: usize) -> Result<f64> {
        let variant = Variant { model: &*self.model, options: self.config.forward_options() };
        Ok(evaluate_model(&variant, data, EvalMode::Fused, threads)?.miou)
    }
}

fn mean_report(sum: &LossReport, n: usize) -> LossReport {
    let k = n as f64;
    LossReport {
        l_seg: sum.l_seg / k,
        l_d1: sum.l_d1 / k,
        l_d1_kl: sum.l_d1_kl / k,
        l_d1_ce: sum.l_d1_ce / k,
        l_d2: sum.l_d2 / k,
        l_cl: sum.l_cl / k,
        l_total: sum.l_total / k,
    }
}

fn add_report(acc: &mut LossReport, r: &LossReport) {
    acc.l_seg += r.l_seg;
    acc.l_d1 += r.l_d1;
    acc.l_d1_kl += r.l_d1_kl;
    acc.l_d1_ce += r.l_d1_ce;
    acc.l_d2 += r.l_d2;
    acc.l_cl += r.l_cl;
    acc.l_total += r.l_total;
}

/// Mini-batches of one epoch as sample indices. A trailing batch of one
/// sample is dropped: batch statistics over a single image are degenerate.
pub fn epoch_batches(order: &[usize], batch_size: usize) -> Vec<&[usize]> {
    order.chunks(batch_size).filter(|c| c.len() >= 2).collect()
}

/// Options for one call to a training entry point.
#[derive(Debug, Clone, Copy)]
pub struct RunLimits {
    pub threads: usize,
    /// Stop after this many epochs in this call (the schedule still spans all epochs).
    pub max_epochs: Option<usize>,
}

impl Default for RunLimits {
    fn default() -> Self {
        RunLimits { threads: 1, max_epochs: None }
    }
}

fn fit<L: Learner>(
    learner: &mut L,
    data: &Dataset,
    cfg: &TrainConfig,
    out: &RunOutput,
    state: &mut TrainState,
    limits: RunLimits,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::Invalid(format!("training needs at least 2 samples, got {}", data.len())));
    }
    if state.optimizer.velocity.len() != learner.store().len() {
        return Err(Error::Checkpoint("optimizer state does not match the model".into()));
    }
    let mut log = match &out.dir {
        Some(dir) => Some(open_metrics(dir, state.epoch)?),
        None => None,
    };
    let stop = limits.max_epochs.map_or(cfg.epochs, |m| (state.epoch + m).min(cfg.epochs));
    let mut records = Vec::new();
    while state.epoch < stop {
        let lr = cfg.lr_at(state.epoch)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut state.rng);
        let flips: Vec<bool> = (0..data.len()).map(|_| draw_flip(&mut state.rng)).collect();
        let mut sum = LossReport::default();
        let batches = epoch_batches(&order, cfg.batch_size);
        for idx in &batches {
            let samples: Vec<PairedSample> =
                idx.iter().map(|&i| if flips[i] { hflip(&data.samples[i]) } else { data.samples[i].clone() }).collect();
            let batch = Batch::assemble(&samples)?;
            let mut tape = Tape::new();
            let (loss, report) = learner.loss(&mut tape, &batch, &mut state.rng)?;
            if !report.l_total.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            let store = learner.store_mut();
            store.zero_grad();
            tape.backward(loss, store)?;
            sgd_step(store, &mut state.optimizer, lr, cfg.momentum, cfg.weight_decay)?;
            store.apply_stat_updates(&tape.take_stat_updates(), BN_MOMENTUM);
            add_report(&mut sum, &report);
        }
        state.epoch += 1;
        let record = EpochRecord {
            epoch: state.epoch,
            lr,
            loss: mean_report(&sum, batches.len()),
            train_miou: learner.train_miou(data, limits.threads)?,
        };
        if let (Some(file), Some(dir)) = (log.as_mut(), &out.dir) {
            let path = dir.join(METRICS_FILE);
            writeln!(file, "{}", record.tsv()).map_err(|e| Error::io(&path, e))?;
            let improved = record.train_miou > state.best_miou;
            if improved {
                state.best_miou = record.train_miou;
            }
            let ck = snapshot(learner, state, out);
            if improved {
                ck.save(&dir.join(BEST_CHECKPOINT))?;
            }
            if cfg.checkpoint_every > 0 && state.epoch.is_multiple_of(cfg.checkpoint_every) {
                ck.save(&dir.join(format!("epoch_{}.ckpt", state.epoch)))?;
            }
            ck.save(&dir.join(LAST_CHECKPOINT))?;
        } else if record.train_miou > state.best_miou {
            state.best_miou = record.train_miou;
        }
        records.push(record);
    }
    Ok(records)
}

fn snapshot<L: Learner>(learner: &L, state: &TrainState, out: &RunOutput) -> Checkpoint {
    let mut ck = Checkpoint::capture(learner.kind(), learner.model_config(), learner.store())
        .with_optimizer(learner.store(), &state.optimizer);
    ck.run_config = out.run_config.clone();
    ck.epoch = state.epoch;
    ck.best_miou = state.best_miou;
    ck.rng = Some(RngState::capture(&state.rng));
    ck
}

/// A fresh run truncates the log; a resumed one appends after the records it already has.
fn open_metrics(dir: &Path, resume_epoch: usize) -> Result<File> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(METRICS_FILE);
    if resume_epoch == 0 {
        let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
        writeln!(f, "{METRICS_HEADER}").map_err(|e| Error::io(&path, e))?;
        return Ok(f);
    }
    let kept: Vec<String> = match fs::read_to_string(&path) {
        Ok(text) => text.lines().take(resume_epoch + 1).map(str::to_string).collect(),
        Err(_) => vec![METRICS_HEADER.to_string()],
    };
    let mut f = File::create(&path).map_err(|e| Error::io(&path, e))?;
    for line in kept {
        writeln!(f, "{line}").map_err(|e| Error::io(&path, e))?;
    }
    drop(f);
    OpenOptions::new().append(true).open(&path).map_err(|e| Error::io(&path, e))
}

pub struct Trained<M> {
    pub model: M,
    pub records: Vec<EpochRecord>,
    pub state: TrainState,
}

/// Stage 1: a single-modality baseline trained with the segmentation loss only.
pub fn train_stage1(
    model_cfg: &ModelConfig,
    modality: Modality,
    cfg: &TrainConfig,
    data: &Dataset,
    out: &RunOutput,
    limits: RunLimits,
) -> Result<Trained<BaselineModel>> {
    let mut model = build_baseline(model_cfg, modality)?;
    let mut state = TrainState::fresh(&model.store, cfg.seed);
    let records = fit(&mut Stage1(&mut model), data, cfg, out, &mut state, limits)?;
    Ok(Trained { model, records, state })
}

/// Continues a stage-1 run from a checkpoint that carries optimizer and RNG state.
pub fn resume_stage1(
    ck: &Checkpoint,
    cfg: &TrainConfig,
    data: &Dataset,
    out: &RunOutput,
    limits: RunLimits,
) -> Result<Trained<BaselineModel>> {
    let modality = match ck.kind {
        ModelKind::BaselineEo => Modality::Eo,
        ModelKind::BaselineIr => Modality::Ir,
        ModelKind::CskNet => return Err(Error::Checkpoint("a CSK-Net checkpoint cannot resume stage 1".into())),
    };
    let mut model = build_baseline(&ck.model, modality)?;
    ck.restore_into(&mut model.store)?;
    let mut state = TrainState::from_checkpoint(ck, &model.store)?;
    let records = fit(&mut Stage1(&mut model), data, cfg, out, &mut state, limits)?;
    Ok(Trained { model, records, state })
}

/// Loads a baseline from a checkpoint, frozen.
pub fn load_baseline(ck: &Checkpoint) -> Result<BaselineModel> {
    let modality = match ck.kind {
        ModelKind::BaselineEo => Modality::Eo,
        ModelKind::BaselineIr => Modality::Ir,
        ModelKind::CskNet => return Err(Error::Checkpoint("expected a baseline checkpoint, found CSK-Net".into())),
    };
    let mut model = build_baseline(&ck.model, modality)?;
    ck.restore_into(&mut model.store)?;
    Ok(model)
}

pub fn load_csknet(ck: &Checkpoint) -> Result<CskNetModel> {
    if ck.kind != ModelKind::CskNet {
        return Err(Error::Checkpoint(format!("expected a CSK-Net checkpoint, found {}", ck.kind.tag())));
    }
    let mut model = build_csknet(&ck.model)?;
    ck.restore_into(&mut model.store)?;
    Ok(model)
}

/// Stage 2: CSK-Net on paired data, its optical path initialized from and
/// distilled towards the frozen EO baseline.
pub fn train_stage2(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    teacher: &BaselineModel,
    data: &Dataset,
    out: &RunOutput,
    limits: RunLimits,
) -> Result<Trained<CskNetModel>> {
    if teacher.modality != Modality::Eo {
        return Err(Error::Config("stage 2 distills from an EO baseline".into()));
    }
    let mut model = build_csknet(model_cfg)?;
    model.init_optical_from(teacher)?;
    let mut state = TrainState::fresh(&model.store, cfg.seed);
    let records = fit(&mut Stage2 { model: &mut model, teacher, config: cfg }, data, cfg, out, &mut state, limits)?;
    Ok(Trained { model, records, state })
}

pub fn resume_stage2(
    ck: &Checkpoint,
    cfg: &TrainConfig,
    teacher: &BaselineModel,
    data: &Dataset,
    out: &RunOutput,
    limits: RunLimits,
) -> Result<Trained<CskNetModel>> {
    let mut model = load_csknet(ck)?;
    model.config.compatible_with(&teacher.config)?;
    let mut state = TrainState::from_checkpoint(ck, &model.store)?;
    let records = fit(&mut Stage2 { model: &mut model, teacher, config: cfg }, data, cfg, out, &mut state, limits)?;
    Ok(Trained { model, records, state })
}

/// Training switches for one ablation row.
pub fn ablation_config(base: &TrainConfig, variant: AblationVariant) -> TrainConfig {
    let mut cfg = base.clone();
    match variant {
        AblationVariant::Full => {}
        AblationVariant::NoContrastive => cfg.weights.cl = 0.0,
        AblationVariant::NoGsu => cfg.fusion = Fusion::Sum,
        AblationVariant::NoExchange => cfg.exchange = false,
        AblationVariant::NoContrastiveNoExchange => {
            cfg.weights.cl = 0.0;
            cfg.exchange = false;
        }
    }
    cfg
}

/// Trains one EO baseline per seed, then every ablation variant on top of it,
/// and scores each in fused mode on `test`.
pub fn run_ablation(
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    seeds: &[u64],
    train: &Dataset,
    test: &Dataset,
    threads: usize,
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationTable> {
    let limits = RunLimits { threads, max_epochs: None };
    let mut rows = Vec::new();
    for &seed in seeds {
        let mcfg = ModelConfig { seed, ..model_cfg.clone() };
        let tcfg = TrainConfig { seed, ..base.clone() };
        let teacher = train_stage1(&mcfg, Modality::Eo, &tcfg, train, &RunOutput::default(), limits)?.model;
        for variant in AblationVariant::ALL {
            let cfg = ablation_config(&tcfg, variant);
            let model = train_stage2(&mcfg, &cfg, &teacher, train, &RunOutput::default(), limits)?.model;
            let scored = Variant { model: &model, options: cfg.forward_options() };
            let row = AblationRow { variant, seed, miou: evaluate_model(&scored, test, EvalMode::Fused, threads)?.miou };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(AblationTable { rows })
}

/// Test-split scores of one seed of the end-to-end comparison.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchmarkRow {
    pub seed: u64,
    pub ir_baseline: f64,
    pub eo_baseline: f64,
    pub fused: f64,
    pub ir_only: f64,
}

/// IR baseline from scratch vs. CSK-Net (fused and IR-only), one row per seed.
pub fn run_benchmark(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seeds: &[u64],
    train: &Dataset,
    test: &Dataset,
    threads: usize,
    mut progress: impl FnMut(&BenchmarkRow),
) -> Result<Vec<BenchmarkRow>> {
    let limits = RunLimits { threads, max_epochs: None };
    let none = RunOutput::default();
    let mut rows = Vec::new();
    for &seed in seeds {
        let mcfg = ModelConfig { seed, ..model_cfg.clone() };
        let tcfg = TrainConfig { seed, ..cfg.clone() };
        let ir = train_stage1(&mcfg, Modality::Ir, &tcfg, train, &none, limits)?.model;
        let eo = train_stage1(&mcfg, Modality::Eo, &tcfg, train, &none, limits)?.model;
        let csk = train_stage2(&mcfg, &tcfg, &eo, train, &none, limits)?.model;
        let variant = Variant { model: &csk, options: tcfg.forward_options() };
        let row = BenchmarkRow {
            seed,
            ir_baseline: evaluate_model(&ir, test, EvalMode::IrOnly, threads)?.miou,
            eo_baseline: evaluate_model(&eo, test, EvalMode::Optical, threads)?.miou,
            fused: evaluate_model(&variant, test, EvalMode::Fused, threads)?.miou,
            ir_only: evaluate_model(&csk, test, EvalMode::IrOnly, threads)?.miou,
        };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_decreases_to_zero_at_the_end() {
        let cfg = TrainConfig { epochs: 5, ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..=5).map(|e| poly_lr(e, 5, cfg.base_lr, cfg.poly_power).unwrap()).collect();
        assert_eq!(lrs[0], 5e-3);
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
        assert_eq!(lrs[5], 0.0);
    }

    #[test]
    fn trailing_singleton_batch_is_dropped() {
        let order: Vec<usize> = (0..17).collect();
        let b = epoch_batches(&order, 8);
        assert_eq!(b.iter().map(|c| c.len()).collect::<Vec<_>>(), vec![8, 8]);
        let order: Vec<usize> = (0..10).collect();
        assert_eq!(epoch_batches(&order, 8).len(), 2);
    }

    #[test]
    fn metrics_lines_round_trip() {
        let r = EpochRecord {
            epoch: 3,
            lr: 0.1 + 0.2,
            loss: LossReport { l_seg: 1.0 / 3.0, l_d1: 2.5, l_d2: 0.0, l_cl: 1e-300, l_total: 7.25, ..LossReport::default() },
            train_miou: 0.625,
        };
        assert_eq!(EpochRecord::parse(&r.tsv()).unwrap(), r);
    }
}
