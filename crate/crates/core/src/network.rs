//! Baseline single-branch segmenter and the dual-branch CSK-Net graph.
//!
//! Both use the same 5-stage topology: a 3x3 conv + BN + ReLU per stage
//! (stride 2 from stage 2 on), a decoder that projects stage 5, upsamples it to
//! stage-3 resolution and fuses it with the stage-3 features, and a 1x1 seg
//! head whose logits are bilinearly upsampled to the input size.
//!
//! In CSK-Net the stage convolutions are a single set of parameters used by
//! both branches; each branch normalizes with its own BN slot.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exchange::{self, ExchangeConfig};
use crate::graph::{Mode, Tape, Var};
use crate::gsu::{GatedSpectralUnit, GsuOutput};
use crate::layers::{conv_bn_relu, to_encoder_input, BnSlot, Conv, Modality, ModalityBatchNorm};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const NUM_STAGES: usize = 5;
/// Total downsampling of the encoder; inputs must be multiples of this.
pub const ENCODER_STRIDE: usize = 16;

/// Which encoder features feed the pixel contrastive loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapPoints {
    /// Stages 4 and 5 of both branches (four taps).
    Stages45BothBranches,
    /// Stages 2 to 5 of both branches (eight taps).
    LastFourStages,
}

impl TapPoints {
    pub fn taps(&self) -> Vec<(Modality, usize)> {
        let stages: &[usize] = match self {
            TapPoints::Stages45BothBranches => &[4, 5],
            TapPoints::LastFourStages => &[2, 3, 4, 5],
        };
        [Modality::Eo, Modality::Ir].iter().flat_map(|&m| stages.iter().map(move |&s| (m, s))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub widths: Vec<usize>,
    pub num_classes: usize,
    /// Encoder input channels; single-channel IR is replicated to this.
    pub in_channels: usize,
    pub decoder_width: usize,
    pub embed_dim: usize,
    pub taps: TapPoints,
    pub exchange: ExchangeConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            widths: vec![8, 16, 32, 64, 64],
            num_classes: 4,
            in_channels: 3,
            decoder_width: 32,
            embed_dim: 32,
            taps: TapPoints::Stages45BothBranches,
            exchange: ExchangeConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.len() != NUM_STAGES {
            return Err(Error::Config(format!("expected {NUM_STAGES} stage widths, got {}", self.widths.len())));
        }
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("stage widths must be positive, got {:?}", self.widths)));
        }
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        if self.in_channels == 0 || self.decoder_width == 0 || self.embed_dim == 0 {
            return Err(Error::Config("in_channels, decoder_width and embed_dim must be positive".into()));
        }
        self.exchange.validate()
    }

    /// Fields that must agree between a pretrained baseline and a CSK-Net student.
    pub fn compatible_with(&self, other: &ModelConfig) -> Result<()> {
        if self.widths != other.widths
            || self.num_classes != other.num_classes
            || self.in_channels != other.in_channels
            || self.decoder_width != other.decoder_width
        {
            return Err(Error::Config(format!(
                "pretrained model (widths {:?}, {} classes, decoder {}) does not match (widths {:?}, {} classes, decoder {})",
                other.widths, other.num_classes, other.decoder_width, self.widths, self.num_classes, self.decoder_width
            )));
        }
        Ok(())
    }

    fn stage_in(&self, stage: usize) -> usize {
        if stage == 1 {
            self.in_channels
        } else {
            self.widths[stage - 2]
        }
    }

    fn stage_stride(stage: usize) -> usize {
        if stage == 1 {
            1
        } else {
            2
        }
    }
}

fn check_input(img: &Tensor, what: &'static str) -> Result<()> {
    let s = img.shape();
    if s.h == 0 || s.w == 0 || !s.h.is_multiple_of(ENCODER_STRIDE) || !s.w.is_multiple_of(ENCODER_STRIDE) {
        return Err(Error::shape(
            what,
            format!("spatial extent {}x{} must be a positive multiple of {ENCODER_STRIDE}", s.h, s.w),
        ));
    }
    img.check_finite(what)
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub high: Conv,
    pub high_bn: BnSlot,
    pub fuse: Conv,
    pub fuse_bn: BnSlot,
}

impl Decoder {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.decoder_width;
        Ok(Decoder {
            high: Conv::new(store, rng, &format!("{name}.high"), cfg.widths[4], d, 1, 1, false)?,
            high_bn: BnSlot::new(store, &format!("{name}.high_bn"), d)?,
            fuse: Conv::new(store, rng, &format!("{name}.fuse"), d + cfg.widths[2], d, 3, 1, false)?,
            fuse_bn: BnSlot::new(store, &format!("{name}.fuse_bn"), d)?,
        })
    }

    /// Decoder feature F_d at stage-3 resolution.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, f3: Var, f5: Var, mode: Mode) -> Result<Var> {
        let high = conv_bn_relu(tape, store, &self.high, &self.high_bn, f5, mode)?;
        let factor = tape.shape(f3).h / tape.shape(high).h;
        let up = tape.upsample_nearest(high, factor)?;
        let cat = tape.concat_channels(&[up, f3])?;
        conv_bn_relu(tape, store, &self.fuse, &self.fuse_bn, cat, mode)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.high.params(), self.high_bn.params(), self.fuse.params(), self.fuse_bn.params()].concat()
    }
}

/// 1x1 conv to class logits, upsampled to the input resolution.
fn seg_logits(tape: &mut Tape, store: &ParamStore, head: &Conv, features: Var, out_h: usize) -> Result<Var> {
    let logits = head.forward(tape, store, features)?;
    let factor = out_h / tape.shape(logits).h;
    if factor == 1 {
        Ok(logits)
    } else {
        tape.upsample_bilinear(logits, factor)
    }
}

/// 1x1 conv -> ReLU -> 1x1 conv into the contrastive embedding space.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    pub first: Conv,
    pub second: Conv,
}

impl ProjectionHead {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c_in: usize, dim: usize) -> Result<Self> {
        Ok(ProjectionHead {
            first: Conv::new(store, rng, &format!("{name}.first"), c_in, dim, 1, 1, true)?,
            second: Conv::new(store, rng, &format!("{name}.second"), dim, dim, 1, 1, true)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.second.forward(tape, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        [self.first.params(), self.second.params()].concat()
    }
}

/// Single-branch segmentation model trained on one modality.
#[derive(Debug, Clone)]
pub struct BaselineModel {
    pub config: ModelConfig,
    pub modality: Modality,
    pub store: ParamStore,
    pub stages: Vec<(Conv, BnSlot)>,
    pub decoder: Decoder,
    pub head: Conv,
}

#[derive(Debug, Clone)]
pub struct BaselineOutputs {
    pub logits: Var,
    pub stages: Vec<Var>,
    pub decoder: Var,
}

impl BaselineOutputs {
    pub fn f4(&self) -> Var {
        self.stages[3]
    }

    pub fn f5(&self) -> Var {
        self.stages[4]
    }
}

pub fn build_baseline(config: &ModelConfig, modality: Modality) -> Result<BaselineModel> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stages = Vec::with_capacity(NUM_STAGES);
    for s in 1..=NUM_STAGES {
        let name = format!("encoder.stage{s}");
        let conv = Conv::new(
            &mut store,
            &mut rng,
            &format!("{name}.conv"),
            config.stage_in(s),
            config.widths[s - 1],
            3,
            ModelConfig::stage_stride(s),
            false,
        )?;
        let bn = BnSlot::new(&mut store, &format!("{name}.bn"), config.widths[s - 1])?;
        stages.push((conv, bn));
    }
    let decoder = Decoder::new(&mut store, &mut rng, "decoder", config)?;
    let head = Conv::new(&mut store, &mut rng, "head", config.decoder_width, config.num_classes, 1, 1, true)?;
    Ok(BaselineModel { config: config.clone(), modality, store, stages, decoder, head })
}

impl BaselineModel {
    pub fn forward(&self, tape: &mut Tape, image: &Tensor, mode: Mode) -> Result<BaselineOutputs> {
        check_input(image, "baseline input")?;
        let want = match self.modality {
            Modality::Eo => self.config.in_channels,
            Modality::Ir => 1,
        };
        if image.shape().c != want {
            return Err(Error::shape(
                "baseline input",
                format!("{} baseline expects {want} channels, got {}", self.modality, image.shape()),
            ));
        }
        let x = tape.constant(to_encoder_input(image, self.config.in_channels)?);
        let mut feats = Vec::with_capacity(NUM_STAGES);
        let mut cur = x;
        for (conv, bn) in &self.stages {
            cur = conv_bn_relu(tape, &self.store, conv, bn, cur, mode)?;
            feats.push(cur);
        }
        let decoder = self.decoder.forward(tape, &self.store, feats[2], feats[4], mode)?;
        let logits = seg_logits(tape, &self.store, &self.head, decoder, image.shape().h)?;
        Ok(BaselineOutputs { logits, stages: feats, decoder })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.store.ids().collect()
    }

    pub fn param_count(&self) -> usize {
        self.store.count(self.store.ids())
    }
}

/// One shared encoder stage: a single conv parameter set used by both
/// branches, with per-modality batch norm.
#[derive(Debug, Clone)]
pub struct SharedStage {
    pub conv: Conv,
    pub bn: ModalityBatchNorm,
}

#[derive(Debug, Clone)]
pub struct CskNetModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub stages: Vec<SharedStage>,
    pub decoder_o: Decoder,
    pub decoder_ir: Decoder,
    pub head_o: Conv,
    pub head_ir: Conv,
    pub head_f: Conv,
    pub gsu: GatedSpectralUnit,
    pub projections: Vec<(Modality, usize, ProjectionHead)>,
}

/// How p_F is produced from the two decoder features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Gsu,
    /// Elementwise sum F_I + F_O (ablation without the gated unit).
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub exchange: bool,
    pub fusion: Fusion,
    /// Compute projection-head embeddings.
    pub embeddings: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions { exchange: true, fusion: Fusion::Gsu, embeddings: true }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Embedding {
    pub modality: Modality,
    pub stage: usize,
    pub var: Var,
}

#[derive(Debug, Clone)]
pub struct CskOutputs {
    pub p_o: Var,
    pub p_ir: Var,
    pub p_f: Var,
    /// Stage outputs of each branch, before exchange.
    pub eo_stages: Vec<Var>,
    pub ir_stages: Vec<Var>,
    pub f_o: Var,
    pub f_i: Var,
    pub fused: Var,
    pub gsu: Option<GsuOutput>,
    pub embeddings: Vec<Embedding>,
}

/// Parameter subsets for counting.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subgraph {
    Full,
    /// Everything the missing-modality inference path touches.
    IrOnly,
    /// The optical path: the baseline-equivalent branch that receives distillation.
    Optical,
}

impl FromStr for Subgraph {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Subgraph::Full),
            "ir_only" | "ir-only" => Ok(Subgraph::IrOnly),
            "optical" | "baseline-equivalent" | "baseline_equivalent" => Ok(Subgraph::Optical),
            other => Err(Error::Config(format!("unknown subgraph selector {other:?}"))),
        }
    }
}

impl fmt::Display for Subgraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subgraph::Full => "full",
            Subgraph::IrOnly => "ir_only",
            Subgraph::Optical => "optical",
        })
    }
}

pub fn build_csknet(config: &ModelConfig) -> Result<CskNetModel> {
    config.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut stages = Vec::with_capacity(NUM_STAGES);
    for s in 1..=NUM_STAGES {
        let name = format!("encoder.stage{s}");
        let conv = Conv::new(
            &mut store,
            &mut rng,
            &format!("{name}.conv"),
            config.stage_in(s),
            config.widths[s - 1],
            3,
            ModelConfig::stage_stride(s),
            false,
        )?;
        let bn = ModalityBatchNorm::new(&mut store, &format!("{name}.bn"), config.widths[s - 1])?;
        stages.push(SharedStage { conv, bn });
    }
    let decoder_o = Decoder::new(&mut store, &mut rng, "decoder_o", config)?;
    let decoder_ir = Decoder::new(&mut store, &mut rng, "decoder_ir", config)?;
    let (d, c) = (config.decoder_width, config.num_classes);
    let head_o = Conv::new(&mut store, &mut rng, "head_o", d, c, 1, 1, true)?;
    let head_ir = Conv::new(&mut store, &mut rng, "head_ir", d, c, 1, 1, true)?;
    let head_f = Conv::new(&mut store, &mut rng, "head_f", d, c, 1, 1, true)?;
    let gsu = GatedSpectralUnit::new(&mut store, &mut rng, "gsu", d)?;
    let mut projections = Vec::new();
    for (m, s) in config.taps.taps() {
        let head = ProjectionHead::new(&mut store, &mut rng, &format!("proj.{m}{s}"), config.widths[s - 1], config.embed_dim)?;
        projections.push((m, s, head));
    }
    Ok(CskNetModel { config: config.clone(), store, stages, decoder_o, decoder_ir, head_o, head_ir, head_f, gsu, projections })
}

impl CskNetModel {
    /// The conv weight a branch uses at `stage` (1-based). Both modalities
    /// return the same id.
    pub fn branch_conv_weight(&self, _modality: Modality, stage: usize) -> ParamId {
        self.stages[stage - 1].conv.weight
    }

    pub fn decoder(&self, m: Modality) -> &Decoder {
        match m {
            Modality::Eo => &self.decoder_o,
            Modality::Ir => &self.decoder_ir,
        }
    }

    fn head(&self, m: Modality) -> &Conv {
        match m {
            Modality::Eo => &self.head_o,
            Modality::Ir => &self.head_ir,
        }
    }

    fn stage(&self, tape: &mut Tape, m: Modality, s: usize, x: Var, mode: Mode) -> Result<Var> {
        let st = &self.stages[s - 1];
        conv_bn_relu(tape, &self.store, &st.conv, st.bn.slot(m), x, mode)
    }

    fn input(&self, tape: &mut Tape, img: &Tensor, m: Modality) -> Result<Var> {
        let want = match m {
            Modality::Eo => self.config.in_channels,
            Modality::Ir => 1,
        };
        if img.shape().c != want && img.shape().c != self.config.in_channels {
            return Err(Error::shape("csknet input", format!("{m} image {} (expected {want} channels)", img.shape())));
        }
        Ok(tape.constant(to_encoder_input(img, self.config.in_channels)?))
    }

    pub fn forward(&self, tape: &mut Tape, eo: &Tensor, ir: &Tensor, mode: Mode, opts: ForwardOptions) -> Result<CskOutputs> {
        check_input(eo, "eo input")?;
        check_input(ir, "ir input")?;
        let (se, si) = (eo.shape(), ir.shape());
        if (se.n, se.h, se.w) != (si.n, si.h, si.w) {
            return Err(Error::shape("csknet", format!("eo {se} and ir {si} are not co-registered")));
        }
        let mut a = self.input(tape, eo, Modality::Eo)?;
        let mut b = self.input(tape, ir, Modality::Ir)?;
        let mut eo_stages = Vec::with_capacity(NUM_STAGES);
        let mut ir_stages = Vec::with_capacity(NUM_STAGES);
        let mut eo_carried = Vec::with_capacity(NUM_STAGES);
        let mut ir_carried = Vec::with_capacity(NUM_STAGES);
        for s in 1..=NUM_STAGES {
            let fa = self.stage(tape, Modality::Eo, s, a, mode)?;
            let fb = self.stage(tape, Modality::Ir, s, b, mode)?;
            eo_stages.push(fa);
            ir_stages.push(fb);
            (a, b) = if opts.exchange {
                let bn = &self.stages[s - 1].bn;
                let ga = bn.eo.gamma_values(&self.store);
                let gb = bn.ir.gamma_values(&self.store);
                exchange::mixed_exchange(tape, s, fa, fb, ga, gb, &self.config.exchange)?
            } else {
                (fa, fb)
            };
            eo_carried.push(a);
            ir_carried.push(b);
        }
        let f_o = self.decoder_o.forward(tape, &self.store, eo_carried[2], eo_carried[4], mode)?;
        let f_i = self.decoder_ir.forward(tape, &self.store, ir_carried[2], ir_carried[4], mode)?;
        let h = se.h;
        let p_o = seg_logits(tape, &self.store, &self.head_o, f_o, h)?;
        let p_ir = seg_logits(tape, &self.store, &self.head_ir, f_i, h)?;
        let (fused, gsu) = match opts.fusion {
            Fusion::Gsu => {
                let out = self.gsu.forward(tape, &self.store, f_i, f_o)?;
                (out.fuse, Some(out))
            }
            Fusion::Sum => (tape.add(f_i, f_o)?, None),
        };
        let p_f = seg_logits(tape, &self.store, &self.head_f, fused, h)?;
        let mut embeddings = Vec::new();
        if opts.embeddings {
            for (m, s, head) in &self.projections {
                let feat = match m {
                    Modality::Eo => eo_stages[s - 1],
                    Modality::Ir => ir_stages[s - 1],
                };
                let var = head.forward(tape, &self.store, feat)?;
                embeddings.push(Embedding { modality: *m, stage: *s, var });
            }
        }
        Ok(CskOutputs { p_o, p_ir, p_f, eo_stages, ir_stages, f_o, f_i, fused, gsu, embeddings })
    }

    /// Missing-modality inference: IR BN slots, IR decoder and IR head only.
    pub fn forward_ir_only(&self, tape: &mut Tape, ir: &Tensor, mode: Mode) -> Result<Var> {
        self.forward_single(tape, ir, Modality::Ir, mode)
    }

    /// Runs one branch alone (no exchange, no fusion).
    pub fn forward_single(&self, tape: &mut Tape, img: &Tensor, m: Modality, mode: Mode) -> Result<Var> {
        check_input(img, "single-branch input")?;
        let mut cur = self.input(tape, img, m)?;
        let mut feats = Vec::with_capacity(NUM_STAGES);
        for s in 1..=NUM_STAGES {
            cur = self.stage(tape, m, s, cur, mode)?;
            feats.push(cur);
        }
        let d = self.decoder(m).forward(tape, &self.store, feats[2], feats[4], mode)?;
        seg_logits(tape, &self.store, self.head(m), d, img.shape().h)
    }

    fn shared_conv_params(&self) -> Vec<ParamId> {
        self.stages.iter().flat_map(|s| s.conv.params()).collect()
    }

    fn branch_params(&self, m: Modality) -> Vec<ParamId> {
        let mut ids = self.shared_conv_params();
        ids.extend(self.stages.iter().flat_map(|s| s.bn.slot(m).params()));
        ids.extend(self.decoder(m).params());
        ids.extend(self.head(m).params());
        ids
    }

    pub fn subgraph_params(&self, sub: Subgraph) -> Vec<ParamId> {
        match sub {
            Subgraph::Full => self.store.ids().collect(),
            Subgraph::IrOnly => self.branch_params(Modality::Ir),
            Subgraph::Optical => self.branch_params(Modality::Eo),
        }
    }

    /// Parameters never used by the IR-only path.
    pub fn eo_only_params(&self) -> Vec<ParamId> {
        let ir: std::collections::BTreeSet<ParamId> = self.subgraph_params(Subgraph::IrOnly).into_iter().collect();
        self.store.ids().filter(|id| !ir.contains(id)).collect()
    }

    pub fn param_count(&self, sub: Subgraph) -> usize {
        self.store.count(self.subgraph_params(sub))
    }

    pub fn projection_params(&self) -> Vec<ParamId> {
        self.projections.iter().flat_map(|(_, _, h)| h.params()).collect()
    }

    /// Copies the shared convs, optical BN slots, optical decoder and optical
    /// head from a pretrained optical baseline.
    pub fn init_optical_from(&mut self, pretrained: &BaselineModel) -> Result<usize> {
        self.config.compatible_with(&pretrained.config)?;
        self.store.copy_from(&pretrained.store, |name| {
            if let Some(rest) = name.strip_prefix("decoder_o.") {
                Some(format!("decoder.{rest}"))
            } else if let Some(rest) = name.strip_prefix("head_o.") {
                Some(format!("head.{rest}"))
            } else if name.starts_with("encoder.") {
                if name.contains(".bn.ir") {
                    None
                } else {
                    Some(name.replace(".bn.eo", ".bn"))
                }
            } else {
                None
            }
        })
    }
}

impl fmt::Display for CskNetModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "CSK-Net widths {:?}, {} classes: {} params (ir-only path {})",
            self.config.widths,
            self.config.num_classes,
            self.param_count(Subgraph::Full),
            self.param_count(Subgraph::IrOnly)
        )
    }
}

/// Shape of the logits for an input image.
pub fn logits_shape(config: &ModelConfig, input: Shape) -> Shape {
    Shape::new(input.n, config.num_classes, input.h, input.w)
}
