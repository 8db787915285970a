//! Central finite-difference oracle and the gradient check suite.

use std::time::Instant;

use rand::rngs::StdRng;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::exchange;
use crate::graph::{ContrastiveTerm, Mode, Tape, Var};
use crate::gsu::GatedSpectralUnit;
use crate::labels::{LabelMap, IGNORE_INDEX};
use crate::layers::Modality;
use crate::losses::{self, ContrastiveConfig, ContrastiveSource, LossWeights, TeacherTargets};
use crate::network::{build_baseline, build_csknet, CskNetModel, ForwardOptions, ModelConfig, TapPoints};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const MAX_REL_ERROR: f64 = 1e-4;
/// Denominator floor of the relative error, so entries whose true gradient is
/// zero are judged by absolute error instead of noise-over-noise.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `(f(x + eps e_i) - f(x - eps e_i)) / 2 eps` for every entry of `x`.
pub fn finite_diff_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], eps: f64) -> Vec<f64> {
    let all: Vec<usize> = (0..x.len()).collect();
    finite_diff_entries(&mut f, x, &all, eps)
}

/// Central differences for a subset of entries.
pub fn finite_diff_entries(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], entries: &[usize], eps: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    entries
        .iter()
        .map(|&i| {
            probe[i] = x[i] + eps;
            let hi = f(&probe);
            probe[i] = x[i] - eps;
            let lo = f(&probe);
            probe[i] = x[i];
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub entries: usize,
    pub seeds: usize,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < MAX_REL_ERROR && self.entries > 0
    }

    fn merge(&mut self, other: CheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.entries += other.entries;
        self.seeds += other.seeds;
    }
}

fn pick_entries<R: Rng>(rng: &mut R, len: usize, max: usize) -> Vec<usize> {
    let mut v = index::sample(rng, len, len.min(max)).into_vec();
    v.sort_unstable();
    v
}

/// Builds `sum(out * R)` for a fixed random `R` when `out` is not a scalar.
fn project(tape: &mut Tape, out: Var, proj: &mut Option<Tensor>, rng: &mut StdRng) -> Result<Var> {
    let s = tape.shape(out);
    if s == Shape::SCALAR {
        return Ok(out);
    }
    let r = proj.get_or_insert_with(|| Tensor::uniform(s, -1.0, 1.0, rng)).clone();
    let r = tape.constant(r);
    let prod = tape.mul(out, r)?;
    tape.sum(prod)
}

/// Gradient check of the graph `build` over constant inputs. Up to
/// `max_entries` entries of each input are perturbed.
pub fn check_graph<F>(name: &str, inputs: &[Tensor], build: F, seed: u64, max_entries: usize) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut rng = StdRng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut proj = None;
    let eval = |vals: &[Tensor], proj: &mut Option<Tensor>, rng: &mut StdRng| -> Result<(Tape, Var, Vec<Var>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars)?;
        let loss = project(&mut tape, out, proj, rng)?;
        Ok((tape, loss, vars))
    };
    let (tape, loss, vars) = eval(inputs, &mut proj, &mut rng)?;
    let grads = tape.gradients(loss)?;
    let mut report = CheckReport { name: name.to_string(), max_rel_error: 0.0, entries: 0, seeds: 1 };
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).unwrap_or_else(|| Tensor::zeros(input.shape()));
        let entries = pick_entries(&mut rng, input.numel(), max_entries);
        let mut failure = None;
        let numeric = finite_diff_entries(
            |x| {
                let mut vals = inputs.to_vec();
                vals[i] = Tensor::new(input.shape(), x.to_vec()).expect("same shape");
                match eval(&vals, &mut proj.clone(), &mut rng.clone()) {
                    Ok((t, l, _)) => t.value(l).data()[0],
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                }
            },
            input.data(),
            &entries,
            FD_STEP,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        for (&e, n) in entries.iter().zip(numeric) {
            let err = relative_error(analytic.data()[e], n);
            report.max_rel_error = report.max_rel_error.max(if err.is_nan() { f64::INFINITY } else { err });
        }
        report.entries += entries.len();
    }
    Ok(report)
}

/// Gradient check with respect to parameters held in a store. `loss` must
/// build a scalar from the given store; its parameter gradients are compared
/// on up to `per_param` entries of every id in `ids`.
pub fn check_params<F>(
    name: &str,
    store: &ParamStore,
    ids: &[ParamId],
    loss: F,
    seed: u64,
    per_param: usize,
) -> Result<CheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut rng = StdRng::seed_from_u64(seed ^ 0x51ed_270b_27d4_eb2f);
    let mut work = store.clone();
    work.zero_grad();
    let mut tape = Tape::new();
    let l = loss(&mut tape, &work)?;
    tape.backward(l, &mut work)?;
    let mut report = CheckReport { name: name.to_string(), max_rel_error: 0.0, entries: 0, seeds: 1 };
    for &id in ids {
        let analytic = work.grad(id).clone();
        let base = store.value(id).data().to_vec();
        let entries = pick_entries(&mut rng, base.len(), per_param);
        let mut probe = store.clone();
        let mut failure = None;
        let numeric = finite_diff_entries(
            |x| {
                probe.value_mut(id).data_mut().copy_from_slice(x);
                let mut t = Tape::new();
                match loss(&mut t, &probe) {
                    Ok(v) => t.value(v).data()[0],
                    Err(e) => {
                        failure = Some(e);
                        f64::NAN
                    }
                }
            },
            &base,
            &entries,
            FD_STEP,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        for (&e, n) in entries.iter().zip(numeric) {
            let err = relative_error(analytic.data()[e], n);
            report.max_rel_error = report.max_rel_error.max(if err.is_nan() { f64::INFINITY } else { err });
        }
        report.entries += entries.len();
    }
    Ok(report)
}

/// Uniform values with magnitude in [0.1, 1]; keeps ReLU inputs off the kink.
fn off_kink<R: Rng>(shape: impl Into<Shape>, rng: &mut R) -> Tensor {
    let s = shape.into();
    let data = (0..s.numel())
        .map(|_| {
            let m = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(s, data).expect("sized")
}

fn rand_t<R: Rng>(shape: impl Into<Shape>, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn random_labels<R: Rng>(rng: &mut R, n: usize, h: usize, w: usize, classes: u8) -> LabelMap {
    let data = (0..n * h * w).map(|i| if i % 7 == 3 { IGNORE_INDEX } else { rng.gen_range(0..classes) }).collect();
    LabelMap::new(n, h, w, data).expect("sized")
}

fn softmax_probs<R: Rng>(shape: impl Into<Shape>, rng: &mut R) -> Result<Tensor> {
    let mut t = Tape::new();
    let v = t.constant(Tensor::uniform(shape, -2.0, 2.0, rng));
    let p = t.softmax_channel(v)?;
    Ok(t.value(p).clone())
}

type Primitive = (&'static str, fn(&mut ChaCha8Rng) -> Result<CheckReport>);

fn primitive_checks() -> Vec<Primitive> {
    vec![
        ("conv2d stride 1 pad 1", |r| {
            let inputs = [rand_t([2, 3, 8, 8], r), rand_t([4, 3, 3, 3], r), rand_t([1, 4, 1, 1], r)];
            check_graph("conv2d stride 1 pad 1", &inputs, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1), r.gen(), 40)
        }),
        ("conv2d stride 2 pad 1", |r| {
            let inputs = [rand_t([2, 3, 8, 8], r), rand_t([4, 3, 3, 3], r)];
            check_graph("conv2d stride 2 pad 1", &inputs, |t, v| t.conv2d(v[0], v[1], None, 2, 1), r.gen(), 40)
        }),
        ("conv2d 1x1", |r| {
            let inputs = [rand_t([2, 5, 3, 3], r), rand_t([2, 5, 1, 1], r), rand_t([1, 2, 1, 1], r)];
            check_graph("conv2d 1x1", &inputs, |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 0), r.gen(), 40)
        }),
        ("batch_norm train", |r| {
            let inputs = [rand_t([3, 4, 3, 3], r), rand_t([1, 4, 1, 1], r), rand_t([1, 4, 1, 1], r)];
            let mut store = ParamStore::new();
            let stats = store.add_stats("bn", 4);
            check_graph("batch_norm train", &inputs, move |t, v| t.batch_norm_train(v[0], v[1], v[2], stats, 1e-5), r.gen(), 40)
        }),
        ("batch_norm eval", |r| {
            let inputs = [rand_t([2, 3, 3, 3], r), rand_t([1, 3, 1, 1], r), rand_t([1, 3, 1, 1], r)];
            let mean: Vec<f64> = (0..3).map(|_| r.gen_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..3).map(|_| r.gen_range(0.5..2.0)).collect();
            check_graph(
                "batch_norm eval",
                &inputs,
                move |t, v| t.batch_norm_eval(v[0], v[1], v[2], &mean, &var, 1e-5),
                r.gen(),
                40,
            )
        }),
        ("relu", |r| check_graph("relu", &[off_kink([2, 3, 4, 4], r)], |t, v| t.relu(v[0]), r.gen(), 40)),
        ("tanh", |r| check_graph("tanh", &[rand_t([2, 3, 4, 4], r).map(|x| 3.0 * x)], |t, v| t.tanh(v[0]), r.gen(), 40)),
        ("sigmoid", |r| check_graph("sigmoid", &[rand_t([2, 3, 4, 4], r).map(|x| 3.0 * x)], |t, v| t.sigmoid(v[0]), r.gen(), 40)),
        ("softmax_channel", |r| {
            check_graph("softmax_channel", &[rand_t([2, 4, 3, 3], r)], |t, v| t.softmax_channel(v[0]), r.gen(), 40)
        }),
        ("log_softmax_channel", |r| {
            check_graph("log_softmax_channel", &[rand_t([2, 4, 3, 3], r)], |t, v| t.log_softmax_channel(v[0]), r.gen(), 40)
        }),
        ("add / sub / mul", |r| {
            let inputs = [rand_t([2, 3, 3, 3], r), rand_t([2, 3, 3, 3], r), rand_t([2, 3, 3, 3], r)];
            check_graph(
                "add / sub / mul",
                &inputs,
                |t, v| {
                    let s = t.add(v[0], v[1])?;
                    let d = t.sub(s, v[2])?;
                    t.mul(d, v[0])
                },
                r.gen(),
                40,
            )
        }),
        ("div", |r| {
            let inputs = [rand_t([2, 3, 3, 3], r), Tensor::uniform([2, 3, 3, 3], 0.5, 2.0, r)];
            check_graph("div", &inputs, |t, v| t.div(v[0], v[1]), r.gen(), 40)
        }),
        ("scalar_mul / add_scalar", |r| {
            check_graph(
                "scalar_mul / add_scalar",
                &[rand_t([2, 3, 3, 3], r)],
                |t, v| {
                    let s = t.scalar_mul(v[0], -1.7)?;
                    t.add_scalar(s, 0.3)
                },
                r.gen(),
                40,
            )
        }),
        ("concat / slice", |r| {
            let inputs = [rand_t([2, 2, 3, 4], r), rand_t([2, 3, 3, 4], r)];
            check_graph(
                "concat / slice",
                &inputs,
                |t, v| {
                    let c = t.concat_channels(&[v[0], v[1]])?;
                    let s = t.slice_channels(c, 1, 3)?;
                    t.slice_width(s, 1, 2)
                },
                r.gen(),
                40,
            )
        }),
        ("upsample_nearest", |r| {
            check_graph("upsample_nearest", &[rand_t([2, 2, 3, 3], r)], |t, v| t.upsample_nearest(v[0], 2), r.gen(), 40)
        }),
        ("upsample_bilinear", |r| {
            check_graph("upsample_bilinear", &[rand_t([2, 2, 3, 3], r)], |t, v| t.upsample_bilinear(v[0], 4), r.gen(), 40)
        }),
        ("avg_pool", |r| check_graph("avg_pool", &[rand_t([2, 2, 4, 4], r)], |t, v| t.avg_pool(v[0], 2), r.gen(), 40)),
        ("sum / mean / sum_per_channel", |r| {
            check_graph(
                "sum / mean / sum_per_channel",
                &[rand_t([2, 3, 3, 3], r)],
                |t, v| {
                    let sq = t.mul(v[0], v[0])?;
                    let pc = t.sum_per_channel(sq)?;
                    let m = t.mean(v[0])?;
                    let s = t.sum(pc)?;
                    t.add(s, m)
                },
                r.gen(),
                40,
            )
        }),
        ("l2_normalize_channels", |r| {
            check_graph("l2_normalize_channels", &[rand_t([2, 4, 3, 3], r)], |t, v| t.l2_normalize_channels(v[0]), r.gen(), 40)
        }),
        ("spatial exchange", |r| {
            let inputs = [rand_t([2, 3, 2, 4], r), rand_t([2, 3, 2, 4], r)];
            check_graph(
                "spatial exchange",
                &inputs,
                |t, v| {
                    let (a, b) = exchange::spatial_exchange(t, v[0], v[1])?;
                    let b = t.scalar_mul(b, 2.0)?;
                    t.add(a, b)
                },
                r.gen(),
                40,
            )
        }),
        ("channel exchange", |r| {
            let inputs = [rand_t([2, 4, 2, 2], r), rand_t([2, 4, 2, 2], r)];
            check_graph(
                "channel exchange",
                &inputs,
                |t, v| {
                    let (a, b) = exchange::channel_exchange(t, v[0], v[1], &[0.0, 1.0, 0.001, 1.0], &[1.0, 0.0, 1.0, 1.0], 1e-2)?;
                    let b = t.scalar_mul(b, -3.0)?;
                    t.add(a, b)
                },
                r.gen(),
                40,
            )
        }),
        ("gated spectral unit", |r| {
            let mut store = ParamStore::new();
            let gsu = GatedSpectralUnit::new(&mut store, r, "gsu", 3)?;
            let f_ir = rand_t([2, 3, 4, 4], r);
            let f_eo = rand_t([2, 3, 4, 4], r);
            let seed = r.gen();
            let mut report = check_graph(
                "gated spectral unit",
                &[f_ir.clone(), f_eo.clone()],
                |t, v| Ok(gsu.forward(t, &store, v[0], v[1])?.fuse),
                seed,
                40,
            )?;
            let proj = Tensor::uniform([2, 3, 4, 4], -1.0, 1.0, r);
            let params = check_params(
                "gsu params",
                &store,
                &gsu.params(),
                |t, s| {
                    let a = t.constant(f_ir.clone());
                    let b = t.constant(f_eo.clone());
                    let out = gsu.forward(t, s, a, b)?.fuse;
                    let p = t.constant(proj.clone());
                    let prod = t.mul(out, p)?;
                    t.sum(prod)
                },
                seed,
                8,
            )?;
            report.merge(params);
            report.seeds = 1;
            Ok(report)
        }),
        ("contrastive", |r| {
            let e = rand_t([2, 4, 3, 3], r);
            let labels = random_labels(r, 2, 3, 3, 3);
            let cfg = ContrastiveConfig { semi_hard_fraction: 0.5, ..ContrastiveConfig::default() };
            let plan = losses::plan_contrastive(&e, &labels, &cfg, r)?;
            check_graph(
                "contrastive",
                &[e],
                move |t, v| losses::contrastive_from_plans(t, &[v[0]], std::slice::from_ref(&plan), cfg.tau),
                r.gen(),
                40,
            )
        }),
    ]
}

type LossCheck = (&'static str, fn(&mut ChaCha8Rng) -> Result<CheckReport>);

fn loss_checks() -> Vec<LossCheck> {
    vec![
        ("seg_loss", |r| {
            let labels = random_labels(r, 2, 4, 4, 3);
            check_graph(
                "seg_loss",
                &[rand_t([2, 3, 4, 4], r)],
                move |t, v| Ok(losses::seg_loss(t, v[0], &labels)?.total),
                r.gen(),
                40,
            )
        }),
        ("distill_pred_loss", |r| {
            let teacher = softmax_probs([2, 3, 4, 4], r)?;
            check_graph(
                "distill_pred_loss",
                &[rand_t([2, 3, 4, 4], r)],
                move |t, v| Ok(losses::distill_pred_loss(t, v[0], &teacher)?.total),
                r.gen(),
                40,
            )
        }),
        ("distill_feat_loss", |r| {
            let targets = [rand_t([2, 3, 2, 2], r), rand_t([2, 4, 1, 1], r), rand_t([2, 2, 4, 4], r)];
            let inputs = [rand_t([2, 3, 2, 2], r), rand_t([2, 4, 1, 1], r), rand_t([2, 2, 4, 4], r)];
            check_graph(
                "distill_feat_loss",
                &inputs,
                move |t, v| losses::distill_feat_loss(t, v, &[&targets[0], &targets[1], &targets[2]]),
                r.gen(),
                40,
            )
        }),
        ("pixel_contrastive_loss", |r| {
            let embeddings = [rand_t([2, 4, 2, 2], r), rand_t([2, 4, 1, 1], r)];
            let full = random_labels(r, 2, 4, 4, 3);
            let cfg = ContrastiveConfig::default();
            let plans: Vec<Vec<ContrastiveTerm>> = embeddings
                .iter()
                .map(|e| {
                    let l = full.downsample_majority(4 / e.shape().h)?;
                    losses::plan_contrastive(e, &l, &cfg, r)
                })
                .collect::<Result<_>>()?;
            check_graph(
                "pixel_contrastive_loss",
                &embeddings,
                move |t, v| losses::contrastive_from_plans(t, v, &plans, cfg.tau),
                r.gen(),
                40,
            )
        }),
    ]
}

/// Smallest dual-branch configuration exercising every component.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        widths: vec![3, 4, 4, 5, 5],
        num_classes: 3,
        in_channels: 3,
        decoder_width: 4,
        embed_dim: 4,
        taps: TapPoints::Stages45BothBranches,
        seed: 11,
        ..ModelConfig::default()
    }
}

/// Random biases and BN shifts. With the zero init, an all-zero feature pixel
/// puts a ReLU input exactly on its kink, where finite differences measure
/// half a slope.
fn generic_point<R: Rng>(model: &mut CskNetModel, rng: &mut R) {
    let ids: Vec<ParamId> = model.store.ids().collect();
    for id in ids {
        let name = &model.store.get(id).name;
        if name.ends_with(".bias") || name.ends_with(".beta") {
            for v in model.store.value_mut(id).data_mut() {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
    }
}

/// Sets a few BN scales below the exchange threshold so channel exchange is
/// actually routed in the checked graph.
fn force_channel_exchange(model: &mut CskNetModel) {
    let picks = [(1, Modality::Eo, 0), (2, Modality::Ir, 1), (4, Modality::Eo, 2), (5, Modality::Ir, 0)];
    for (stage, m, c) in picks {
        let gamma = model.stages[stage - 1].bn.slot(m).gamma;
        model.store.value_mut(gamma).data_mut()[c] = 1e-3;
    }
}

/// Full dual-branch model with exchange and GSU under the joint loss.
pub fn check_full_model(seed: u64, per_param: usize) -> Result<CheckReport> {
    let cfg = ModelConfig { seed, ..toy_config() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = build_csknet(&cfg)?;
    generic_point(&mut model, &mut rng);
    force_channel_exchange(&mut model);
    let teacher_model = build_baseline(&ModelConfig { seed: seed + 1, ..cfg.clone() }, Modality::Eo)?;
    // 32x32 keeps 8 values per channel at stage 5; with only 2, batch norm
    // maps its input to +-1 and the input gradient is pure rounding noise.
    let eo = Tensor::uniform([2, 3, 32, 32], 0.0, 1.0, &mut rng);
    let ir = Tensor::uniform([2, 1, 32, 32], 0.0, 1.0, &mut rng);
    let labels = random_labels(&mut rng, 2, 32, 32, 3);

    let mut t = Tape::new();
    let out = teacher_model.forward(&mut t, &eo, Mode::Eval)?;
    let probs = t.softmax_channel(out.logits)?;
    let teacher = TeacherTargets {
        probs: t.value(probs).clone(),
        f4: t.value(out.f4()).clone(),
        f5: t.value(out.f5()).clone(),
        fd: t.value(out.decoder).clone(),
    };

    let ccfg = ContrastiveConfig::default();
    let mut t = Tape::new();
    let out = model.forward(&mut t, &eo, &ir, Mode::Train, ForwardOptions::default())?;
    let embeddings: Vec<Var> = out.embeddings.iter().map(|e| e.var).collect();
    let batch = losses::ContrastiveBatch::new(&t, embeddings, &labels, &ccfg)?;
    let plans = losses::plan_batch(&t, &batch, &mut rng)?;

    let weights = LossWeights::default();
    let ids: Vec<ParamId> = model.store.ids().collect();
    let model = &model;
    check_params(
        "full model (exchange + GSU, joint loss)",
        &model.store,
        &ids,
        |t, store| {
            let m = CskNetModel { store: store.clone(), ..model.clone() };
            let out = m.forward(t, &eo, &ir, Mode::Train, ForwardOptions::default())?;
            let src: ContrastiveSource<'_, ChaCha8Rng> = ContrastiveSource::Plans { plans: &plans, tau: ccfg.tau };
            Ok(losses::joint_loss(t, &out, &labels, Some(&teacher), &weights, src)?.0)
        },
        seed,
        per_param,
    )
}

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub checks: Vec<CheckReport>,
    pub seconds: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckReport::passed)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max)
    }
}

/// Every primitive and loss over `seeds` random draws, plus the full model
/// once per seed in `model_seeds`.
pub fn run_suite(seeds: &[u64], model_seeds: &[u64]) -> Result<SuiteReport> {
    if seeds.is_empty() {
        return Err(Error::Config("gradient check needs at least one seed".into()));
    }
    let start = Instant::now();
    let mut checks = Vec::new();
    for (name, check) in primitive_checks().into_iter().chain(loss_checks()) {
        let mut merged: Option<CheckReport> = None;
        for &seed in seeds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = check(&mut rng)?;
            match &mut merged {
                None => merged = Some(r),
                Some(m) => m.merge(r),
            }
        }
        let mut r = merged.expect("non-empty seeds");
        r.name = name.to_string();
        checks.push(r);
    }
    for &seed in model_seeds {
        checks.push(check_full_model(seed, 4)?);
    }
    Ok(SuiteReport { checks, seconds: start.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_diff_gradient(|x| x[0] * x[0], &[3.0], FD_STEP);
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let g = finite_diff_gradient(|_| 4.2, &[1.0, -2.0, 0.5], FD_STEP);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0 + 1e-6) - 1e-6 / (1.0 + 1e-6)).abs() < 1e-15);
        assert!(relative_error(1e-9, 0.0) <= 1e-3);
    }
}
