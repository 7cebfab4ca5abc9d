//! Optimization loops: ancillary training, primary training under every
//! self-correction strategy, the three-stage conv-self-correction protocol,
//! and the logit-bias EM baseline.
//!
//! Every run is fully determined by (seed, config, datasets): parameter
//! initialization, batch sampling and gradient accumulation each draw from
//! their own derived stream, per-image passes are folded in batch order, and
//! the optimizer walks parameters in name order.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::boxes::{boxes_to_mask, BoxMaskTensor};
use crate::data::{split_half, Sample};
use crate::dist::{LabelDistribution, OneHotMask, PixelLogits};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::{
    ancillary_forward, bind_params, init_ancillary, init_primary, init_selfcorr, primary_forward, ArchConfig,
};
use crate::params::ParamSet;
use crate::seeding::{self, salt};
use crate::selfcorrect::{
    clamp_outside_boxes, loss_fully_supervised, loss_weak, qconv_loss_on_detached, target_distribution,
    AlphaSchedule, Strategy,
};
use crate::tensor::Tensor;

/// How weak-set targets are produced during primary training. Extends the
/// self-correction strategies with the logit-bias EM baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetMode {
    NoSelfCorrection,
    LinearSelfCorrection,
    ConvSelfCorrection,
    EmFixed,
}

impl From<Strategy> for TargetMode {
    fn from(s: Strategy) -> Self {
        match s {
            Strategy::NoSelfCorrection => TargetMode::NoSelfCorrection,
            Strategy::LinearSelfCorrection => TargetMode::LinearSelfCorrection,
            Strategy::ConvSelfCorrection => TargetMode::ConvSelfCorrection,
        }
    }
}

impl std::str::FromStr for TargetMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(TargetMode::NoSelfCorrection),
            "linear" => Ok(TargetMode::LinearSelfCorrection),
            "conv" => Ok(TargetMode::ConvSelfCorrection),
            "em-fixed" | "em_fixed" => Ok(TargetMode::EmFixed),
            other => Err(Error::invalid("TargetMode", format!("unknown strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for TargetMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            TargetMode::NoSelfCorrection => "none",
            TargetMode::LinearSelfCorrection => "linear",
            TargetMode::ConvSelfCorrection => "conv",
            TargetMode::EmFixed => "em-fixed",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Polynomial learning-rate decay exponent: lr * (1 - step/steps)^power.
    pub lr_power: f64,
    pub alpha_start: f64,
    pub alpha_end: f64,
    /// Overrides the schedule with a constant alpha (limit experiments).
    pub alpha_fixed: Option<f64>,
    /// Ablation flag: force weak targets to background outside all boxes.
    pub clamp_outside_boxes: bool,
    /// Logit bias of the EM-fixed baseline.
    pub em_bias: f64,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.007,
            momentum: 0.9,
            steps: 3000,
            batch_size: 8,
            seed: 0,
            lr_power: 0.9,
            alpha_start: 30.0,
            alpha_end: 0.5,
            alpha_fixed: None,
            clamp_outside_boxes: false,
            em_bias: 5.0,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::invalid("TrainConfig", "total steps must be > 0"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("TrainConfig", "batch size must be >= 1"));
        }
        self.arch.validate()?;
        if self.alpha_fixed.is_none() {
            AlphaSchedule::new(self.alpha_start, self.alpha_end, self.steps)?;
        }
        Ok(())
    }

    fn alpha_at(&self, step: usize) -> f64 {
        match self.alpha_fixed {
            Some(a) => a,
            None => AlphaSchedule {
                alpha_start: self.alpha_start,
                alpha_end: self.alpha_end,
                total_steps: self.steps,
            }
            .alpha_at(step),
        }
    }
}

/// One training step's scalar summaries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// Mean fully supervised loss over F examples in the batch (0 if none).
    pub loss_f: f64,
    /// Mean weak-set loss over W examples in the batch (0 if none).
    pub loss_w: f64,
    /// Mean head loss over F examples in the batch (conv runs only).
    pub loss_qconv: f64,
    pub alpha: f64,
    pub lr: f64,
}

/// Per-step loss traces plus bookkeeping. The JSONL serialization holds the
/// step records only, so it is byte-identical across reruns; wall clock goes
/// to a separate timing file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub checkpoints: Vec<String>,
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl TrainReport {
    pub fn write_jsonl(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::new();
        for rec in &self.steps {
            out.push_str(&serde_json::to_string(rec)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn final_losses(&self) -> Option<&StepRecord> {
        self.steps.last()
    }
}

/// SGD with momentum and polynomial learning-rate decay. Velocity slots are
/// keyed by parameter name and updated in name order.
pub struct Sgd {
    lr0: f64,
    momentum: f64,
    power: f64,
    total_steps: usize,
    velocity: BTreeMap<String, Tensor>,
}

impl Sgd {
    pub fn new(cfg: &TrainConfig) -> Self {
        Sgd {
            lr0: cfg.learning_rate,
            momentum: cfg.momentum,
            power: cfg.lr_power,
            total_steps: cfg.steps,
            velocity: BTreeMap::new(),
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let frac = 1.0 - step as f64 / self.total_steps as f64;
        self.lr0 * frac.max(0.0).powf(self.power)
    }

    /// v = momentum*v + g; p -= lr*v.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &BTreeMap<String, Tensor>, step: usize) {
        let lr = self.lr_at(step);
        for (name, grad) in grads {
            let v = self
                .velocity
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(grad.dims()));
            let p = params.get_mut(name).expect("gradient for unknown parameter");
            for ((vi, gi), pi) in v.data_mut().iter_mut().zip(grad.data()).zip(p.data_mut()) {
                *vi = self.momentum * *vi + gi;
                *pi -= lr * *vi;
            }
        }
    }
}

/// Uniform-with-replacement batch index stream; proportional F/W mixing
/// falls out of drawing uniformly from the concatenated pool.
pub struct BatchSampler {
    rng: rand_chacha::ChaCha8Rng,
    pool: usize,
    batch: usize,
}

impl BatchSampler {
    pub fn new(seed: u64, pool: usize, batch: usize) -> Self {
        BatchSampler {
            rng: seeding::rng(seed, salt::BATCH),
            pool,
            batch,
        }
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        use rand::Rng;
        (0..self.batch).map(|_| self.rng.gen_range(0..self.pool)).collect()
    }
}

/// Caches for values that are constant across a training run: box masks and
/// frozen-ancillary logits. Disabled above a memory cap.
struct ConstCache {
    boxmasks: Option<Vec<OnceLock<BoxMaskTensor>>>,
    anc_logits: Option<Vec<OnceLock<PixelLogits>>>,
}

const CACHE_CAP_BYTES: usize = 256 << 20;

impl ConstCache {
    fn new(n: usize, arch: &ArchConfig) -> Self {
        let per = (arch.num_classes + 1) * arch.height * arch.width * 8;
        let enabled = n.saturating_mul(per).saturating_mul(2) <= CACHE_CAP_BYTES;
        ConstCache {
            boxmasks: enabled.then(|| (0..n).map(|_| OnceLock::new()).collect()),
            anc_logits: enabled.then(|| (0..n).map(|_| OnceLock::new()).collect()),
        }
    }

    fn boxmask(&self, idx: usize, sample: &Sample, arch: &ArchConfig) -> Result<BoxMaskTensor> {
        let compute = || boxes_to_mask(&sample.boxes, arch.num_classes, arch.height, arch.width);
        match &self.boxmasks {
            Some(slots) => {
                if let Some(v) = slots[idx].get() {
                    return Ok(v.clone());
                }
                let v = compute()?;
                Ok(slots[idx].get_or_init(|| v).clone())
            }
            None => compute(),
        }
    }

    fn ancillary_logits(
        &self,
        idx: usize,
        sample: &Sample,
        arch: &ArchConfig,
        theta: &ParamSet,
    ) -> Result<PixelLogits> {
        let compute = || -> Result<PixelLogits> {
            let bm = self.boxmask(idx, sample, arch)?;
            crate::models::eval_ancillary(arch, theta, &sample.image, &bm)
        };
        match &self.anc_logits {
            Some(slots) => {
                if let Some(v) = slots[idx].get() {
                    return Ok(v.clone());
                }
                let v = compute()?;
                Ok(slots[idx].get_or_init(|| v).clone())
            }
            None => compute(),
        }
    }
}

/// Gradients and loss summaries from a single example's forward/backward.
struct ItemOutcome {
    loss_f: f64,
    loss_w: f64,
    loss_q: f64,
    grads: Vec<(String, Tensor)>,
}

fn fold_grads(outcomes: &[ItemOutcome], scale: f64) -> BTreeMap<String, Tensor> {
    let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
    for item in outcomes {
        for (name, g) in &item.grads {
            match acc.get_mut(name) {
                Some(t) => t.add_assign(g),
                None => {
                    acc.insert(name.clone(), g.clone());
                }
            }
        }
    }
    for t in acc.values_mut() {
        t.scale_assign(scale);
    }
    acc
}

fn onehot_of(sample: &Sample, num_classes: usize) -> Result<OneHotMask> {
    let mask = sample.mask.as_ref().ok_or_else(|| Error::BadSample {
        id: sample.id.clone(),
        what: "missing ground-truth mask".into(),
    })?;
    OneHotMask::from_class_map(mask, num_classes)
}

/// Forward/backward for one ancillary training example.
fn ancillary_item_pass(
    arch: &ArchConfig,
    theta: &ParamSet,
    sample: &Sample,
    boxmask: &BoxMaskTensor,
) -> Result<ItemOutcome> {
    let y = onehot_of(sample, arch.num_classes)?;
    let mut g = Graph::new();
    let nodes = bind_params(&mut g, theta, true);
    let img = g.leaf(sample.image.clone(), false);
    let bm = g.leaf(boxmask.mask.clone(), false);
    let logits = ancillary_forward(&mut g, &nodes, arch, img, bm)?;
    let loss = loss_fully_supervised(&mut g, logits, &y)?;
    g.backward(loss)?;
    let mut grads = Vec::new();
    for (name, &id) in nodes.iter() {
        grads.push((name.clone(), g.take_grad(id).expect("param grad")));
    }
    Ok(ItemOutcome {
        loss_f: g.value(loss).item(),
        loss_w: 0.0,
        loss_q: 0.0,
        grads,
    })
}

/// Forward/backward for one primary training example.
///
/// F examples contribute the supervised term (plus the head term under the
/// conv mode); W examples contribute the weak term against the constant
/// target of the chosen mode. `include_qconv_term` exists so tests can assert
/// the head receives gradient only through that term.
#[allow(clippy::too_many_arguments)]
fn primary_item_pass(
    mode: TargetMode,
    arch: &ArchConfig,
    phi: &ParamSet,
    lambda: Option<&ParamSet>,
    sample: &Sample,
    is_fully: bool,
    l_anc: Option<&PixelLogits>,
    boxmask: Option<&BoxMaskTensor>,
    alpha: f64,
    clamp: bool,
    em_bias: f64,
    include_qconv_term: bool,
) -> Result<ItemOutcome> {
    let mut g = Graph::new();
    let phi_nodes = bind_params(&mut g, phi, true);
    let img = g.leaf(sample.image.clone(), false);
    let l = primary_forward(&mut g, &phi_nodes, arch, img)?;

    let mut loss_f = 0.0;
    let mut loss_w = 0.0;
    let mut loss_q = 0.0;
    let mut grads = Vec::new();

    if is_fully {
        let y = onehot_of(sample, arch.num_classes)?;
        let sup = loss_fully_supervised(&mut g, l, &y)?;
        loss_f = g.value(sup).item();
        let total = if mode == TargetMode::ConvSelfCorrection && include_qconv_term {
            let lambda = lambda.ok_or(Error::MissingSelfCorrHead)?;
            let lam_nodes = bind_params(&mut g, lambda, true);
            let l_const = g.detach(l);
            let anc = l_anc.expect("conv mode needs ancillary logits on F");
            let anc_const = g.leaf(anc.scores.clone(), false);
            let ql = qconv_loss_on_detached(&mut g, &lam_nodes, l_const, anc_const, &y)?;
            loss_q = g.value(ql).item();
            let total = g.add(sup, ql)?;
            g.backward(total)?;
            for (name, &id) in lam_nodes.iter() {
                grads.push((name.clone(), g.take_grad(id).expect("lambda grad")));
            }
            total
        } else {
            g.backward(sup)?;
            sup
        };
        let _ = total;
    } else {
        let l_val = PixelLogits::new(g.value(l).clone())?;
        let anc = l_anc.expect("weak example needs ancillary logits");
        let mut q: LabelDistribution = match mode {
            TargetMode::NoSelfCorrection => target_distribution(Strategy::NoSelfCorrection, &l_val, anc, None, alpha)?,
            TargetMode::LinearSelfCorrection => {
                target_distribution(Strategy::LinearSelfCorrection, &l_val, anc, None, alpha)?
            }
            TargetMode::ConvSelfCorrection => {
                target_distribution(Strategy::ConvSelfCorrection, &l_val, anc, lambda, alpha)?
            }
            TargetMode::EmFixed => {
                let bm = boxmask.expect("em-fixed needs a boxmask");
                em_fixed_target(&l_val, bm, em_bias)?
            }
        };
        if clamp {
            let bm = boxmask.expect("clamp needs a boxmask");
            clamp_outside_boxes(&mut q, bm);
        }
        let weak = loss_weak(&mut g, l, &q)?;
        loss_w = g.value(weak).item();
        g.backward(weak)?;
    }

    for (name, &id) in phi_nodes.iter() {
        if let Some(grad) = g.take_grad(id) {
            grads.push((name.clone(), grad));
        }
    }
    Ok(ItemOutcome { loss_f, loss_w, loss_q, grads })
}

/// Output of ancillary training.
#[derive(Debug)]
pub struct AncillaryOutput {
    pub theta: ParamSet,
    pub report: TrainReport,
}

/// Minimize the supervised NLL of the box-conditioned model on F; returns
/// theta, which callers hold fixed afterwards.
pub fn train_ancillary(fully: &[Sample], cfg: &TrainConfig) -> Result<AncillaryOutput> {
    cfg.validate()?;
    if fully.is_empty() {
        return Err(Error::invalid("train_ancillary", "empty fully supervised set"));
    }
    for s in fully {
        if s.mask.is_none() {
            return Err(Error::BadSample {
                id: s.id.clone(),
                what: "ancillary training requires masks on every F sample".into(),
            });
        }
    }
    let start = Instant::now();
    let arch = &cfg.arch;
    let mut theta = init_ancillary(arch, seeding::derive(cfg.seed, salt::INIT_ANCILLARY))?;
    let cache = ConstCache::new(fully.len(), arch);
    let mut sampler = BatchSampler::new(cfg.seed, fully.len(), cfg.batch_size);
    let mut sgd = Sgd::new(cfg);
    let mut report = TrainReport::default();

    for step in 0..cfg.steps {
        let batch = sampler.next_batch();
        let outcomes: Vec<ItemOutcome> = batch
            .par_iter()
            .map(|&idx| {
                let bm = cache.boxmask(idx, &fully[idx], arch)?;
                ancillary_item_pass(arch, &theta, &fully[idx], &bm)
            })
            .collect::<Result<Vec<_>>>()?;
        let grads = fold_grads(&outcomes, 1.0 / cfg.batch_size as f64);
        let loss_f = outcomes.iter().map(|o| o.loss_f).sum::<f64>() / outcomes.len() as f64;
        if !loss_f.is_finite() {
            return Err(Error::invalid("train_ancillary", format!("non-finite loss at step {step}")));
        }
        sgd.apply(&mut theta, &grads, step);
        report.steps.push(StepRecord {
            step,
            loss_f,
            loss_w: 0.0,
            loss_qconv: 0.0,
            alpha: 0.0,
            lr: sgd.lr_at(step),
        });
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(AncillaryOutput { theta, report })
}

/// Output of primary training.
#[derive(Debug)]
pub struct PrimaryOutput {
    pub phi: ParamSet,
    pub lambda: Option<ParamSet>,
    pub report: TrainReport,
}

/// Train the primary model from a fresh initialization. The conv mode
/// requires a pretrained head (see [`run_protocol_conv`] for the pretraining
/// stage); passing `None` is an error.
pub fn train_primary(
    mode: TargetMode,
    fully: &[Sample],
    weak: &[Sample],
    theta: &ParamSet,
    lambda0: Option<ParamSet>,
    cfg: &TrainConfig,
) -> Result<PrimaryOutput> {
    let phi0 = init_primary(&cfg.arch, seeding::derive(cfg.seed, salt::INIT_PRIMARY))?;
    train_primary_from(mode, fully, weak, theta, phi0, lambda0, cfg)
}

/// Train the primary model from explicit starting parameters (used by the
/// fine-tuning stage of the conv protocol).
pub fn train_primary_from(
    mode: TargetMode,
    fully: &[Sample],
    weak: &[Sample],
    theta: &ParamSet,
    phi0: ParamSet,
    lambda0: Option<ParamSet>,
    cfg: &TrainConfig,
) -> Result<PrimaryOutput> {
    cfg.validate()?;
    if mode == TargetMode::ConvSelfCorrection && lambda0.is_none() {
        return Err(Error::MissingSelfCorrHead);
    }
    if fully.is_empty() && weak.is_empty() {
        return Err(Error::invalid("train_primary", "no training data"));
    }
    for s in fully {
        if s.mask.is_none() {
            return Err(Error::BadSample {
                id: s.id.clone(),
                what: "F sample without mask".into(),
            });
        }
    }
    let start = Instant::now();
    let arch = &cfg.arch;
    let mut phi = phi0;
    let mut lambda = lambda0;
    let pool: Vec<&Sample> = fully.iter().chain(weak.iter()).collect();
    let n_fully = fully.len();
    let cache = ConstCache::new(pool.len(), arch);
    let mut sampler = BatchSampler::new(cfg.seed, pool.len(), cfg.batch_size);
    let mut sgd_phi = Sgd::new(cfg);
    let mut sgd_lambda = Sgd::new(cfg);
    let mut report = TrainReport::default();

    // Conv mode needs ancillary logits on F (head term) and on W (targets);
    // linear/none need them on W only; em-fixed never does.
    let needs_anc = |is_fully: bool| match mode {
        TargetMode::ConvSelfCorrection => true,
        TargetMode::EmFixed => false,
        _ => !is_fully,
    };
    let needs_boxmask = cfg.clamp_outside_boxes || mode == TargetMode::EmFixed;

    for step in 0..cfg.steps {
        let alpha = cfg.alpha_at(step);
        let batch = sampler.next_batch();
        let phi_ref = &phi;
        let lambda_ref = lambda.as_ref();
        let outcomes: Vec<ItemOutcome> = batch
            .par_iter()
            .map(|&idx| {
                let sample = pool[idx];
                let is_fully = idx < n_fully;
                let l_anc = if needs_anc(is_fully) {
                    Some(cache.ancillary_logits(idx, sample, arch, theta)?)
                } else {
                    None
                };
                let bm = if !is_fully && needs_boxmask {
                    Some(cache.boxmask(idx, sample, arch)?)
                } else {
                    None
                };
                primary_item_pass(
                    mode,
                    arch,
                    phi_ref,
                    lambda_ref,
                    sample,
                    is_fully,
                    l_anc.as_ref(),
                    bm.as_ref(),
                    alpha,
                    cfg.clamp_outside_boxes,
                    cfg.em_bias,
                    true,
                )
            })
            .collect::<Result<Vec<_>>>()?;

        let all = fold_grads(&outcomes, 1.0 / cfg.batch_size as f64);
        let mut phi_grads = BTreeMap::new();
        let mut lambda_grads = BTreeMap::new();
        for (name, g) in all {
            if name.starts_with("sc") {
                lambda_grads.insert(name, g);
            } else {
                phi_grads.insert(name, g);
            }
        }

        let nf = batch.iter().filter(|&&i| i < n_fully).count();
        let nw = batch.len() - nf;
        let mean = |v: f64, n: usize| if n == 0 { 0.0 } else { v / n as f64 };
        let rec = StepRecord {
            step,
            loss_f: mean(outcomes.iter().map(|o| o.loss_f).sum(), nf),
            loss_w: mean(outcomes.iter().map(|o| o.loss_w).sum(), nw),
            loss_qconv: mean(outcomes.iter().map(|o| o.loss_q).sum(), nf),
            alpha,
            lr: sgd_phi.lr_at(step),
        };
        if !(rec.loss_f.is_finite() && rec.loss_w.is_finite() && rec.loss_qconv.is_finite()) {
            return Err(Error::invalid("train_primary", format!("non-finite loss at step {step}")));
        }
        sgd_phi.apply(&mut phi, &phi_grads, step);
        if let Some(lam) = lambda.as_mut() {
            if !lambda_grads.is_empty() {
                sgd_lambda.apply(lam, &lambda_grads, step);
            }
        }
        report.steps.push(rec);
    }
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(PrimaryOutput { phi, lambda, report })
}

/// Target for the EM-fixed baseline: bias the logit of class c inside class-c
/// boxes and the background logit outside all boxes, then softmax.
pub fn em_fixed_target(l: &PixelLogits, boxmask: &BoxMaskTensor, bias: f64) -> Result<LabelDistribution> {
    if l.scores.dims() != boxmask.mask.dims() {
        return Err(Error::shape(
            "em_fixed_target",
            "dims",
            format!("{:?}", boxmask.mask.dims()),
            format!("{:?}", l.scores.dims()),
        ));
    }
    let mut shifted = l.scores.clone();
    for (v, &m) in shifted.data_mut().iter_mut().zip(boxmask.mask.data()) {
        if m == 1.0 {
            *v += bias;
        }
    }
    Ok(crate::dist::make_factorial(&PixelLogits::new(shifted)?))
}

/// Per-stage step counts for the three-stage conv protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub train: TrainConfig,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage3_steps: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        ProtocolConfig {
            stage1_steps: train.steps,
            stage2_steps: train.steps,
            stage3_steps: train.steps,
            train,
        }
    }
}

impl ProtocolConfig {
    pub fn uniform(train: TrainConfig) -> Self {
        ProtocolConfig {
            stage1_steps: train.steps,
            stage2_steps: train.steps,
            stage3_steps: train.steps,
            train,
        }
    }

    fn stage_cfg(&self, steps: usize) -> TrainConfig {
        TrainConfig { steps, ..self.train.clone() }
    }
}

/// Everything the three-stage protocol produces, including the stage-2 model
/// so the fine-tuning gain is measurable.
pub struct ProtocolOutput {
    pub theta: ParamSet,
    pub phi: ParamSet,
    pub lambda: ParamSet,
    pub stage2_phi: ParamSet,
    pub stage2_lambda: ParamSet,
    /// Ids of the F half held out from ancillary training.
    pub held_out_ids: Vec<String>,
    pub reports: [TrainReport; 3],
}

/// Stages 2 and 3 given a trained ancillary model: pretrain the primary and
/// head on F alone (supervised + head terms), then fine-tune on F and W with
/// the full objective.
pub fn run_conv_after_ancillary(
    fully: &[Sample],
    weak: &[Sample],
    theta: &ParamSet,
    pcfg: &ProtocolConfig,
) -> Result<(ParamSet, ParamSet, [TrainReport; 2])> {
    let cfg2 = pcfg.stage_cfg(pcfg.stage2_steps);
    let lambda0 = init_selfcorr(&cfg2.arch, seeding::derive(cfg2.seed, salt::INIT_SELFCORR))?;
    let stage2 = train_primary(
        TargetMode::ConvSelfCorrection,
        fully,
        &[],
        theta,
        Some(lambda0),
        &cfg2,
    )?;
    let cfg3 = pcfg.stage_cfg(pcfg.stage3_steps);
    let stage3 = train_primary_from(
        TargetMode::ConvSelfCorrection,
        fully,
        weak,
        theta,
        stage2.phi.clone(),
        stage2.lambda.clone(),
        &cfg3,
    )?;
    let lambda = stage3.lambda.clone().expect("conv training returns a head");
    Ok((stage3.phi, lambda, [stage2.report, stage3.report]))
}

/// The full three-stage protocol: train the ancillary on half of F, pretrain
/// primary+head on all of F, fine-tune on F and W.
pub fn run_protocol_conv(fully: &[Sample], weak: &[Sample], pcfg: &ProtocolConfig) -> Result<ProtocolOutput> {
    if fully.len() < 2 {
        return Err(Error::invalid("run_protocol_conv", "need at least 2 fully supervised samples"));
    }
    let (half_a, half_b) = split_half(fully, pcfg.train.seed)?;
    let cfg1 = pcfg.stage_cfg(pcfg.stage1_steps);
    let anc = train_ancillary(&half_a, &cfg1)?;

    // Re-run stage 2 separately so its endpoint is preserved for comparison.
    let cfg2 = pcfg.stage_cfg(pcfg.stage2_steps);
    let lambda0 = init_selfcorr(&cfg2.arch, seeding::derive(cfg2.seed, salt::INIT_SELFCORR))?;
    let stage2 = train_primary(
        TargetMode::ConvSelfCorrection,
        fully,
        &[],
        &anc.theta,
        Some(lambda0),
        &cfg2,
    )?;
    let cfg3 = pcfg.stage_cfg(pcfg.stage3_steps);
    let stage3 = train_primary_from(
        TargetMode::ConvSelfCorrection,
        fully,
        weak,
        &anc.theta,
        stage2.phi.clone(),
        stage2.lambda.clone(),
        &cfg3,
    )?;

    Ok(ProtocolOutput {
        theta: anc.theta,
        phi: stage3.phi,
        lambda: stage3.lambda.expect("conv training returns a head"),
        stage2_phi: stage2.phi,
        stage2_lambda: stage2.lambda.expect("conv training returns a head"),
        held_out_ids: half_b.iter().map(|s| s.id.clone()).collect(),
        reports: [anc.report, stage2.report, stage3.report],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, split_dataset, SceneConfig};
    use crate::models::ModelKind;

    fn tiny_arch() -> ArchConfig {
        ArchConfig {
            num_classes: 2,
            height: 16,
            width: 16,
            encoder_widths: vec![6, 10, 12],
            decoder_width: 10,
            tap_coarse: 3,
            tap_fine: 0,
            head_hidden: 16,
        }
    }

    fn tiny_scene() -> SceneConfig {
        SceneConfig {
            height: 16,
            width: 16,
            num_classes: 2,
            shapes_min: 1,
            shapes_max: 2,
            num_images: 10,
            ..SceneConfig::default()
        }
    }

    fn tiny_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            seed: 7,
            arch: tiny_arch(),
            ..TrainConfig::default()
        }
    }

    fn bits(ps: &ParamSet) -> Vec<u64> {
        ps.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
    }

    #[test]
    fn em_fixed_target_examples() {
        use crate::boxes::BoxAnnotation;
        let l = PixelLogits::new(Tensor::new(vec![3, 1, 1], vec![0.2, 0.7, -0.4]).unwrap()).unwrap();
        let bm = boxes_to_mask(&[BoxAnnotation::new(1, 0, 0, 1, 1)], 2, 1, 1).unwrap();

        // bias 0: softmax(l) unchanged.
        let q0 = em_fixed_target(&l, &bm, 0.0).unwrap();
        assert_eq!(q0.probs.data(), crate::dist::make_factorial(&l).probs.data());

        // bias 1e6: argmax inside the class-1 box is class 1.
        let qsat = em_fixed_target(&l, &bm, 1e6).unwrap();
        assert!(qsat.probs.data()[1] > 0.999);

        // bias 5: hand-computed shifted softmax [0.2, 5.7, -0.4].
        let q5 = em_fixed_target(&l, &bm, 5.0).unwrap();
        let e: Vec<f64> = [0.2f64, 5.7, -0.4].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..3 {
            assert!((q5.probs.data()[c] - e[c] / z).abs() < 1e-12);
        }

        // Pixel outside every box: background channel gets the bias.
        let bm_empty = boxes_to_mask(&[], 2, 1, 1).unwrap();
        let qbg = em_fixed_target(&l, &bm_empty, 1e6).unwrap();
        assert!(qbg.probs.data()[0] > 0.999);
    }

    #[test]
    fn ancillary_training_reduces_loss_and_freezes_cleanly() {
        let samples = generate_dataset(&tiny_scene(), 11).unwrap();
        let out = train_ancillary(&samples, &tiny_cfg(30)).unwrap();
        let first = out.report.steps.first().unwrap().loss_f;
        let last = out.report.steps.last().unwrap().loss_f;
        assert!(last < first, "loss should fall: {first} -> {last}");
        assert!(out.report.steps.iter().all(|r| r.loss_f.is_finite()));

        // Frozen during primary training: bit-identical before and after.
        let split = split_dataset(&samples, 4, 1).unwrap();
        let before = bits(&out.theta);
        let _ = train_primary(
            TargetMode::NoSelfCorrection,
            &split.fully,
            &split.weak,
            &out.theta,
            None,
            &tiny_cfg(5),
        )
        .unwrap();
        assert_eq!(before, bits(&out.theta));
    }

    #[test]
    fn ancillary_requires_masks() {
        let samples = generate_dataset(&tiny_scene(), 12).unwrap();
        let mut broken = samples.clone();
        broken[0].mask = None;
        let err = train_ancillary(&broken, &tiny_cfg(3)).unwrap_err();
        assert!(err.to_string().contains("img_000000"), "{err}");
    }

    #[test]
    fn conv_without_pretrained_head_errors() {
        let samples = generate_dataset(&tiny_scene(), 13).unwrap();
        let split = split_dataset(&samples, 4, 1).unwrap();
        let theta = init_ancillary(&tiny_arch(), 1).unwrap();
        let err = train_primary(
            TargetMode::ConvSelfCorrection,
            &split.fully,
            &split.weak,
            &theta,
            None,
            &tiny_cfg(3),
        )
        .unwrap_err();
        assert!(matches!(err, Error::MissingSelfCorrHead));
    }

    #[test]
    fn empty_weak_set_gives_identical_traces_across_strategies() {
        let samples = generate_dataset(&tiny_scene(), 14).unwrap();
        let fully = &samples[..6];
        let theta = init_ancillary(&tiny_arch(), 3).unwrap();
        let cfg = tiny_cfg(8);
        let lambda0 = init_selfcorr(&tiny_arch(), 99).unwrap();

        let a = train_primary(TargetMode::NoSelfCorrection, fully, &[], &theta, None, &cfg).unwrap();
        let b = train_primary(TargetMode::LinearSelfCorrection, fully, &[], &theta, None, &cfg).unwrap();
        let c = train_primary(TargetMode::ConvSelfCorrection, fully, &[], &theta, Some(lambda0), &cfg).unwrap();
        let trace = |r: &TrainReport| r.steps.iter().map(|s| (s.loss_f, s.loss_w)).collect::<Vec<_>>();
        assert_eq!(trace(&a.report), trace(&b.report));
        assert_eq!(trace(&a.report), trace(&c.report));
        // The supervised trajectory of phi is unaffected by the head term.
        assert_eq!(bits(&a.phi), bits(&c.phi));
    }

    #[test]
    fn training_is_bit_deterministic() {
        let samples = generate_dataset(&tiny_scene(), 15).unwrap();
        let split = split_dataset(&samples, 4, 2).unwrap();
        let theta = init_ancillary(&tiny_arch(), 5).unwrap();
        let cfg = tiny_cfg(6);
        let run = || {
            train_primary(
                TargetMode::LinearSelfCorrection,
                &split.fully,
                &split.weak,
                &theta,
                None,
                &cfg,
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(bits(&a.phi), bits(&b.phi));
        assert_eq!(a.report.steps, b.report.steps);
    }

    #[test]
    fn lambda_gradient_comes_only_from_the_head_term() {
        let samples = generate_dataset(&tiny_scene(), 16).unwrap();
        let sample = samples.iter().find(|s| !s.boxes.is_empty()).unwrap();
        let arch = tiny_arch();
        let phi = init_primary(&arch, 1).unwrap();
        let lambda = init_selfcorr(&arch, 2).unwrap();
        let theta = init_ancillary(&arch, 3).unwrap();
        let bm = boxes_to_mask(&sample.boxes, arch.num_classes, arch.height, arch.width).unwrap();
        let l_anc = crate::models::eval_ancillary(&arch, &theta, &sample.image, &bm).unwrap();

        let with = primary_item_pass(
            TargetMode::ConvSelfCorrection,
            &arch,
            &phi,
            Some(&lambda),
            sample,
            true,
            Some(&l_anc),
            None,
            1.0,
            false,
            5.0,
            true,
        )
        .unwrap();
        let without = primary_item_pass(
            TargetMode::ConvSelfCorrection,
            &arch,
            &phi,
            Some(&lambda),
            sample,
            true,
            Some(&l_anc),
            None,
            1.0,
            false,
            5.0,
            false,
        )
        .unwrap();
        let lam_grads = |o: &ItemOutcome| {
            o.grads
                .iter()
                .filter(|(n, _)| n.starts_with("sc"))
                .map(|(_, g)| g.data().iter().map(|v| v.abs()).sum::<f64>())
                .sum::<f64>()
        };
        assert!(lam_grads(&with) > 0.0);
        assert_eq!(lam_grads(&without), 0.0);
        // The supervised phi gradient is identical either way.
        let phi_grad = |o: &ItemOutcome, name: &str| {
            o.grads.iter().find(|(n, _)| n == name).map(|(_, g)| g.clone()).unwrap()
        };
        assert_eq!(
            phi_grad(&with, "dec2.weight").data(),
            phi_grad(&without, "dec2.weight").data()
        );
    }

    #[test]
    fn protocol_runs_and_preserves_stage2_model() {
        let samples = generate_dataset(
            &SceneConfig { num_images: 12, ..tiny_scene() },
            17,
        )
        .unwrap();
        let split = split_dataset(&samples, 6, 3).unwrap();
        let pcfg = ProtocolConfig {
            stage1_steps: 6,
            stage2_steps: 6,
            stage3_steps: 6,
            train: tiny_cfg(6),
        };
        let out = run_protocol_conv(&split.fully, &split.weak, &pcfg).unwrap();
        assert_eq!(out.held_out_ids.len(), 3);
        assert_eq!(out.reports[0].steps.len(), 6);
        // Stage 3 starts from stage 2 and moves away from it.
        assert_ne!(bits(&out.stage2_phi), bits(&out.phi));
        // Evaluma the final primary model shape-checks end to end.
        let r = crate::eval::evaluate(
            ModelKind::Primary,
            &pcfg.train.arch,
            &out.phi,
            &split.fully,
            &crate::eval::EvalFlags::default(),
        )
        .unwrap();
        assert!(r.miou() >= 0.0 && r.miou() <= 1.0);
    }

    #[test]
    fn overfit_four_samples_reaches_high_train_miou() {
        let scene = SceneConfig { num_images: 4, ..tiny_scene() };
        let samples = generate_dataset(&scene, 18).unwrap();
        let cfg = TrainConfig {
            steps: 400,
            batch_size: 4,
            seed: 1,
            learning_rate: 0.05,
            arch: tiny_arch(),
            ..TrainConfig::default()
        };
        let out = train_ancillary(&samples, &cfg).unwrap();
        let r = crate::eval::evaluate(
            ModelKind::Ancillary,
            &cfg.arch,
            &out.theta,
            &samples,
            &crate::eval::EvalFlags::default(),
        )
        .unwrap();
        assert!(r.miou() > 0.95, "train mIOU {:.3}", r.miou());
    }
}
