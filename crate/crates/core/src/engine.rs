//! The adaptation training loop: encoder `E`, generator `G`, patch
//! discriminator `D`, and pixel classifier `S`, trained by alternating
//! updates.
//!
//! Per step, on one source and one target image:
//!
//! 1. `D` update — binary cross entropy scoring reconstructions
//!    `D(G(E(x)))` with the true domain labels (source = 0, target = 1).
//! 2. `G` update — the same scores against flipped labels (fooling), plus a
//!    weighted L1 reconstruction term.
//! 3. `E` update — cross-domain adversarial term (flipped labels again)
//!    plus the segmentation loss of `S(E(x))` on the labeled source image;
//!    `S` is updated together with `E`.
//!
//! Each adversarial loss is recorded as its source term plus target term.
//! The segmentation loss switches from the warm-phase spec to the main spec
//! at `warm_start_steps`; a cold start (`warm_start_steps = 0`) requires the
//! clamped main loss.
//!
//! Every stochastic choice (init, batch order, generator noise) flows from
//! the schedule seed through per-purpose derived streams, so reruns are
//! bit-identical.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_stream, Dataset, DatasetConfig, Sample};
use crate::error::{Error, Result};
use crate::loss::{pixelwise_loss, LossSpec, ProbPolicy};
use crate::metrics::Confusion;
use crate::nn::{
    load_networks_into, save_networks, AdamHyper, LayerSpec, Mode, Network, Trace,
};
use crate::tensor::Tensor;

/// Domain label fed to the discriminator for source-domain images.
pub const SOURCE_LABEL: f64 = 0.0;
/// Domain label fed to the discriminator for target-domain images.
pub const TARGET_LABEL: f64 = 1.0;

// Stream namespaces for `derive_stream`; chosen clear of the dataset
// module's split ids so a shared seed never aliases a dataset stream.
const STREAM_INIT: u64 = 16;
const STREAM_SAMPLING: u64 = 17;
const STREAM_NOISE: u64 = 18;

const SUBSTEP_D: u64 = 0;
const SUBSTEP_G: u64 = 1;
const SUBSTEP_E: u64 = 2;

/// Architecture knobs for the four blocks.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Embedding channels produced by `E` (and consumed by `G` and `S`).
    pub embed_channels: usize,
    /// Hidden channels in `D`'s first reduction.
    pub disc_channels: usize,
    /// Standard deviation of the Gaussian noise on `G`'s input.
    pub noise_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_channels: 16,
            disc_channels: 8,
            noise_std: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_channels == 0 || self.disc_channels == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise std must be finite and >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(())
    }
}

/// The four parameterized blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub encoder: Network,
    pub generator: Network,
    pub discriminator: Network,
    pub classifier: Network,
}

impl ModelState {
    /// Writes all four blocks to one checkpoint file.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_networks(
            path,
            &[
                ("encoder", &self.encoder),
                ("generator", &self.generator),
                ("discriminator", &self.discriminator),
                ("classifier", &self.classifier),
            ],
        )
    }

    /// Restores parameter values from a checkpoint written by [`Self::save`].
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let Self {
            encoder,
            generator,
            discriminator,
            classifier,
        } = self;
        load_networks_into(
            path,
            &mut [
                ("encoder", encoder),
                ("generator", generator),
                ("discriminator", discriminator),
                ("classifier", classifier),
            ],
        )
    }
}

/// Builds and initializes all four blocks for the dataset's shapes,
/// deterministically from `seed`.
pub fn build_models(
    data: &DatasetConfig,
    model: &ModelConfig,
    seed: u64,
) -> Result<ModelState> {
    data.validate()?;
    model.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_stream(seed, STREAM_INIT, 0, 0));
    let emb = model.embed_channels;
    let encoder = Network::new(
        &[
            LayerSpec::Conv3x3 { in_channels: data.c, out_channels: emb, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv3x3 { in_channels: emb, out_channels: emb, stride: 1 },
            LayerSpec::Relu,
        ],
        &mut rng,
    )?;
    let generator = Network::new(
        &[
            LayerSpec::GaussianNoise { std: model.noise_std },
            LayerSpec::Conv3x3 { in_channels: emb, out_channels: emb, stride: 1 },
            LayerSpec::Relu,
            LayerSpec::Conv3x3 { in_channels: emb, out_channels: data.c, stride: 1 },
            LayerSpec::Tanh,
        ],
        &mut rng,
    )?;
    let discriminator = Network::new(
        &[
            LayerSpec::Conv3x3 { in_channels: data.c, out_channels: model.disc_channels, stride: 2 },
            LayerSpec::Relu,
            LayerSpec::Conv3x3 { in_channels: model.disc_channels, out_channels: 1, stride: 2 },
            LayerSpec::Sigmoid,
        ],
        &mut rng,
    )?;
    let classifier = Network::new(
        &[
            LayerSpec::Dense { in_features: emb, out_features: data.k },
            LayerSpec::SoftmaxPerPixel,
        ],
        &mut rng,
    )?;

    // Shape contract: E out = G in = S in; D consumes G's output shape.
    let image = vec![data.h, data.w, data.c];
    let embed_shape = encoder.output_shape(&image)?;
    if embed_shape != [data.h, data.w, emb] {
        return Err(Error::Structure(format!(
            "encoder output {embed_shape:?} does not match [{}, {}, {emb}]",
            data.h, data.w
        )));
    }
    let recon_shape = generator.output_shape(&embed_shape)?;
    if recon_shape != image {
        return Err(Error::Structure(format!(
            "generator output {recon_shape:?} does not match image shape {image:?}"
        )));
    }
    discriminator.output_shape(&recon_shape)?;
    let probs_shape = classifier.output_shape(&embed_shape)?;
    if probs_shape != [data.h, data.w, data.k] {
        return Err(Error::Structure(format!(
            "classifier output {probs_shape:?} does not match [{}, {}, {}]",
            data.h, data.w, data.k
        )));
    }
    Ok(ModelState {
        encoder,
        generator,
        discriminator,
        classifier,
    })
}

/// Step counts, optimizer settings, and the warm/cold loss schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSchedule {
    pub total_steps: usize,
    /// Steps trained with `seg_loss_warm` before switching; 0 = cold start.
    pub warm_start_steps: usize,
    pub eval_every: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seg_loss_warm: LossSpec,
    pub seg_loss_main: LossSpec,
    pub recon_weight: f64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self::warm_start(200, 1)
    }
}

impl TrainSchedule {
    /// Warm start: cross entropy for the first half, then the unclamped
    /// main loss.
    pub fn warm_start(total_steps: usize, seed: u64) -> Self {
        Self {
            total_steps,
            warm_start_steps: total_steps / 2,
            eval_every: (total_steps / 20).max(1),
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seg_loss_warm: LossSpec::cross_entropy(),
            seg_loss_main: LossSpec::conservative(std::f64::consts::E, 5.0),
            recon_weight: 1.0,
            seed,
        }
    }

    /// Cold start: the clamped main loss from the very first step.
    pub fn cold_start(total_steps: usize, seed: u64) -> Self {
        Self {
            warm_start_steps: 0,
            seg_loss_main: LossSpec::conservative(std::f64::consts::E, 5.0)
                .with_clamp(-10.0, 10.0),
            ..Self::warm_start(total_steps, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 {
            return Err(Error::Config("total_steps must be >= 1".into()));
        }
        if self.warm_start_steps > self.total_steps {
            return Err(Error::Config(format!(
                "warm_start_steps {} exceeds total_steps {}",
                self.warm_start_steps, self.total_steps
            )));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        if !(self.recon_weight >= 0.0 && self.recon_weight.is_finite()) {
            return Err(Error::Config(format!(
                "recon_weight must be finite and >= 0, got {}",
                self.recon_weight
            )));
        }
        self.seg_loss_warm.validate()?;
        self.seg_loss_main.validate()?;
        if self.warm_start_steps == 0 && self.seg_loss_main.clamp.is_none() {
            return Err(Error::Config(
                "cold start requires a clamped main segmentation loss".into(),
            ));
        }
        if self.warm_start_steps > 0 && self.seg_loss_main.clamp.is_some() {
            return Err(Error::Config(
                "warm start must not clamp the main segmentation loss".into(),
            ));
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps_hat: 1e-8,
        }
    }
}

/// The segmentation loss in force at (zero-based) `step`.
pub fn select_active_loss(schedule: &TrainSchedule, step: usize) -> LossSpec {
    if step < schedule.warm_start_steps {
        schedule.seg_loss_warm
    } else {
        schedule.seg_loss_main
    }
}

/// Which parts of the framework train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Encoder + classifier under the segmentation loss only; `G` and `D`
    /// never run and no adversarial terms enter the encoder update.
    SegOnly,
    /// The full alternating scheme.
    SegPlusGan,
}

/// Loss components of one full training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    /// One-based step number as reported in histories.
    pub step: usize,
    pub l_gan_d: f64,
    pub l_gan_g: f64,
    pub l_gan_e: f64,
    pub l_rec: f64,
    pub l_seg_s: f64,
}

/// Discriminator-update report.
#[derive(Debug, Clone, Copy)]
pub struct DStep {
    pub total: f64,
    pub source_term: f64,
    pub target_term: f64,
    /// `(source, target)` domain labels scored against.
    pub labels_used: (f64, f64),
}

/// Generator-update report.
#[derive(Debug, Clone, Copy)]
pub struct GStep {
    pub l_gan_g: f64,
    pub source_term: f64,
    pub target_term: f64,
    pub l_rec: f64,
    /// `l_gan_g + recon_weight * l_rec`.
    pub total: f64,
    pub labels_used: (f64, f64),
}

/// Encoder-update report.
#[derive(Debug, Clone, Copy)]
pub struct EStep {
    pub l_gan_e: f64,
    pub source_term: f64,
    pub target_term: f64,
    pub l_seg_s: f64,
    pub total: f64,
    pub labels_used: (f64, f64),
}

/// One history row; mIoU fields are populated on evaluation steps only.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryRecord {
    pub losses: StepLosses,
    pub source_miou: Option<f64>,
    pub target_miou: Option<f64>,
    pub active_loss: &'static str,
}

/// Time-indexed training record, serializable to CSV.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunHistory {
    pub records: Vec<HistoryRecord>,
}

impl RunHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "step,l_gan_d,l_gan_g,l_gan_e,l_rec,l_seg_s,source_miou,target_miou,active_loss\n",
        );
        for r in &self.records {
            let opt = |v: Option<f64>| match v {
                Some(x) => format!("{x:.6}"),
                None => String::new(),
            };
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}\n",
                r.losses.step,
                r.losses.l_gan_d,
                r.losses.l_gan_g,
                r.losses.l_gan_e,
                r.losses.l_rec,
                r.losses.l_seg_s,
                opt(r.source_miou),
                opt(r.target_miou),
                r.active_loss,
            ));
        }
        out
    }

    /// Target mIoU at the last evaluation step.
    pub fn final_target_miou(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.target_miou)
    }

    /// Earliest evaluation step attaining the maximum target mIoU, with the
    /// value.
    pub fn peak_target_miou(&self) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for r in &self.records {
            if let Some(m) = r.target_miou {
                if best.map_or(true, |(_, b)| m > b) {
                    best = Some((r.losses.step, m));
                }
            }
        }
        best
    }

    /// Step number of the final evaluation row.
    pub fn last_eval_step(&self) -> Option<usize> {
        self.records
            .iter()
            .rev()
            .find(|r| r.target_miou.is_some())
            .map(|r| r.losses.step)
    }
}

/// Binary cross entropy of a score grid against one scalar label, with the
/// mean-gradient with respect to the scores. Scores are clamped away from
/// {0, 1} before the logs.
pub fn bce_loss_and_grad(pred: &Tensor, label: f64) -> (f64, Tensor) {
    const EPS: f64 = 1e-7;
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut total = 0.0;
    for (g, &raw) in grad.data_mut().iter_mut().zip(pred.data()) {
        let p = raw.clamp(EPS, 1.0 - EPS);
        total += -(label * p.ln() + (1.0 - label) * (1.0 - p).ln());
        *g = (p - label) / (p * (1.0 - p)) / n;
    }
    (total / n, grad)
}

/// Mean absolute error and its (sub)gradient with respect to `recon`.
pub fn l1_loss_and_grad(recon: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if recon.shape() != target.shape() {
        return Err(Error::Structure(format!(
            "reconstruction shape {:?} does not match input {:?}",
            recon.shape(),
            target.shape()
        )));
    }
    let n = recon.len() as f64;
    let mut grad = Tensor::zeros(recon.shape());
    let mut total = 0.0;
    for (g, (&r, &t)) in grad
        .data_mut()
        .iter_mut()
        .zip(recon.data().iter().zip(target.data()))
    {
        let d = r - t;
        total += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((total / n, grad))
}

/// Mean ground-truth-class probability of `S(E(x))` over a labeled sample,
/// in eval mode.
pub fn mean_gt_probability(model: &ModelState, sample: &Sample) -> Result<f64> {
    let labels = sample
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("sample carries no labels".into()))?;
    let e = model.encoder.forward(&sample.features, Mode::Eval, None)?;
    let s = model.classifier.forward(e.output(), Mode::Eval, None)?;
    let probs = s.output();
    let (h, w, k) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            total += probs.at3(y, x, labels.label_at(y, x, k)?);
        }
    }
    Ok(total / (h * w) as f64)
}

/// Minimum ground-truth-class probability over a labeled sample.
pub fn min_gt_probability(model: &ModelState, sample: &Sample) -> Result<f64> {
    let labels = sample
        .labels
        .as_ref()
        .ok_or_else(|| Error::Data("sample carries no labels".into()))?;
    let e = model.encoder.forward(&sample.features, Mode::Eval, None)?;
    let s = model.classifier.forward(e.output(), Mode::Eval, None)?;
    let probs = s.output();
    let (h, w, k) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let mut min = f64::INFINITY;
    for y in 0..h {
        for x in 0..w {
            min = min.min(probs.at3(y, x, labels.label_at(y, x, k)?));
        }
    }
    Ok(min)
}

/// Per-pixel argmax predictions of `S(E(x))`, ties to the lowest class.
pub fn predict_labels(model: &ModelState, sample: &Sample) -> Result<Tensor> {
    let e = model.encoder.forward(&sample.features, Mode::Eval, None)?;
    let s = model.classifier.forward(e.output(), Mode::Eval, None)?;
    let probs = s.output();
    let (h, w, k) = (probs.shape()[0], probs.shape()[1], probs.shape()[2]);
    let mut pred = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let mut best = 0usize;
            let mut best_p = probs.at3(y, x, 0);
            for c in 1..k {
                let p = probs.at3(y, x, c);
                if p > best_p {
                    best_p = p;
                    best = c;
                }
            }
            let idx = pred.idx2(y, x);
            pred.data_mut()[idx] = best as f64;
        }
    }
    Ok(pred)
}

/// Evaluates mIoU over labeled samples; frozen model, eval mode.
pub fn evaluate(
    model: &ModelState,
    samples: &[Sample],
    k: usize,
) -> Result<(f64, Vec<Option<f64>>, Confusion)> {
    let mut conf = Confusion::new(k)?;
    for sample in samples {
        let labels = sample
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("evaluation sample carries no labels".into()))?;
        let pred = predict_labels(model, sample)?;
        let (h, w) = (pred.shape()[0], pred.shape()[1]);
        for y in 0..h {
            for x in 0..w {
                conf.record(labels.label_at(y, x, k)?, pred.label_at(y, x, k)?)?;
            }
        }
    }
    let miou = conf.mean_iou()?;
    Ok((miou, conf.iou_per_class(), conf))
}

fn pass_egd(
    model: &ModelState,
    x: &Tensor,
    rng: &mut ChaCha8Rng,
) -> Result<(Trace, Trace, Trace)> {
    let e = model.encoder.forward(x, Mode::Train, None)?;
    let g = model.generator.forward(e.output(), Mode::Train, Some(rng))?;
    let d = model.discriminator.forward(g.output(), Mode::Train, None)?;
    Ok((e, g, d))
}

/// Drives the alternating updates over a model. Each sub-step derives its
/// generator-noise stream from `(seed, step_index, sub-step)`, so measuring
/// a loss and stepping on it at the same step index see identical noise.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: ModelState,
    pub schedule: TrainSchedule,
    pub variant: Variant,
    policy: ProbPolicy,
    hyper: AdamHyper,
    step_index: usize,
}

impl Trainer {
    pub fn new(model: ModelState, schedule: TrainSchedule, variant: Variant) -> Result<Self> {
        schedule.validate()?;
        let hyper = schedule.hyper();
        Ok(Self {
            model,
            schedule,
            variant,
            policy: ProbPolicy::default(),
            hyper,
            step_index: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    /// Moves to the next training step (fresh noise streams).
    pub fn advance(&mut self) {
        self.step_index += 1;
    }

    fn noise_rng(&self, substep: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_stream(
            self.schedule.seed ^ STREAM_NOISE,
            substep,
            self.step_index as u64,
            0,
        ))
    }

    /// Discriminator loss on this step's batch and noise, without updating
    /// anything.
    pub fn discriminator_losses(&self, src: &Sample, tgt: &Sample) -> Result<DStep> {
        let mut rng = self.noise_rng(SUBSTEP_D);
        let mut terms = [0.0; 2];
        for (i, (sample, label)) in [(src, SOURCE_LABEL), (tgt, TARGET_LABEL)]
            .into_iter()
            .enumerate()
        {
            let (_, _, d) = pass_egd(&self.model, &sample.features, &mut rng)?;
            terms[i] = bce_loss_and_grad(d.output(), label).0;
        }
        Ok(DStep {
            total: terms[0] + terms[1],
            source_term: terms[0],
            target_term: terms[1],
            labels_used: (SOURCE_LABEL, TARGET_LABEL),
        })
    }

    /// Update (1): one Adam step on `D` against the true domain labels.
    pub fn step_discriminator(&mut self, src: &Sample, tgt: &Sample) -> Result<DStep> {
        let mut rng = self.noise_rng(SUBSTEP_D);
        let mut terms = [0.0; 2];
        for (i, (sample, label)) in [(src, SOURCE_LABEL), (tgt, TARGET_LABEL)]
            .into_iter()
            .enumerate()
        {
            let (_, _, d) = pass_egd(&self.model, &sample.features, &mut rng)?;
            let (loss, grad) = bce_loss_and_grad(d.output(), label);
            terms[i] = loss;
            self.model.discriminator.backward(&d, &grad)?;
        }
        self.model.discriminator.adam_step(&self.hyper)?;
        Ok(DStep {
            total: terms[0] + terms[1],
            source_term: terms[0],
            target_term: terms[1],
            labels_used: (SOURCE_LABEL, TARGET_LABEL),
        })
    }

    /// Generator losses on this step's batch and noise, without updating.
    pub fn generator_losses(&self, src: &Sample, tgt: &Sample) -> Result<GStep> {
        let mut rng = self.noise_rng(SUBSTEP_G);
        let mut gan = [0.0; 2];
        let mut rec = [0.0; 2];
        for (i, (sample, flipped)) in [(src, TARGET_LABEL), (tgt, SOURCE_LABEL)]
            .into_iter()
            .enumerate()
        {
            let (_, g, d) = pass_egd(&self.model, &sample.features, &mut rng)?;
            gan[i] = bce_loss_and_grad(d.output(), flipped).0;
            rec[i] = l1_loss_and_grad(g.output(), &sample.features)?.0;
        }
        let l_gan_g = gan[0] + gan[1];
        let l_rec = rec[0] + rec[1];
        Ok(GStep {
            l_gan_g,
            source_term: gan[0],
            target_term: gan[1],
            l_rec,
            total: l_gan_g + self.schedule.recon_weight * l_rec,
            labels_used: (TARGET_LABEL, SOURCE_LABEL),
        })
    }

    /// Update (2): one Adam step on `G` for the fooling loss plus weighted
    /// reconstruction. `D` is read but left unchanged.
    pub fn step_generator(&mut self, src: &Sample, tgt: &Sample) -> Result<GStep> {
        let mut rng = self.noise_rng(SUBSTEP_G);
        let mut gan = [0.0; 2];
        let mut rec = [0.0; 2];
        for (i, (sample, flipped)) in [(src, TARGET_LABEL), (tgt, SOURCE_LABEL)]
            .into_iter()
            .enumerate()
        {
            let (_, g, d) = pass_egd(&self.model, &sample.features, &mut rng)?;
            let (l_adv, grad_d) = bce_loss_and_grad(d.output(), flipped);
            let (l_rec, grad_rec) = l1_loss_and_grad(g.output(), &sample.features)?;
            gan[i] = l_adv;
            rec[i] = l_rec;
            let mut grad_gout = self.model.discriminator.backward(&d, &grad_d)?;
            grad_gout.add_scaled(&grad_rec, self.schedule.recon_weight)?;
            self.model.generator.backward(&g, &grad_gout)?;
        }
        self.model.generator.adam_step(&self.hyper)?;
        // D accumulated pass-through gradients; it is frozen in this update.
        self.model.discriminator.zero_grads();
        let l_gan_g = gan[0] + gan[1];
        let l_rec = rec[0] + rec[1];
        Ok(GStep {
            l_gan_g,
            source_term: gan[0],
            target_term: gan[1],
            l_rec,
            total: l_gan_g + self.schedule.recon_weight * l_rec,
            labels_used: (TARGET_LABEL, SOURCE_LABEL),
        })
    }

    /// Encoder losses on this step's batch and noise, without updating.
    pub fn encoder_losses(
        &self,
        src: &Sample,
        tgt: &Sample,
        active: &LossSpec,
    ) -> Result<EStep> {
        let labels = src
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("source sample carries no labels".into()))?;
        let mut rng = self.noise_rng(SUBSTEP_E);
        let mut gan = [0.0; 2];
        if self.variant == Variant::SegPlusGan {
            for (i, (sample, flipped)) in [(src, TARGET_LABEL), (tgt, SOURCE_LABEL)]
                .into_iter()
                .enumerate()
            {
                let (_, _, d) = pass_egd(&self.model, &sample.features, &mut rng)?;
                gan[i] = bce_loss_and_grad(d.output(), flipped).0;
            }
        }
        let e = self.model.encoder.forward(&src.features, Mode::Eval, None)?;
        let s = self.model.classifier.forward(e.output(), Mode::Eval, None)?;
        let (l_seg, _) = pixelwise_loss(active, s.output(), labels, self.policy)?;
        let l_gan_e = gan[0] + gan[1];
        Ok(EStep {
            l_gan_e,
            source_term: gan[0],
            target_term: gan[1],
            l_seg_s: l_seg,
            total: l_gan_e + l_seg,
            labels_used: (TARGET_LABEL, SOURCE_LABEL),
        })
    }

    /// Update (3): one Adam step on `E` and `S`. The adversarial part scores
    /// reconstructions against cross-domain (flipped) labels; the
    /// segmentation part applies `active` to `S(E(src))` under the source
    /// labels. `G` and `D` are read but left unchanged.
    pub fn step_encoder(
        &mut self,
        src: &Sample,
        tgt: &Sample,
        active: &LossSpec,
    ) -> Result<EStep> {
        let labels = src
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("source sample carries no labels".into()))?
            .clone();
        let mut rng = self.noise_rng(SUBSTEP_E);
        let mut gan = [0.0; 2];
        let mut l_seg = 0.0;
        for (i, (sample, flipped)) in [(src, TARGET_LABEL), (tgt, SOURCE_LABEL)]
            .into_iter()
            .enumerate()
        {
            let is_source = i == 0;
            let e = self
                .model
                .encoder
                .forward(&sample.features, Mode::Train, None)?;
            let mut grad_eout = Tensor::zeros(e.output().shape());
            if self.variant == Variant::SegPlusGan {
                let g = self
                    .model
                    .generator
                    .forward(e.output(), Mode::Train, Some(&mut rng))?;
                let d = self
                    .model
                    .discriminator
                    .forward(g.output(), Mode::Train, None)?;
                let (l_adv, grad_d) = bce_loss_and_grad(d.output(), flipped);
                gan[i] = l_adv;
                let grad_gout = self.model.discriminator.backward(&d, &grad_d)?;
                let grad_adv = self.model.generator.backward(&g, &grad_gout)?;
                grad_eout.add_assign(&grad_adv)?;
            }
            if is_source {
                let s = self.model.classifier.forward(e.output(), Mode::Train, None)?;
                let (l, grad_probs) = pixelwise_loss(active, s.output(), &labels, self.policy)?;
                l_seg = l;
                let grad_seg = self.model.classifier.backward(&s, &grad_probs)?;
                grad_eout.add_assign(&grad_seg)?;
            }
            self.model.encoder.backward(&e, &grad_eout)?;
        }
        self.model.encoder.adam_step(&self.hyper)?;
        self.model.classifier.adam_step(&self.hyper)?;
        // G and D accumulated pass-through gradients; both are frozen here.
        self.model.generator.zero_grads();
        self.model.discriminator.zero_grads();
        let l_gan_e = gan[0] + gan[1];
        Ok(EStep {
            l_gan_e,
            source_term: gan[0],
            target_term: gan[1],
            l_seg_s: l_seg,
            total: l_gan_e + l_seg,
            labels_used: (TARGET_LABEL, SOURCE_LABEL),
        })
    }
}

/// A completed run: the full history plus the final model.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: RunHistory,
    pub model: ModelState,
}

/// An aborted run: the error plus everything recorded before it.
#[derive(Debug)]
pub struct TrainAbort {
    pub error: Error,
    pub history: RunHistory,
}

impl std::fmt::Display for TrainAbort {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "training aborted after {} recorded steps: {}",
            self.history.records.len(),
            self.error
        )
    }
}

impl std::error::Error for TrainAbort {}

/// Runs the full schedule on a dataset: per step one source and one target
/// image are drawn, the sub-steps run in order (D, G, E — or E alone for
/// [`Variant::SegOnly`]), and both domains are evaluated every `eval_every`
/// steps. Deterministic from the schedule seed. On a numeric abort the
/// partial history is returned for post-mortem inspection.
pub fn run_training(
    dataset: &Dataset,
    model_config: &ModelConfig,
    schedule: &TrainSchedule,
    variant: Variant,
) -> std::result::Result<TrainOutcome, TrainAbort> {
    let mut history = RunHistory::default();
    match run_inner(dataset, model_config, schedule, variant, &mut history) {
        Ok(model) => Ok(TrainOutcome { history, model }),
        Err(error) => Err(TrainAbort { error, history }),
    }
}

fn run_inner(
    dataset: &Dataset,
    model_config: &ModelConfig,
    schedule: &TrainSchedule,
    variant: Variant,
    history: &mut RunHistory,
) -> Result<ModelState> {
    schedule.validate()?;
    if dataset.source_train.is_empty() || dataset.target_train.is_empty() {
        return Err(Error::Data("training splits must be non-empty".into()));
    }
    let model = build_models(&dataset.config, model_config, schedule.seed)?;
    let mut trainer = Trainer::new(model, schedule.clone(), variant)?;
    let mut sampler = ChaCha8Rng::seed_from_u64(derive_stream(
        schedule.seed,
        STREAM_SAMPLING,
        0,
        0,
    ));
    let k = dataset.config.k;
    for step in 0..schedule.total_steps {
        let src = &dataset.source_train[sampler.gen_range(0..dataset.source_train.len())];
        let tgt = &dataset.target_train[sampler.gen_range(0..dataset.target_train.len())];
        let active = select_active_loss(schedule, step);
        if step == schedule.warm_start_steps && step > 0 {
            // The segmentation objective just changed; Adam's second moments
            // were estimated under the warm loss and would grossly misscale
            // the first main-phase steps (warm gradients vanish on confident
            // pixels, leaving v near zero).
            trainer.model.encoder.reset_optimizer_state();
            trainer.model.classifier.reset_optimizer_state();
        }
        let (l_gan_d, l_gan_g, l_rec, l_gan_e, l_seg_s) = match variant {
            Variant::SegPlusGan => {
                let d = trainer.step_discriminator(src, tgt)?;
                let g = trainer.step_generator(src, tgt)?;
                let e = trainer.step_encoder(src, tgt, &active)?;
                (d.total, g.l_gan_g, g.l_rec, e.l_gan_e, e.l_seg_s)
            }
            Variant::SegOnly => {
                let e = trainer.step_encoder(src, tgt, &active)?;
                (0.0, 0.0, 0.0, 0.0, e.l_seg_s)
            }
        };
        let mut record = HistoryRecord {
            losses: StepLosses {
                step: step + 1,
                l_gan_d,
                l_gan_g,
                l_gan_e,
                l_rec,
                l_seg_s,
            },
            source_miou: None,
            target_miou: None,
            active_loss: active.kind_name(),
        };
        if (step + 1) % schedule.eval_every == 0 {
            record.source_miou = Some(evaluate(&trainer.model, &dataset.source_eval, k)?.0);
            record.target_miou = Some(evaluate(&trainer.model, &dataset.target_eval, k)?.0);
        }
        history.records.push(record);
        trainer.advance();
    }
    Ok(trainer.model)
}
