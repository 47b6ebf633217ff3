//! Two-stage optimisation: the divergence tree first, then the fusion head
//! on top of the frozen tree.

mod optim;

pub use optim::{clip_global_norm, AdamParams, AdamState};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, FrozenDivergence};
use crate::data::{sample_patch_pair, ImagePair};
use crate::error::{Error, Result};
use crate::imaging::Image;
use crate::loss::{convergence_loss_with_grad, divergence_loss_impl, DivergenceLoss, LossConfig};
use crate::model::{images_to_tensor, tensor_to_image, ConvergenceModel, DivergenceModel};
use crate::nn::{Graph, ParamGrads, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Divergence,
    Convergence,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Divergence => "divergence",
            Stage::Convergence => "convergence",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "divergence" => Some(Stage::Divergence),
            "convergence" => Some(Stage::Convergence),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// LR patch side; HR patches are `scale` times larger.
    pub lr_patch: usize,
    pub initial_lr: f64,
    /// The learning rate halves every this many epochs.
    pub halve_every: u64,
    pub adam: AdamParams,
    /// Stop after this many epochs.
    pub epochs: u64,
    /// Optional hard cap on optimizer steps.
    pub max_steps: Option<u64>,
    pub clip_grad_norm: Option<f64>,
    pub seed: u64,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            lr_patch: 24,
            initial_lr: 1e-4,
            halve_every: 2000,
            adam: AdamParams {
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
            },
            epochs: 8000,
            max_steps: None,
            clip_grad_norm: None,
            seed: 0,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive");
        }
        if self.lr_patch == 0 {
            return bad("train.lr_patch must be positive");
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return bad("train.initial_lr must be positive");
        }
        if self.halve_every == 0 {
            return bad("train.halve_every must be positive");
        }
        let AdamParams { beta1, beta2, eps } = self.adam;
        if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) {
            return bad("train.beta1 and train.beta2 must lie in [0, 1)");
        }
        if !(eps > 0.0) {
            return bad("train.adam_eps must be positive");
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return bad("train.clip_grad_norm must be positive");
            }
        }
        self.loss.validate()
    }

    /// `initial_lr * 0.5^floor(epoch / halve_every)`.
    pub fn learning_rate(&self, epoch: u64) -> f64 {
        learning_rate(self.initial_lr, self.halve_every, epoch)
    }

    /// Epoch interval between periodic checkpoints.
    pub fn checkpoint_every(&self) -> u64 {
        (self.halve_every / 4).max(1)
    }
}

pub fn learning_rate(initial: f64, halve_every: u64, epoch: u64) -> f64 {
    let halvings = (epoch / halve_every).min(i32::MAX as u64) as i32;
    initial * 0.5f64.powi(halvings)
}

/// Position of the patch sampler's ChaCha stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

impl RngState {
    fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    pub epoch: u64,
    /// Steps already taken inside the current epoch.
    pub epoch_pos: u64,
    pub rng: RngState,
    pub adam: AdamState,
    /// Sum and count of step losses in the current epoch.
    pub running_sum: f64,
    pub running_count: u64,
}

impl TrainState {
    pub fn new(params: &ParamStore, seed: u64) -> Self {
        TrainState {
            step: 0,
            epoch: 0,
            epoch_pos: 0,
            rng: RngState { seed, word_pos: 0 },
            adam: AdamState::new(params),
            running_sum: 0.0,
            running_count: 0,
        }
    }

    pub fn running_loss(&self) -> Option<f64> {
        (self.running_count > 0).then(|| self.running_sum / self.running_count as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepLoss {
    Divergence(DivergenceLoss),
    Convergence(f64),
}

impl StepLoss {
    pub fn total(&self) -> f64 {
        match self {
            StepLoss::Divergence(d) => d.total,
            StepLoss::Convergence(l) => *l,
        }
    }
}

/// One optimizer step as reported to observers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    /// 1-based index of the step just taken.
    pub step: u64,
    pub epoch: u64,
    pub learning_rate: f64,
    pub loss: StepLoss,
    /// Mean loss over the epoch so far, including this step.
    pub running_loss: f64,
}

impl StepRecord {
    pub fn csv_header(stage: Stage) -> &'static str {
        match stage {
            Stage::Divergence => "step,epoch,lr,loss,l2,triplet,running_loss",
            Stage::Convergence => "step,epoch,lr,loss,running_loss",
        }
    }

    pub fn csv_row(&self) -> String {
        match self.loss {
            StepLoss::Divergence(d) => format!(
                "{},{},{:e},{:e},{:e},{:e},{:e}",
                self.step, self.epoch, self.learning_rate, d.total, d.l2, d.triplet, self.running_loss
            ),
            StepLoss::Convergence(l) => format!(
                "{},{},{:e},{:e},{:e}",
                self.step, self.epoch, self.learning_rate, l, self.running_loss
            ),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckpointReason {
    /// Written at the end of the given (completed) epoch count.
    Periodic { epoch: u64 },
    Final,
    /// Snapshot of the state that produced a non-finite loss.
    Diagnostic,
}

pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) -> Result<()> {
        Ok(())
    }

    fn on_checkpoint(&mut self, _checkpoint: &Checkpoint, _reason: CheckpointReason) -> Result<()> {
        Ok(())
    }
}

/// Ignores every event.
pub struct NullObserver;

impl TrainObserver for NullObserver {}

/// Keeps step records and the most recent checkpoint in memory.
#[derive(Default)]
pub struct MemoryObserver {
    pub records: Vec<StepRecord>,
    pub checkpoints: Vec<CheckpointReason>,
    pub last_checkpoint: Option<Checkpoint>,
}

impl TrainObserver for MemoryObserver {
    fn on_step(&mut self, record: &StepRecord) -> Result<()> {
        self.records.push(*record);
        Ok(())
    }

    fn on_checkpoint(&mut self, checkpoint: &Checkpoint, reason: CheckpointReason) -> Result<()> {
        self.checkpoints.push(reason);
        self.last_checkpoint = Some(checkpoint.clone());
        Ok(())
    }
}

/// What a stage optimizes: parameters, a batch objective, and a snapshot.
trait Objective {
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    fn evaluate(&self, lr: &[Image], hr: &[Image], loss: &LossConfig) -> Result<(StepLoss, ParamGrads)>;
    fn snapshot(&self, state: &TrainState) -> Checkpoint;
}

struct DivergenceObjective {
    model: DivergenceModel,
}

impl Objective for DivergenceObjective {
    fn params(&self) -> &ParamStore {
        self.model.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.model.params_mut()
    }

    fn evaluate(&self, lr: &[Image], hr: &[Image], loss: &LossConfig) -> Result<(StepLoss, ParamGrads)> {
        let refs: Vec<&Image> = lr.iter().collect();
        let mut g = Graph::new(self.model.params());
        let x = g.input(images_to_tensor(&refs));
        let outs = self.model.forward_graph(&mut g, x);
        if outs.iter().any(|&v| !g.value(v).all_finite()) {
            return Err(Error::NonFinite { step: 0 });
        }
        let paths = self.model.leaf_paths();
        let n = lr.len();
        let inv_n = 1.0 / n as f64;
        let mut seeds: Vec<Tensor> = outs.iter().map(|&v| Tensor::zeros(g.value(v).shape())).collect();
        let mut parts = DivergenceLoss::default();
        for (item, target) in hr.iter().enumerate() {
            let preds: Vec<Image> = outs
                .iter()
                .map(|&v| tensor_to_image(g.value(v), item, 0))
                .collect();
            let (l, grads) = divergence_loss_impl(&preds, &paths, target, loss, true)?;
            parts.total += l.total * inv_n;
            parts.l2 += l.l2 * inv_n;
            parts.triplet += l.triplet * inv_n;
            for (seed, grad) in seeds.iter_mut().zip(&grads) {
                write_grad(seed.item_mut(item), grad, inv_n);
            }
        }
        let grads = g.backward(outs.into_iter().zip(seeds).collect());
        Ok((StepLoss::Divergence(parts), grads))
    }

    fn snapshot(&self, state: &TrainState) -> Checkpoint {
        Checkpoint::divergence(&self.model, Some(state.clone()))
    }
}

struct ConvergenceObjective<'a> {
    divergence: &'a DivergenceModel,
    head: ConvergenceModel,
}

impl Objective for ConvergenceObjective<'_> {
    fn params(&self) -> &ParamStore {
        self.head.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore {
        self.head.params_mut()
    }

    fn evaluate(&self, lr: &[Image], hr: &[Image], _loss: &LossConfig) -> Result<(StepLoss, ParamGrads)> {
        let stacked = frozen_predictions(self.divergence, lr)?;
        let mut g = Graph::new(self.head.params());
        let s = g.input(stacked);
        let (_, fused) = self.head.forward_graph(&mut g, s);
        if !g.value(fused).all_finite() {
            return Err(Error::NonFinite { step: 0 });
        }
        let n = lr.len();
        let inv_n = 1.0 / n as f64;
        let mut seed = Tensor::zeros(g.value(fused).shape());
        let mut total = 0.0;
        for (item, target) in hr.iter().enumerate() {
            let sr = tensor_to_image(g.value(fused), item, 0);
            let (l, grad) = convergence_loss_with_grad(&sr, target)?;
            total += l * inv_n;
            write_grad(seed.item_mut(item), &grad, inv_n);
        }
        let grads = g.backward(vec![(fused, seed)]);
        Ok((StepLoss::Convergence(total), grads))
    }

    fn snapshot(&self, state: &TrainState) -> Checkpoint {
        Checkpoint::convergence(&self.head, Some(state.clone()), FrozenDivergence::of(self.divergence))
    }
}

/// Runs the frozen tree without recording gradients and stacks its clamped
/// outputs into `[n, 3P, h, w]`.
fn frozen_predictions(model: &DivergenceModel, lr: &[Image]) -> Result<Tensor> {
    let refs: Vec<&Image> = lr.iter().collect();
    let mut g = Graph::new(model.params());
    let x = g.input(images_to_tensor(&refs));
    let outs = model.forward_graph(&mut g, x);
    let [n, _, h, w] = g.value(outs[0]).shape();
    let mut stacked = Tensor::zeros([n, 3 * outs.len(), h, w]);
    let block = 3 * h * w;
    for (k, &v) in outs.iter().enumerate() {
        let t = g.value(v);
        if !t.all_finite() {
            return Err(Error::NonFinite { step: 0 });
        }
        for item in 0..n {
            let dst = &mut stacked.item_mut(item)[k * block..(k + 1) * block];
            for (d, s) in dst.iter_mut().zip(t.item(item)) {
                *d = s.clamp(0.0, 1.0);
            }
        }
    }
    Ok(stacked)
}

/// Scatters an interleaved RGB gradient into one CHW tensor item.
fn write_grad(item: &mut [f32], grad: &[f64], scale: f64) {
    let hw = grad.len() / 3;
    for (p, px) in grad.chunks_exact(3).enumerate() {
        for c in 0..3 {
            item[c * hw + p] = (px[c] * scale) as f32;
        }
    }
}

fn grads_finite(grads: &ParamGrads) -> bool {
    grads.iter().flatten().all(Tensor::all_finite)
}

/// Patch-sampling order for one epoch, fixed by `(seed, epoch)`.
fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

fn finished(state: &TrainState, cfg: &TrainConfig) -> bool {
    state.epoch >= cfg.epochs || cfg.max_steps.is_some_and(|m| state.step >= m)
}

fn check_pairs(pairs: &[ImagePair], cfg: &TrainConfig) -> Result<()> {
    if pairs.is_empty() {
        return Err(Error::Data("training set is empty".into()));
    }
    for p in pairs {
        let (h, w) = p.lr().dims();
        if h < cfg.lr_patch || w < cfg.lr_patch {
            return Err(Error::Data(format!(
                "{}: LR {h}x{w} is smaller than train.lr_patch {}",
                p.identifier(),
                cfg.lr_patch
            )));
        }
    }
    Ok(())
}

fn run<O: Objective>(
    obj: &mut O,
    pairs: &[ImagePair],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainState> {
    cfg.validate()?;
    check_pairs(pairs, cfg)?;
    let mut state = match resume {
        Some(s) => {
            if s.adam.m.len() != obj.params().len() {
                return Err(Error::Structure("optimizer state does not match parameters".into()));
            }
            s
        }
        None => TrainState::new(obj.params(), cfg.seed),
    };
    let mut rng = state.rng.restore();
    let per_epoch = pairs.len() as u64;
    let every = cfg.checkpoint_every();
    let mut order = epoch_order(cfg.seed, state.epoch, pairs.len());

    while !finished(&state, cfg) {
        let pair = &pairs[order[state.epoch_pos as usize]];
        let mut lrs = Vec::with_capacity(cfg.batch_size);
        let mut hrs = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let (l, h) = sample_patch_pair(pair, cfg.lr_patch, &mut rng)?;
            lrs.push(l);
            hrs.push(h);
        }
        let lr_now = cfg.learning_rate(state.epoch);
        let evaluated = match obj.evaluate(&lrs, &hrs, &cfg.loss) {
            Err(Error::NonFinite { .. }) => None,
            Err(e) => return Err(e),
            Ok((loss, grads)) => (loss.total().is_finite() && grads_finite(&grads)).then_some((loss, grads)),
        };
        let Some((loss, mut grads)) = evaluated else {
            observer.on_checkpoint(&obj.snapshot(&state), CheckpointReason::Diagnostic)?;
            return Err(Error::NonFinite { step: state.step + 1 });
        };
        if let Some(c) = cfg.clip_grad_norm {
            clip_global_norm(&mut grads, c);
        }
        state.adam.step(obj.params_mut(), &grads, lr_now, cfg.adam);

        let epoch = state.epoch;
        state.step += 1;
        state.epoch_pos += 1;
        state.running_sum += loss.total();
        state.running_count += 1;
        let record = StepRecord {
            step: state.step,
            epoch,
            learning_rate: lr_now,
            loss,
            running_loss: state.running_sum / state.running_count as f64,
        };
        if state.epoch_pos == per_epoch {
            state.epoch += 1;
            state.epoch_pos = 0;
            state.running_sum = 0.0;
            state.running_count = 0;
            order = epoch_order(cfg.seed, state.epoch, pairs.len());
        }
        state.rng.word_pos = rng.get_word_pos();
        observer.on_step(&record)?;
        if state.epoch_pos == 0 && state.epoch % every == 0 && !finished(&state, cfg) {
            observer.on_checkpoint(
                &obj.snapshot(&state),
                CheckpointReason::Periodic { epoch: state.epoch },
            )?;
        }
    }
    observer.on_checkpoint(&obj.snapshot(&state), CheckpointReason::Final)?;
    Ok(state)
}

/// Stage 1: trains every branch of the tree under the divergence loss.
pub fn train_divergence(
    model: DivergenceModel,
    pairs: &[ImagePair],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    observer: &mut dyn TrainObserver,
) -> Result<(DivergenceModel, TrainState)> {
    check_scale(pairs, model.config().scale)?;
    let mut obj = DivergenceObjective { model };
    let state = run(&mut obj, pairs, cfg, resume, observer)?;
    Ok((obj.model, state))
}

/// Stage 2: trains the fusion head on the predictions of a frozen tree.
/// The tree's parameters are verified to be untouched afterwards.
pub fn train_convergence(
    divergence: &DivergenceModel,
    head: ConvergenceModel,
    pairs: &[ImagePair],
    cfg: &TrainConfig,
    resume: Option<TrainState>,
    observer: &mut dyn TrainObserver,
) -> Result<(ConvergenceModel, TrainState)> {
    if head.config() != divergence.config() {
        return Err(Error::Structure(format!(
            "fusion head config {} does not match tree config {}",
            head.config().canonical(),
            divergence.config().canonical()
        )));
    }
    check_scale(pairs, divergence.config().scale)?;
    let before = divergence.params().digest();
    let mut obj = ConvergenceObjective { divergence, head };
    let state = run(&mut obj, pairs, cfg, resume, observer)?;
    let after = divergence.params().digest();
    if before != after {
        return Err(Error::Contract("divergence parameters changed during stage 2".into()));
    }
    Ok((obj.head, state))
}

fn check_scale(pairs: &[ImagePair], scale: usize) -> Result<()> {
    match pairs.iter().find(|p| p.scale() != scale) {
        Some(p) => Err(Error::Data(format!(
            "{}: pair scale {} does not match model scale {scale}",
            p.identifier(),
            p.scale()
        ))),
        None => Ok(()),
    }
}
