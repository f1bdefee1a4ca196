//! AdamW training of the encoder on stain-augmented view pairs.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::encoder::{forward, forward_with_gradients, init_params, EncoderConfig, EncoderParams};
use crate::error::{Error, Result};
use crate::loss::{loss_gradients_with, LossBreakdown, LossOptions, DEFAULT_LAMBDA};
use crate::manifold::{make_view_pair, patch_rng, AugmentationRange, BasisMode, PatchDataset};
use crate::stain_math::{RgbPatch, StainBasis, StainEstimationConfig};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub base_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub anneal_start_step: usize,
    pub weight_decay: f64,
    pub lambda: f64,
    pub seed: u64,
    /// Mean-centre embeddings before correlating.
    pub center_embeddings: bool,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub augmentation: AugmentationRange,
    /// Shared augmentation basis; `None` estimates one per patch.
    pub fixed_basis: Option<StainBasis>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::with_total_steps(1000)
    }
}

impl TrainConfig {
    /// Defaults with warmup over the first 5% and annealing over the last 30%.
    pub fn with_total_steps(total_steps: usize) -> Self {
        Self {
            batch_size: 32,
            base_lr: 1e-4,
            final_lr: 1e-7,
            warmup_steps: total_steps * 5 / 100,
            total_steps,
            anneal_start_step: total_steps * 70 / 100,
            weight_decay: 0.01,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            center_embeddings: false,
            grad_clip: None,
            augmentation: AugmentationRange::default(),
            fixed_basis: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: key.into(),
                message,
            })
        };
        if self.batch_size < 2 {
            return bad("batch_size", format!("must be at least 2, got {}", self.batch_size));
        }
        if !(self.warmup_steps <= self.anneal_start_step && self.anneal_start_step <= self.total_steps)
        {
            return bad(
                "anneal_start_step",
                format!(
                    "need warmup_steps <= anneal_start_step <= total_steps, got {} / {} / {}",
                    self.warmup_steps, self.anneal_start_step, self.total_steps
                ),
            );
        }
        if !(self.base_lr >= 0.0 && self.final_lr >= 0.0 && self.final_lr <= self.base_lr) {
            return bad(
                "final_lr",
                format!(
                    "need 0 <= final_lr <= base_lr, got {} and {}",
                    self.final_lr, self.base_lr
                ),
            );
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", format!("must be nonnegative, got {}", self.weight_decay));
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda", format!("must be nonnegative, got {}", self.lambda));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip", format!("must be positive, got {c}"));
            }
        }
        Ok(())
    }

    fn loss_options(&self) -> LossOptions {
        LossOptions {
            lambda: self.lambda,
            center: self.center_embeddings,
        }
    }
}

/// Learning rate at `step`: linear warmup from 0, constant `base_lr`, cosine
/// decay to `final_lr` at `total_steps`.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.base_lr * step as f64 / cfg.warmup_steps as f64);
    }
    if step < cfg.anneal_start_step || cfg.anneal_start_step == cfg.total_steps {
        return Ok(cfg.base_lr);
    }
    let phase = (step - cfg.anneal_start_step) as f64
        / (cfg.total_steps - cfg.anneal_start_step) as f64;
    let cosine = 0.5 * (1.0 + (std::f64::consts::PI * phase).cos());
    Ok(cfg.final_lr + (cfg.base_lr - cfg.final_lr) * cosine)
}

/// AdamW first and second moments plus the update counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: EncoderParams,
    pub v: EncoderParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &EncoderParams) -> Self {
        Self {
            m: params.zeros_like(),
            v: params.zeros_like(),
            step: 0,
        }
    }
}

/// One decoupled-weight-decay Adam update. Gradients are checked for
/// finiteness before anything is modified.
pub fn adamw_step(
    params: &mut EncoderParams,
    grads: &EncoderParams,
    state: &mut OptimizerState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::InvalidArgument(format!("learning rate must be >= 0, got {lr}")));
    }
    if grads.tensors().len() != params.tensors().len() {
        return Err(Error::dims(params.tensors().len(), grads.tensors().len()));
    }
    for (p, g) in params.tensors().iter().zip(grads.tensors()) {
        if p.data.len() != g.data.len() {
            return Err(Error::dims(format!("{} {:?}", p.path, p.shape), format!("{:?}", g.shape)));
        }
        if let Some(k) = g.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}[{k}]", g.path)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    let tensors = params
        .tensors_mut()
        .iter_mut()
        .zip(grads.tensors())
        .zip(state.m.tensors_mut().iter_mut().zip(state.v.tensors_mut()));
    for ((p, g), (m, v)) in tensors {
        for i in 0..p.data.len() {
            let gi = g.data[i];
            p.data[i] -= lr * weight_decay * p.data[i];
            m.data[i] = ADAM_BETA1 * m.data[i] + (1.0 - ADAM_BETA1) * gi;
            v.data[i] = ADAM_BETA2 * v.data[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let mh = m.data[i] / bc1;
            let vh = v.data[i] / bc2;
            p.data[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// One row of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
}

pub fn write_loss_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut out = String::from("step,invariance,redundancy,total,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.loss.invariance, r.loss.redundancy, r.loss.total, r.lr
        ));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Patches admitted for training together with their augmentation bases.
pub struct TrainingSet {
    ids: Vec<String>,
    patches: Vec<RgbPatch>,
    bases: Vec<StainBasis>,
    excluded: usize,
}

impl TrainingSet {
    /// Resolves a basis for every patch; patches whose estimation fails
    /// (background only, single stain) are dropped and counted.
    pub fn prepare(dataset: &PatchDataset, cfg: &TrainConfig) -> Result<Self> {
        let mode = cfg.fixed_basis.map_or(BasisMode::PerPatch, BasisMode::Fixed);
        let est = StainEstimationConfig::default();
        let resolved: Vec<Option<StainBasis>> = dataset
            .items()
            .par_iter()
            .map(|item| mode.basis_for(&item.patch, &est).ok())
            .collect();
        let mut set = Self {
            ids: vec![],
            patches: vec![],
            bases: vec![],
            excluded: 0,
        };
        for (item, basis) in dataset.items().iter().zip(resolved) {
            match basis {
                Some(b) => {
                    set.ids.push(item.id.clone());
                    set.patches.push(item.patch.clone());
                    set.bases.push(b);
                }
                None => set.excluded += 1,
            }
        }
        if set.excluded > 0 {
            log::warn!(
                "excluded {} patch(es) without a usable stain basis",
                set.excluded
            );
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn excluded(&self) -> usize {
        self.excluded
    }
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingState {
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub step: u64,
    pub epoch: u64,
    pub order: Vec<u32>,
    pub cursor: u64,
    pub rng: RngState,
}

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Encoder parameters with optional resumable training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: EncoderParams,
    pub training: Option<TrainingState>,
}

pub struct Trainer {
    cfg: TrainConfig,
    params: EncoderParams,
    opt: OptimizerState,
    step: usize,
    epoch: u64,
    order: Vec<u32>,
    cursor: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(enc_cfg: &EncoderConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(enc_cfg)?;
        Ok(Self {
            cfg: *cfg,
            opt: OptimizerState::new(&params),
            params,
            step: 0,
            epoch: 0,
            order: vec![],
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        let state = ckpt.training.ok_or_else(|| {
            Error::Format("checkpoint holds no training state to resume from".into())
        })?;
        state.config.validate()?;
        Ok(Self {
            cfg: state.config,
            params: ckpt.params,
            opt: state.optimizer,
            step: state.step as usize,
            epoch: state.epoch,
            order: state.order,
            cursor: state.cursor as usize,
            rng: state.rng.restore(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            training: Some(TrainingState {
                config: self.cfg,
                optimizer: self.opt.clone(),
                step: self.step as u64,
                epoch: self.epoch,
                order: self.order.clone(),
                cursor: self.cursor as u64,
                rng: RngState::capture(&self.rng),
            }),
        }
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn into_params(self) -> EncoderParams {
        self.params
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let b = self.cfg.batch_size;
        if self.order.len() != n || self.cursor + b > self.order.len() {
            // Start a new epoch; the trailing partial batch is dropped.
            self.order = (0..n as u32).collect();
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let batch = self.order[self.cursor..self.cursor + b]
            .iter()
            .map(|&i| i as usize)
            .collect();
        self.cursor += b;
        batch
    }

    /// Runs one optimisation step and returns its log row.
    pub fn train_step(&mut self, data: &TrainingSet) -> Result<LogRow> {
        if self.is_finished() {
            return Err(Error::InvalidArgument("training already finished".into()));
        }
        if data.len() < self.cfg.batch_size {
            return Err(Error::InvalidArgument(format!(
                "{} usable patch(es) is fewer than batch_size {}",
                data.len(),
                self.cfg.batch_size
            )));
        }
        let batch = self.next_batch(data.len());
        let step = self.step;
        let cfg = self.cfg;
        let pairs = batch
            .par_iter()
            .map(|&i| {
                let mut rng = patch_rng(cfg.seed, &data.ids[i], step as u64);
                make_view_pair(
                    &data.patches[i],
                    &data.ids[i],
                    &data.bases[i],
                    &mut rng,
                    &cfg.augmentation,
                    StainEstimationConfig::default().background_intensity,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let (x1, x2): (Vec<RgbPatch>, Vec<RgbPatch>) =
            pairs.into_iter().map(|p| (p.x1, p.x2)).unzip();

        let z1 = forward(&self.params, &x1)?;
        let z2 = forward(&self.params, &x2)?;
        let lg = loss_gradients_with(&z1, &z2, &cfg.loss_options())?;
        if !lg.breakdown.total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {step}")));
        }
        let (_, mut grads) = forward_with_gradients(&self.params, &x1, &lg.dz1)?;
        let (_, g2) = forward_with_gradients(&self.params, &x2, &lg.dz2)?;
        grads.add_assign(&g2);
        if let Some(clip) = cfg.grad_clip {
            let norm = grads.l2_norm();
            if norm > clip {
                grads.scale(clip / norm);
            }
        }
        let lr = lr_at(step + 1, &cfg)?;
        adamw_step(&mut self.params, &grads, &mut self.opt, lr, cfg.weight_decay)
            .map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} at step {step}")),
                other => other,
            })?;
        self.step += 1;
        Ok(LogRow {
            step,
            loss: lg.breakdown,
            lr,
        })
    }

    /// Runs up to `steps` more steps (stopping at `total_steps`).
    pub fn run(&mut self, data: &TrainingSet, steps: usize) -> Result<Vec<LogRow>> {
        let mut log = Vec::with_capacity(steps);
        for _ in 0..steps {
            if self.is_finished() {
                break;
            }
            let row = self.train_step(data)?;
            log::debug!(
                "step {} loss {:.6} (inv {:.6}, red {:.6}) lr {:e}",
                row.step,
                row.loss.total,
                row.loss.invariance,
                row.loss.redundancy,
                row.lr
            );
            log.push(row);
        }
        Ok(log)
    }
}

/// Trains from scratch for `cfg.total_steps` steps.
pub fn train(
    dataset: &PatchDataset,
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<(EncoderParams, Vec<LogRow>)> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training dataset is empty".into()));
    }
    let mut trainer = Trainer::new(enc_cfg, cfg)?;
    if cfg.total_steps == 0 {
        return Ok((trainer.into_params(), vec![]));
    }
    let data = TrainingSet::prepare(dataset, cfg)?;
    let log = trainer.run(&data, cfg.total_steps)?;
    Ok((trainer.into_params(), log))
}
