//! Joint end-to-end training: the three losses, patch datasets with
//! image-disjoint splits, and the Adam loop that drives every variant.
//!
//! Measurement noise is a training-time regularizer. It lands on the initial
//! measurements and on every in-loop re-measurement of the latent, and
//! nowhere else; evaluation paths stay clean unless the caller asks for
//! noise explicitly.

use crate::bundle::{mask_node_raw, measure_node_raw, ModelBundle, Variant};
use crate::error::{Error, Result};
use crate::layers::BnCtx;
use crate::measurement::{add_noise, SamplingConfig};
use crate::recurrent::{run_recurrence, MeasureFn};
use crate::reference::psnr_from_mse;
use crate::strategy::reconstruct_batch;
use crate::tape::{Id, Tape};
use crate::tensor::{Element, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Weight of the measurement-consistency term in joint mode.
pub const LAMBDA_MEASUREMENT: f64 = 0.01;
/// Weight of the measured-residual term in joint mode.
pub const LAMBDA_RECURRENT: f64 = 0.01;
/// Global gradient-norm ceiling; long unrolls occasionally spike.
pub const CLIP_NORM: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    /// Pure pixel MSE, the preferred objective: every stage trains jointly
    /// under it and the auxiliary terms reach their minima alongside it.
    Mse,
    /// MSE plus small measurement and residual terms, for experimentation.
    JointAux,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Mse => "mse",
            LossMode::JointAux => "joint_aux",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(LossMode::Mse),
            "joint_aux" => Ok(LossMode::JointAux),
            other => Err(Error::config(format!(
                "unknown loss mode '{other}', expected mse or joint_aux"
            ))),
        }
    }
}

/// Knobs for one training run. Structural choices (variant, block geometry,
/// widths) live on the bundle; this covers the loop itself.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub sampling_rate: f64,
    /// Unroll depth used for recurrent training steps.
    pub t_steps: usize,
    pub sigma_train: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub patch_size: usize,
    pub seed: u64,
    pub loss_mode: LossMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sampling_rate: 0.25,
            t_steps: 20,
            sigma_train: 0.1,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 16,
            epochs: 1,
            patch_size: 128,
            seed: 0,
            loss_mode: LossMode::Mse,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, cfg: &SamplingConfig) -> Result<()> {
        if self.sigma_train < 0.0 || !self.sigma_train.is_finite() {
            return Err(Error::config(format!(
                "sigma_train {} must be a non-negative number",
                self.sigma_train
            )));
        }
        if self.patch_size % cfg.block_h != 0 || self.patch_size % cfg.block_w != 0 {
            return Err(Error::config(format!(
                "patch size {} is not divisible by the {}x{} block",
                self.patch_size, cfg.block_h, cfg.block_w
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.t_steps == 0 {
            return Err(Error::config("t_steps must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("lr {} must be positive", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

fn fnv1a64(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Stable image-name hash into splits: two buckets in ten validate, one
/// tests, seven train. All patches of an image land in one split, so the
/// splits never share source content.
pub fn split_for_name(name: &str) -> Split {
    match fnv1a64(name) % 10 {
        0 | 1 => Split::Val,
        2 => Split::Test,
        _ => Split::Train,
    }
}

/// One patch: which image, where, and which split it inherited.
#[derive(Clone, Copy, Debug)]
pub struct PatchRef {
    pub image: usize,
    pub y: usize,
    pub x: usize,
    pub split: Split,
}

/// Source images plus a deterministic patch index over them.
pub struct PatchDataset<E: Element> {
    pub images: Vec<(String, Tensor<E>)>,
    pub patches: Vec<PatchRef>,
    pub patch_size: usize,
}

impl<E: Element> PatchDataset<E> {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn split_ids(&self, split: Split) -> Vec<usize> {
        (0..self.patches.len()).filter(|&i| self.patches[i].split == split).collect()
    }

    pub fn channels(&self) -> usize {
        self.images.first().map(|(_, t)| t.shape()[3]).unwrap_or(0)
    }

    /// Copies the patches behind `ids` into one [k, p, p, c] batch.
    pub fn batch(&self, ids: &[usize]) -> Result<Tensor<E>> {
        if ids.is_empty() {
            return Err(Error::train("cannot assemble an empty batch"));
        }
        let p = self.patch_size;
        let c = self.channels();
        let mut out = Tensor::zeros([ids.len(), p, p, c]);
        for (k, &i) in ids.iter().enumerate() {
            let r = self.patches.get(i).ok_or_else(|| {
                Error::train(format!("patch index {i} out of range ({})", self.patches.len()))
            })?;
            let img = &self.images[r.image].1;
            for y in 0..p {
                for x in 0..p {
                    for ch in 0..c {
                        out.set(k, y, x, ch, img.at(0, r.y + y, r.x + x, ch));
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn patch(&self, i: usize) -> Result<Tensor<E>> {
        self.batch(&[i])
    }
}

/// Walks every image in raster order, keeping each patch with its image's
/// split. Undersized images contribute nothing and are reported, not fatal.
pub fn extract_patches<E: Element>(
    images: Vec<(String, Tensor<E>)>,
    patch_size: usize,
    stride: usize,
) -> Result<PatchDataset<E>> {
    if patch_size == 0 || stride == 0 {
        return Err(Error::config("patch size and stride must be positive"));
    }
    let mut channels = None;
    let mut patches = Vec::new();
    for (idx, (name, img)) in images.iter().enumerate() {
        let [n, h, w, c] = img.shape();
        if n != 1 {
            return Err(Error::config(format!(
                "source image {name} must be a single frame, got batch of {n}"
            )));
        }
        match channels {
            None => channels = Some(c),
            Some(expect) if expect != c => {
                return Err(Error::config(format!(
                    "source image {name} has {c} channels, expected {expect}"
                )));
            }
            _ => {}
        }
        if h < patch_size || w < patch_size {
            eprintln!("warning: image {name} ({h}x{w}) is smaller than a {patch_size} patch, skipping");
            continue;
        }
        let split = split_for_name(name);
        let mut y = 0;
        while y + patch_size <= h {
            let mut x = 0;
            while x + patch_size <= w {
                patches.push(PatchRef { image: idx, y, x, split });
                x += stride;
            }
            y += stride;
        }
    }
    Ok(PatchDataset { images, patches, patch_size })
}

/// Mean over all elements of the squared difference, on tape.
pub fn loss_mse_node<E: Element>(tape: &mut Tape<E>, x_hat: Id, x: Id) -> Result<Id> {
    tape.mse(x_hat, x)
}

/// Mean over the batch of (‖F(x̂−x)‖² − ‖x̂−x‖²)²: zero exactly when the
/// sampler preserves the energy of every per-image error.
pub fn loss_measurement_node<E: Element>(
    tape: &mut Tape<E>,
    f: &mut MeasureFn<E>,
    x_hat: Id,
    x: Id,
) -> Result<Id> {
    let d = tape.sub(x_hat, x)?;
    let fd = f(tape, d)?;
    let measured = tape.sq_sum_per_sample(fd);
    let raw = tape.sq_sum_per_sample(d);
    let gap = tape.sub(measured, raw)?;
    let sq = tape.hadamard(gap, gap)?;
    Ok(tape.mean_all(sq))
}

/// Mean over the batch of ‖F(G(Ẑ)) − F(x)‖², with `g_z` the decoded output.
pub fn loss_recurrent_node<E: Element>(
    tape: &mut Tape<E>,
    f: &mut MeasureFn<E>,
    g_z: Id,
    x: Id,
) -> Result<Id> {
    let fg = f(tape, g_z)?;
    let fx = f(tape, x)?;
    let d = tape.sub(fg, fx)?;
    let per = tape.sq_sum_per_sample(d);
    Ok(tape.mean_all(per))
}

/// One row of the loss history CSV.
#[derive(Clone, Copy, Debug)]
pub struct EpochStat {
    pub epoch: usize,
    pub split: Split,
    pub loss: f64,
    pub psnr_db: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub history: Vec<EpochStat>,
    pub steps_taken: usize,
}

impl TrainReport {
    /// Train rows in epoch order, the series acceptance trends are read from.
    pub fn train_losses(&self) -> Vec<f64> {
        self.history
            .iter()
            .filter(|s| s.split == Split::Train)
            .map(|s| s.loss)
            .collect()
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("epoch,split,loss,psnr\n");
        for s in &self.history {
            out.push_str(&format!(
                "{},{},{:.8},{:.4}\n",
                s.epoch,
                s.split.as_str(),
                s.loss,
                s.psnr_db
            ));
        }
        out
    }
}

struct StepLoss {
    loss: f64,
    mse: f64,
}

fn train_step<E: Element>(
    bundle: &mut ModelBundle<E>,
    x: &Tensor<E>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<StepLoss> {
    let variant = bundle.variant;
    let sigma = cfg.sigma_train;
    let mut tape = Tape::new();
    let (binding, loss_id, mse_id) = {
        let ModelBundle {
            cfg: scfg,
            mask,
            arena,
            states,
            init,
            gates,
            net,
            measure,
            ..
        } = &mut *bundle;
        let binding = arena.bind(&mut tape);
        let mut ctx = BnCtx::train(states);
        let x_node = tape.leaf(x.clone());
        let y1 = mask_node_raw(&mut tape, x_node, mask, scfg)?;
        let mut m = measure_node_raw(&mut tape, &binding, y1, *measure)?;
        if sigma > 0.0 {
            let shape = tape.value(m).shape();
            let eps = tape.leaf(add_noise(&Tensor::zeros(shape), sigma, rng)?);
            m = tape.add(m, eps)?;
        }
        let z_hat = if variant == Variant::R2csNet {
            let gates = gates
                .as_ref()
                .ok_or_else(|| Error::train("recurrent variant is missing its gates"))?;
            let mut noisy_measure = |tp: &mut Tape<E>, z: Id| -> Result<Id> {
                let mz = measure_node_raw(tp, &binding, z, *measure)?;
                if sigma > 0.0 {
                    let shape = tp.value(mz).shape();
                    let eps = tp.leaf(add_noise(&Tensor::zeros(shape), sigma, rng)?);
                    tp.add(mz, eps)
                } else {
                    Ok(mz)
                }
            };
            run_recurrence(
                &mut tape,
                &binding,
                init,
                gates,
                m,
                cfg.t_steps,
                &mut noisy_measure,
                &mut ctx,
            )?
            .state
            .z
        } else {
            init.z0(&mut tape, &binding, m, &mut ctx)?
        };
        let x_hat = net.reconstruct(&mut tape, &binding, z_hat, &mut ctx)?;
        let mse_id = loss_mse_node(&mut tape, x_hat, x_node)?;
        let loss_id = match cfg.loss_mode {
            LossMode::Mse => mse_id,
            LossMode::JointAux => {
                let mut clean_f = |tp: &mut Tape<E>, u: Id| -> Result<Id> {
                    let y = mask_node_raw(tp, u, mask, scfg)?;
                    measure_node_raw(tp, &binding, y, *measure)
                };
                let lm = loss_measurement_node(&mut tape, &mut clean_f, x_hat, x_node)?;
                let lr = loss_recurrent_node(&mut tape, &mut clean_f, x_hat, x_node)?;
                let lm_w = tape.scale(lm, LAMBDA_MEASUREMENT);
                let lr_w = tape.scale(lr, LAMBDA_RECURRENT);
                let aux = tape.add(lm_w, lr_w)?;
                tape.add(mse_id, aux)?
            }
        };
        (binding, loss_id, mse_id)
    };
    let loss = tape.scalar_value(loss_id);
    let mse = tape.scalar_value(mse_id);
    if !loss.is_finite() {
        return Err(Error::train(format!(
            "loss became non-finite (loss {loss}, mse {mse}, sigma {sigma}, lr {})",
            cfg.lr
        )));
    }
    tape.backward(loss_id)?;
    bundle.arena.zero_grads();
    bundle.arena.accumulate_grads(&tape, &binding);
    drop(tape);
    if !bundle.variant.learns_measurement() {
        for p in bundle.arena.iter_mut() {
            if p.name == "measure.weights" {
                p.grad = Tensor::zeros(p.value.shape());
            }
        }
    }
    bundle.arena.clip_global_norm(CLIP_NORM);
    bundle
        .arena
        .adam_step(cfg.lr, cfg.beta1, cfg.beta2, cfg.epsilon);
    Ok(StepLoss { loss, mse })
}

fn validation_mse<E: Element>(
    bundle: &ModelBundle<E>,
    data: &PatchDataset<E>,
    ids: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in ids.chunks(cfg.batch_size) {
        let xb = data.batch(chunk)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).rotate_left(17));
        let out = reconstruct_batch(bundle, &xb, 0.0, cfg.t_steps, &mut rng)?;
        total += crate::reference::naive_loss_mse(&out.image, &xb) * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

/// Runs the full loop over the dataset's train split, mutating the bundle in
/// place. Per epoch the history gains a train row and, when the dataset has
/// a validation split, a clean-measurement val row. Identical seeds and
/// configs give identical histories and weights.
pub fn train<E: Element>(
    bundle: &mut ModelBundle<E>,
    data: &PatchDataset<E>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate(&bundle.cfg)?;
    if data.patch_size != cfg.patch_size {
        return Err(Error::config(format!(
            "dataset holds {} patches but the config says {}",
            data.patch_size, cfg.patch_size
        )));
    }
    let mut train_ids = data.split_ids(Split::Train);
    let val_ids = data.split_ids(Split::Val);
    if train_ids.is_empty() {
        return Err(Error::train("dataset has no training patches"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = TrainReport::default();
    for epoch in 0..cfg.epochs {
        train_ids.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut mse_sum = 0.0;
        let mut seen = 0usize;
        for chunk in train_ids.chunks(cfg.batch_size) {
            let xb = data.batch(chunk)?;
            let step = train_step(bundle, &xb, cfg, &mut rng).map_err(|e| {
                Error::train(format!("epoch {epoch}, step {}: {e}", report.steps_taken))
            })?;
            loss_sum += step.loss * chunk.len() as f64;
            mse_sum += step.mse * chunk.len() as f64;
            seen += chunk.len();
            report.steps_taken += 1;
        }
        let loss = loss_sum / seen as f64;
        let mse = mse_sum / seen as f64;
        report.history.push(EpochStat {
            epoch,
            split: Split::Train,
            loss,
            psnr_db: psnr_from_mse(mse, 1.0, 100.0),
        });
        if !val_ids.is_empty() {
            let vmse = validation_mse(bundle, data, &val_ids, cfg, epoch)?;
            report.history.push(EpochStat {
                epoch,
                split: Split::Val,
                loss: vmse,
                psnr_db: psnr_from_mse(vmse, 1.0, 100.0),
            });
        }
    }
    let meta = &mut bundle.meta;
    meta.insert("train_steps".into(), report.steps_taken.to_string());
    meta.insert("train_epochs".into(), cfg.epochs.to_string());
    meta.insert("train_sigma".into(), cfg.sigma_train.to_string());
    meta.insert("train_lr".into(), cfg.lr.to_string());
    meta.insert("train_batch".into(), cfg.batch_size.to_string());
    meta.insert("train_patch".into(), cfg.patch_size.to_string());
    meta.insert("train_seed".into(), cfg.seed.to_string());
    meta.insert("train_loss_mode".into(), cfg.loss_mode.as_str().into());
    meta.insert("train_unroll".into(), cfg.t_steps.to_string());
    Ok(report)
}
