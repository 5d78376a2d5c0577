//! Five-term loss, paired batch assembly, and the staged training loop.
//!
//! Training runs in three phases: self-reconstruction of the effect path,
//! adversarial engagement of the two environment classifiers through
//! gradient reversal, and joint training of everything including the
//! variance adaptor. Modules outside the active phase receive no parameter
//! updates.

mod batch;

pub use batch::{make_batch, PairKind, TrainBatch};

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use ndarray::{Array2, Array3};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{EnvironmentLabel, Split};
use crate::error::{Error, Result};
use crate::features::FeatureSet;
use crate::model::{
    checkpoint, grl_non_target, ClassifierSide, Model, ModelConfig, ParamGroup,
};
use crate::nn::{ops, Adam, AdamConfig, Tensor};

/// Optimization hyperparameters. Serialized into every checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub checkpoint_every: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Steps in phase 1; defaults to 10% of the total when unset.
    pub phase1_steps: Option<u64>,
    /// Steps in phase 2; defaults to 10% of the total when unset.
    pub phase2_steps: Option<u64>,
    /// Probability that a sample pairs with itself (vs. a same-environment
    /// reference) outside phase 1.
    pub self_pair_prob: f64,
    /// Batch sampler seed.
    pub seed: u64,
    /// Train only each phase's newly engaged modules instead of everything
    /// engaged so far.
    pub strict_phase_freezing: bool,
    pub loss_weights: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 16,
            total_steps: 900_000,
            checkpoint_every: 10_000,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-9,
            phase1_steps: None,
            phase2_steps: None,
            self_pair_prob: 0.5,
            seed: 1234,
            strict_phase_freezing: false,
            loss_weights: LossWeights::default(),
        }
    }
}

/// Multipliers on the five loss terms (all 1 by default, i.e. a plain sum).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub recon: f64,
    pub pitch: f64,
    pub energy: f64,
    pub adv_content: f64,
    pub adv_effect: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 1.0,
            pitch: 1.0,
            energy: 1.0,
            adv_content: 1.0,
            adv_effect: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.total_steps == 0 || self.checkpoint_every == 0 {
            return Err(Error::Config(
                "batch_size, total_steps, and checkpoint_every must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.self_pair_prob) {
            return Err(Error::Config("self_pair_prob must lie in [0, 1]".into()));
        }
        let (p1, p2) = self.phase_lengths();
        if p1 + p2 > self.total_steps {
            return Err(Error::Config(format!(
                "phase boundaries ({p1} + {p2}) exceed total_steps {}",
                self.total_steps
            )));
        }
        Ok(())
    }

    /// Steps in phases 1 and 2 (defaults: 10% each).
    pub fn phase_lengths(&self) -> (u64, u64) {
        let p1 = self.phase1_steps.unwrap_or(self.total_steps / 10);
        let p2 = self.phase2_steps.unwrap_or(self.total_steps / 10);
        (p1, p2)
    }

    pub fn phase_of(&self, step: u64) -> Phase {
        let (p1, p2) = self.phase_lengths();
        if step < p1 {
            Phase::SelfReconstruction
        } else if step < p1 + p2 {
            Phase::Adversarial
        } else {
            Phase::Joint
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            epsilon: self.adam_eps,
        }
    }
}

/// The three stages of the schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    SelfReconstruction,
    Adversarial,
    Joint,
}

impl Phase {
    pub fn number(self) -> u8 {
        match self {
            Phase::SelfReconstruction => 1,
            Phase::Adversarial => 2,
            Phase::Joint => 3,
        }
    }

    /// Parameter groups updated during this phase.
    fn active_groups(self, strict: bool) -> Vec<ParamGroup> {
        let p1 = vec![
            ParamGroup::Encoder,
            ParamGroup::EffectExtractor,
            ParamGroup::EffectEncoder,
            ParamGroup::Decoder,
        ];
        match (self, strict) {
            (Phase::SelfReconstruction, _) => p1,
            (Phase::Adversarial, false) => {
                let mut g = p1;
                g.push(ParamGroup::ContentClassifier);
                g.push(ParamGroup::EffectClassifier);
                g
            }
            (Phase::Adversarial, true) => {
                vec![ParamGroup::ContentClassifier, ParamGroup::EffectClassifier]
            }
            (Phase::Joint, _) => ParamGroup::ALL.to_vec(),
        }
    }
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Masked reconstruction loss: mean squared error over valid frames.
pub fn loss_recon(mel_pred: &Tensor, target: &Array3<f64>, mask: &Array2<bool>) -> Tensor {
    ops::masked_mse(mel_pred, target, mask)
}

/// Pitch loss in log-Hz over frames that are both valid and voiced. An
/// all-unvoiced batch contributes exactly 0.
pub fn loss_pitch(pitch_pred: &Tensor, pitch_hz: &Array2<f64>, valid: &Array2<bool>) -> Tensor {
    let (b, t) = pitch_hz.dim();
    let mut target = Array3::<f64>::zeros((b, t, 1));
    let mut voiced = Array2::from_elem((b, t), false);
    for bi in 0..b {
        for ti in 0..t {
            if valid[[bi, ti]] && pitch_hz[[bi, ti]] > 0.0 {
                voiced[[bi, ti]] = true;
                target[[bi, ti, 0]] = pitch_hz[[bi, ti]].ln();
            }
        }
    }
    ops::masked_mse(pitch_pred, &target, &voiced)
}

/// Energy loss over valid frames.
pub fn loss_energy(energy_pred: &Tensor, energy: &Array2<f64>, valid: &Array2<bool>) -> Tensor {
    let (b, t) = energy.dim();
    let mut target = Array3::<f64>::zeros((b, t, 1));
    for bi in 0..b {
        for ti in 0..t {
            target[[bi, ti, 0]] = energy[[bi, ti]];
        }
    }
    ops::masked_mse(energy_pred, &target, valid)
}

/// Content-side adversarial loss: cross-entropy of the content classifier
/// on the gradient-reversed encoder output.
pub fn loss_adv_content(
    model: &Model,
    content_latent: &Tensor,
    mask: &Array2<bool>,
    labels: &[EnvironmentLabel],
) -> Tensor {
    let reversed = ops::grl(content_latent);
    let logits = model.classify_environment(&reversed, mask, ClassifierSide::Content);
    let ids: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    ops::cross_entropy(&logits, &ids)
}

/// Effect-side adversarial loss: cross-entropy of the effect classifier on
/// the effect spectrum, routed through the non-target gradient reversal.
pub fn loss_adv_effect(
    model: &Model,
    effect_spectrum: &Tensor,
    mask: &Array2<bool>,
    labels: &[EnvironmentLabel],
    targets: &[EnvironmentLabel],
) -> Tensor {
    let routed = grl_non_target(effect_spectrum, labels, targets);
    let logits = model.classify_environment(&routed, mask, ClassifierSide::Effect);
    let ids: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    ops::cross_entropy(&logits, &ids)
}

/// Sum named loss components, rejecting non-finite values by name.
pub fn loss_total(components: &[(&str, &Tensor)]) -> Result<Tensor> {
    for (name, t) in components {
        let v = t.scalar();
        if !v.is_finite() {
            return Err(Error::Training(format!(
                "loss component '{name}' is not finite ({v})"
            )));
        }
    }
    let terms: Vec<Tensor> = components.iter().map(|(_, t)| (*t).clone()).collect();
    Ok(ops::sum_scalars(&terms))
}

/// Scalar values of the five components plus their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub recon: f64,
    pub pitch: f64,
    pub energy: f64,
    pub adv_content: f64,
    pub adv_effect: f64,
    pub total: f64,
}

/// The five loss tensors of one forward pass.
pub struct LossGraph {
    pub recon: Tensor,
    pub pitch: Tensor,
    pub energy: Tensor,
    pub adv_content: Tensor,
    pub adv_effect: Tensor,
}

impl LossGraph {
    pub fn values(&self) -> LossValues {
        let recon = self.recon.scalar();
        let pitch = self.pitch.scalar();
        let energy = self.energy.scalar();
        let adv_content = self.adv_content.scalar();
        let adv_effect = self.adv_effect.scalar();
        LossValues {
            recon,
            pitch,
            energy,
            adv_content,
            adv_effect,
            total: recon + pitch + energy + adv_content + adv_effect,
        }
    }
}

/// Run the full training forward pass and build all five loss terms.
///
/// During training the reference's conversion target is its own environment
/// label, so the effect-side reversal passes gradients through unreversed;
/// the mechanism still carries per-sample signs for any other target.
pub fn compute_losses(model: &Model, batch: &TrainBatch, train_mode: bool) -> Result<LossGraph> {
    let x = Tensor::constant(batch.x.clone().into_dyn());
    let y = Tensor::constant(batch.y.clone().into_dyn());

    let enc = model.encode(&x, &batch.x_mask)?;
    let effect = model.extract_effect(&y, &batch.y_mask, train_mode)?;
    let cond = model.encode_effect(&effect, 1.0, &batch.y_mask)?;
    let var = model.variance_forward(
        &enc,
        &batch.x_mask,
        Some((&batch.pitch, &batch.energy)),
    );
    let z = ops::add(&ops::add(&enc, &cond), &var.embedding);
    let mel_pred = model.decode(&z, &batch.x_mask);

    Ok(LossGraph {
        recon: loss_recon(&mel_pred, &batch.x, &batch.x_mask),
        pitch: loss_pitch(&var.pitch_pred, &batch.pitch, &batch.x_mask),
        energy: loss_energy(&var.energy_pred, &batch.energy, &batch.x_mask),
        adv_content: loss_adv_content(model, &enc, &batch.x_mask, &batch.x_env),
        adv_effect: loss_adv_effect(
            model,
            &effect,
            &batch.y_mask,
            &batch.y_env,
            &batch.y_env,
        ),
    })
}

// ---------------------------------------------------------------------------
// The training loop
// ---------------------------------------------------------------------------

pub const TRAIN_LOG: &str = "train_log.tsv";
pub const FINAL_CHECKPOINT: &str = "checkpoint_final.ckpt";

/// What [`train`] leaves behind.
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub periodic_checkpoints: Vec<PathBuf>,
    pub log_path: PathBuf,
    pub history: Vec<LossValues>,
}

fn config_json(model_cfg: &ModelConfig, train_cfg: &TrainConfig) -> String {
    serde_json::json!({ "model": model_cfg, "train": train_cfg }).to_string()
}

/// Train (or resume) on the train split of `features`, writing checkpoints
/// and a per-step loss log under `out_dir`.
pub fn train(
    model: &Model,
    train_cfg: &TrainConfig,
    features: &FeatureSet,
    out_dir: &Path,
    resume: Option<&checkpoint::CheckpointData>,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let registry = model.registry();
    let mut adam = Adam::new(train_cfg.adam_config(), registry.tensors());
    let mut rng = ChaCha20Rng::seed_from_u64(train_cfg.seed);
    let mut start_step = 0u64;

    if let Some(data) = resume {
        checkpoint::restore_model(model, &registry, data)?;
        checkpoint::restore_adam(&mut adam, &registry, data)?;
        rng = ChaCha20Rng::from_seed(data.rng_seed);
        rng.set_word_pos(data.rng_word_pos);
        start_step = data.step;
        info!("resuming from step {start_step}");
    }

    let groups = features.by_environment(Split::Train);
    let train_indices = features.indices_for_split(Split::Train);
    if train_indices.is_empty() {
        return Err(Error::Training("no records in the train split".into()));
    }

    let log_path = out_dir.join(TRAIN_LOG);
    let mut log = if start_step == 0 {
        let mut f = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
        writeln!(f, "step\tphase\trecon\tpitch\tenergy\tadv_content\tadv_effect\ttotal")
            .map_err(|e| Error::io(&log_path, e))?;
        f
    } else {
        fs::OpenOptions::new()
            .append(true)
            .create(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?
    };

    let cfg_json = config_json(&model.config, train_cfg);
    let weights = train_cfg.loss_weights;
    let mut history = Vec::new();
    let mut periodic = Vec::new();

    for step in start_step..train_cfg.total_steps {
        let phase = train_cfg.phase_of(step);
        let batch = make_batch(
            features,
            &groups,
            &train_indices,
            train_cfg.batch_size,
            model.config.max_frames,
            phase == Phase::SelfReconstruction,
            train_cfg.self_pair_prob,
            &mut rng,
        )?;

        let losses = compute_losses(model, &batch, true)?;
        let values = losses.values();
        for (name, v) in [
            ("recon", values.recon),
            ("pitch", values.pitch),
            ("energy", values.energy),
            ("adv_content", values.adv_content),
            ("adv_effect", values.adv_effect),
        ] {
            if !v.is_finite() {
                return Err(Error::Training(format!(
                    "loss component '{name}' became non-finite at step {step}"
                )));
            }
        }

        // The optimized objective includes only the phase's components.
        let recon_w = ops::scale(&losses.recon, weights.recon);
        let mut active_losses: Vec<(&str, &Tensor)> = vec![("recon", &recon_w)];
        let pitch_w = ops::scale(&losses.pitch, weights.pitch);
        let energy_w = ops::scale(&losses.energy, weights.energy);
        let adv_c_w = ops::scale(&losses.adv_content, weights.adv_content);
        let adv_e_w = ops::scale(&losses.adv_effect, weights.adv_effect);
        if phase != Phase::SelfReconstruction {
            active_losses.push(("adv_content", &adv_c_w));
            active_losses.push(("adv_effect", &adv_e_w));
        }
        if phase == Phase::Joint {
            active_losses.push(("pitch", &pitch_w));
            active_losses.push(("energy", &energy_w));
        }
        let total = loss_total(&active_losses)?;
        total.backward();

        let active = phase.active_groups(train_cfg.strict_phase_freezing);
        adam.step(&|i| active.contains(&registry.group_of(i)));

        writeln!(
            log,
            "{step}\t{}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}\t{:.9e}",
            phase.number(),
            values.recon,
            values.pitch,
            values.energy,
            values.adv_content,
            values.adv_effect,
            values.total
        )
        .map_err(|e| Error::io(&log_path, e))?;
        history.push(values);

        let done = step + 1;
        if done % train_cfg.checkpoint_every == 0 {
            let path = out_dir.join(format!("checkpoint_step{done:08}.ckpt"));
            save_state(&path, model, &registry, &adam, &cfg_json, done, &rng)?;
            periodic.push(path);
        }
    }

    let final_path = out_dir.join(FINAL_CHECKPOINT);
    save_state(
        &final_path,
        model,
        &registry,
        &adam,
        &cfg_json,
        train_cfg.total_steps,
        &rng,
    )?;

    Ok(TrainOutcome {
        final_checkpoint: final_path,
        periodic_checkpoints: periodic,
        log_path,
        history,
    })
}

fn save_state(
    path: &Path,
    model: &Model,
    registry: &crate::model::ParamRegistry,
    adam: &Adam,
    cfg_json: &str,
    step: u64,
    rng: &ChaCha20Rng,
) -> Result<()> {
    let data = checkpoint::snapshot(
        model,
        registry,
        Some(adam),
        cfg_json.to_string(),
        step,
        rng.get_seed(),
        rng.get_word_pos(),
    );
    checkpoint::save_checkpoint(path, &data)
}

/// Parse the model/train configs back out of a checkpoint blob.
pub fn configs_from_checkpoint(data: &checkpoint::CheckpointData) -> Result<(ModelConfig, TrainConfig)> {
    let v: serde_json::Value = serde_json::from_str(&data.config_json)
        .map_err(|e| Error::Checkpoint(format!("bad config JSON: {e}")))?;
    let model = serde_json::from_value(
        v.get("model")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("checkpoint config lacks 'model'".into()))?,
    )
    .map_err(|e| Error::Checkpoint(format!("bad model config: {e}")))?;
    let train = match v.get("train") {
        Some(t) => serde_json::from_value(t.clone())
            .map_err(|e| Error::Checkpoint(format!("bad train config: {e}")))?,
        None => TrainConfig::default(),
    };
    Ok((model, train))
}


/// Eval-mode classifier accuracies over a split: (content-side, effect-side).
///
/// Each record is classified from its own features; the content side sees
/// the encoder latent, the effect side the extracted effect spectrum.
pub fn classifier_accuracies(
    model: &Model,
    features: &FeatureSet,
    split: Split,
) -> Result<(f64, f64)> {
    let indices = features.indices_for_split(split);
    if indices.is_empty() {
        return Err(Error::Training(format!("no records in split {split}")));
    }
    let max_frames = model.config.max_frames;
    let mut content_hits = 0usize;
    let mut effect_hits = 0usize;
    for &i in &indices {
        let r = &features.records[i];
        let mel = r.mel.pad_to(max_frames)?;
        let t = mel.valid_len();
        let mut x = Array3::<f64>::zeros((1, max_frames, model.config.n_mels));
        x.index_axis_mut(ndarray::Axis(0), 0).assign(mel.frames());
        let mut mask = Array2::from_elem((1, max_frames), false);
        for ti in 0..t {
            mask[[0, ti]] = true;
        }
        let xt = Tensor::constant(x.into_dyn());

        let enc = model.encode(&xt, &mask)?;
        let content_logits = model.classify_environment(&enc, &mask, ClassifierSide::Content);
        let effect = model.extract_effect(&xt, &mask, false)?;
        let effect_logits = model.classify_environment(&effect, &mask, ClassifierSide::Effect);

        let argmax = |t: &Tensor| -> usize {
            let v = t.value();
            let mut best = 0;
            for k in 1..v.shape()[1] {
                if v[[0, k]] > v[[0, best]] {
                    best = k;
                }
            }
            best
        };
        if argmax(&content_logits) == r.environment.index() {
            content_hits += 1;
        }
        if argmax(&effect_logits) == r.environment.index() {
            effect_hits += 1;
        }
    }
    let n = indices.len() as f64;
    Ok((content_hits as f64 / n, effect_hits as f64 / n))
}
